//! Network-level operations built from the tensor primitives.
//!
//! Everything here stays differentiable through the graph, including the
//! backward rules themselves, so second-order passes work end to end.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

thread_local! {
    // Index vectors for pad/patch/permute/broadcast gathers depend only on
    // shapes, so they are built once per shape and shared across forwards.
    static IDX_CACHE: RefCell<HashMap<(u8, Vec<usize>), Rc<Vec<usize>>>> =
        RefCell::new(HashMap::new());
}

fn cached_idx(tag: u8, key: &[usize], build: impl FnOnce() -> Vec<usize>) -> Rc<Vec<usize>> {
    IDX_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((tag, key.to_vec()))
            .or_insert_with(|| Rc::new(build()))
            .clone()
    })
}

/// Cross-correlation of [n,cin,h,w] with [cout,cin,kh,kw] kernels.
///
/// Lowered to a patch matrix times the flattened kernel; all steps are
/// linear gathers and one matmul, so the op is differentiable in input,
/// kernel, and bias to any order.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 || kshape.len() != 4 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("need rank-4 input/kernel, got {:?} / {:?}", ishape, kshape),
        });
    }
    let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![cout, cin, kh, kw],
            got: kshape.to_vec(),
        });
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![cout],
            got: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("conv2d stride must be positive".into()));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if kh > hp || kw > wp {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, hp, wp),
        });
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;

    // Zero-pad by scattering into the larger grid.
    let padded = if padding == 0 {
        input.clone()
    } else {
        let idx = cached_idx(0, &[n, cin, h, w, padding], || {
            let mut idx = Vec::with_capacity(n * cin * h * w);
            for b in 0..n {
                for c in 0..cin {
                    for i in 0..h {
                        for j in 0..w {
                            idx.push(((b * cin + c) * hp + i + padding) * wp + j + padding);
                        }
                    }
                }
            }
            idx
        });
        input.scatter_add(idx, &[n, cin, hp, wp])
    };

    // Patch matrix: one row per output position, one column per kernel tap.
    let rows = n * oh * ow;
    let cols = cin * kh * kw;
    let idx = cached_idx(1, &[n, cin, hp, wp, kh, kw, stride], || {
        let mut idx = Vec::with_capacity(rows * cols);
        for b in 0..n {
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = oi * stride;
                    let j0 = oj * stride;
                    for c in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                idx.push(((b * cin + c) * hp + i0 + ki) * wp + j0 + kj);
                            }
                        }
                    }
                }
            }
        }
        idx
    });
    let patches = padded.gather(idx, &[rows, cols]);

    let kmat = kernel.reshape(&[cout, cols])?;
    let out = patches.matmul(&kmat.transpose2())?; // [rows, cout]

    let bias_idx = cached_idx(2, &[rows, cout], || (0..rows * cout).map(|i| i % cout).collect());
    let bias_b = bias.gather(bias_idx, &[rows, cout]);
    let out = out.add(&bias_b)?;

    // [n, oh, ow, cout] -> [n, cout, oh, ow]
    let perm = cached_idx(3, &[n, cout, oh, ow], || {
        let mut perm = Vec::with_capacity(rows * cout);
        for b in 0..n {
            for c in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        perm.push(((b * oh + oi) * ow + oj) * cout + c);
                    }
                }
            }
        }
        perm
    });
    Ok(out.gather(perm, &[n, cout, oh, ow]))
}

/// Affine map x[n,f] * weight[out,f]^T + bias[out].
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: xs.to_vec(),
            got: ws.to_vec(),
        });
    }
    let (n, out) = (xs[0], ws[0]);
    if bias.shape() != [out] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: vec![out],
            got: bias.shape().to_vec(),
        });
    }
    let y = x.matmul(&weight.transpose2())?;
    let bias_idx = cached_idx(2, &[n, out], || (0..n * out).map(|i| i % out).collect());
    let bias_b = bias.gather(bias_idx, &[n, out]);
    y.add(&bias_b)
}

/// 2x2 max pooling with stride 2; gradient routes to the argmax position.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2",
            msg: format!("need rank-4 input with even spatial dims, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let v = x.values();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + (2 * oi) * w + 2 * oj;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let cand = base + (2 * oi + di) * w + 2 * oj + dj;
                            if v[cand] > v[best] {
                                best = cand;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    Ok(x.gather(Rc::new(idx), &[n, c, oh, ow]))
}

/// Per-channel spatial mean: [n,c,h,w] -> [n,c].
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(Error::InvalidShape {
            op: "global_avg_pool",
            msg: format!("need rank-4 input with nonempty spatial dims, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = x.reshape(&[n * c, h * w])?;
    let ones = Tensor::ones(&[h * w, 1]);
    let sums = flat.matmul(&ones)?;
    sums.scale(1.0 / (h * w) as f64).reshape(&[n, c])
}

/// Row-wise softmax over two logits, max-shifted for stability.
pub fn softmax2(z: &Tensor) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 2 || s[1] != 2 {
        return Err(Error::InvalidShape {
            op: "softmax2",
            msg: format!("need [n,2] logits, got {:?}", s),
        });
    }
    let n = s[0];
    let v = z.values();
    let mut shift = Vec::with_capacity(2 * n);
    for i in 0..n {
        let m = v[2 * i].max(v[2 * i + 1]);
        shift.push(m);
        shift.push(m);
    }
    let shift = Tensor::from_values(&[n, 2], shift)?;
    let e = z.sub(&shift)?.exp();
    let row_sum = e.matmul(&Tensor::ones(&[2, 1]))?; // [n,1]
    let dup_idx = cached_idx(4, &[n], || (0..2 * n).map(|i| i / 2).collect());
    let denom = row_sum.gather(dup_idx, &[n, 2]);
    e.div(&denom)
}

/// Inverted dropout: zero with probability p and scale survivors by 1/(1-p).
/// Identity outside training.
pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "dropout probability must be in [0,1), got {}",
            p
        )));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    let mask = Tensor::from_values(x.shape(), mask)?;
    Ok(x.mul(&mask)?.scale(1.0 / (1.0 - p)))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Full reduction to a scalar tensor.
pub fn reduce(x: &Tensor, kind: Reduction) -> Tensor {
    match kind {
        Reduction::Sum => x.sum(),
        Reduction::Mean => x.mean(),
    }
}
