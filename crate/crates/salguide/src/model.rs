//! Small convolutional binary classifier exposing the final convolutional
//! activations that Grad-CAM differentiates through.
//!
//! Three 3x3 conv stages with two 2x2 max-pools give a saliency grid at a
//! quarter of the input resolution (16x16 for 64x64 inputs).

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    conv2d, dropout, global_avg_pool, linear, maxpool2, Tensor,
};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 5] = b"SALG1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            channels: [8, 16, 16],
            kernel: 3,
            dropout_p: 0.3,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::InvalidParameter(format!(
                "input_size must be a positive multiple of 4, got {}",
                self.input_size
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter("channels must all be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidParameter("num_classes is fixed at 2".into()));
        }
        Ok(())
    }

    /// Spatial side of the final activation block (two stride-2 pools).
    pub fn saliency_size(&self) -> usize {
        self.input_size / 4
    }
}

/// Logits plus the retained final-conv activation block.
pub struct ForwardTrace {
    /// [n, 2]
    pub logits: Tensor,
    /// [n, c, hs, ws]; the exact tensor consumed by global pooling.
    pub activations: Tensor,
    pub saliency_dims: (usize, usize),
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// (name, shape) of every parameter, in checkpoint order.
fn param_specs(config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let [c0, c1, c2] = config.channels;
    let k = config.kernel;
    vec![
        ("conv1.weight", vec![c0, 1, k, k]),
        ("conv1.bias", vec![c0]),
        ("conv2.weight", vec![c1, c0, k, k]),
        ("conv2.bias", vec![c1]),
        ("conv3.weight", vec![c2, c1, k, k]),
        ("conv3.bias", vec![c2]),
        ("fc.weight", vec![2, c2]),
        ("fc.bias", vec![2]),
    ]
}

/// Fan-in-scaled uniform initialization; biases zero; reproducible from seed.
pub fn init_model(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    config.validate()?;
    let mut params = Vec::new();
    for (name, shape) in param_specs(config) {
        let n: usize = shape.iter().product();
        let values = if name.ends_with("bias") {
            vec![0.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.push(Tensor::parameter(&shape, values)?);
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl Model {
    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameter_names(&self) -> Vec<&'static str> {
        param_specs(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    /// Replace all parameters (e.g. after an optimizer step). Shapes must match.
    pub fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_parameters",
                    expected: old.shape().to_vec(),
                    got: new.shape().to_vec(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Forward pass on a [n,1,s,s] batch. In training mode dropout consumes
    /// from `rng`; in evaluation mode the pass is a pure function of
    /// (parameters, input).
    pub fn forward(
        &self,
        batch: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        let s = self.config.input_size;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "forward",
                expected: vec![shape.first().copied().unwrap_or(0), 1, s, s],
                got: shape.to_vec(),
            });
        }
        let pad = self.config.kernel / 2;
        let p = &self.params;

        let x = conv2d(batch, &p[0], &p[1], 1, pad)?.relu();
        let x = maxpool2(&x)?;
        let x = conv2d(&x, &p[2], &p[3], 1, pad)?.relu();
        let x = maxpool2(&x)?;
        let activations = conv2d(&x, &p[4], &p[5], 1, pad)?.relu();

        let pooled = global_avg_pool(&activations)?;
        let dropped = dropout(&pooled, self.config.dropout_p, training, rng)?;
        let logits = linear(&dropped, &p[6], &p[7])?;

        let hs = self.config.saliency_size();
        Ok(ForwardTrace {
            logits,
            activations,
            saliency_dims: (hs, hs),
        })
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let c = &model.config;
    push_u32(&mut buf, c.input_size);
    push_u32(&mut buf, c.channels.len());
    for &ch in &c.channels {
        push_u32(&mut buf, ch);
    }
    push_u32(&mut buf, c.kernel);
    buf.extend_from_slice(&c.dropout_p.to_le_bytes());
    push_u32(&mut buf, c.num_classes);
    push_u32(&mut buf, model.params.len());
    for p in &model.params {
        push_u32(&mut buf, p.shape().len());
        for &d in p.shape() {
            push_u32(&mut buf, d);
        }
        for &v in p.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CorruptCheckpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { data: &data, pos: 0 };

    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let input_size = r.u32()?;
    let n_channels = r.u32()?;
    if n_channels != 3 {
        return Err(Error::CorruptCheckpoint(format!(
            "expected 3 channel stages, got {}",
            n_channels
        )));
    }
    let channels = [r.u32()?, r.u32()?, r.u32()?];
    let kernel = r.u32()?;
    let dropout_p = r.f64()?;
    let num_classes = r.u32()?;
    let config = ModelConfig {
        input_size,
        channels,
        kernel,
        dropout_p,
        num_classes,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

    let specs = param_specs(&config);
    let n_params = r.u32()?;
    if n_params != specs.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} parameters, got {}",
            specs.len(),
            n_params
        )));
    }
    let mut params = Vec::new();
    for (name, expected_shape) in specs {
        let ndim = r.u32()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        if shape != expected_shape {
            return Err(Error::CorruptCheckpoint(format!(
                "shape mismatch for {}: expected {:?}, got {:?}",
                name, expected_shape, shape
            )));
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f64()?);
        }
        params.push(Tensor::parameter(&shape, values)?);
    }
    if r.pos != data.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Model { config, params })
}
