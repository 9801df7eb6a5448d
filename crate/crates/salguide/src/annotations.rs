//! Bounding-box annotations and their union mask at saliency resolution.

use crate::error::{Error, Result};

/// Inclusive pixel-coordinate box in input-image space.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 || self.x1 >= image_size || self.y1 >= image_size
        {
            return Err(Error::InvalidParameter(format!(
                "box ({},{},{},{}) invalid for {}x{} image",
                self.x0, self.y0, self.x1, self.y1, image_size, image_size
            )));
        }
        Ok(())
    }
}

/// Inclusive cell-coordinate box on the saliency grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GridBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GridBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

/// Binary union mask at saliency resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source_box_count: usize,
}

impl Mask {
    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }
}

/// Map an image-space box onto the saliency grid with floor on both ends,
/// so any partially covered cell counts as inside.
pub fn box_to_grid(b: &BBox, image_size: usize, saliency_size: usize) -> Result<GridBox> {
    b.validate(image_size)?;
    if saliency_size == 0 || image_size % saliency_size != 0 {
        return Err(Error::InvalidParameter(format!(
            "image size {} not divisible by saliency size {}",
            image_size, saliency_size
        )));
    }
    let f = image_size / saliency_size;
    Ok(GridBox {
        x0: b.x0 / f,
        y0: b.y0 / f,
        x1: b.x1 / f,
        y1: b.y1 / f,
    })
}

/// Union of all rasterized boxes; empty list gives an all-zero mask.
pub fn rasterize_union(boxes: &[BBox], image_size: usize, saliency_size: usize) -> Result<Mask> {
    let mut grid = vec![0.0; saliency_size * saliency_size];
    for b in boxes {
        let g = box_to_grid(b, image_size, saliency_size)?;
        for y in g.y0..=g.y1 {
            for x in g.x0..=g.x1 {
                grid[y * saliency_size + x] = 1.0;
            }
        }
    }
    Ok(Mask {
        grid,
        height: saliency_size,
        width: saliency_size,
        source_box_count: boxes.len(),
    })
}
