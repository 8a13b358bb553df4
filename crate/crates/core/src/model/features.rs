//! Grid features and their binary file format.
//!
//! A file is a sequence of records, each (little endian):
//!
//! ```text
//! b"PTSNGRD1"  u32 n_grid  u32 dim  u32 h  u32 w   (h = w = 0: no layout)
//! n_grid * dim f32 values, row major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GRID_MAGIC: &[u8; 8] = b"PTSNGRD1";

/// `n_grid x dim` visual features with an optional `h x w` spatial layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatures {
    features: Tensor,
    layout: Option<(usize, usize)>,
}

impl GridFeatures {
    pub fn new(features: Tensor, layout: Option<(usize, usize)>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if let Some((h, w)) = layout {
            if h * w != n {
                return Err(Error::shape(format!("layout {h}x{w} does not cover {n} grid cells")));
            }
        }
        if !features.is_finite() {
            return Err(Error::data("grid features contain non-finite values"));
        }
        Ok(GridFeatures { features, layout })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn layout(&self) -> Option<(usize, usize)> {
        self.layout
    }

    pub fn n_grid(&self) -> usize {
        self.features.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    fn encode(&self, buf: &mut Vec<u8>) {
        let (h, w) = self.layout.unwrap_or((0, 0));
        buf.extend_from_slice(GRID_MAGIC);
        for v in [self.n_grid(), self.dim(), h, w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in self.features.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Writes records back to back. Values are stored as `f32`.
pub fn save_grid_features(path: &Path, items: &[GridFeatures]) -> Result<()> {
    let mut buf = Vec::new();
    for g in items {
        g.encode(&mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_grid_features(path: &Path) -> Result<Vec<GridFeatures>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let corrupt = |msg: &str| Error::data(format!("{}: record {}: {msg}", path.display(), out.len()));
        let head = bytes.get(pos..pos + 24).ok_or_else(|| corrupt("truncated header"))?;
        if &head[..8] != GRID_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let field = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (n, d, h, w) = (field(0), field(1), field(2), field(3));
        if n == 0 || d == 0 {
            return Err(corrupt("empty grid"));
        }
        pos += 24;
        let raw = bytes.get(pos..pos + n * d * 4).ok_or_else(|| corrupt("truncated values"))?;
        pos += n * d * 4;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let layout = (h != 0 || w != 0).then_some((h, w));
        out.push(GridFeatures::new(Tensor::new(vec![n, d], data)?, layout).map_err(|e| corrupt(&e.to_string()))?);
    }
    Ok(out)
}

/// `h x w x 3` image for the toy encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[2] != 3 {
            return Err(Error::shape(format!("image must be h x w x 3, got {:?}", pixels.shape())));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    /// Flattens non-overlapping `p x p` patches in row-major patch order;
    /// each row is the patch's pixels in (y, x, channel) order.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let (h, w) = (self.height(), self.width());
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!("{h}x{w} image is not divisible into {p}-pixel patches")));
        }
        let px = self.pixels.data();
        let (gh, gw) = (h / p, w / p);
        let mut out = Vec::with_capacity(h * w * 3);
        for py in 0..gh {
            for pxi in 0..gw {
                for y in 0..p {
                    let row = ((py * p + y) * w + pxi * p) * 3;
                    out.extend_from_slice(&px[row..row + p * 3]);
                }
            }
        }
        Tensor::new(vec![gh * gw, p * p * 3], out)
    }
}
