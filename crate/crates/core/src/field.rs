//! Images and displacement fields on a pixel grid.
//!
//! Points are `(x, y)` with `x` along columns and `y` along rows; `y` is
//! the superior-inferior axis of the phantom.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear sample of a row-major `width × height` plane at `(x, y)`,
/// clamping coordinates to the border.
pub fn bilinear(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let top = plane[y0 * width + x0] * (1.0 - fx) + plane[y0 * width + x1] * fx;
    let bottom = plane[y1 * width + x0] * (1.0 - fx) + plane[y1 * width + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("image", format!("{width}×{height} image with {} pixels", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    /// `H × W × 1` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.data.clone()).expect("consistent image")
    }
}

/// Per-pixel forward motion: the material at `p` in frame `t` sits at
/// `p + d(p)` in frame `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::shape(
                "displacement field",
                format!("{width}×{height} field with {} / {} components", dx.len(), dy.len()),
            ));
        }
        if !dx.iter().chain(&dy).all(|v| v.is_finite()) {
            return Err(Error::Numeric("displacement field contains non-finite values".into()));
        }
        Ok(Self { width, height, dx, dy })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, cx: f64, cy: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![cx; n],
            dy: vec![cy; n],
        }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Bilinear interpolation with clamp-to-edge.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (
            bilinear(&self.dx, self.width, self.height, x, y),
            bilinear(&self.dy, self.width, self.height, x, y),
        )
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `dx` plane followed by the `dy` plane.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.len());
        v.extend_from_slice(&self.dx);
        v.extend_from_slice(&self.dy);
        v
    }

    pub fn from_vector(width: usize, height: usize, v: &[f64]) -> Result<Self> {
        let n = width * height;
        if v.len() != 2 * n {
            return Err(Error::shape("displacement field", format!("vector of {} for {width}×{height}", v.len())));
        }
        Self::new(width, height, v[..n].to_vec(), v[n..].to_vec())
    }

    pub fn round_to_f32(&mut self) {
        for v in self.dx.iter_mut().chain(self.dy.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    /// Largest per-pixel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}
