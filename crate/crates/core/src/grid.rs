//! Row-major 2-D raster of `f64` used for images, masks and heatmaps.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} grid needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    /// Builds a grid from nested rows. Panics on ragged input; meant for fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for r in rows {
            assert_eq!(r.as_ref().len(), width, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other)?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// `(min, max)`; `(0, 0)` for an empty grid.
    pub fn min_max(&self) -> (f64, f64) {
        if self.data.is_empty() {
            return (0.0, 0.0);
        }
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the first maximal element as `(y, x)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width.max(1), best % self.width.max(1))
    }

    /// Min-max stretch to `[0, 1]`. Returns `None` when the grid is constant.
    pub fn normalized(&self) -> Option<Grid> {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if span <= 0.0 || span.is_nan() {
            return None;
        }
        Some(self.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
    }

    /// Bilinear resampling with half-pixel centres and clamped borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let ys = axis_weights(self.height, height);
        let xs = axis_weights(self.width, width);
        let mut out = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            let r0 = &self.data[y0 * self.width..(y0 + 1) * self.width];
            let r1 = &self.data[y1 * self.width..(y1 + 1) * self.width];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
        Grid {
            height,
            width,
            data: out,
        }
    }

    /// Nearest-neighbour resampling (pixel-centre rule), used for masks.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Grid {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let src = |dst: usize, n_in: usize, n_out: usize| {
            (((dst as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        Grid::from_fn(height, width, |y, x| {
            self.get(src(y, self.height, height), src(x, self.width, width))
        })
    }

    /// Block average by an integer factor. Dimensions must divide evenly.
    pub fn avg_pool(&self, factor: usize) -> Result<Grid> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} is not divisible by pooling factor {}",
                self.height, self.width, factor
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let orow = &mut out[(y / factor) * w..(y / factor + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                orow[x / factor] += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(Grid {
            height: h,
            width: w,
            data: out,
        })
    }

    /// Centre-pads with zeros to a square canvas.
    pub fn pad_to_square(&self) -> Grid {
        let side = self.height.max(self.width);
        if self.height == self.width {
            return self.clone();
        }
        let top = (side - self.height) / 2;
        let left = (side - self.width) / 2;
        let mut out = Grid::zeros(side, side);
        for y in 0..self.height {
            let dst = (y + top) * side + left;
            out.data[dst..dst + self.width].copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        out
    }
}

/// Source index pair and interpolation fraction for each output coordinate.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
