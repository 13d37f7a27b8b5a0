use crate::error::{Error, Result};
use crate::grid::Grid;

/// Channel-major feature map `[channels][height][width]` for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} tensor needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_grid(grid: &Grid) -> Self {
        Tensor {
            channels: 1,
            height: grid.height(),
            width: grid.width(),
            data: grid.data().to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
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

    pub fn channel(&self, k: usize) -> &[f64] {
        let p = self.plane();
        &self.data[k * p..(k + 1) * p]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[k * p..(k + 1) * p]
    }

    pub fn channel_grid(&self, k: usize) -> Grid {
        Grid::new(self.height, self.width, self.channel(k).to_vec()).expect("channel plane has grid shape")
    }

    /// Stacks `other` after `self` along the channel axis.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "concat needs equal spatial size"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: the first `channels` planes and the rest.
    pub fn split_channels(&self, channels: usize) -> (Tensor, Tensor) {
        let cut = channels * self.plane();
        (
            Tensor {
                channels,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Per-channel spatial mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let p = self.plane() as f64;
        (0..self.channels)
            .map(|k| self.channel(k).iter().sum::<f64>() / p)
            .collect()
    }
}
