//! Observation and instruction containers shared by the model and the
//! environments.

use crate::error::{shape_err, Result};

/// One camera image, `height × width × channels`, row-major, channels last.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return shape_err(format!("{} bytes for a {height}x{width}x{channels} image", data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// All camera views at one timestep.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub views: Vec<Image>,
}

impl Observation {
    pub fn single(img: Image) -> Self {
        Self { views: vec![img] }
    }

    pub fn check_shape(&self, views: usize, height: usize, width: usize, channels: usize) -> Result<()> {
        if self.views.len() != views {
            return shape_err(format!("observation has {} views, expected {views}", self.views.len()));
        }
        for v in &self.views {
            if (v.height, v.width, v.channels) != (height, width, channels) || v.data.len() != height * width * channels
            {
                return shape_err(format!(
                    "image {}x{}x{}, expected {height}x{width}x{channels}",
                    v.height, v.width, v.channels
                ));
            }
        }
        Ok(())
    }
}

/// Fixed-length instruction token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub ids: Vec<usize>,
}

impl Instruction {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    /// Pads with id 0 or truncates to `len`.
    pub fn fit(mut self, len: usize) -> Self {
        self.ids.resize(len, 0);
        self
    }
}
