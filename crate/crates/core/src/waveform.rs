use std::ops::{Index, IndexMut};

use crate::{Error, Result};

/// Channel-major multi-channel snippet: `channels` rows of `width` samples.
///
/// Used for event cuts, template centers and their derivatives, and any
/// per-position statistic over a set of cuts.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: usize,
    width: usize,
    data: Vec<f64>,
}

impl Waveform {
    pub fn zeros(channels: usize, width: usize) -> Self {
        Self {
            channels,
            width,
            data: vec![0.0; channels * width],
        }
    }

    pub fn from_vec(channels: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * width {
            return Err(Error::param(format!(
                "waveform of {channels}x{width} needs {} values, got {}",
                channels * width,
                data.len()
            )));
        }
        Ok(Self { channels, width, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::param("ragged waveform rows"));
        }
        Ok(Self {
            channels: rows.len(),
            width,
            data: rows.concat(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.width)
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.width..(channel + 1) * self.width]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.data[channel * self.width..(channel + 1) * self.width]
    }

    /// Flattened channel-major view.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `self + factor * other`.
    pub fn add_scaled(&self, other: &Waveform, factor: f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "waveform shapes differ");
        Self {
            channels: self.channels,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + factor * b).collect(),
        }
    }

    pub fn sub(&self, other: &Waveform) -> Self {
        self.add_scaled(other, -1.0)
    }
}

impl Index<(usize, usize)> for Waveform {
    type Output = f64;

    fn index(&self, (channel, pos): (usize, usize)) -> &f64 {
        &self.data[channel * self.width + pos]
    }
}

impl IndexMut<(usize, usize)> for Waveform {
    fn index_mut(&mut self, (channel, pos): (usize, usize)) -> &mut f64 {
        &mut self.data[channel * self.width + pos]
    }
}
