use crate::{Error, Result};

/// Processing stage of the samples held by a [`Recording`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Normalized,
    Residual,
}

/// Per-channel location and scale removed by normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScale {
    pub median: f64,
    pub mad: f64,
}

/// Multi-channel sample matrix. All channels share one length and every
/// sample is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    data: Vec<Vec<f64>>,
    rate_hz: f64,
    stage: Stage,
    scales: Option<Vec<ChannelScale>>,
}

impl Recording {
    pub fn new(data: Vec<Vec<f64>>, rate_hz: f64, stage: Stage) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::param("a recording needs at least one channel"));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::param(format!("sampling rate must be > 0, got {rate_hz}")));
        }
        let expected = data[0].len();
        for (channel, row) in data.iter().enumerate() {
            if row.len() != expected {
                return Err(Error::DimensionMismatch {
                    channel,
                    expected,
                    found: row.len(),
                });
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::DataCorruption { channel, index });
            }
        }
        Ok(Self {
            data,
            rate_hz,
            stage,
            scales: None,
        })
    }

    pub(crate) fn with_scales(mut self, scales: Vec<ChannelScale>) -> Self {
        self.scales = Some(scales);
        self
    }

    /// Same metadata, new samples. Used by stages that transform data
    /// without changing the shape.
    pub(crate) fn derive(&self, data: Vec<Vec<f64>>, stage: Stage) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            rate_hz: self.rate_hz,
            stage,
            scales: self.scales.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn samples(&self) -> usize {
        self.data[0].len()
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Location/scale applied by normalization, if any.
    pub fn scales(&self) -> Option<&[ChannelScale]> {
        self.scales.as_deref()
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.data[index]
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Vec<f64>> {
        self.data
    }

    /// Samples `[start, end)` of every channel, same stage and scales.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.samples() {
            return Err(Error::param(format!(
                "slice [{start}, {end}) outside recording of {} samples",
                self.samples()
            )));
        }
        let data = self.data.iter().map(|c| c[start..end].to_vec()).collect();
        Ok(self.derive(data, self.stage))
    }

    /// Sum of squared samples over all channels.
    pub fn energy(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum()
    }
}
