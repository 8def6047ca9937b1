//! Optional FIR high-pass filtering and per-channel median/MAD normalization.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::{ChannelScale, Error, Recording, Result, Stage};

pub use crate::stats::{mad, median, MAD_SCALE};

/// Windowed-sinc high-pass design parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub cutoff_hz: f64,
    pub taps: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            cutoff_hz: 300.0,
            taps: 129,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        let nyquist = rate_hz / 2.0;
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < nyquist) {
            return Err(Error::param(format!(
                "cutoff {} Hz must lie in (0, {nyquist}) Hz",
                self.cutoff_hz
            )));
        }
        if self.taps < 3 || self.taps % 2 == 0 {
            return Err(Error::param(format!("taps must be odd and >= 3, got {}", self.taps)));
        }
        Ok(())
    }

    /// Linear-phase high-pass kernel: spectral inversion of a
    /// Hamming-windowed sinc low-pass normalized to unit DC gain.
    pub fn kernel(&self, rate_hz: f64) -> Result<Vec<f64>> {
        self.validate(rate_hz)?;
        let fc = self.cutoff_hz / rate_hz;
        let m = (self.taps - 1) as f64;
        let center = (self.taps - 1) / 2;
        let mut lowpass: Vec<f64> = (0..self.taps)
            .map(|n| {
                let x = n as f64 - m / 2.0;
                let sinc = if x == 0.0 {
                    2.0 * fc
                } else {
                    (2.0 * PI * fc * x).sin() / (PI * x)
                };
                let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / m).cos();
                sinc * window
            })
            .collect();
        for n in center + 1..self.taps {
            lowpass[n] = lowpass[self.taps - 1 - n];
        }
        let dc: f64 = lowpass.iter().sum();
        lowpass.iter_mut().for_each(|v| *v = -*v / dc);
        lowpass[center] += 1.0;
        Ok(lowpass)
    }
}

/// High-pass filters every channel of a raw recording.
///
/// Output has the input length; the `(taps - 1) / 2` group delay is
/// compensated. Samples are zero-padded beyond both ends, so the first and
/// last `(taps - 1) / 2` output samples are unreliable.
pub fn highpass(rec: &Recording, spec: &FilterSpec) -> Result<Recording> {
    if rec.stage() != Stage::Raw {
        return Err(Error::param("high-pass filtering applies to raw recordings only"));
    }
    let kernel = spec.kernel(rec.rate_hz())?;
    let data = rec.data().par_iter().map(|x| convolve_same(x, &kernel)).collect();
    Ok(rec.derive(data, Stage::Raw))
}

/// Centered convolution with an odd-length kernel and zero padding.
pub(crate) fn convolve_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = kernel.len() / 2;
    (0..n)
        .map(|i| {
            // y[i] = sum_k kernel[k] * x[i + half - k]
            let k_lo = (i + half + 1).saturating_sub(n);
            let k_hi = (i + half).min(kernel.len() - 1);
            (k_lo..=k_hi).map(|k| kernel[k] * x[i + half - k]).sum()
        })
        .collect()
}

/// Subtracts each channel's median and divides by its MAD.
pub fn normalize(rec: &Recording) -> Result<Recording> {
    let scales = rec
        .data()
        .par_iter()
        .map(|x| crate::stats::median_and_mad(x))
        .collect::<Result<Vec<_>>>()?;
    if let Some(channel) = scales.iter().position(|&(_, m)| m <= 0.0) {
        return Err(Error::DegenerateChannel { channel });
    }
    let data = rec
        .data()
        .par_iter()
        .zip(&scales)
        .map(|(x, &(med, mad))| x.iter().map(|v| (v - med) / mad).collect())
        .collect();
    let scales = scales
        .into_iter()
        .map(|(median, mad)| ChannelScale { median, mad })
        .collect();
    Ok(rec.derive(data, Stage::Normalized).with_scales(scales))
}
