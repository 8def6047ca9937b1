//! Spike detection on the rectified, channel-summed, box-filtered trace.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::{Error, Recording, Result, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Polarity {
    #[default]
    Max,
    Min,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    /// Odd moving-average width, in samples.
    pub box_width: usize,
    /// Rectification threshold in MAD units of the filtered trace.
    pub threshold: f64,
    pub min_separation: usize,
    /// Samples ignored at each end of the trace.
    pub guard: usize,
    pub polarity: Polarity,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            box_width: 5,
            threshold: 4.0,
            min_separation: 15,
            guard: 50,
            polarity: Polarity::Max,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.box_width == 0 || self.box_width % 2 == 0 {
            return Err(Error::param(format!("box width must be odd, got {}", self.box_width)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::param("detection threshold must be > 0"));
        }
        if self.min_separation == 0 {
            return Err(Error::param("minimum separation must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakList {
    /// Strictly increasing sample indices.
    pub indices: Vec<usize>,
    pub source_stage: Stage,
}

impl PeakList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn detect(rec: &Recording, p: &DetectionParams) -> Result<PeakList> {
    let aggregate = aggregate_trace(rec, p)?;
    let candidates = local_maxima(&aggregate, p.guard);
    Ok(PeakList {
        indices: thin(&aggregate, &candidates, p.min_separation),
        source_stage: rec.stage(),
    })
}

/// Box-filters each channel, re-normalizes it by median/MAD, zeroes values
/// below threshold and sums the channels.
pub fn aggregate_trace(rec: &Recording, p: &DetectionParams) -> Result<Vec<f64>> {
    p.validate()?;
    if rec.stage() == Stage::Raw {
        return Err(Error::param("detection needs a normalized or residual recording"));
    }
    let n = rec.samples();
    if n < 2 * p.guard + p.box_width {
        return Err(Error::param(format!(
            "recording of {n} samples is shorter than 2 * guard + box width"
        )));
    }
    let rectified = rec
        .data()
        .par_iter()
        .map(|x| rectified_channel(x, p))
        .collect::<Result<Vec<_>>>()?;
    let mut aggregate = vec![0.0; n];
    for channel in rectified.iter().flatten() {
        for (a, v) in aggregate.iter_mut().zip(channel) {
            *a += v;
        }
    }
    Ok(aggregate)
}

fn rectified_channel(x: &[f64], p: &DetectionParams) -> Result<Option<Vec<f64>>> {
    let filtered = box_filter(x, p.box_width);
    let (center, scale) = crate::stats::median_and_mad(&filtered)?;
    if scale <= 0.0 {
        // a flat channel carries no detectable events
        return Ok(None);
    }
    let rectify = |v: f64| {
        let z = (v - center) / scale;
        let z = match p.polarity {
            Polarity::Max => z,
            Polarity::Min => -z,
            Polarity::Both => z.abs(),
        };
        if z < p.threshold {
            0.0
        } else {
            z
        }
    };
    Ok(Some(filtered.into_iter().map(rectify).collect()))
}

/// Centered moving average of odd width with zero padding.
pub fn box_filter(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v;
        prefix.push(acc);
    }
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

/// Indices in `[guard, n - guard)` where the trace is positive, not below
/// its left neighbour and strictly above its right neighbour.
pub fn local_maxima(aggregate: &[f64], guard: usize) -> Vec<usize> {
    let n = aggregate.len();
    let lo = guard.max(1);
    let hi = n.saturating_sub(guard).min(n.saturating_sub(1));
    (lo..hi)
        .filter(|&i| {
            let v = aggregate[i];
            v > 0.0 && v >= aggregate[i - 1] && v > aggregate[i + 1]
        })
        .collect()
}

/// Keeps the largest candidates first (ties to the smaller index) and
/// discards any candidate closer than `min_separation` to a kept one.
pub fn thin(aggregate: &[f64], candidates: &[usize], min_separation: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| aggregate[b].total_cmp(&aggregate[a]).then(a.cmp(&b)));
    let mut kept = BTreeSet::new();
    for i in order {
        let left = kept.range(..=i).next_back().is_some_and(|&j| i - j < min_separation);
        let right = kept.range(i..).next().is_some_and(|&j| j - i < min_separation);
        if !left && !right {
            kept.insert(i);
        }
    }
    kept.into_iter().collect()
}
