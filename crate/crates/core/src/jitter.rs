//! Sub-sample jitter estimation and cancellation.
//!
//! An event `g` is modelled as a shifted template plus noise,
//! `g(t) = f(t + δ) + Z(t)`, and expanded to second order,
//! `g ≈ f + δ f' + δ²/2 f''`. The first-order least-squares problem has the
//! closed form `δ̃ = Σ (g - f) f' / Σ f'²`; a single Newton step on the
//! second-order residual sum of squares then refines it to `δ̂`. Sums run over
//! every channel and position with equal weights.

use crate::cluster::ClusterResult;
use crate::events::{cut, pointwise_median, EventSample};
use crate::{Error, Recording, Result, Waveform};

/// Fewest non-superposed events a cluster needs to yield a template.
pub const MIN_TEMPLATE_EVENTS: usize = 3;

/// A cluster center with its first and second time derivatives (per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub neuron_id: usize,
    pub f: Waveform,
    pub f1: Waveform,
    pub f2: Waveform,
    pub l1_size: f64,
}

impl Template {
    pub fn new(neuron_id: usize, f: Waveform, f1: Waveform, f2: Waveform) -> Result<Self> {
        if f.shape() != f1.shape() || f.shape() != f2.shape() {
            return Err(Error::param("template and derivatives differ in shape"));
        }
        let l1_size = f.l1_norm();
        Ok(Self {
            neuron_id,
            f,
            f1,
            f2,
            l1_size,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.f.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterEstimate {
    /// First-order estimate δ̃, in samples.
    pub delta_linear: f64,
    /// Newton-refined estimate δ̂, in samples.
    pub delta: f64,
    /// Σ (g - f)².
    pub rss_before: f64,
    /// Σ (g - aligned_center(δ̂))².
    pub rss_after: f64,
    /// The Newton step was rejected and δ̂ = δ̃.
    pub fallback: bool,
}

/// Central difference `(x[i+1] - x[i-1]) / 2`, one-sided at both ends.
pub fn derivative_trace(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = Vec::with_capacity(n);
    d.push(x[1] - x[0]);
    d.extend(x.windows(3).map(|w| (w[2] - w[0]) / 2.0));
    d.push(x[n - 1] - x[n - 2]);
    d
}

pub fn derivative_recording(rec: &Recording) -> Result<Recording> {
    if rec.samples() < 3 {
        return Err(Error::param("derivative needs at least 3 samples"));
    }
    let data = rec.data().iter().map(|x| derivative_trace(x)).collect();
    Ok(rec.derive(data, rec.stage()))
}

/// One template per cluster of an ordered [`ClusterResult`] whose labels
/// align with `sample.events`. Derivatives are point-wise medians of cuts
/// taken from the once- and twice-differentiated recording at the same peaks.
pub fn build_templates(rec: &Recording, sample: &EventSample, result: &ClusterResult) -> Result<Vec<Template>> {
    if result.labels.len() != sample.len() {
        return Err(Error::param("cluster labels do not align with the event sample"));
    }
    let d1 = derivative_recording(rec)?;
    let d2 = derivative_recording(&d1)?;
    (0..result.k())
        .map(|j| {
            let members: Vec<usize> = (0..sample.len())
                .filter(|&i| result.labels[i] == j && !sample.events[i].superposed)
                .collect();
            if members.len() < MIN_TEMPLATE_EVENTS {
                return Err(Error::TooFewEvents {
                    cluster: j,
                    count: members.len(),
                    required: MIN_TEMPLATE_EVENTS,
                });
            }
            let cuts_from = |r: &Recording| -> Result<Vec<Waveform>> {
                members
                    .iter()
                    .map(|&i| {
                        cut(r, sample.events[i].peak_index, &sample.spec)
                            .ok_or_else(|| Error::param("event window outside the recording"))
                    })
                    .collect()
            };
            let median = |ws: &[Waveform]| pointwise_median(&ws.iter().collect::<Vec<_>>());
            let f = median(
                &members
                    .iter()
                    .map(|&i| sample.events[i].cuts.clone())
                    .collect::<Vec<_>>(),
            );
            let f1 = median(&cuts_from(&d1)?);
            let f2 = median(&cuts_from(&d2)?);
            Template::new(j, f, f1, f2)
        })
        .collect()
}

fn check_shape(g: &Waveform, t: &Template) -> Result<()> {
    if g.shape() != t.shape() {
        return Err(Error::param(format!(
            "event shape {:?} does not match template shape {:?}",
            g.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Closed-form first-order estimate `Σ (g - f) f' / Σ f'²`.
pub fn estimate_jitter_linear(g: &Waveform, t: &Template) -> Result<f64> {
    check_shape(g, t)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((gi, fi), di) in g.as_slice().iter().zip(t.f.as_slice()).zip(t.f1.as_slice()) {
        num += (gi - fi) * di;
        den += di * di;
    }
    if den == 0.0 {
        return Err(Error::FlatTemplate);
    }
    Ok(num / den)
}

/// `h(δ) = Σ (g - f - δ f' - δ²/2 f'')²` and its first two derivatives.
fn second_order_rss(g: &Waveform, t: &Template, delta: f64) -> (f64, f64, f64) {
    let (mut h, mut dh, mut d2h) = (0.0, 0.0, 0.0);
    let parts = g
        .as_slice()
        .iter()
        .zip(t.f.as_slice())
        .zip(t.f1.as_slice())
        .zip(t.f2.as_slice());
    for (((gi, fi), d1), d2) in parts {
        let r = gi - fi - delta * d1 - 0.5 * delta * delta * d2;
        let slope = d1 + delta * d2;
        h += r * r;
        dh -= 2.0 * r * slope;
        d2h += 2.0 * (slope * slope - r * d2);
    }
    (h, dh, d2h)
}

/// A single Newton-Raphson step on the second-order RSS from `delta0`.
/// Falls back to `delta0` when the curvature is not positive or the step
/// leaves the cut (`|δ̂| > w / 2`).
pub fn refine_jitter_newton(g: &Waveform, t: &Template, delta0: f64) -> JitterEstimate {
    let (_, dh, d2h) = second_order_rss(g, t, delta0);
    let half_width = t.f.width() as f64 / 2.0;
    let step = delta0 - dh / d2h;
    let (delta, fallback) = if d2h > 0.0 && step.is_finite() && step.abs() <= half_width {
        (step, false)
    } else {
        (delta0, true)
    };
    let rss_before = g.sub(&t.f).squared_norm();
    let rss_after = second_order_rss(g, t, delta).0;
    JitterEstimate {
        delta_linear: delta0,
        delta,
        rss_before,
        rss_after,
        fallback,
    }
}

/// Linear estimate followed by the Newton refinement.
pub fn estimate_jitter(g: &Waveform, t: &Template) -> Result<JitterEstimate> {
    let delta0 = estimate_jitter_linear(g, t)?;
    Ok(refine_jitter_newton(g, t, delta0))
}

/// Second-order prediction `f + δ f' + δ²/2 f''`.
pub fn aligned_center(t: &Template, delta: f64) -> Waveform {
    t.f.add_scaled(&t.f1, delta).add_scaled(&t.f2, 0.5 * delta * delta)
}
