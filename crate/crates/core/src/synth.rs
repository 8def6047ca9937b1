//! Synthetic recordings with ground truth.
//!
//! Each neuron fires as an independent homogeneous Poisson process and
//! leaves the same multi-channel waveform at every spike. Spikes are placed
//! at sub-sample positions by band-limited (windowed-sinc) evaluation of the
//! sampled waveform, contributions add linearly, and stationary AR(1)
//! Gaussian noise is added independently on each channel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use crate::{Error, Recording, Result, Stage, Waveform};

/// Half-width, in samples, of the windowed sinc used for fractional placement.
pub const SINC_HALF_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronSpec {
    /// True waveform, channels × support width, in MAD units.
    pub template: Waveform,
    pub rate_hz: f64,
}

impl NeuronSpec {
    pub fn new(template: Waveform, rate_hz: f64) -> Result<Self> {
        if template.width() < 3 {
            return Err(Error::param("template support must span at least 3 samples"));
        }
        if template.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::param("template has non-finite values"));
        }
        if !(rate_hz > 0.0) {
            return Err(Error::param("firing rate must be > 0"));
        }
        Ok(Self { template, rate_hz })
    }

    /// Position inside the template that a spike time refers to: the
    /// maximum of the channel-summed waveform.
    pub fn reference_index(&self) -> usize {
        reference_index(&self.template)
    }
}

pub fn reference_index(template: &Waveform) -> usize {
    (0..template.width())
        .map(|i| (i, (0..template.channels()).map(|c| template[(c, i)]).sum::<f64>()))
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Stationary AR(1) Gaussian noise with marginal standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub ar_coeff: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            ar_coeff: 0.4,
        }
    }
}

impl NoiseModel {
    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(Error::param("noise needs sigma >= 0 and ar_coeff in [0, 1)"));
        }
        Ok(())
    }
}

/// Distribution of the sub-sample offset between a spike and the sample grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterModel {
    UniformHalfSample,
    None,
}

impl JitterModel {
    pub fn sigma_delta(&self) -> f64 {
        match self {
            JitterModel::UniformHalfSample => 1.0 / 12f64.sqrt(),
            JitterModel::None => 0.0,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            JitterModel::UniformHalfSample => rng.random_range(-0.5..0.5),
            JitterModel::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueSpike {
    pub neuron: usize,
    /// Position of the neuron's reference sample, in (fractional) samples.
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub spikes: Vec<TrueSpike>,
    pub recording: Recording,
    pub neurons: Vec<NeuronSpec>,
}

fn windowed_sinc(x: f64) -> f64 {
    let half = SINC_HALF_WIDTH as f64;
    if x.abs() >= half {
        return 0.0;
    }
    if x.fract() == 0.0 {
        return if x == 0.0 { 1.0 } else { 0.0 };
    }
    let window = 0.42 + 0.5 * (PI * x / half).cos() + 0.08 * (2.0 * PI * x / half).cos();
    (PI * x).sin() / (PI * x) * window
}

/// Band-limited value of the sampled sequence `row` at fractional index `x`.
pub fn interpolate(row: &[f64], x: f64) -> f64 {
    let lo = (x - SINC_HALF_WIDTH as f64).floor().max(0.0) as usize;
    let hi = ((x + SINC_HALF_WIDTH as f64).ceil() as isize).min(row.len() as isize - 1);
    if hi < lo as isize {
        return 0.0;
    }
    (lo..=hi as usize).map(|k| row[k] * windowed_sinc(x - k as f64)).sum()
}

/// Template resampled on a grid shifted by `delta`: `out[i] = F(i + delta)`
/// where `F` is the band-limited interpolant of the sampled template.
pub fn shifted(template: &Waveform, delta: f64) -> Waveform {
    let mut out = Waveform::zeros(template.channels(), template.width());
    for c in 0..template.channels() {
        let row = template.row(c);
        for (i, v) in out.row_mut(c).iter_mut().enumerate() {
            *v = interpolate(row, i as f64 + delta);
        }
    }
    out
}

/// Sample range touched by placing `template` with its reference sample at `time`.
fn footprint(template: &Waveform, reference: usize, time: f64) -> (isize, isize) {
    let origin = time - reference as f64;
    if origin.fract() == 0.0 {
        let o = origin as isize;
        return (o, o + template.width() as isize - 1);
    }
    let lo = (origin - SINC_HALF_WIDTH as f64).ceil() as isize;
    let hi = (origin + (template.width() - 1) as f64 + SINC_HALF_WIDTH as f64).floor() as isize;
    (lo, hi)
}

/// Adds one spike to `trace`. Returns false, leaving `trace` untouched, when
/// the footprint does not fit.
pub fn place(template: &Waveform, reference: usize, time: f64, trace: &mut [Vec<f64>]) -> bool {
    let n = trace.first().map_or(0, Vec::len) as isize;
    let (lo, hi) = footprint(template, reference, time);
    if lo < 0 || hi >= n {
        return false;
    }
    let origin = time - reference as f64;
    for (c, channel) in trace.iter_mut().enumerate() {
        let row = template.row(c);
        for s in lo..=hi {
            channel[s as usize] += interpolate(row, s as f64 - origin);
        }
    }
    true
}

/// Noise-free trace of the listed spikes.
pub fn render(neurons: &[NeuronSpec], spikes: &[TrueSpike], channels: usize, samples: usize) -> Vec<Vec<f64>> {
    let mut trace = vec![vec![0.0; samples]; channels];
    for s in spikes {
        let n = &neurons[s.neuron];
        place(&n.template, n.reference_index(), s.time, &mut trace);
    }
    trace
}

/// AR(1) noise: `z[i] = a z[i-1] + sigma sqrt(1 - a^2) e[i]`, started in the
/// stationary distribution.
pub fn ar1_noise(noise: &NoiseModel, samples: usize, rng: &mut impl Rng) -> Vec<f64> {
    let innovation = noise.sigma * (1.0 - noise.ar_coeff * noise.ar_coeff).sqrt();
    let mut out = Vec::with_capacity(samples);
    let mut z = 0.0;
    for i in 0..samples {
        let e: f64 = rng.sample(StandardNormal);
        z = if i == 0 {
            noise.sigma * e
        } else {
            noise.ar_coeff * z + innovation * e
        };
        out.push(z);
    }
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws spike times for every neuron and renders a noisy recording.
pub fn generate(
    neurons: &[NeuronSpec],
    noise: &NoiseModel,
    jitter: JitterModel,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<GroundTruth> {
    noise.validate()?;
    if !(duration_s > 0.0 && rate_hz > 0.0) {
        return Err(Error::param("duration and sampling rate must be > 0"));
    }
    let channels = match neurons.first() {
        Some(n) => n.template.channels(),
        None => 1,
    };
    if neurons.iter().any(|n| n.template.channels() != channels) {
        return Err(Error::param("all neuron templates need the same channel count"));
    }
    let samples = (duration_s * rate_hz).round() as usize;
    let mut trace = vec![vec![0.0; samples]; channels];
    let mut spikes = Vec::new();
    for (id, neuron) in neurons.iter().enumerate() {
        let mut rng = stream_rng(seed, id as u64);
        let isi = Exp::new(neuron.rate_hz).map_err(|e| Error::param(e.to_string()))?;
        let reference = neuron.reference_index();
        let mut t = 0.0;
        loop {
            t += rng.sample(isi);
            if t >= duration_s {
                break;
            }
            let time = (t * rate_hz).round() + jitter.draw(&mut rng);
            if place(&neuron.template, reference, time, &mut trace) {
                spikes.push(TrueSpike { neuron: id, time });
            }
        }
    }
    if noise.sigma > 0.0 {
        for (c, channel) in trace.iter_mut().enumerate() {
            let mut rng = stream_rng(seed, (neurons.len() + c) as u64);
            for (v, z) in channel.iter_mut().zip(ar1_noise(noise, samples, &mut rng)) {
                *v += z;
            }
        }
    }
    spikes.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.neuron.cmp(&b.neuron)));
    Ok(GroundTruth {
        spikes,
        recording: Recording::new(trace, rate_hz, Stage::Raw)?,
        neurons: neurons.to_vec(),
    })
}

/// Shape of a difference-of-Gaussians spike, in samples relative to its peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeShape {
    pub width: f64,
    pub trough_depth: f64,
    pub trough_delay: f64,
    pub trough_width: f64,
}

impl SpikeShape {
    pub fn value(&self, t: f64) -> f64 {
        (-t * t / (2.0 * self.width * self.width)).exp()
            - self.trough_depth
                * (-(t - self.trough_delay).powi(2) / (2.0 * self.trough_width * self.trough_width)).exp()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let w2 = self.width * self.width;
        let v2 = self.trough_width * self.trough_width;
        let u = t - self.trough_delay;
        -t / w2 * (-t * t / (2.0 * w2)).exp() + self.trough_depth * u / v2 * (-u * u / (2.0 * v2)).exp()
    }

    /// Samples `t = -before ..= after`, one row per channel gain.
    pub fn sample(&self, gains: &[f64], before: usize, after: usize) -> Waveform {
        let rows: Vec<Vec<f64>> = gains
            .iter()
            .map(|g| {
                (0..=before + after)
                    .map(|i| g * self.value(i as f64 - before as f64))
                    .collect()
            })
            .collect();
        Waveform::from_rows(&rows).expect("rows share one width")
    }
}

pub const LOCUST_CHANNELS: usize = 4;
pub const LOCUST_RATE_HZ: f64 = 15_000.0;
pub const LOCUST_DURATION_S: f64 = 20.0;
pub const LOCUST_NEURONS: usize = 10;
/// Samples before/after the reference sample in the scenario's templates.
pub const LOCUST_SUPPORT: (usize, usize) = (20, 40);

/// The ten neurons of the canned tetrode scenario: peak amplitudes
/// log-spaced from 15 down to 5, rates from 0.5 to 3 Hz, distinct
/// per-channel gain signatures and shapes.
pub fn locust_neurons() -> Vec<NeuronSpec> {
    (0..LOCUST_NEURONS)
        .map(|j| {
            let frac = j as f64 / (LOCUST_NEURONS - 1) as f64;
            let amplitude = 15.0 * (5.0f64 / 15.0).powf(frac);
            let rate = 0.5 + 2.5 * frac;
            // distinct (dominant, secondary) channel pair per neuron
            let dominant = j % LOCUST_CHANNELS;
            let secondary = (dominant + 1 + j / LOCUST_CHANNELS) % LOCUST_CHANNELS;
            let mut gains = vec![0.0; LOCUST_CHANNELS];
            let mut rest = [0.3, 0.1].into_iter();
            for (c, g) in gains.iter_mut().enumerate() {
                *g = amplitude
                    * match c {
                        c if c == dominant => 1.0,
                        c if c == secondary => 0.6,
                        _ => rest.next().unwrap(),
                    };
            }
            let shape = SpikeShape {
                width: 1.5 + 0.15 * (j % 4) as f64,
                trough_depth: 0.3 + 0.05 * (j % 3) as f64,
                trough_delay: 6.0 + 0.5 * (j % 5) as f64,
                trough_width: 3.0 + 0.4 * (j % 3) as f64,
            };
            let template = shape.sample(&gains, LOCUST_SUPPORT.0, LOCUST_SUPPORT.1);
            NeuronSpec::new(template, rate).expect("scenario neurons are valid")
        })
        .collect()
}

/// Four channels at 15 kHz for 20 s with ten neurons, AR(1) noise
/// (sigma 1, coefficient 0.4) and uniform half-sample jitter.
pub fn locust_like_scenario(seed: u64) -> GroundTruth {
    generate(
        &locust_neurons(),
        &NoiseModel::default(),
        JitterModel::UniformHalfSample,
        LOCUST_DURATION_S,
        LOCUST_RATE_HZ,
        seed,
    )
    .expect("scenario parameters are valid")
}
