//! Test oracles kept independent of the library's own numerics.
#![allow(dead_code)]

use peelsort::jitter::{derivative_trace, Template};
use peelsort::synth::SpikeShape;
use peelsort::Waveform;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const BEFORE: usize = 14;
pub const AFTER: usize = 30;

/// Band-limited shift through the DFT of a zero-padded copy:
/// `out[i] = F(i + delta)`.
pub fn fft_shift(row: &[f64], delta: f64) -> Vec<f64> {
    spectral(row, |freq, n| {
        Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * freq * delta / n)
    })
}

/// `order`-th derivative of the band-limited interpolant at the sample points.
pub fn fft_derivative(row: &[f64], order: i32) -> Vec<f64> {
    spectral(row, |freq, n| {
        Complex::new(0.0, 2.0 * std::f64::consts::PI * freq / n).powi(order)
    })
}

fn spectral(row: &[f64], response: impl Fn(f64, f64) -> Complex<f64>) -> Vec<f64> {
    let pad = row.len() * 3;
    let n = (row.len() + 2 * pad).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n];
    for (i, v) in row.iter().enumerate() {
        buf[pad + i] = Complex::new(*v, 0.0);
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let freq = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        *b *= if 2 * k == n {
            Complex::new(0.0, 0.0)
        } else {
            response(freq, n as f64)
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf[pad..pad + row.len()].iter().map(|c| c.re / n as f64).collect()
}

pub fn fft_shift_waveform(w: &Waveform, delta: f64) -> Waveform {
    let rows: Vec<Vec<f64>> = (0..w.channels()).map(|c| fft_shift(w.row(c), delta)).collect();
    Waveform::from_rows(&rows).unwrap()
}

/// Grid search for the shift of `f` that best explains `g`: a 0.01 grid
/// over `±half_range`, then `step` around the coarse minimum.
pub fn grid_search_delta(g: &Waveform, f: &Waveform, half_range: f64, step: f64) -> f64 {
    let best = |lo: f64, hi: f64, step: f64| {
        let steps = ((hi - lo) / step).round() as usize;
        (0..=steps)
            .map(|k| lo + k as f64 * step)
            .map(|d| (d, g.sub(&fft_shift_waveform(f, d)).squared_norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    };
    let coarse = best(-half_range, half_range, 0.01);
    best(coarse - 0.01, coarse + 0.01, step)
}

pub fn smooth_shapes() -> Vec<(SpikeShape, Vec<f64>)> {
    vec![
        (
            SpikeShape {
                width: 1.8,
                trough_depth: 0.35,
                trough_delay: 6.0,
                trough_width: 3.0,
            },
            vec![10.0, 6.0, 3.0, 1.5],
        ),
        (
            SpikeShape {
                width: 2.2,
                trough_depth: 0.3,
                trough_delay: 7.0,
                trough_width: 3.5,
            },
            vec![2.0, 8.0, 8.0, 4.0],
        ),
    ]
}

pub fn sampled(shape: &SpikeShape, gains: &[f64]) -> Waveform {
    shape.sample(gains, BEFORE, AFTER)
}

/// Template whose derivatives come from central differences, as the
/// pipeline builds them.
pub fn template_from(f: &Waveform) -> Template {
    let d = |w: &Waveform| {
        let rows: Vec<Vec<f64>> = (0..w.channels()).map(|c| derivative_trace(w.row(c))).collect();
        Waveform::from_rows(&rows).unwrap()
    };
    let f1 = d(f);
    let f2 = d(&f1);
    Template::new(0, f.clone(), f1, f2).unwrap()
}

/// Template with the exact derivatives of the band-limited interpolant.
pub fn exact_template(f: &Waveform) -> Template {
    let d = |order| {
        let rows: Vec<Vec<f64>> = (0..f.channels()).map(|c| fft_derivative(f.row(c), order)).collect();
        Waveform::from_rows(&rows).unwrap()
    };
    Template::new(0, f.clone(), d(1), d(2)).unwrap()
}
