use std::collections::BTreeMap;
use std::path::Path;

use peelsort::peel::{PeelOutput, RoundStats};
use peelsort::Recording;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, StageExt};

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub software: String,
    pub command: String,
    pub config: PipelineConfig,
    pub recording: Option<RecordingSummary>,
    pub model: Option<ModelReport>,
    pub classify: Option<ClassifyReport>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            software: format!("peelsort {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            config: config.clone(),
            recording: None,
            model: None,
            classify: None,
            timings_s: BTreeMap::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        *self.timings_s.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        peelsort::fsutil::write_atomic(path, json.as_bytes()).stage("report")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordingSummary {
    pub channels: usize,
    pub samples: usize,
    pub rate_hz: f64,
    /// Per-channel (median, MAD) of the input, when it was normalized here.
    pub scales: Option<Vec<(f64, f64)>>,
}

impl RecordingSummary {
    pub fn of(rec: &Recording) -> Self {
        Self {
            channels: rec.channels(),
            samples: rec.samples(),
            rate_hz: rec.rate_hz(),
            scales: rec.scales().map(|s| s.iter().map(|c| (c.median, c.mad)).collect()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ModelReport {
    pub estimation_samples: usize,
    pub detected: usize,
    pub cut: usize,
    pub dropped_at_edge: usize,
    pub superposed: usize,
    pub clustered: usize,
    pub before: usize,
    pub after: usize,
    pub components: usize,
    /// Share of total variance carried by each retained component.
    pub explained_variance_ratio: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub cluster_l1_sizes: Vec<f64>,
    pub removed_empty: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub detected: usize,
    pub accepted: usize,
    pub unclassified: usize,
    pub carried: usize,
    pub refitted: usize,
    pub dropped: usize,
    pub unclassified_rate: f64,
    pub residual_energy: f64,
}

impl From<&RoundStats> for RoundReport {
    fn from(r: &RoundStats) -> Self {
        Self {
            round: r.round,
            detected: r.detected,
            accepted: r.accepted,
            unclassified: r.unclassified,
            carried: r.carried,
            refitted: r.refitted,
            dropped: r.dropped,
            unclassified_rate: r.unclassified_rate(),
            residual_energy: r.residual_energy,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyReport {
    pub templates: usize,
    pub spikes: usize,
    pub unclassified: usize,
    pub per_neuron: Vec<usize>,
    pub rounds: Vec<RoundReport>,
    pub large_jitter_warnings: usize,
    pub newton_fallbacks: usize,
    pub energy_before: f64,
    pub energy_after: f64,
}

impl ClassifyReport {
    pub fn new(out: &PeelOutput, templates: usize, input: &Recording) -> Self {
        let mut per_neuron = vec![0; templates];
        for s in &out.spikes.entries {
            if let Some(n) = per_neuron.get_mut(s.neuron) {
                *n += 1;
            }
        }
        Self {
            templates,
            spikes: out.spikes.len(),
            unclassified: out.decisions.len() - out.spikes.len(),
            per_neuron,
            rounds: out.rounds.iter().map(RoundReport::from).collect(),
            large_jitter_warnings: out.large_jitter,
            newton_fallbacks: out.fallbacks,
            energy_before: input.energy(),
            energy_after: out.residual.energy(),
        }
    }
}
