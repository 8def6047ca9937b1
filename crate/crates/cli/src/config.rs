//! Pipeline configuration: a TOML file with one table per module, plus
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use peelsort::detect::{DetectionParams, Polarity};
use peelsort::events::CutSpec;
use peelsort::peel::PeelParams;
use peelsort::preprocess::FilterSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub detect: DetectConfig,
    pub events: EventsConfig,
    pub reduce: ReduceConfig,
    pub cluster: ClusterConfig,
    pub peel: PeelConfig,
    pub synth: SynthConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub files: Vec<PathBuf>,
    pub rate_hz: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            rate_hz: 15_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub highpass: bool,
    pub cutoff_hz: f64,
    pub taps: usize,
    /// When false the input is taken to be in MAD units already (e.g. a
    /// residual written by `classify`).
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let f = FilterSpec::default();
        Self {
            highpass: false,
            cutoff_hz: f.cutoff_hz,
            taps: f.taps,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub box_width: usize,
    pub threshold_mad: f64,
    pub min_separation: usize,
    pub guard: usize,
    pub polarity: PolarityName,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let d = DetectionParams::default();
        Self {
            box_width: d.box_width,
            threshold_mad: d.threshold,
            min_separation: d.min_separation,
            guard: d.guard,
            polarity: PolarityName::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityName {
    Max,
    Min,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventsConfig {
    pub before: usize,
    pub after: usize,
    /// Derive before/after from the point-wise MAD of wide cuts.
    pub auto_cut: bool,
    pub wide: usize,
    pub noise_level: f64,
    /// Defaults to the detection threshold.
    pub side_threshold: Option<f64>,
}

impl Default for EventsConfig {
    fn default() -> Self {
        let c = CutSpec::default();
        Self {
            before: c.before,
            after: c.after,
            auto_cut: false,
            wide: CutSpec::WIDE.before,
            noise_level: 1.0,
            side_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub components: usize,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self { components: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Kmeans,
    Gmm,
    Bagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub method: MethodName,
    pub k: usize,
    /// Defaults to `run.seed`.
    pub seed: Option<u64>,
    pub restarts: usize,
    pub bootstrap_b: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            method: MethodName::Kmeans,
            k: 10,
            seed: None,
            restarts: 10,
            bootstrap_b: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeelConfig {
    pub max_rounds: usize,
    pub acceptance_factor: f64,
    pub max_shift: usize,
    pub refine_passes: usize,
}

impl Default for PeelConfig {
    fn default() -> Self {
        let p = PeelParams::default();
        Self {
            max_rounds: p.max_rounds,
            acceptance_factor: p.acceptance_factor,
            max_shift: p.max_shift,
            refine_passes: p.refine_passes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenario: String,
    /// Defaults to `run.seed`.
    pub seed: Option<u64>,
    pub gzip: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenario: "locust".into(),
            seed: None,
            gzip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Length of the model-estimation window from the start of the
    /// recording; defaults to the first half.
    pub estimation_s: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("peelsort-out"),
            seed: 1,
            estimation_s: None,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` in order
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        for f in &mut self.data.files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.data.rate_hz.is_finite() && self.data.rate_hz > 0.0) {
            return bad("data.rate_hz must be positive".into());
        }
        if self.preprocess.highpass {
            self.filter_spec()
                .validate(self.data.rate_hz)
                .map_err(|e| CliError::Config(format!("preprocess: {e}")))?;
        }
        self.detection_params()
            .validate()
            .map_err(|e| CliError::Config(format!("detect: {e}")))?;
        CutSpec::new(self.events.before, self.events.after).map_err(|e| CliError::Config(format!("events: {e}")))?;
        if self.events.wide == 0 || !(self.events.noise_level > 0.0) {
            return bad("events.wide and events.noise_level must be positive".into());
        }
        if self.events.side_threshold.is_some_and(|t| !(t > 0.0)) {
            return bad("events.side_threshold must be positive".into());
        }
        if self.reduce.components == 0 {
            return bad("reduce.components must be >= 1".into());
        }
        if self.cluster.k == 0 || self.cluster.restarts == 0 || self.cluster.bootstrap_b == 0 {
            return bad("cluster.k, cluster.restarts and cluster.bootstrap_b must be >= 1".into());
        }
        if self.peel.max_rounds == 0 || !(self.peel.acceptance_factor > 0.0) {
            return bad("peel.max_rounds and peel.acceptance_factor must be positive".into());
        }
        if self.synth.scenario != "locust" {
            return bad(format!(
                "synth.scenario `{}` is unknown (only `locust`)",
                self.synth.scenario
            ));
        }
        if self.run.estimation_s.is_some_and(|s| !(s > 0.0)) {
            return bad("run.estimation_s must be positive".into());
        }
        Ok(())
    }

    pub fn filter_spec(&self) -> FilterSpec {
        FilterSpec {
            cutoff_hz: self.preprocess.cutoff_hz,
            taps: self.preprocess.taps,
        }
    }

    pub fn detection_params(&self) -> DetectionParams {
        DetectionParams {
            box_width: self.detect.box_width,
            threshold: self.detect.threshold_mad,
            min_separation: self.detect.min_separation,
            guard: self.detect.guard,
            polarity: match self.detect.polarity {
                PolarityName::Max => Polarity::Max,
                PolarityName::Min => Polarity::Min,
                PolarityName::Both => Polarity::Both,
            },
        }
    }

    pub fn cut_spec(&self) -> CutSpec {
        CutSpec {
            before: self.events.before,
            after: self.events.after,
        }
    }

    pub fn side_threshold(&self) -> f64 {
        self.events.side_threshold.unwrap_or(self.detect.threshold_mad)
    }

    pub fn peel_params(&self) -> PeelParams {
        PeelParams {
            detection: self.detection_params(),
            max_rounds: self.peel.max_rounds,
            acceptance_factor: self.peel.acceptance_factor,
            max_shift: self.peel.max_shift,
            refine_passes: self.peel.refine_passes,
        }
    }

    pub fn cluster_seed(&self) -> u64 {
        self.cluster.seed.unwrap_or(self.run.seed)
    }

    pub fn synth_seed(&self) -> u64 {
        self.synth.seed.unwrap_or(self.run.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `section.key=value` override. Values are read as TOML and
/// fall back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key `{key}` must look like section.key"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = table
        .entry(path[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("`{}` is not a section", path[0])))?;
    section.insert(path[1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\nfiles = [\"ch0.dat\"]\n[detect]\nthreshold_mad = 5.0\n").unwrap();
        let cfg = PipelineConfig::load(
            Some(&path),
            &[
                "cluster.k=3".into(),
                "cluster.method=gmm".into(),
                "detect.threshold_mad=4.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.cluster.k, 3);
        assert_eq!(cfg.cluster.method, MethodName::Gmm);
        assert_eq!(cfg.detect.threshold_mad, 4.5);
        assert_eq!(cfg.data.files, vec![dir.path().join("ch0.dat")]);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for o in [
            "detect.treshold=3",
            "bogus.key=1",
            "cluster.k=0",
            "detect.box_width=4",
            "nodot=1",
            "cluster.method=ward",
        ] {
            let err = PipelineConfig::load(None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}: {err}");
        }
        let err = PipelineConfig::load(
            None,
            &["preprocess.highpass=true".into(), "preprocess.cutoff_hz=8000".into()],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
