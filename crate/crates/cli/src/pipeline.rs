//! The subcommands as library functions. Each `cmd_*` reads its inputs from
//! the config, writes its outputs under `run.output_dir` and returns the
//! in-memory results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use peelsort::cluster::{bagged_cluster, gmm_em, kmeans, order_clusters, ClusterResult};
use peelsort::detect::detect;
use peelsort::events::{flag_superpositions, make_cuts, optimal_cut_bounds, pointwise_mad, CutSpec, EventSample};
use peelsort::fsutil::write_atomic;
use peelsort::ingest::{load_recording, write_recording};
use peelsort::jitter::build_templates;
use peelsort::peel::{peel, Catalogue, Outcome, PeelOutput};
use peelsort::preprocess::{highpass, normalize};
use peelsort::reduce::{fit_pca, project, projections_csv, scatter_matrix_csvs, PcaModel, ProjectedEvents};
use peelsort::synth::{locust_like_scenario, GroundTruth};
use peelsort::{Recording, Stage};

use crate::config::{MethodName, PipelineConfig};
use crate::error::{CliError, StageExt};
use crate::report::{ClassifyReport, ModelReport, RecordingSummary, RunReport};

pub const CATALOGUE_FILE: &str = "catalogue.txt";
pub const SPIKES_FILE: &str = "spikes.csv";
pub const UNCLASSIFIED_FILE: &str = "unclassified.csv";
pub const RESIDUAL_DIR: &str = "residual";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SIM_CONFIG_FILE: &str = "peelsort.toml";

/// Everything estimated in the model step.
#[derive(Debug, Clone)]
pub struct Model {
    pub catalogue: Catalogue,
    /// Non-superposed events of the estimation window; clustering input.
    pub sample: EventSample,
    pub pca: PcaModel,
    pub projections: ProjectedEvents,
    /// Ordered clusters aligned with `sample.events`.
    pub clusters: ClusterResult,
    pub report: ModelReport,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).stage("output")
}

fn output_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::input("output", format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Loads `data.files` and brings the recording to MAD units.
pub fn load_input(cfg: &PipelineConfig, report: &mut RunReport) -> Result<Recording, CliError> {
    if cfg.data.files.is_empty() {
        return Err(CliError::Config("data.files is empty".into()));
    }
    let raw = report
        .time("ingest", || load_recording(&cfg.data.files, cfg.data.rate_hz))
        .stage("ingest")?;
    let rec = report.time("preprocess", || preprocess(raw, cfg))?;
    report.recording = Some(RecordingSummary::of(&rec));
    Ok(rec)
}

pub fn preprocess(raw: Recording, cfg: &PipelineConfig) -> Result<Recording, CliError> {
    let rec = if cfg.preprocess.highpass {
        highpass(&raw, &cfg.filter_spec()).stage("preprocess")?
    } else {
        raw
    };
    if cfg.preprocess.normalize {
        normalize(&rec).stage("preprocess")
    } else {
        let rate = rec.rate_hz();
        Recording::new(rec.into_data(), rate, Stage::Normalized).stage("preprocess")
    }
}

pub fn estimation_samples(cfg: &PipelineConfig, rec: &Recording) -> usize {
    match cfg.run.estimation_s {
        Some(s) => ((s * rec.rate_hz()).round() as usize).min(rec.samples()),
        None => rec.samples() / 2,
    }
}

fn cluster_points(points: &[Vec<f64>], cfg: &PipelineConfig) -> peelsort::Result<ClusterResult> {
    let (k, seed) = (cfg.cluster.k, cfg.cluster_seed());
    match cfg.cluster.method {
        MethodName::Kmeans => kmeans(points, k, seed, cfg.cluster.restarts),
        MethodName::Gmm => gmm_em(points, k, seed, cfg.cluster.restarts).map(|(_, r)| r),
        MethodName::Bagged => bagged_cluster(points, k, cfg.cluster.bootstrap_b, seed),
    }
}

/// Detects, cuts and flags events on `rec` with the configured cut spec,
/// or with one derived from wide cuts when `events.auto_cut` is set.
pub fn event_sample(rec: &Recording, cfg: &PipelineConfig) -> Result<(EventSample, usize), CliError> {
    let dp = cfg.detection_params();
    let peaks = detect(rec, &dp).stage("detect")?;
    let spec = if cfg.events.auto_cut {
        let wide = CutSpec::new(cfg.events.wide, cfg.events.wide).stage("events")?;
        let wide_sample = make_cuts(rec, &peaks, &wide).stage("events")?;
        optimal_cut_bounds(&wide_sample, cfg.events.noise_level).stage("events")?
    } else {
        cfg.cut_spec()
    };
    let sample = make_cuts(rec, &peaks, &spec).stage("events")?;
    Ok((
        flag_superpositions(&sample, cfg.side_threshold(), dp.min_separation),
        peaks.len(),
    ))
}

/// Model estimation on the leading window of a normalized recording.
pub fn build_model(rec: &Recording, cfg: &PipelineConfig, report: &mut RunReport) -> Result<Model, CliError> {
    let n = estimation_samples(cfg, rec);
    let window = rec.slice(0, n).stage("model")?;
    let (sample, detected) = report.time("detect", || event_sample(&window, cfg))?;
    let clean = sample.non_superposed();
    let pca = report.time("reduce", || fit_pca(&clean)).stage("reduce")?;
    let k = cfg.reduce.components.min(pca.dim());
    let projections = project(&pca, &clean, k).stage("reduce")?;
    let result = report
        .time("cluster", || cluster_points(&projections.coords, cfg))
        .stage("cluster")?;
    let clusters = order_clusters(&result, &clean);
    let templates = report
        .time("templates", || build_templates(&window, &clean, &clusters))
        .stage("templates")?;
    let catalogue = Catalogue::new(templates, sample.spec, rec.rate_hz()).stage("model")?;

    let total: f64 = pca.explained_variance.iter().sum();
    let model_report = ModelReport {
        estimation_samples: n,
        detected,
        cut: sample.len(),
        dropped_at_edge: sample.dropped_at_edge,
        superposed: sample.superposed_count(),
        clustered: clean.len(),
        before: sample.spec.before,
        after: sample.spec.after,
        components: k,
        explained_variance_ratio: pca.explained_variance[..k]
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect(),
        cluster_sizes: clusters.sizes(),
        cluster_l1_sizes: catalogue.templates.iter().map(|t| t.l1_size).collect(),
        removed_empty: clusters.removed_empty,
    };
    Ok(Model {
        catalogue,
        sample: clean,
        pca,
        projections,
        clusters,
        report: model_report,
    })
}

pub fn write_model(dir: &Path, model: &Model) -> Result<(), CliError> {
    model.catalogue.write(&dir.join(CATALOGUE_FILE)).stage("output")?;
    let mut labels = String::from("peak_index,neuron\n");
    for (e, l) in model.sample.events.iter().zip(&model.clusters.labels) {
        writeln!(labels, "{},{l}", e.peak_index).unwrap();
    }
    write_text(&dir.join("labels.csv"), &labels)?;
    let mut summary = String::from("neuron,events,l1_size\n");
    for (j, (size, t)) in model
        .clusters
        .sizes()
        .iter()
        .zip(&model.catalogue.templates)
        .enumerate()
    {
        writeln!(summary, "{j},{size},{}", t.l1_size).unwrap();
    }
    write_text(&dir.join("clusters.csv"), &summary)?;
    write_text(&dir.join("projections.csv"), &projections_csv(&model.projections))?;
    write_scatter(&dir.join("scatter"), &model.projections)?;

    let mad_dir = dir.join("cluster_mad");
    std::fs::create_dir_all(&mad_dir).map_err(|e| CliError::input("output", e.to_string()))?;
    let spec = model.sample.spec;
    for j in 0..model.clusters.k() {
        let members = model.sample.filtered_by_index(|i| model.clusters.labels[i] == j);
        let mad = pointwise_mad(&members).stage("output")?;
        let mut csv = String::from("offset");
        for c in 0..mad.channels() {
            write!(csv, ",ch{c}").unwrap();
        }
        csv.push('\n');
        for i in 0..mad.width() {
            write!(csv, "{}", i as i64 - spec.before as i64).unwrap();
            for c in 0..mad.channels() {
                write!(csv, ",{}", mad[(c, i)]).unwrap();
            }
            csv.push('\n');
        }
        write_text(&mad_dir.join(format!("neuron{j}.csv")), &csv)?;
    }
    Ok(())
}

fn write_scatter(dir: &Path, pe: &ProjectedEvents) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input("output", e.to_string()))?;
    for (name, csv) in scatter_matrix_csvs(pe) {
        write_text(&dir.join(name), &csv)?;
    }
    Ok(())
}

pub fn cmd_model(cfg: &PipelineConfig) -> Result<(Model, RunReport), CliError> {
    let mut report = RunReport::new("model", cfg);
    let rec = load_input(cfg, &mut report)?;
    let model = build_model(&rec, cfg, &mut report)?;
    let dir = output_dir(cfg)?;
    write_model(&dir, &model)?;
    report.model = Some(model.report.clone());
    report.write(&dir.join("model_report.json"))?;
    Ok((model, report))
}

pub fn spikes_csv(out: &PeelOutput, rate_hz: f64) -> String {
    let mut csv = String::from(
        "round,neuron,peak_index,delta,corrected_time_samples,corrected_time_seconds,rss_before,rss_after\n",
    );
    for s in &out.spikes.entries {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.round,
            s.neuron,
            s.peak_index,
            s.delta,
            s.corrected_time,
            s.corrected_time / rate_hz,
            s.rss_before,
            s.rss_after
        )
        .unwrap();
    }
    csv
}

pub fn unclassified_csv(out: &PeelOutput) -> String {
    let mut csv = String::from("round,peak_index,rss\n");
    for d in &out.decisions {
        if let Outcome::Unclassified { rss_before } = d.outcome {
            writeln!(csv, "{},{},{rss_before}", d.round, d.peak_index).unwrap();
        }
    }
    csv
}

/// Peels a normalized recording with `cat`.
pub fn classify(rec: &Recording, cat: &Catalogue, cfg: &PipelineConfig) -> Result<PeelOutput, CliError> {
    cat.check_compatible(rec)
        .map_err(|e| CliError::input("classify", e.to_string()))?;
    peel(rec, cat, &cfg.peel_params()).stage("peel")
}

pub fn cmd_classify(cfg: &PipelineConfig, catalogue: &Path) -> Result<(PeelOutput, RunReport), CliError> {
    let mut report = RunReport::new("classify", cfg);
    let cat = Catalogue::read(catalogue).stage("catalogue")?;
    let rec = load_input(cfg, &mut report)?;
    let out = report.time("peel", || classify(&rec, &cat, cfg))?;
    let dir = output_dir(cfg)?;
    write_text(&dir.join(SPIKES_FILE), &spikes_csv(&out, rec.rate_hz()))?;
    write_text(&dir.join(UNCLASSIFIED_FILE), &unclassified_csv(&out))?;
    let residual_dir = dir.join(RESIDUAL_DIR);
    std::fs::create_dir_all(&residual_dir).map_err(|e| CliError::input("output", e.to_string()))?;
    write_recording(&out.residual, &residual_dir, false).stage("output")?;
    report.classify = Some(ClassifyReport::new(&out, cat.len(), &rec));
    report.write(&dir.join("classify_report.json"))?;
    Ok((out, report))
}

/// `model` followed by `classify` with the catalogue just written.
pub fn cmd_sort(cfg: &PipelineConfig) -> Result<(Model, PeelOutput), CliError> {
    let (model, _) = cmd_model(cfg)?;
    let (out, _) = cmd_classify(cfg, &cfg.run.output_dir.join(CATALOGUE_FILE))?;
    Ok((model, out))
}

pub fn simulate(cfg: &PipelineConfig) -> GroundTruth {
    match cfg.synth.scenario.as_str() {
        "locust" => locust_like_scenario(cfg.synth_seed()),
        other => unreachable!("scenario {other} passed validation"),
    }
}

pub fn truth_csv(truth: &GroundTruth) -> String {
    let mut csv = String::from("neuron,true_time_samples\n");
    for s in &truth.spikes {
        writeln!(csv, "{},{}", s.neuron, s.time).unwrap();
    }
    csv
}

/// Writes the scenario's channel files, `truth.csv` and a config that
/// points at the channel files.
pub fn cmd_simulate(cfg: &PipelineConfig, out: &Path) -> Result<GroundTruth, CliError> {
    let truth = simulate(cfg);
    std::fs::create_dir_all(out).map_err(|e| CliError::input("simulate", format!("{}: {e}", out.display())))?;
    let files = write_recording(&truth.recording, out, cfg.synth.gzip).stage("simulate")?;
    write_text(&out.join(TRUTH_FILE), &truth_csv(&truth))?;
    let mut sim_cfg = PipelineConfig::default();
    sim_cfg.data.files = files.iter().map(|f| PathBuf::from(f.file_name().unwrap())).collect();
    sim_cfg.data.rate_hz = truth.recording.rate_hz();
    write_text(&out.join(SIM_CONFIG_FILE), &sim_cfg.to_toml())?;
    Ok(truth)
}

/// Peak indices on the full recording, one per line.
pub fn cmd_detect(cfg: &PipelineConfig, out: &Path) -> Result<Vec<usize>, CliError> {
    let mut report = RunReport::new("detect", cfg);
    let rec = load_input(cfg, &mut report)?;
    let peaks = detect(&rec, &cfg.detection_params()).stage("detect")?;
    let text: String = peaks.indices.iter().map(|p| format!("{p}\n")).collect();
    write_text(out, &text)?;
    Ok(peaks.indices)
}

pub fn events_csv(sample: &EventSample) -> String {
    let mut csv = String::from("peak_index,superposed");
    for c in 0..sample.channels {
        for i in 0..sample.spec.width() {
            write!(csv, ",ch{c}_{i}").unwrap();
        }
    }
    csv.push('\n');
    for e in &sample.events {
        write!(csv, "{},{}", e.peak_index, u8::from(e.superposed)).unwrap();
        for v in e.cuts.as_slice() {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    csv
}

/// Flagged events of the full recording as CSV.
pub fn cmd_events(cfg: &PipelineConfig, out: &Path) -> Result<EventSample, CliError> {
    let mut report = RunReport::new("events", cfg);
    let rec = load_input(cfg, &mut report)?;
    let (sample, _) = event_sample(&rec, cfg)?;
    write_text(out, &events_csv(&sample))?;
    Ok(sample)
}

/// PCA of the non-superposed events of the full recording.
pub fn cmd_reduce(cfg: &PipelineConfig, export: &Path, scatter: Option<&Path>) -> Result<ProjectedEvents, CliError> {
    let mut report = RunReport::new("reduce", cfg);
    let rec = load_input(cfg, &mut report)?;
    let (sample, _) = event_sample(&rec, cfg)?;
    let clean = sample.non_superposed();
    let pca = fit_pca(&clean).stage("reduce")?;
    let pe = project(&pca, &clean, cfg.reduce.components.min(pca.dim())).stage("reduce")?;
    write_text(export, &projections_csv(&pe))?;
    if let Some(dir) = scatter {
        write_scatter(dir, &pe)?;
    }
    Ok(pe)
}
