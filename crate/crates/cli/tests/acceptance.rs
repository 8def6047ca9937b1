//! Acceptance criteria for the whole toolkit. Runs without the test
//! harness and prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::time::Instant;

use oracle::{exact_template, fft_shift_waveform, grid_search_delta, sampled, smooth_shapes, template_from};
use peelsort::cluster::{kmeans, partition_agreement};
use peelsort::events::{CutSpec, EventSample};
use peelsort::jitter::{derivative_trace, estimate_jitter, estimate_jitter_linear, refine_jitter_newton, Template};
use peelsort::peel::{peel, Catalogue, PeelParams};
use peelsort::preprocess::normalize;
use peelsort::reduce::{fit_pca, project};
use peelsort::stats::{mad, median};
use peelsort::synth::{ar1_noise, locust_neurons, place, shifted, GroundTruth, NoiseModel, LOCUST_SUPPORT};
use peelsort::{Recording, Stage, Waveform};
use peelsort_cli::pipeline::{self, build_model, classify, event_sample, preprocess, simulate};
use peelsort_cli::report::RunReport;
use peelsort_cli::PipelineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scenario seed shared by the end-to-end criteria.
const SCENARIO_SEED: u64 = 1;
/// A classified spike matches a true spike within this many samples.
const MATCH_TOLERANCE: f64 = 2.0;
/// Ten neurons plus one cluster for threshold crossings of the noise.
const END_TO_END_K: usize = 11;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.seed = Some(SCENARIO_SEED);
    cfg.cluster.k = END_TO_END_K;
    cfg
}

fn normalization() -> Outcome {
    let truth = simulate(&scenario_config());
    let mut recordings = vec![("synthetic".to_string(), truth.recording)];
    if let Ok(dir) = std::env::var("PEELSORT_LOCUST_DIR") {
        let files: Vec<_> = (1..=4)
            .map(|i| std::path::Path::new(&dir).join(format!("Locust_{i}.dat.gz")))
            .collect();
        if files.iter().all(|f| f.exists()) {
            let rec = peelsort::ingest::load_recording(&files, 15_000.0).map_err(|e| e.to_string())?;
            recordings.push(("locust".into(), rec));
        }
    }
    let mut details = Vec::new();
    let mut ok = true;
    for (name, rec) in recordings {
        let start = Instant::now();
        let norm = normalize(&rec).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut worst: f64 = 0.0;
        for c in 0..norm.channels() {
            let x = norm.channel(c);
            worst = worst.max(median(x).unwrap().abs()).max((mad(x).unwrap() - 1.0).abs());
        }
        ok &= worst <= 1e-9 && elapsed < 1.0;
        details.push(format!("{name}: max deviation {worst:.1e}, {elapsed:.3} s"));
    }
    check(ok, details.join("; "))
}

fn jitter_accuracy() -> Outcome {
    let deltas = [-0.5, -0.25, 0.0, 0.25, 0.5];
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let mut estimator_time = 0.0;
    let mut summary = Vec::new();
    for exact in [true, false] {
        let (mut lin_err, mut newton_err) = (0.0, 0.0);
        for (shape, gains) in smooth_shapes() {
            let f = sampled(&shape, &gains);
            let t = if exact { exact_template(&f) } else { template_from(&f) };
            for delta in deltas {
                let g = fft_shift_waveform(&f, delta);
                let reference = grid_search_delta(&g, &f, 0.7, 0.001);
                ok &= (reference - delta).abs() <= 0.001;
                let start = Instant::now();
                let lin = estimate_jitter_linear(&g, &t).map_err(|e| e.to_string())?;
                let est = estimate_jitter(&g, &t).map_err(|e| e.to_string())?;
                estimator_time += start.elapsed().as_secs_f64();
                worst = worst.max((est.delta - delta).abs()).max((lin - delta).abs());
                lin_err += (lin - delta).abs();
                newton_err += (est.delta - delta).abs();
            }
        }
        let n = (deltas.len() * smooth_shapes().len()) as f64;
        if exact {
            ok &= newton_err <= lin_err + 1e-12;
        }
        summary.push(format!(
            "{} derivatives: mean error linear {:.4}, newton {:.4}",
            if exact { "exact" } else { "central-difference" },
            lin_err / n,
            newton_err / n
        ));
    }
    ok &= worst <= 0.05 && estimator_time < 5.0;
    check(
        ok,
        format!("max |error| {worst:.4}; {}; {estimator_time:.3} s", summary.join("; ")),
    )
}

fn variance_law() -> Outcome {
    let (shape, gains) = &smooth_shapes()[0];
    let f = sampled(shape, gains);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let events: Vec<Waveform> = (0..2000).map(|_| shifted(&f, rng.random_range(-0.5..0.5))).collect();
    let sigma_delta = 1.0 / 12f64.sqrt();
    let slope = exact_template(&f).f1;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for c in 0..f.channels() {
        let top = slope.row(c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..f.width() {
            if slope[(c, i)].abs() < 0.2 * top {
                continue;
            }
            let vals: Vec<f64> = events.iter().map(|e| e[(c, i)]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            let want = sigma_delta * slope[(c, i)].abs();
            worst = worst.max((sd - want).abs() / want);
            checked += 1;
        }
    }
    check(
        worst <= 0.15,
        format!("{checked} positions, max relative error {worst:.3}"),
    )
}

fn exact_identities() -> Outcome {
    let f: Vec<f64> = (0..45)
        .map(|i| 8.0 * (-((i as f64 - 14.0).powi(2)) / 6.0).exp())
        .collect();
    let f1 = derivative_trace(&f);
    let f2 = derivative_trace(&f1);
    let w = |v: &[f64]| Waveform::from_rows(&[v.to_vec(), v.iter().map(|x| 0.4 * x).collect()]).unwrap();
    let t = Template::new(0, w(&f), w(&f1), w(&f2)).unwrap();
    let flat = Template::new(0, w(&f), w(&f1), Waveform::zeros(2, 45)).unwrap();
    let mut worst: f64 = 0.0;
    for c in [-0.45, -0.1, 0.2, 0.37] {
        let g = t.f.add_scaled(&t.f1, c);
        worst = worst.max((estimate_jitter_linear(&g, &t).unwrap() - c).abs());
        let refined = refine_jitter_newton(&g, &flat, c);
        worst = worst.max((refined.delta - c).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.1e}"))
}

fn true_catalogue(amplitude: f64) -> (Catalogue, Vec<Waveform>) {
    let spec = CutSpec::default();
    let (r0, _) = LOCUST_SUPPORT;
    let mut full_templates = Vec::new();
    let mut templates: Vec<Template> = locust_neurons()
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let top = n.template.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let full = n.template.scaled(amplitude / top);
            let rows = |transform: &dyn Fn(&[f64]) -> Vec<f64>| {
                let rows: Vec<Vec<f64>> = (0..full.channels())
                    .map(|c| transform(full.row(c))[r0 - spec.before..=r0 + spec.after].to_vec())
                    .collect();
                Waveform::from_rows(&rows).unwrap()
            };
            let t = Template::new(
                j,
                rows(&|r| r.to_vec()),
                rows(&|r| derivative_trace(r)),
                rows(&|r| derivative_trace(&derivative_trace(r))),
            )
            .unwrap();
            full_templates.push(full);
            t
        })
        .collect();
    templates.sort_by(|a, b| b.l1_size.total_cmp(&a.l1_size).then(a.neuron_id.cmp(&b.neuron_id)));
    (Catalogue::new(templates, spec, 15_000.0).unwrap(), full_templates)
}

fn superpositions() -> Outcome {
    let (cat, full) = true_catalogue(10.0);
    let pairs = [(0, 1), (4, 6), (2, 9), (7, 3)];
    let offsets = [5.0, 8.0, 15.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = NoiseModel {
        sigma: 1.0,
        ar_coeff: 0.0,
    };
    let samples = 400 * (pairs.len() * offsets.len() + 2);
    let mut data: Vec<Vec<f64>> = (0..4).map(|_| ar1_noise(&noise, samples, &mut rng)).collect();
    let mut truth = Vec::new();
    for (k, (pair, offset)) in pairs
        .iter()
        .flat_map(|p| offsets.iter().map(move |o| (p, o)))
        .enumerate()
    {
        let t0 = 400.0 * (k + 1) as f64 + rng.random_range(-0.5..0.5);
        for (neuron, time) in [(pair.0, t0), (pair.1, t0 + offset)] {
            assert!(place(&full[neuron], LOCUST_SUPPORT.0, time, &mut data));
            truth.push((neuron, time));
        }
    }
    let rec = Recording::new(data, 15_000.0, Stage::Normalized).unwrap();
    let out = peel(&rec, &cat, &PeelParams::default()).map_err(|e| e.to_string())?;
    let mut recovered = 0;
    let mut worst_time: f64 = 0.0;
    let mut last_round = 0;
    for &(neuron, time) in &truth {
        let hit = out
            .spikes
            .entries
            .iter()
            .filter(|s| (s.corrected_time - time).abs() <= MATCH_TOLERANCE)
            .min_by(|a, b| {
                (a.corrected_time - time)
                    .abs()
                    .total_cmp(&(b.corrected_time - time).abs())
            });
        if let Some(s) = hit.filter(|s| s.neuron == neuron) {
            recovered += 1;
            worst_time = worst_time.max((s.corrected_time - time).abs());
            last_round = last_round.max(s.round);
        }
    }
    check(
        recovered == truth.len() && worst_time <= 0.5 && last_round <= 3,
        format!(
            "{recovered}/{} spikes with correct id, max time error {worst_time:.3}, last round {last_round}",
            truth.len()
        ),
    )
}

struct Recovery {
    recovered: f64,
    misassigned: f64,
    false_positives: usize,
}

/// Greedy nearest matching of true spikes to classified spikes, with each
/// catalogue neuron mapped to the true neuron it matches most often.
fn score(truth: &GroundTruth, spikes: &[peelsort::peel::SpikeEntry], units: usize) -> Recovery {
    let neurons = truth.neurons.len();
    let mut used = vec![false; spikes.len()];
    let mut pairs = Vec::new();
    let mut confusion = vec![vec![0usize; neurons]; units];
    for t in &truth.spikes {
        let best = spikes
            .iter()
            .enumerate()
            .filter(|(i, s)| !used[*i] && (s.corrected_time - t.time).abs() <= MATCH_TOLERANCE)
            .min_by(|a, b| {
                (a.1.corrected_time - t.time)
                    .abs()
                    .total_cmp(&(b.1.corrected_time - t.time).abs())
            });
        if let Some((i, s)) = best {
            used[i] = true;
            pairs.push((s.neuron, t.neuron));
            confusion[s.neuron][t.neuron] += 1;
        }
    }
    let map: Vec<usize> = confusion
        .iter()
        .map(|row| (0..neurons).max_by_key(|&j| (row[j], usize::MAX - j)).unwrap())
        .collect();
    let correct = pairs.iter().filter(|(unit, neuron)| map[*unit] == *neuron).count();
    Recovery {
        recovered: correct as f64 / truth.spikes.len() as f64,
        misassigned: (pairs.len() - correct) as f64 / pairs.len().max(1) as f64,
        false_positives: used.iter().filter(|u| !**u).count(),
    }
}

fn end_to_end_and_progress() -> (Outcome, Outcome) {
    let cfg = scenario_config();
    let truth = simulate(&cfg);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let run = pool.install(|| -> Result<_, String> {
        let rec = preprocess(truth.recording.clone(), &cfg).map_err(|e| e.to_string())?;
        let mut report = RunReport::new("acceptance", &cfg);
        let model = build_model(&rec, &cfg, &mut report).map_err(|e| e.to_string())?;
        let out = classify(&rec, &model.catalogue, &cfg).map_err(|e| e.to_string())?;
        Ok((rec, model, out))
    });
    let elapsed = start.elapsed().as_secs_f64();
    let (rec, model, out) = match run {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let r = score(&truth, &out.spikes.entries, model.catalogue.len());
    let recovery = check(
        r.recovered >= 0.90 && r.misassigned <= 0.05 && elapsed <= 60.0,
        format!(
            "{} true spikes, recovered {:.1}%, misassigned {:.1}%, {} unmatched detections, {} templates, {elapsed:.2} s",
            truth.spikes.len(),
            100.0 * r.recovered,
            100.0 * r.misassigned,
            r.false_positives,
            model.catalogue.len()
        ),
    );

    let decreasing = out.spikes.entries.iter().all(|s| s.rss_after < s.rss_before);
    let mut energies = vec![rec.energy()];
    energies.extend(out.rounds.iter().map(|r| r.residual_energy));
    let non_increasing = energies.windows(2).all(|w| w[1] <= w[0]);
    let again = peel(&out.residual, &model.catalogue, &cfg.peel_params());
    let fixed_point = again.as_ref().map(|o| o.spikes.len()).unwrap_or(usize::MAX);
    let progress = check(
        decreasing && non_increasing && fixed_point == 0,
        format!(
            "{} subtractions all lower window energy: {decreasing}; energy over {} rounds non-increasing: {non_increasing}; spikes accepted on re-run of residual: {fixed_point}",
            out.spikes.len(),
            out.rounds.len()
        ),
    );
    (recovery, progress)
}

/// Non-superposed events of the whole scenario recording that sit on
/// exactly one true spike, with the true neuron of each.
fn matched_sample() -> (EventSample, Vec<usize>) {
    let cfg = scenario_config();
    let truth = simulate(&cfg);
    let rec = preprocess(truth.recording.clone(), &cfg).unwrap();
    let (sample, _) = event_sample(&rec, &cfg).unwrap();
    let clean = sample.non_superposed();
    let owners = |p: usize| {
        truth
            .spikes
            .iter()
            .filter(|s| (s.time - p as f64).abs() <= 3.0)
            .map(|s| s.neuron)
            .collect::<Vec<_>>()
    };
    let matched = clean.filtered_by_index(|i| owners(clean.events[i].peak_index).len() == 1);
    let labels = matched.events.iter().map(|e| owners(e.peak_index)[0]).collect();
    (matched, labels)
}

fn clustering(sample: &EventSample, truth: &[usize]) -> Outcome {
    let pca = fit_pca(sample).map_err(|e| e.to_string())?;
    let pe = project(&pca, sample, 10).map_err(|e| e.to_string())?;
    let a = kmeans(&pe.coords, 10, SCENARIO_SEED, 10).map_err(|e| e.to_string())?;
    let b = kmeans(&pe.coords, 10, SCENARIO_SEED, 10).map_err(|e| e.to_string())?;
    let agreement = partition_agreement(&a.labels, truth);
    check(
        a == b && agreement >= 0.95,
        format!(
            "{} events, identical reruns: {}, agreement {:.3}",
            truth.len(),
            a == b,
            agreement
        ),
    )
}

fn pca_correctness(sample: &EventSample) -> Outcome {
    let pca = fit_pca(sample).map_err(|e| e.to_string())?;
    let d = pca.dim();
    let mut ortho: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = pca.components[i]
                .iter()
                .zip(&pca.components[j])
                .map(|(a, b)| a * b)
                .sum();
            ortho = ortho.max((dot - f64::from(i == j)).abs());
        }
    }
    let mut recon: f64 = 0.0;
    for e in &sample.events {
        let x = e.cuts.as_slice();
        let back = pca.reconstruct(&pca.project_vector(x, d));
        recon = recon.max(x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    // total variance straight from the data
    let n = sample.events.len() as f64;
    let total: f64 = (0..d)
        .map(|k| {
            let vals: Vec<f64> = sample.events.iter().map(|e| e.cuts.as_slice()[k]).collect();
            let m = vals.iter().sum::<f64>() / n;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum();
    let explained: f64 = pca.explained_variance.iter().sum();
    let rel = (explained - total).abs() / total;
    check(
        ortho <= 1e-9 && recon <= 1e-9 && rel <= 1e-6,
        format!("orthonormality {ortho:.1e}, reconstruction {recon:.1e}, variance sum relative error {rel:.1e}"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim = dir.path().join("sim");
    pipeline::cmd_simulate(&scenario_config(), &sim).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let overrides = vec![
            format!("run.output_dir={:?}", out.display().to_string()),
            format!("cluster.k={END_TO_END_K}"),
        ];
        let cfg =
            PipelineConfig::load(Some(&sim.join(pipeline::SIM_CONFIG_FILE)), &overrides).map_err(|e| e.to_string())?;
        pipeline::cmd_sort(&cfg).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        outputs.push((
            read(pipeline::SPIKES_FILE)?,
            read(pipeline::UNCLASSIFIED_FILE)?,
            read("labels.csv")?,
        ));
    }
    let same = outputs[0] == outputs[1];
    check(
        same && !outputs[0].0.is_empty(),
        format!("spikes.csv {} bytes, identical across runs: {same}", outputs[0].0.len()),
    )
}

fn main() {
    let (matched, labels) = matched_sample();
    let (recovery, progress) = end_to_end_and_progress();
    let results: Vec<(&str, Outcome)> = vec![
        ("normalization contract", normalization()),
        ("jitter estimator accuracy", jitter_accuracy()),
        ("jitter variance law", variance_law()),
        ("exact-model identities", exact_identities()),
        ("peeling resolves superpositions", superpositions()),
        ("end-to-end recovery", recovery),
        ("monotone progress", progress),
        ("clustering determinism and quality", clustering(&matched, &labels)),
        ("PCA correctness", pca_correctness(&matched)),
        ("reproducibility", reproducibility()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    // failures are reported above; strict mode also fails the test run
    if failed > 0 && std::env::var_os("PEELSORT_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
