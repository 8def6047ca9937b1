//! Template-matching classification with iterative subtraction ("peeling").
//!
//! Every round detects events on the current residual, matches each one
//! against every jitter-aligned template and, when the best match lowers
//! the event's squared norm, records the spike and subtracts the aligned
//! template from the residual. Rounds repeat until one accepts nothing.
//!
//! Two additions help with overlapping spikes: matching may move the window
//! a few samples off the detected peak, and after each round overlapping
//! spikes are fitted again against the residual with their own contribution
//! restored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::detect::{detect, DetectionParams};
use crate::events::CutSpec;
use crate::jitter::{aligned_center, estimate_jitter, Template};
use crate::reduce::fmt_f64;
use crate::{Error, Recording, Result, Stage, Waveform};

pub const CATALOGUE_VERSION: u32 = 1;

/// The model used for classification: one template per neuron, ordered by
/// decreasing L1 size.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    pub templates: Vec<Template>,
    pub spec: CutSpec,
    pub channels: usize,
    pub rate_hz: f64,
}

impl Catalogue {
    pub fn new(templates: Vec<Template>, spec: CutSpec, rate_hz: f64) -> Result<Self> {
        let first = templates
            .first()
            .ok_or_else(|| Error::param("a catalogue needs at least one template"))?;
        let (channels, width) = first.shape();
        if width != spec.width() {
            return Err(Error::param("template width does not match the cut spec"));
        }
        if templates.iter().any(|t| t.shape() != (channels, width)) {
            return Err(Error::param("templates differ in shape"));
        }
        if templates.windows(2).any(|w| w[0].l1_size < w[1].l1_size) {
            return Err(Error::param("templates must be ordered by decreasing L1 size"));
        }
        Ok(Self {
            templates,
            spec,
            channels,
            rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Errors unless `rec` has the catalogue's channel count and sampling rate.
    pub fn check_compatible(&self, rec: &Recording) -> Result<()> {
        if rec.channels() != self.channels {
            return Err(Error::param(format!(
                "catalogue has {} channels, recording has {}",
                self.channels,
                rec.channels()
            )));
        }
        if (rec.rate_hz() - self.rate_hz).abs() > 1e-9 * self.rate_hz {
            return Err(Error::param(format!(
                "catalogue sampled at {} Hz, recording at {} Hz",
                self.rate_hz,
                rec.rate_hz()
            )));
        }
        Ok(())
    }

    /// Line-oriented text form. Floats use 17 significant digits so a
    /// write/read round trip is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "peelsort-catalogue {CATALOGUE_VERSION}").unwrap();
        writeln!(out, "channels {}", self.channels).unwrap();
        writeln!(out, "width {}", self.spec.width()).unwrap();
        writeln!(out, "before {}", self.spec.before).unwrap();
        writeln!(out, "after {}", self.spec.after).unwrap();
        writeln!(out, "rate_hz {}", fmt_f64(self.rate_hz)).unwrap();
        writeln!(out, "templates {}", self.templates.len()).unwrap();
        for t in &self.templates {
            writeln!(out, "neuron {} l1 {}", t.neuron_id, fmt_f64(t.l1_size)).unwrap();
            for (name, w) in [("f", &t.f), ("f1", &t.f1), ("f2", &t.f2)] {
                out.push_str(name);
                for v in w.as_slice() {
                    out.push(' ');
                    out.push_str(&fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = CatalogueLines {
            inner: text.lines().enumerate(),
            last: 0,
        };
        let version: u32 = lines.keyed("peelsort-catalogue")?;
        if version != CATALOGUE_VERSION {
            return Err(lines.error(format!("unsupported catalogue version {version}")));
        }
        let channels: usize = lines.keyed("channels")?;
        let width: usize = lines.keyed("width")?;
        let before: usize = lines.keyed("before")?;
        let after: usize = lines.keyed("after")?;
        let rate_hz: f64 = lines.keyed("rate_hz")?;
        let count: usize = lines.keyed("templates")?;
        if before + after + 1 != width {
            return Err(lines.error("width must equal before + after + 1".into()));
        }
        if channels == 0 || count == 0 {
            return Err(lines.error("catalogue needs at least one channel and one template".into()));
        }
        let spec = CutSpec::new(before, after).map_err(|e| lines.error(e.to_string()))?;
        let mut templates = Vec::with_capacity(count);
        for _ in 0..count {
            let header = lines.next_fields()?;
            if header.len() != 4 || header[0] != "neuron" || header[2] != "l1" {
                return Err(lines.error("expected `neuron <id> l1 <size>`".into()));
            }
            let id: usize = header[1].parse().map_err(|_| lines.error("bad neuron id".into()))?;
            let mut arrays = Vec::with_capacity(3);
            for name in ["f", "f1", "f2"] {
                let fields = lines.next_fields()?;
                if fields.first() != Some(&name) {
                    return Err(lines.error(format!("expected `{name}` array")));
                }
                let values = fields[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| lines.error(format!("bad number `{v}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != channels * width || values.iter().any(|v| !v.is_finite()) {
                    return Err(lines.error(format!("`{name}` needs {} finite values", channels * width)));
                }
                arrays.push(Waveform::from_vec(channels, width, values)?);
            }
            let f2 = arrays.pop().unwrap();
            let f1 = arrays.pop().unwrap();
            let f = arrays.pop().unwrap();
            templates.push(Template::new(id, f, f1, f2)?);
        }
        if let Some(extra) = lines.next_fields().ok().filter(|f| !f.is_empty()) {
            return Err(lines.error(format!("unexpected trailing content `{}`", extra[0])));
        }
        Catalogue::new(templates, spec, rate_hz).map_err(|e| lines.error(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

struct CatalogueLines<'a, I: Iterator<Item = (usize, &'a str)>> {
    inner: I,
    last: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> CatalogueLines<'a, I> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            what: "catalogue",
            line: self.last,
            message,
        }
    }

    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok(line.split_whitespace().collect());
        }
        Err(self.error("unexpected end of catalogue".into()))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let fields = self.next_fields()?;
        if fields.len() != 2 || fields[0] != key {
            return Err(self.error(format!("expected `{key} <value>`")));
        }
        fields[1]
            .parse()
            .map_err(|_| self.error(format!("bad value for `{key}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Classified {
        neuron: usize,
        /// Offset of the matched window from the detected peak.
        shift: isize,
        delta: f64,
        rss_before: f64,
        rss_best: f64,
        /// Newton refinement was rejected for this neuron.
        fallback: bool,
    },
    Unclassified {
        rss_before: f64,
    },
}

impl Outcome {
    pub fn is_classified(&self) -> bool {
        matches!(self, Outcome::Classified { .. })
    }

    pub fn rss_before(&self) -> f64 {
        match *self {
            Outcome::Classified { rss_before, .. } | Outcome::Unclassified { rss_before } => rss_before,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationDecision {
    pub peak_index: usize,
    pub outcome: Outcome,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEntry {
    pub neuron: usize,
    /// Centre of the matched window: the detected peak plus the shift.
    pub peak_index: usize,
    pub delta: f64,
    /// Jitter-corrected spike time in samples.
    pub corrected_time: f64,
    pub round: usize,
    pub rss_before: f64,
    pub rss_after: f64,
}

/// Classified spikes sorted by corrected time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpikeTrain {
    pub entries: Vec<SpikeEntry>,
}

impl SpikeTrain {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Template with the smallest residual after jitter alignment:
/// (neuron, δ̂, R_j², fallback). Ties go to the earlier template.
fn best_template(g: &Waveform, cat: &Catalogue) -> Result<(usize, f64, f64, bool)> {
    let mut best: Option<(usize, f64, f64, bool)> = None;
    for t in &cat.templates {
        if g.shape() != t.shape() {
            return Err(Error::param("event shape does not match the catalogue"));
        }
        let (delta, fallback) = match estimate_jitter(g, t) {
            Ok(est) => (est.delta, est.fallback),
            Err(Error::FlatTemplate) => (0.0, true),
            Err(e) => return Err(e),
        };
        let rss = g.sub(&aligned_center(t, delta)).squared_norm();
        if best.is_none_or(|b| rss < b.2) {
            best = Some((t.neuron_id, delta, rss, fallback));
        }
    }
    Ok(best.expect("catalogue is non-empty"))
}

/// Matches `g` against every template with `R_j² < acceptance_factor · R²`
/// as the acceptance rule.
pub fn classify_event_with(g: &Waveform, cat: &Catalogue, acceptance_factor: f64) -> Result<Outcome> {
    let rss_before = g.squared_norm();
    let (neuron, delta, rss_best, fallback) = best_template(g, cat)?;
    Ok(if rss_best < acceptance_factor * rss_before {
        Outcome::Classified {
            neuron,
            shift: 0,
            delta,
            rss_before,
            rss_best,
            fallback,
        }
    } else {
        Outcome::Unclassified { rss_before }
    })
}

/// Classifies the event detected at `peak`, also trying windows centred up
/// to `max_shift` samples away. Among accepted candidates the one removing
/// the most window energy wins; ties go to the smaller shift.
fn classify_near(data: &[Vec<f64>], peak: usize, cat: &Catalogue, params: &PeelParams) -> Result<Outcome> {
    let reach = params.max_shift as isize;
    let mut best: Option<(Outcome, f64)> = None;
    let mut rss_at_peak = 0.0;
    for shift in std::iter::once(0).chain((1..=reach).flat_map(|s| [-s, s])) {
        let Some(center) = peak
            .checked_add_signed(shift)
            .filter(|&c| cat.spec.window(c, data[0].len()).is_some())
        else {
            continue;
        };
        let g = cut_window(data, center, &cat.spec);
        let rss_before = g.squared_norm();
        if shift == 0 {
            rss_at_peak = rss_before;
        }
        let (neuron, delta, rss_best, fallback) = best_template(&g, cat)?;
        let gain = rss_before - rss_best;
        if rss_best < params.acceptance_factor * rss_before && best.is_none_or(|b| gain > b.1) {
            let outcome = Outcome::Classified {
                neuron,
                shift,
                delta,
                rss_before,
                rss_best,
                fallback,
            };
            best = Some((outcome, gain));
        }
    }
    Ok(best.map_or(
        Outcome::Unclassified {
            rss_before: rss_at_peak,
        },
        |b| b.0,
    ))
}

pub fn classify_event(g: &Waveform, cat: &Catalogue) -> Result<Outcome> {
    classify_event_with(g, cat, 1.0)
}

fn template_for(cat: &Catalogue, neuron: usize) -> Result<&Template> {
    cat.templates
        .iter()
        .find(|t| t.neuron_id == neuron)
        .ok_or_else(|| Error::param(format!("neuron {neuron} is not in the catalogue")))
}

fn cut_window(data: &[Vec<f64>], peak: usize, spec: &CutSpec) -> Waveform {
    let start = peak - spec.before;
    let rows: Vec<Vec<f64>> = data.iter().map(|c| c[start..=peak + spec.after].to_vec()).collect();
    Waveform::from_rows(&rows).expect("equal-length windows")
}

/// Subtracts the aligned template in place. Returns false when the window
/// does not fit.
fn subtract_in_place(data: &mut [Vec<f64>], peak: usize, t: &Template, delta: f64, spec: &CutSpec) -> bool {
    add_scaled(data, peak, t, delta, spec, -1.0)
}

fn add_scaled(data: &mut [Vec<f64>], peak: usize, t: &Template, delta: f64, spec: &CutSpec, scale: f64) -> bool {
    let Some((start, _)) = spec.window(peak, data[0].len()) else {
        return false;
    };
    let aligned = aligned_center(t, delta);
    for (c, channel) in data.iter_mut().enumerate() {
        for (v, a) in channel[start..].iter_mut().zip(aligned.row(c)) {
            *v += scale * a;
        }
    }
    true
}

/// New residual-stage recording with the decision's aligned template
/// subtracted over its window.
pub fn subtract_spike(rec: &Recording, decision: &ClassificationDecision, cat: &Catalogue) -> Result<Recording> {
    let Outcome::Classified {
        neuron, shift, delta, ..
    } = decision.outcome
    else {
        return Err(Error::param("only classified events can be subtracted"));
    };
    let t = template_for(cat, neuron)?;
    let mut data = rec.data().to_vec();
    let center = decision.peak_index.checked_add_signed(shift);
    if !center.is_some_and(|c| subtract_in_place(&mut data, c, t, delta, &cat.spec)) {
        return Err(Error::param(format!(
            "window around {} leaves the recording",
            decision.peak_index
        )));
    }
    Ok(rec.derive(data, Stage::Residual))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeelParams {
    pub detection: DetectionParams,
    pub max_rounds: usize,
    pub acceptance_factor: f64,
    /// Largest offset, in samples, between a detected peak and the window
    /// a template is matched in. Zero matches at the detected peak only.
    pub max_shift: usize,
    /// Passes, after each round that accepted spikes, re-fitting every spike
    /// that overlaps another one against the residual plus its own
    /// contribution. Zero keeps the first fit of every spike.
    pub refine_passes: usize,
}

impl Default for PeelParams {
    fn default() -> Self {
        Self {
            detection: DetectionParams::default(),
            max_rounds: 10,
            acceptance_factor: 1.0,
            max_shift: 7,
            refine_passes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundStats {
    pub round: usize,
    pub detected: usize,
    pub accepted: usize,
    /// Events tagged unclassified for the first time this round, or re-tagged
    /// after a subtraction touched their window.
    pub unclassified: usize,
    /// Unclassified events from earlier rounds detected again with an untouched window.
    pub carried: usize,
    /// Overlapping spikes moved or relabelled by the refinement passes.
    pub refitted: usize,
    /// Spikes dropped by the refinement passes because no fit removed energy
    /// any more. Their events are reported unclassified.
    pub dropped: usize,
    /// Total residual energy at the end of the round.
    pub residual_energy: f64,
}

impl RoundStats {
    /// Share of this round's examined events left unclassified.
    pub fn unclassified_rate(&self) -> f64 {
        let examined = self.accepted + self.unclassified;
        if examined == 0 {
            0.0
        } else {
            self.unclassified as f64 / examined as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct PeelOutput {
    pub spikes: SpikeTrain,
    /// Every detected event once: accepted spikes and the final unclassified
    /// tags, sorted by round then peak index.
    pub decisions: Vec<ClassificationDecision>,
    pub residual: Recording,
    pub rounds: Vec<RoundStats>,
    /// Accepted spikes with |δ̂| > 0.5.
    pub large_jitter: usize,
    /// Accepted spikes whose Newton step was rejected.
    pub fallbacks: usize,
}

struct Pending {
    decision: ClassificationDecision,
    stale: bool,
}

/// An accepted spike while peeling is under way.
#[derive(Debug, Clone, Copy)]
struct Fit {
    detected: usize,
    round: usize,
    neuron: usize,
    center: usize,
    delta: f64,
    rss_before: f64,
    rss_best: f64,
    fallback: bool,
}

impl Fit {
    fn gain(&self) -> f64 {
        self.rss_before - self.rss_best
    }

    fn outcome(&self) -> Outcome {
        Outcome::Classified {
            neuron: self.neuron,
            shift: self.center as isize - self.detected as isize,
            delta: self.delta,
            rss_before: self.rss_before,
            rss_best: self.rss_best,
            fallback: self.fallback,
        }
    }
}

fn mark_stale(pending: &mut BTreeMap<usize, Pending>, center: usize, reach: usize) {
    for (_, e) in pending.range_mut(center.saturating_sub(reach - 1)..center + reach) {
        e.stale = true;
    }
}

/// One pass over the spikes that overlap a neighbour. Each is added back and
/// fitted again; the old fit, the best new fit or dropping the spike is kept,
/// whichever leaves the least energy. The residual energy never grows.
fn refine(
    data: &mut [Vec<f64>],
    fits: &mut Vec<Fit>,
    pending: &mut BTreeMap<usize, Pending>,
    cat: &Catalogue,
    params: &PeelParams,
) -> Result<(usize, usize)> {
    let spec = cat.spec;
    let reach = spec.width() + params.max_shift;
    fits.sort_by_key(|f| f.center);
    let crowded: Vec<bool> = (0..fits.len())
        .map(|i| {
            (i > 0 && fits[i].center - fits[i - 1].center < spec.width())
                || (i + 1 < fits.len() && fits[i + 1].center - fits[i].center < spec.width())
        })
        .collect();
    let (mut refitted, mut removed) = (0, 0);
    let mut kept = Vec::with_capacity(fits.len());
    for (fit, crowded) in fits.drain(..).zip(crowded) {
        if !crowded {
            kept.push(fit);
            continue;
        }
        let t = template_for(cat, fit.neuron)?;
        add_scaled(data, fit.center, t, fit.delta, &spec, 1.0);
        let g = cut_window(data, fit.center, &spec);
        let mut old = fit;
        old.rss_before = g.squared_norm();
        old.rss_best = g.sub(&aligned_center(t, fit.delta)).squared_norm();
        let old_ok = old.rss_best < params.acceptance_factor * old.rss_before;
        let fresh = match classify_near(data, fit.center, cat, params)? {
            Outcome::Classified {
                neuron,
                shift,
                delta,
                rss_before,
                rss_best,
                fallback,
            } => Some(Fit {
                neuron,
                center: fit.center.checked_add_signed(shift).expect("window was checked"),
                delta,
                rss_before,
                rss_best,
                fallback,
                ..fit
            }),
            Outcome::Unclassified { .. } => None,
        };
        let chosen = match (old_ok.then_some(old), fresh) {
            (Some(o), Some(f)) if f.gain() > o.gain() => Some(f),
            (Some(o), _) => Some(o),
            (None, f) => f,
        };
        mark_stale(pending, fit.center, reach);
        match chosen {
            Some(c) => {
                subtract_in_place(data, c.center, template_for(cat, c.neuron)?, c.delta, &spec);
                mark_stale(pending, c.center, reach);
                if c.center != fit.center || c.neuron != fit.neuron {
                    refitted += 1;
                }
                kept.push(c);
            }
            None => {
                removed += 1;
                let rss_before = spec
                    .window(fit.detected, data[0].len())
                    .map_or(0.0, |_| cut_window(data, fit.detected, &spec).squared_norm());
                // reported unclassified unless a later round detects it again
                let decision = ClassificationDecision {
                    peak_index: fit.detected,
                    outcome: Outcome::Unclassified { rss_before },
                    round: fit.round,
                };
                pending.insert(fit.detected, Pending { decision, stale: true });
            }
        }
    }
    *fits = kept;
    Ok((refitted, removed))
}

/// Runs peeling rounds on a normalized recording.
pub fn peel(rec: &Recording, cat: &Catalogue, params: &PeelParams) -> Result<PeelOutput> {
    if rec.stage() != Stage::Normalized && rec.stage() != Stage::Residual {
        return Err(Error::param("peeling needs a normalized recording"));
    }
    cat.check_compatible(rec)?;
    let spec = cat.spec;
    let reach = spec.width() + params.max_shift;
    let mut detection = params.detection;
    // every shifted window must fit in the trace
    detection.guard = detection.guard.max(spec.before.max(spec.after) + params.max_shift);

    let mut residual = rec.derive(rec.data().to_vec(), Stage::Residual);
    let mut fits: Vec<Fit> = Vec::new();
    let mut pending: BTreeMap<usize, Pending> = BTreeMap::new();
    let mut rounds = Vec::new();

    for round in 1..=params.max_rounds.max(1) {
        let peaks = detect(&residual, &detection)?;
        pending.retain(|p, e| !e.stale || peaks.indices.binary_search(p).is_ok());
        let mut stats = RoundStats {
            round,
            detected: peaks.len(),
            ..Default::default()
        };
        let mut data = residual.into_data();
        for &peak in &peaks.indices {
            if pending.get(&peak).is_some_and(|e| !e.stale) {
                stats.carried += 1;
                continue;
            }
            let outcome = classify_near(&data, peak, cat, params)?;
            pending.remove(&peak);
            match outcome {
                Outcome::Classified {
                    neuron,
                    shift,
                    delta,
                    rss_before,
                    rss_best,
                    fallback,
                } => {
                    let center = peak.checked_add_signed(shift).expect("window was checked");
                    subtract_in_place(&mut data, center, template_for(cat, neuron)?, delta, &spec);
                    mark_stale(&mut pending, center, reach);
                    stats.accepted += 1;
                    fits.push(Fit {
                        detected: peak,
                        round,
                        neuron,
                        center,
                        delta,
                        rss_before,
                        rss_best,
                        fallback,
                    });
                }
                Outcome::Unclassified { .. } => {
                    stats.unclassified += 1;
                    let decision = ClassificationDecision {
                        peak_index: peak,
                        outcome,
                        round,
                    };
                    pending.insert(peak, Pending { decision, stale: false });
                }
            }
        }
        if stats.accepted > 0 {
            for _ in 0..params.refine_passes {
                let (refitted, removed) = refine(&mut data, &mut fits, &mut pending, cat, params)?;
                stats.refitted += refitted;
                stats.dropped += removed;
                if refitted + removed == 0 {
                    break;
                }
            }
        }
        residual = rec.derive(data, Stage::Residual);
        stats.residual_energy = residual.energy();
        rounds.push(stats);
        if stats.accepted == 0 {
            break;
        }
    }

    let large_jitter = fits.iter().filter(|f| f.delta.abs() > 0.5).count();
    let fallbacks = fits.iter().filter(|f| f.fallback).count();
    let mut decisions: Vec<ClassificationDecision> = fits
        .iter()
        .map(|f| ClassificationDecision {
            peak_index: f.detected,
            outcome: f.outcome(),
            round: f.round,
        })
        .collect();
    decisions.extend(pending.into_values().map(|p| p.decision));
    decisions.sort_by_key(|d| (d.round, d.peak_index));
    let mut spikes: Vec<SpikeEntry> = fits
        .iter()
        .map(|f| SpikeEntry {
            neuron: f.neuron,
            peak_index: f.center,
            delta: f.delta,
            corrected_time: f.center as f64 - f.delta,
            round: f.round,
            rss_before: f.rss_before,
            rss_after: f.rss_best,
        })
        .collect();
    spikes.sort_by(|a, b| {
        a.corrected_time
            .total_cmp(&b.corrected_time)
            .then(a.neuron.cmp(&b.neuron))
    });
    Ok(PeelOutput {
        spikes: SpikeTrain { entries: spikes },
        decisions,
        residual,
        rounds,
        large_jitter,
        fallbacks,
    })
}
