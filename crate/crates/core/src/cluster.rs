//! K-means, Gaussian-mixture EM and bagged clustering of projected events,
//! plus the canonical cluster ordering by waveform size.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::events::{pointwise_median, EventSample};
use crate::{Error, Result, Waveform};

pub const KMEANS_MAX_ITER: usize = 300;
pub const EM_MAX_ITER: usize = 500;
/// EM stops once the per-point log-likelihood gain drops below this.
pub const EM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterMethod {
    #[default]
    KMeans,
    Gmm,
    Bagged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub method: ClusterMethod,
    /// Empty clusters dropped (with relabeling) while building this result.
    pub removed_empty: usize,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Drops clusters without members, keeping the order of the others.
    fn compact(mut self) -> Self {
        let sizes = self.sizes();
        let mut map = vec![usize::MAX; sizes.len()];
        let mut centers = Vec::new();
        for (old, &size) in sizes.iter().enumerate() {
            if size > 0 {
                map[old] = centers.len();
                centers.push(std::mem::take(&mut self.centers[old]));
            }
        }
        self.removed_empty += sizes.len() - centers.len();
        self.labels.iter_mut().for_each(|l| *l = map[*l]);
        self.centers = centers;
        self
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Within-cluster sum of squares of `labels` against `centers`.
pub fn wcss(points: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::param("cluster count must be >= 1"));
    }
    if k > points.len() {
        return Err(Error::param(format!(
            "{k} clusters requested for {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::param("points must share a non-zero dimension"));
    }
    Ok(())
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// One Lloyd run from k-means++ seeds. Keeps all `k` centers (an empty
/// cluster keeps its previous center) and the WCSS after every assignment.
#[derive(Debug, Clone)]
pub(crate) struct LloydRun {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub wcss: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub history: Vec<f64>,
}

pub(crate) fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> LloydRun {
    let dim = points[0].len();
    let mut centers = plus_plus_seeds(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = vec![wcss(points, &labels, &centers)];
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        history.push(wcss(points, &labels, &centers));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
        history.push(wcss(points, &labels, &centers));
    }
    let wcss = wcss(points, &labels, &centers);
    LloydRun {
        labels,
        centers,
        wcss,
        history,
    }
}

fn best_of(runs: Vec<LloydRun>) -> LloydRun {
    // first minimum wins ties
    runs.into_iter()
        .reduce(|best, r| if r.wcss < best.wcss { r } else { best })
        .expect("at least one run")
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` runs by WCSS.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<ClusterResult> {
    check_points(points, k)?;
    let runs: Vec<LloydRun> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(points, k, &mut rng_for(seed, r as u64)))
        .collect();
    let best = best_of(runs);
    Ok(ClusterResult {
        labels: best.labels,
        centers: best.centers,
        method: ClusterMethod::KMeans,
        removed_empty: 0,
    }
    .compact())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `k × k` covariance of each component.
    pub covariances: Vec<DMatrix<f64>>,
    /// Total log-likelihood at the returned parameters.
    pub log_likelihood: f64,
    /// Per-point log-likelihood after every E-step.
    pub history: Vec<f64>,
    /// Components dropped for weight below `1 / (10 n)`.
    pub pruned: usize,
}

struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn log_densities(x: &[DVector<f64>], comps: &[Component]) -> Result<Vec<Vec<f64>>> {
    let dim = x[0].len() as f64;
    let mut out = vec![vec![0.0; comps.len()]; x.len()];
    for (j, c) in comps.iter().enumerate() {
        let chol = c
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("covariance of component {j} is not positive definite")))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let norm = c.weight.ln() - 0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det);
        for (i, xi) in x.iter().enumerate() {
            let diff = xi - &c.mean;
            let z = chol.l().solve_lower_triangular(&diff).expect("non-singular factor");
            out[i][j] = norm - 0.5 * z.norm_squared();
        }
    }
    Ok(out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct EmRun {
    comps: Vec<Component>,
    resp: Vec<Vec<f64>>,
    log_likelihood: f64,
    history: Vec<f64>,
    pruned: usize,
}

fn em_from(x: &[DVector<f64>], init: &LloydRun, k: usize, ridge: f64) -> Result<EmRun> {
    let n = x.len();
    let dim = x[0].len();
    let global_cov = covariance(x, &vec![1.0; n], &mean_of(x, &vec![1.0; n]));
    let mut comps: Vec<Component> = (0..k)
        .map(|j| {
            let w: Vec<f64> = init.labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
            let count: f64 = w.iter().sum();
            let mean = DVector::from_vec(init.centers[j].clone());
            let cov = if count >= 2.0 {
                covariance(x, &w, &mean)
            } else {
                global_cov.clone()
            };
            Component {
                weight: count.max(1.0) / n as f64,
                mean,
                cov: cov + DMatrix::identity(dim, dim) * ridge,
            }
        })
        .collect();
    normalize_weights(&mut comps);

    let mut history = Vec::new();
    let mut pruned = 0;
    let mut prev: Option<f64> = None;
    loop {
        let logs = log_densities(x, &comps)?;
        let mut total = 0.0;
        let resp: Vec<Vec<f64>> = logs
            .iter()
            .map(|row| {
                let lse = log_sum_exp(row);
                total += lse;
                row.iter().map(|v| (v - lse).exp()).collect()
            })
            .collect();
        let per_point = total / n as f64;
        history.push(per_point);
        let converged = prev.is_some_and(|p| per_point - p < EM_TOLERANCE);
        if converged || history.len() >= EM_MAX_ITER {
            return Ok(EmRun {
                comps,
                resp,
                log_likelihood: total,
                history,
                pruned,
            });
        }
        prev = Some(per_point);

        let mut next = Vec::with_capacity(comps.len());
        for j in 0..comps.len() {
            let w: Vec<f64> = resp.iter().map(|r| r[j]).collect();
            let nk: f64 = w.iter().sum();
            if nk / (n as f64) < 1.0 / (10.0 * n as f64) {
                pruned += 1;
                continue;
            }
            let mean = mean_of(x, &w);
            let cov = covariance(x, &w, &mean) + DMatrix::identity(dim, dim) * ridge;
            next.push(Component {
                weight: nk / n as f64,
                mean,
                cov,
            });
        }
        if next.is_empty() {
            return Err(Error::Numerical("every mixture component was pruned".into()));
        }
        normalize_weights(&mut next);
        comps = next;
    }
}

fn normalize_weights(comps: &mut [Component]) {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
}

fn mean_of(x: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let total: f64 = w.iter().sum();
    let mut m = DVector::zeros(x[0].len());
    for (xi, wi) in x.iter().zip(w) {
        m.axpy(*wi, xi, 1.0);
    }
    m / total
}

fn covariance(x: &[DVector<f64>], w: &[f64], mean: &DVector<f64>) -> DMatrix<f64> {
    let dim = mean.len();
    let total: f64 = w.iter().sum();
    let mut c = DMatrix::zeros(dim, dim);
    for (xi, wi) in x.iter().zip(w) {
        let d = xi - mean;
        c.ger(*wi, &d, &d, 1.0);
    }
    c / total
}

/// Full-covariance Gaussian mixture fitted by EM from k-means starts; the
/// best of `restarts` fits by final log-likelihood is kept.
pub fn gmm_em(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<(GmmModel, ClusterResult)> {
    check_points(points, k)?;
    let x: Vec<DVector<f64>> = points.iter().map(|p| DVector::from_vec(p.clone())).collect();
    let n = points.len();
    let dim = points[0].len();
    let all = mean_of(&x, &vec![1.0; n]);
    let mean_var = covariance(&x, &vec![1.0; n], &all).trace() / dim as f64;
    let ridge = 1e-6 * if mean_var > 0.0 { mean_var } else { 1.0 };

    let runs: Vec<Result<EmRun>> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let init = lloyd(points, k, &mut rng_for(seed, r as u64));
            em_from(&x, &init, k, ridge)
        })
        .collect();
    let mut best: Option<EmRun> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one run");
    let labels = run
        .resp
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0
        })
        .collect();
    let model = GmmModel {
        weights: run.comps.iter().map(|c| c.weight).collect(),
        means: run.comps.iter().map(|c| c.mean.iter().copied().collect()).collect(),
        covariances: run.comps.iter().map(|c| c.cov.clone()).collect(),
        log_likelihood: run.log_likelihood,
        history: run.history,
        pruned: run.pruned,
    };
    let result = ClusterResult {
        labels,
        centers: model.means.clone(),
        method: ClusterMethod::Gmm,
        removed_empty: 0,
    }
    .compact();
    Ok((model, result))
}

/// Seed of the k-means run on bootstrap replicate `b`.
pub fn replicate_seed(seed: u64, b: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b as u64 + 1)
}

/// Bagged clustering: k-means on `b` bootstrap resamples, average-linkage
/// clustering of the `b·k` pooled centers cut at `k` groups, labels by the
/// nearest group mean.
pub fn bagged_cluster(points: &[Vec<f64>], k: usize, b: usize, seed: u64) -> Result<ClusterResult> {
    check_points(points, k)?;
    if b == 0 {
        return Err(Error::param("bootstrap count must be >= 1"));
    }
    let n = points.len();
    let resamples: Vec<Vec<usize>> = (0..b)
        .map(|r| {
            let mut rng = rng_for(seed, u64::MAX - r as u64);
            (0..n).map(|_| rng.random_range(0..n)).collect()
        })
        .collect();
    Ok(bagged_from_resamples(points, k, &resamples, seed)?.0)
}

/// Bagging over explicit resamples. Returns the result and the pooled center count.
pub fn bagged_from_resamples(
    points: &[Vec<f64>],
    k: usize,
    resamples: &[Vec<usize>],
    seed: u64,
) -> Result<(ClusterResult, usize)> {
    check_points(points, k)?;
    let pooled: Vec<Vec<f64>> = resamples
        .par_iter()
        .enumerate()
        .map(|(r, idx)| {
            let boot: Vec<Vec<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
            let mut rng = rng_for(replicate_seed(seed, r), 0);
            lloyd(&boot, k, &mut rng).centers
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let pooled_count = pooled.len();
    let groups = average_linkage(&pooled, k);
    let centers: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut m = vec![0.0; points[0].len()];
            for &i in g {
                m.iter_mut().zip(&pooled[i]).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= g.len() as f64);
            m
        })
        .collect();
    let labels = points.iter().map(|p| nearest(p, &centers).0).collect();
    let result = ClusterResult {
        labels,
        centers,
        method: ClusterMethod::Bagged,
        removed_empty: 0,
    }
    .compact();
    Ok((result, pooled_count))
}

/// Agglomerative average-linkage clustering (Lance-Williams updates) cut
/// at `k` groups. Groups are returned ordered by their smallest member.
pub fn average_linkage(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&points[i], &points[j]).sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut active = n;
    while active > k {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_some() && dist[i][j] < best.2 {
                    best = (i, j, dist[i][j]);
                }
            }
        }
        let (a, b, _) = best;
        let gb = members[b].take().unwrap();
        let ga = members[a].as_mut().unwrap();
        let (na, nb) = (ga.len() as f64, gb.len() as f64);
        ga.extend(gb);
        for m in 0..n {
            if m != a && members[m].is_some() {
                let d = (na * dist[a][m] + nb * dist[b][m]) / (na + nb);
                dist[a][m] = d;
                dist[m][a] = d;
            }
        }
        active -= 1;
    }
    let mut groups: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Relabels clusters by decreasing L1 norm of their point-wise median
/// waveform (ties keep the original label order). `result.labels` must be
/// aligned with `sample.events`.
pub fn order_clusters(result: &ClusterResult, sample: &EventSample) -> ClusterResult {
    assert_eq!(result.labels.len(), sample.len(), "labels must align with events");
    let sizes = cluster_l1_sizes(result, sample);
    let mut order: Vec<usize> = (0..result.k()).filter(|&j| sizes[j].is_some()).collect();
    order.sort_by(|&a, &b| sizes[b].unwrap().total_cmp(&sizes[a].unwrap()).then(a.cmp(&b)));
    let mut map = vec![usize::MAX; result.k()];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new;
    }
    ClusterResult {
        labels: result.labels.iter().map(|&l| map[l]).collect(),
        centers: order.iter().map(|&old| result.centers[old].clone()).collect(),
        method: result.method,
        removed_empty: result.removed_empty + (result.k() - order.len()),
    }
}

/// L1 norm of each cluster's point-wise median waveform; `None` for empty clusters.
pub fn cluster_l1_sizes(result: &ClusterResult, sample: &EventSample) -> Vec<Option<f64>> {
    (0..result.k())
        .map(|j| {
            let members: Vec<&Waveform> = sample
                .events
                .iter()
                .zip(&result.labels)
                .filter(|(_, &l)| l == j)
                .map(|(e, _)| &e.cuts)
                .collect();
            (!members.is_empty()).then(|| pointwise_median(&members).l1_norm())
        })
        .collect()
}

/// Fraction of points on which two labelings agree after greedily matching
/// labels by their largest confusion counts.
pub fn partition_agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut confusion = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        confusion[x][y] += 1;
    }
    let mut used_a = vec![false; ka];
    let mut used_b = vec![false; kb];
    let mut matched = 0;
    loop {
        let mut best = None;
        for i in (0..ka).filter(|&i| !used_a[i]) {
            for j in (0..kb).filter(|&j| !used_b[j]) {
                if confusion[i][j] > 0 && best.is_none_or(|(_, _, c)| confusion[i][j] > c) {
                    best = Some((i, j, confusion[i][j]));
                }
            }
        }
        let Some((i, j, c)) = best else { break };
        used_a[i] = true;
        used_b[j] = true;
        matched += c;
    }
    matched as f64 / a.len() as f64
}
