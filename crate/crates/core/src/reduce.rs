//! PCA of flattened events and CSV export of the projections.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::events::EventSample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows sorted by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEvents {
    /// One row of `k` coordinates per event.
    pub coords: Vec<Vec<f64>>,
    /// Index of each row's event in the source sample.
    pub event_refs: Vec<usize>,
}

impl ProjectedEvents {
    pub fn dims(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }
}

pub fn fit_pca(sample: &EventSample) -> Result<PcaModel> {
    let rows: Vec<&[f64]> = sample.events.iter().map(|e| e.cuts.as_slice()).collect();
    fit_pca_rows(&rows)
}

/// PCA through the eigendecomposition of the (n - 1)-normalized covariance.
pub fn fit_pca_rows(rows: &[&[f64]]) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::param("PCA needs at least 2 events"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::param("events of unequal dimension"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(d);
    let mut explained_variance = Vec::with_capacity(d);
    for idx in order {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().enumerate().fold(
            (0, 0.0f64),
            |best, (i, x)| if x.abs() > best.1.abs() { (i, *x) } else { best },
        );
        if lead.1 < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `x` on the first `k` components.
    pub fn project_vector(&self, x: &[f64], k: usize) -> Vec<f64> {
        self.components[..k]
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    /// Maps `k` coordinates back to the event space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

pub fn project(model: &PcaModel, sample: &EventSample, k: usize) -> Result<ProjectedEvents> {
    if k == 0 || k > model.components.len() {
        return Err(Error::param(format!(
            "cannot project on {k} components, {} available",
            model.components.len()
        )));
    }
    Ok(ProjectedEvents {
        coords: sample
            .events
            .iter()
            .map(|e| model.project_vector(e.cuts.as_slice(), k))
            .collect(),
        event_refs: (0..sample.len()).collect(),
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn projections_csv(pe: &ProjectedEvents) -> String {
    let k = pe.dims();
    let mut out = String::from("event_ref");
    for j in 1..=k {
        write!(out, ",pc{j}").unwrap();
    }
    out.push('\n');
    for (r, row) in pe.event_refs.iter().zip(&pe.coords) {
        write!(out, "{r}").unwrap();
        for v in row {
            write!(out, ",{}", fmt_f64(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn export_projections(pe: &ProjectedEvents, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, projections_csv(pe).as_bytes())
}

pub fn parse_projections(text: &str) -> Result<ProjectedEvents> {
    let bad = |line: usize, message: String| Error::Parse {
        what: "projection CSV",
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let k = header.split(',').count() - 1;
    let mut pe = ProjectedEvents {
        coords: Vec::new(),
        event_refs: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(bad(i + 2, format!("expected {} fields", k + 1)));
        }
        pe.event_refs
            .push(fields[0].parse().map_err(|e| bad(i + 2, format!("{e}")))?);
        pe.coords.push(
            fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| bad(i + 2, format!("{e}"))))
                .collect::<Result<_>>()?,
        );
    }
    Ok(pe)
}

pub fn read_projections(path: &Path) -> Result<ProjectedEvents> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_projections(&text)
}

/// One two-column CSV per pair of components `(i, j)`, `i < j`, keyed by
/// file name `pc{i}_pc{j}.csv`.
pub fn scatter_matrix_csvs(pe: &ProjectedEvents) -> Vec<(String, String)> {
    let k = pe.dims();
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let mut csv = format!("pc{},pc{}\n", i + 1, j + 1);
            for row in &pe.coords {
                writeln!(csv, "{},{}", fmt_f64(row[i]), fmt_f64(row[j])).unwrap();
            }
            out.push((format!("pc{}_pc{}.csv", i + 1, j + 1), csv));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows_from(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect())
            .collect()
    }

    fn fit(rows: &[Vec<f64>]) -> PcaModel {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        fit_pca_rows(&refs).unwrap()
    }

    #[test]
    fn mean_and_component_coordinates() {
        let m = fit(&rows_from(1, 40, 6));
        assert!(m.project_vector(&m.mean, 3).iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = m.mean.iter().zip(&m.components[2]).map(|(a, c)| a + 2.5 * c).collect();
        let p = m.project_vector(&x, 4);
        for (j, v) in p.iter().enumerate() {
            let expected = if j == 2 { 2.5 } else { 0.0 };
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_events() {
        let rows = rows_from(1, 1, 3);
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert!(fit_pca_rows(&refs).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let pe = ProjectedEvents {
            coords: vec![vec![0.1, -2.0 / 3.0], vec![1e-300, 7.0], vec![f64::MAX, -0.0]],
            event_refs: vec![0, 4, 9],
        };
        let text = projections_csv(&pe);
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("event_ref,pc1,pc2\n"));
        assert_eq!(parse_projections(&text).unwrap(), pe);
        assert_eq!(scatter_matrix_csvs(&pe).len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn variance_bookkeeping_and_orthonormality(seed in 0u64..500, n in 3usize..40, d in 1usize..12) {
            let rows = rows_from(seed, n, d);
            let m = fit(&rows);
            for (i, a) in m.components.iter().enumerate() {
                for (j, b) in m.components.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - expected).abs() < 1e-9);
                }
            }
            for w in m.explained_variance.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let total: f64 = (0..d)
                .map(|j| {
                    let mu = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                    rows.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / (n - 1) as f64
                })
                .sum();
            let sum: f64 = m.explained_variance.iter().sum();
            prop_assert!((sum - total).abs() <= 1e-6 * total.max(1e-300));
            prop_assert_eq!(fit(&rows), m);
        }

        #[test]
        fn projection_never_lengthens_distances(seed in 0u64..500) {
            let rows = rows_from(seed, 20, 8);
            let m = fit(&rows);
            let (a, b) = (&rows[0], &rows[1]);
            let full: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            let mut prev = 0.0;
            for k in 1..=8 {
                let pa = m.project_vector(a, k);
                let pb = m.project_vector(b, k);
                let dk: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum();
                prop_assert!(dk + 1e-9 >= prev);
                prop_assert!(dk <= full + 1e-9);
                prev = dk;
            }
        }
    }
}
