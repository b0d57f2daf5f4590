//! Sample-set metrics in raw pixel space, plus rank scoring and Pareto fronts
//! for hyperparameter sweeps.

use std::io::Write;

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{mode_center_table, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manifold {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub consistency: f64,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 6] = ["frechet", "precision", "recall", "density", "coverage", "consistency"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "frechet" => self.frechet,
            "precision" => self.precision,
            "recall" => self.recall,
            "density" => self.density,
            "coverage" => self.coverage,
            "consistency" => self.consistency,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

/// Orientation of every [`MetricsReport`] column.
pub fn default_orientations() -> IndexMap<String, Orientation> {
    MetricsReport::NAMES
        .iter()
        .map(|&n| {
            let o = if n == "frechet" {
                Orientation::LowerIsBetter
            } else {
                Orientation::HigherIsBetter
            };
            (n.to_string(), o)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run_id: String,
    pub params: serde_json::Value,
    pub report: MetricsReport,
    pub orientations: IndexMap<String, Orientation>,
}

/// Rows of a rank-2 tensor as `f64` points.
fn points<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<Vec<Vec<f64>>> {
    if x.rank() == 0 {
        return Err(invalid(op, "expected a point set"));
    }
    let n = x.shape()[0];
    let d = if n == 0 { 0 } else { x.len() / n };
    Ok(x.data().chunks(d.max(1)).take(n).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(set.len());
    set.iter()
        .enumerate()
        .map(|(i, p)| {
            buf.clear();
            buf.extend(set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| sq_dist(p, q)));
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Real points with their k-NN radii, reusable across fake sets.
#[derive(Debug, Clone)]
pub struct ManifoldReference {
    real: Vec<Vec<f64>>,
    radii: Vec<f64>,
    k: usize,
}

impl ManifoldReference {
    pub fn new<T: Scalar>(real: &Tensor<T>, k: usize) -> Result<Self> {
        let real = points(real, "knn_manifold_metrics")?;
        if k == 0 || real.len() <= k {
            return Err(invalid("knn_manifold_metrics", format!("need more than k = {k} real points, got {}", real.len())));
        }
        let radii = knn_radii(&real, k);
        Ok(ManifoldReference { real, radii, k })
    }

    pub fn evaluate<T: Scalar>(&self, fake: &Tensor<T>) -> Result<Manifold> {
        let fake = points(fake, "knn_manifold_metrics")?;
        let k = self.k;
        if fake.len() <= k {
            return Err(invalid("knn_manifold_metrics", format!("need more than k = {k} fake points, got {}", fake.len())));
        }
        if fake[0].len() != self.real[0].len() {
            return Err(Error::ShapeMismatch {
                op: "knn_manifold_metrics",
                lhs: vec![self.real.len(), self.real[0].len()],
                rhs: vec![fake.len(), fake[0].len()],
            });
        }
        let fake_radii = knn_radii(&fake, k);
        let mut covered = vec![false; self.real.len()];
        let mut recalled = vec![false; self.real.len()];
        let (mut precise, mut dense) = (0usize, 0usize);
        for (f, &fr) in fake.iter().zip(&fake_radii) {
            let mut inside = 0usize;
            for (i, (r, &rr)) in self.real.iter().zip(&self.radii).enumerate() {
                let d = sq_dist(f, r);
                if d <= rr {
                    inside += 1;
                    covered[i] = true;
                }
                if d <= fr {
                    recalled[i] = true;
                }
            }
            precise += usize::from(inside > 0);
            dense += inside;
        }
        let (nf, nr) = (fake.len() as f64, self.real.len() as f64);
        let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / nr;
        Ok(Manifold {
            precision: precise as f64 / nf,
            recall: frac(&recalled),
            density: dense as f64 / (k as f64 * nf),
            coverage: frac(&covered),
        })
    }
}

/// Precision, recall, density and coverage of `fake` against `real`
/// (`[n, d]` point sets) with `k`-th nearest neighbour balls.
pub fn knn_manifold_metrics<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, k: usize) -> Result<Manifold> {
    ManifoldReference::new(real, k)?.evaluate(fake)
}

fn moments(set: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (set.len(), set[0].len());
    let mut mu = vec![0.0; d];
    for p in set {
        for (m, v) in mu.iter_mut().zip(p) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| set[i][j] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two `[n, d]` point sets
/// (unbiased covariance). `Tr((Σ_r Σ_f)^{1/2})` is taken as the trace of the
/// PSD root of `Σ_r^{1/2} Σ_f Σ_r^{1/2}`.
pub fn frechet_gaussian<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
    let (r, f) = (points(real, "frechet_gaussian")?, points(fake, "frechet_gaussian")?);
    if r.len() < 2 || f.len() < 2 {
        return Err(invalid("frechet_gaussian", "covariance needs at least 2 samples per set"));
    }
    if r[0].len() != f[0].len() {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian",
            lhs: vec![r.len(), r[0].len()],
            rhs: vec![f.len(), f[0].len()],
        });
    }
    let (mr, cr) = moments(&r);
    let (mf, cf) = moments(&f);
    let mean_term: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b) * (a - b)).sum();
    let root = psd_sqrt(&cr);
    let inner = &root * &cf * &root;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + cr.trace() + cf.trace() - 2.0 * cross).max(0.0))
}

/// Fraction of `samples` (`[n, ...]`) whose nearest mode prototype is the
/// mode they were conditioned on.
pub fn consistency<T: Scalar>(samples: &Tensor<T>, modes: &[usize], spec: &DatasetSpec) -> Result<f64> {
    let table = mode_center_table(spec)?;
    let pts = points(samples, "consistency")?;
    if pts.len() != modes.len() {
        return Err(invalid("consistency", "one mode per sample is required"));
    }
    if pts.is_empty() {
        return Err(invalid("consistency", "no samples"));
    }
    let protos: Vec<(usize, Vec<f64>)> =
        table.iter().map(|(&id, p)| (id, p.iter().map(|&v| v as f64).collect())).collect();
    let mut hits = 0usize;
    for (p, &m) in pts.iter().zip(modes) {
        if !table.contains_key(&m) {
            return Err(invalid("consistency", format!("unknown mode id {m}")));
        }
        let nearest = protos
            .iter()
            .map(|(id, q)| (sq_dist(p, q), *id))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, id)| id);
        hits += usize::from(nearest == Some(m));
    }
    Ok(hits as f64 / pts.len() as f64)
}

/// Full report of `fake` (with its conditioned modes) against a reference.
pub fn evaluate<T: Scalar>(
    reference: &ManifoldReference,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    modes: &[usize],
    spec: &DatasetSpec,
) -> Result<MetricsReport> {
    let flat = |x: &Tensor<T>| {
        let n = x.shape()[0];
        x.reshape(&[n, x.len() / n.max(1)])
    };
    let (real, fake) = (flat(real)?, flat(fake)?);
    let m = reference.evaluate(&fake)?;
    Ok(MetricsReport {
        frechet: frechet_gaussian(&real, &fake)?,
        precision: m.precision,
        recall: m.recall,
        density: m.density,
        coverage: m.coverage,
        consistency: consistency(&fake, modes, spec)?,
    })
}

/// Ranks `values` (1 = best); tied values share the mean of their span.
fn ranks(values: &[f64], orientation: Orientation) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| match orientation {
        Orientation::HigherIsBetter => -values[i],
        Orientation::LowerIsBetter => values[i],
    };
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut out = vec![0.0; values.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && key(idx[e + 1]) == key(idx[s]) {
            e += 1;
        }
        let mean = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            out[i] = mean;
        }
        s = e + 1;
    }
    out
}

/// Mean rank of each row of `table` across its columns.
pub fn rank_table(table: &[Vec<f64>], orientations: &[Orientation]) -> Result<Vec<f64>> {
    if table.iter().any(|r| r.len() != orientations.len()) {
        return Err(invalid("rank_score", "every run must report every metric"));
    }
    let mut total = vec![0.0; table.len()];
    for (c, &o) in orientations.iter().enumerate() {
        let col: Vec<f64> = table.iter().map(|r| r[c]).collect();
        for (t, r) in total.iter_mut().zip(ranks(&col, o)) {
            *t += r;
        }
    }
    let m = orientations.len().max(1) as f64;
    Ok(total.into_iter().map(|t| t / m).collect())
}

/// Average rank of each run over the metrics named in the first run's
/// orientations; lower is better.
pub fn rank_score(runs: &[SweepRun]) -> Result<Vec<f64>> {
    let Some(first) = runs.first() else { return Ok(Vec::new()) };
    let names: Vec<&String> = first.orientations.keys().collect();
    let orient: Vec<Orientation> = first.orientations.values().copied().collect();
    let mut table = Vec::with_capacity(runs.len());
    for r in runs {
        let row = names
            .iter()
            .map(|n| r.report.get(n).ok_or_else(|| invalid("rank_score", format!("run {} lacks metric `{n}`", r.run_id))))
            .collect::<Result<Vec<_>>>()?;
        table.push(row);
    }
    rank_table(&table, &orient)
}

/// Indices of non-dominated points, in input order.
pub fn pareto_front(points: &[Vec<f64>], orientations: &[Orientation]) -> Vec<usize> {
    let oriented = |p: &[f64], c: usize| match orientations[c] {
        Orientation::HigherIsBetter => p[c],
        Orientation::LowerIsBetter => -p[c],
    };
    let dominates = |a: &[f64], b: &[f64]| {
        let mut strict = false;
        for c in 0..orientations.len() {
            let (x, y) = (oriented(a, c), oriented(b, c));
            if x < y {
                return false;
            }
            strict |= x > y;
        }
        strict
    };
    (0..points.len())
        .filter(|&i| !(0..points.len()).any(|j| j != i && dominates(&points[j], &points[i])))
        .collect()
}

/// Writes `run_id,params_json,frechet,precision,recall,density,coverage,consistency`.
pub fn write_metrics_csv<W: Write>(out: W, runs: &[SweepRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run_id", "params_json"];
    header.extend(MetricsReport::NAMES);
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![r.run_id.clone(), serde_json::to_string(&r.params)?];
        row.extend(MetricsReport::NAMES.iter().map(|n| format!("{:.6}", r.report.get(n).unwrap_or(f64::NAN))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows to a metrics CSV, writing the header only for a new or
/// empty file.
pub fn append_metrics_csv(path: &std::path::Path, runs: &[SweepRun]) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, runs)?;
    let body = if fresh {
        &buf[..]
    } else {
        let nl = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |i| i + 1);
        &buf[nl..]
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render;
    use Orientation::*;

    fn set(n: usize, d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[n, d], v).unwrap()
    }

    #[test]
    fn worked_one_dimensional_example() {
        let m = knn_manifold_metrics(&set(2, 1, &[0.0, 1.0]), &set(2, 1, &[0.1, 0.4]), 1).unwrap();
        assert_eq!((m.density, m.coverage, m.precision, m.recall), (2.0, 1.0, 1.0, 0.5));
    }

    #[test]
    fn self_and_disjoint_sets() {
        let x = set(6, 2, &[0.0, 0.0, 1.0, 0.5, 2.0, 1.0, -1.0, 3.0, 0.2, 0.2, 4.0, -2.0]);
        let m = knn_manifold_metrics(&x, &x, 2).unwrap();
        assert_eq!((m.precision, m.coverage), (1.0, 1.0));
        let far = x.map(|v| v + 1e6);
        let m = knn_manifold_metrics(&x, &far, 2).unwrap();
        assert_eq!((m.precision, m.recall, m.density, m.coverage), (0.0, 0.0, 0.0, 0.0));
        assert!(knn_manifold_metrics(&x, &x, 6).is_err());
        assert!(knn_manifold_metrics(&x, &set(2, 2, &[0.0; 4]), 2).is_err());
    }

    #[test]
    fn frechet_examples() {
        // Moment-matched 1-D sets: (mean 0, var 1) and (mean 1, var 4).
        let a = set(2, 1, &[-(0.5f64).sqrt(), (0.5f64).sqrt()]);
        let b = set(2, 1, &[1.0 - 2.0 * (0.5f64).sqrt(), 1.0 + 2.0 * (0.5f64).sqrt()]);
        assert!((frechet_gaussian(&a, &b).unwrap() - 2.0).abs() < 1e-6);
        assert!(frechet_gaussian(&a, &a).unwrap().abs() < 1e-6);
        let x = set(4, 2, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.5, 3.0, 2.0]);
        let shifted = set(4, 2, &[0.3, 1.4, 2.3, -0.6, 0.8, 0.9, 3.3, 2.4]);
        assert!((frechet_gaussian(&x, &shifted).unwrap() - 0.25).abs() < 1e-6);
        assert!(frechet_gaussian(&set(1, 1, &[0.0]), &a).is_err());
    }

    #[test]
    fn consistency_examples() {
        let spec = DatasetSpec::default();
        let s = spec.image_side;
        let img = |m: usize| render(s, spec.modes[m].center, spec.modes[m].radius, spec.modes[m].intensity);
        let mut data = Vec::new();
        for m in [0, 1, 2, 3] {
            data.extend(img(m));
        }
        let x = Tensor::<f32>::new(vec![4, s * s], data).unwrap();
        assert_eq!(consistency(&x, &[0, 1, 2, 3], &spec).unwrap(), 1.0);
        assert_eq!(consistency(&x, &[1, 2, 3, 0], &spec).unwrap(), 0.0);
        assert_eq!(consistency(&x, &[0, 1, 0, 0], &spec).unwrap(), 0.5);
        assert!(consistency(&x, &[0, 1, 2, 99], &spec).is_err());
    }

    #[test]
    fn rank_examples() {
        let o = [HigherIsBetter, LowerIsBetter];
        assert_eq!(rank_table(&[vec![0.9, 10.0], vec![0.8, 5.0]], &o).unwrap(), vec![1.5, 1.5]);
        assert_eq!(rank_table(&[vec![0.9, 1.0], vec![0.8, 5.0], vec![0.1, 9.0]], &o).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_table(&vec![vec![1.0, 1.0]; 4], &o).unwrap(), vec![2.5; 4]);
        assert!(rank_table(&[vec![1.0]], &o).is_err());
    }

    #[test]
    fn pareto_examples() {
        let o = [HigherIsBetter, HigherIsBetter];
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![0.2, 0.2]];
        assert_eq!(pareto_front(&pts, &o), vec![0, 1, 2]);
        assert_eq!(pareto_front(&pts[..1], &o), vec![0]);
        assert_eq!(pareto_front(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]], &o), vec![0, 1]);
        assert_eq!(pareto_front(&[vec![1.0, 5.0], vec![1.0, 3.0]], &[HigherIsBetter, LowerIsBetter]), vec![1]);
    }

    #[test]
    fn csv_layout() {
        let run = SweepRun {
            run_id: "cfg_w3".into(),
            params: serde_json::json!({"method": "cfg", "w": 3.0}),
            report: MetricsReport {
                frechet: 1.5,
                precision: 0.25,
                recall: 1.0 / 3.0,
                density: 1.2,
                coverage: 0.5,
                consistency: 1.0,
            },
            orientations: default_orientations(),
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[run.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "run_id,params_json,frechet,precision,recall,density,coverage,consistency");
        assert_eq!(
            lines.next().unwrap(),
            r#"cfg_w3,"{""method"":""cfg"",""w"":3.0}",1.500000,0.250000,0.333333,1.200000,0.500000,1.000000"#
        );
        assert_eq!(rank_score(&[run]).unwrap(), vec![1.0]);
    }
}
