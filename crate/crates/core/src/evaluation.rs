//! Evaluation: interpolation error against graph geodesics, 1-NN two-sample
//! accuracy, Kolmogorov-Smirnov tests and analogue generation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{SequenceCodec, SequenceDataset};
use crate::error::{Error, Result};
use crate::geometry::{geodesic_at, Space};
use crate::manifold_metrics::{PropertyEvaluator, ShortestPaths};
use crate::node_diffeo::{DiffeoModel, Latent};
use crate::numerics::tensor::{euclidean, squared_distance};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRmse {
    pub i: usize,
    pub j: usize,
    pub graph_distance: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub method: Space,
    pub pairs: Vec<PairRmse>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// The `n_pairs` pairs of `candidates` with the largest graph distance,
/// longest first; ties by index order.
pub fn longest_pairs(paths: &ShortestPaths, candidates: &[usize], n_pairs: usize) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (a, &i) in candidates.iter().enumerate() {
        for &j in &candidates[a + 1..] {
            all.push((paths.distances.get(i, j), i, j));
        }
    }
    if all.len() < n_pairs {
        log::warn!("only {} candidate pairs, fewer than the requested {n_pairs}", all.len());
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    all.into_iter().take(n_pairs).map(|(_, i, j)| (i, j)).collect()
}

/// Cumulative arc-length fractions of a polyline through `vertices`.
pub fn arc_fractions(points: &Tensor, vertices: &[usize]) -> Vec<f64> {
    let mut cum = vec![0.0];
    for w in vertices.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + euclidean(points.row(w[0]), points.row(w[1])));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return cum;
    }
    cum.into_iter().map(|c| c / total).collect()
}

/// Interpolation error of `method` against the graph geodesics between the
/// `n_pairs` most distant pairs among `candidates`.
///
/// For each pair the candidate curve is evaluated at the arc-length
/// fractions of the graph path's interior vertices; the pair's error is the
/// root mean squared per-coordinate deviation from those vertices. Pairs
/// whose path has no interior vertex are skipped.
pub fn interpolation_rmse(
    model: Option<&DiffeoModel>,
    points: &Tensor,
    paths: &ShortestPaths,
    candidates: &[usize],
    method: Space,
    n_pairs: usize,
) -> Result<InterpolationReport> {
    if method != Space::Data && model.is_none() {
        return Err(Error::Input("latent interpolation needs a diffeomorphism".into()));
    }
    if paths.distances.n() != points.rows() {
        return Err(Error::shape("interpolation_rmse", "paths and points disagree in size"));
    }
    let d = points.cols() as f64;
    let mut pairs = Vec::new();
    for (i, j) in longest_pairs(paths, candidates, n_pairs) {
        let verts = paths.path(i, j);
        if verts.len() < 3 {
            continue;
        }
        let fr = arc_fractions(points, &verts);
        let interior = &fr[1..fr.len() - 1];
        let curve = match (method, model) {
            (Space::Data, _) | (_, None) => {
                let (a, b) = (points.row(i), points.row(j));
                let mut c = Tensor::zeros(interior.len(), points.cols());
                for (r, &s) in interior.iter().enumerate() {
                    for (k, v) in c.row_mut(r).iter_mut().enumerate() {
                        *v = (1.0 - s) * a[k] + s * b[k];
                    }
                }
                c
            }
            (_, Some(m)) => geodesic_at(m, points.row(i), points.row(j), interior, method)?,
        };
        let sq: f64 = verts[1..verts.len() - 1]
            .iter()
            .enumerate()
            .map(|(r, &v)| squared_distance(curve.row(r), points.row(v)))
            .sum();
        let rmse = (sq / (interior.len() as f64 * d)).sqrt();
        pairs.push(PairRmse {
            i,
            j,
            graph_distance: paths.distances.get(i, j),
            rmse,
        });
    }
    let (mean, std) = mean_std(&pairs.iter().map(|p| p.rmse).collect::<Vec<_>>());
    Ok(InterpolationReport { method, pairs, mean, std })
}

/// Leave-one-out 1-NN accuracy of telling `generated` from `reference` rows.
/// The union is indexed with generated rows first; each point takes the
/// label of its nearest other point, ties going to the lower index.
pub fn one_nn_accuracy(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    if generated.rows() == 0 || reference.rows() == 0 {
        return Err(Error::Input("both samples must be nonempty".into()));
    }
    if generated.cols() != reference.cols() {
        return Err(Error::shape("one_nn_accuracy", "samples differ in dimension"));
    }
    let all = Tensor::vstack(&[generated, reference])?;
    let n = all.rows();
    let ng = generated.rows();
    let correct: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dist = squared_distance(all.row(i), all.row(j));
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            usize::from((best.1 < ng) == (i < ng))
        })
        .sum();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form, fast for small arguments.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|k| (-((2 * k - 1) as f64).powi(2) * c).exp()).sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value at
/// effective size `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("both samples must be nonempty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("samples must be finite".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (na, nb) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut stat: f64 = 0.0;
    while i < na && j < nb {
        let v = x[i].min(y[j]);
        while i < na && x[i] == v {
            i += 1;
        }
        while j < nb && y[j] == v {
            j += 1;
        }
        stat = stat.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult {
        statistic: stat,
        p_value: kolmogorov_sf(ne.sqrt() * stat),
    })
}

/// Per-coordinate standard deviation of the encoded training points.
pub fn latent_std(diffeo: &DiffeoModel, train: &Tensor) -> Result<Vec<f64>> {
    Ok(diffeo.phi(train)?.0.column_std().data().to_vec())
}

/// `phi^-1(phi(x) + tau * sigma * eps)` with `eps ~ N(0, I)`, one analogue
/// per base row. Row `i` uses draw stream `i` of `seed`.
pub fn analogue_generate(diffeo: &DiffeoModel, base: &Tensor, sigma: &[f64], tau: f64, seed: u64) -> Result<Tensor> {
    if sigma.len() != diffeo.d {
        return Err(Error::shape("analogue_generate", "sigma must have one entry per latent coordinate"));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::Domain(format!("tau must be >= 0, got {tau}")));
    }
    let mut z = diffeo.phi(base)?.into_inner();
    for r in 0..z.rows() {
        let mut rng = Rng::draw_stream(seed, r as u64);
        for (v, s) in z.row_mut(r).iter_mut().zip(sigma) {
            *v += tau * s * rng.normal();
        }
    }
    diffeo.phi_inverse(&Latent(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyKs {
    pub property: String,
    /// `None` when there are no novel sequences to test.
    pub result: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogueReport {
    pub tau: f64,
    /// Distinct generated sequences.
    pub total: usize,
    pub in_data: usize,
    pub novel: usize,
    pub ks: Vec<PropertyKs>,
    /// Tests with `p >= 0.05`.
    pub non_significant: usize,
    pub tested: usize,
}

/// Novelty counts and per-property KS tests of novel analogues against the
/// base sequences they came from. `generated[i]` must come from `base[i]`.
/// Properties are sequence length plus each evaluator.
pub fn analogue_report(
    tau: f64,
    base: &[String],
    generated: &[String],
    dataset: &[String],
    evaluators: &[PropertyEvaluator],
    alpha: f64,
) -> Result<AnalogueReport> {
    if base.len() != generated.len() {
        return Err(Error::Input("one generated sequence per base sequence expected".into()));
    }
    let known: HashSet<&str> = dataset.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut in_data = 0;
    let mut novel_pairs: Vec<(&str, &str)> = Vec::new();
    for (b, g) in base.iter().zip(generated) {
        if !seen.insert(g.as_str()) {
            continue;
        }
        if known.contains(g.as_str()) {
            in_data += 1;
        } else {
            novel_pairs.push((g, b));
        }
    }
    let mut ks = Vec::with_capacity(evaluators.len() + 1);
    let length = |s: &str| Ok(s.chars().count() as f64);
    let mut add = |name: String, f: &dyn Fn(&str) -> Result<f64>| -> Result<()> {
        let result = if novel_pairs.is_empty() {
            None
        } else {
            let g: Vec<f64> = novel_pairs.iter().map(|(g, _)| f(g)).collect::<Result<_>>()?;
            let b: Vec<f64> = novel_pairs.iter().map(|(_, b)| f(b)).collect::<Result<_>>()?;
            Some(ks_two_sample(&g, &b)?)
        };
        ks.push(PropertyKs { property: name, result });
        Ok(())
    };
    add("length".into(), &length)?;
    for ev in evaluators {
        add(ev.kind.name().into(), &|s| ev.evaluate(s))?;
    }
    let tested = ks.iter().filter(|k| k.result.is_some()).count();
    let non_significant = ks
        .iter()
        .filter(|k| k.result.is_some_and(|r| r.p_value >= alpha))
        .count();
    Ok(AnalogueReport {
        tau,
        total: seen.len(),
        in_data,
        novel: novel_pairs.len(),
        ks,
        non_significant,
        tested,
    })
}

/// Generate analogues of `base` sequences and decode them with `codec`.
pub fn analogue_sequences(
    diffeo: &DiffeoModel,
    codec: &SequenceCodec,
    base: &[String],
    sigma: &[f64],
    tau: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    let ds = SequenceDataset::from_sequences(base.to_vec());
    let x = codec.encode_all(&ds)?.data;
    let out = analogue_generate(diffeo, &x, sigma, tau, seed)?;
    codec.decode_all(&out)
}
