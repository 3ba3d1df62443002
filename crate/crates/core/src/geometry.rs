//! Pullback geometry on `R^d` through a [`DiffeoModel`] with a Euclidean
//! latent space: distances are latent norms and geodesics are preimages of
//! latent straight lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::node_diffeo::{project_submanifold, DiffeoModel, Latent};
use crate::numerics::Tensor;
use crate::persist;

/// Where an interpolant or flow lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Ambient coordinates; the geodesic is the straight segment.
    Data,
    /// Full latent space `R^d`.
    Latent,
    /// Latent submanifold `R^d' x 0`.
    Submanifold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSpec {
    pub x_i: Vec<f64>,
    pub x_j: Vec<f64>,
    pub space: Space,
    pub n_samples: usize,
}

impl GeodesicSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Domain("a geodesic needs at least 2 samples".into()));
        }
        if self.x_i.len() != self.x_j.len() {
            return Err(Error::shape("geodesic", "endpoints differ in length"));
        }
        Ok(())
    }

    /// Uniform evaluation times `0, 1/(n-1), ..., 1`.
    pub fn times(&self) -> Vec<f64> {
        let m = (self.n_samples - 1) as f64;
        (0..self.n_samples).map(|k| k as f64 / m).collect()
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

fn pair(model: &DiffeoModel, x_i: &[f64], x_j: &[f64]) -> Result<Tensor> {
    if x_i.len() != model.d || x_j.len() != model.d {
        return Err(Error::shape(
            "geometry",
            format!("points must have length {}", model.d),
        ));
    }
    let mut data = x_i.to_vec();
    data.extend_from_slice(x_j);
    Tensor::from_rows(2, model.d, data)
}

/// Encode both endpoints, projecting for the submanifold.
fn encode_pair(model: &DiffeoModel, x_i: &[f64], x_j: &[f64], space: Space) -> Result<Latent> {
    let z = model.phi(&pair(model, x_i, x_j)?)?;
    Ok(match space {
        Space::Submanifold => project_submanifold(&z, model.d_prime),
        _ => z,
    })
}

/// `||phi(x_i) - phi(x_j)||`.
pub fn pullback_distance(model: &DiffeoModel, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    let z = model.phi(&pair(model, x_i, x_j)?)?;
    Ok(crate::numerics::tensor::euclidean(z.0.row(0), z.0.row(1)))
}

/// All pairwise pullback distances between the rows of `x`.
pub fn pullback_distances(model: &DiffeoModel, x: &Tensor) -> Result<Tensor> {
    let z = model.phi(x)?.0;
    let n = z.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = crate::numerics::tensor::euclidean(z.row(i), z.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

fn blend(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect()
}

/// `gamma(t) = phi^-1((1 - t) phi(x_i) + t phi(x_j))`.
pub fn pullback_geodesic(
    model: &DiffeoModel,
    x_i: &[f64],
    x_j: &[f64],
    t: f64,
    space: Space,
) -> Result<Vec<f64>> {
    check_t(t)?;
    Ok(geodesic_at(model, x_i, x_j, &[t], space)?.row(0).to_vec())
}

/// The geodesic evaluated at each entry of `ts`, one row per time.
pub fn geodesic_at(
    model: &DiffeoModel,
    x_i: &[f64],
    x_j: &[f64],
    ts: &[f64],
    space: Space,
) -> Result<Tensor> {
    for &t in ts {
        check_t(t)?;
    }
    let d = model.d;
    if space == Space::Data {
        pair(model, x_i, x_j)?;
        let data = ts.iter().flat_map(|&t| blend(x_i, x_j, t)).collect();
        return Tensor::from_rows(ts.len(), d, data);
    }
    let z = encode_pair(model, x_i, x_j, space)?.0;
    let data = ts.iter().flat_map(|&t| blend(z.row(0), z.row(1), t)).collect();
    model.phi_inverse(&Latent(Tensor::from_rows(ts.len(), d, data)?))
}

pub fn geodesic_curve(model: &DiffeoModel, spec: &GeodesicSpec) -> Result<Tensor> {
    spec.validate()?;
    geodesic_at(model, &spec.x_i, &spec.x_j, &spec.times(), spec.space)
}

/// Velocity of the latent interpolant, in latent coordinates. Constant in `t`
/// because the latent geodesic is a straight line.
pub fn geodesic_velocity(
    model: &DiffeoModel,
    x_i: &[f64],
    x_j: &[f64],
    t: f64,
    space: Space,
) -> Result<Vec<f64>> {
    check_t(t)?;
    if space == Space::Data {
        pair(model, x_i, x_j)?;
        return Ok(x_j.iter().zip(x_i).map(|(b, a)| b - a).collect());
    }
    let z = encode_pair(model, x_i, x_j, space)?.0;
    Ok(z.row(1).iter().zip(z.row(0)).map(|(b, a)| b - a).collect())
}

/// CSV with columns `t, x_1..x_d`.
pub fn write_geodesic_csv(path: impl AsRef<Path>, ts: &[f64], curve: &Tensor) -> Result<()> {
    if ts.len() != curve.rows() {
        return Err(Error::shape("geodesic_csv", "one time per curve row"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=curve.cols()).map(|k| format!("x_{k}")));
    let csv_err = |e: csv::Error| Error::format(path.as_ref(), e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (r, t) in ts.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(curve.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path.as_ref(), e.to_string()))?;
    persist::write_atomic(path, &bytes)
}
