//! The learnable diffeomorphism: a neural ODE integrated with fixed-step
//! RK4, preceded by a translation to the data mean.
//!
//! `phi(x) = Flow_1(x - mu)` maps data to latent coordinates, where the
//! first `d_prime` coordinates carry the data submanifold and the rest
//! should stay near zero. The latent chart is the identity on `R^d_prime`.
//! The inverse integrates the same field backwards over the mirrored time
//! grid, which inverts the forward map up to RK4 discretisation error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mlp::ForwardTrace;
use crate::numerics::{Backend, Eager, MlpParams, MlpShape, MlpVars, Rng, Tensor, TimeInput};
use crate::persist;

pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `t: 0 -> 1`.
    Forward,
    /// `t: 1 -> 0`.
    Backward,
}

/// Chart on the latent submanifold. Only the Euclidean chart exists today;
/// the tag is serialised so other charts can be added without a format
/// change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoModel {
    pub field: MlpParams,
    /// Training-data mean, `1 x d`. Frozen at creation.
    pub mu: Tensor,
    pub d: usize,
    pub d_prime: usize,
    pub n_steps: usize,
    pub chart: Chart,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Rows are points in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Tensor);

impl Latent {
    pub fn coords(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }
}

/// Hidden layout of the vector field network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl DiffeoModel {
    /// New model with `mu` set to the mean of `data` and a field whose output
    /// layer is zero, so `phi` starts as the translation `x - mu`.
    pub fn new(
        data: &Tensor,
        d_prime: usize,
        n_steps: usize,
        shape: FieldShape,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = data.cols();
        let mlp = MlpShape {
            input: d,
            hidden: shape.hidden,
            hidden_layers: shape.hidden_layers,
            output: d,
            time_conditioned: true,
        };
        let model = Self {
            field: MlpParams::init(mlp, rng, true),
            mu: data.column_mean(),
            d,
            d_prime,
            n_steps,
            chart: Chart::Euclidean,
            config_hash: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_prime < 1 || self.d_prime > self.d {
            return Err(Error::Domain(format!(
                "d_prime must be in 1..={}, got {}",
                self.d, self.d_prime
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        if self.mu.cols() != self.d || !self.mu.is_finite() {
            return Err(Error::shape("diffeo", "mu must be a finite 1 x d row"));
        }
        self.field.validate()?;
        if self.field.input_dim() != self.d || self.field.output_dim() != self.d {
            return Err(Error::shape("diffeo", "field must map R^d to R^d"));
        }
        Ok(())
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        let mut m = self.clone();
        m.n_steps = n_steps;
        m
    }

    fn check_width(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.cols() != self.d {
            return Err(Error::shape(op, format!("expected {} columns, got {}", self.d, x.cols())));
        }
        Ok(())
    }

    /// Data to latent coordinates.
    pub fn phi(&self, x: &Tensor) -> Result<Latent> {
        self.check_width(x, "phi")?;
        let centred = Tensor::from_rows(
            x.rows(),
            x.cols(),
            x.data()
                .chunks(self.d)
                .flat_map(|r| r.iter().zip(self.mu.data()).map(|(a, m)| a - m))
                .collect(),
        )?;
        let z = ode_solve(&self.field, &centred, Direction::Forward, self.n_steps)?;
        Ok(Latent(z))
    }

    /// Latent to data coordinates.
    pub fn phi_inverse(&self, z: &Latent) -> Result<Tensor> {
        self.check_width(&z.0, "phi_inverse")?;
        let mut x = ode_solve(&self.field, &z.0, Direction::Backward, self.n_steps)?;
        let d = self.d;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += self.mu.data()[i % d];
        }
        Ok(x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, &persist::Envelope::new("diffeo", self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = persist::read_json::<persist::Envelope<Self>>(&path)?.into_payload("diffeo", &path)?;
        m.validate()?;
        Ok(m)
    }
}

/// Keep the first `d_prime` coordinates and zero the rest.
pub fn project_submanifold(z: &Latent, d_prime: usize) -> Latent {
    let mut out = z.0.clone();
    let c = out.cols();
    for r in 0..out.rows() {
        for v in &mut out.row_mut(r)[d_prime.min(c)..] {
            *v = 0.0;
        }
    }
    Latent(out)
}

/// Classical RK4 over `[0, 1]` with `n_steps` equal steps, written against a
/// backend. `visit(k, t_k, z_k, trace)` sees the state at the start of each
/// step together with the field's forward trace at that state, which is the
/// first RK stage.
pub fn integrate<B, F>(
    be: &B,
    field: &MlpVars<B>,
    z0: B::V,
    direction: Direction,
    n_steps: usize,
    mut visit: F,
) -> B::V
where
    B: Backend,
    F: FnMut(usize, f64, &B::V, &ForwardTrace<B::V>),
{
    let h_abs = 1.0 / n_steps as f64;
    let (h, t0) = match direction {
        Direction::Forward => (h_abs, 0.0),
        Direction::Backward => (-h_abs, 1.0),
    };
    let mut z = z0;
    for k in 0..n_steps {
        let t = t0 + h * k as f64;
        let (k1, trace) = field.forward(be, &z, TimeInput::Shared(t));
        visit(k, t, &z, &trace);
        let z2 = be.add(&z, &be.scale(&k1, 0.5 * h));
        let (k2, _) = field.forward(be, &z2, TimeInput::Shared(t + 0.5 * h));
        let z3 = be.add(&z, &be.scale(&k2, 0.5 * h));
        let (k3, _) = field.forward(be, &z3, TimeInput::Shared(t + 0.5 * h));
        let z4 = be.add(&z, &be.scale(&k3, h));
        let (k4, _) = field.forward(be, &z4, TimeInput::Shared(t + h));
        let mid = be.add(&k2, &k3);
        let acc = be.add(&be.add(&k1, &k4), &be.scale(&mid, 2.0));
        z = be.add(&z, &be.scale(&acc, h / 6.0));
    }
    z
}

/// Eager RK4 solve of `dz/dt = f(z, t)` for every row of `z0`.
pub fn ode_solve(
    field: &MlpParams,
    z0: &Tensor,
    direction: Direction,
    n_steps: usize,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be at least 1".into()));
    }
    if z0.cols() != field.input_dim() {
        return Err(Error::shape(
            "ode_solve",
            format!("state has {} columns, field expects {}", z0.cols(), field.input_dim()),
        ));
    }
    let be = Eager;
    let vars = MlpVars::bind(&be, field);
    let mut bad_step = None;
    let z = integrate(
        &be,
        &vars,
        be.constant(z0.clone()),
        direction,
        n_steps,
        |k, _, z, _| {
            if bad_step.is_none() && !z.is_finite() {
                bad_step = Some(k);
            }
        },
    );
    if let Some(k) = bad_step {
        return Err(Error::Numeric(format!("non-finite ODE state at step {k}")));
    }
    if !z.is_finite() {
        return Err(Error::Numeric(format!("non-finite ODE state at step {n_steps}")));
    }
    Ok((*z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Layer};

    /// `f(z, t) = a*z + c` as a one-layer net without time input.
    fn affine_field(a: f64, c: f64) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                weight: Tensor::from_rows(1, 1, vec![a]).unwrap(),
                bias: Tensor::row_vector(vec![c]),
            }],
            activation: Activation::Identity,
            time_conditioned: false,
        }
    }

    fn small_model(seed: u64, d: usize, scale: f64, n_steps: usize) -> DiffeoModel {
        let mut rng = Rng::new(seed);
        let data = rng.normal_tensor(10, d);
        let mut m = DiffeoModel::new(
            &data,
            1,
            n_steps,
            FieldShape {
                hidden: 16,
                hidden_layers: 2,
            },
            &mut rng,
        )
        .unwrap();
        // Give the zero-initialised output layer some bounded weights.
        let last = m.field.layers.last_mut().unwrap();
        for v in last.weight.data_mut() {
            *v = scale * rng.uniform_range(-1.0, 1.0);
        }
        m
    }

    #[test]
    fn zero_field_is_identity() {
        let f = affine_field(0.0, 0.0);
        let z0 = Tensor::from_rows(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(ode_solve(&f, &z0, Direction::Forward, 7).unwrap(), z0);
        assert_eq!(ode_solve(&f, &z0, Direction::Backward, 7).unwrap(), z0);
    }

    #[test]
    fn exponential_growth() {
        let f = affine_field(1.0, 0.0);
        let z = ode_solve(&f, &Tensor::scalar(1.0), Direction::Forward, 10).unwrap();
        assert!((z.as_scalar() - std::f64::consts::E).abs() < 1e-5);
        // Closed form of one RK4 step for z' = z: 1 + h + h^2/2 + h^3/6 + h^4/24.
        let h: f64 = 0.1;
        let step = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((z.as_scalar() - step.powi(10)).abs() < 1e-13);
    }

    #[test]
    fn constant_field_round_trips() {
        let f = affine_field(0.0, 2.5);
        let z0 = Tensor::scalar(-0.75);
        let z1 = ode_solve(&f, &z0, Direction::Forward, 4).unwrap();
        assert!((z1.as_scalar() - 1.75).abs() < 1e-15);
        let back = ode_solve(&f, &z1, Direction::Backward, 4).unwrap();
        assert!((back.as_scalar() - z0.as_scalar()).abs() < 1e-15);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let f = affine_field(1.0, 0.0);
        let err = |n| {
            (ode_solve(&f, &Tensor::scalar(1.0), Direction::Forward, n).unwrap().as_scalar()
                - std::f64::consts::E)
                .abs()
        };
        let ratio = err(10) / err(20);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn translation_only_when_field_is_zero() {
        let mut rng = Rng::new(0);
        let data = Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = DiffeoModel::new(
            &data,
            1,
            10,
            FieldShape {
                hidden: 4,
                hidden_layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_rows(1, 2, vec![5.0, -1.0]).unwrap();
        let z = m.phi(&x).unwrap();
        assert_eq!(z.0.data(), &[3.0, -4.0]);
        assert_eq!(m.phi_inverse(&z).unwrap(), x);
    }

    #[test]
    fn round_trip_on_random_nets() {
        for seed in 0..3 {
            let m = small_model(seed, 3, 0.3, 100);
            let mut rng = Rng::new(100 + seed);
            let x = Tensor::from_rows(
                100,
                3,
                (0..300).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
            )
            .unwrap();
            let back = m.phi_inverse(&m.phi(&x).unwrap()).unwrap();
            let err = back.zip_map(&x, |a, b| a - b).max_abs();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn round_trip_error_shrinks_with_order_four() {
        let m = small_model(4, 2, 1.5, 8);
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(20, 2);
        let err = |n: usize| {
            let mm = m.with_steps(n);
            mm.phi_inverse(&mm.phi(&x).unwrap())
                .unwrap()
                .zip_map(&x, |a, b| a - b)
                .max_abs()
        };
        let ratio = err(8) / err(16);
        assert!(ratio > 10.0, "ratio {ratio}");
    }

    #[test]
    fn projection() {
        let z = Latent(Tensor::from_rows(1, 3, vec![2.0, 5.0, 7.0]).unwrap());
        assert_eq!(project_submanifold(&z, 1).0.data(), &[2.0, 0.0, 0.0]);
        assert_eq!(project_submanifold(&z, 3), z);
        let p = project_submanifold(&z, 2);
        assert_eq!(project_submanifold(&p, 2), p);
    }

    #[test]
    fn injective_on_distinct_points() {
        let m = small_model(8, 2, 0.5, 10);
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(50, 2);
        let z = m.phi(&x).unwrap().0;
        for i in 0..50 {
            for j in (i + 1)..50 {
                assert_ne!(z.row(i), z.row(j));
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let m = small_model(0, 2, 0.1, 5);
        assert!(m.phi(&Tensor::zeros(1, 3)).is_err());
        let mut bad = m.clone();
        bad.d_prime = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let m = small_model(3, 2, 0.7, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = DiffeoModel::load(&path).unwrap();
        assert_eq!(back, m);
    }
}
