//! Simulation-free flow matching in three operating spaces:
//!
//! * `Cfm`: OT conditional flow matching in ambient coordinates;
//! * `Pfm`: the same objective on latent coordinates `phi(x)`, with straight
//!   latent geodesics as conditional paths;
//! * `DprimePfm`: as `Pfm` restricted to the first `d_prime` latent
//!   coordinates, so the field only has `d_prime` inputs and outputs.
//!
//! The diffeomorphism is frozen; data are encoded once before training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Space;
use crate::node_diffeo::{project_submanifold, DiffeoModel, Latent};
use crate::numerics::{
    grad, AdamState, Backend, CosineSchedule, Eager, MlpParams, MlpShape, MlpVars, Rng, Tensor, TimeInput,
};
use crate::persist;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Cfm,
    Pfm,
    DprimePfm,
}

impl FlowMode {
    pub fn space(self) -> Space {
        match self {
            FlowMode::Cfm => Space::Data,
            FlowMode::Pfm => Space::Latent,
            FlowMode::DprimePfm => Space::Submanifold,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowMode::Cfm => "cfm",
            FlowMode::Pfm => "pfm",
            FlowMode::DprimePfm => "dprime_pfm",
        }
    }
}

/// Interpolation scheduler with `kappa(0) = 1`, `kappa(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    Linear,
}

impl Kappa {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Kappa::Linear => 1.0 - t,
        }
    }

    pub fn derivative(self, _t: f64) -> f64 {
        match self {
            Kappa::Linear => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub vt_params: MlpParams,
    pub space: Space,
    pub dim: usize,
    pub sigma_min: f64,
    pub kappa: Kappa,
    pub n_simulation_steps: usize,
    /// Fingerprint of the diffeomorphism used for encoding, if any.
    #[serde(default)]
    pub diffeo_hash: Option<String>,
}

impl FlowModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Domain(format!("sigma_min must lie in (0, 1), got {}", self.sigma_min)));
        }
        if self.n_simulation_steps < 1 {
            return Err(Error::Domain("n_simulation_steps must be at least 1".into()));
        }
        self.vt_params.validate()?;
        if self.vt_params.input_dim() != self.dim || self.vt_params.output_dim() != self.dim {
            return Err(Error::shape("flow", "field must map R^dim to R^dim"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.vt_params.parameter_count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, &persist::Envelope::new("flow", self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = persist::read_json::<persist::Envelope<Self>>(&path)?.into_payload("flow", &path)?;
        m.validate()?;
        Ok(m)
    }

    fn check_diffeo<'a>(&self, diffeo: Option<&'a DiffeoModel>) -> Result<Option<&'a DiffeoModel>> {
        if self.space == Space::Data {
            return Ok(None);
        }
        let m = diffeo.ok_or_else(|| Error::Input("a latent flow needs its diffeomorphism".into()))?;
        if let Some(h) = &self.diffeo_hash {
            let got = diffeo_fingerprint(m);
            if &got != h {
                return Err(Error::Input(format!(
                    "diffeomorphism fingerprint {got} does not match the flow's {h}"
                )));
            }
        }
        let need = if self.space == Space::Submanifold { m.d_prime } else { m.d };
        if need != self.dim {
            return Err(Error::shape("flow", format!("flow dim {} vs diffeo operating dim {need}", self.dim)));
        }
        Ok(Some(m))
    }
}

/// SHA-256 of the canonical JSON form of a diffeomorphism.
pub fn diffeo_fingerprint(m: &DiffeoModel) -> String {
    persist::sha256_hex(&serde_json::to_vec(m).expect("model serialises"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub n_simulation_steps: usize,
    pub seed: u64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub split: f64,
    pub sigma_min: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            learning_rate: 5e-4,
            min_learning_rate: 5e-6,
            batch_size: 64,
            n_simulation_steps: 10,
            seed: 0,
            hidden: 64,
            hidden_layers: 10,
            split: 0.8,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.n_simulation_steps < 1 {
            return bad("n_simulation_steps", "must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || self.min_learning_rate > self.learning_rate {
            return bad("learning_rate", "need 0 <= min_learning_rate <= learning_rate, learning_rate > 0");
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split", "must lie strictly between 0 and 1");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return bad("sigma_min", "must lie in (0, 1)");
        }
        if self.hidden < 1 || self.hidden_layers < 1 {
            return bad("hidden", "need at least one hidden layer of width >= 1");
        }
        Ok(())
    }
}

/// OT-CFM conditional path and target velocity at time `t` for paired rows
/// of `x0`, `x1`.
pub fn cfm_target(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    if x0.rows() != x1.rows() || x0.cols() != x1.cols() {
        return Err(Error::shape("cfm_target", "x0 and x1 differ in shape"));
    }
    let s = 1.0 - (1.0 - sigma_min) * t;
    if !(0.0..=1.0).contains(&t) || s <= 0.0 {
        return Err(Error::Domain(format!("t = {t} is outside the path's domain for sigma_min = {sigma_min}")));
    }
    let xt = x0.zip_map(x1, |a, b| s * a + t * b);
    // The field (x1 - (1 - sigma_min) x) / s evaluated at xt.
    let ut = xt.zip_map(x1, |x, b| (b - (1.0 - sigma_min) * x) / s);
    Ok((xt, ut))
}

/// Latent conditional path `kappa(t) z0 + (1 - kappa(t)) z1` and its
/// velocity, with both endpoints encoded by `phi` (and projected for the
/// submanifold).
pub fn pfm_target(
    diffeo: &DiffeoModel,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    space: Space,
    kappa: Kappa,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t must lie in [0, 1], got {t}")));
    }
    if x0.rows() != x1.rows() {
        return Err(Error::shape("pfm_target", "x0 and x1 differ in row count"));
    }
    let z0 = encode(diffeo, x0, space)?;
    let z1 = encode(diffeo, x1, space)?;
    Ok(latent_target(&z0, &z1, t, kappa))
}

fn latent_target(z0: &Tensor, z1: &Tensor, t: f64, kappa: Kappa) -> (Tensor, Tensor) {
    let k = kappa.value(t);
    let dk = kappa.derivative(t);
    (z0.zip_map(z1, |a, b| k * a + (1.0 - k) * b), z0.zip_map(z1, |a, b| dk * (a - b)))
}

/// Operating-space coordinates of data rows: identity for `Data`, `phi` for
/// `Latent`, the first `d_prime` latent coordinates for `Submanifold`.
pub fn encode(diffeo: &DiffeoModel, x: &Tensor, space: Space) -> Result<Tensor> {
    match space {
        Space::Data => Ok(x.clone()),
        Space::Latent => Ok(diffeo.phi(x)?.into_inner()),
        Space::Submanifold => {
            let z = project_submanifold(&diffeo.phi(x)?, diffeo.d_prime).into_inner();
            let idx: Vec<usize> = (0..diffeo.d_prime).collect();
            Ok(select_cols(&z, &idx))
        }
    }
}

/// Inverse of [`encode`]; submanifold coordinates are zero-padded first.
pub fn decode(diffeo: Option<&DiffeoModel>, z: &Tensor, space: Space) -> Result<Tensor> {
    match (space, diffeo) {
        (Space::Data, _) => Ok(z.clone()),
        (_, None) => Err(Error::Input("decoding latent points needs the diffeomorphism".into())),
        (Space::Latent, Some(m)) => m.phi_inverse(&Latent(z.clone())),
        (Space::Submanifold, Some(m)) => {
            let mut full = Tensor::zeros(z.rows(), m.d);
            for r in 0..z.rows() {
                full.row_mut(r)[..z.cols()].copy_from_slice(z.row(r));
            }
            m.phi_inverse(&Latent(full))
        }
    }
}

fn select_cols(z: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(z.rows(), idx.len());
    for r in 0..z.rows() {
        for (c, &k) in idx.iter().enumerate() {
            out.set(r, c, z.get(r, k));
        }
    }
    out
}

/// Per-row interpolants and targets for one minibatch.
fn conditional_batch(
    mode: FlowMode,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    sigma_min: f64,
    kappa: Kappa,
) -> (Tensor, Tensor) {
    let (b, d) = (x1.rows(), x1.cols());
    let mut xt = Tensor::zeros(b, d);
    let mut ut = Tensor::zeros(b, d);
    for r in 0..b {
        let tr = t[r];
        for c in 0..d {
            let (a, e) = (x0.get(r, c), x1.get(r, c));
            let (p, v) = match mode {
                FlowMode::Cfm => {
                    let s = 1.0 - (1.0 - sigma_min) * tr;
                    (s * a + tr * e, e - (1.0 - sigma_min) * a)
                }
                FlowMode::Pfm | FlowMode::DprimePfm => {
                    let k = kappa.value(tr);
                    (k * a + (1.0 - k) * e, kappa.derivative(tr) * (a - e))
                }
            };
            xt.set(r, c, p);
            ut.set(r, c, v);
        }
    }
    (xt, ut)
}

/// Mean over rows of `||v(xt, t) - ut||^2`.
fn matching_loss<B: Backend>(be: &B, vars: &MlpVars<B>, xt: &Tensor, ut: &Tensor, t: &[f64]) -> B::V {
    let (v, _) = vars.forward(be, &be.constant(xt.clone()), TimeInput::PerRow(t));
    let diff = be.sub(&v, &be.constant(ut.clone()));
    be.scale(&be.sum(&be.square(&diff)), 1.0 / xt.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEpoch {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub mode: FlowMode,
    pub history: Vec<FlowEpoch>,
    pub best_epoch: Option<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub parameter_count: usize,
}

impl FlowReport {
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "learning_rate", "train_loss", "test_loss"]).expect("in-memory write");
        for e in &self.history {
            w.write_record([
                e.epoch.to_string(),
                format!("{:?}", e.learning_rate),
                format!("{:?}", e.train_loss),
                format!("{:?}", e.test_loss),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// The field network used for a flow of operating dimension `dim`.
pub fn flow_field_shape(dim: usize, cfg: &FlowTrainConfig) -> MlpShape {
    MlpShape {
        input: dim,
        hidden: cfg.hidden,
        hidden_layers: cfg.hidden_layers,
        output: dim,
        time_conditioned: true,
    }
}

/// Train a flow on `data` (rows are samples). The split is drawn from
/// `cfg.seed`; training uses the first part, early stopping the rest with
/// base draws and times fixed for the whole run.
pub fn train_flow(
    data: &Tensor,
    cfg: &FlowTrainConfig,
    mode: FlowMode,
    diffeo: Option<&DiffeoModel>,
) -> Result<(FlowModel, FlowReport)> {
    cfg.validate()?;
    let space = mode.space();
    if space != Space::Data && diffeo.is_none() {
        return Err(Error::Input(format!("mode {} needs a trained diffeomorphism", mode.name())));
    }
    let (train_idx, test_idx) = crate::datasets::split(data.rows(), cfg.split, cfg.seed)?;
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Input("both splits must be nonempty".into()));
    }
    let encoded = match diffeo {
        Some(m) if space != Space::Data => encode(m, data, space)?,
        _ => data.clone(),
    };
    let dim = encoded.cols();
    let kappa = Kappa::Linear;
    let mut init = Rng::substream(cfg.seed, STREAM_INIT);
    let mut flow = FlowModel {
        vt_params: MlpParams::init(flow_field_shape(dim, cfg), &mut init, false),
        space,
        dim,
        sigma_min: cfg.sigma_min,
        kappa,
        n_simulation_steps: cfg.n_simulation_steps,
        diffeo_hash: diffeo.filter(|_| space != Space::Data).map(diffeo_fingerprint),
    };

    let x_train = encoded.select_rows(&train_idx);
    let x_test = encoded.select_rows(&test_idx);
    let mut eval_rng = Rng::substream(cfg.seed, STREAM_EVAL);
    let eval_x0 = eval_rng.normal_tensor(x_test.rows(), dim);
    let eval_t: Vec<f64> = (0..x_test.rows()).map(|_| eval_rng.uniform()).collect();
    let (eval_xt, eval_ut) = conditional_batch(mode, &eval_x0, &x_test, &eval_t, cfg.sigma_min, kappa);

    let mut shuffle = Rng::substream(cfg.seed, STREAM_SHUFFLE);
    let mut noise = Rng::substream(cfg.seed, STREAM_NOISE);
    let batches = train_idx.len().div_ceil(cfg.batch_size);
    let mut params = flow.vt_params.tensors();
    let mut adam = AdamState::new(
        &params,
        cfg.learning_rate,
        Some(CosineSchedule {
            min_lr: cfg.min_learning_rate,
            total_steps: (cfg.epochs * batches) as u64,
        }),
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let be = Eager;

    for epoch in 0..cfg.epochs {
        let lr = adam.learning_rate_at(adam.step_count());
        let order = shuffle.permutation(x_train.rows());
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x1 = x_train.select_rows(chunk);
            let x0 = noise.normal_tensor(chunk.len(), dim);
            let t: Vec<f64> = (0..chunk.len()).map(|_| noise.uniform()).collect();
            let (xt, ut) = conditional_batch(mode, &x0, &x1, &t, cfg.sigma_min, kappa);
            let current = flow.vt_params.clone();
            let (loss, grads) = grad(
                |tape, leaves| {
                    let vars = MlpVars::from_leaves(tape, &current, leaves.to_vec());
                    matching_loss(tape, &vars, &xt, &ut, &t)
                },
                &params,
            )
            .map_err(|e| Error::Diverged {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("flow loss {loss}"),
                });
            }
            adam.step(&mut params, &grads)?;
            flow.vt_params = flow.vt_params.from_tensors(&params);
            total += loss;
        }
        let vars = MlpVars::bind(&be, &flow.vt_params);
        let test_loss = be.value(&matching_loss(&be, &vars, &eval_xt, &eval_ut, &eval_t)).as_scalar();
        if best.as_ref().map_or(true, |(b, _, _)| test_loss < *b) {
            best = Some((test_loss, epoch, params.clone()));
        }
        history.push(FlowEpoch {
            epoch,
            learning_rate: lr,
            train_loss: total / batches as f64,
            test_loss,
        });
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        flow.vt_params = flow.vt_params.from_tensors(&p);
    }
    let report = FlowReport {
        mode,
        history,
        best_epoch,
        train_indices: train_idx,
        test_indices: test_idx,
        parameter_count: flow.parameter_count(),
    };
    Ok((flow, report))
}

/// RK4 of `dz/dt = v(z, t)` from `t0` to `t1` in `steps` equal steps.
fn rk4_segment(field: &MlpParams, z: Tensor, t0: f64, t1: f64, steps: usize) -> Result<Tensor> {
    let h = (t1 - t0) / steps as f64;
    let f = |z: &Tensor, t: f64| field.forward(z, TimeInput::Shared(t));
    let mut z = z;
    for k in 0..steps {
        let t = t0 + h * k as f64;
        let k1 = f(&z, t)?;
        let k2 = f(&z.zip_map(&k1, |a, b| a + 0.5 * h * b), t + 0.5 * h)?;
        let k3 = f(&z.zip_map(&k2, |a, b| a + 0.5 * h * b), t + 0.5 * h)?;
        let k4 = f(&z.zip_map(&k3, |a, b| a + h * b), t + h)?;
        let mut next = z.clone();
        for (i, v) in next.data_mut().iter_mut().enumerate() {
            *v += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
        }
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite flow state at step {k} (t = {t})")));
        }
        z = next;
    }
    Ok(z)
}

/// Standard-normal base draws in the operating space. Row `i` comes from its
/// own draw stream of `seed`, so any prefix of draws is independent of `n`.
pub fn base_draws(dim: usize, n: usize, seed: u64) -> Tensor {
    let mut out = Tensor::zeros(n, dim);
    for i in 0..n {
        let mut rng = Rng::draw_stream(seed, i as u64);
        for v in out.row_mut(i) {
            *v = rng.normal();
        }
    }
    out
}

/// Push operating-space points `z0` through the flow (without decoding).
pub fn push_forward(flow: &FlowModel, z0: &Tensor) -> Result<Tensor> {
    if z0.cols() != flow.dim {
        return Err(Error::shape("push_forward", format!("expected {} columns", flow.dim)));
    }
    rk4_segment(&flow.vt_params, z0.clone(), 0.0, 1.0, flow.n_simulation_steps)
}

/// Draw `n` samples and map them to data space.
pub fn sample(flow: &FlowModel, n: usize, seed: u64, diffeo: Option<&DiffeoModel>) -> Result<Tensor> {
    let m = flow.check_diffeo(diffeo)?;
    let z1 = push_forward(flow, &base_draws(flow.dim, n, seed))?;
    decode(m, &z1, flow.space)
}

/// Decoded states at `n_times` uniform times from 0 to 1. The segments
/// between frames share the flow's step budget, with at least one step
/// each; with two frames this is exactly [`sample`]'s integration.
pub fn trajectory(flow: &FlowModel, z0: &Tensor, n_times: usize, diffeo: Option<&DiffeoModel>) -> Result<Vec<Tensor>> {
    if n_times < 2 {
        return Err(Error::Domain("a trajectory needs at least 2 frames".into()));
    }
    if z0.cols() != flow.dim {
        return Err(Error::shape("trajectory", format!("expected {} columns", flow.dim)));
    }
    let m = flow.check_diffeo(diffeo)?;
    let segments = n_times - 1;
    let steps = flow.n_simulation_steps.div_ceil(segments).max(1);
    let mut frames = Vec::with_capacity(n_times);
    let mut z = z0.clone();
    frames.push(decode(m, &z, flow.space)?);
    for s in 0..segments {
        let (t0, t1) = (s as f64 / segments as f64, (s + 1) as f64 / segments as f64);
        z = rk4_segment(&flow.vt_params, z, t0, t1, steps)?;
        frames.push(decode(m, &z, flow.space)?);
    }
    Ok(frames)
}

/// One CSV per frame, `frame_000.csv`, ... in `dir`; returns the paths.
pub fn write_trajectory_csv(dir: impl AsRef<Path>, frames: &[Tensor]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let denom = (frames.len().max(2) - 1) as f64;
    let mut paths = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((1..=f.cols()).map(|c| format!("x_{c}")));
        w.write_record(&header).expect("in-memory write");
        let t = format!("{:?}", k as f64 / denom);
        for r in 0..f.rows() {
            let mut rec = vec![t.clone()];
            rec.extend(f.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).expect("in-memory write");
        }
        let path = dir.join(format!("frame_{k:03}.csv"));
        persist::write_atomic(&path, &w.into_inner().expect("in-memory flush"))?;
        paths.push(path);
    }
    Ok(paths)
}
