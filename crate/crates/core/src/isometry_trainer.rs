//! Training of the diffeomorphism towards an isometry between the data
//! manifold (given by a distance matrix) and a Euclidean latent space whose
//! first `d_prime` coordinates carry the data.
//!
//! The objective is a weighted sum of four terms evaluated per minibatch:
//!
//! * global isometry: mean squared mismatch of latent vs. target distances;
//! * graph matching: mismatch of distance-column differences;
//! * submanifold: L1 norm of the latent coordinates past `d_prime`;
//! * stability: squared vector-Jacobian norm of the field along the RK4
//!   trajectory, with Gaussian probes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{split, SequenceCodec, PAD};
use crate::error::{Error, Result};
use crate::manifold_metrics::DistanceMatrix;
use crate::node_diffeo::{integrate, Direction, DiffeoModel, FieldShape};
use crate::numerics::{grad, AdamState, Backend, Eager, MlpVars, Rng, Tape, Tensor, Var};
use crate::persist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsometryTrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of samples used for training; the rest is the test split.
    pub split: f64,
    pub seed: u64,
    pub d_prime: usize,
    pub n_steps: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Train the sequence embedding table together with the field.
    pub train_embedding: bool,
}

impl Default for IsometryTrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha4: 0.01,
            epochs: 1000,
            warmup_epochs: 50,
            batch_size: 64,
            learning_rate: 1e-4,
            split: 0.8,
            seed: 0,
            d_prime: 1,
            n_steps: 10,
            hidden: 64,
            hidden_layers: 5,
            train_embedding: false,
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl IsometryTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if self.warmup_epochs > self.epochs {
            return Err(config_err("warmup_epochs", "must not exceed epochs"));
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err("learning_rate", "must be positive"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(config_err("split", "must lie strictly between 0 and 1"));
        }
        if self.d_prime < 1 {
            return Err(config_err("d_prime", "must be at least 1"));
        }
        if self.n_steps < 1 {
            return Err(config_err("n_steps", "must be at least 1"));
        }
        if self.hidden < 1 || self.hidden_layers < 1 {
            return Err(config_err("hidden", "need at least one hidden layer of width >= 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: [self.alpha1, self.alpha2, self.alpha3, self.alpha4],
        }
    }

    pub fn field_shape(&self) -> FieldShape {
        FieldShape {
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: [f64; 4],
}

impl LossWeights {
    /// Weights in force during `epoch`: the distance terms are off during
    /// warmup.
    pub fn at_epoch(self, epoch: usize, warmup: usize) -> Self {
        let mut a = self.alpha;
        if epoch < warmup {
            a[0] = 0.0;
            a[1] = 0.0;
        }
        Self { alpha: a }
    }
}

/// Raw term values and their weighted sum. A term whose weight is zero is
/// not evaluated and reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub global_isometry: f64,
    pub graph_matching: f64,
    pub submanifold: f64,
    pub stability: f64,
    pub total: f64,
}

impl LossTerms {
    fn raw(&self) -> [f64; 4] {
        [
            self.global_isometry,
            self.graph_matching,
            self.submanifold,
            self.stability,
        ]
    }

    fn from_raw(raw: [f64; 4], w: LossWeights) -> Self {
        Self {
            global_isometry: raw[0],
            graph_matching: raw[1],
            submanifold: raw[2],
            stability: raw[3],
            total: raw.iter().zip(w.alpha).map(|(r, a)| r * a).sum(),
        }
    }

    /// `alpha_k * L_k` per term.
    pub fn contributions(&self, w: LossWeights) -> [f64; 4] {
        let r = self.raw();
        [0, 1, 2, 3].map(|k| w.alpha[k] * r[k])
    }
}

/// `(1/b^2) sum_ij (dphi_ij - d_ij)^2`.
pub fn global_isometry<B: Backend>(be: &B, dphi: &B::V, d: &B::V) -> B::V {
    let b = be.shape(d).0 as f64;
    let e = be.sub(dphi, d);
    be.scale(&be.sum(&be.square(&e)), 1.0 / (b * b))
}

/// `(1/b) sum_i sum_{j != i} ||E_i - E_j||^2` with `E = dphi - d`, using
/// `sum_ij ||E_i - E_j||^2 = 2b ||E||_F^2 - 2 ||sum_i E_i||^2`.
pub fn graph_matching<B: Backend>(be: &B, dphi: &B::V, d: &B::V) -> B::V {
    let b = be.shape(d).0 as f64;
    let e = be.sub(dphi, d);
    let fro = be.sum(&be.square(&e));
    let col = be.sum(&be.square(&be.sum_rows(&e)));
    be.sub(&be.scale(&fro, 2.0), &be.scale(&col, 2.0 / b))
}

/// Mean over rows of the L1 norm of columns `d_prime..`.
pub fn submanifold<B: Backend>(be: &B, z: &B::V, d_prime: usize) -> Option<B::V> {
    let (b, d) = be.shape(z);
    if d_prime >= d {
        return None;
    }
    let tail = be.slice_cols(z, d_prime, d);
    Some(be.scale(&be.sum(&be.abs(&tail)), 1.0 / b as f64))
}

/// Forward pass of `phi` for one batch, with the stability term collected
/// at the start of every RK4 step. Returns `(z, stability)`; stability is
/// `None` when not requested.
pub fn forward_with_stability<B: Backend>(
    be: &B,
    vars: &MlpVars<B>,
    centred: B::V,
    n_steps: usize,
    noise: Option<&mut Rng>,
) -> (B::V, Option<B::V>) {
    let (b, d) = be.shape(&centred);
    let mut acc: Vec<B::V> = Vec::new();
    let z = match noise {
        None => integrate(be, vars, centred, Direction::Forward, n_steps, |_, _, _, _| {}),
        Some(rng) => integrate(be, vars, centred, Direction::Forward, n_steps, |_, _, _, trace| {
            let eps = be.constant(rng.normal_tensor(b, d));
            let v = vars.input_vjp(be, trace, &eps);
            acc.push(be.sum(&be.square(&v)));
        }),
    };
    let stab = acc.into_iter().reduce(|a, c| be.add(&a, &c)).map(|s| {
        // Mean over steps approximates the time integral on [0, 1].
        be.scale(&s, 1.0 / (b as f64 * n_steps as f64))
    });
    (z, stab)
}

/// Weighted batch objective. `x` holds the batch inputs (before centring),
/// `d` the target distance block.
pub fn batch_objective<B: Backend>(
    be: &B,
    vars: &MlpVars<B>,
    model: &DiffeoModel,
    x: &B::V,
    d: &B::V,
    w: LossWeights,
    noise: &mut Rng,
) -> (B::V, [Option<B::V>; 4]) {
    let neg_mu = be.constant(model.mu.scale(-1.0));
    let centred = be.add_row(x, &neg_mu);
    let want_stab = w.alpha[3] > 0.0;
    let (z, stab) = forward_with_stability(be, vars, centred, model.n_steps, want_stab.then_some(noise));
    let need_dist = w.alpha[0] > 0.0 || w.alpha[1] > 0.0;
    let dphi = need_dist.then(|| be.pairwise_distances(&z));
    let l1 = (w.alpha[0] > 0.0).then(|| global_isometry(be, dphi.as_ref().unwrap(), d));
    let l2 = (w.alpha[1] > 0.0).then(|| graph_matching(be, dphi.as_ref().unwrap(), d));
    let l3 = if w.alpha[2] > 0.0 {
        submanifold(be, &z, model.d_prime)
    } else {
        None
    };
    let terms = [l1, l2, l3, stab];
    let mut total: Option<B::V> = None;
    for (t, a) in terms.iter().zip(w.alpha) {
        if let Some(t) = t {
            let s = be.scale(t, a);
            total = Some(match total {
                None => s,
                Some(acc) => be.add(&acc, &s),
            });
        }
    }
    let total = total.unwrap_or_else(|| be.constant(Tensor::scalar(0.0)));
    (total, terms)
}

fn term_values<B: Backend>(be: &B, terms: &[Option<B::V>; 4]) -> [f64; 4] {
    [0, 1, 2, 3].map(|k| terms[k].as_ref().map_or(0.0, |v| be.value(v).as_scalar()))
}

/// Inputs of the trainer: plain points, or token sequences embedded through
/// a codec whose table may be trained.
enum Inputs<'a> {
    Points(&'a Tensor),
    Tokens {
        tokens: Vec<Vec<usize>>,
        codes: Vec<Vec<f64>>,
        max_len: usize,
    },
}

impl Inputs<'_> {
    fn n(&self) -> usize {
        match self {
            Inputs::Points(x) => x.rows(),
            Inputs::Tokens { tokens, .. } => tokens.len(),
        }
    }

    /// Concrete input rows for `idx` given the current table.
    fn eager(&self, idx: &[usize], table: Option<&Tensor>) -> Tensor {
        match self {
            Inputs::Points(x) => x.select_rows(idx),
            Inputs::Tokens {
                tokens,
                codes,
                max_len,
            } => {
                let t = table.expect("token inputs need a table");
                let flat: Vec<usize> = idx.iter().flat_map(|&i| tokens[i].iter().copied()).collect();
                let mut x = crate::numerics::backend::embed_tokens(t, &flat, *max_len);
                for (r, &i) in idx.iter().enumerate() {
                    for (v, c) in x.row_mut(r).iter_mut().zip(&codes[i]) {
                        *v += c;
                    }
                }
                x
            }
        }
    }

    fn on_tape(&self, tape: &Tape, idx: &[usize], table: Option<Var>, table_value: Option<&Tensor>) -> Var {
        match (self, table) {
            (
                Inputs::Tokens {
                    tokens,
                    codes,
                    max_len,
                },
                Some(tv),
            ) => {
                let flat: Vec<usize> = idx.iter().flat_map(|&i| tokens[i].iter().copied()).collect();
                let emb = tape.embed_tokens(&tv, &flat, *max_len);
                let pos: Vec<f64> = idx.iter().flat_map(|&i| codes[i].iter().copied()).collect();
                let cols = codes.first().map_or(0, Vec::len);
                let pos = tape.constant(Tensor::from_rows(idx.len(), cols, pos).expect("extents"));
                tape.add(&emb, &pos)
            }
            _ => tape.constant(self.eager(idx, table_value)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Batch-averaged raw terms; `total` uses the weights in force.
    pub train: LossTerms,
    /// Weighted contributions `alpha_k * L_k` on the training batches.
    pub train_contributions: [f64; 4],
    /// Full test split, post-warmup weights.
    pub test: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub eps_inv: f64,
    pub eps_ld: f64,
    pub eps_iso: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub metrics: AblationMetrics,
}

impl TrainReport {
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "learning_rate",
            "train_global_isometry",
            "train_graph_matching",
            "train_submanifold",
            "train_stability",
            "train_total",
            "test_global_isometry",
            "test_graph_matching",
            "test_submanifold",
            "test_stability",
            "test_total",
        ])
        .expect("in-memory write");
        for r in &self.history {
            let vals = [
                r.learning_rate,
                r.train.global_isometry,
                r.train.graph_matching,
                r.train.submanifold,
                r.train.stability,
                r.train.total,
                r.test.global_isometry,
                r.test.graph_matching,
                r.test.submanifold,
                r.test.stability,
                r.test.total,
            ];
            let mut rec = vec![r.epoch.to_string()];
            rec.extend(vals.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_atomic(path, &self.to_csv_bytes())
    }
}

/// Trained model, report, and (for sequence inputs) the updated codec.
pub struct TrainOutcome {
    pub model: DiffeoModel,
    pub report: TrainReport,
    pub codec: Option<SequenceCodec>,
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Train on point data.
pub fn train_isometry(data: &Tensor, d_matrix: &DistanceMatrix, cfg: &IsometryTrainConfig) -> Result<(DiffeoModel, TrainReport)> {
    let out = train_impl(Inputs::Points(data), None, d_matrix, cfg)?;
    Ok((out.model, out.report))
}

/// Train on sequences embedded by `codec`; the table is updated when
/// `cfg.train_embedding` is set.
pub fn train_isometry_sequences(
    sequences: &[String],
    codec: &SequenceCodec,
    d_matrix: &DistanceMatrix,
    cfg: &IsometryTrainConfig,
) -> Result<TrainOutcome> {
    let mut tokens = Vec::with_capacity(sequences.len());
    let mut codes = Vec::with_capacity(sequences.len());
    for s in sequences {
        let t = codec.tokens(s)?;
        codes.push(codec.position_codes(&t));
        tokens.push(t);
    }
    let inputs = Inputs::Tokens {
        tokens,
        codes,
        max_len: codec.max_len,
    };
    train_impl(inputs, Some(codec.clone()), d_matrix, cfg)
}

fn test_objective(
    model: &DiffeoModel,
    x_test: &Tensor,
    d_test: &Tensor,
    w: LossWeights,
    seed: u64,
) -> LossTerms {
    let be = Eager;
    let vars = MlpVars::bind(&be, &model.field);
    let mut noise = Rng::substream(seed, STREAM_TEST);
    let x = be.constant(x_test.clone());
    let d = be.constant(d_test.clone());
    let (_, terms) = batch_objective(&be, &vars, model, &x, &d, w, &mut noise);
    LossTerms::from_raw(term_values(&be, &terms), w)
}

fn train_impl(
    inputs: Inputs<'_>,
    mut codec: Option<SequenceCodec>,
    d_matrix: &DistanceMatrix,
    cfg: &IsometryTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = inputs.n();
    if d_matrix.n() != n {
        return Err(Error::Input(format!(
            "distance matrix covers {} samples, data has {n}",
            d_matrix.n()
        )));
    }
    let (train_idx, test_idx) = split(n, cfg.split, cfg.seed)?;
    if train_idx.len() < 2 || test_idx.len() < 2 {
        return Err(Error::Input("need at least two samples in each split".into()));
    }
    let train_table = cfg.train_embedding && codec.is_some();
    let table0 = codec.as_ref().map(|c| c.table.clone());
    let x_train0 = inputs.eager(&train_idx, table0.as_ref());
    if cfg.d_prime > x_train0.cols() {
        return Err(config_err("d_prime", format!("must not exceed the data dimension {}", x_train0.cols())));
    }
    let mut init_rng = Rng::substream(cfg.seed, STREAM_INIT);
    let mut model = DiffeoModel::new(&x_train0, cfg.d_prime, cfg.n_steps, cfg.field_shape(), &mut init_rng)?;
    let mut shuffle = Rng::substream(cfg.seed, STREAM_SHUFFLE);
    let mut noise = Rng::substream(cfg.seed, STREAM_NOISE);

    let n_field = model.field.tensor_count();
    let mut params = model.field.tensors();
    if train_table {
        params.push(table0.clone().unwrap());
    }
    let mut adam = AdamState::new(&params, cfg.learning_rate, None);
    let full = cfg.weights();
    let d_test = d_matrix.restrict(&test_idx);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let w = full.at_epoch(epoch, cfg.warmup_epochs);
        let order = shuffle.permutation(train_idx.len());
        let mut sums = [0.0; 4];
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let d_sub = d_matrix.restrict(&idx);
            let current_field = model.field.clone();
            let table_now = if train_table { params.last().cloned() } else { table0.clone() };
            let mut raw = [0.0; 4];
            let (loss, grads) = grad(
                |tape, leaves| {
                    let vars = MlpVars::from_leaves(tape, &current_field, leaves[..n_field].to_vec());
                    let table_var = train_table.then(|| leaves[n_field]);
                    let x = inputs.on_tape(tape, &idx, table_var, table_now.as_ref());
                    let d = tape.constant(d_sub.clone());
                    let (total, terms) = batch_objective(tape, &vars, &model, &x, &d, w, &mut noise);
                    raw = term_values(tape, &terms);
                    total
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
                    detail: format!("loss {loss}"),
                });
            }
            let mut grads = grads;
            if train_table {
                // The pad row stays at zero.
                for v in grads[n_field].row_mut(PAD) {
                    *v = 0.0;
                }
            }
            adam.step(&mut params, &grads)?;
            model.field = model.field.from_tensors(&params[..n_field]);
            for k in 0..4 {
                sums[k] += raw[k];
            }
            n_batches += 1;
        }
        let mean = sums.map(|s| s / n_batches.max(1) as f64);
        let train = LossTerms::from_raw(mean, w);
        let table_now = if train_table { params.last() } else { table0.as_ref() };
        let x_test = inputs.eager(&test_idx, table_now);
        let test = test_objective(&model, &x_test, &d_test, full, cfg.seed);
        if !test.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: n_batches,
                detail: "non-finite test loss".into(),
            });
        }
        log::debug!("epoch {epoch}: train {:.6e} test {:.6e}", train.total, test.total);
        if best.as_ref().map_or(true, |(b, _, _)| test.total < *b) {
            best = Some((test.total, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: cfg.learning_rate,
            train,
            train_contributions: train.contributions(w),
            test,
        });
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        model.field = model.field.from_tensors(&p[..n_field]);
        if train_table {
            if let Some(c) = codec.as_mut() {
                c.table = p[n_field].clone();
            }
        }
    }
    let table_final = codec.as_ref().map(|c| c.table.clone());
    let x_test = inputs.eager(&test_idx, table_final.as_ref());
    let metrics = ablation_metrics(&model, &x_test, &d_test)?;
    let report = TrainReport {
        history,
        best_epoch,
        train_indices: train_idx,
        test_indices: test_idx,
        metrics,
    };
    Ok(TrainOutcome { model, report, codec })
}

/// Invertibility, low-dimensionality and isometry errors on held-out points
/// `x` with target distances `d` (`n x n`).
pub fn ablation_metrics(model: &DiffeoModel, x: &Tensor, d: &Tensor) -> Result<AblationMetrics> {
    let n = x.rows();
    if d.rows() != n || d.cols() != n {
        return Err(Error::shape("ablation_metrics", "distance block must be n x n"));
    }
    let z = model.phi(x)?;
    let back = model.phi_inverse(&z)?;
    let z = z.0;
    let nf = n as f64;
    let eps_inv = (0..n)
        .map(|r| crate::numerics::tensor::squared_distance(x.row(r), back.row(r)))
        .sum::<f64>()
        / nf;
    let eps_ld = (0..n)
        .map(|r| z.row(r)[model.d_prime..].iter().map(|v| v.abs()).sum::<f64>().powi(2))
        .sum::<f64>()
        / nf;
    let mut iso = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dz = crate::numerics::tensor::euclidean(z.row(i), z.row(j));
            iso += (d.get(i, j) - dz).powi(2);
        }
    }
    Ok(AblationMetrics {
        eps_inv,
        eps_ld,
        eps_iso: iso / (nf * nf),
    })
}
