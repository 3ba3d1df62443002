//! Multilayer perceptrons with Swish activations and an optional sine-cosine
//! time embedding, written against [`Backend`] so the same forward pass can
//! be evaluated eagerly or recorded for differentiation.

use serde::{Deserialize, Serialize};

use super::backend::Backend;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Number of sine/cosine frequency pairs in the time embedding.
pub const TIME_FREQUENCIES: usize = 8;
pub const TIME_EMBED_DIM: usize = 2 * TIME_FREQUENCIES;
const MAX_FREQUENCY: f64 = 1000.0;

/// `[sin(f_k t)..., cos(f_k t)...]` with `f_k` geometric from 1 to 1000.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_FREQUENCIES {
        let f = MAX_FREQUENCY.powf(k as f64 / (TIME_FREQUENCIES - 1) as f64);
        out[k] = (f * t).sin();
        out[TIME_FREQUENCIES + k] = (f * t).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    /// No nonlinearity; only used by tests and hand-built nets.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in x out`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    /// Number of hidden (activated) layers; the net has `hidden_layers + 1`
    /// affine maps.
    pub hidden_layers: usize,
    pub output: usize,
    pub time_conditioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub time_conditioned: bool,
}

/// How the time input enters the first layer.
#[derive(Debug, Clone, Copy)]
pub enum TimeInput<'a> {
    None,
    /// One time shared by every row.
    Shared(f64),
    /// One time per row.
    PerRow(&'a [f64]),
}

impl MlpParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation. With `zero_last` the output
    /// layer starts at zero so the net is the zero map.
    pub fn init(shape: MlpShape, rng: &mut Rng, zero_last: bool) -> Self {
        let first_in = shape.input
            + if shape.time_conditioned {
                TIME_EMBED_DIM
            } else {
                0
            };
        let mut dims = vec![first_in];
        dims.extend(std::iter::repeat(shape.hidden).take(shape.hidden_layers));
        dims.push(shape.output);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                if zero_last && l == n_layers - 1 {
                    return Layer {
                        weight: Tensor::zeros(fan_in, fan_out),
                        bias: Tensor::zeros(1, fan_out),
                    };
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                let b = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
                Layer {
                    weight: Tensor::from_rows(fan_in, fan_out, w).expect("extents"),
                    bias: Tensor::row_vector(b),
                }
            })
            .collect();
        Self {
            layers,
            activation: Activation::Swish,
            time_conditioned: shape.time_conditioned,
        }
    }

    /// All-zero net of the given shape.
    pub fn zeros(shape: MlpShape) -> Self {
        let mut rng = Rng::new(0);
        let mut p = Self::init(shape, &mut rng, true);
        for l in &mut p.layers {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("mlp", "no layers"));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        w[0].weight.cols(),
                        i + 1,
                        w[1].weight.rows()
                    ),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.cols() != l.weight.cols() || l.bias.rows() != 1 {
                return Err(Error::shape("mlp", format!("layer {i} bias shape")));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        if self.time_conditioned && self.layers[0].weight.rows() <= TIME_EMBED_DIM {
            return Err(Error::shape("mlp", "first layer too narrow for time embedding"));
        }
        Ok(())
    }

    /// Dimension of the data input (time embedding excluded).
    pub fn input_dim(&self) -> usize {
        let r = self.layers[0].weight.rows();
        if self.time_conditioned {
            r - TIME_EMBED_DIM
        } else {
            r
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.cols()).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened as `[w0, b0, w1, b1, ...]`.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn from_tensors(&self, tensors: &[Tensor]) -> Self {
        let mut out = self.clone();
        for (l, pair) in out.layers.iter_mut().zip(tensors.chunks(2)) {
            l.weight = pair[0].clone();
            l.bias = pair[1].clone();
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Eager forward pass.
    pub fn forward(&self, input: &Tensor, time: TimeInput<'_>) -> Result<Tensor> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input has {} columns, net expects {}", input.cols(), self.input_dim()),
            ));
        }
        match time {
            TimeInput::None if self.time_conditioned => {
                return Err(Error::shape("mlp_forward", "net needs a time input"))
            }
            TimeInput::Shared(_) | TimeInput::PerRow(_) if !self.time_conditioned => {
                return Err(Error::shape("mlp_forward", "net takes no time input"))
            }
            TimeInput::PerRow(ts) if ts.len() != input.rows() => {
                return Err(Error::shape("mlp_forward", "one time per row required"))
            }
            _ => {}
        }
        let be = super::backend::Eager;
        let vars = MlpVars::bind(&be, self);
        let x = be.constant(input.clone());
        let (out, _) = vars.forward(&be, &x, time);
        Ok((*out).clone())
    }
}

/// Parameters bound to a backend, with the first layer split into its data
/// and time blocks.
pub struct MlpVars<B: Backend> {
    /// `[w0, b0, w1, b1, ...]` as registered (gradients are read off these).
    pub leaves: Vec<B::V>,
    first_data: B::V,
    first_time: Option<B::V>,
    activation: Activation,
    input_dim: usize,
}

/// Pre-activations of the hidden layers, needed for input-Jacobian products.
pub struct ForwardTrace<V> {
    pre: Vec<V>,
}

impl<B: Backend> MlpVars<B> {
    pub fn bind(be: &B, params: &MlpParams) -> Self {
        let leaves: Vec<B::V> = params.tensors().into_iter().map(|t| be.constant(t)).collect();
        Self::from_leaves(be, params, leaves)
    }

    /// Use already-registered leaves (e.g. parameters shared by several
    /// forward passes on one tape).
    pub fn from_leaves(be: &B, params: &MlpParams, leaves: Vec<B::V>) -> Self {
        let input_dim = params.input_dim();
        let (first_data, first_time) = if params.time_conditioned {
            let rows = params.layers[0].weight.rows();
            (
                be.slice_rows(&leaves[0], 0, input_dim),
                Some(be.slice_rows(&leaves[0], input_dim, rows)),
            )
        } else {
            (leaves[0].clone(), None)
        };
        Self {
            leaves,
            first_data,
            first_time,
            activation: params.activation,
            input_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn n_layers(&self) -> usize {
        self.leaves.len() / 2
    }

    fn activate(&self, be: &B, a: &B::V) -> B::V {
        match self.activation {
            Activation::Swish => be.swish(a),
            Activation::Identity => a.clone(),
        }
    }

    pub fn forward(&self, be: &B, x: &B::V, time: TimeInput<'_>) -> (B::V, ForwardTrace<B::V>) {
        let n_layers = self.n_layers();
        let mut h = be.matmul(x, false, &self.first_data, false);
        let b0 = &self.leaves[1];
        match (time, &self.first_time) {
            (TimeInput::Shared(t), Some(wt)) => {
                let e = be.constant(Tensor::row_vector(time_embedding(t).to_vec()));
                let te = be.matmul(&e, false, wt, false);
                let row = be.add(&te, b0);
                h = be.add_row(&h, &row);
            }
            (TimeInput::PerRow(ts), Some(wt)) => {
                let mut data = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
                for &t in ts {
                    data.extend_from_slice(&time_embedding(t));
                }
                let e = be.constant(
                    Tensor::from_rows(ts.len(), TIME_EMBED_DIM, data).expect("extents"),
                );
                let te = be.matmul(&e, false, wt, false);
                h = be.add(&h, &te);
                h = be.add_row(&h, b0);
            }
            _ => {
                h = be.add_row(&h, b0);
            }
        }
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        for l in 1..n_layers {
            pre.push(h.clone());
            let a = self.activate(be, &h);
            let w = &self.leaves[2 * l];
            let b = &self.leaves[2 * l + 1];
            let z = be.matmul(&a, false, w, false);
            h = be.add_row(&z, b);
        }
        (h, ForwardTrace { pre })
    }

    /// `cot^T (d out / d x)` for each row, built from recorded primitives so
    /// it can itself be differentiated with respect to the parameters.
    pub fn input_vjp(&self, be: &B, trace: &ForwardTrace<B::V>, cot: &B::V) -> B::V {
        let n_layers = self.n_layers();
        let mut g = cot.clone();
        for l in (1..n_layers).rev() {
            let w = &self.leaves[2 * l];
            g = be.matmul(&g, false, w, true);
            g = match self.activation {
                Activation::Swish => {
                    let d = be.swish_prime(&trace.pre[l - 1]);
                    be.mul(&g, &d)
                }
                Activation::Identity => g,
            };
        }
        be.matmul(&g, false, &self.first_data, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backend::{sigmoid, Eager};
    use crate::numerics::tape::{grad, Tape};

    fn shape(input: usize, hidden: usize, layers: usize, output: usize, time: bool) -> MlpShape {
        MlpShape {
            input,
            hidden,
            hidden_layers: layers,
            output,
            time_conditioned: time,
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(shape(3, 5, 2, 3, true));
        let x = Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let y = p.forward(&x, TimeInput::Shared(0.3)).unwrap();
        assert_eq!(y, Tensor::zeros(2, 3));
    }

    #[test]
    fn identity_linear_layer() {
        let p = MlpParams {
            layers: vec![Layer {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(1, 3),
            }],
            activation: Activation::Identity,
            time_conditioned: false,
        };
        let x = Tensor::from_rows(1, 3, vec![0.2, -4.0, 9.0]).unwrap();
        assert_eq!(p.forward(&x, TimeInput::None).unwrap(), x);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        // 1 -> 2 -> 1 with Swish on the hidden layer.
        let p = MlpParams {
            layers: vec![
                Layer {
                    weight: Tensor::from_rows(1, 2, vec![0.5, -1.5]).unwrap(),
                    bias: Tensor::row_vector(vec![0.1, 0.2]),
                },
                Layer {
                    weight: Tensor::from_rows(2, 1, vec![2.0, 0.25]).unwrap(),
                    bias: Tensor::row_vector(vec![-0.3]),
                },
            ],
            activation: Activation::Swish,
            time_conditioned: false,
        };
        let y = p
            .forward(&Tensor::row_vector(vec![1.0]), TimeInput::None)
            .unwrap()
            .as_scalar();
        // Scalar walkthrough.
        let a1 = 0.5 * 1.0 + 0.1;
        let a2 = -1.5 * 1.0 + 0.2;
        let s1 = a1 / (1.0 + f64::exp(-a1));
        let s2 = a2 / (1.0 + f64::exp(-a2));
        let want = 2.0 * s1 + 0.25 * s2 - 0.3;
        assert!((y - want).abs() < 1e-14, "{y} vs {want}");
        assert!((s1 - 0.6 * sigmoid(0.6)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = MlpParams::zeros(shape(3, 4, 1, 3, false));
        assert!(p.forward(&Tensor::zeros(2, 2), TimeInput::None).is_err());
        assert!(p.forward(&Tensor::zeros(2, 3), TimeInput::Shared(0.0)).is_err());
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = Rng::new(11);
        let p = MlpParams::init(shape(2, 8, 3, 2, true), &mut rng, false);
        let x = rng.normal_tensor(5, 2);
        let a = p.forward(&x, TimeInput::Shared(0.7)).unwrap();
        let b = p.forward(&x, TimeInput::Shared(0.7)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn per_row_time_equals_shared_time() {
        let mut rng = Rng::new(3);
        let p = MlpParams::init(shape(2, 6, 2, 2, true), &mut rng, false);
        let x = rng.normal_tensor(4, 2);
        let a = p.forward(&x, TimeInput::Shared(0.25)).unwrap();
        let b = p.forward(&x, TimeInput::PerRow(&[0.25; 4])).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let p = MlpParams::init(shape(3, 7, 3, 3, true), &mut rng, false);
        let x = rng.normal_tensor(2, 3);
        let cot = rng.normal_tensor(2, 3);
        let be = Eager;
        let vars = MlpVars::bind(&be, &p);
        let xv = be.constant(x.clone());
        let (_, trace) = vars.forward(&be, &xv, TimeInput::Shared(0.4));
        let cv = be.constant(cot.clone());
        let vjp = vars.input_vjp(&be, &trace, &cv);
        let f = |x: &Tensor| {
            let y = p.forward(x, TimeInput::Shared(0.4)).unwrap();
            y.zip_map(&cot, |a, b| a * b).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - vjp.data()[i]).abs() < 1e-7, "{fd} vs {}", vjp.data()[i]);
        }
    }

    #[test]
    fn vjp_norm_gradient_matches_finite_differences() {
        // Second-order path: d/dθ ||cot^T J(x; θ)||^2.
        let mut rng = Rng::new(9);
        let p = MlpParams::init(shape(2, 5, 2, 2, true), &mut rng, false);
        let x = rng.normal_tensor(3, 2);
        let cot = rng.normal_tensor(3, 2);
        let build = |t: &Tape, leaves: &[crate::numerics::tape::Var], p: &MlpParams| {
            let vars = MlpVars::from_leaves(t, p, leaves.to_vec());
            let xv = t.constant(x.clone());
            let (_, trace) = vars.forward(t, &xv, TimeInput::Shared(0.6));
            let cv = t.constant(cot.clone());
            let v = vars.input_vjp(t, &trace, &cv);
            let sq = t.square(&v);
            t.sum(&sq)
        };
        let params = p.tensors();
        let (_, g) = grad(|t, vs| build(t, vs, &p), &params).unwrap();
        let eval = |ps: &[Tensor]| {
            let t = Tape::new();
            let vs: Vec<_> = ps.iter().map(|q| t.leaf(q.clone())).collect();
            let out = build(&t, &vs, &p);
            t.scalar_value(out)
        };
        for (k, pk) in params.iter().enumerate() {
            for i in 0..pk.len() {
                let mut plus = params.clone();
                plus[k].data_mut()[i] += 1e-6;
                let mut minus = params.clone();
                minus[k].data_mut()[i] -= 1e-6;
                let fd = (eval(&plus) - eval(&minus)) / 2e-6;
                let an = g[k].data()[i];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "tensor {k} entry {i}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(0.0);
        assert!(e[..TIME_FREQUENCIES].iter().all(|&v| v == 0.0));
        assert!(e[TIME_FREQUENCIES..].iter().all(|&v| v == 1.0));
        let e = time_embedding(0.5);
        assert!((e[0] - 0.5f64.sin()).abs() < 1e-15);
        assert!((e[TIME_FREQUENCIES - 1] - 500f64.sin()).abs() < 1e-9);
    }
}
