//! The set of differentiable primitives shared by eager evaluation and the
//! recording tape.
//!
//! Model code (MLP forward, RK4, losses) is written once against
//! [`Backend`]; running it with [`Eager`] computes plain values, running it
//! with a [`Tape`](super::tape::Tape) records a graph that can be
//! differentiated.

use std::rc::Rc;

use super::tensor::Tensor;

pub trait Backend {
    type V: Clone;

    fn constant(&self, t: Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor;
    fn shape(&self, v: &Self::V) -> (usize, usize);

    /// `op(a) * op(b)` with optional transposes.
    fn matmul(&self, a: &Self::V, ta: bool, b: &Self::V, tb: bool) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Elementwise product.
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `a + row` where `row` is `1 x cols` and broadcast over rows.
    fn add_row(&self, a: &Self::V, row: &Self::V) -> Self::V;
    fn scale(&self, a: &Self::V, s: f64) -> Self::V;
    fn swish(&self, a: &Self::V) -> Self::V;
    fn swish_prime(&self, a: &Self::V) -> Self::V;
    fn abs(&self, a: &Self::V) -> Self::V;
    fn square(&self, a: &Self::V) -> Self::V;
    /// Sum of all entries as a `1 x 1`.
    fn sum(&self, a: &Self::V) -> Self::V;
    /// Column sums (`1 x cols`).
    fn sum_rows(&self, a: &Self::V) -> Self::V;
    fn slice_cols(&self, a: &Self::V, start: usize, end: usize) -> Self::V;
    fn slice_rows(&self, a: &Self::V, start: usize, end: usize) -> Self::V;
    /// `n x n` Euclidean distances between the rows of `a`.
    fn pairwise_distances(&self, a: &Self::V) -> Self::V;
    /// Row `i` of the output is the concatenation of `table[tokens[i*len + p]]`
    /// for `p in 0..len`.
    fn embed_tokens(&self, table: &Self::V, tokens: &[usize], len: usize) -> Self::V;
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub(crate) fn swish_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

pub(crate) fn add_row(a: &Tensor, row: &Tensor) -> Tensor {
    let mut out = a.clone();
    let c = a.cols();
    for r in 0..a.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += *b;
        }
    }
    debug_assert_eq!(row.cols(), c);
    out
}

pub(crate) fn sum_rows(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols()];
    for r in 0..a.rows() {
        for (o, v) in out.iter_mut().zip(a.row(r)) {
            *o += *v;
        }
    }
    Tensor::row_vector(out)
}

pub(crate) fn slice_cols(a: &Tensor, start: usize, end: usize) -> Tensor {
    let w = end - start;
    let mut data = Vec::with_capacity(a.rows() * w);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[start..end]);
    }
    Tensor::from_rows(a.rows(), w, data).expect("slice extents")
}

pub(crate) fn slice_rows(a: &Tensor, start: usize, end: usize) -> Tensor {
    let c = a.cols();
    Tensor::from_rows(end - start, c, a.data()[start * c..end * c].to_vec()).expect("slice extents")
}

pub(crate) fn pairwise_distances(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = super::tensor::euclidean(a.row(i), a.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

pub(crate) fn embed_tokens(table: &Tensor, tokens: &[usize], len: usize) -> Tensor {
    let e = table.cols();
    let n = tokens.len() / len;
    let mut data = Vec::with_capacity(n * len * e);
    for &tok in tokens {
        data.extend_from_slice(table.row(tok));
    }
    Tensor::from_rows(n, len * e, data).expect("embedding extents")
}

/// Plain evaluation with no recording. Values are reference counted so
/// parameters can be shared cheaply.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type V = Rc<Tensor>;

    fn constant(&self, t: Tensor) -> Self::V {
        Rc::new(t)
    }

    fn value(&self, v: &Self::V) -> Tensor {
        (**v).clone()
    }

    fn shape(&self, v: &Self::V) -> (usize, usize) {
        (v.rows(), v.cols())
    }

    fn matmul(&self, a: &Self::V, ta: bool, b: &Self::V, tb: bool) -> Self::V {
        Rc::new(Tensor::matmul_t(a, ta, b, tb).expect("matmul shapes"))
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x - y))
    }

    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip_map(b, |x, y| x * y))
    }

    fn add_row(&self, a: &Self::V, row: &Self::V) -> Self::V {
        Rc::new(add_row(a, row))
    }

    fn scale(&self, a: &Self::V, s: f64) -> Self::V {
        Rc::new(a.scale(s))
    }

    fn swish(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(swish))
    }

    fn swish_prime(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(swish_prime))
    }

    fn abs(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(f64::abs))
    }

    fn square(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(|x| x * x))
    }

    fn sum(&self, a: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(a.sum()))
    }

    fn sum_rows(&self, a: &Self::V) -> Self::V {
        Rc::new(sum_rows(a))
    }

    fn slice_cols(&self, a: &Self::V, start: usize, end: usize) -> Self::V {
        Rc::new(slice_cols(a, start, end))
    }

    fn slice_rows(&self, a: &Self::V, start: usize, end: usize) -> Self::V {
        Rc::new(slice_rows(a, start, end))
    }

    fn pairwise_distances(&self, a: &Self::V) -> Self::V {
        Rc::new(pairwise_distances(a))
    }

    fn embed_tokens(&self, table: &Self::V, tokens: &[usize], len: usize) -> Self::V {
        Rc::new(embed_tokens(table, tokens, len))
    }
}
