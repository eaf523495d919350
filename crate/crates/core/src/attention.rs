//! Non-local self-attention over a single feature vector.
//!
//! The feature `x` (length `C`) is embedded three times into `d = C / n`
//! dimensions: `a = Wθ x`, `b = Wφ x`, `g = Wg x`. The `d×d` similarity matrix
//! is the outer product `a bᵀ`, each row is softmax-normalized, the attended
//! vector is `y = softmax(a bᵀ) g`, and the block returns `Wα y + x`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default downsampling ratio between the feature and embedding dimensions.
pub const DEFAULT_RATIO: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("feature dimension {c} is not divisible by attention ratio {n}")]
    Indivisible { c: usize, n: usize },
    #[error("expected feature of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("attention parameter {name} has shape {got:?}, expected {expected:?}")]
    BadShape {
        name: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("attention parameters contain non-finite values")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `d × C`
    pub w_theta: Array2<f64>,
    /// `d × C`
    pub w_phi: Array2<f64>,
    /// `d × C`
    pub w_g: Array2<f64>,
    /// `C × d`
    pub w_alpha: Array2<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub theta: Array1<f64>,
    pub phi: Array1<f64>,
    pub g: Array1<f64>,
    /// Pre-softmax scores, `d × d`.
    pub similarity: Array2<f64>,
    /// Row-stochastic attention weights, `d × d`.
    pub weights: Array2<f64>,
    /// Attended vector before re-embedding, length `d`.
    pub attended: Array1<f64>,
}

/// Gradients with respect to every input of [`attention_forward`].
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub x: Array1<f64>,
    pub params: AttentionParams,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl AttentionParams {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(c: usize, n: usize, rng: &mut impl Rng) -> Result<Self, AttentionError> {
        let d = embed_dim(c, n)?;
        let in_bound = 1.0 / (c as f64).sqrt();
        let out_bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_theta: uniform(d, c, in_bound, rng),
            w_phi: uniform(d, c, in_bound, rng),
            w_g: uniform(d, c, in_bound, rng),
            w_alpha: uniform(c, d, out_bound, rng),
        })
    }

    pub fn zeros(c: usize, n: usize) -> Result<Self, AttentionError> {
        let d = embed_dim(c, n)?;
        Ok(Self {
            w_theta: Array2::zeros((d, c)),
            w_phi: Array2::zeros((d, c)),
            w_g: Array2::zeros((d, c)),
            w_alpha: Array2::zeros((c, d)),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_theta.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_theta.nrows()
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let (d, c) = self.w_theta.dim();
        let expect = |name, m: &Array2<f64>, shape: (usize, usize)| {
            if m.dim() != shape {
                Err(AttentionError::BadShape {
                    name,
                    got: m.dim(),
                    expected: shape,
                })
            } else {
                Ok(())
            }
        };
        expect("w_phi", &self.w_phi, (d, c))?;
        expect("w_g", &self.w_g, (d, c))?;
        expect("w_alpha", &self.w_alpha, (c, d))?;
        if d == 0 || c % d != 0 {
            return Err(AttentionError::Indivisible { c, n: 0 });
        }
        let finite = [&self.w_theta, &self.w_phi, &self.w_g, &self.w_alpha]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(AttentionError::NonFinite);
        }
        Ok(())
    }

    /// Parameters in a fixed order, for checkpointing and optimization.
    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("w_theta", &self.w_theta),
            ("w_phi", &self.w_phi),
            ("w_g", &self.w_g),
            ("w_alpha", &self.w_alpha),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [
            &mut self.w_theta,
            &mut self.w_phi,
            &mut self.w_g,
            &mut self.w_alpha,
        ]
    }
}

/// `C / n`, or an error when `n` does not divide `C`.
pub fn embed_dim(c: usize, n: usize) -> Result<usize, AttentionError> {
    if n == 0 || c == 0 || !c.is_multiple_of(n) {
        return Err(AttentionError::Indivisible { c, n });
    }
    Ok(c / n)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(scores: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn attention_forward(
    x: &ArrayView1<f64>,
    params: &AttentionParams,
) -> Result<(Array1<f64>, AttentionTrace), AttentionError> {
    let c = params.feature_dim();
    if x.len() != c {
        return Err(AttentionError::DimensionMismatch {
            expected: c,
            got: x.len(),
        });
    }
    let theta = params.w_theta.dot(x);
    let phi = params.w_phi.dot(x);
    let g = params.w_g.dot(x);
    let d = theta.len();
    let similarity = Array2::from_shape_fn((d, d), |(i, j)| theta[i] * phi[j]);
    let weights = softmax_rows(&similarity.view());
    let attended = weights.dot(&g);
    let out = params.w_alpha.dot(&attended) + x;
    Ok((
        out,
        AttentionTrace {
            theta,
            phi,
            g,
            similarity,
            weights,
            attended,
        },
    ))
}

/// Back-propagates `grad_out` (gradient of a scalar w.r.t. the block output).
pub fn attention_backward(
    x: &ArrayView1<f64>,
    params: &AttentionParams,
    trace: &AttentionTrace,
    grad_out: &ArrayView1<f64>,
) -> AttentionGrads {
    let outer = |a: &Array1<f64>, b: &ArrayView1<f64>| {
        Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
    };
    let w_alpha = outer(&grad_out.to_owned(), &trace.attended.view());
    let d_att = params.w_alpha.t().dot(grad_out);

    let a = &trace.weights;
    // dL/dA_ij = dy_i g_j
    let d_weights = outer(&d_att, &trace.g.view());
    let d_g = a.t().dot(&d_att);
    // softmax Jacobian, row by row
    let mut d_sim = Array2::zeros(a.dim());
    for i in 0..a.nrows() {
        let row = a.row(i);
        let drow = d_weights.row(i);
        let inner = row.dot(&drow);
        for j in 0..a.ncols() {
            d_sim[[i, j]] = row[j] * (drow[j] - inner);
        }
    }
    let d_theta = d_sim.dot(&trace.phi);
    let d_phi = d_sim.t().dot(&trace.theta);

    let dx = grad_out.to_owned()
        + params.w_theta.t().dot(&d_theta)
        + params.w_phi.t().dot(&d_phi)
        + params.w_g.t().dot(&d_g);

    AttentionGrads {
        x: dx,
        params: AttentionParams {
            w_theta: outer(&d_theta, x),
            w_phi: outer(&d_phi, x),
            w_g: outer(&d_g, x),
            w_alpha,
        },
    }
}

/// Relative discrepancy used by the gradient harness: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_discrepancy(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn param_entry(p: &mut AttentionParams, k: usize, idx: usize) -> &mut f64 {
    let m = p.tensors_mut().into_iter().nth(k).expect("four tensors");
    &mut m.as_slice_mut().expect("standard layout")[idx]
}

/// Compares analytic gradients of the probe `probe · out` against central
/// finite differences with step `h`, over `x` and all four weight matrices.
///
/// Returns the largest [`relative_discrepancy`] found.
pub fn attention_backward_check(
    x: &ArrayView1<f64>,
    params: &AttentionParams,
    probe: &ArrayView1<f64>,
    h: f64,
) -> Result<f64, AttentionError> {
    assert!((1e-7..=1e-3).contains(&h), "perturbation out of range");
    let objective = |x: &ArrayView1<f64>, p: &AttentionParams| -> Result<f64, AttentionError> {
        Ok(attention_forward(x, p)?.0.dot(probe))
    };
    let (_, trace) = attention_forward(x, params)?;
    let grads = attention_backward(x, params, &trace, probe);

    let mut worst = 0.0f64;
    let mut xp = x.to_owned();
    for i in 0..xp.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = objective(&xp.view(), params)?;
        xp[i] = orig - h;
        let fm = objective(&xp.view(), params)?;
        xp[i] = orig;
        worst = worst.max(relative_discrepancy(grads.x[i], (fp - fm) / (2.0 * h)));
    }

    let mut pp = params.clone();
    let analytic = grads.params.tensors();
    for (k, (_, ga)) in analytic.iter().enumerate() {
        for (idx, &a) in ga.iter().enumerate() {
            let orig = *param_entry(&mut pp, k, idx);
            *param_entry(&mut pp, k, idx) = orig + h;
            let fp = objective(x, &pp)?;
            *param_entry(&mut pp, k, idx) = orig - h;
            let fm = objective(x, &pp)?;
            *param_entry(&mut pp, k, idx) = orig;
            worst = worst.max(relative_discrepancy(a, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(c: usize, n: usize, seed: u64) -> (Array1<f64>, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(c, n, &mut rng).unwrap();
        let x = Array::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
        (x, params)
    }

    #[test]
    fn zero_alpha_is_identity() {
        let (x, mut params) = random_instance(32, 8, 1);
        params.w_alpha.fill(0.0);
        let (out, _) = attention_forward(&x.view(), &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn worked_example() {
        let select = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let params = AttentionParams {
            w_theta: select.clone(),
            w_phi: select.clone(),
            w_g: select.clone(),
            w_alpha: select.t().to_owned(),
        };
        let x = array![1.0, 1.0, 0.0, 0.0];
        let (out, trace) = attention_forward(&x.view(), &params).unwrap();
        assert_eq!(trace.similarity, array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(trace.weights, array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(trace.attended, array![1.0, 1.0]);
        assert_eq!(out, array![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            AttentionParams::zeros(30, 8),
            Err(AttentionError::Indivisible { c: 30, n: 8 })
        ));
        let params = AttentionParams::zeros(16, 8).unwrap();
        let x = Array1::zeros(8);
        assert!(matches!(
            attention_forward(&x.view(), &params),
            Err(AttentionError::DimensionMismatch {
                expected: 16,
                got: 8
            })
        ));
    }

    #[test]
    fn rows_are_stochastic() {
        let (x, params) = random_instance(64, 8, 7);
        let (_, trace) = attention_forward(&x.view(), &params).unwrap();
        for row in trace.weights.rows() {
            // direct summation oracle
            let mut s = 0.0;
            for &w in row {
                assert!((0.0..=1.0).contains(&w));
                s += w;
            }
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let (x, params) = random_instance(32, 8, 3);
        let (_, trace) = attention_forward(&x.view(), &params).unwrap();
        let mut shifted = trace.similarity.clone();
        shifted.row_mut(2).mapv_inplace(|v| v + 17.5);
        let w = softmax_rows(&shifted.view());
        for (a, b) in w.iter().zip(trace.weights.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_alpha_gradient_is_residual_only() {
        let (x, mut params) = random_instance(32, 8, 5);
        params.w_alpha.fill(0.0);
        let probe = Array1::ones(32);
        let (_, trace) = attention_forward(&x.view(), &params).unwrap();
        let g = attention_backward(&x.view(), &params, &trace, &probe.view());
        assert_eq!(g.x, probe);
        // only the residual path remains, so the finite differences see pure rounding
        let d = attention_backward_check(&x.view(), &params, &probe.view(), 1e-5).unwrap();
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let (x, params) = random_instance(32, 8, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = Array::from_shape_simple_fn(32, || rng.random_range(-1.0..1.0));
            let lin = attention_backward_check(&x.view(), &params, &probe.view(), 1e-5).unwrap();
            assert!(lin < 1e-4, "linear probe seed {seed}: {lin}");
            let ones = Array1::ones(32);
            let sum = attention_backward_check(&x.view(), &params, &ones.view(), 1e-5).unwrap();
            assert!(sum < 1e-4, "sum probe seed {seed}: {sum}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shape_is_preserved(n in 1usize..5, d in 1usize..6, seed in 0u64..1000) {
            let (x, params) = random_instance(n * d, n, seed);
            let (out, trace) = attention_forward(&x.view(), &params).unwrap();
            prop_assert_eq!(out.len(), n * d);
            prop_assert_eq!(trace.weights.dim(), (d, d));
        }
    }
}
