//! One-layer selective SSM with `A = -I`.
//!
//! The discretized decay `exp(-softplus(x))` equals `1 - sigmoid(x)` and the
//! injection `1 - exp(-softplus(x))` equals `sigmoid(x)`, so both are
//! evaluated directly as sigmoids: no matrix exponential appears anywhere.
//!
//! Training and evaluation only use [`mamba_scalar`] / [`readout_direction`];
//! the recurrence and closed form are reference paths for cross-checks.

use nalgebra::DMatrix;

use crate::embedding::EmbeddedPrompt;
use crate::error::{Error, Result};
use crate::hermite::{sigmoid, GatingConstants};

/// Simplified parameters: `W_B^T W_C = diag(gamma, 0)` and a gate that only
/// reads the label slot, `w = [0; 1/rho]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams {
    pub gamma: Vec<f64>,
    pub gc: GatingConstants,
}

impl MambaParams {
    pub fn new(gamma: Vec<f64>, gc: GatingConstants) -> Result<Self> {
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gamma must be finite"));
        }
        gc.validate()?;
        Ok(Self { gamma, gc })
    }

    /// Realize the simplified model in the general operator with
    /// `W_B = I` and `W_C = diag(gamma, 0)` (hidden size `d_tilde + 1`).
    pub fn to_general(&self) -> GeneralMambaParams {
        let n = self.gamma.len() + 1;
        let mut w_c = DMatrix::zeros(n, n);
        for (i, g) in self.gamma.iter().enumerate() {
            w_c[(i, i)] = *g;
        }
        let mut w = vec![0.0; n];
        w[n - 1] = 1.0 / self.gc.rho;
        GeneralMambaParams {
            w_b: DMatrix::identity(n, n),
            w_c,
            w,
            b: self.gc.b,
        }
    }
}

/// Dense parameters of the selective SSM. `w_b`, `w_c` are `d_h x (d_tilde+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralMambaParams {
    pub w_b: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl GeneralMambaParams {
    pub fn hidden_dim(&self) -> usize {
        self.w_b.nrows()
    }

    pub fn validate(&self, token_dim: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.w_b.shape() != self.w_c.shape() {
            errs.push(format!(
                "W_B is {:?} but W_C is {:?}",
                self.w_b.shape(),
                self.w_c.shape()
            ));
        }
        if self.w_b.ncols() != token_dim {
            errs.push(format!(
                "W_B has {} columns, tokens have {token_dim} rows",
                self.w_b.ncols()
            ));
        }
        if self.w.len() != token_dim {
            errs.push(format!(
                "gate vector has length {}, expected {token_dim}",
                self.w.len()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn gate_values(&self, z: &EmbeddedPrompt) -> Vec<f64> {
        z.columns()
            .map(|c| sigmoid(c.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b))
            .collect()
    }
}

/// Per-token gate values `sigmoid(y_l / rho + b)`; the query token's label
/// slot is zero so its gate is `sigmoid(b)`.
pub fn gate_values(z: &EmbeddedPrompt, gc: GatingConstants) -> Vec<f64> {
    (0..z.tokens()).map(|l| gc.gate(z.label(l))).collect()
}

/// Lower-triangular gating weights built from per-token gate values.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    /// `weights[(j, l)]` for `j <= l`; zero above the diagonal.
    pub weights: DMatrix<f64>,
    /// `survival[l] = prod_{k<=l} (1 - sigma_k)`.
    pub survival: Vec<f64>,
}

impl GatingWeights {
    pub fn from_gates(sigma: &[f64]) -> Self {
        let n = sigma.len();
        let mut weights = DMatrix::zeros(n, n);
        let mut survival = Vec::with_capacity(n);
        let mut keep = 1.0;
        for l in 0..n {
            let decay = 1.0 - sigma[l];
            for j in 0..l {
                weights[(j, l)] = weights[(j, l - 1)] * decay;
            }
            weights[(l, l)] = sigma[l];
            keep *= decay;
            survival.push(keep);
        }
        Self { weights, survival }
    }

    pub fn get(&self, j: usize, l: usize) -> f64 {
        self.weights[(j, l)]
    }

    /// Largest `|sum_j G_{j,l} + survival_l - 1|` over all `l`.
    pub fn partition_defect(&self) -> f64 {
        (0..self.survival.len())
            .map(|l| {
                let s: f64 = (0..=l).map(|j| self.weights[(j, l)]).sum();
                (s + self.survival[l] - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn gating_weights(z: &EmbeddedPrompt, gc: GatingConstants) -> GatingWeights {
    GatingWeights::from_gates(&gate_values(z, gc))
}

/// Run the per-channel hidden-state recurrence and return every output
/// `o_l` (length `d_tilde + 1`).
pub fn recurrence_forward(z: &EmbeddedPrompt, p: &GeneralMambaParams) -> Result<Vec<Vec<f64>>> {
    let dim = z.d_tilde() + 1;
    p.validate(dim)?;
    if let Some(l) = z.columns().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical(format!("non-finite input at token {l}")));
    }
    let dh = p.hidden_dim();
    let sigma = p.gate_values(z);
    // states[i * dh .. (i+1) * dh] is the hidden state of channel i
    let mut states = vec![0.0; dim * dh];
    let mut outputs = Vec::with_capacity(z.tokens());
    for (l, col) in z.columns().enumerate() {
        let zl = nalgebra::DVectorView::from_slice(col, dim);
        let bz = &p.w_b * zl;
        let cz = &p.w_c * zl;
        let (keep, inject) = (1.0 - sigma[l], sigma[l]);
        let mut out = vec![0.0; dim];
        for (i, o) in out.iter_mut().enumerate() {
            let h = &mut states[i * dh..(i + 1) * dh];
            let mut acc = 0.0;
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = keep * *hk + inject * bz[k] * col[i];
                acc += cz[k] * *hk;
            }
            *o = acc;
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite hidden state at token {l}"
            )));
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// `o_l = sum_{j<=l} G_{j,l} z_j z_j^T W_B^T W_C z_l`, evaluated directly.
pub fn closed_form_outputs(z: &EmbeddedPrompt, p: &GeneralMambaParams) -> Result<Vec<Vec<f64>>> {
    let dim = z.d_tilde() + 1;
    p.validate(dim)?;
    if let Some(l) = z.columns().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical(format!("non-finite input at token {l}")));
    }
    let g = GatingWeights::from_gates(&p.gate_values(z));
    let m = p.w_b.transpose() * &p.w_c;
    let mut outputs = Vec::with_capacity(z.tokens());
    for l in 0..z.tokens() {
        let mv = &m * nalgebra::DVectorView::from_slice(z.column(l), dim);
        let mut out = vec![0.0; dim];
        for j in 0..=l {
            let zj = z.column(j);
            let coef = g.get(j, l) * zj.iter().zip(mv.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (o, v) in out.iter_mut().zip(zj) {
                *o += coef * v;
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Gating weights of every context token onto the final (query) position:
/// `G_{j,N+1}` for `j = 1..N`, via a suffix product in O(N).
pub fn query_weights(z: &EmbeddedPrompt, gc: GatingConstants) -> Vec<f64> {
    let n = z.n();
    let mut out = vec![0.0; n];
    let mut tail = 1.0 - gc.gate(z.label(n));
    for j in (0..n).rev() {
        let s = gc.gate(z.label(j));
        out[j] = s * tail;
        tail *= 1.0 - s;
    }
    out
}

/// Vector `r` with `mamba_scalar = <r, gamma>`:
/// `r = (sum_j G_{j,N+1} y_j phi(x_j)) * phi(query)` elementwise.
pub fn readout_direction(z: &EmbeddedPrompt, gc: GatingConstants) -> Vec<f64> {
    let dt = z.d_tilde();
    let mut ctx = vec![0.0; dt];
    for (j, w) in query_weights(z, gc).into_iter().enumerate() {
        let c = w * z.label(j);
        if c != 0.0 {
            for (a, f) in ctx.iter_mut().zip(z.features(j)) {
                *a += c * f;
            }
        }
    }
    for (a, q) in ctx.iter_mut().zip(z.features(z.n())) {
        *a *= q;
    }
    ctx
}

/// Label coordinate of the final output under the simplified parameters:
/// `sum_j G_{j,N+1} y_j <phi(x_j), gamma * phi(query)>`.
pub fn mamba_scalar(z: &EmbeddedPrompt, p: &MambaParams) -> f64 {
    debug_assert_eq!(p.gamma.len(), z.d_tilde());
    readout_direction(z, p.gc)
        .iter()
        .zip(&p.gamma)
        .map(|(r, g)| r * g)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_prompt(rng: &mut ChaCha8Rng, dt: usize, n: usize) -> EmbeddedPrompt {
        let cols: Vec<Vec<f64>> = (0..=n)
            .map(|l| {
                let mut c: Vec<f64> = (0..=dt).map(|_| rng.random_range(-1.5..1.5)).collect();
                if l == n {
                    c[dt] = 0.0;
                }
                c
            })
            .collect();
        EmbeddedPrompt::from_columns(&cols)
    }

    fn random_general(rng: &mut ChaCha8Rng, dim: usize, dh: usize) -> GeneralMambaParams {
        let mut m = || DMatrix::from_fn(dh, dim, |_, _| rng.random_range(-1.0..1.0));
        let (w_b, w_c) = (m(), m());
        GeneralMambaParams {
            w_b,
            w_c,
            w: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: rng.random_range(-2.0..1.0),
        }
    }

    #[test]
    fn recurrence_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random_prompt(&mut rng, 4, 8);
        let p = random_general(&mut rng, 5, 6);
        let a = recurrence_forward(&z, &p).unwrap();
        let b = closed_form_outputs(&z, &p).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_token_base_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_prompt(&mut rng, 3, 0);
        let p = random_general(&mut rng, 4, 5);
        let o = recurrence_forward(&z, &p).unwrap();
        let z1 = nalgebra::DVector::from_column_slice(z.column(0));
        let s = sigmoid(z1.dot(&nalgebra::DVector::from_column_slice(&p.w)) + p.b);
        let quad = (z1.transpose() * p.w_b.transpose() * &p.w_c * &z1)[(0, 0)];
        for i in 0..4 {
            assert_abs_diff_eq!(o[0][i], s * z1[i] * quad, epsilon = 1e-12);
        }
    }

    #[test]
    fn vanishing_gates_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_prompt(&mut rng, 3, 5);
        let mut p = random_general(&mut rng, 4, 3);
        p.w.iter_mut().for_each(|w| *w = 0.0);
        p.b = -800.0;
        let o = recurrence_forward(&z, &p).unwrap();
        assert!(o.iter().flatten().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn non_finite_state_reports_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random_prompt(&mut rng, 2, 4);
        let mut p = random_general(&mut rng, 3, 2);
        p.w_b[(0, 0)] = f64::MAX;
        p.w_b[(1, 0)] = f64::MAX;
        p.b = 50.0;
        let err = recurrence_forward(&z, &p).unwrap_err();
        assert!(
            matches!(err, Error::Numerical(ref m) if m.contains("token")),
            "{err}"
        );
    }

    #[test]
    fn equal_gates_are_geometric() {
        let g = GatingWeights::from_gates(&[0.3; 6]);
        for l in 0..6 {
            for j in 0..=l {
                assert_abs_diff_eq!(
                    g.get(j, l),
                    0.3 * 0.7f64.powi((l - j) as i32),
                    epsilon = 1e-15
                );
            }
        }
        assert!(g.partition_defect() < 1e-12);
    }

    #[test]
    fn query_gate_is_the_bias() {
        let z = EmbeddedPrompt::from_columns(&[vec![1.0, 2.0, 0.7], vec![0.5, -1.0, 0.0]]);
        let gc = GatingConstants::default();
        assert_eq!(gate_values(&z, gc)[1], sigmoid(gc.b));
    }

    #[test]
    fn scalar_single_context_token() {
        let z = EmbeddedPrompt::from_columns(&[vec![1.0, 2.0, 0.7], vec![0.5, -1.0, 0.0]]);
        let gc = GatingConstants::default();
        let p = MambaParams::new(vec![0.3, -0.4], gc).unwrap();
        let g12 = gc.gate(0.7) * (1.0 - sigmoid(gc.b));
        let want = g12 * 0.7 * (1.0 * 0.3 * 0.5 + 2.0 * 0.4 * 1.0);
        assert_abs_diff_eq!(mamba_scalar(&z, &p), want, epsilon = 1e-15);
    }

    #[test]
    fn scalar_matches_general_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_prompt(&mut rng, 6, 12);
        let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = MambaParams::new(gamma, GatingConstants::default()).unwrap();
        let o = closed_form_outputs(&z, &p.to_general()).unwrap();
        assert_abs_diff_eq!(mamba_scalar(&z, &p), o[12][6], epsilon = 1e-12);
        let zero = MambaParams::new(vec![0.0; 6], p.gc).unwrap();
        assert_eq!(mamba_scalar(&z, &zero), 0.0);
    }
}
