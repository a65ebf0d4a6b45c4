//! Degree-2 Hermite feature map, prompt embedding and the `psi` helper.
//!
//! Slot ordering for `d` raw coordinates:
//! `[1; x_1..x_d; (x_1^2-1)/sqrt2 .. (x_d^2-1)/sqrt2; x_i x_j (i<j, lexicographic)]`,
//! so the embedding dimension is `1 + d + d(d+1)/2`.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::sampler::Prompt;

/// Which per-token feature map builds the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMap {
    /// The degree-2 Hermite map.
    #[default]
    Quadratic,
    /// `phi(x) = x`, usable only for non-even links.
    Identity,
}

impl FeatureMap {
    pub fn dim(self, d: usize) -> usize {
        match self {
            FeatureMap::Quadratic => embedding_dim(d),
            FeatureMap::Identity => d,
        }
    }

    pub fn apply_into(self, x: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Quadratic => phi_into(x, out),
            FeatureMap::Identity => out.copy_from_slice(x),
        }
    }

    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim(x.len())];
        self.apply_into(x, &mut out);
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Quadratic => "quadratic",
            FeatureMap::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quadratic" => Some(FeatureMap::Quadratic),
            "identity" => Some(FeatureMap::Identity),
            _ => None,
        }
    }
}

pub fn embedding_dim(d: usize) -> usize {
    1 + d + d * (d + 1) / 2
}

/// Which raw coordinates an embedding slot depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Constant,
    Linear(usize),
    Square(usize),
    Cross(usize, usize),
}

impl Slot {
    /// Whether every raw coordinate touched by this slot satisfies `pred`.
    /// The constant slot touches none and returns `false`.
    pub fn touches_only(self, pred: impl Fn(usize) -> bool) -> bool {
        match self {
            Slot::Constant => false,
            Slot::Linear(i) | Slot::Square(i) => pred(i),
            Slot::Cross(i, j) => pred(i) && pred(j),
        }
    }
}

/// Slot layout of the quadratic map for `d` raw coordinates.
pub fn slot_layout(d: usize) -> Vec<Slot> {
    let mut slots = Vec::with_capacity(embedding_dim(d));
    slots.push(Slot::Constant);
    slots.extend((0..d).map(Slot::Linear));
    slots.extend((0..d).map(Slot::Square));
    for i in 0..d {
        for j in i + 1..d {
            slots.push(Slot::Cross(i, j));
        }
    }
    slots
}

/// Write `phi(x)` into `out` (length `embedding_dim(x.len())`).
pub fn phi_into(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), embedding_dim(d));
    out[0] = 1.0;
    out[1..=d].copy_from_slice(x);
    for (o, &xi) in out[d + 1..2 * d + 1].iter_mut().zip(x) {
        *o = (xi * xi - 1.0) * FRAC_1_SQRT_2;
    }
    let mut k = 2 * d + 1;
    for i in 0..d {
        for j in i + 1..d {
            out[k] = x[i] * x[j];
            k += 1;
        }
    }
}

pub fn phi(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; embedding_dim(x.len())];
    phi_into(x, &mut out);
    out
}

/// `[c0; c1 theta; c2 (theta . theta)/sqrt2; c2 theta_i theta_j (i<j)]`.
pub fn psi(theta: &[f64], c0: f64, c1: f64, c2: f64) -> Vec<f64> {
    let d = theta.len();
    let mut out = vec![0.0; embedding_dim(d)];
    out[0] = c0;
    for (o, &t) in out[1..=d].iter_mut().zip(theta) {
        *o = c1 * t;
    }
    for (o, &t) in out[d + 1..2 * d + 1].iter_mut().zip(theta) {
        *o = c2 * t * t * FRAC_1_SQRT_2;
    }
    let mut k = 2 * d + 1;
    for i in 0..d {
        for j in i + 1..d {
            out[k] = c2 * theta[i] * theta[j];
            k += 1;
        }
    }
    out
}

/// Column-major `(d_tilde + 1) x (n + 1)` embedding of a prompt.
///
/// Column `j < n` is `[phi(x_j); y_j]`; the last column is `[phi(query); 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPrompt {
    data: Vec<f64>,
    d_tilde: usize,
    n: usize,
}

impl EmbeddedPrompt {
    /// Build from explicit token columns, each of length `d_tilde + 1`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        assert!(!columns.is_empty(), "an embedding needs at least one token");
        let rows = columns[0].len();
        assert!(rows >= 2 && columns.iter().all(|c| c.len() == rows));
        Self {
            data: columns.concat(),
            d_tilde: rows - 1,
            n: columns.len() - 1,
        }
    }

    pub fn d_tilde(&self) -> usize {
        self.d_tilde
    }

    /// Context length `N`; the embedding has `N + 1` columns.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tokens(&self) -> usize {
        self.n + 1
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let rows = self.d_tilde + 1;
        &self.data[j * rows..(j + 1) * rows]
    }

    pub fn features(&self, j: usize) -> &[f64] {
        &self.column(j)[..self.d_tilde]
    }

    pub fn label(&self, j: usize) -> f64 {
        self.column(j)[self.d_tilde]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d_tilde + 1)
    }
}

pub fn embed_prompt(p: &Prompt, map: FeatureMap) -> EmbeddedPrompt {
    let d_tilde = map.dim(p.d());
    let rows = d_tilde + 1;
    let mut data = vec![0.0; rows * (p.n() + 1)];
    for (j, (x, &y)) in p.xs.iter().zip(&p.ys).enumerate() {
        let col = &mut data[j * rows..(j + 1) * rows];
        map.apply_into(x, &mut col[..d_tilde]);
        col[d_tilde] = y;
    }
    let last = p.n() * rows;
    map.apply_into(&p.query, &mut data[last..last + d_tilde]);
    EmbeddedPrompt {
        data,
        d_tilde,
        n: p.n(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn phi_examples() {
        let s = FRAC_1_SQRT_2;
        assert_eq!(
            phi(&[0.0, 0.0, 0.0]),
            vec![1.0, 0.0, 0.0, 0.0, -s, -s, -s, 0.0, 0.0, 0.0]
        );
        let v = phi(&[1.0, 2.0]);
        let want = [1.0, 1.0, 2.0, 0.0, 3.0 * s, 2.0];
        for (a, b) in v.iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn slot_layout_matches_phi_ordering() {
        let x = [0.3, -1.1, 2.0, 0.7];
        let f = phi(&x);
        let slots = slot_layout(4);
        assert_eq!(slots.len(), f.len());
        for (slot, v) in slots.iter().zip(&f) {
            let want = match *slot {
                Slot::Constant => 1.0,
                Slot::Linear(i) => x[i],
                Slot::Square(i) => (x[i] * x[i] - 1.0) * FRAC_1_SQRT_2,
                Slot::Cross(i, j) => x[i] * x[j],
            };
            assert_abs_diff_eq!(*v, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn psi_constant_only() {
        let v = psi(&[0.4, 0.2, -0.9], 1.0, 0.0, 0.0);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn phi_minus_psi_lives_on_square_block() {
        let x = [0.5, -1.5, 2.5];
        let diff: Vec<f64> = phi(&x)
            .iter()
            .zip(psi(&x, 1.0, 1.0, 1.0))
            .map(|(a, b)| a - b)
            .collect();
        for (k, v) in diff.iter().enumerate() {
            if (4..7).contains(&k) {
                assert_abs_diff_eq!(*v, -FRAC_1_SQRT_2, epsilon = 1e-15);
            } else {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn embed_prompt_layout() {
        let p = Prompt {
            xs: vec![vec![1.0, 2.0]],
            ys: vec![0.5],
            query: vec![-1.0, 0.0],
            query_label: 9.0,
            beta: vec![1.0, 0.0],
        };
        let z = embed_prompt(&p, FeatureMap::Quadratic);
        assert_eq!(z.tokens(), 2);
        assert_eq!(z.d_tilde(), 6);
        assert_eq!(z.label(0), 0.5);
        assert_eq!(z.label(1), 0.0);
        assert_eq!(&z.features(0)[1..3], &[1.0, 2.0]);
        assert_eq!(&z.features(1)[1..3], &[-1.0, 0.0]);
        // the query label never enters Z
        assert!(z.columns().all(|c| !c.contains(&9.0)));
    }

    #[test]
    fn identity_map() {
        assert_eq!(FeatureMap::Identity.dim(5), 5);
        assert_eq!(FeatureMap::Identity.apply(&[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(FeatureMap::parse("quadratic"), Some(FeatureMap::Quadratic));
        assert_eq!(FeatureMap::parse("cubic"), None);
    }
}
