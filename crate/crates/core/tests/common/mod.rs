//! Dense reference implementations used as independent oracles.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedseq::seqmf::{ConfidenceWeights, InteractionVector, TransitionMatrix, UserStatistics};

/// One user's data in dense form.
#[derive(Debug, Clone)]
pub struct DenseUser {
    pub p: Array1<f64>,
    pub s: Array2<f64>,
    pub c: Array1<f64>,
    pub a: Array1<f64>,
}

impl DenseUser {
    pub fn from_stats(p: &Array1<f64>, stats: &UserStatistics) -> Self {
        DenseUser {
            p: p.clone(),
            s: stats.transitions.to_dense(),
            c: stats.confidence.0.clone(),
            a: stats.interactions.0.clone(),
        }
    }

    pub fn stats(&self) -> UserStatistics {
        UserStatistics {
            transitions: TransitionMatrix::from_dense(&self.s).unwrap(),
            confidence: ConfidenceWeights(self.c.clone()),
            interactions: InteractionVector(self.a.clone()),
        }
    }

    /// `r = Q p + diag(S Q Qᵀ)`.
    pub fn relevance(&self, q: &Array2<f64>) -> Array1<f64> {
        let sqq = self.s.dot(q).dot(&q.t());
        q.dot(&self.p) + sqq.diag()
    }

    pub fn residual_weights(&self, q: &Array2<f64>) -> Array1<f64> {
        (self.relevance(q) - &self.a) * &self.c
    }

    /// `∂/∂Q` of this user's data term.
    pub fn grad_q(&self, q: &Array2<f64>) -> Array2<f64> {
        let w = self.residual_weights(q);
        let outer = w.view().insert_axis(Axis(1)).dot(&self.p.view().insert_axis(Axis(0)));
        let dw = Array2::from_diag(&w);
        outer + dw.dot(&self.s).dot(q) + self.s.t().dot(&dw).dot(q)
    }

    /// `∂/∂p` of this user's full loss block.
    pub fn grad_p(&self, q: &Array2<f64>, lambda: f64) -> Array1<f64> {
        q.t().dot(&self.residual_weights(q)) + lambda * &self.p
    }

    /// Closed-form ALS solution by Gaussian elimination.
    pub fn als(&self, q: &Array2<f64>, lambda: f64) -> Array1<f64> {
        let d = q.ncols();
        let cq = q * &self.c.view().insert_axis(Axis(1));
        let mut a = q.t().dot(&cq) + Array2::<f64>::eye(d) * lambda;
        let h = self.s.dot(q).dot(&q.t()).diag().to_owned();
        let mut b = cq.t().dot(&(&self.a - &h));
        gauss_solve(&mut a, &mut b);
        b
    }
}

pub fn dense_loss(q: &Array2<f64>, users: &[DenseUser], lambda: f64) -> f64 {
    let mut total = 0.5 * lambda * q.iter().map(|v| v * v).sum::<f64>();
    for u in users {
        let e = u.relevance(q) - &u.a;
        total += 0.5 * (&e * &e * &u.c).sum() + 0.5 * lambda * u.p.dot(&u.p);
    }
    total
}

pub fn dense_grad_q(q: &Array2<f64>, users: &[DenseUser], lambda: f64) -> Array2<f64> {
    let mut g = q * lambda;
    for u in users {
        g += &u.grad_q(q);
    }
    g
}

/// Solves `a x = b` in place (partial pivoting); `b` receives `x`.
pub fn gauss_solve(a: &mut Array2<f64>, b: &mut Array1<f64>) {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..n {
                a.swap([col, k], [pivot, k]);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[[row, k]] * b[k];
        }
        b[row] = s / a[[row, row]];
    }
}

/// Random user with a row-stochastic sparse `S` (some rows empty), positive
/// confidences and binary interactions.
pub fn random_user(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DenseUser {
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        if rng.random_bool(0.2) {
            continue;
        }
        let mut row: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 })
            .collect();
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row[rng.random_range(0..n)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        for (j, v) in row.into_iter().enumerate() {
            s[[i, j]] = v / total;
        }
    }
    DenseUser {
        p: Array1::from_shape_fn(d, |_| rng.random_range(-1.0f64..1.0)),
        s,
        c: Array1::from_shape_fn(n, |_| rng.random_range(0.01f64..1.0)),
        a: Array1::from_shape_fn(n, |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }),
    }
}

pub fn random_matrix(n: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
