//! The SeqMF model.
//!
//! Relevance of app `i` for user `u` during training is
//! `r_i = q_i·p_u + Σ_j S_ij q_i·q_j`, where `S` holds the user's relative
//! transition frequencies (row = source app, column = following app). At
//! inference the transition term is replaced by `q_i·Σ_{k∈recent} q_k`.
//! The loss is the confidence-weighted squared error against the binary
//! launch vector plus an L2 penalty on all embeddings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;

/// App embeddings, one row per app (`N x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings(pub Array2<f64>);

/// A user's embedding (length `d`). Lives on the device only.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Array1<f64>);

/// Read access to app embedding rows.
pub trait ItemRows {
    fn dim(&self) -> usize;
    fn item(&self, i: usize) -> ArrayView1<'_, f64>;
}

impl ItemEmbeddings {
    pub fn zeros(n_items: usize, dim: usize) -> Self {
        ItemEmbeddings(Array2::zeros((n_items, dim)))
    }

    /// I.i.d. uniform entries in `[-scale, scale]`.
    pub fn random(n_items: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        ItemEmbeddings(Array2::from_shape_simple_fn((n_items, dim), || {
            rng.random_range(-scale..=scale)
        }))
    }

    pub fn n_items(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Writes a header line `N d` followed by one space-separated row per app.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{} {}", self.n_items(), self.dim())?;
        for row in self.0.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |line: u64, message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| err(1, "missing `N d` header".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(1, format!("bad header: {e}")))?;
        let [n, d] = dims[..] else {
            return Err(err(1, "header must be `N d`".into()));
        };
        let mut q = Array2::zeros((n, d));
        for i in 0..n {
            let line_no = i as u64 + 2;
            let line = lines
                .next()
                .ok_or_else(|| err(line_no, "missing row".into()))??;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(line_no, format!("bad value: {e}")))?;
            if values.len() != d {
                return Err(err(line_no, format!("expected {d} values, found {}", values.len())));
            }
            q.row_mut(i).assign(&Array1::from(values));
        }
        Ok(ItemEmbeddings(q))
    }
}

impl ItemRows for ItemEmbeddings {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn item(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }
}

impl UserEmbedding {
    pub fn zeros(dim: usize) -> Self {
        UserEmbedding(Array1::zeros(dim))
    }

    pub fn random(dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        UserEmbedding(Array1::from_shape_simple_fn(dim, || rng.random_range(-scale..=scale)))
    }
}

/// Sparse row-normalized transition frequencies of one user's history.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    pub fn zeros(n: usize) -> Self {
        TransitionMatrix {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    /// Entry `(i, j)` is the number of immediate transitions `i -> j` divided
    /// by the number of times `i` is followed by anything.
    ///
    /// For `(a,b,c,a,a,b,a,c)` the `a` row is `[1/4, 2/4, 1/4]`.
    pub fn from_history(history: &[usize], n: usize) -> Result<Self> {
        if let Some(&bad) = history.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, bound: n });
        }
        let mut counts: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); n];
        for pair in history.windows(2) {
            *counts[pair[0]].entry(pair[1]).or_default() += 1;
        }
        let rows = counts
            .into_iter()
            .map(|row| {
                let total: u64 = row.values().sum();
                row.into_iter()
                    .map(|(j, c)| (j, c as f64 / total as f64))
                    .collect()
            })
            .collect();
        Ok(TransitionMatrix { n, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzero entries of row `i`, ascending by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// Builds from a dense matrix, keeping the nonzero entries as given.
    pub fn from_dense(m: &Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!("{}x{} is not square", m.nrows(), m.ncols())));
        }
        let rows = m
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect()
            })
            .collect();
        Ok(TransitionMatrix { n: m.nrows(), rows })
    }
}

/// Diagonal of the per-user confidence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceWeights(pub Array1<f64>);

impl ConfidenceWeights {
    /// `c_i = (d_i^γ + α) / (Σ_j d_j^γ + αN)` with `d_i` the launch count of
    /// app `i`; a zero count stays zero for every `γ`, including `γ = 0`.
    pub fn from_history(history: &[usize], alpha: f64, gamma: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::range("alpha", format!("{alpha} is outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::range("gamma", format!("{gamma} is outside [0, 1]")));
        }
        let mut counts = vec![0u64; n];
        for &i in history {
            if i >= n {
                return Err(Error::Index { index: i, bound: n });
            }
            counts[i] += 1;
        }
        let powered: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(gamma) })
            .collect();
        let denom = powered.iter().sum::<f64>() + alpha * n as f64;
        if denom == 0.0 {
            return Err(Error::Numerical(
                "confidence weights undefined for an empty history with alpha = 0".into(),
            ));
        }
        Ok(ConfidenceWeights(
            powered.into_iter().map(|x| (x + alpha) / denom).collect(),
        ))
    }
}

/// Binary launch indicator over all apps.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionVector(pub Array1<f64>);

impl InteractionVector {
    pub fn from_history(history: &[usize], n: usize) -> Result<Self> {
        let mut a = Array1::zeros(n);
        for &i in history {
            if i >= n {
                return Err(Error::Index { index: i, bound: n });
            }
            a[i] = 1.0;
        }
        Ok(InteractionVector(a))
    }
}

/// Apps available on a device, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstalledSet(Vec<usize>);

impl InstalledSet {
    pub fn new(apps: impl IntoIterator<Item = usize>, n: usize) -> Result<Self> {
        let mut v: Vec<usize> = apps.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("installed set is empty".into()));
        }
        if let Some(&bad) = v.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, bound: n });
        }
        Ok(InstalledSet(v))
    }

    pub fn apps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, app: usize) -> bool {
        self.0.binary_search(&app).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Embedding dimension.
    pub dim: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Number of latest in-session apps used by the inference score.
    pub recent_len: usize,
    /// Server learning rate.
    pub beta: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            dim: 32,
            lambda: 1e-3,
            alpha: 0.1,
            gamma: 0.5,
            recent_len: 10,
            beta: 0.05,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::range("dim", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::range("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::range("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::range("gamma", format!("{} is outside [0, 1]", self.gamma)));
        }
        if self.recent_len == 0 {
            return Err(Error::range("recent_len", "must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::range("beta", format!("{} must be > 0", self.beta)));
        }
        Ok(())
    }
}

/// Everything a device derives from its own history for training.
#[derive(Debug, Clone, PartialEq)]
pub struct UserStatistics {
    pub transitions: TransitionMatrix,
    pub confidence: ConfidenceWeights,
    pub interactions: InteractionVector,
}

impl UserStatistics {
    /// With `sequential = false` the transition matrix is all-zero, which
    /// turns the model into plain weighted MF.
    pub fn from_history(
        history: &[usize],
        n: usize,
        alpha: f64,
        gamma: f64,
        sequential: bool,
    ) -> Result<Self> {
        let transitions = if sequential {
            TransitionMatrix::from_history(history, n)?
        } else {
            TransitionMatrix::zeros(n)
        };
        Ok(UserStatistics {
            transitions,
            confidence: ConfidenceWeights::from_history(history, alpha, gamma, n)?,
            interactions: InteractionVector::from_history(history, n)?,
        })
    }
}

fn check_dims(q: &ItemEmbeddings, p: &UserEmbedding, n: usize) -> Result<()> {
    if p.0.len() != q.dim() {
        return Err(Error::Dimension(format!(
            "user embedding has length {}, app embeddings have {} columns",
            p.0.len(),
            q.dim()
        )));
    }
    if n != q.n_items() {
        return Err(Error::Dimension(format!(
            "user data covers {n} apps, app embeddings have {} rows",
            q.n_items()
        )));
    }
    Ok(())
}

/// `h_i = Σ_j S_ij q_i·q_j`, i.e. `diag(S Q Qᵀ)`.
pub fn transition_term(q: &ItemEmbeddings, s: &TransitionMatrix) -> Array1<f64> {
    Array1::from_shape_fn(q.n_items(), |i| {
        let qi = q.0.row(i);
        s.row(i).iter().map(|&(j, w)| w * qi.dot(&q.0.row(j))).sum()
    })
}

/// Training-time relevance `Q p + diag(S Q Qᵀ)` for every app.
pub fn relevance_train(
    q: &ItemEmbeddings,
    p: &UserEmbedding,
    s: &TransitionMatrix,
) -> Result<Array1<f64>> {
    check_dims(q, p, s.n())?;
    Ok(q.0.dot(&p.0) + transition_term(q, s))
}

/// Inference-time relevance `q_i·p + q_i·Σ_{k∈recent} q_k` for each candidate.
///
/// Reads only the rows of `recent` and `candidates`.
pub fn relevance_infer<E: ItemRows + ?Sized>(
    q: &E,
    p: &UserEmbedding,
    recent: &[usize],
    candidates: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate apps to score".into()));
    }
    if p.0.len() != q.dim() {
        return Err(Error::Dimension(format!(
            "user embedding has length {}, app embeddings have {} columns",
            p.0.len(),
            q.dim()
        )));
    }
    let mut context = p.0.clone();
    for &k in recent {
        context += &q.item(k);
    }
    Ok(candidates
        .iter()
        .map(|&i| (i, q.item(i).dot(&context)))
        .collect())
}

/// The `min(len, n)` best-scored apps, best first; ties go to the lower app index.
pub fn toprec(scores: &[(usize, f64)], n: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(i, _)| i).collect()
}

/// One user's contribution to the loss.
#[derive(Debug, Clone, Copy)]
pub struct UserTerm<'a> {
    pub embedding: &'a UserEmbedding,
    pub stats: &'a UserStatistics,
}

/// `½ ‖r − a‖²_C` for one user.
pub fn user_data_loss(
    q: &ItemEmbeddings,
    p: &UserEmbedding,
    stats: &UserStatistics,
) -> Result<f64> {
    let r = relevance_train(q, p, &stats.transitions)?;
    let resid = r - &stats.interactions.0;
    Ok(0.5 * resid.iter().zip(&stats.confidence.0).map(|(e, c)| c * e * e).sum::<f64>())
}

/// `½ Σ_u ‖r_u − a_u‖²_{C_u} + λ/2 (Σ_u ‖p_u‖² + ‖Q‖²_F)`.
pub fn loss(q: &ItemEmbeddings, users: &[UserTerm<'_>], lambda: f64) -> Result<f64> {
    let mut total = 0.5 * lambda * q.0.iter().map(|v| v * v).sum::<f64>();
    for u in users {
        total += user_data_loss(q, u.embedding, u.stats)?;
        total += 0.5 * lambda * u.embedding.0.dot(&u.embedding.0);
    }
    Ok(total)
}

/// `∂loss/∂p_u = Qᵀ C (r − a) + λ p`.
pub fn user_gradient(
    q: &ItemEmbeddings,
    p: &UserEmbedding,
    stats: &UserStatistics,
    lambda: f64,
) -> Result<Array1<f64>> {
    let r = relevance_train(q, p, &stats.transitions)?;
    let weighted = (r - &stats.interactions.0) * &stats.confidence.0;
    Ok(q.0.t().dot(&weighted) + lambda * &p.0)
}

/// Closed-form minimizer of the user's loss block:
/// `p = (Qᵀ C Q + λI)⁻¹ Qᵀ C (a − h)`.
pub fn als_user_update(
    q: &ItemEmbeddings,
    stats: &UserStatistics,
    lambda: f64,
) -> Result<UserEmbedding> {
    let n = q.n_items();
    if stats.interactions.0.len() != n || stats.confidence.0.len() != n || stats.transitions.n() != n {
        return Err(Error::Dimension("user statistics do not match app embeddings".into()));
    }
    let c = &stats.confidence.0;
    let weighted_q = &q.0 * &c.view().insert_axis(Axis(1));
    let mut normal = q.0.t().dot(&weighted_q);
    normal.diag_mut().iter_mut().for_each(|v| *v += lambda);
    let target = &stats.interactions.0 - &transition_term(q, &stats.transitions);
    let rhs = weighted_q.t().dot(&target);
    solve_spd(&normal, &rhs).map(UserEmbedding)
}

/// Per-user item gradient `F(u) = D e pᵀ + (D S + Sᵀ D) Q` with
/// `D = diag(C (r − a))`. Regularization is not included.
pub fn local_gradient(
    q: &ItemEmbeddings,
    p: &UserEmbedding,
    stats: &UserStatistics,
) -> Result<Array2<f64>> {
    let r = relevance_train(q, p, &stats.transitions)?;
    let weights = (r - &stats.interactions.0) * &stats.confidence.0;
    let s = &stats.transitions;
    let mut grad = Array2::zeros(q.0.raw_dim());
    for i in 0..q.n_items() {
        let di = weights[i];
        let mut row = grad.row_mut(i);
        if di != 0.0 {
            row.scaled_add(di, &p.0);
        }
        for &(j, w) in s.row(i) {
            // (D S Q)_i
            row.scaled_add(di * w, &q.0.row(j));
        }
    }
    // (Sᵀ D Q)_j
    for i in 0..q.n_items() {
        for &(j, w) in s.row(i) {
            let coef = w * weights[i];
            if coef != 0.0 {
                grad.row_mut(j).scaled_add(coef, &q.0.row(i));
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(history: &[usize], n: usize) -> UserStatistics {
        UserStatistics::from_history(history, n, 0.1, 0.5, true).unwrap()
    }

    #[test]
    fn worked_transition_example() {
        let (a, b, c) = (0, 1, 2);
        let s = TransitionMatrix::from_history(&[a, b, c, a, a, b, a, c], 3).unwrap();
        let expected = array![[0.25, 0.5, 0.25], [0.5, 0.0, 0.5], [1.0, 0.0, 0.0]];
        assert_eq!(s.to_dense(), expected);
    }

    #[test]
    fn self_loop_and_short_histories() {
        let s = TransitionMatrix::from_history(&[0, 0, 0], 2).unwrap();
        assert_eq!(s.row(0), &[(0, 1.0)]);
        assert_eq!(s.nnz(), 1);
        assert_eq!(TransitionMatrix::from_history(&[1], 2).unwrap().nnz(), 0);
        assert_eq!(TransitionMatrix::from_history(&[], 2).unwrap().nnz(), 0);
        assert!(matches!(
            TransitionMatrix::from_history(&[0, 2], 2),
            Err(Error::Index { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn confidence_examples() {
        let c = ConfidenceWeights::from_history(&[0, 0, 1, 2], 0.0, 1.0, 3).unwrap();
        assert_eq!(c.0, array![0.5, 0.25, 0.25]);
        let c = ConfidenceWeights::from_history(&[0], 1.0, 1.0, 2).unwrap();
        assert_abs_diff_eq!(c.0[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.0[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn confidence_fractional_gamma() {
        // counts (4, 1), alpha 0.1, gamma 0.5: numerators 2.1 and 1.1 over 3.2
        let c = ConfidenceWeights::from_history(&[0, 0, 0, 0, 1], 0.1, 0.5, 2).unwrap();
        assert_abs_diff_eq!(c.0[0], 2.1 / 3.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.0[1], 1.1 / 3.2, epsilon = 1e-15);
    }

    #[test]
    fn confidence_zero_gamma_keeps_unused_apps_at_alpha() {
        let c = ConfidenceWeights::from_history(&[0, 0, 0], 0.5, 0.0, 3).unwrap();
        // d^0: 1 for the used app, 0 otherwise
        assert_abs_diff_eq!(c.0[0], 1.5 / 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c.0[1], 0.5 / 2.5, epsilon = 1e-15);
    }

    #[test]
    fn confidence_errors() {
        assert!(matches!(
            ConfidenceWeights::from_history(&[], 0.0, 1.0, 3),
            Err(Error::Numerical(_))
        ));
        assert!(ConfidenceWeights::from_history(&[], 0.5, 1.0, 3).is_ok());
        assert!(matches!(
            ConfidenceWeights::from_history(&[0], 1.5, 1.0, 3),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn relevance_without_transitions_is_plain_mf() {
        let q = ItemEmbeddings(array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]]);
        let p = UserEmbedding(array![0.3, -0.2]);
        let r = relevance_train(&q, &p, &TransitionMatrix::zeros(3)).unwrap();
        assert_eq!(r, q.0.dot(&p.0));
    }

    #[test]
    fn identity_embeddings_pick_diagonal() {
        let q = ItemEmbeddings(Array2::eye(3));
        let s = TransitionMatrix::from_history(&[0, 0, 1, 2, 2, 1], 3).unwrap();
        let r = relevance_train(&q, &UserEmbedding::zeros(3), &s).unwrap();
        for i in 0..3 {
            assert_eq!(r[i], s.get(i, i));
        }
    }

    #[test]
    fn relevance_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = ItemEmbeddings::random(4, 2, 1.0, &mut rng);
        let p = UserEmbedding::random(2, 1.0, &mut rng);
        let s = TransitionMatrix::from_history(&[0, 1, 3, 2, 0, 3, 3, 1, 0], 4).unwrap();
        let dense = s.to_dense().dot(&q.0).dot(&q.0.t());
        let expected = q.0.dot(&p.0) + dense.diag();
        let r = relevance_train(&q, &p, &s).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(r[i], expected[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn relevance_dimension_mismatch() {
        let q = ItemEmbeddings::zeros(3, 2);
        assert!(matches!(
            relevance_train(&q, &UserEmbedding::zeros(3), &TransitionMatrix::zeros(3)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            relevance_train(&q, &UserEmbedding::zeros(2), &TransitionMatrix::zeros(4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn inference_examples() {
        let q = ItemEmbeddings(array![[2.0], [3.0]]);
        let p = UserEmbedding(array![1.0]);
        let scores = relevance_infer(&q, &p, &[0], &[0, 1]).unwrap();
        assert_eq!(scores, vec![(0, 6.0), (1, 9.0)]);
        let plain = relevance_infer(&q, &p, &[], &[0, 1]).unwrap();
        assert_eq!(plain, vec![(0, 2.0), (1, 3.0)]);
        assert!(relevance_infer(&q, &p, &[], &[]).is_err());
    }

    #[test]
    fn toprec_examples() {
        let scores = [(0, 0.9), (1, 0.1), (2, 0.5)];
        assert_eq!(toprec(&scores, 2), vec![0, 2]);
        assert_eq!(toprec(&[(4, 1.0), (7, 2.0)], 5), vec![7, 4]);
        assert_eq!(toprec(&[(1, 1.0), (0, 1.0)], 1), vec![0]);
    }

    #[test]
    fn loss_degenerate_cases() {
        let n = 3;
        let st = UserStatistics {
            transitions: TransitionMatrix::zeros(n),
            confidence: ConfidenceWeights(Array1::from_elem(n, 1.0 / 3.0)),
            interactions: InteractionVector(Array1::zeros(n)),
        };
        let p = UserEmbedding::zeros(2);
        let users = [UserTerm {
            embedding: &p,
            stats: &st,
        }];
        assert_eq!(loss(&ItemEmbeddings::zeros(n, 2), &users, 0.0).unwrap(), 0.0);
        let q = ItemEmbeddings(array![[1.0, 2.0], [0.0, 1.0], [3.0, 0.0]]);
        // r = Qp = 0 = a, so only the regularizer remains
        assert_abs_diff_eq!(loss(&q, &users, 0.2).unwrap(), 0.1 * 15.0, epsilon = 1e-15);
    }

    #[test]
    fn als_exact_fit_square() {
        let q = ItemEmbeddings(array![[2.0, 1.0], [1.0, 3.0]]);
        let st = UserStatistics {
            transitions: TransitionMatrix::zeros(2),
            confidence: ConfidenceWeights(array![1.0, 1.0]),
            interactions: InteractionVector(array![1.0, 0.0]),
        };
        let p = als_user_update(&q, &st, 0.0).unwrap();
        // Q^-1 a = [3, -1] / 5
        assert_abs_diff_eq!(p.0[0], 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(p.0[1], -0.2, epsilon = 1e-14);
    }

    #[test]
    fn als_singular_without_regularization() {
        let q = ItemEmbeddings(array![[1.0, 1.0], [2.0, 2.0]]);
        let st = stats(&[0, 1], 2);
        assert!(matches!(als_user_update(&q, &st, 0.0), Err(Error::Numerical(_))));
        assert!(als_user_update(&q, &st, 1e-3).is_ok());
    }

    #[test]
    fn als_is_stationary_and_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let q = ItemEmbeddings::random(n, 3, 1.0, &mut rng);
        let history: Vec<usize> = (0..30).map(|_| rng.random_range(0..n)).collect();
        let st = stats(&history, n);
        let lambda = 0.05;
        let p = als_user_update(&q, &st, lambda).unwrap();
        let g = user_gradient(&q, &p, &st, lambda).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let block = |p: &UserEmbedding| {
            user_data_loss(&q, p, &st).unwrap() + 0.5 * lambda * p.0.dot(&p.0)
        };
        let best = block(&p);
        for _ in 0..20 {
            let mut delta = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0f64..1.0));
            delta /= delta.dot(&delta).sqrt() / 1e-3;
            assert!(best <= block(&UserEmbedding(&p.0 + &delta)));
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let q = ItemEmbeddings(array![[1.0], [2.0]]);
        let p = UserEmbedding(array![0.5]);
        let st = UserStatistics {
            transitions: TransitionMatrix::zeros(2),
            confidence: ConfidenceWeights(array![0.5, 0.5]),
            interactions: InteractionVector(array![0.5, 1.0]),
        };
        assert!(local_gradient(&q, &p, &st).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_without_transitions_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = ItemEmbeddings::random(5, 3, 1.0, &mut rng);
        let p = UserEmbedding::random(3, 1.0, &mut rng);
        let st = UserStatistics::from_history(&[0, 2, 2, 4], 5, 0.2, 1.0, false).unwrap();
        let grad = local_gradient(&q, &p, &st).unwrap();
        let weights = (q.0.dot(&p.0) - &st.interactions.0) * &st.confidence.0;
        let outer = weights.view().insert_axis(Axis(1)).dot(&p.0.view().insert_axis(Axis(0)));
        for (x, y) in grad.iter().zip(outer.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradient_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let q = ItemEmbeddings::random(n, 3, 1.0, &mut rng);
        let p = UserEmbedding::random(3, 1.0, &mut rng);
        let history: Vec<usize> = (0..25).map(|_| rng.random_range(0..n)).collect();
        let st = stats(&history, n);
        let s = st.transitions.to_dense();
        let r = q.0.dot(&p.0) + s.dot(&q.0).dot(&q.0.t()).diag();
        let d = Array2::from_diag(&((r - &st.interactions.0) * &st.confidence.0));
        let ones = Array2::<f64>::ones((n, 1));
        let expected = d.dot(&ones).dot(&p.0.view().insert_axis(Axis(0)))
            + (d.dot(&s) + s.t().dot(&d)).dot(&q.0);
        let grad = local_gradient(&q, &p, &st).unwrap();
        for (x, y) in grad.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = ItemEmbeddings::random(4, 3, 1.0, &mut rng);
        q.write_to(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("4 3\n"));
        assert_eq!(ItemEmbeddings::read_from(&path).unwrap(), q);
    }

    #[test]
    fn matrix_file_rejects_short_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.txt");
        std::fs::write(&path, "2 2\n1 2\n3\n").unwrap();
        assert!(matches!(
            ItemEmbeddings::read_from(&path),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn transition_rows_are_distributions(history in prop::collection::vec(0usize..6, 0..40)) {
            let s = TransitionMatrix::from_history(&history, 6).unwrap();
            for i in 0..6 {
                let row = s.row(i);
                if !row.is_empty() {
                    let total: f64 = row.iter().map(|e| e.1).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
                prop_assert!(row.iter().all(|e| e.1 > 0.0 && e.1 <= 1.0));
            }
        }

        #[test]
        fn confidence_is_probability_vector(
            history in prop::collection::vec(0usize..5, 1..30),
            alpha in 0.0f64..=1.0,
            gamma in 0.0f64..=1.0,
        ) {
            let c = ConfidenceWeights::from_history(&history, alpha, gamma, 5).unwrap();
            prop_assert!((c.0.sum() - 1.0).abs() < 1e-12);
            if alpha > 0.0 {
                prop_assert!(c.0.iter().all(|v| *v > 0.0 && *v <= 1.0));
            }
        }

        #[test]
        fn zero_transitions_reduce_to_mf(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = ItemEmbeddings::random(5, 3, 2.0, &mut rng);
            let p = UserEmbedding::random(3, 2.0, &mut rng);
            let r = relevance_train(&q, &p, &TransitionMatrix::zeros(5)).unwrap();
            prop_assert_eq!(r, q.0.dot(&p.0));
        }

        #[test]
        fn toprec_invariant_under_monotone_maps(
            raw in prop::collection::vec(-3i32..3, 1..10),
            n in 1usize..6,
        ) {
            let scores: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, v)| (i, *v as f64)).collect();
            let mapped: Vec<(usize, f64)> = scores.iter().map(|&(i, v)| (i, (v * 0.7).exp() + 3.0)).collect();
            prop_assert_eq!(toprec(&scores, n), toprec(&mapped, n));
        }
    }
}
