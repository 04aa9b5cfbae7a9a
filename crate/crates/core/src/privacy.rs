//! Local differential privacy for client-to-server gradient reports.
//!
//! Harmony-family mechanisms sample `k` distinct coordinates of a gradient
//! normalized to `[-1, 1]` and report each as a single random sign with
//! `P[+1] = (f (e^{ε/k} − 1) + e^{ε/k} + 1) / (2 (e^{ε/k} + 1))`.
//! They differ on the server: k-Harmony debiases and averages, QHarmony sums
//! the signs and rescales by the largest reported gradient element over the
//! largest per-coordinate count of positive reports.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total budget `ε` split evenly over `k` reported coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    k: usize,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, k: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::range("epsilon", format!("{epsilon} must be > 0")));
        }
        if k == 0 {
            return Err(Error::range("k", "must be at least 1"));
        }
        Ok(PrivacyBudget { epsilon, k })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn per_coordinate(&self) -> f64 {
        self.epsilon / self.k as f64
    }

    /// Checks `k <= n·d` for an `n x d` gradient.
    pub fn check_shape(&self, n: usize, d: usize) -> Result<()> {
        if self.k > n * d {
            return Err(Error::range(
                "k",
                format!("{} exceeds the {} entries of a {n}x{d} gradient", self.k, n * d),
            ));
        }
        Ok(())
    }
}

/// Probability of reporting `+1` for a coordinate with value `f ∈ [-1, 1]`.
pub fn p_plus(f: f64, eps_per_coordinate: f64) -> f64 {
    let e = eps_per_coordinate.exp();
    if e.is_infinite() {
        return (f + 1.0) / 2.0;
    }
    (f * (e - 1.0) + e + 1.0) / (2.0 * (e + 1.0))
}

/// `E[report] = 2 P[+1] − 1 = f (e^{ε/k} − 1) / (e^{ε/k} + 1)`.
pub fn expected_report(f: f64, eps_per_coordinate: f64) -> f64 {
    f * (eps_per_coordinate / 2.0).tanh()
}

/// One reported coordinate: a sign and its position in the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignedCoordinate {
    pub value: i8,
    pub row: usize,
    pub col: usize,
}

/// What a QHarmony client sends: `k` signed coordinates plus `f_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedGradientMessage {
    pub triples: Vec<SignedCoordinate>,
    pub f_max: f64,
}

/// Scales `f` into `[-1, 1]` by its max-abs entry. An all-zero gradient is
/// returned unchanged with scale 1.
pub fn normalize_gradient(f: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("gradient has non-finite entries".into()));
    }
    let max_abs = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs > f64::MIN_POSITIVE { max_abs } else { 1.0 };
    Ok((f / scale, scale))
}

pub fn denormalize(f_norm: &Array2<f64>, scale: f64) -> Array2<f64> {
    f_norm * scale
}

fn check_normalized(f_norm: &Array2<f64>) -> Result<()> {
    if f_norm.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::range("gradient", "entries must lie in [-1, 1]"));
    }
    Ok(())
}

/// Samples `k` distinct coordinates uniformly and perturbs each to a sign.
/// Shared client side of k-Harmony and QHarmony.
pub fn harmony_perturb(
    f_norm: &Array2<f64>,
    budget: PrivacyBudget,
    rng: &mut impl Rng,
) -> Result<Vec<SignedCoordinate>> {
    let (n, d) = f_norm.dim();
    budget.check_shape(n, d)?;
    check_normalized(f_norm)?;
    let eps = budget.per_coordinate();
    Ok(sample(rng, n * d, budget.k())
        .into_iter()
        .map(|flat| {
            let (row, col) = (flat / d, flat % d);
            let plus = rng.random::<f64>() < p_plus(f_norm[[row, col]], eps);
            SignedCoordinate {
                value: if plus { 1 } else { -1 },
                row,
                col,
            }
        })
        .collect())
}

/// QHarmony client. `f_max` is the signed maximum element of the gradient
/// (or the max absolute element with `abs_max`).
pub fn qharmony_client(
    f_norm: &Array2<f64>,
    budget: PrivacyBudget,
    abs_max: bool,
    rng: &mut impl Rng,
) -> Result<PerturbedGradientMessage> {
    let triples = harmony_perturb(f_norm, budget, rng)?;
    let f_max = if abs_max {
        f_norm.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        f_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(PerturbedGradientMessage { triples, f_max })
}

fn check_coordinate(t: &SignedCoordinate, n: usize, d: usize) -> Result<()> {
    if t.row >= n {
        return Err(Error::Index { index: t.row, bound: n });
    }
    if t.col >= d {
        return Err(Error::Index { index: t.col, bound: d });
    }
    if t.value != 1 && t.value != -1 {
        return Err(Error::range("value", format!("reported value {} is not ±1", t.value)));
    }
    Ok(())
}

/// QHarmony server: `F̄ = max_u f_max(u) / max_ij Z_ij · S` where `S` sums
/// the reported signs and `Z` counts positive reports. Returns zeros when no
/// coordinate received a positive report.
pub fn qharmony_server(
    messages: &[PerturbedGradientMessage],
    n: usize,
    d: usize,
) -> Result<Array2<f64>> {
    if messages.is_empty() {
        return Err(Error::Config("QHarmony aggregation needs at least one message".into()));
    }
    let mut sum = Array2::<f64>::zeros((n, d));
    let mut positives = Array2::<u64>::zeros((n, d));
    for m in messages {
        for t in &m.triples {
            check_coordinate(t, n, d)?;
            sum[[t.row, t.col]] += f64::from(t.value);
            if t.value > 0 {
                positives[[t.row, t.col]] += 1;
            }
        }
    }
    let z_max = positives.iter().copied().max().unwrap_or(0);
    if z_max == 0 {
        return Ok(Array2::zeros((n, d)));
    }
    let f_max = messages.iter().map(|m| m.f_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(sum * (f_max / z_max as f64))
}

/// k-Harmony client: identical perturbation to QHarmony, without `f_max`.
pub fn kharmony_client(
    f_norm: &Array2<f64>,
    budget: PrivacyBudget,
    rng: &mut impl Rng,
) -> Result<Vec<SignedCoordinate>> {
    harmony_perturb(f_norm, budget, rng)
}

/// Per-element factor `(n d / k) (e^{ε/k} + 1) / (e^{ε/k} − 1)` that makes a
/// densified k-Harmony report unbiased.
pub fn kharmony_debias_factor(budget: PrivacyBudget, n: usize, d: usize) -> f64 {
    (n * d) as f64 / budget.k() as f64 / (budget.per_coordinate() / 2.0).tanh()
}

/// Mean of the debiased densified reports; an unbiased estimate of the mean
/// normalized gradient.
pub fn kharmony_aggregate(
    reports: &[Vec<SignedCoordinate>],
    n: usize,
    d: usize,
    budget: PrivacyBudget,
) -> Result<Array2<f64>> {
    if reports.is_empty() {
        return Err(Error::Config("k-Harmony aggregation needs at least one report".into()));
    }
    let mut sum = Array2::<f64>::zeros((n, d));
    for report in reports {
        for t in report {
            check_coordinate(t, n, d)?;
            sum[[t.row, t.col]] += f64::from(t.value);
        }
    }
    let factor = kharmony_debias_factor(budget, n, d) / reports.len() as f64;
    Ok(sum * factor)
}

/// Laplace scale `b = √2 n d / ε`, giving per-element variance `4 n² d² / ε²`.
pub fn laplace_scale(n: usize, d: usize, epsilon: f64) -> f64 {
    std::f64::consts::SQRT_2 * (n * d) as f64 / epsilon
}

pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u != -0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Adds i.i.d. Laplace noise to every element of a normalized gradient.
pub fn laplace_mechanism(
    f_norm: &Array2<f64>,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::range("epsilon", format!("{epsilon} must be > 0")));
    }
    check_normalized(f_norm)?;
    let (n, d) = f_norm.dim();
    let scale = laplace_scale(n, d, epsilon);
    Ok(f_norm.mapv(|v| v + sample_laplace(scale, rng)))
}

/// Plain mean of dense reports.
pub fn mean_aggregate(reports: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("mean aggregation needs at least one report".into()))?;
    let mut sum = Array2::<f64>::zeros(first.raw_dim());
    for r in reports {
        if r.raw_dim() != first.raw_dim() {
            return Err(Error::Dimension("reports have different shapes".into()));
        }
        sum += r;
    }
    Ok(sum / reports.len() as f64)
}

/// Gradient transmission scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    /// No privacy: raw gradients are sent and summed.
    Passthrough,
    Laplace {
        epsilon: f64,
    },
    KHarmony {
        epsilon: f64,
        k: usize,
    },
    QHarmony {
        epsilon: f64,
        k: usize,
        /// Send `max |F|` instead of the signed maximum.
        #[serde(default)]
        abs_max: bool,
    },
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Passthrough => "none",
            Mechanism::Laplace { .. } => "laplace",
            Mechanism::KHarmony { .. } => "kharmony",
            Mechanism::QHarmony { .. } => "qharmony",
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            Mechanism::Passthrough => None,
            Mechanism::Laplace { epsilon }
            | Mechanism::KHarmony { epsilon, .. }
            | Mechanism::QHarmony { epsilon, .. } => Some(epsilon),
        }
    }

    /// Same mechanism with a different total budget.
    pub fn with_epsilon(self, epsilon: f64) -> Self {
        match self {
            Mechanism::Passthrough => Mechanism::Passthrough,
            Mechanism::Laplace { .. } => Mechanism::Laplace { epsilon },
            Mechanism::KHarmony { k, .. } => Mechanism::KHarmony { epsilon, k },
            Mechanism::QHarmony { k, abs_max, .. } => Mechanism::QHarmony { epsilon, k, abs_max },
        }
    }

    pub fn budget(&self) -> Result<Option<PrivacyBudget>> {
        match *self {
            Mechanism::Passthrough => Ok(None),
            Mechanism::Laplace { epsilon } => PrivacyBudget::new(epsilon, 1).map(Some),
            Mechanism::KHarmony { epsilon, k } | Mechanism::QHarmony { epsilon, k, .. } => {
                PrivacyBudget::new(epsilon, k).map(Some)
            }
        }
    }

    /// Validates parameters against an `n x d` gradient.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if let Some(budget) = self.budget()? {
            if matches!(self, Mechanism::KHarmony { .. } | Mechanism::QHarmony { .. }) {
                budget.check_shape(n, d)?;
            }
        }
        Ok(())
    }
}

/// `P[out = y | f] / P[out = y | f']` for one Harmony coordinate.
pub fn coordinate_ratio(f: f64, f_other: f64, y: i8, eps_per_coordinate: f64) -> f64 {
    let prob = |v: f64| {
        let p = p_plus(v, eps_per_coordinate);
        if y > 0 {
            p
        } else {
            1.0 - p
        }
    };
    prob(f) / prob(f_other)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdpReport {
    /// `e^{ε/k}`, the per-coordinate bound.
    pub per_coordinate_bound: f64,
    /// Largest probability ratio over outputs and worst-case inputs.
    pub max_ratio: f64,
    pub worst_output: i8,
    pub worst_inputs: (f64, f64),
    /// `k · ε/k`, the composed budget over all reported coordinates.
    pub total_epsilon: f64,
    pub satisfied: bool,
}

/// Worst-case output-probability ratio of one perturbed coordinate.
///
/// `P[+1 | f]` is affine and increasing in `f`, so for each of the two
/// outputs the ratio is maximized at the endpoints `f, f' ∈ {−1, 1}`.
pub fn ldp_ratio_check(mechanism: &Mechanism) -> Result<LdpReport> {
    let (epsilon, k) = match *mechanism {
        Mechanism::KHarmony { epsilon, k } | Mechanism::QHarmony { epsilon, k, .. } => (epsilon, k),
        _ => {
            return Err(Error::Unsupported(format!(
                "{} has no enumerable per-coordinate output distribution",
                mechanism.name()
            )))
        }
    };
    let budget = PrivacyBudget::new(epsilon, k)?;
    let eps = budget.per_coordinate();
    let candidates = [(1i8, 1.0, -1.0), (-1i8, -1.0, 1.0)];
    let (worst_output, f, f_other, max_ratio) = candidates
        .iter()
        .map(|&(y, f, g)| (y, f, g, coordinate_ratio(f, g, y, eps)))
        .fold((0, 0.0, 0.0, 0.0f64), |best, cur| if cur.3 > best.3 { cur } else { best });
    let bound = eps.exp();
    Ok(LdpReport {
        per_coordinate_bound: bound,
        max_ratio,
        worst_output,
        worst_inputs: (f, f_other),
        total_epsilon: eps * k as f64,
        satisfied: max_ratio <= bound * (1.0 + 1e-12),
    })
}

/// Writes messages as `u,f_max,k` followed by `k` lines `value,row,col`.
pub fn write_messages<W: Write>(
    out: &mut W,
    messages: &[(usize, &PerturbedGradientMessage)],
) -> Result<()> {
    for (user, m) in messages {
        writeln!(out, "{},{},{}", user, m.f_max, m.triples.len())?;
        for t in &m.triples {
            writeln!(out, "{},{},{}", t.value, t.row, t.col)?;
        }
    }
    Ok(())
}

pub fn read_messages<R: BufRead>(input: R) -> Result<Vec<(usize, PerturbedGradientMessage)>> {
    let bad = |line: usize, message: String| Error::Parse {
        path: "<messages>".into(),
        line: line as u64,
        message,
    };
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut out = Vec::new();
    while let Some((no, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [user, f_max, k] = fields[..] else {
            return Err(bad(no, "expected `u,f_max,k`".into()));
        };
        let user: usize = user.parse().map_err(|_| bad(no, format!("bad user `{user}`")))?;
        let f_max: f64 = f_max.parse().map_err(|_| bad(no, format!("bad f_max `{f_max}`")))?;
        let k: usize = k.parse().map_err(|_| bad(no, format!("bad k `{k}`")))?;
        let mut triples = Vec::with_capacity(k);
        for _ in 0..k {
            let (no, line) = lines.next().ok_or_else(|| bad(no, "truncated message".into()))?;
            let line = line?;
            let parsed: Vec<i64> = line
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(no, format!("bad triple `{line}`")))?;
            let [value, row, col] = parsed[..] else {
                return Err(bad(no, "expected `value,row,col`".into()));
            };
            if (value != 1 && value != -1) || row < 0 || col < 0 {
                return Err(bad(no, format!("bad triple `{line}`")));
            }
            triples.push(SignedCoordinate {
                value: value as i8,
                row: row as usize,
                col: col as usize,
            });
        }
        out.push((user, PerturbedGradientMessage { triples, f_max }));
    }
    Ok(out)
}
