//! Evaluation: iterative revealing within sessions, restricted top-n lists,
//! hierarchically averaged HR/MRR/NDCG, and the static and dynamic harnesses.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    FactorizationPredictor, MostFrequentlyUsed, MostRecentlyUsed, OnDeviceSequentialRules, Predictor,
    RandomPredictor, SequentialRules,
};
use crate::error::{Error, Result};
use crate::federation::{group_by_user, Optimizer, Regime, RoundConfig, RoundLogRow, Simulator};
use crate::ingest::{rebalance_cycles, sessionize, split_static, utc_day, Cycle, EventLog, Session, SplitDays};
use crate::privacy::Mechanism;
use crate::seqmf::{toprec, Hyperparams};

pub const CUTOFFS: [usize; 3] = [1, 3, 5];
const MAX_CUTOFF: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Hr,
    Mrr,
    Ndcg,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Hr, MetricKind::Mrr, MetricKind::Ndcg];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Hr => "HR",
            MetricKind::Mrr => "MRR",
            MetricKind::Ndcg => "NDCG",
        }
    }

    /// Credit for a target found at 1-based `rank`.
    fn credit(self, rank: usize) -> f64 {
        match self {
            MetricKind::Hr => 1.0,
            MetricKind::Mrr => 1.0 / rank as f64,
            MetricKind::Ndcg => 1.0 / ((rank + 1) as f64).log2(),
        }
    }
}

/// One prediction of the iterative revealing scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionEvent {
    pub user: usize,
    pub session: usize,
    pub step: usize,
    pub target: usize,
    /// Best first, no duplicates, at most `min(|A_u|, n)` long.
    pub ranked: Vec<usize>,
}

impl PredictionEvent {
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|&a| a == self.target).map(|i| i + 1)
    }
}

/// Apps each user launched anywhere in the log; stands in for the installed set.
pub fn candidate_sets(log: &EventLog) -> Vec<Vec<usize>> {
    let mut sets = vec![std::collections::BTreeSet::new(); log.n_users()];
    for e in log.events() {
        sets[e.user].insert(e.app);
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Reveals each session app by app; after `k` apps the predictor ranks the
/// user's candidates for app `k + 1`.
pub fn iterate_sessions(
    predictor: &mut dyn Predictor,
    sessions: &[Session],
    candidates: &[Vec<usize>],
    n: usize,
) -> Result<Vec<PredictionEvent>> {
    let mut events = Vec::new();
    for (sid, session) in sessions.iter().enumerate() {
        let cands = candidates
            .get(session.user)
            .ok_or(Error::Index { index: session.user, bound: candidates.len() })?;
        let n_eff = cands.len().min(n);
        for step in 1..session.apps.len() {
            let target = session.apps[step];
            if cands.binary_search(&target).is_err() {
                return Err(Error::Config(format!(
                    "app {target} of user {} is not among the user's candidates",
                    session.user
                )));
            }
            let scores = predictor.score(session.user, &session.apps[..step], cands);
            if scores.len() != cands.len() {
                return Err(Error::Dimension(format!(
                    "{} returned {} scores for {} candidates",
                    predictor.name(),
                    scores.len(),
                    cands.len()
                )));
            }
            let scored: Vec<(usize, f64)> = cands.iter().copied().zip(scores).collect();
            events.push(PredictionEvent {
                user: session.user,
                session: sid,
                step,
                target,
                ranked: toprec(&scored, n_eff),
            });
        }
    }
    Ok(events)
}

/// Mean over events within a session, then over a user's sessions, then over users.
pub fn metric(events: &[PredictionEvent], kind: MetricKind, n: usize) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Config("metric is undefined without prediction events".into()));
    }
    let mut users: BTreeMap<usize, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for e in events {
        let value = match e.rank() {
            Some(r) if r <= n => kind.credit(r),
            _ => 0.0,
        };
        let acc = users.entry(e.user).or_default().entry(e.session).or_insert((0.0, 0));
        acc.0 += value;
        acc.1 += 1;
    }
    let per_user = users.values().map(|sessions| {
        sessions.values().map(|(sum, count)| sum / *count as f64).sum::<f64>() / sessions.len() as f64
    });
    Ok(per_user.sum::<f64>() / users.len() as f64)
}

/// HR, MRR and NDCG at 1, 3 and 5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    values: [[f64; 3]; 3],
}

impl Metrics {
    /// Computes all nine values and checks their identities.
    pub fn from_events(events: &[PredictionEvent]) -> Result<Self> {
        let mut values = [[0.0; 3]; 3];
        for (ki, kind) in MetricKind::ALL.into_iter().enumerate() {
            for (ni, n) in CUTOFFS.into_iter().enumerate() {
                values[ki][ni] = metric(events, kind, n)?;
            }
        }
        let m = Metrics { values };
        m.check_identities()?;
        Ok(m)
    }

    pub fn get(&self, kind: MetricKind, n: usize) -> f64 {
        let ni = CUTOFFS.iter().position(|&c| c == n).expect("cutoff is one of 1, 3, 5");
        self.values[kind as usize][ni]
    }

    pub fn hr5(&self) -> f64 {
        self.get(MetricKind::Hr, 5)
    }

    /// `(kind, n, value)` in table order.
    pub fn iter(&self) -> impl Iterator<Item = (MetricKind, usize, f64)> + '_ {
        MetricKind::ALL
            .into_iter()
            .flat_map(move |k| CUTOFFS.into_iter().map(move |n| (k, n, self.get(k, n))))
    }

    /// `HR@1 = MRR@1 = NDCG@1`, values in `[0, 1]` and non-decreasing in `n`.
    pub fn check_identities(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        let at1: Vec<f64> = MetricKind::ALL.iter().map(|&k| self.get(k, 1)).collect();
        if (at1[0] - at1[1]).abs() > TOL || (at1[0] - at1[2]).abs() > TOL {
            return Err(Error::Numerical(format!("@1 metrics disagree: {at1:?}")));
        }
        for row in &self.values {
            if row.iter().any(|v| !(-TOL..=1.0 + TOL).contains(v)) || row[0] > row[1] + TOL || row[1] > row[2] + TOL {
                return Err(Error::Numerical(format!("metrics out of range or not monotone: {row:?}")));
            }
        }
        Ok(())
    }
}

/// Runs the revealing scheme and reduces to the nine metrics.
pub fn evaluate(predictor: &mut dyn Predictor, sessions: &[Session], candidates: &[Vec<usize>]) -> Result<Metrics> {
    Metrics::from_events(&iterate_sessions(predictor, sessions, candidates, MAX_CUTOFF)?)
}

/// One output row of a metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub environment: &'static str,
    /// `None` for the static test set.
    pub cycle: Option<usize>,
    pub model: String,
    pub metric: MetricKind,
    pub n: usize,
    pub value: f64,
}

impl MetricRecord {
    pub const HEADER: &'static str = "environment,cycle,model,metric,n,value";

    pub fn expand(environment: &'static str, cycle: Option<usize>, model: &str, metrics: &Metrics) -> Vec<Self> {
        metrics
            .iter()
            .map(|(metric, n, value)| MetricRecord {
                environment,
                cycle,
                model: model.to_string(),
                metric,
                n,
                value,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.environment,
            self.cycle.map_or_else(|| "test".to_string(), |c| c.to_string()),
            self.model,
            self.metric.name(),
            self.n,
            self.value
        )
    }
}

pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(MetricRecord::HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Hyperparameter grid for the factorization models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub dim: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        let h = Hyperparams::default();
        HyperGrid {
            dim: vec![16, 32],
            lambda: vec![1e-3, 1e-1],
            beta: vec![h.beta],
            alpha: vec![h.alpha],
            gamma: vec![h.gamma],
        }
    }
}

impl HyperGrid {
    /// A grid holding a single point.
    pub fn single(h: &Hyperparams) -> Self {
        HyperGrid {
            dim: vec![h.dim],
            lambda: vec![h.lambda],
            beta: vec![h.beta],
            alpha: vec![h.alpha],
            gamma: vec![h.gamma],
        }
    }

    /// Cartesian product over `base`, which supplies the untuned fields.
    pub fn points(&self, base: &Hyperparams) -> Result<Vec<Hyperparams>> {
        let mut out = Vec::new();
        for &dim in &self.dim {
            for &lambda in &self.lambda {
                for &beta in &self.beta {
                    for &alpha in &self.alpha {
                        for &gamma in &self.gamma {
                            let h = Hyperparams {
                                dim,
                                lambda,
                                beta,
                                alpha,
                                gamma,
                                ..*base
                            };
                            h.validate()?;
                            out.push(h);
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("hyperparameter grid is empty".into()));
        }
        Ok(out)
    }
}

/// Trains SeqMF (or MF with `sequential = false`) on one batch of per-user
/// histories through the federation loop.
pub fn train_factorization(
    histories: &BTreeMap<usize, Vec<usize>>,
    n_users: usize,
    n_apps: usize,
    hyper: Hyperparams,
    round: &RoundConfig,
    sequential: bool,
) -> Result<Simulator> {
    let config = RoundConfig {
        sequential,
        q_period: 1,
        ..round.clone()
    };
    let mut sim = Simulator::new(n_users, n_apps, hyper, config, None)?;
    sim.ingest_cycle(histories)?;
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticConfig {
    pub split: SplitDays,
    pub grid: HyperGrid,
    /// Untuned hyperparameters (`recent_len`) and fallbacks.
    pub base: Hyperparams,
    /// Training schedule; `server_steps` is the number of training rounds.
    pub round: RoundConfig,
    pub session_gap: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub model: String,
    pub metrics: Metrics,
    /// Selected hyperparameters of the factorization models.
    pub hyper: Option<Hyperparams>,
    /// Training rounds of the refit model; empty for baselines.
    pub round_log: Vec<RoundLogRow>,
}

pub const STATIC_MODELS: [&str; 7] = ["SeqMF", "MF", "SR", "SR-od", "MRU", "MFU", "Random"];

/// Splits `total_days` into train/validation/test day counts by fraction,
/// keeping at least one day in each part.
pub fn split_days_by_fraction(log: &EventLog, train: f64, validation: f64) -> Result<SplitDays> {
    let (Some(first), Some(last)) = (log.events().first(), log.events().last()) else {
        return Err(Error::EmptyLog("<in-memory log>".into()));
    };
    if !(train > 0.0 && validation >= 0.0 && train + validation < 1.0) {
        return Err(Error::range("split", "fractions must satisfy train > 0 and train + validation < 1"));
    }
    let total = (utc_day(last.timestamp) - utc_day(first.timestamp) + 1) as u32;
    if total < 3 {
        return Err(Error::Config(format!("a log spanning {total} days cannot be split three ways")));
    }
    let t = ((train * total as f64).round() as u32).clamp(1, total - 2);
    let v = ((validation * total as f64).round() as u32).clamp(1, total - 1 - t);
    Ok(SplitDays {
        train: t,
        validation: v,
        test: total - t - v,
    })
}

fn baselines(seed: u64) -> Vec<Box<dyn Predictor + Send>> {
    vec![
        Box::new(SequentialRules::new()),
        Box::new(OnDeviceSequentialRules::new()),
        Box::new(MostRecentlyUsed),
        Box::new(MostFrequentlyUsed::new()),
        Box::new(RandomPredictor::new(seed)),
    ]
}

/// Static evaluation: factorization models are tuned on validation HR@5,
/// then every model is fit on train + validation and scored on test.
pub fn run_static(log: &EventLog, config: &StaticConfig) -> Result<Vec<ModelResult>> {
    let split = split_static(log, config.split)?;
    if split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::Config("static split leaves the validation or test set empty".into()));
    }
    let candidates = candidate_sets(log);
    let (n_users, n_apps) = (log.n_users(), log.n_apps());
    let train = group_by_user(split.train.events());
    let val_sessions = sessionize(&split.validation, config.session_gap);
    let test_sessions = sessionize(&split.test, config.session_gap);
    let mut fit_events: Vec<_> = split.train.events().to_vec();
    fit_events.extend_from_slice(split.validation.events());
    let fit = group_by_user(&fit_events);

    let points = config.grid.points(&config.base)?;
    let mut results = Vec::new();
    for (name, sequential) in [("SeqMF", true), ("MF", false)] {
        let scored = points
            .par_iter()
            .map(|h| {
                let sim = train_factorization(&train, n_users, n_apps, *h, &config.round, sequential)?;
                let m = evaluate(&mut FactorizationPredictor::new(name, &sim), &val_sessions, &candidates)?;
                Ok((*h, m.hr5()))
            })
            .collect::<Result<Vec<_>>>()?;
        // first maximum, so ties resolve to grid order
        let best = scored
            .iter()
            .fold(None::<(Hyperparams, f64)>, |acc, &(h, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((h, s)),
            })
            .map(|(h, _)| h)
            .expect("grid is nonempty");
        let sim = train_factorization(&fit, n_users, n_apps, best, &config.round, sequential)?;
        let metrics = evaluate(&mut FactorizationPredictor::new(name, &sim), &test_sessions, &candidates)?;
        results.push(ModelResult {
            model: name.to_string(),
            metrics,
            hyper: Some(best),
            round_log: sim.round_log().to_vec(),
        });
    }
    for mut predictor in baselines(config.round.seed) {
        for (&user, apps) in &fit {
            predictor.observe(user, apps);
        }
        let metrics = evaluate(predictor.as_mut(), &test_sessions, &candidates)?;
        results.push(ModelResult {
            model: predictor.name().to_string(),
            metrics,
            hyper: None,
            round_log: Vec::new(),
        });
    }
    Ok(results)
}

/// Models × (HR, MRR, NDCG) × (1, 3, 5) table.
pub fn static_table(results: &[ModelResult]) -> String {
    let mut out = String::from("model");
    for kind in MetricKind::ALL {
        for n in CUTOFFS {
            let _ = write!(out, ",{}@{n}", kind.name());
        }
    }
    out.push('\n');
    for r in results {
        out.push_str(&r.model);
        for (_, _, v) in r.metrics.iter() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// A model that is evaluated on a cycle and then learns from it.
pub trait OnlineModel: Send {
    fn name(&self) -> &str;
    fn regime(&self) -> Option<Regime> {
        None
    }
    fn evaluate(&mut self, sessions: &[Session], candidates: &[Vec<usize>]) -> Result<Metrics>;
    fn ingest(&mut self, cycle: &BTreeMap<usize, Vec<usize>>) -> Result<()>;
    fn round_log(&self) -> Option<&[RoundLogRow]> {
        None
    }
}

/// A baseline whose learning is `observe`.
pub struct BaselineModel(pub Box<dyn Predictor + Send>);

impl OnlineModel for BaselineModel {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn evaluate(&mut self, sessions: &[Session], candidates: &[Vec<usize>]) -> Result<Metrics> {
        evaluate(self.0.as_mut(), sessions, candidates)
    }

    fn ingest(&mut self, cycle: &BTreeMap<usize, Vec<usize>>) -> Result<()> {
        for (&user, apps) in cycle {
            self.0.observe(user, apps);
        }
        Ok(())
    }
}

/// A factorization model trained by the federation simulator.
pub struct FederatedModel {
    pub name: String,
    pub sim: Simulator,
}

impl OnlineModel for FederatedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn regime(&self) -> Option<Regime> {
        Some(self.sim.config().regime)
    }

    fn evaluate(&mut self, sessions: &[Session], candidates: &[Vec<usize>]) -> Result<Metrics> {
        evaluate(&mut FactorizationPredictor::new(&self.name, &self.sim), sessions, candidates)
    }

    fn ingest(&mut self, cycle: &BTreeMap<usize, Vec<usize>>) -> Result<()> {
        self.sim.ingest_cycle(cycle)
    }

    fn round_log(&self) -> Option<&[RoundLogRow]> {
        Some(self.sim.round_log())
    }
}

/// Evaluate-then-ingest over `cycles`. Returns one entry per cycle and model;
/// `None` where the cycle has no prediction events.
pub fn evaluate_cycles(
    models: &mut [Box<dyn OnlineModel>],
    cycles: &[Cycle],
    candidates: &[Vec<usize>],
    session_gap: i64,
) -> Result<Vec<Vec<Option<Metrics>>>> {
    let mut out = Vec::with_capacity(cycles.len());
    for cycle in cycles {
        let sessions = cycle.sessions(session_gap);
        let has_events = sessions.iter().any(|s| s.len() >= 2);
        let events = group_by_user(cycle.iter_events());
        let row = models
            .par_iter_mut()
            .map(|m| {
                let metrics = if has_events {
                    Some(m.evaluate(&sessions, candidates)?)
                } else {
                    None
                };
                m.ingest(&events)?;
                Ok(metrics)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicConfig {
    /// Target active users per cycle for the rearrangement.
    pub active_users: usize,
    /// Evaluate at most this many cycles after the first.
    pub max_cycles: Option<usize>,
    pub regimes: Vec<Regime>,
    /// Also run MF, SR, SR-od, MRU, MFU and Random.
    pub baselines: bool,
    /// Passthrough training rounds on the first cycle.
    pub pretrain_steps: usize,
    pub session_gap: i64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            active_users: 10,
            max_cycles: None,
            regimes: vec![Regime::Full, Regime::Rare, Regime::Global],
            baselines: true,
            pretrain_steps: 100,
            session_gap: crate::ingest::SESSION_GAP_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub cycle: usize,
    pub model: String,
    pub regime: Regime,
    pub hr5: f64,
    pub delta_hr5_cum: f64,
}

impl PlotRow {
    pub const HEADER: &'static str = "cycle,model,regime,hr5,delta_hr5_cum";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.cycle, self.model, self.regime.name(), self.hr5, self.delta_hr5_cum)
    }
}

pub fn plot_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from(PlotRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct DynamicReport {
    pub records: Vec<MetricRecord>,
    pub plot: Vec<PlotRow>,
    /// Round logs of the federated models, labelled by model name.
    pub round_logs: Vec<(String, Vec<RoundLogRow>)>,
}

impl DynamicReport {
    /// Final cumulative δHR@5 of a SeqMF regime.
    pub fn final_delta(&self, regime: Regime) -> Option<f64> {
        self.plot.iter().rev().find(|r| r.regime == regime).map(|r| r.delta_hr5_cum)
    }

    /// HR@5 per evaluated cycle of a model.
    pub fn hr5_series(&self, model: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.model == model && r.metric == MetricKind::Hr && r.n == 5)
            .map(|r| (r.cycle.unwrap_or(0), r.value))
            .collect()
    }
}

/// Cycles of a dynamic run: the first is for pretraining, at least one more
/// for evaluation.
pub fn dynamic_cycles(log: &EventLog, config: &DynamicConfig) -> Result<Vec<Cycle>> {
    let mut cycles = rebalance_cycles(log, config.active_users)?.cycles;
    if let Some(max) = config.max_cycles {
        cycles.truncate(max + 1);
    }
    if cycles.len() < 2 {
        return Err(Error::Config(format!(
            "dynamic evaluation needs at least 2 cycles, the log yields {}",
            cycles.len()
        )));
    }
    Ok(cycles)
}

/// Trains `Q` with passthrough gradients on the first cycle, then resets the
/// user embeddings and installs `round` for the cycles that follow.
pub fn pretrain(
    first: &Cycle,
    n_users: usize,
    n_apps: usize,
    hyper: Hyperparams,
    round: &RoundConfig,
    steps: usize,
) -> Result<Simulator> {
    let warmup = RoundConfig {
        mechanism: Mechanism::Passthrough,
        optimizer: Optimizer::adam(),
        regime: Regime::Full,
        q_period: 1,
        server_steps: steps.max(1),
        participation: 1.0,
        ..round.clone()
    };
    let mut sim = Simulator::new(n_users, n_apps, hyper, warmup, None)?;
    sim.ingest_cycle(&group_by_user(first.iter_events()))?;
    sim.reset_user_embeddings(round.seed);
    sim.reconfigure(round.clone(), hyper.beta)?;
    Ok(sim)
}

/// Dynamic evaluation: pretrain on cycle 1, then evaluate each later cycle
/// before learning from it. SeqMF runs once per regime and δHR@5 is measured
/// against the Full regime.
pub fn run_dynamic(
    log: &EventLog,
    config: &DynamicConfig,
    hyper: Hyperparams,
    round: &RoundConfig,
) -> Result<DynamicReport> {
    if !config.regimes.contains(&Regime::Full) {
        return Err(Error::Config("dynamic regimes must include full, the δHR@5 reference".into()));
    }
    let cycles = dynamic_cycles(log, config)?;
    let candidates = candidate_sets(log);
    let (n_users, n_apps) = (log.n_users(), log.n_apps());

    let seq = pretrain(&cycles[0], n_users, n_apps, hyper, round, config.pretrain_steps)?;
    let mut models: Vec<Box<dyn OnlineModel>> = Vec::new();
    let mut regimes = config.regimes.clone();
    regimes.dedup();
    for &regime in &regimes {
        let mut sim = seq.clone();
        sim.reconfigure(RoundConfig { regime, ..round.clone() }, hyper.beta)?;
        models.push(Box::new(FederatedModel {
            name: format!("SeqMF/{}", regime.name()),
            sim,
        }));
    }
    if config.baselines {
        let mf_round = RoundConfig {
            sequential: false,
            ..round.clone()
        };
        let mf = pretrain(&cycles[0], n_users, n_apps, hyper, &mf_round, config.pretrain_steps)?;
        models.push(Box::new(FederatedModel {
            name: "MF".into(),
            sim: mf,
        }));
        let first = group_by_user(cycles[0].iter_events());
        for predictor in baselines(round.seed) {
            let mut m = BaselineModel(predictor);
            m.ingest(&first)?;
            models.push(Box::new(m));
        }
    }

    let table = evaluate_cycles(&mut models, &cycles[1..], &candidates, config.session_gap)?;
    let full = regimes.iter().position(|&r| r == Regime::Full).expect("checked above");
    let mut records = Vec::new();
    let mut plot = Vec::new();
    let mut cumulative = vec![0.0; regimes.len()];
    for (row, cycle) in table.iter().zip(&cycles[1..]) {
        let c = cycle.index + 1;
        for (m, metrics) in models.iter().zip(row) {
            if let Some(metrics) = metrics {
                records.extend(MetricRecord::expand("dynamic", Some(c), m.name(), metrics));
            }
        }
        let Some(reference) = row[full] else { continue };
        for (i, &regime) in regimes.iter().enumerate() {
            let hr5 = row[i].expect("all models see the same sessions").hr5();
            cumulative[i] += hr5 - reference.hr5();
            plot.push(PlotRow {
                cycle: c,
                model: "SeqMF".into(),
                regime,
                hr5,
                delta_hr5_cum: cumulative[i],
            });
        }
    }
    let round_logs = models
        .iter()
        .filter_map(|m| m.round_log().map(|log| (m.name().to_string(), log.to_vec())))
        .collect();
    Ok(DynamicReport {
        records,
        plot,
        round_logs,
    })
}

/// HR@5 per cycle of one privacy mechanism, relative to the non-private run.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyRow {
    pub mechanism: &'static str,
    pub epsilon: Option<f64>,
    pub cycle: usize,
    pub hr5: f64,
    pub delta_hr5_cum: f64,
}

impl PrivacyRow {
    pub const HEADER: &'static str = "mechanism,epsilon,cycle,hr5,delta_hr5_cum";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mechanism,
            self.epsilon.map_or_else(|| "NA".to_string(), |e| e.to_string()),
            self.cycle,
            self.hr5,
            self.delta_hr5_cum
        )
    }
}

pub fn privacy_csv(rows: &[PrivacyRow]) -> String {
    let mut out = String::from(PrivacyRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Runs the Full-regime dynamic pipeline once per mechanism from a shared
/// pretrained `Q`, plus a non-private reference run. Rows are grouped by
/// mechanism in input order, the reference first.
pub fn run_privacy(
    log: &EventLog,
    config: &DynamicConfig,
    hyper: Hyperparams,
    round: &RoundConfig,
    mechanisms: &[Mechanism],
) -> Result<Vec<PrivacyRow>> {
    let cycles = dynamic_cycles(log, config)?;
    let candidates = candidate_sets(log);
    let base = RoundConfig {
        regime: Regime::Full,
        ..round.clone()
    };
    let seq = pretrain(&cycles[0], log.n_users(), log.n_apps(), hyper, &base, config.pretrain_steps)?;
    let all: Vec<Mechanism> = std::iter::once(Mechanism::Passthrough)
        .chain(mechanisms.iter().copied())
        .collect();
    let mut models: Vec<Box<dyn OnlineModel>> = Vec::with_capacity(all.len());
    for (i, &mechanism) in all.iter().enumerate() {
        let mut sim = seq.clone();
        sim.reconfigure(RoundConfig { mechanism, ..base.clone() }, hyper.beta)?;
        models.push(Box::new(FederatedModel {
            name: format!("{i}:{}", mechanism.name()),
            sim,
        }));
    }
    let table = evaluate_cycles(&mut models, &cycles[1..], &candidates, config.session_gap)?;
    let mut rows = Vec::new();
    for (i, mechanism) in all.iter().enumerate() {
        let mut cumulative = 0.0;
        for (row, cycle) in table.iter().zip(&cycles[1..]) {
            let (Some(reference), Some(m)) = (row[0], row[i]) else { continue };
            cumulative += m.hr5() - reference.hr5();
            rows.push(PrivacyRow {
                mechanism: mechanism.name(),
                epsilon: mechanism.epsilon(),
                cycle: cycle.index + 1,
                hr5: m.hr5(),
                delta_hr5_cum: cumulative,
            });
        }
    }
    Ok(rows)
}

/// Mean HR@5 over the evaluated cycles of each run, in run order. A run
/// ends where the cycle number stops increasing.
pub fn mean_hr5_by_run(rows: &[PrivacyRow]) -> Vec<(&'static str, Option<f64>, f64)> {
    let mut out: Vec<(&'static str, Option<f64>, f64, usize)> = Vec::new();
    let mut previous = None;
    for r in rows {
        match out.last_mut() {
            Some(last) if previous.is_some_and(|c| r.cycle > c) => {
                last.2 += r.hr5;
                last.3 += 1;
            }
            _ => out.push((r.mechanism, r.epsilon, r.hr5, 1)),
        }
        previous = Some(r.cycle);
    }
    out.into_iter().map(|(m, e, s, n)| (m, e, s / n as f64)).collect()
}
