//! Comparison predictors and the interface every evaluated model implements.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::federation::Simulator;

/// A model under evaluation.
pub trait Predictor {
    fn name(&self) -> &str;

    /// Scores `candidates` (one value per candidate, same order) for `user`,
    /// given the apps launched so far in the current session.
    fn score(&mut self, user: usize, session: &[usize], candidates: &[usize]) -> Vec<f64>;

    /// Feeds launches that happened after everything observed before.
    fn observe(&mut self, _user: usize, _apps: &[usize]) {}
}

/// Sparse counts of `source → target` launches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairCounts {
    counts: HashMap<usize, HashMap<usize, u64>>,
}

impl PairCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, source: usize, target: usize) {
        *self.counts.entry(source).or_default().entry(target).or_insert(0) += 1;
    }

    /// Counts every consecutive pair of `apps`, plus `previous → apps[0]`.
    pub fn add_sequence(&mut self, previous: Option<usize>, apps: &[usize]) {
        let mut last = previous;
        for &a in apps {
            if let Some(l) = last {
                self.add(l, a);
            }
            last = Some(a);
        }
    }

    pub fn get(&self, source: usize, target: usize) -> u64 {
        self.counts
            .get(&source)
            .and_then(|row| row.get(&target))
            .copied()
            .unwrap_or(0)
    }

    /// Unnormalized scores: `count(last → i)`; zeros without a last app.
    pub fn score(&self, last: Option<usize>, candidates: &[usize]) -> Vec<f64> {
        match last.and_then(|l| self.counts.get(&l)) {
            Some(row) => candidates
                .iter()
                .map(|c| row.get(c).copied().unwrap_or(0) as f64)
                .collect(),
            None => vec![0.0; candidates.len()],
        }
    }
}

/// The j-th most recent distinct app of the session scores `1/j`.
pub fn mru_score(session: &[usize], candidates: &[usize]) -> Vec<f64> {
    let mut rank: HashMap<usize, usize> = HashMap::new();
    for &a in session.iter().rev() {
        let next = rank.len() + 1;
        rank.entry(a).or_insert(next);
    }
    candidates
        .iter()
        .map(|c| rank.get(c).map_or(0.0, |&j| 1.0 / j as f64))
        .collect()
}

/// Sequential rules over counts pooled across users.
#[derive(Debug, Clone, Default)]
pub struct SequentialRules {
    counts: PairCounts,
    last: HashMap<usize, usize>,
}

impl SequentialRules {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &PairCounts {
        &self.counts
    }
}

impl Predictor for SequentialRules {
    fn name(&self) -> &str {
        "SR"
    }

    fn score(&mut self, _user: usize, session: &[usize], candidates: &[usize]) -> Vec<f64> {
        self.counts.score(session.last().copied(), candidates)
    }

    fn observe(&mut self, user: usize, apps: &[usize]) {
        self.counts.add_sequence(self.last.get(&user).copied(), apps);
        if let Some(&a) = apps.last() {
            self.last.insert(user, a);
        }
    }
}

/// Sequential rules over each user's own counts only.
#[derive(Debug, Clone, Default)]
pub struct OnDeviceSequentialRules {
    users: HashMap<usize, (PairCounts, Option<usize>)>,
}

impl OnDeviceSequentialRules {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self, user: usize) -> Option<&PairCounts> {
        self.users.get(&user).map(|(c, _)| c)
    }
}

impl Predictor for OnDeviceSequentialRules {
    fn name(&self) -> &str {
        "SR-od"
    }

    fn score(&mut self, user: usize, session: &[usize], candidates: &[usize]) -> Vec<f64> {
        match self.users.get(&user) {
            Some((counts, _)) => counts.score(session.last().copied(), candidates),
            None => vec![0.0; candidates.len()],
        }
    }

    fn observe(&mut self, user: usize, apps: &[usize]) {
        let Some(&newest) = apps.last() else { return };
        let (counts, last) = self.users.entry(user).or_default();
        counts.add_sequence(*last, apps);
        *last = Some(newest);
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MostRecentlyUsed;

impl Predictor for MostRecentlyUsed {
    fn name(&self) -> &str {
        "MRU"
    }

    fn score(&mut self, _user: usize, session: &[usize], candidates: &[usize]) -> Vec<f64> {
        mru_score(session, candidates)
    }
}

/// Lifetime launch counts per user.
#[derive(Debug, Clone, Default)]
pub struct MostFrequentlyUsed {
    counts: HashMap<usize, HashMap<usize, u64>>,
}

impl MostFrequentlyUsed {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Predictor for MostFrequentlyUsed {
    fn name(&self) -> &str {
        "MFU"
    }

    fn score(&mut self, user: usize, _session: &[usize], candidates: &[usize]) -> Vec<f64> {
        let row = self.counts.get(&user);
        candidates
            .iter()
            .map(|c| row.and_then(|r| r.get(c)).copied().unwrap_or(0) as f64)
            .collect()
    }

    fn observe(&mut self, user: usize, apps: &[usize]) {
        let row = self.counts.entry(user).or_default();
        for &a in apps {
            *row.entry(a).or_insert(0) += 1;
        }
    }
}

/// I.i.d. uniform scores from a seeded stream.
#[derive(Debug, Clone)]
pub struct RandomPredictor {
    rng: ChaCha8Rng,
}

impl RandomPredictor {
    pub fn new(seed: u64) -> Self {
        RandomPredictor {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Predictor for RandomPredictor {
    fn name(&self) -> &str {
        "Random"
    }

    fn score(&mut self, _user: usize, _session: &[usize], candidates: &[usize]) -> Vec<f64> {
        candidates.iter().map(|_| self.rng.random::<f64>()).collect()
    }
}

/// SeqMF (or MF, when the simulator was built non-sequential) scored on device.
/// Learning happens in the simulator, not through `observe`.
#[derive(Debug, Clone, Copy)]
pub struct FactorizationPredictor<'a> {
    name: &'a str,
    sim: &'a Simulator,
}

impl<'a> FactorizationPredictor<'a> {
    pub fn new(name: &'a str, sim: &'a Simulator) -> Self {
        FactorizationPredictor { name, sim }
    }
}

impl Predictor for FactorizationPredictor<'_> {
    fn name(&self) -> &str {
        self.name
    }

    fn score(&mut self, user: usize, session: &[usize], candidates: &[usize]) -> Vec<f64> {
        // candidate and user indices come from the same log the simulator was built on
        self.sim
            .scores(user, session, candidates)
            .expect("evaluated user and candidates must belong to the trained model")
            .into_iter()
            .map(|(_, s)| s)
            .collect()
    }
}
