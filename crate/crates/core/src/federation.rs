//! Single-process simulation of the hybrid federated optimization.
//!
//! Each simulated device owns its history, its statistics and its user
//! embedding, and updates the embedding in closed form (ALS). App embeddings
//! live on the server and move by gradient steps built from client reports.
//! The only thing that crosses from a client to the server is a
//! [`ClientMessage`].

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{
    kharmony_aggregate, kharmony_client, laplace_mechanism, mean_aggregate, normalize_gradient,
    qharmony_client, qharmony_server, Mechanism, PerturbedGradientMessage, PrivacyBudget,
    SignedCoordinate,
};
use crate::seqmf::{
    als_user_update, local_gradient, loss, relevance_infer, Hyperparams, ItemEmbeddings,
    UserEmbedding, UserStatistics, UserTerm,
};

/// Schedule of user-embedding updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every cycle.
    Full,
    /// Only on cycles that also update the app embeddings.
    Rare,
    /// Never; user embeddings keep their random initialization.
    Global,
}

impl Regime {
    pub fn updates_users(self, q_update_cycle: bool) -> bool {
        match self {
            Regime::Full => true,
            Regime::Rare => q_update_cycle,
            Regime::Global => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::Rare => "rare",
            Regime::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// `Q := Q − β G`.
    Gd,
    Momentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Gd,
    Momentum { momentum: f64, velocity: Array2<f64> },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        first: Array2<f64>,
        second: Array2<f64>,
    },
}

/// App embeddings plus optimizer state.
#[derive(Debug, Clone)]
pub struct ServerState {
    q: ItemEmbeddings,
    optimizer: OptimizerState,
    step: u64,
    lambda: f64,
    beta: f64,
}

impl ServerState {
    pub fn new(q: ItemEmbeddings, optimizer: Optimizer, lambda: f64, beta: f64) -> Self {
        let shape = q.0.raw_dim();
        let optimizer = match optimizer {
            Optimizer::Gd => OptimizerState::Gd,
            Optimizer::Momentum { momentum } => OptimizerState::Momentum {
                momentum,
                velocity: Array2::zeros(shape),
            },
            Optimizer::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                first: Array2::zeros(shape),
                second: Array2::zeros(shape),
            },
        };
        ServerState {
            q,
            optimizer,
            step: 0,
            lambda,
            beta,
        }
    }

    pub fn q(&self) -> &ItemEmbeddings {
        &self.q
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `G = F̄ + λQ`.
    pub fn update(&mut self, aggregated: &Array2<f64>) -> Result<()> {
        if aggregated.raw_dim() != self.q.0.raw_dim() {
            return Err(Error::Dimension(format!(
                "aggregated gradient is {:?}, app embeddings are {:?}",
                aggregated.dim(),
                self.q.0.dim()
            )));
        }
        if aggregated.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite aggregated gradient at server step {}",
                self.step + 1
            )));
        }
        let grad = aggregated + &(&self.q.0 * self.lambda);
        self.step += 1;
        let beta = self.beta;
        match &mut self.optimizer {
            OptimizerState::Gd => self.q.0.scaled_add(-beta, &grad),
            OptimizerState::Momentum { momentum, velocity } => {
                *velocity *= *momentum;
                *velocity += &grad;
                self.q.0.scaled_add(-beta, velocity);
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                first,
                second,
            } => {
                let t = self.step as i32;
                first.zip_mut_with(&grad, |m, g| *m = *beta1 * *m + (1.0 - *beta1) * g);
                second.zip_mut_with(&grad, |v, g| *v = *beta2 * *v + (1.0 - *beta2) * g * g);
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                ndarray::Zip::from(&mut self.q.0)
                    .and(&*first)
                    .and(&*second)
                    .for_each(|q, m, v| *q -= beta * (m / c1) / ((v / c2).sqrt() + *eps));
            }
        }
        Ok(())
    }
}

/// Everything a client may send to the server.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    /// Raw gradient `F(u)`; only under the explicit no-privacy mechanism.
    Passthrough(Array2<f64>),
    /// Normalized gradient plus Laplace noise.
    Laplace(Array2<f64>),
    KHarmony(Vec<SignedCoordinate>),
    QHarmony(PerturbedGradientMessage),
}

/// Turns a client's gradient into the message its mechanism transmits.
///
/// For QHarmony the transmitted `f_max` is taken on the client's original
/// gradient scale, so the server's rescaling restores gradient magnitude.
pub fn client_report(
    gradient: &Array2<f64>,
    mechanism: &Mechanism,
    rng: &mut ChaCha8Rng,
) -> Result<ClientMessage> {
    if let Mechanism::Passthrough = mechanism {
        return Ok(ClientMessage::Passthrough(gradient.clone()));
    }
    let (normalized, scale) = normalize_gradient(gradient)?;
    Ok(match *mechanism {
        Mechanism::Passthrough => unreachable!(),
        Mechanism::Laplace { epsilon } => {
            ClientMessage::Laplace(laplace_mechanism(&normalized, epsilon, rng)?)
        }
        Mechanism::KHarmony { epsilon, k } => {
            ClientMessage::KHarmony(kharmony_client(&normalized, PrivacyBudget::new(epsilon, k)?, rng)?)
        }
        Mechanism::QHarmony { epsilon, k, abs_max } => {
            let mut message =
                qharmony_client(&normalized, PrivacyBudget::new(epsilon, k)?, abs_max, rng)?;
            message.f_max *= scale;
            ClientMessage::QHarmony(message)
        }
    })
}

/// Server-side aggregation of one round of messages.
pub fn aggregate(
    messages: Vec<ClientMessage>,
    mechanism: &Mechanism,
    n: usize,
    d: usize,
) -> Result<Array2<f64>> {
    if messages.is_empty() {
        return Err(Error::Config("no client messages to aggregate".into()));
    }
    let wrong = || Error::Config(format!("message does not match mechanism {}", mechanism.name()));
    match *mechanism {
        Mechanism::Passthrough => {
            let mut sum = Array2::zeros((n, d));
            for m in messages {
                let ClientMessage::Passthrough(g) = m else { return Err(wrong()) };
                if g.dim() != (n, d) {
                    return Err(Error::Dimension("client gradient has the wrong shape".into()));
                }
                sum += &g;
            }
            Ok(sum)
        }
        Mechanism::Laplace { .. } => {
            let reports = messages
                .into_iter()
                .map(|m| match m {
                    ClientMessage::Laplace(g) => Ok(g),
                    _ => Err(wrong()),
                })
                .collect::<Result<Vec<_>>>()?;
            mean_aggregate(&reports)
        }
        Mechanism::KHarmony { epsilon, k } => {
            let reports = messages
                .into_iter()
                .map(|m| match m {
                    ClientMessage::KHarmony(r) => Ok(r),
                    _ => Err(wrong()),
                })
                .collect::<Result<Vec<_>>>()?;
            kharmony_aggregate(&reports, n, d, PrivacyBudget::new(epsilon, k)?)
        }
        Mechanism::QHarmony { .. } => {
            let reports = messages
                .into_iter()
                .map(|m| match m {
                    ClientMessage::QHarmony(r) => Ok(r),
                    _ => Err(wrong()),
                })
                .collect::<Result<Vec<_>>>()?;
            qharmony_server(&reports, n, d)
        }
    }
}

/// Derives an independent seed for one (stream, round, client) triple.
pub fn stream_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One simulated device.
#[derive(Debug, Clone)]
pub struct ClientState {
    user: usize,
    n_apps: usize,
    embedding: UserEmbedding,
    history: Vec<usize>,
    stats: Option<UserStatistics>,
}

impl ClientState {
    pub fn new(user: usize, n_apps: usize, embedding: UserEmbedding) -> Self {
        ClientState {
            user,
            n_apps,
            embedding,
            history: Vec::new(),
            stats: None,
        }
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn embedding(&self) -> &UserEmbedding {
        &self.embedding
    }

    pub fn history(&self) -> &[usize] {
        &self.history
    }

    pub fn stats(&self) -> Option<&UserStatistics> {
        self.stats.as_ref()
    }

    /// Appends launches and rebuilds the statistics over the last `window`
    /// launches (all of them when `None`).
    pub fn observe(
        &mut self,
        apps: &[usize],
        hyper: &Hyperparams,
        window: Option<usize>,
        sequential: bool,
    ) -> Result<()> {
        if apps.is_empty() && self.stats.is_some() {
            return Ok(());
        }
        self.history.extend_from_slice(apps);
        if self.history.is_empty() {
            return Ok(());
        }
        let start = window.map_or(0, |w| self.history.len().saturating_sub(w));
        self.stats = Some(UserStatistics::from_history(
            &self.history[start..],
            self.n_apps,
            hyper.alpha,
            hyper.gamma,
            sequential,
        )?);
        Ok(())
    }

    /// Closed-form update of the user embedding against the current `Q`.
    pub fn update_embedding(&mut self, q: &ItemEmbeddings, lambda: f64) -> Result<()> {
        if let Some(stats) = &self.stats {
            self.embedding = als_user_update(q, stats, lambda)?;
        }
        Ok(())
    }

    /// `F(u)` for the current `Q`; `None` without history.
    pub fn gradient(&self, q: &ItemEmbeddings) -> Result<Option<Array2<f64>>> {
        self.stats
            .as_ref()
            .map(|s| local_gradient(q, &self.embedding, s))
            .transpose()
    }

    pub fn report(
        &self,
        q: &ItemEmbeddings,
        mechanism: &Mechanism,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<ClientMessage>> {
        match self.gradient(q)? {
            Some(g) => client_report(&g, mechanism, rng).map(Some),
            None => Ok(None),
        }
    }

    /// On-device scores for `candidates` given the latest session apps.
    pub fn scores(
        &self,
        q: &ItemEmbeddings,
        recent: &[usize],
        candidates: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        relevance_infer(q, &self.embedding, recent, candidates)
    }
}

/// Gradients of the given clients, perturbed and aggregated under `mechanism`.
/// Clients draw from independent streams derived from `seed` and their id.
pub fn collect_gradients(
    clients: &[&ClientState],
    q: &ItemEmbeddings,
    mechanism: &Mechanism,
    seed: u64,
) -> Result<Array2<f64>> {
    if clients.is_empty() {
        return Err(Error::Config("no participating clients in this round".into()));
    }
    let messages: Vec<ClientMessage> = clients
        .par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, c.user() as u64]));
            c.report(q, mechanism, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    aggregate(messages, mechanism, q.n_items(), q.dim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Fraction of eligible clients sampled into each server step.
    pub participation: f64,
    pub mechanism: Mechanism,
    pub optimizer: Optimizer,
    pub regime: Regime,
    /// App embeddings are updated on every `q_period`-th cycle.
    pub q_period: usize,
    /// Server steps per app-embedding update.
    pub server_steps: usize,
    /// Statistics use only the latest launches when set.
    pub history_window: Option<usize>,
    /// `false` zeroes all transition matrices (plain MF).
    pub sequential: bool,
    /// Half-width of the uniform initialization of embeddings.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            participation: 1.0,
            mechanism: Mechanism::Passthrough,
            optimizer: Optimizer::adam(),
            regime: Regime::Full,
            q_period: 1,
            server_steps: 1,
            history_window: None,
            sequential: true,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, n_apps: usize, dim: usize) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::range(
                "participation",
                format!("{} is outside (0, 1]", self.participation),
            ));
        }
        if self.q_period == 0 {
            return Err(Error::range("q_period", "must be at least 1"));
        }
        if self.server_steps == 0 {
            return Err(Error::range("server_steps", "must be at least 1"));
        }
        if self.history_window == Some(0) {
            return Err(Error::range("history_window", "must be at least 1"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::range("init_scale", "must be a finite non-negative number"));
        }
        match self.optimizer {
            Optimizer::Gd => {}
            Optimizer::Momentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::range("momentum", format!("{momentum} is outside [0, 1)")));
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::range("adam", "decays must be in [0, 1) and eps > 0"));
                }
            }
        }
        self.mechanism.validate(n_apps, dim)
    }
}

/// One row of the round log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLogRow {
    pub cycle: usize,
    pub phase: String,
    pub users_active: usize,
    pub mechanism: &'static str,
    pub epsilon: Option<f64>,
    pub grad_inf_norm: Option<f64>,
    pub loss: Option<f64>,
}

impl RoundLogRow {
    pub const HEADER: &'static str = "cycle,phase,users_active,mechanism,epsilon,grad_inf_norm,loss_or_NA";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.cycle,
            self.phase,
            self.users_active,
            self.mechanism,
            opt(self.epsilon),
            opt(self.grad_inf_norm),
            opt(self.loss)
        )
    }
}

/// The whole federation: one server and one client per user.
#[derive(Debug, Clone)]
pub struct Simulator {
    hyper: Hyperparams,
    config: RoundConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    cycle: usize,
    rounds: u64,
    log: Vec<RoundLogRow>,
}

impl Simulator {
    /// Fresh federation. App embeddings start from `initial_q` when given,
    /// otherwise uniformly in `±init_scale`; user embeddings always start
    /// uniformly in `±init_scale`.
    pub fn new(
        n_users: usize,
        n_apps: usize,
        hyper: Hyperparams,
        config: RoundConfig,
        initial_q: Option<ItemEmbeddings>,
    ) -> Result<Self> {
        hyper.validate()?;
        config.validate(n_apps, hyper.dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[config.seed, 0x51]));
        let q = match initial_q {
            Some(q) => {
                if q.n_items() != n_apps || q.dim() != hyper.dim {
                    return Err(Error::Dimension(format!(
                        "initial app embeddings are {}x{}, expected {n_apps}x{}",
                        q.n_items(),
                        q.dim(),
                        hyper.dim
                    )));
                }
                q
            }
            None => ItemEmbeddings::random(n_apps, hyper.dim, config.init_scale, &mut rng),
        };
        let clients = (0..n_users)
            .map(|u| {
                ClientState::new(u, n_apps, UserEmbedding::random(hyper.dim, config.init_scale, &mut rng))
            })
            .collect();
        Ok(Simulator {
            server: ServerState::new(q, config.optimizer, hyper.lambda, hyper.beta),
            hyper,
            config,
            clients,
            cycle: 0,
            rounds: 0,
            log: Vec::new(),
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn config(&self) -> &RoundConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn q(&self) -> &ItemEmbeddings {
        self.server.q()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round_log(&self) -> &[RoundLogRow] {
        &self.log
    }

    /// Number of cycles ingested so far.
    pub fn cycle(&self) -> usize {
        self.cycle
    }

    /// Replaces every user embedding with a fresh random one; histories are kept.
    pub fn reset_user_embeddings(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x52]));
        for c in &mut self.clients {
            c.embedding = UserEmbedding::random(self.hyper.dim, self.config.init_scale, &mut rng);
        }
    }

    /// Replaces the round configuration for subsequent cycles. The server
    /// keeps `Q` but restarts its optimizer state with learning rate `beta`.
    pub fn reconfigure(&mut self, config: RoundConfig, beta: f64) -> Result<()> {
        config.validate(self.q().n_items(), self.q().dim())?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::range("beta", format!("{beta} must be a positive finite number")));
        }
        if config.sequential != self.config.sequential || config.history_window != self.config.history_window {
            return Err(Error::Config(
                "sequential mode and history window cannot change after ingestion".into(),
            ));
        }
        self.hyper.beta = beta;
        self.server = ServerState::new(self.server.q.clone(), config.optimizer, self.hyper.lambda, beta);
        self.config = config;
        Ok(())
    }

    /// ALS update of every client that has history.
    pub fn update_user_embeddings(&mut self) -> Result<()> {
        let q = self.server.q();
        let lambda = self.hyper.lambda;
        self.clients
            .par_iter_mut()
            .try_for_each(|c| c.update_embedding(q, lambda))
    }

    /// Loss over all clients with history.
    pub fn loss(&self) -> Result<f64> {
        let terms: Vec<UserTerm<'_>> = self
            .clients
            .iter()
            .filter_map(|c| {
                c.stats().map(|stats| UserTerm {
                    embedding: c.embedding(),
                    stats,
                })
            })
            .collect();
        loss(self.q(), &terms, self.hyper.lambda)
    }

    /// One server step: sample `U_b` from `eligible`, collect perturbed
    /// gradients, update `Q`.
    pub fn server_round(&mut self, eligible: &[usize]) -> Result<()> {
        let eligible: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&u| self.clients.get(u).is_some_and(|c| c.stats().is_some()))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config("no eligible clients with history for a server round".into()));
        }
        self.rounds += 1;
        let round_seed = stream_seed(&[self.config.seed, 0x53, self.rounds]);
        let chosen: Vec<usize> = if self.config.participation >= 1.0 {
            eligible
        } else {
            let take = ((self.config.participation * eligible.len() as f64).ceil() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
            let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), take)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        let participants: Vec<&ClientState> = chosen.iter().map(|&u| &self.clients[u]).collect();
        let aggregated = collect_gradients(&participants, self.q(), &self.config.mechanism, round_seed)?;
        let inf_norm = aggregated.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.server.update(&aggregated)?;
        let loss = match self.config.mechanism {
            Mechanism::Passthrough => Some(self.loss()?),
            _ => None,
        };
        self.log.push(RoundLogRow {
            cycle: self.cycle,
            phase: "server".into(),
            users_active: chosen.len(),
            mechanism: self.config.mechanism.name(),
            epsilon: self.config.mechanism.epsilon(),
            grad_inf_norm: Some(inf_norm),
            loss,
        });
        Ok(())
    }

    /// Feeds one cycle of new launches (per user, in order) and runs the
    /// regime's schedule: client statistics are rebuilt, user embeddings are
    /// refreshed when the regime allows, and on every `q_period`-th cycle the
    /// server takes `server_steps` gradient steps over the cycle's active
    /// users.
    pub fn ingest_cycle(&mut self, new_events: &BTreeMap<usize, Vec<usize>>) -> Result<()> {
        self.cycle += 1;
        let q_update = self.cycle.is_multiple_of(self.config.q_period);
        let hyper = self.hyper;
        let (window, sequential) = (self.config.history_window, self.config.sequential);
        let bound = self.clients.len();
        for (&user, apps) in new_events {
            let client = self
                .clients
                .get_mut(user)
                .ok_or(Error::Index { index: user, bound })?;
            client.observe(apps, &hyper, window, sequential)?;
        }
        let active: Vec<usize> = new_events
            .iter()
            .filter(|(_, apps)| !apps.is_empty())
            .map(|(&u, _)| u)
            .collect();
        self.log.push(RoundLogRow {
            cycle: self.cycle,
            phase: "local".into(),
            users_active: active.len(),
            mechanism: self.config.mechanism.name(),
            epsilon: self.config.mechanism.epsilon(),
            grad_inf_norm: None,
            loss: None,
        });

        let update_users = self.config.regime.updates_users(q_update);
        if update_users {
            self.update_user_embeddings()?;
        }
        if q_update && !active.is_empty() {
            for step in 0..self.config.server_steps {
                if step > 0 && update_users {
                    self.update_user_embeddings()?;
                }
                self.server_round(&active)?;
            }
            if update_users {
                self.update_user_embeddings()?;
            }
        }
        Ok(())
    }

    /// On-device scores for `user`; only the latest `recent_len` session apps
    /// enter the sequential term, and none for plain MF.
    pub fn scores(&self, user: usize, session: &[usize], candidates: &[usize]) -> Result<Vec<(usize, f64)>> {
        let client = self
            .clients
            .get(user)
            .ok_or(Error::Index { index: user, bound: self.clients.len() })?;
        let recent = if self.config.sequential {
            &session[session.len().saturating_sub(self.hyper.recent_len)..]
        } else {
            &[][..]
        };
        client.scores(self.q(), recent, candidates)
    }
}

/// Groups a stream of events into per-user app sequences.
pub fn group_by_user<'a, I>(events: I) -> BTreeMap<usize, Vec<usize>>
where
    I: IntoIterator<Item = &'a crate::ingest::Event>,
{
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in events {
        out.entry(e.user).or_default().push(e.app);
    }
    out
}
