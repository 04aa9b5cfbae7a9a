//! Desk-scale synthetic app-usage streams.
//!
//! Apps live in a shared latent space; each user installs a random subset,
//! has a popularity prior over it and moves between apps by a Markov chain
//! whose transition weights favour apps close in the latent space, and
//! re-launches the current app with a fixed probability. A user's taste,
//! and with it the popularity prior, drifts between sessions. Sessions
//! end after a geometric number of launches and the next session starts from
//! the popularity prior after an idle gap longer than the session threshold.
//! Optionally some installed apps are only adopted partway through the
//! stream and cannot be launched before.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Event, EventLog, SECONDS_PER_DAY};
use crate::error::{Error, Result};

const BASE_EPOCH: i64 = 1_546_300_800; // 2019-01-01T00:00:00Z

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub apps: usize,
    /// Dimension of the latent space the generator draws apps from.
    pub latent_dim: usize,
    pub steps_per_user: usize,
    pub seed: u64,
    /// Draw every launch from the popularity prior (no sequential signal).
    pub memoryless: bool,
    /// Sharpness of the latent-space transition kernel.
    pub affinity: f64,
    /// Probability that the next launch in a session repeats the current app.
    pub repeat: f64,
    /// Sharpness of the per-user popularity prior.
    pub popularity: f64,
    /// Size of the random-walk step applied to a user's taste after each session.
    pub drift: f64,
    /// Fraction of each user's installed apps (beyond the first two) that
    /// are adopted at a uniformly drawn point of the stream instead of at the start.
    pub adoption: f64,
    /// Mean number of launches per session.
    pub mean_session_len: f64,
    /// Users start on a uniformly drawn day in `0..start_spread_days`.
    pub start_spread_days: u32,
}

impl SyntheticConfig {
    pub fn new(users: usize, apps: usize, latent_dim: usize, steps_per_user: usize, seed: u64) -> Self {
        SyntheticConfig {
            users,
            apps,
            latent_dim,
            steps_per_user,
            seed,
            memoryless: false,
            affinity: 4.0,
            repeat: 0.4,
            popularity: 1.5,
            drift: 0.0,
            adoption: 0.0,
            mean_session_len: 8.0,
            start_spread_days: 10,
        }
    }
}

/// Ground truth used to generate one user's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGenerator {
    /// Installed apps; the matrices below are indexed by position in this list.
    pub installed: Vec<usize>,
    /// Launch index from which each installed app can be used.
    pub adopted_at: Vec<usize>,
    /// Popularity prior at the first launch, before masking unadopted apps.
    pub popularity: Vec<f64>,
    /// Row-stochastic, without self-loops; empty rows in memoryless mode.
    pub transitions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub log: EventLog,
    pub generators: Vec<UserGenerator>,
}

fn normalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws from `probs` restricted to the adopted entries, falling back to
/// `fallback` when no adopted entry has mass.
fn draw_adopted(rng: &mut impl Rng, probs: &[f64], fallback: &[f64], adopted: &[bool]) -> usize {
    if adopted.iter().all(|&a| a) {
        return draw(rng, probs);
    }
    let masked: Vec<f64> = probs.iter().zip(adopted).map(|(p, &a)| if a { *p } else { 0.0 }).collect();
    let total: f64 = masked.iter().sum();
    if total > 0.0 {
        return draw(rng, &masked.iter().map(|p| p / total).collect::<Vec<_>>());
    }
    draw_adopted(rng, fallback, &vec![1.0; fallback.len()], adopted)
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates a log of exactly `users * steps_per_user` events, deterministic
/// under the seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.users < 2 || config.apps < 2 {
        return Err(Error::Config("synthetic data needs at least 2 users and 2 apps".into()));
    }
    if config.latent_dim == 0 || config.mean_session_len < 1.0 {
        return Err(Error::Config("latent_dim must be >= 1 and mean_session_len >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.repeat) {
        return Err(Error::range("repeat", format!("{} is outside [0, 1)", config.repeat)));
    }
    if !(0.0..=1.0).contains(&config.adoption) {
        return Err(Error::range("adoption", format!("{} is outside [0, 1]", config.adoption)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent: Vec<Vec<f64>> = (0..config.apps)
        .map(|_| unit_gaussian(&mut rng, config.latent_dim))
        .collect();

    let mut generators = Vec::with_capacity(config.users);
    let mut events = Vec::with_capacity(config.users * config.steps_per_user);
    let end_prob = 1.0 / config.mean_session_len;

    for user in 0..config.users {
        let hi = config.apps.min(20);
        let lo = hi.min(5);
        let size = rng.random_range(lo..=hi);
        let mut installed = sample(&mut rng, config.apps, size).into_vec();
        installed.sort_unstable();

        let mut taste = unit_gaussian(&mut rng, config.latent_dim);
        let prior = |taste: &[f64]| {
            let mut p: Vec<f64> = installed
                .iter()
                .map(|&i| (config.popularity * dot(taste, &latent[i])).exp())
                .collect();
            normalize(&mut p);
            p
        };
        let popularity = prior(&taste);
        let mut current = popularity.clone();

        let transitions: Vec<Vec<f64>> = (0..size)
            .map(|a| {
                if config.memoryless || size == 1 {
                    return Vec::new();
                }
                let mut row: Vec<f64> = (0..size)
                    .map(|b| {
                        if a == b {
                            0.0
                        } else {
                            let noise: f64 = rng.random_range(-0.5..0.5);
                            let affinity = dot(&latent[installed[a]], &latent[installed[b]]);
                            (config.affinity * affinity + noise).exp()
                        }
                    })
                    .collect();
                normalize(&mut row);
                row
            })
            .collect();

        let mut adopted_at = vec![0; size];
        if config.adoption > 0.0 {
            // the first two of a random order are available from the start
            for &i in sample(&mut rng, size, size).into_vec().iter().skip(2) {
                if rng.random::<f64>() < config.adoption {
                    adopted_at[i] = rng.random_range(0..config.steps_per_user.max(1));
                }
            }
        }
        let mut adopted: Vec<bool> = adopted_at.iter().map(|&s| s == 0).collect();

        let start_day = if config.start_spread_days > 0 {
            rng.random_range(0..config.start_spread_days) as i64
        } else {
            0
        };
        let mut t = BASE_EPOCH + start_day * SECONDS_PER_DAY + rng.random_range(6 * 3600..20 * 3600);
        let mut state = draw_adopted(&mut rng, &current, &current, &adopted);
        for step in 0..config.steps_per_user {
            for (a, &at) in adopted.iter_mut().zip(&adopted_at) {
                *a |= at == step;
            }
            if !adopted[state] {
                state = draw_adopted(&mut rng, &current, &current, &adopted);
            }
            events.push(Event {
                user,
                app: installed[state],
                timestamp: t,
            });
            if rng.random::<f64>() < end_prob {
                t += rng.random_range(1_800..28_800);
                if config.drift > 0.0 {
                    let step = unit_gaussian(&mut rng, config.latent_dim);
                    taste.iter_mut().zip(&step).for_each(|(x, s)| *x += config.drift * s);
                    let norm = taste.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    taste.iter_mut().for_each(|x| *x /= norm);
                    current = prior(&taste);
                }
                state = draw_adopted(&mut rng, &current, &current, &adopted);
            } else {
                t += rng.random_range(5..=120);
                if config.memoryless || size == 1 {
                    state = draw_adopted(&mut rng, &current, &current, &adopted);
                } else if rng.random::<f64>() >= config.repeat {
                    state = draw_adopted(&mut rng, &transitions[state], &current, &adopted);
                }
            }
        }

        generators.push(UserGenerator {
            installed,
            adopted_at,
            popularity,
            transitions,
        });
    }

    let log = EventLog::from_indexed(events, config.users, config.apps)?;
    Ok(SyntheticData { log, generators })
}
