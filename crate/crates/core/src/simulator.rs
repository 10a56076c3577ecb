//! Popularity-biased slate simulator.
//!
//! Users belong to one of several types; each type strongly prefers its own
//! subset of the catalog. A user's utilities are the type's block utilities
//! plus per-user Gaussian noise. Responses follow a conditional logit over
//! the slate and a no-click option, so at most one item is clicked per step.
//! Skewing the training mixture towards one type produces logs in which the
//! minority type's items form the long tail.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, PopularityTable, SlateInteraction, SlateStep};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Half-open item range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRange {
    pub start: ItemId,
    pub end: ItemId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTypeConfig {
    pub name: String,
    pub preferred: Vec<ItemRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_items: usize,
    pub user_types: Vec<UserTypeConfig>,
    pub train_mixture: Vec<f64>,
    pub eval_mixture: Vec<f64>,
    pub mu_high: f64,
    pub mu_low: f64,
    /// Per-type, per-item noise added once when the world is built.
    pub type_noise: f64,
    /// Per-user, per-item noise added when a user is drawn.
    pub user_noise: f64,
    pub temperature: f64,
    pub no_click_utility: f64,
    pub session_length: usize,
    pub slate_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::two_types(1_000)
    }
}

impl WorldConfig {
    /// Two user types preferring disjoint halves of the catalog, logged with
    /// an 0.8/0.2 mixture and evaluated with 0.5/0.5.
    pub fn two_types(n_items: usize) -> Self {
        let half = n_items / 2;
        WorldConfig {
            n_items,
            user_types: vec![
                UserTypeConfig {
                    name: "UT1".into(),
                    preferred: vec![ItemRange { start: 0, end: half }],
                },
                UserTypeConfig {
                    name: "UT2".into(),
                    preferred: vec![ItemRange {
                        start: half,
                        end: n_items,
                    }],
                },
            ],
            train_mixture: vec![0.8, 0.2],
            eval_mixture: vec![0.5, 0.5],
            mu_high: 1.0,
            mu_low: -1.0,
            type_noise: 0.0,
            user_noise: 0.5,
            temperature: 1.0,
            no_click_utility: 0.0,
            session_length: 5,
            slate_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_types = self.user_types.len();
        if n_types == 0 {
            return Err(Error::InvalidInput("world needs at least one user type".into()));
        }
        for (name, mix) in [("train_mixture", &self.train_mixture), ("eval_mixture", &self.eval_mixture)] {
            if mix.len() != n_types {
                return Err(Error::InvalidInput(format!(
                    "{name} has {} weights for {n_types} user types",
                    mix.len()
                )));
            }
            if mix.iter().any(|&w| !(w > 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("{name} weights must be positive and sum to 1")));
            }
        }
        for t in &self.user_types {
            let size: usize = t.preferred.iter().map(|r| r.end.saturating_sub(r.start)).sum();
            if size == 0 {
                return Err(Error::InvalidInput(format!("user type {} prefers no items", t.name)));
            }
            if t.preferred.iter().any(|r| r.end > self.n_items || r.start >= r.end) {
                return Err(Error::InvalidInput(format!(
                    "user type {} has a preferred range outside the catalog",
                    t.name
                )));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        if self.slate_size == 0 || self.session_length == 0 {
            return Err(Error::InvalidInput("slate size and session length must be positive".into()));
        }
        if self.slate_size > self.n_items {
            return Err(Error::InvalidInput("slate size exceeds catalog".into()));
        }
        if self.type_noise < 0.0 || self.user_noise < 0.0 {
            return Err(Error::InvalidInput("noise scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Materialized type-level utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    type_utilities: Vec<Vec<f64>>,
    preferred: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user_type: usize,
    pub utilities: Vec<f64>,
}

pub fn init_world(config: WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut r = rng::stream(seed, "world");
    let mut preferred = Vec::with_capacity(config.user_types.len());
    let mut type_utilities = Vec::with_capacity(config.user_types.len());
    for t in &config.user_types {
        let mut mask = vec![false; config.n_items];
        for range in &t.preferred {
            mask[range.start..range.end].iter_mut().for_each(|m| *m = true);
        }
        let utilities = mask
            .iter()
            .map(|&p| {
                let base = if p { config.mu_high } else { config.mu_low };
                base + config.type_noise * rng::standard_normal(&mut r)
            })
            .collect();
        preferred.push(mask);
        type_utilities.push(utilities);
    }
    for a in 0..preferred.len() {
        for b in a + 1..preferred.len() {
            if preferred[a].iter().zip(&preferred[b]).any(|(&x, &y)| x && y) {
                log::warn!(
                    "user types {} and {} have overlapping preferred items",
                    config.user_types[a].name,
                    config.user_types[b].name
                );
            }
        }
    }
    Ok(World {
        config,
        type_utilities,
        preferred,
    })
}

impl World {
    pub fn n_types(&self) -> usize {
        self.type_utilities.len()
    }

    pub fn type_utilities(&self, user_type: usize) -> &[f64] {
        &self.type_utilities[user_type]
    }

    pub fn is_preferred(&self, user_type: usize, item: ItemId) -> bool {
        self.preferred[user_type][item]
    }

    pub fn sample_type(&self, mixture: &[f64], r: &mut Rng) -> usize {
        rng::categorical(r, mixture).expect("validated mixture")
    }

    pub fn sample_user(&self, mixture: &[f64], r: &mut Rng) -> UserState {
        let user_type = self.sample_type(mixture, r);
        let noise = self.config.user_noise;
        let utilities = self.type_utilities[user_type]
            .iter()
            .map(|&u| u + noise * rng::standard_normal(r))
            .collect();
        UserState { user_type, utilities }
    }

    /// Click probabilities for a slate; the last entry is the no-click option.
    pub fn choice_probabilities(&self, user: &UserState, slate: &[ItemId]) -> Vec<f64> {
        let tau = self.config.temperature;
        let mut logits: Vec<f64> = slate.iter().map(|&i| user.utilities[i] / tau).collect();
        logits.push(self.config.no_click_utility / tau);
        crate::nn::graph::softmax(&logits)
    }

    /// One conditional-logit draw over the slate plus no-click.
    pub fn user_choice(&self, user: &UserState, slate: &[ItemId], r: &mut Rng) -> Vec<bool> {
        let probs = self.choice_probabilities(user, slate);
        let pick = rng::categorical(r, &probs).unwrap_or(slate.len());
        (0..slate.len()).map(|i| i == pick).collect()
    }
}

/// Random agent: `n_sessions` episodes with uniformly drawn slates, users
/// sampled from the training mixture.
pub fn run_logging_policy(world: &World, n_sessions: usize, seed: u64) -> Result<Vec<SlateInteraction>> {
    if n_sessions == 0 {
        return Err(Error::InvalidInput("need at least one logged session".into()));
    }
    let cfg = &world.config;
    let mut logs = Vec::with_capacity(n_sessions);
    for episode in 0..n_sessions {
        let mut r = rng::substream(seed, "logging-policy", episode as u64);
        let user = world.sample_user(&cfg.train_mixture, &mut r);
        let mut steps = Vec::with_capacity(cfg.session_length);
        for _ in 0..cfg.session_length {
            let slate = uniform_slate(cfg.n_items, cfg.slate_size, &mut r);
            let clicks = world.user_choice(&user, &slate, &mut r);
            steps.push(SlateStep { slate, clicks });
        }
        logs.push(SlateInteraction {
            user: episode as u64,
            user_type: Some(user.user_type),
            steps,
        });
    }
    Ok(logs)
}

/// `k` distinct items drawn uniformly without replacement.
pub fn uniform_slate(n_items: usize, k: usize, r: &mut Rng) -> Vec<ItemId> {
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        let i = rng::below(r, n_items);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen
}

/// Something that proposes a slate given the session's clicked items so far.
pub trait Agent {
    fn recommend(&self, history: &[ItemId], k: usize) -> Result<Vec<ItemId>>;
}

impl<F> Agent for F
where
    F: Fn(&[ItemId], usize) -> Result<Vec<ItemId>>,
{
    fn recommend(&self, history: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
        self(history, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineScope {
    pub name: String,
    pub sessions: usize,
    pub steps: usize,
    pub clicked_steps: usize,
    pub sessions_with_click: usize,
    /// Percentage of steps with a click.
    pub ctr: f64,
    /// Percentage of sessions with at least one click.
    pub session_ctr: f64,
    /// Mean normalized popularity of recommended items.
    pub arp: f64,
    #[serde(skip)]
    arp_sum: f64,
}

impl OnlineScope {
    fn new(name: impl Into<String>) -> Self {
        OnlineScope {
            name: name.into(),
            sessions: 0,
            steps: 0,
            clicked_steps: 0,
            sessions_with_click: 0,
            ctr: 0.0,
            session_ctr: 0.0,
            arp: 0.0,
            arp_sum: 0.0,
        }
    }

    fn finish(&mut self) {
        if self.steps > 0 {
            self.ctr = 100.0 * self.clicked_steps as f64 / self.steps as f64;
            self.arp = self.arp_sum / self.steps as f64;
        }
        if self.sessions > 0 {
            self.session_ctr = 100.0 * self.sessions_with_click as f64 / self.sessions as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineEvaluation {
    pub overall: OnlineScope,
    pub by_type: Vec<OnlineScope>,
}

/// Runs `agent` against users drawn from `eval_mixture`. Popularity for ARP
/// comes from `pop` (the logged training data).
pub fn run_online_eval(
    world: &World,
    agent: &dyn Agent,
    n_sessions: usize,
    eval_mixture: &[f64],
    pop: &PopularityTable,
    seed: u64,
) -> Result<OnlineEvaluation> {
    let cfg = &world.config;
    if eval_mixture.len() != world.n_types() {
        return Err(Error::InvalidInput("evaluation mixture does not match user types".into()));
    }
    if pop.len() != cfg.n_items {
        return Err(Error::InvalidInput("popularity table does not match the catalog".into()));
    }
    let mut overall = OnlineScope::new("overall");
    let mut by_type: Vec<OnlineScope> = cfg.user_types.iter().map(|t| OnlineScope::new(&t.name)).collect();
    for episode in 0..n_sessions {
        let mut r = rng::substream(seed, "online-eval", episode as u64);
        let user = world.sample_user(eval_mixture, &mut r);
        let mut history = Vec::new();
        let mut any_click = false;
        let mut clicked_steps = 0;
        let mut arp_sum = 0.0;
        for _ in 0..cfg.session_length {
            let slate = agent.recommend(&history, cfg.slate_size)?;
            check_slate(&slate, cfg.slate_size, cfg.n_items)?;
            arp_sum += slate.iter().map(|&i| pop.pops()[i]).sum::<f64>() / slate.len() as f64;
            let clicks = world.user_choice(&user, &slate, &mut r);
            if let Some(pos) = clicks.iter().position(|&c| c) {
                history.push(slate[pos]);
                clicked_steps += 1;
                any_click = true;
            }
        }
        for scope in [&mut overall, &mut by_type[user.user_type]] {
            scope.sessions += 1;
            scope.steps += cfg.session_length;
            scope.clicked_steps += clicked_steps;
            scope.sessions_with_click += usize::from(any_click);
            scope.arp_sum += arp_sum;
        }
    }
    overall.finish();
    by_type.iter_mut().for_each(OnlineScope::finish);
    Ok(OnlineEvaluation { overall, by_type })
}

fn check_slate(slate: &[ItemId], k: usize, n_items: usize) -> Result<()> {
    if slate.len() != k {
        return Err(Error::ContractViolation(format!(
            "agent returned {} items, expected {k}",
            slate.len()
        )));
    }
    if slate.iter().collect::<HashSet<_>>().len() != k {
        return Err(Error::ContractViolation("agent returned duplicate items".into()));
    }
    if let Some(&bad) = slate.iter().find(|&&i| i >= n_items) {
        return Err(Error::ContractViolation(format!("agent returned unknown item {bad}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(noise: f64) -> World {
        let mut cfg = WorldConfig::two_types(10);
        cfg.mu_high = 2.0;
        cfg.mu_low = -2.0;
        cfg.user_noise = noise;
        init_world(cfg, 1).unwrap()
    }

    #[test]
    fn block_utilities_without_noise() {
        let w = small_world(0.0);
        for i in 0..10 {
            assert_eq!(w.type_utilities(0)[i], if i < 5 { 2.0 } else { -2.0 });
            assert_eq!(w.type_utilities(1)[i], if i < 5 { -2.0 } else { 2.0 });
        }
    }

    #[test]
    fn world_is_seeded() {
        let mut cfg = WorldConfig::two_types(20);
        cfg.type_noise = 0.3;
        assert_eq!(init_world(cfg.clone(), 4).unwrap(), init_world(cfg.clone(), 4).unwrap());
        assert_ne!(init_world(cfg.clone(), 4).unwrap(), init_world(cfg, 5).unwrap());
    }

    #[test]
    fn invalid_worlds_rejected() {
        let mut cfg = WorldConfig::two_types(10);
        cfg.user_types[1].preferred = vec![];
        assert!(init_world(cfg, 0).is_err());
        let mut cfg = WorldConfig::two_types(10);
        cfg.train_mixture = vec![0.5, 0.6];
        assert!(init_world(cfg, 0).is_err());
        let mut cfg = WorldConfig::two_types(10);
        cfg.temperature = 0.0;
        assert!(init_world(cfg, 0).is_err());
    }

    #[test]
    fn user_type_frequencies_follow_mixture() {
        let w = small_world(0.5);
        let mut r = rng::stream(2, "types");
        let n = 10_000;
        let ut1 = (0..n).filter(|_| w.sample_type(&[0.8, 0.2], &mut r) == 0).count();
        let p = 0.8;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ut1 as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn low_temperature_picks_argmax() {
        let mut cfg = WorldConfig::two_types(10);
        cfg.temperature = 1e-3;
        cfg.user_noise = 0.0;
        cfg.mu_high = 1.0;
        let w = init_world(cfg, 0).unwrap();
        let mut user = w.sample_user(&[1.0 - 1e-12, 1e-12], &mut rng::stream(0, "u"));
        user.utilities[3] = 1.5;
        let mut r = rng::stream(0, "argmax");
        for _ in 0..100 {
            assert_eq!(w.user_choice(&user, &[7, 3, 1], &mut r), vec![false, true, false]);
        }
    }

    #[test]
    fn dominant_no_click() {
        let mut cfg = WorldConfig::two_types(10);
        cfg.no_click_utility = 100.0;
        let w = init_world(cfg, 0).unwrap();
        let user = w.sample_user(&[0.5, 0.5], &mut rng::stream(0, "u"));
        let mut r = rng::stream(0, "nc");
        for _ in 0..100 {
            assert_eq!(w.user_choice(&user, &[0, 1, 2], &mut r), vec![false; 3]);
        }
    }

    #[test]
    fn click_shares_match_softmax() {
        let w = small_world(0.5);
        let user = w.sample_user(&[0.5, 0.5], &mut rng::stream(3, "u"));
        let slate = [0, 6, 7];
        let probs = w.choice_probabilities(&user, &slate);
        let mut counts = [0usize; 4];
        let mut r = rng::stream(3, "shares");
        let n = 100_000;
        for _ in 0..n {
            let c = w.user_choice(&user, &slate, &mut r);
            counts[c.iter().position(|&x| x).unwrap_or(3)] += 1;
        }
        for k in 0..4 {
            let se = (probs[k] * (1.0 - probs[k]) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - probs[k]).abs() < 3.0 * se, "outcome {k}");
        }
    }

    #[test]
    fn logging_policy_shapes() {
        let w = init_world(WorldConfig::two_types(50), 0).unwrap();
        let logs = run_logging_policy(&w, 1, 9).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].steps.len(), 5);
        logs[0].validate(3, 50).unwrap();
        assert!(logs[0].steps.iter().all(|s| s.click_count() <= 1));
        assert_eq!(logs, run_logging_policy(&w, 1, 9).unwrap());
        assert!(run_logging_policy(&w, 0, 9).is_err());
    }

    #[test]
    fn random_agent_exposure_is_uniform() {
        let n_items = 20;
        let mut r = rng::stream(1, "exposure");
        let mut counts = vec![0usize; n_items];
        let slates = 100_000;
        for _ in 0..slates {
            for i in uniform_slate(n_items, 3, &mut r) {
                counts[i] += 1;
            }
        }
        let p = 3.0 / n_items as f64;
        let se = (p * (1.0 - p) / slates as f64).sqrt();
        for c in counts {
            assert!((c as f64 / slates as f64 - p).abs() < 3.5 * se);
        }
    }

    #[test]
    fn logged_clicks_favor_majority_items() {
        let w = init_world(WorldConfig::default(), 0).unwrap();
        let logs = run_logging_policy(&w, 4_000, 1).unwrap();
        let (mut ut1, mut ut2) = (0usize, 0usize);
        for l in &logs {
            for i in l.clicked_items() {
                if w.is_preferred(0, i) {
                    ut1 += 1;
                } else {
                    ut2 += 1;
                }
            }
        }
        // independent-count difference against a 3σ Poisson band
        let sd = ((ut1 + ut2) as f64).sqrt();
        assert!(ut1 as f64 - ut2 as f64 > 3.0 * sd, "ut1 {ut1} ut2 {ut2}");
    }

    #[test]
    fn oracle_agent_reaches_full_ctr() {
        let mut cfg = WorldConfig::two_types(30);
        cfg.temperature = 1e-3;
        let w = init_world(cfg, 0).unwrap();
        let pop = PopularityTable::from_counts(vec![1; 30]);
        // users are all UT1, so the first items are always preferred
        let agent = |_: &[ItemId], k: usize| Ok((0..k).collect::<Vec<_>>());
        let eval = run_online_eval(&w, &agent, 200, &[1.0 - 1e-12, 1e-12], &pop, 3).unwrap();
        assert!(eval.overall.ctr > 99.0, "{}", eval.overall.ctr);
        assert_eq!(eval.overall.arp, 1.0);
    }

    #[test]
    fn fixed_agent_arp_and_contract() {
        let w = init_world(WorldConfig::two_types(10), 0).unwrap();
        let pop = PopularityTable::from_counts((1..=10).collect());
        let agent = |_: &[ItemId], _: usize| Ok(vec![0, 1, 2]);
        let eval = run_online_eval(&w, &agent, 50, &[0.5, 0.5], &pop, 1).unwrap();
        let expected = (0.1 + 0.2 + 0.3) / 3.0;
        assert!((eval.overall.arp - expected).abs() < 1e-12);
        assert!((0.0..=100.0).contains(&eval.overall.ctr));
        let weighted: f64 = eval.by_type.iter().map(|s| s.ctr * s.sessions as f64).sum::<f64>()
            / eval.overall.sessions as f64;
        assert!((weighted - eval.overall.ctr).abs() < 1e-9);

        let dup = |_: &[ItemId], _: usize| Ok(vec![0, 0, 2]);
        assert!(matches!(
            run_online_eval(&w, &dup, 1, &[0.5, 0.5], &pop, 1),
            Err(Error::ContractViolation(_))
        ));
        let short = |_: &[ItemId], _: usize| Ok(vec![0, 1]);
        assert!(matches!(
            run_online_eval(&w, &short, 1, &[0.5, 0.5], &pop, 1),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn random_agent_ctr_matches_composed_choice_model() {
        let w = init_world(WorldConfig::two_types(40), 2).unwrap();
        let pop = PopularityTable::from_counts(vec![1; 40]);
        let seed = 17;
        let agent_rng = std::cell::RefCell::new(rng::stream(seed, "random-agent"));
        let agent = |_: &[ItemId], k: usize| Ok(uniform_slate(40, k, &mut agent_rng.borrow_mut()));
        let n = 4_000;
        let eval = run_online_eval(&w, &agent, n, &[0.5, 0.5], &pop, seed).unwrap();

        // Monte Carlo estimate of P(click) under uniform slates, independent draws.
        let mut r = rng::stream(99, "mc");
        let trials = 200_000;
        let mut p_sum = 0.0;
        for _ in 0..trials {
            let user = w.sample_user(&[0.5, 0.5], &mut r);
            let slate = uniform_slate(40, 3, &mut r);
            let probs = w.choice_probabilities(&user, &slate);
            p_sum += 1.0 - probs[3];
        }
        let p = p_sum / trials as f64;
        let steps = eval.overall.steps as f64;
        // steps within a session share a user, so use a session-level variance bound
        let se = (p * (1.0 - p) / steps).sqrt() * (w.config.session_length as f64).sqrt();
        assert!((eval.overall.ctr / 100.0 - p).abs() < 3.0 * se, "{} vs {p}", eval.overall.ctr);
    }
}
