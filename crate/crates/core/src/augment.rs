//! Counterfactual session synthesis.
//!
//! Each attempt picks an observed interaction, starts a new session from its
//! first clicked item and then, for every remaining step, lets the diffusion
//! model propose a slate conditioned on the session so far and the response
//! model decide what the user would have clicked. The recommender is then
//! retrained on observed and synthesized sessions together.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, SlateInteraction};
use crate::diffusion::{DiffusionModel, SlateMode};
use crate::error::{Error, Result};
use crate::rng;
use crate::scm::{generate_response, ScmModel};
use crate::sr::{train_sr, SrConfig, SrModel, SrTrainLog};

/// When the response model's confounders are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConfounderSampling {
    #[default]
    PerSession,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Attempts as a multiple of the number of observed interactions.
    pub attempts_factor: f64,
    /// Overrides `attempts_factor` when set.
    pub attempts: Option<usize>,
    pub guidance: f64,
    /// Defaults to the observed slate size.
    pub slate_size: Option<usize>,
    pub min_len: usize,
    pub confounder: ConfounderSampling,
    pub slate_mode: SlateMode,
    /// Click budget for every step; the observed click count when unset.
    pub fixed_budget: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            attempts_factor: 1.0,
            attempts: None,
            guidance: 2.0,
            slate_size: None,
            min_len: 2,
            confounder: ConfounderSampling::PerSession,
            slate_mode: SlateMode::Nearest,
            fixed_budget: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 {
            return Err(Error::Config("counterfactual min_len must be at least 2".into()));
        }
        if !(self.attempts_factor > 0.0) && self.attempts.is_none() {
            return Err(Error::Config("attempts_factor must be positive".into()));
        }
        if self.attempts == Some(0) || self.slate_size == Some(0) {
            return Err(Error::Config("attempts and slate size must be positive".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config("guidance weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn attempts_for(&self, observed: usize) -> usize {
        self.attempts
            .unwrap_or_else(|| ((self.attempts_factor * observed as f64).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualStep {
    /// Step index in the source interaction.
    pub step: usize,
    pub slate: Vec<ItemId>,
    pub response: Vec<bool>,
    pub budget: usize,
}

/// A synthesized session with everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSession {
    pub attempt: usize,
    pub source_index: usize,
    pub source_user: u64,
    /// Step of the source interaction whose click seeds the session.
    pub seed_step: usize,
    pub items: Vec<ItemId>,
    pub steps: Vec<CounterfactualStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentStats {
    pub attempts: usize,
    pub skipped_no_click: usize,
    pub discarded_short: usize,
    pub kept: usize,
}

enum Outcome {
    NoClick,
    Short,
    Kept(CounterfactualSession),
}

/// Runs `N` synthesis attempts in parallel; results keep attempt order.
pub fn synthesize_counterfactuals(
    observed: &[SlateInteraction],
    diffusion: &DiffusionModel,
    scm: &ScmModel,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Vec<CounterfactualSession>, AugmentStats)> {
    cfg.validate()?;
    if observed.is_empty() {
        return Err(Error::EmptyDataset("no observed interactions to augment".into()));
    }
    if diffusion.n_items() != scm.n_items() {
        return Err(Error::Consistency(format!(
            "diffusion model has {} items but the response model has {}",
            diffusion.n_items(),
            scm.n_items()
        )));
    }
    let k = match cfg.slate_size {
        Some(k) => k,
        None => observed
            .iter()
            .flat_map(|i| i.steps.first())
            .map(|s| s.slate.len())
            .next()
            .ok_or_else(|| Error::EmptyDataset("observed interactions have no steps".into()))?,
    };
    let n = cfg.attempts_for(observed.len());
    let outcomes: Vec<Outcome> = (0..n)
        .into_par_iter()
        .map(|attempt| rollout(observed, diffusion, scm, cfg, k, seed, attempt))
        .collect::<Result<_>>()?;
    let mut stats = AugmentStats {
        attempts: n,
        ..Default::default()
    };
    let mut kept = Vec::new();
    for o in outcomes {
        match o {
            Outcome::NoClick => stats.skipped_no_click += 1,
            Outcome::Short => stats.discarded_short += 1,
            Outcome::Kept(s) => kept.push(s),
        }
    }
    stats.kept = kept.len();
    Ok((kept, stats))
}

fn rollout(
    observed: &[SlateInteraction],
    diffusion: &DiffusionModel,
    scm: &ScmModel,
    cfg: &AugmentConfig,
    k: usize,
    seed: u64,
    attempt: usize,
) -> Result<Outcome> {
    let mut r = rng::substream(seed, "counterfactual", attempt as u64);
    let source_index = rng::below(&mut r, observed.len());
    let source = &observed[source_index];
    let Some(seed_step) = source.steps.iter().position(|s| s.has_click()) else {
        return Ok(Outcome::NoClick);
    };
    let first = source.steps[seed_step].clicked().next().expect("step has a click");
    let mut items = vec![first];
    let mut h = scm.update_interest(&scm.initial_state(), &items)?;
    let mut beta = scm.sample_confounder(&mut r);
    let mut steps = Vec::new();
    for j in seed_step + 1..source.steps.len() {
        if cfg.confounder == ConfounderSampling::PerStep {
            beta = scm.sample_confounder(&mut r);
        }
        let exclude: HashSet<ItemId> = items.iter().copied().collect();
        let slate = diffusion.propose_slate(&items, k, &exclude, cfg.guidance, cfg.slate_mode, &mut r)?;
        let probs = scm.response_probabilities(&h, &slate, &beta)?;
        let budget = cfg.fixed_budget.unwrap_or_else(|| source.steps[j].click_count());
        let response = generate_response(&probs, budget);
        let best = (0..k)
            .filter(|&n| response[n])
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)));
        if let Some(pos) = best {
            items.push(slate[pos]);
            h = scm.update_interest(&h, &[slate[pos]])?;
        }
        steps.push(CounterfactualStep {
            step: j,
            slate,
            response,
            budget,
        });
    }
    if items.len() < cfg.min_len {
        return Ok(Outcome::Short);
    }
    Ok(Outcome::Kept(CounterfactualSession {
        attempt,
        source_index,
        source_user: source.user,
        seed_step,
        items,
        steps,
    }))
}

/// Checks a counterfactual session against its source log.
pub fn verify_provenance(cs: &CounterfactualSession, observed: &[SlateInteraction]) -> Result<()> {
    let fail = |msg: String| Err(Error::Data(format!("counterfactual attempt {}: {msg}", cs.attempt)));
    let Some(source) = observed.get(cs.source_index) else {
        return fail(format!("source {} outside the log", cs.source_index));
    };
    if source.user != cs.source_user {
        return fail("source user does not match".into());
    }
    let first_click = source.steps.iter().position(|s| s.has_click());
    if first_click != Some(cs.seed_step) {
        return fail("seed step is not the first clicked step".into());
    }
    let Some(&first) = cs.items.first() else {
        return fail("empty session".into());
    };
    if !source.steps[cs.seed_step].clicked().any(|i| i == first) {
        return fail("first item was not clicked in the source".into());
    }
    if cs.items.len() > source.steps.len() {
        return fail("longer than the source interaction".into());
    }
    if cs.items.iter().collect::<HashSet<_>>().len() != cs.items.len() {
        return fail("repeated item".into());
    }
    let mut appended = cs.items[1..].iter();
    for st in &cs.steps {
        if st.response.len() != st.slate.len() {
            return fail(format!("step {} response length mismatch", st.step));
        }
        if st.response.iter().filter(|&&c| c).count() > st.budget {
            return fail(format!("step {} exceeds its click budget", st.step));
        }
        if st.response.iter().any(|&c| c) {
            let Some(&item) = appended.next() else {
                return fail(format!("step {} clicked but nothing appended", st.step));
            };
            match st.slate.iter().position(|&i| i == item) {
                Some(pos) if st.response[pos] => {}
                _ => return fail(format!("item {item} not clicked in its slate at step {}", st.step)),
            }
        }
    }
    if appended.next().is_some() {
        return fail("items without a generating step".into());
    }
    Ok(())
}

/// Trains the recommender on observed sequences followed by the
/// counterfactual ones.
pub fn retrain_with_counterfactuals(
    observed: &[Vec<ItemId>],
    counterfactuals: &[CounterfactualSession],
    valid: &[Vec<ItemId>],
    n_items: usize,
    cfg: &SrConfig,
    seed: u64,
) -> Result<(SrModel, SrTrainLog)> {
    let mut union = observed.to_vec();
    union.extend(counterfactuals.iter().map(|c| c.items.clone()));
    train_sr(&union, valid, n_items, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlateStep;
    use crate::diffusion::DiffusionConfig;
    use crate::nn::{AdamConfig, Tensor};
    use crate::scm::Candidate;
    use crate::simulator::{init_world, run_logging_policy, WorldConfig};

    fn world_log(n: usize) -> Vec<SlateInteraction> {
        let w = init_world(WorldConfig::two_types(20), 0).unwrap();
        run_logging_policy(&w, n, 1).unwrap()
    }

    fn models(n_items: usize) -> (DiffusionModel, ScmModel) {
        let cfg = DiffusionConfig {
            dim: 4,
            steps: 8,
            beta_start: 1e-3,
            beta_end: 0.2,
            max_len: 6,
            ..Default::default()
        };
        (
            DiffusionModel::init(n_items, &cfg, 0).unwrap(),
            ScmModel::init(n_items, 4, Candidate::Tanh, 0).unwrap(),
        )
    }

    #[test]
    fn clickless_sources_are_skipped() {
        let log = vec![SlateInteraction {
            user: 0,
            user_type: None,
            steps: vec![
                SlateStep {
                    slate: vec![0, 1, 2],
                    clicks: vec![false; 3],
                };
                5
            ],
        }];
        let (d, s) = models(20);
        let cfg = AugmentConfig {
            attempts: Some(10),
            ..Default::default()
        };
        let (oc, stats) = synthesize_counterfactuals(&log, &d, &s, &cfg, 0).unwrap();
        assert!(oc.is_empty());
        assert_eq!(stats.skipped_no_click, 10);
    }

    #[test]
    fn dominant_no_click_discards_everything() {
        let log = world_log(30);
        let (d, mut s) = models(20);
        s.params.set("scm.b0", Tensor::filled(&[1, 1], 1e3)).unwrap();
        let (oc, stats) = synthesize_counterfactuals(&log, &d, &s, &AugmentConfig::default(), 0).unwrap();
        assert!(oc.is_empty());
        assert_eq!(stats.discarded_short + stats.skipped_no_click, stats.attempts);
    }

    #[test]
    fn sessions_are_auditable_and_bounded() {
        let log = world_log(40);
        let (d, mut s) = models(20);
        // make every slate item beat no-click so sessions grow
        s.params.set("scm.b0", Tensor::filled(&[1, 1], -50.0)).unwrap();
        for mode in [SlateMode::Nearest, SlateMode::Independent] {
            let cfg = AugmentConfig {
                slate_mode: mode,
                fixed_budget: Some(1),
                confounder: ConfounderSampling::PerStep,
                ..Default::default()
            };
            let (oc, stats) = synthesize_counterfactuals(&log, &d, &s, &cfg, 3).unwrap();
            assert!(oc.len() <= cfg.attempts_for(log.len()));
            assert_eq!(stats.kept + stats.discarded_short + stats.skipped_no_click, stats.attempts);
            assert!(!oc.is_empty());
            for c in &oc {
                verify_provenance(c, &log).unwrap();
                assert!(c.items.len() >= 2 && c.items.len() <= 5 - c.seed_step);
            }
            let again = synthesize_counterfactuals(&log, &d, &s, &cfg, 3).unwrap().0;
            assert_eq!(again, oc);
        }
    }

    #[test]
    fn provenance_violations_detected() {
        let log = world_log(40);
        let (d, mut s) = models(20);
        s.params.set("scm.b0", Tensor::filled(&[1, 1], -50.0)).unwrap();
        let cfg = AugmentConfig {
            fixed_budget: Some(1),
            ..Default::default()
        };
        let (oc, _) = synthesize_counterfactuals(&log, &d, &s, &cfg, 3).unwrap();
        let good = oc.iter().find(|c| c.items.len() >= 2).unwrap().clone();
        let mut repeated = good.clone();
        repeated.items[1] = repeated.items[0];
        assert!(verify_provenance(&repeated, &log).is_err());
        let mut wrong_seed = good.clone();
        wrong_seed.items[0] = (0..20).find(|i| !log[good.source_index].clicked_items().contains(i)).unwrap();
        assert!(verify_provenance(&wrong_seed, &log).is_err());
        let mut extra = good.clone();
        extra.items.push(19);
        assert!(verify_provenance(&extra, &log).is_err());
        let mut unclicked = good;
        let st = unclicked.steps.iter_mut().find(|s| s.response.iter().any(|&c| c)).unwrap();
        st.response = vec![false; st.slate.len()];
        assert!(verify_provenance(&unclicked, &log).is_err());
    }

    fn sr_cfg() -> SrConfig {
        SrConfig {
            dim: 8,
            batch_size: 16,
            epochs: 25,
            adam: AdamConfig {
                lr: 0.03,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn as_counterfactuals(seqs: &[Vec<ItemId>]) -> Vec<CounterfactualSession> {
        seqs.iter()
            .enumerate()
            .map(|(a, s)| CounterfactualSession {
                attempt: a,
                source_index: 0,
                source_user: 0,
                seed_step: 0,
                items: s.clone(),
                steps: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn empty_augmentation_matches_baseline() {
        let observed: Vec<Vec<ItemId>> = (0..20).map(|i| vec![i % 4, (i + 1) % 4]).collect();
        let (a, _) = train_sr(&observed, &[], 4, &sr_cfg(), 1).unwrap();
        let (b, _) = retrain_with_counterfactuals(&observed, &[], &[], 4, &sr_cfg(), 1).unwrap();
        assert!(a.to_store().unwrap().bitwise_eq(&b.to_store().unwrap()));
    }

    #[test]
    fn duplicated_observations_keep_top1() {
        let observed: Vec<Vec<ItemId>> = (0..30).map(|i| vec![i % 5, (i + 1) % 5, (i + 2) % 5]).collect();
        let (a, _) = train_sr(&observed, &[], 5, &sr_cfg(), 2).unwrap();
        let (b, _) =
            retrain_with_counterfactuals(&observed, &as_counterfactuals(&observed), &[], 5, &sr_cfg(), 2).unwrap();
        let none = HashSet::new();
        for s in &observed {
            for l in 1..s.len() {
                assert_eq!(
                    a.recommend_topk(&s[..l], 1, &none).unwrap(),
                    b.recommend_topk(&s[..l], 1, &none).unwrap()
                );
            }
        }
    }

    #[test]
    fn counterfactuals_lift_a_tail_item() {
        // item 5 appears once; counterfactuals add it as the continuation of 0
        let mut observed: Vec<Vec<ItemId>> = (0..40).map(|i| vec![i % 4, (i + 1) % 4]).collect();
        observed.push(vec![3, 5]);
        let extra: Vec<Vec<ItemId>> = vec![vec![0, 5]; 100];
        let (base, _) = train_sr(&observed, &[], 6, &sr_cfg(), 3).unwrap();
        let (aug, _) =
            retrain_with_counterfactuals(&observed, &as_counterfactuals(&extra), &[], 6, &sr_cfg(), 3).unwrap();
        let mean_score = |m: &SrModel| {
            let total: f64 = observed.iter().map(|s| m.score(&s[..1]).unwrap()[5]).sum();
            total / observed.len() as f64
        };
        assert!(mean_score(&aug) > mean_score(&base));
    }

    #[test]
    fn config_validation() {
        let bad = AugmentConfig {
            min_len: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(AugmentConfig::default().attempts_for(7), 7);
        let half = AugmentConfig {
            attempts_factor: 0.5,
            ..Default::default()
        };
        assert_eq!(half.attempts_for(7), 4);
    }
}
