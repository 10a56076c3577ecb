use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{DataSource, ExperimentConfig};
use super::metrics::{evaluate_offline, online_report, MetricsReport};
use crate::augment::{retrain_with_counterfactuals, synthesize_counterfactuals, verify_provenance, CounterfactualSession};
use crate::data::{
    build_slate_log, chronological_split, clicked_sequences, filter_sessions, parse_click_log, popularity_stats,
    read_jsonl, synthetic_click_corpus, write_jsonl, ClickSession, ItemId, PopularityTable, SessionRecord,
    SlateInteraction,
};
use crate::diffusion::{select_guidance, train_diffusion, DiffusionModel};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scm::{train_scm, ScmModel};
use crate::simulator::{init_world, run_logging_policy, run_online_eval, World};
use crate::sr::{train_sr, SrModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    SimulateLog,
    TrainDiffusion,
    TrainScm,
    Augment,
    TrainSr,
    EvalOffline,
    EvalOnline,
    RunAll,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::SimulateLog,
        Stage::TrainDiffusion,
        Stage::TrainScm,
        Stage::Augment,
        Stage::TrainSr,
        Stage::EvalOffline,
        Stage::EvalOnline,
        Stage::RunAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SimulateLog => "simulate-log",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::TrainScm => "train-scm",
            Stage::Augment => "augment",
            Stage::TrainSr => "train-sr",
            Stage::EvalOffline => "eval-offline",
            Stage::EvalOnline => "eval-online",
            Stage::RunAll => "run-all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub const OBSERVED: &str = "observed.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const VALID: &str = "valid.jsonl";
pub const TEST: &str = "test.jsonl";
pub const DATASET: &str = "dataset.json";
pub const DIFFUSION_CKPT: &str = "diffusion.ckpt";
pub const GUIDANCE: &str = "guidance.json";
pub const SCM_CKPT: &str = "scm.ckpt";
pub const COUNTERFACTUALS: &str = "counterfactuals.jsonl";
pub const SR_BASELINE: &str = "sr-baseline.ckpt";
pub const SR_DCASR: &str = "sr-dcasr.ckpt";

/// What one stage did, written as `report-<stage>.json` and `.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub details: Value,
    pub metrics: Vec<MetricsReport>,
}

impl StageReport {
    pub fn metrics_for(&self, model: &str) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.model == model)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "stage {}\nseed {}\nconfig {}\n",
            self.stage, self.seed, self.fingerprint
        );
        if !self.artifacts.is_empty() {
            out.push_str(&format!("artifacts: {}\n", self.artifacts.join(", ")));
        }
        if !self.details.is_null() {
            out.push_str(&serde_json::to_string_pretty(&self.details).expect("json value"));
            out.push('\n');
        }
        for m in &self.metrics {
            out.push('\n');
            out.push_str(&m.to_text());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetInfo {
    source: DataSource,
    n_items: usize,
    slate_size: usize,
    observed_interactions: usize,
    train_sessions: usize,
    valid_sessions: usize,
    test_sessions: usize,
    fingerprint: String,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GuidanceChoice {
    guidance: f64,
    grid: Vec<f64>,
    recall_at_1: Vec<f64>,
}

/// Runs stages of the experiment against one output directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    fingerprint: String,
}

/// Runs `stage` (every stage in order for `run-all`) and returns its reports.
pub fn run_pipeline(cfg: &ExperimentConfig, stage: Stage) -> Result<Vec<StageReport>> {
    Pipeline::new(cfg.clone())?.run(stage)
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let fingerprint = cfg.fingerprint();
        Ok(Pipeline { cfg, out, fingerprint })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run(&self, stage: Stage) -> Result<Vec<StageReport>> {
        if stage != Stage::RunAll {
            return Ok(vec![self.run_one(stage)?]);
        }
        let mut reports = Vec::new();
        for st in &Stage::ALL[..Stage::ALL.len() - 1] {
            if *st == Stage::EvalOnline && self.cfg.data.source != DataSource::Simulator {
                log::info!("skipping eval-online: data source is not the simulator");
                continue;
            }
            reports.push(self.run_one(*st)?);
        }
        let summary = StageReport {
            stage: Stage::RunAll.name().into(),
            fingerprint: self.fingerprint.clone(),
            seed: self.cfg.seed,
            artifacts: Vec::new(),
            details: json!({ "stages": reports.iter().map(|r| r.stage.clone()).collect::<Vec<_>>() }),
            metrics: reports.iter().flat_map(|r| r.metrics.clone()).collect(),
        };
        self.write_report(&summary)?;
        reports.push(summary);
        Ok(reports)
    }

    fn run_one(&self, stage: Stage) -> Result<StageReport> {
        log::info!("running {stage}");
        let (artifacts, details, metrics) = match stage {
            Stage::SimulateLog => self.simulate_log()?,
            Stage::TrainDiffusion => self.train_diffusion()?,
            Stage::TrainScm => self.train_scm()?,
            Stage::Augment => self.augment()?,
            Stage::TrainSr => self.train_sr()?,
            Stage::EvalOffline => self.eval_offline()?,
            Stage::EvalOnline => self.eval_online()?,
            Stage::RunAll => unreachable!("handled by run"),
        };
        let mut metrics: Vec<MetricsReport> = metrics;
        for m in &mut metrics {
            m.fingerprint = self.fingerprint.clone();
            m.seed = self.cfg.seed;
        }
        let report = StageReport {
            stage: stage.name().into(),
            fingerprint: self.fingerprint.clone(),
            seed: self.cfg.seed,
            artifacts: artifacts.into_iter().map(String::from).collect(),
            details,
            metrics,
        };
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &StageReport) -> Result<()> {
        let json_path = self.path(&format!("report-{}.json", report.stage));
        let text = serde_json::to_string_pretty(report).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        let txt_path = self.path(&format!("report-{}.txt", report.stage));
        std::fs::write(&txt_path, report.to_text()).map_err(|e| Error::io(&txt_path, e))
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    /// Path of an upstream artifact, or a dependency error naming its stage.
    fn need(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency {
                what: p.display().to_string(),
                stage: stage.name(),
            })
        }
    }

    fn world(&self) -> Result<World> {
        init_world(self.cfg.simulator.world.clone(), self.seed("world"))
    }

    fn dataset(&self) -> Result<DatasetInfo> {
        let p = self.need(DATASET, Stage::SimulateLog)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))
    }

    fn sessions(&self, name: &str) -> Result<Vec<Vec<ItemId>>> {
        let records: Vec<SessionRecord> = read_jsonl(self.need(name, Stage::SimulateLog)?)?;
        Ok(records.into_iter().map(|r| r.items).collect())
    }

    fn observed(&self) -> Result<Vec<SlateInteraction>> {
        read_jsonl(self.need(OBSERVED, Stage::SimulateLog)?)
    }

    fn train_popularity(&self, n_items: usize) -> Result<PopularityTable> {
        let train = self.sessions(TRAIN)?;
        PopularityTable::from_sequences(train.iter().map(Vec::as_slice), n_items)
    }

    fn write_sessions(&self, name: &str, sessions: &[Vec<ItemId>]) -> Result<()> {
        let records: Vec<SessionRecord> = sessions
            .iter()
            .enumerate()
            .map(|(i, s)| SessionRecord {
                session: i as u64,
                items: s.clone(),
            })
            .collect();
        write_jsonl(self.path(name), &records)
    }

    fn simulate_log(&self) -> Result<StageOutput> {
        let cfg = &self.cfg;
        let slate_size = cfg.slate_size();
        let (observed, train, valid, test, n_items) = match cfg.data.source {
            DataSource::Simulator => {
                let world = self.world()?;
                let s = &cfg.simulator;
                let observed = run_logging_policy(&world, s.logged_sessions, self.seed("observed"))?;
                let heldout = run_logging_policy(&world, s.heldout_sessions, self.seed("heldout"))?;
                let train: Vec<Vec<ItemId>> =
                    clicked_sequences(&observed).into_iter().filter(|s| !s.is_empty()).collect();
                let held: Vec<Vec<ItemId>> =
                    clicked_sequences(&heldout).into_iter().filter(|s| s.len() >= 2).collect();
                if train.is_empty() || held.len() < 2 {
                    return Err(Error::EmptyDataset("simulated users clicked too rarely".into()));
                }
                let half = held.len() / 2;
                (observed, train, held[..half].to_vec(), held[half..].to_vec(), s.world.n_items)
            }
            DataSource::Synthetic | DataSource::ClickLog => {
                let (sessions, n_items) = self.click_sessions()?;
                let [a, b, c] = cfg.data.split;
                let split = chronological_split(&sessions, (a, b, c))?;
                if split.dropped > 0 {
                    log::info!("dropped {} held-out sessions overlapping training time", split.dropped);
                }
                let pop = popularity_stats(&split.train, n_items)?;
                let observed = build_slate_log(&split.train, slate_size, &pop, self.seed("slate-log"))?;
                let items = |v: &[ClickSession]| v.iter().map(ClickSession::items).collect::<Vec<_>>();
                (observed, items(&split.train), items(&split.valid), items(&split.test), n_items)
            }
        };
        write_jsonl(self.path(OBSERVED), &observed)?;
        self.write_sessions(TRAIN, &train)?;
        self.write_sessions(VALID, &valid)?;
        self.write_sessions(TEST, &test)?;
        let info = DatasetInfo {
            source: cfg.data.source,
            n_items,
            slate_size,
            observed_interactions: observed.len(),
            train_sessions: train.len(),
            valid_sessions: valid.len(),
            test_sessions: test.len(),
            fingerprint: self.fingerprint.clone(),
            seed: cfg.seed,
        };
        let p = self.path(DATASET);
        let text = serde_json::to_string_pretty(&info).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        let clicks: usize = observed.iter().map(|i| i.clicked_items().len()).sum();
        let steps: usize = observed.iter().map(|i| i.steps.len()).sum();
        let details = json!({
            "dataset": info,
            "logged_click_rate": if steps == 0 { 0.0 } else { clicks as f64 / steps as f64 },
        });
        Ok((vec![OBSERVED, TRAIN, VALID, TEST, DATASET], details, Vec::new()))
    }

    fn click_sessions(&self) -> Result<(Vec<ClickSession>, usize)> {
        let d = &self.cfg.data;
        match d.source {
            DataSource::Synthetic => Ok((synthetic_click_corpus(&d.synthetic, self.seed("corpus"))?, d.synthetic.n_items)),
            _ => {
                let path = d.click_log.as_ref().ok_or_else(|| Error::Config("data.click_log missing".into()))?;
                let raw = parse_click_log(path, d.timestamp_format)?;
                let filtered = filter_sessions(&raw, d.top_items, d.min_len, d.max_len)?;
                let n = filtered.catalog.len();
                Ok((filtered.sessions, n))
            }
        }
    }

    fn train_diffusion(&self) -> Result<StageOutput> {
        let info = self.dataset()?;
        let train = self.sessions(TRAIN)?;
        let (model, log) = train_diffusion(&train, info.n_items, &self.cfg.diffusion, self.seed("train-diffusion"))?;
        model.save(self.path(DIFFUSION_CKPT))?;
        let grid = &self.cfg.eval.guidance_grid;
        let choice = if grid.is_empty() {
            GuidanceChoice {
                guidance: self.cfg.augment.guidance,
                grid: Vec::new(),
                recall_at_1: Vec::new(),
            }
        } else {
            let valid: Vec<Vec<ItemId>> = self
                .sessions(VALID)?
                .into_iter()
                .filter(|s| s.len() >= 2)
                .take(self.cfg.eval.guidance_valid_sessions)
                .collect();
            let (w, recalls) = select_guidance(&model, &valid, grid, self.seed("guidance"))?;
            GuidanceChoice {
                guidance: w,
                grid: grid.clone(),
                recall_at_1: recalls,
            }
        };
        let p = self.path(GUIDANCE);
        let text = serde_json::to_string_pretty(&choice).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        let details = json!({ "epoch_losses": log.epoch_losses, "guidance": choice });
        Ok((vec![DIFFUSION_CKPT, GUIDANCE], details, Vec::new()))
    }

    fn train_scm(&self) -> Result<StageOutput> {
        let info = self.dataset()?;
        let observed = self.observed()?;
        let (model, log) = train_scm(&observed, info.n_items, &self.cfg.scm, self.seed("train-scm"))?;
        model.save(self.path(SCM_CKPT))?;
        let details = json!({ "epoch_losses": log.epoch_losses, "no_click_bias": model.no_click_bias() });
        Ok((vec![SCM_CKPT], details, Vec::new()))
    }

    fn augment(&self) -> Result<StageOutput> {
        let info = self.dataset()?;
        let observed = self.observed()?;
        let diffusion = DiffusionModel::load(self.need(DIFFUSION_CKPT, Stage::TrainDiffusion)?)?;
        let scm = ScmModel::load(self.need(SCM_CKPT, Stage::TrainScm)?)?;
        let gp = self.need(GUIDANCE, Stage::TrainDiffusion)?;
        let text = std::fs::read_to_string(&gp).map_err(|e| Error::io(&gp, e))?;
        let choice: GuidanceChoice = serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        let mut cfg = self.cfg.augment.clone();
        cfg.guidance = choice.guidance;
        if cfg.slate_size.is_none() {
            cfg.slate_size = Some(info.slate_size);
        }
        let (oc, stats) = synthesize_counterfactuals(&observed, &diffusion, &scm, &cfg, self.seed("augment"))?;
        for c in &oc {
            verify_provenance(c, &observed)?;
        }
        write_jsonl(self.path(COUNTERFACTUALS), &oc)?;
        let pop = self.train_popularity(info.n_items)?;
        let mean_pop = |items: &mut dyn Iterator<Item = ItemId>| {
            let (s, n) = items.fold((0.0, 0usize), |(s, n), i| (s + pop.pops()[i], n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        };
        let observed_pop = mean_pop(&mut observed.iter().flat_map(|i| i.clicked_items()));
        let counterfactual_pop = mean_pop(&mut oc.iter().flat_map(|c| c.items.iter().copied()));
        let mean_len = if oc.is_empty() {
            0.0
        } else {
            oc.iter().map(|c| c.items.len()).sum::<usize>() as f64 / oc.len() as f64
        };
        let details = json!({
            "guidance": cfg.guidance,
            "stats": stats,
            "mean_length": mean_len,
            "mean_pop_observed_clicks": observed_pop,
            "mean_pop_counterfactual_items": counterfactual_pop,
        });
        Ok((vec![COUNTERFACTUALS], details, Vec::new()))
    }

    fn train_sr(&self) -> Result<StageOutput> {
        let info = self.dataset()?;
        let train = self.sessions(TRAIN)?;
        let valid = self.sessions(VALID)?;
        let seed = self.seed("train-sr");
        let (baseline, base_log) = train_sr(&train, &valid, info.n_items, &self.cfg.sr, seed)?;
        baseline.save(self.path(SR_BASELINE))?;
        let mut artifacts = vec![SR_BASELINE];
        let mut details = json!({ "baseline": base_log });
        let cp = self.path(COUNTERFACTUALS);
        if cp.is_file() {
            let oc: Vec<CounterfactualSession> = read_jsonl(&cp)?;
            let (dcasr, log) = retrain_with_counterfactuals(&train, &oc, &valid, info.n_items, &self.cfg.sr, seed)?;
            dcasr.save(self.path(SR_DCASR))?;
            artifacts.push(SR_DCASR);
            details["dcasr"] = json!(log);
            details["counterfactual_sessions"] = json!(oc.len());
        } else {
            log::info!("no {COUNTERFACTUALS}; training the baseline only");
        }
        Ok((artifacts, details, Vec::new()))
    }

    fn models(&self) -> Result<Vec<(&'static str, SrModel)>> {
        let mut models = vec![("baseline", SrModel::load(self.need(SR_BASELINE, Stage::TrainSr)?)?)];
        let p = self.path(SR_DCASR);
        if p.is_file() {
            models.push(("dcasr", SrModel::load(p)?));
        }
        Ok(models)
    }

    fn eval_offline(&self) -> Result<StageOutput> {
        let info = self.dataset()?;
        let models = self.models()?;
        let test: Vec<ClickSession> = self
            .sessions(TEST)?
            .iter()
            .enumerate()
            .map(|(i, s)| ClickSession::from_items(i as u64, s))
            .collect();
        let pop = self.train_popularity(info.n_items)?;
        let mut reports = Vec::new();
        for (name, model) in &models {
            let mut r = evaluate_offline(model, &test, self.cfg.eval.k, &pop)?;
            r.model = (*name).into();
            reports.push(r);
        }
        Ok((Vec::new(), Value::Null, reports))
    }

    fn eval_online(&self) -> Result<StageOutput> {
        if self.cfg.data.source != DataSource::Simulator {
            return Err(Error::Config("eval-online needs the simulator data source".into()));
        }
        let info = self.dataset()?;
        let models = self.models()?;
        let world = self.world()?;
        let pop = self.train_popularity(info.n_items)?;
        let mixture = &self.cfg.simulator.world.eval_mixture;
        let mut reports = Vec::new();
        for (name, model) in &models {
            let agent = model.agent();
            let eval = run_online_eval(
                &world,
                &agent,
                self.cfg.simulator.eval_sessions,
                mixture,
                &pop,
                self.seed("eval-online"),
            )?;
            let mut r = online_report(&eval, info.slate_size);
            r.model = (*name).into();
            reports.push(r);
        }
        Ok((Vec::new(), Value::Null, reports))
    }
}

type StageOutput = (Vec<&'static str>, Value, Vec<MetricsReport>);

/// Reads a stage report written by [`Pipeline`].
pub fn read_report(path: impl AsRef<Path>) -> Result<StageReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!(matches!("train".parse::<Stage>(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_upstream_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        for (stage, upstream) in [
            (Stage::EvalOffline, "simulate-log"),
            (Stage::TrainDiffusion, "simulate-log"),
            (Stage::Augment, "simulate-log"),
        ] {
            match p.run(stage) {
                Err(Error::Dependency { stage, .. }) => assert_eq!(stage, upstream),
                other => panic!("{other:?}"),
            }
        }
    }
}
