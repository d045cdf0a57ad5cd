//! Run configuration and the top-level commands behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_split, load_split, read_index, save_split, DatasetManifest, GeneratorConfig, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_model, oracle_predictions, scene_targets, EvalConfig, EvalReport};
use crate::gradcheck::{run_suite, CheckReport};
use crate::matching::LossConfig;
use crate::model::{DecoderConfig, Model};
use crate::profiler::{sweep, sweep_csv, ProfileConfig, SweepRow};
use crate::query::NoncentralMode;
use crate::tensor::{read_archive, AdamState};
use crate::train::{split_checkpoint, stream_rng, Stream, TrainConfig, TrainSummary, Trainer};

/// First scene id of the validation split; training ids start at zero.
pub const VAL_FIRST_ID: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; `<out>/data` when absent.
    pub dir: Option<PathBuf>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_scenes: 512,
            val_scenes: 64,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub score_floor: f64,
    /// Checkpoint to evaluate; `<out>/final.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself instead of a model.
    pub oracle: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            thresholds: e.thresholds,
            score_floor: e.score_floor,
            checkpoint: None,
            oracle: false,
        }
    }
}

impl EvalSection {
    pub fn metric(&self) -> EvalConfig {
        EvalConfig {
            thresholds: self.thresholds.clone(),
            score_floor: self.score_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Seeds to repeat every row with; the run seed when empty.
    pub seeds: Vec<u64>,
    /// Row labels to run, any of `a`..`e`.
    pub rows: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            rows: ["a", "b", "c", "d", "e"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub profile: ProfileConfig,
    pub ablation: AblationConfig,
}

/// Sets `path` (dot separated) in `root` to `value`. The key must already
/// exist. The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            serde_json::Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?,
            _ => return Err(Error::Config(format!("unknown config key `{path}`"))),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.metric().validate()?;
        if self.data.generator.channels != self.model.bev_channels
            || self.data.generator.height != self.model.bev_height
            || self.data.generator.width != self.model.bev_width
        {
            return Err(Error::Config("generator BEV dims differ from model BEV dims".into()));
        }
        if self.data.generator.max_instances > self.model.groups {
            return Err(Error::Config(format!(
                "up to {} elements per scene but only {} query groups",
                self.data.generator.max_instances, self.model.groups
            )));
        }
        Ok(())
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| out.join("data"))
    }
}

/// Generates and writes the train and validation splits.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<DatasetManifest>> {
    let dir = cfg.data_dir(out);
    let g = &cfg.data.generator;
    let train = generate_split(g, cfg.seed, 0, cfg.data.train_scenes)?;
    let val = generate_split(g, cfg.seed, VAL_FIRST_ID, cfg.data.val_scenes)?;
    Ok(vec![
        save_split(&dir, "train", &train, g, cfg.seed, cfg.model.points)?,
        save_split(&dir, "val", &val, g, cfg.seed, cfg.model.points)?,
    ])
}

fn load_checked(cfg: &RunConfig, out: &Path, split: &str) -> Result<Vec<Scene>> {
    let dir = cfg.data_dir(out);
    let index = read_index(&dir)?;
    if index.generator != cfg.data.generator {
        return Err(Error::Config(format!("dataset in {} was made with a different generator", dir.display())));
    }
    let scenes = load_split(&dir, split)?;
    if let Some(s) = scenes.iter().find(|s| s.elements.len() > cfg.model.groups) {
        return Err(Error::Config(format!(
            "scene {} has {} elements, more than {} query groups",
            s.scene_id,
            s.elements.len(),
            cfg.model.groups
        )));
    }
    Ok(scenes)
}

/// Trains from scratch (or from `train.resume_from`) and writes the log,
/// checkpoints and a summary into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let scenes = load_checked(cfg, out, "train")?;
    train_on(cfg, out, &scenes)
}

fn train_on(cfg: &RunConfig, out: &Path, scenes: &[Scene]) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let model = Model::new(cfg.model.clone(), &mut stream_rng(cfg.seed, Stream::Init))?;
    let mut trainer = Trainer {
        adam: AdamState::new(&model.params),
        model,
        loss: cfg.loss,
        train: cfg.train.clone(),
        seed: cfg.seed,
        epoch: 0,
        meta: [("run".to_string(), serde_json::to_value(cfg)?)].into_iter().collect(),
        out_dir: out,
    };
    if let Some(p) = &cfg.train.resume_from {
        trainer.restore(p)?;
    }
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    let summary = trainer.run(scenes, &mut log)?;
    fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Loads model parameters from a checkpoint written by [`cmd_train`].
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let a = read_archive(checkpoint)?;
    let (params, _) = split_checkpoint(&a)?;
    Model::from_params(cfg.model.clone(), params, &mut stream_rng(cfg.seed, Stream::Init))
}

/// Scores the validation split and writes `eval_report.json`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let scenes = load_checked(cfg, out, "val")?;
    let report = if cfg.eval.oracle {
        let gts: Vec<_> = scenes
            .iter()
            .map(|s| scene_targets(s, cfg.model.points))
            .collect::<Result<_>>()?;
        let preds: Vec<_> = gts.iter().map(|g| oracle_predictions(g)).collect();
        evaluate(&preds, &gts, &cfg.eval.metric())?
    } else {
        let ckpt = cfg.eval.checkpoint.clone().unwrap_or_else(|| out.join("final.ckpt"));
        if !ckpt.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", ckpt.display())));
        }
        evaluate_model(&load_model(cfg, &ckpt)?, &scenes, &cfg.eval.metric())?
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Writes `profile.csv` and `profile.json`.
pub fn cmd_profile(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep(&cfg.profile)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("profile.csv"), sweep_csv(&rows))?;
    fs::write(out.join("profile.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Writes `grad_check.json`; the caller decides the exit status.
pub fn cmd_grad_check(cfg: &RunConfig, out: &Path) -> Result<CheckReport> {
    let report = run_suite(cfg.seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("grad_check.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Configuration of one ablation row applied on top of `base`.
pub fn ablation_variant(base: &RunConfig, row: &str) -> Result<(RunConfig, &'static str)> {
    let mut c = base.clone();
    let m = &mut c.model;
    m.noncentral_mode = NoncentralMode::Neighborhood;
    // rows (a)-(c) use the setting for plain local queries
    m.omega = 0.25;
    m.a_meters = 0.55;
    m.use_improved_local_queries = false;
    m.use_noncentral_branch = true;
    m.use_gt_neighborhood = false;
    c.loss.lambda_noncentral = 1.0;
    let label = match row {
        "a" => {
            m.use_noncentral_branch = false;
            c.loss.lambda_noncentral = 0.0;
            "baseline"
        }
        "b" => "+ anchor neighborhoods",
        "c" => {
            m.use_gt_neighborhood = true;
            "+ GT neighborhoods"
        }
        "d" => {
            m.use_gt_neighborhood = true;
            m.use_improved_local_queries = true;
            m.omega = 0.2;
            m.a_meters = 0.5;
            "+ improved local queries"
        }
        "e" => {
            m.use_gt_neighborhood = true;
            m.noncentral_mode = NoncentralMode::Random;
            "random anchors + GT neighborhoods"
        }
        other => return Err(Error::Config(format!("unknown ablation row `{other}`"))),
    };
    c.train.resume_from = None;
    c.validate()?;
    Ok((c, label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub label: String,
    pub seed: u64,
    pub map: f64,
    pub class_ap: Vec<Option<f64>>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// `(row, mean mAP over seeds)`.
    pub means: Vec<(String, f64)>,
}

impl AblationTable {
    pub fn mean(&self, row: &str) -> Option<f64> {
        self.means.iter().find(|(r, _)| r == row).map(|(_, m)| *m)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| row | config | seed | mAP | final loss |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| ({}) | {} | {} | {:.4} | {:.4} |\n",
                r.row, r.label, r.seed, r.map, r.final_loss
            ));
        }
        for (r, m) in &self.means {
            s.push_str(&format!("| ({r}) | mean | - | {m:.4} | - |\n"));
        }
        s
    }
}

/// Trains and evaluates every requested row for every seed on one dataset.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationTable> {
    let train = load_checked(cfg, out, "train")?;
    let val = load_checked(cfg, out, "val")?;
    let seeds = if cfg.ablation.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablation.seeds.clone()
    };
    let mut rows = Vec::new();
    for &seed in &seeds {
        for row in &cfg.ablation.rows {
            let (mut c, label) = ablation_variant(cfg, row)?;
            c.seed = seed;
            let dir = out.join("ablation").join(format!("seed{seed}")).join(row);
            let summary = train_on(&c, &dir, &train)?;
            let model = load_model(&c, &summary.final_checkpoint)?;
            let report = evaluate_model(&model, &val, &c.eval.metric())?;
            fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
            rows.push(AblationRow {
                row: row.clone(),
                label: label.to_string(),
                seed,
                map: report.map,
                class_ap: report.classes.iter().map(|c| c.ap).collect(),
                final_loss: summary.epoch_losses.last().copied().unwrap_or(f64::NAN),
            });
        }
    }
    let means = cfg
        .ablation
        .rows
        .iter()
        .map(|r| {
            let v: Vec<f64> = rows.iter().filter(|x| &x.row == r).map(|x| x.map).collect();
            (r.clone(), v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let table = AblationTable { rows, means };
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(out.join("ablation.md"), table.markdown())?;
    Ok(table)
}
