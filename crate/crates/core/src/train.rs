//! Training loop, checkpoints and reproducible random streams.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::eval::scene_targets;
use crate::geometry::ResampledElement;
use crate::matching::{compute_loss, BranchLoss, LayerLoss, LossConfig, LossReport, NoncentralTargets};
use crate::model::{ForwardHooks, Model};
use crate::tensor::{read_archive, write_archive, AdamState, AdamW, Archive, ParamStore, Tape, Tensor};
use crate::EanRng;

/// Purposes of the independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Shuffle(u64),
    Iteration(u64),
    Dropout(u64),
}

/// Generator for one purpose; the same `(seed, purpose)` always yields the
/// same sequence regardless of what else the run has drawn.
pub fn stream_rng(seed: u64, purpose: Stream) -> EanRng {
    let (tag, idx) = match purpose {
        Stream::Init => (1u64, 0u64),
        Stream::Shuffle(e) => (2, e),
        Stream::Iteration(s) => (3, s),
        Stream::Dropout(s) => (4, s),
    };
    let mut rng = EanRng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | (idx & ((1 << 56) - 1)));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Multiply the learning rate by `lr_drop_factor` once this fraction of
    /// the epochs has elapsed.
    pub lr_drop_at: Option<f64>,
    pub lr_drop_factor: f64,
    /// Worker threads over the scenes of a batch.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        Self {
            epochs: 30,
            batch_size: 4,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            checkpoint_every: 0,
            resume_from: None,
            grad_clip: None,
            lr_drop_at: Some(0.65),
            lr_drop_factor: 0.1,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch_size and threads must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self, epoch: usize) -> AdamW {
        let dropped = self.lr_drop_at.is_some_and(|f| epoch as f64 >= f * self.epochs as f64);
        AdamW {
            lr: if dropped { self.lr * self.lr_drop_factor } else { self.lr },
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub scenes: Vec<u64>,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Mean total loss of every epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
    pub first_epoch: usize,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
}

/// Everything the loop needs besides the data.
pub struct Trainer<'a> {
    pub model: Model,
    pub adam: AdamState,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Extra metadata stored with every checkpoint.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub out_dir: &'a Path,
}

/// Mean of several loss reports, field by field.
pub fn mean_report(reports: &[LossReport]) -> LossReport {
    let k = reports.len().max(1) as f64;
    let mut out = LossReport {
        layers: reports.first().map(|r| {
            r.layers
                .iter()
                .map(|l| LayerLoss {
                    center: BranchLoss::default(),
                    noncentral: l.noncentral.as_ref().map(|_| BranchLoss::default()),
                })
                .collect()
        })
        .unwrap_or_default(),
        ..Default::default()
    };
    for r in reports {
        out.total += r.total / k;
        out.center += r.center / k;
        out.noncentral += r.noncentral / k;
        for (o, l) in out.layers.iter_mut().zip(&r.layers) {
            o.center.cls += l.center.cls / k;
            o.center.pts += l.center.pts / k;
            if let (Some(a), Some(b)) = (o.noncentral.as_mut(), l.noncentral.as_ref()) {
                a.cls += b.cls / k;
                a.pts += b.pts / k;
            }
        }
    }
    out
}

/// Forward, loss and backward of one scene. Returns parameter gradients.
pub fn scene_gradients(
    model: &Model,
    scene: &Scene,
    targets: &[ResampledElement],
    loss_cfg: &LossConfig,
    rng: &mut EanRng,
    dropout_rng: &mut EanRng,
) -> Result<(BTreeMap<String, Tensor>, LossReport)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let bev = tape.constant(scene.bev.clone());
    let nc = if loss_cfg.lambda_noncentral != 0.0 {
        model.sample_noncentral(rng)
    } else {
        None
    };
    let det = model.forward(&mut tape, &bound, bev, nc.as_ref(), ForwardHooks::default(), Some(dropout_rng), None)?;
    let twin = NoncentralTargets {
        use_gt_neighborhood: model.cfg.use_gt_neighborhood,
        omega: model.cfg.omega,
    };
    let (loss, report) = compute_loss(&mut tape, &det, targets, loss_cfg, twin, rng)?;
    if !report.total.is_finite() {
        return Err(Error::NumericFault {
            layer: 0,
            what: format!("non-finite loss on scene {}", scene.scene_id),
        });
    }
    let mut grads = tape.backward(loss)?;
    Ok((bound.collect_grads(&mut grads, &model.params), report))
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

const CKPT_ADAM_M: &str = "adam.m.";
const CKPT_ADAM_V: &str = "adam.v.";

impl Trainer<'_> {
    pub fn checkpoint(&self) -> Archive {
        let mut a = Archive::default();
        for (k, t) in self.model.params.iter() {
            a.tensors.insert(k.clone(), t.clone());
        }
        for (k, t) in &self.adam.m {
            a.tensors.insert(format!("{CKPT_ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.adam.v {
            a.tensors.insert(format!("{CKPT_ADAM_V}{k}"), t.clone());
        }
        a.meta = self.meta.clone();
        a.meta.insert("epoch".into(), self.epoch.into());
        a.meta.insert("adam_step".into(), self.adam.step.into());
        a.meta.insert("seed".into(), self.seed.into());
        a.meta
            .insert("model".into(), serde_json::to_value(&self.model.cfg).expect("config serializes"));
        a
    }

    /// Restores parameters, optimizer moments and the epoch counter.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let a = read_archive(path)?;
        let (params, adam) = split_checkpoint(&a)?;
        let mut init = stream_rng(self.seed, Stream::Init);
        self.model = Model::from_params(self.model.cfg.clone(), params, &mut init)?;
        self.adam = adam;
        self.epoch = a
            .meta
            .get("epoch")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint lacks epoch".into()))? as usize;
        Ok(())
    }

    /// Runs the remaining epochs over `scenes`, appending JSON lines to
    /// `log`.
    pub fn run(&mut self, scenes: &[Scene], log: &mut dyn Write) -> Result<TrainSummary> {
        self.train.validate()?;
        if scenes.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let targets: Vec<Vec<ResampledElement>> = scenes
            .iter()
            .map(|s| scene_targets(s, self.model.cfg.points))
            .collect::<Result<_>>()?;
        for (s, t) in scenes.iter().zip(&targets) {
            if t.len() > self.model.cfg.groups {
                return Err(Error::Config(format!(
                    "scene {} has {} elements but only {} query groups",
                    s.scene_id,
                    t.len(),
                    self.model.cfg.groups
                )));
            }
        }
        fs::create_dir_all(self.out_dir)?;
        let first_epoch = self.epoch;
        let mut epoch_losses = Vec::new();
        let bs = self.train.batch_size;
        while self.epoch < self.train.epochs {
            let e = self.epoch;
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            order.shuffle(&mut stream_rng(self.seed, Stream::Shuffle(e as u64)));
            let opt = self.train.optimizer(e);
            let mut epoch_sum = 0.0;
            for batch in order.chunks(bs) {
                let step = self.adam.step;
                let results = self.batch_gradients(scenes, &targets, batch, step)?;
                let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
                let mut reports = Vec::with_capacity(batch.len());
                for (g, r) in results {
                    for (k, t) in g {
                        match grads.get_mut(&k) {
                            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(k, t);
                            }
                        }
                    }
                    reports.push(r);
                }
                let inv = 1.0 / batch.len() as f64;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|g| *g *= inv);
                }
                if let Some(c) = self.train.grad_clip {
                    clip_global_norm(&mut grads, c);
                }
                opt.step(&mut self.model.params, &grads, &mut self.adam)?;
                let report = mean_report(&reports);
                epoch_sum += report.total * batch.len() as f64;
                let line = IterationLog {
                    epoch: e,
                    step,
                    lr: opt.lr,
                    scenes: batch.iter().map(|&i| scenes[i].scene_id).collect(),
                    loss: report,
                };
                writeln!(log, "{}", serde_json::to_string(&line)?)?;
            }
            epoch_losses.push(epoch_sum / scenes.len() as f64);
            self.epoch += 1;
            let every = self.train.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.train.epochs {
                write_archive(&self.out_dir.join(format!("epoch{:03}.ckpt", self.epoch)), &self.checkpoint())?;
            }
        }
        let final_checkpoint = self.out_dir.join("final.ckpt");
        write_archive(&final_checkpoint, &self.checkpoint())?;
        Ok(TrainSummary {
            epoch_losses,
            first_epoch,
            steps: self.adam.step,
            final_checkpoint,
        })
    }

    fn batch_gradients(
        &self,
        scenes: &[Scene],
        targets: &[Vec<ResampledElement>],
        batch: &[usize],
        step: u64,
    ) -> Result<Vec<(BTreeMap<String, Tensor>, LossReport)>> {
        // Each scene of the batch gets its own stream so results do not
        // depend on how scenes are spread over threads.
        let one = |slot: usize, i: usize| -> Result<(BTreeMap<String, Tensor>, LossReport)> {
            let idx = step * self.train.batch_size as u64 + slot as u64;
            let mut rng = stream_rng(self.seed, Stream::Iteration(idx));
            let mut drop = stream_rng(self.seed, Stream::Dropout(idx));
            scene_gradients(&self.model, &scenes[i], &targets[i], &self.loss, &mut rng, &mut drop).inspect_err(|_| {
                self.dump_fault(step, &scenes[i]);
            })
        };
        let threads = self.train.threads.min(batch.len());
        if threads <= 1 {
            return batch.iter().enumerate().map(|(slot, &i)| one(slot, i)).collect();
        }
        let jobs: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|&(slot, i)| one(slot, i)).collect::<Vec<_>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("worker panicked"));
            }
            out.into_iter().collect()
        })
    }

    fn dump_fault(&self, step: u64, scene: &Scene) {
        let dump = serde_json::json!({
            "epoch": self.epoch,
            "step": step,
            "scene_id": scene.scene_id,
            "elements": scene.elements.len(),
        });
        let _ = fs::create_dir_all(self.out_dir);
        let _ = fs::write(self.out_dir.join("fault_dump.json"), dump.to_string());
        let _ = write_archive(&self.out_dir.join("fault_params.ckpt"), &self.checkpoint());
    }
}

/// Separates model parameters from optimizer moments in a checkpoint.
pub fn split_checkpoint(a: &Archive) -> Result<(ParamStore, AdamState)> {
    let mut params = ParamStore::new();
    let mut adam = AdamState::default();
    for (k, t) in &a.tensors {
        if let Some(n) = k.strip_prefix(CKPT_ADAM_M) {
            adam.m.insert(n.to_string(), t.clone());
        } else if let Some(n) = k.strip_prefix(CKPT_ADAM_V) {
            adam.v.insert(n.to_string(), t.clone());
        } else {
            params.insert(k.clone(), t.clone());
        }
    }
    adam.step = a.meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(0);
    if adam.m.is_empty() {
        adam = AdamState::new(&params);
    }
    Ok((params, adam))
}
