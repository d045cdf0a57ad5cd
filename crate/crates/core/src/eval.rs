//! Chamfer-thresholded average precision over a split.

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, from_normalized, resample, MapClass, Point, ResampledElement};
use crate::model::{ForwardHooks, Model};
use crate::tensor::{softmax_row, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Chamfer thresholds in meters, strictly increasing.
    pub thresholds: Vec<f64>,
    /// Predictions scoring below this are dropped.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 1.5],
            score_floor: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds[0] <= 0.0
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("thresholds must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

/// One detected element in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: MapClass,
    pub score: f64,
    pub points: Vec<Point>,
}

/// Greedy matching within one scene and class. Predictions are visited by
/// descending score (ties by input order); each claims the nearest unclaimed
/// ground truth if its Chamfer distance is below `tau`. Returns one TP flag
/// per prediction, in input order.
pub fn match_predictions(preds: &[Prediction], gts: &[&[Point]], tau: f64) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let d = chamfer_distance(&preds[i].points, gt)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, d)) = best {
            if d < tau {
                claimed[g] = true;
                flags[i] = true;
            }
        }
    }
    Ok(flags)
}

/// All-point interpolated AP. `None` when there is neither ground truth nor
/// any prediction.
pub fn average_precision(flags: &[bool], scores: &[f64], total_gt: usize) -> Option<f64> {
    assert_eq!(flags.len(), scores.len(), "one score per flag");
    if total_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(order.len());
    let mut rec = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        tp += flags[i] as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / total_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: MapClass,
    pub per_threshold: Vec<ThresholdAp>,
    /// Mean over thresholds.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean of the defined class APs (zero when none is defined).
    pub map: f64,
    pub scenes: usize,
}

impl EvalReport {
    pub fn ap_at(&self, class: MapClass, threshold: f64) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.class == class)?
            .per_threshold
            .iter()
            .find(|t| t.threshold == threshold)?
            .ap
    }
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores a whole split. `preds[s]` and `gts[s]` belong to scene `s`.
pub fn evaluate(preds: &[Vec<Prediction>], gts: &[Vec<ResampledElement>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} prediction sets for {} scenes", preds.len(), gts.len())));
    }
    let mut classes = Vec::new();
    for class in MapClass::ALL {
        let mut per_threshold = Vec::new();
        for &tau in &cfg.thresholds {
            let mut flags = Vec::new();
            let mut scores = Vec::new();
            let mut total_gt = 0;
            for (p, g) in preds.iter().zip(gts) {
                let p: Vec<Prediction> = p
                    .iter()
                    .filter(|x| x.class == class && x.score >= cfg.score_floor)
                    .cloned()
                    .collect();
                let g: Vec<&[Point]> = g.iter().filter(|e| e.class == class).map(|e| e.points.as_slice()).collect();
                total_gt += g.len();
                flags.extend(match_predictions(&p, &g, tau)?);
                scores.extend(p.iter().map(|x| x.score));
            }
            per_threshold.push(ThresholdAp {
                threshold: tau,
                ap: average_precision(&flags, &scores, total_gt),
            });
        }
        let ap = mean_defined(per_threshold.iter().map(|t| t.ap));
        classes.push(ClassReport {
            class,
            per_threshold,
            ap,
        });
    }
    let map = mean_defined(classes.iter().map(|c| c.ap)).unwrap_or(0.0);
    Ok(EvalReport {
        classes,
        map,
        scenes: preds.len(),
    })
}

/// Turns per-group class probabilities and normalized points into scored
/// predictions: the class is the most likely foreground class and the score
/// its probability.
pub fn decode_predictions(probs: &[Vec<f64>], points: &[Vec<Point>]) -> Vec<Prediction> {
    probs
        .iter()
        .zip(points)
        .map(|(p, pts)| {
            let fg = &p[..MapClass::COUNT];
            let (c, &score) = fg
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            Prediction {
                class: MapClass::from_index(c).expect("foreground class"),
                score,
                points: pts.iter().map(|&q| from_normalized(q)).collect(),
            }
        })
        .collect()
}

/// Ground truth of a scene resampled to `n` points per element.
pub fn scene_targets(scene: &Scene, n: usize) -> Result<Vec<ResampledElement>> {
    scene.elements.iter().map(|e| resample(e, n)).collect()
}

/// Ground truth fed back as unit-score predictions.
pub fn oracle_predictions(gts: &[ResampledElement]) -> Vec<Prediction> {
    gts.iter()
        .map(|e| Prediction {
            class: e.class,
            score: 1.0,
            points: e.points.clone(),
        })
        .collect()
}

/// Central-branch inference on one scene using the final decoder layer.
pub fn predict_scene(model: &Model, scene: &Scene) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let bev = tape.constant(scene.bev.clone());
    let det = model.forward(&mut tape, &bound, bev, None, ForwardHooks::default(), None, None)?;
    let last = det.last();
    let logits = tape.value(last.class_logits);
    let k = logits.shape()[1];
    if k != MapClass::COUNT + 1 {
        return Err(Error::Config(format!("model emits {k} logits, evaluation expects {}", MapClass::COUNT + 1)));
    }
    let probs: Vec<Vec<f64>> = logits
        .data()
        .chunks_exact(k)
        .map(|r| {
            let mut r = r.to_vec();
            softmax_row(&mut r);
            r
        })
        .collect();
    let pts = tape.value(last.points);
    let n = pts.shape()[1];
    let points: Vec<Vec<Point>> = pts
        .data()
        .chunks_exact(2 * n)
        .map(|g| g.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok(decode_predictions(&probs, &points))
}

/// Inference plus scoring over a split.
pub fn evaluate_model(model: &Model, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(predict_scene(model, s)?);
        gts.push(scene_targets(s, model.cfg.points)?);
    }
    evaluate(&preds, &gts, cfg)
}
