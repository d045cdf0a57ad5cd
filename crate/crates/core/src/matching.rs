//! Set matching between predicted groups and ground-truth elements, and the
//! training loss over both query branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{perturb_in_gt_neighborhood, to_normalized, Point, ResampledElement};
use crate::model::{DetectionSet, LayerOutput};
use crate::tensor::{Tape, Tensor, Var};

/// An admissible traversal of a ground-truth point sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ordering {
    /// Starting index into the ground-truth sequence.
    pub shift: usize,
    pub reversed: bool,
}

impl Ordering {
    pub const FORWARD: Ordering = Ordering {
        shift: 0,
        reversed: false,
    };

    /// Index into the ground truth for output position `j` of `n`.
    pub fn index(&self, j: usize, n: usize) -> usize {
        if self.reversed {
            (self.shift + n - j % n) % n
        } else {
            (self.shift + j) % n
        }
    }
}

/// All traversals treated as the same element: forward and reversed for
/// polylines, every start vertex in both directions for polygons.
pub fn orderings(n: usize, closed: bool) -> Vec<Ordering> {
    if closed {
        (0..n)
            .flat_map(|s| {
                [false, true].map(|reversed| Ordering { shift: s, reversed })
            })
            .collect()
    } else {
        vec![
            Ordering::FORWARD,
            Ordering {
                shift: n - 1,
                reversed: true,
            },
        ]
    }
}

pub fn reorder(points: &[Point], ordering: Ordering) -> Vec<Point> {
    let n = points.len();
    (0..n).map(|j| points[ordering.index(j, n)]).collect()
}

/// Minimum over admissible orderings of the mean per-point L1 distance
/// (summed over both coordinates). Ties keep the first ordering in
/// [`orderings`].
pub fn point_cost(pred: &[Point], gt: &[Point], closed: bool) -> Result<(f64, Ordering)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "point_cost needs equal non-zero lengths, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = gt.len();
    let mut best = (f64::INFINITY, Ordering::FORWARD);
    for o in orderings(n, closed) {
        let c = pred
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let q = gt[o.index(j, n)];
                (p[0] - q[0]).abs() + (p[1] - q[1]).abs()
            })
            .sum::<f64>()
            / n as f64;
        if c < best.0 {
            best = (c, o);
        }
    }
    Ok(best)
}

/// Exact minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` cost matrix (`rows <= cols`). Returns the column of each
/// row. Among equal-cost optima the search prefers lower column indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if rows > cols {
        return Err(Error::Config(format!("{rows} targets exceed {cols} predictions")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Contract("non-finite matching cost".into()));
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// A ground-truth element in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub points: Vec<Point>,
    pub closed: bool,
}

impl Target {
    pub fn from_resampled(e: &ResampledElement) -> Self {
        Self {
            class: e.class.index(),
            points: e.points.iter().map(|&p| to_normalized(p)).collect(),
            closed: e.closed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction group, target index)`, one per target, in target order.
    pub pairs: Vec<(usize, usize)>,
    /// Orderings under which each matched prediction is compared.
    pub orderings: Vec<Ordering>,
    pub unmatched: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cost_cls: f64,
    pub cost_pts: f64,
    pub weight_cls: f64,
    pub weight_pts: f64,
    pub lambda_center: f64,
    pub lambda_noncentral: f64,
    /// Cross-entropy weight of rows labelled background.
    pub bg_weight: f64,
    /// Reuse the central assignment for the twin branch.
    pub shared_assignment: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cost_cls: 2.0,
            cost_pts: 5.0,
            weight_cls: 2.0,
            weight_pts: 5.0,
            lambda_center: 1.0,
            lambda_noncentral: 1.0,
            bg_weight: 1.0,
            shared_assignment: false,
        }
    }
}

/// Matches `M̂` predictions against targets. `probs` are class
/// probabilities per group (`K + 1` each), `points` the `N` predicted
/// points per group, both normalized.
pub fn hungarian_match(
    probs: &[Vec<f64>],
    points: &[Vec<Point>],
    targets: &[Target],
    cfg: &LossConfig,
) -> Result<Assignment> {
    let m = probs.len();
    if points.len() != m {
        return Err(Error::Dimension(format!("{} class rows but {} point rows", m, points.len())));
    }
    if targets.len() > m {
        return Err(Error::Config(format!("{} targets exceed {} query groups", targets.len(), m)));
    }
    let mut cost = Vec::with_capacity(targets.len());
    let mut best_orders = Vec::with_capacity(targets.len());
    for t in targets {
        let mut row = Vec::with_capacity(m);
        let mut ords = Vec::with_capacity(m);
        for (p, pts) in probs.iter().zip(points) {
            let (pc, o) = point_cost(pts, &t.points, t.closed)?;
            row.push(-cfg.cost_cls * p[t.class] + cfg.cost_pts * pc);
            ords.push(o);
        }
        cost.push(row);
        best_orders.push(ords);
    }
    let cols = hungarian(&cost)?;
    let pairs: Vec<(usize, usize)> = cols.iter().enumerate().map(|(g, &i)| (i, g)).collect();
    let orderings = pairs.iter().map(|&(i, g)| best_orders[g][i]).collect();
    let mut matched = vec![false; m];
    for &(i, _) in &pairs {
        matched[i] = true;
    }
    Ok(Assignment {
        pairs,
        orderings,
        unmatched: (0..m).filter(|&i| !matched[i]).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchLoss {
    pub cls: f64,
    pub pts: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub center: BranchLoss,
    pub noncentral: Option<BranchLoss>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub center: f64,
    pub noncentral: f64,
    pub layers: Vec<LayerLoss>,
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = *t.shape().last().expect("class axis");
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut r = row.to_vec();
            crate::tensor::softmax_row(&mut r);
            r
        })
        .collect()
}

fn point_rows(t: &Tensor) -> Vec<Vec<Point>> {
    let s = t.shape();
    let n = s[1];
    t.data()
        .chunks_exact(2 * n)
        .map(|g| g.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect()
}

/// Loss of one branch at one layer under `assignment`.
fn branch_loss(
    tape: &mut Tape,
    out: &LayerOutput,
    targets: &[Target],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Var, BranchLoss)> {
    let shape = tape.shape(out.class_logits).to_vec();
    let (m, k) = (shape[0], shape[1]);
    let bg = k - 1;
    let mut labels = vec![bg; m];
    let mut weights = vec![cfg.bg_weight; m];
    for &(i, g) in &assignment.pairs {
        labels[i] = targets[g].class;
        weights[i] = 1.0;
    }
    let ce = tape.cross_entropy(out.class_logits, &labels, Some(&weights))?;
    let cls_value = tape.value(ce).item();
    let cls = tape.scale(ce, cfg.weight_cls);
    if assignment.pairs.is_empty() {
        return Ok((
            cls,
            BranchLoss {
                cls: cls_value,
                pts: 0.0,
            },
        ));
    }
    let pshape = tape.shape(out.points).to_vec();
    let n = pshape[1];
    let flat = tape.reshape(out.points, &[m, 2 * n])?;
    let rows: Vec<usize> = assignment.pairs.iter().map(|&(i, _)| i).collect();
    let picked = tape.index_select(flat, &rows)?;
    let mut tgt = Vec::with_capacity(rows.len() * 2 * n);
    for (&(_, g), &o) in assignment.pairs.iter().zip(&assignment.orderings) {
        tgt.extend(reorder(&targets[g].points, o).into_iter().flatten());
    }
    let tgt = tape.constant(Tensor::new(&[rows.len(), 2 * n], tgt)?);
    let diff = tape.sub(picked, tgt)?;
    let diff = tape.abs(diff);
    // mean over points of the per-point L1 (x and y summed)
    let l1 = tape.mean_all(diff);
    let l1 = tape.scale(l1, 2.0);
    let pts_value = tape.value(l1).item();
    let pts = tape.scale(l1, cfg.weight_pts);
    Ok((
        tape.add(cls, pts)?,
        BranchLoss {
            cls: cls_value,
            pts: pts_value,
        },
    ))
}

fn match_layer(tape: &Tape, out: &LayerOutput, targets: &[Target], cfg: &LossConfig) -> Result<Assignment> {
    let probs = softmax_rows(tape.value(out.class_logits));
    let points = point_rows(tape.value(out.points));
    hungarian_match(&probs, &points, targets, cfg)
}

/// How the twin branch's targets are formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoncentralTargets {
    /// Perturb targets inside their GT neighborhoods.
    pub use_gt_neighborhood: bool,
    pub omega: f64,
}

/// Deep-supervised loss `λ₁ L_center + λ₂ L_noncentral`, each averaged over
/// decoder layers. Non-central targets are redrawn on every call.
pub fn compute_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    det: &DetectionSet,
    gts: &[ResampledElement],
    cfg: &LossConfig,
    twin: NoncentralTargets,
    rng: &mut R,
) -> Result<(Var, LossReport)> {
    let targets: Vec<Target> = gts.iter().map(Target::from_resampled).collect();
    let layers = det.central.len();
    if layers == 0 {
        return Err(Error::Contract("detection set has no layers".into()));
    }
    let twin_outputs = det.noncentral.as_ref().filter(|_| cfg.lambda_noncentral != 0.0);
    let twin_targets: Option<Vec<Target>> = twin_outputs.map(|_| {
        if twin.use_gt_neighborhood {
            gts.iter()
                .map(|e| {
                    let s = perturb_in_gt_neighborhood(e, twin.omega, rng);
                    Target {
                        class: e.class.index(),
                        points: s.perturbed_points.iter().map(|&p| to_normalized(p)).collect(),
                        closed: e.closed,
                    }
                })
                .collect()
        } else {
            targets.clone()
        }
    });

    let mut report = LossReport::default();
    let mut center_terms = Vec::with_capacity(layers);
    let mut twin_terms = Vec::new();
    for l in 0..layers {
        let out = &det.central[l];
        let asg = match_layer(tape, out, &targets, cfg)?;
        let (c, center) = branch_loss(tape, out, &targets, &asg, cfg)?;
        center_terms.push(c);
        let mut layer = LayerLoss { center, noncentral: None };
        if let (Some(outs), Some(tt)) = (twin_outputs, twin_targets.as_ref()) {
            let o = outs.get(l).ok_or_else(|| Error::Contract("twin branch has fewer layers".into()))?;
            let a = if cfg.shared_assignment {
                // keep the central pairs, refresh orderings against the twin targets
                let mut a = asg.clone();
                let points = point_rows(tape.value(o.points));
                for (k, &(i, g)) in a.pairs.iter().enumerate() {
                    a.orderings[k] = point_cost(&points[i], &tt[g].points, tt[g].closed)?.1;
                }
                a
            } else {
                match_layer(tape, o, tt, cfg)?
            };
            let (v, b) = branch_loss(tape, o, tt, &a, cfg)?;
            twin_terms.push(v);
            layer.noncentral = Some(b);
        }
        report.layers.push(layer);
    }
    let mean = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    };
    let center = mean(tape, &center_terms)?;
    report.center = tape.value(center).item();
    let mut total = tape.scale(center, cfg.lambda_center);
    if !twin_terms.is_empty() {
        let nc = mean(tape, &twin_terms)?;
        report.noncentral = tape.value(nc).item();
        let nc = tape.scale(nc, cfg.lambda_noncentral);
        total = tape.add(total, nc)?;
    }
    report.total = tape.value(total).item();
    Ok((total, report))
}
