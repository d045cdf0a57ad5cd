//! Central finite-difference verification of every backward rule.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, scene_rng, GeneratorConfig};
use crate::error::Result;
use crate::eval::scene_targets;
use crate::glsa::{glsa_forward, init_glsa, multi_head_attention, AttnSite, GlsaConfig, GlsaHooks};
use crate::matching::{compute_loss, LossConfig, NoncentralTargets};
use crate::model::{DecoderConfig, ForwardHooks, Model};
use crate::query::sine_pe;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::EanRng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst per-input relative error.
    pub max_rel_error: f64,
    pub scalars: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// `max|a - n| / max(max|n|, max|a|, floor, 1e-8)` for one input tensor.
/// `floor` is the largest gradient entry over all inputs of the check.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(floor.max(1e-8), f64::max);
    diff / scale
}

/// A scalar function of several tensors: returns the value and, when asked,
/// the gradient with respect to each input.
pub trait Objective {
    fn eval(&self, inputs: &[Tensor], want_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)>;
}

/// Compares analytic gradients with central differences at `inputs`.
pub fn check_objective(
    name: &str,
    obj: &dyn Objective,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<CheckResult> {
    let (_, grads) = obj.eval(inputs, true)?;
    let grads = grads.expect("gradients requested");
    let mut probe = inputs.to_vec();
    let mut numerics = Vec::with_capacity(grads.len());
    for t in 0..grads.len() {
        let mut numeric = vec![0.0; inputs[t].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[t].data()[i];
            probe[t].data_mut()[i] = x + step;
            let (up, _) = obj.eval(&probe, false)?;
            probe[t].data_mut()[i] = x - step;
            let (down, _) = obj.eval(&probe, false)?;
            probe[t].data_mut()[i] = x;
            *slot = (up - down) / (2.0 * step);
        }
        numerics.push(numeric);
    }
    // Inputs whose true gradient vanishes (a key bias under softmax) would
    // otherwise divide difference noise by itself.
    let global = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .chain(numerics.iter().flatten())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst: f64 = 0.0;
    for (g, numeric) in grads.iter().zip(&numerics) {
        let e = relative_error(g.data(), numeric, global);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        scalars: inputs.iter().map(Tensor::numel).sum(),
        passed: worst < tolerance,
    })
}

/// Objective built from a tape expression. Non-scalar outputs are reduced
/// by a fixed random weighting so every output element contributes.
pub struct TapeObjective<F> {
    pub build: F,
    pub seed: u64,
}

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval(&self, inputs: &[Tensor], want_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 {
            tape.reshape(out, &[])?
        } else {
            let shape = tape.shape(out).to_vec();
            let numel = tape.value(out).numel();
            let mut rng = EanRng::seed_from_u64(self.seed);
            let w = Tensor::new(&shape, (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let w = tape.constant(w);
            let p = tape.mul(out, w)?;
            tape.sum_all(p)
        };
        let value = tape.value(loss).item();
        if !want_grad {
            return Ok((value, None));
        }
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, Some(grads)))
    }
}

pub fn check_expr<F>(name: &str, inputs: &[Tensor], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_objective(
        name,
        &TapeObjective { build, seed: 17 },
        inputs,
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )
}

/// Uniform tensor on `[lo, hi)`, optionally keeping `|x|` above `gap` so
/// kinks (relu, abs) stay out of the finite-difference stencil.
pub fn random_tensor(rng: &mut EanRng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if x.abs() >= gap {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Bilinear sample points kept away from cell-center lines, where the
/// interpolant is not differentiable.
fn off_grid_points(rng: &mut EanRng, count: usize, h: usize, w: usize) -> Tensor {
    let mut coord = |extent: usize| loop {
        let t: f64 = rng.random_range(0.0..1.0);
        let f = t * extent as f64 - 0.5;
        let frac = f - f.floor();
        if f > 0.01 && f < extent as f64 - 1.01 && frac > 0.01 && frac < 0.99 {
            break t;
        }
    };
    let data = (0..count).flat_map(|_| [coord(w), coord(h)]).collect();
    Tensor::new(&[count, 2], data).expect("shape matches data")
}

/// Every differentiable tape operation plus the composite blocks.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = EanRng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let t = |rng: &mut EanRng, s: &[usize]| random_tensor(rng, s, -1.0, 1.0, 0.0);

    out.push(check_expr("matmul", &[t(r, &[3, 4]), t(r, &[4, 2])], |tp, v| tp.matmul(v[0], v[1]))?);
    out.push(check_expr("matmul_batched", &[t(r, &[2, 3, 4]), t(r, &[2, 4, 5])], |tp, v| {
        tp.matmul(v[0], v[1])
    })?);
    out.push(check_expr("matmul_broadcast", &[t(r, &[2, 2, 3, 4]), t(r, &[4, 5])], |tp, v| {
        tp.matmul(v[0], v[1])
    })?);
    out.push(check_expr("add", &[t(r, &[2, 3]), t(r, &[2, 3])], |tp, v| tp.add(v[0], v[1]))?);
    out.push(check_expr("sub", &[t(r, &[2, 3]), t(r, &[2, 3])], |tp, v| tp.sub(v[0], v[1]))?);
    out.push(check_expr("mul", &[t(r, &[2, 3]), t(r, &[2, 3])], |tp, v| tp.mul(v[0], v[1]))?);
    out.push(check_expr("scale", &[t(r, &[4])], |tp, v| Ok(tp.scale(v[0], -2.5)))?);
    out.push(check_expr("expand", &[t(r, &[3, 1])], |tp, v| tp.expand(v[0], &[2, 3, 4]))?);
    out.push(check_expr("add_broadcast", &[t(r, &[2, 3]), t(r, &[3])], |tp, v| {
        tp.add_broadcast(v[0], v[1])
    })?);
    out.push(check_expr("mul_broadcast", &[t(r, &[2, 3]), t(r, &[3])], |tp, v| {
        tp.mul_broadcast(v[0], v[1])
    })?);
    out.push(check_expr("sum_all", &[t(r, &[2, 3])], |tp, v| Ok(tp.sum_all(v[0])))?);
    out.push(check_expr("mean_all", &[t(r, &[2, 3])], |tp, v| Ok(tp.mean_all(v[0])))?);
    out.push(check_expr("sum_axis", &[t(r, &[2, 3, 4])], |tp, v| tp.sum_axis(v[0], 1))?);
    out.push(check_expr("mean_axis", &[t(r, &[2, 3, 4])], |tp, v| tp.mean_axis(v[0], 2))?);
    out.push(check_expr("concat", &[t(r, &[2, 3]), t(r, &[2, 1])], |tp, v| tp.concat(&[v[0], v[1]], 1))?);
    out.push(check_expr("narrow", &[t(r, &[3, 5])], |tp, v| tp.narrow(v[0], 1, 1, 3))?);
    out.push(check_expr("split", &[t(r, &[4, 3])], |tp, v| {
        let parts = tp.split(v[0], 0, &[1, 3])?;
        let a = tp.sum_all(parts[0]);
        let b = tp.mean_all(parts[1]);
        let b = tp.scale(b, 3.0);
        tp.add(a, b)
    })?);
    out.push(check_expr("reshape", &[t(r, &[2, 6])], |tp, v| tp.reshape(v[0], &[3, 4]))?);
    out.push(check_expr("permute", &[t(r, &[2, 3, 4])], |tp, v| tp.permute(v[0], &[2, 0, 1]))?);
    out.push(check_expr("transpose_last2", &[t(r, &[2, 3, 4])], |tp, v| tp.transpose_last2(v[0]))?);
    out.push(check_expr("index_select", &[t(r, &[4, 3])], |tp, v| tp.index_select(v[0], &[2, 0, 2]))?);
    out.push(check_expr("relu", &[random_tensor(r, &[10], -1.0, 1.0, 0.05)], |tp, v| Ok(tp.relu(v[0])))?);
    out.push(check_expr("gelu", &[random_tensor(r, &[10], -3.0, 3.0, 0.0)], |tp, v| Ok(tp.gelu(v[0])))?);
    out.push(check_expr("sigmoid", &[random_tensor(r, &[10], -4.0, 4.0, 0.0)], |tp, v| Ok(tp.sigmoid(v[0])))?);
    out.push(check_expr("sin", &[random_tensor(r, &[10], -3.0, 3.0, 0.0)], |tp, v| Ok(tp.sin(v[0])))?);
    out.push(check_expr("cos", &[random_tensor(r, &[10], -3.0, 3.0, 0.0)], |tp, v| Ok(tp.cos(v[0])))?);
    out.push(check_expr("abs", &[random_tensor(r, &[10], -1.0, 1.0, 0.05)], |tp, v| Ok(tp.abs(v[0])))?);
    out.push(check_expr("inverse_sigmoid", &[random_tensor(r, &[10], 0.05, 0.95, 0.0)], |tp, v| {
        Ok(tp.inverse_sigmoid(v[0], 1e-5))
    })?);
    out.push(check_expr("layer_norm", &[t(r, &[3, 6])], |tp, v| tp.layer_norm_lastdim(v[0], 1e-5))?);
    out.push(check_expr("softmax", &[random_tensor(r, &[3, 5], -2.0, 2.0, 0.0)], |tp, v| {
        tp.softmax_lastdim(v[0])
    })?);
    let pts = off_grid_points(r, 6, 5, 4);
    out.push(check_expr("bilinear_sample", &[t(r, &[2, 5, 4]), pts], |tp, v| {
        tp.bilinear_sample(v[0], v[1])
    })?);
    out.push(check_expr("cross_entropy", &[random_tensor(r, &[4, 3], -2.0, 2.0, 0.0)], |tp, v| {
        tp.cross_entropy(v[0], &[0, 2, 1, 2], Some(&[1.0, 0.5, 2.0, 0.1]))
    })?);
    out.push(check_expr("sine_pe", &[random_tensor(r, &[2, 3, 2], 0.0, 1.0, 0.0)], |tp, v| {
        sine_pe(tp, v[0], 8, 100.0)
    })?);
    out.push(check_expr(
        "multi_head_attention",
        &[t(r, &[2, 3, 4]), t(r, &[2, 5, 4]), t(r, &[2, 5, 4])],
        |tp, v| multi_head_attention(tp, v[0], v[1], v[2], 2, AttnSite::Vanilla, None, None),
    )?);
    out.push(glsa_check(r)?);
    Ok(out)
}

/// GL-SA block with respect to its inputs and all of its weights.
fn glsa_check(rng: &mut EanRng) -> Result<CheckResult> {
    let cfg = GlsaConfig::new(8, 2, 3);
    let mut store = ParamStore::new();
    init_glsa(&mut store, "g", &cfg, rng)?;
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(random_tensor(rng, &[3, 4, 8], -1.0, 1.0, 0.0));
    inputs.push(random_tensor(rng, &[3, 4, 2], 0.0, 1.0, 0.0));
    let k = names.len();
    check_expr("glsa_forward", &inputs, move |tp, v| {
        let bound = crate::tensor::Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let out = glsa_forward(tp, &bound, "g", &cfg, v[k], v[k + 1], GlsaHooks::default(), None)?;
        Ok(out.out)
    })
}

/// The tiny end-to-end configuration: 3 groups, 4 points, width 8, one
/// decoder layer.
pub fn tiny_model_config() -> DecoderConfig {
    DecoderConfig {
        layers: 1,
        groups: 3,
        points: 4,
        dim: 8,
        heads: 2,
        sampling_points: 2,
        bev_channels: 3,
        bev_height: 12,
        bev_width: 8,
        ..Default::default()
    }
}

struct ModelObjective {
    model: Model,
    names: Vec<String>,
    scene: crate::data::Scene,
    seed: u64,
}

impl Objective for ModelObjective {
    fn eval(&self, inputs: &[Tensor], want_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut model = self.model.clone();
        for (n, t) in self.names.iter().zip(inputs) {
            *model.params.get_mut(n).expect("known parameter") = t.clone();
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let bev = tape.constant(self.scene.bev.clone());
        let mut rng = EanRng::seed_from_u64(self.seed);
        let nc = model.sample_noncentral(&mut rng);
        let det = model.forward(&mut tape, &bound, bev, nc.as_ref(), ForwardHooks::default(), None, None)?;
        let targets = scene_targets(&self.scene, model.cfg.points)?;
        let twin = NoncentralTargets {
            use_gt_neighborhood: model.cfg.use_gt_neighborhood,
            omega: model.cfg.omega,
        };
        let (loss, report) = compute_loss(&mut tape, &det, &targets, &LossConfig::default(), twin, &mut rng)?;
        if !want_grad {
            return Ok((report.total, None));
        }
        let mut g = tape.backward(loss)?;
        let grads = bound.collect_grads(&mut g, &model.params);
        Ok((report.total, Some(self.names.iter().map(|n| grads[n].clone()).collect())))
    }
}

/// Full training loss of the tiny model against one synthetic scene, with
/// respect to every parameter.
pub fn tiny_model_check(seed: u64) -> Result<CheckResult> {
    let cfg = tiny_model_config();
    let mut rng = EanRng::seed_from_u64(seed);
    let model = Model::new(cfg.clone(), &mut rng)?;
    let gen = GeneratorConfig {
        channels: cfg.bev_channels,
        height: cfg.bev_height,
        width: cfg.bev_width,
        dividers: [1, 1],
        boundaries: [1, 1],
        crossings: [0, 0],
        max_instances: 3,
        ..Default::default()
    };
    let scene = generate_scene(&gen, 0, seed, &mut scene_rng(seed, 0))?;
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let obj = ModelObjective {
        model,
        names,
        scene,
        seed,
    };
    check_objective("tiny_model_loss", &obj, &inputs, DEFAULT_STEP, DEFAULT_TOLERANCE)
}

/// Op suite plus the tiny model.
pub fn run_suite(seed: u64) -> Result<CheckReport> {
    let mut results = op_suite(seed)?;
    results.push(tiny_model_check(seed)?);
    Ok(CheckReport {
        step: DEFAULT_STEP,
        tolerance: DEFAULT_TOLERANCE,
        results,
    })
}

fn wrong_derivative(x: f64) -> f64 {
    // true derivative of x^3 is 3x^2
    2.0 * x * x
}

/// A deliberately wrong backward rule; the checker must reject it.
pub fn sabotaged_check(seed: u64) -> Result<CheckResult> {
    let mut rng = EanRng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[6], 0.5, 1.5, 0.0);
    check_expr("cube_with_wrong_backward", &[x], |tp, v| {
        Ok(tp.elementwise(v[0], |x| x * x * x, wrong_derivative))
    })
}
