//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ean_core::data::{generate_split, GeneratorConfig};
use ean_core::eval::{average_precision, evaluate, oracle_predictions, scene_targets, EvalConfig, EvalReport};
use ean_core::geometry::{
    chamfer_distance, dist, gt_neighborhood_radius, perturb_in_gt_neighborhood, resample, square_neighborhood_offset,
    MapClass, MapElement, Point,
};
use ean_core::glsa::{glsa_forward, init_glsa, AttentionTrace, GlsaConfig, GlsaHooks};
use ean_core::gradcheck::{run_suite, tiny_model_config};
use ean_core::matching::{hungarian, orderings, point_cost, reorder};
use ean_core::profiler::{count_glsa, memory_proxy, scaling_factor};
use ean_core::run::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, RunConfig};
use ean_core::tensor::{read_archive, ParamStore, Tape, Tensor};
use ean_core::EanRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn within_factor_two(measured: f64, predicted: f64) -> bool {
    measured >= predicted / 2.0 && measured <= predicted * 2.0
}

fn scaling() -> Outcome {
    let big = scaling_factor(100, 20, 256)?;
    let mid = scaling_factor(50, 20, 256)?;
    let (gl, _) = count_glsa(100, 20, 256, 1)?;
    let terms = (gl.o1, gl.o2, gl.o3) == (1_026_000, 2_560_000, 21_506_000);
    let ok = within_factor_two(big.measured, 0.0225) && within_factor_two(mid.measured, 0.0425) && terms;
    Ok((
        ok,
        format!(
            "ratio(100,20,256) {:.5} vs 0.0225, ratio(50,20,256) {:.5} vs 0.0425, O1 {} O2 {} O3 {}",
            big.measured, mid.measured, gl.o1, gl.o2, gl.o3
        ),
    ))
}

fn memory() -> Outcome {
    let m = memory_proxy(100, 20)?;
    let frac = m.glsa as f64 / m.vanilla as f64;
    Ok((
        m.vanilla == 4_000_000 && frac <= 0.02,
        format!("{} vs {} elements ({:.2}%)", m.glsa, m.vanilla, 100.0 * frac),
    ))
}

fn gradients() -> Outcome {
    let report = run_suite(0)?;
    let cfg = tiny_model_config();
    let tiny_shape = (cfg.groups, cfg.points, cfg.dim, cfg.layers) == (3, 4, 8, 1);
    let has_tiny = report.results.iter().any(|r| r.name == "tiny_model_loss");
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty gradient suite")?;
    let ok = report.passed() && tiny_shape && has_tiny && report.tolerance <= 1e-4 && worst.max_rel_error < 1e-4;
    Ok((
        ok,
        format!("{} checks, worst {} at {:.2e}", report.results.len(), worst.name, worst.max_rel_error),
    ))
}

struct Block {
    cfg: GlsaConfig,
    store: ParamStore,
}

impl Block {
    fn new(seed: u64, groups: usize) -> Result<Self, ean_core::Error> {
        let cfg = GlsaConfig::new(16, 2, groups);
        let mut store = ParamStore::new();
        let mut rng = EanRng::seed_from_u64(seed);
        init_glsa(&mut store, "b", &cfg, &mut rng)?;
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
        }
        Ok(Self { cfg, store })
    }

    fn run(&self, c: &Tensor, p: &Tensor, hooks: GlsaHooks, trace: Option<&mut AttentionTrace>) -> Result<Tensor, ean_core::Error> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let (c, p) = (tape.constant(c.clone()), tape.constant(p.clone()));
        let out = glsa_forward(&mut tape, &bound, "b", &self.cfg, c, p, hooks, trace)?;
        Ok(tape.value(out.out).clone())
    }
}

fn random_tensor(rng: &mut EanRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Output `(g, j)` is input `(gperm[g], pperm[g][j])`.
fn permute(t: &Tensor, gperm: &[usize], pperm: &[Vec<usize>]) -> Tensor {
    let s = t.shape();
    let (n, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(t.numel());
    for (g, &sg) in gperm.iter().enumerate() {
        for &sj in &pperm[g] {
            out.extend_from_slice(&t.data()[(sg * n + sj) * w..(sg * n + sj + 1) * w]);
        }
    }
    Tensor::new(s, out).expect("same shape")
}

fn glsa_invariants() -> Outcome {
    let (m, n, d) = (6, 5, 16);
    let mut rng = EanRng::seed_from_u64(40);
    let block = Block::new(41, m)?;
    let c = random_tensor(&mut rng, &[m, n, d], -1.0, 1.0);
    let p = random_tensor(&mut rng, &[m, n, 2], 0.0, 1.0);

    let mut trace = AttentionTrace::capturing();
    let base = block.run(&c, &p, GlsaHooks::default(), Some(&mut trace))?;
    let mut row_err: f64 = 0.0;
    for name in ["A_q", "A_p", "A_2", "A_3"] {
        let a = trace.captured.get(name).ok_or("attention matrix not captured")?;
        let cols = *a.shape().last().ok_or("scalar attention")?;
        for row in a.data().chunks_exact(cols) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let id_points = vec![(0..n).collect::<Vec<_>>(); m];
    let mut gperm: Vec<usize> = (0..m).collect();
    gperm.shuffle(&mut rng);
    let mut moved = Block { cfg: block.cfg, store: block.store.clone() };
    let local = moved.store.get("b.local").ok_or("missing local queries")?.clone();
    let w = local.shape()[1];
    let rows = gperm.iter().flat_map(|&r| local.data()[r * w..(r + 1) * w].to_vec()).collect();
    moved.store.insert("b.local", Tensor::new(local.shape(), rows)?);
    let out = moved.run(&permute(&c, &gperm, &id_points), &permute(&p, &gperm, &id_points), GlsaHooks::default(), None)?;
    let group_err = out.max_abs_diff(&permute(&base, &gperm, &id_points));

    let ident: Vec<usize> = (0..m).collect();
    let pperm: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let out = block.run(&permute(&c, &ident, &pperm), &permute(&p, &ident, &pperm), GlsaHooks::default(), None)?;
    let point_err = out.max_abs_diff(&permute(&base, &ident, &pperm));

    let hooks = GlsaHooks { zero_step2: true };
    let local_base = block.run(&c, &p, hooks, None)?;
    let (mut c2, mut p2) = (c.clone(), p.clone());
    c2.data_mut()[2 * n * d..3 * n * d].iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p2.data_mut()[2 * n * 2..3 * n * 2].iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
    let changed = block.run(&c2, &p2, hooks, None)?;
    let per = n * d;
    let mut local_ok = true;
    for g in 0..m {
        let same = local_base.data()[g * per..(g + 1) * per] == changed.data()[g * per..(g + 1) * per];
        local_ok &= same == (g != 2);
    }

    let ok = row_err <= 1e-9 && group_err <= 1e-12 && point_err <= 1e-12 && local_ok;
    Ok((
        ok,
        format!(
            "row sums {row_err:.1e}, group perm {group_err:.1e}, point perm {point_err:.1e}, zeroed step 2 local {local_ok}"
        ),
    ))
}

fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    let one_way = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

fn geometry() -> Outcome {
    let mut rng = EanRng::seed_from_u64(50);
    let radius = gt_neighborhood_radius(0.25, 1.0);
    let e = MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [0.0, 9.0]], false)?;
    let r = resample(&e, 10)?;
    let mut draws = 0;
    let mut max_disp: f64 = 0.0;
    let mut radius_ok = radius == 0.125;
    while draws < 10_000 {
        let s = perturb_in_gt_neighborhood(&r, 0.25, &mut rng);
        radius_ok &= s.radius == radius;
        for (p, q) in s.base_points.iter().zip(&s.perturbed_points) {
            max_disp = max_disp.max(dist(*p, *q));
            draws += 1;
        }
    }
    let mut square_ok = true;
    for a in [0.5, 0.55] {
        for _ in 0..10_000 {
            let [dx, dy] = square_neighborhood_offset(a, &mut rng);
            square_ok &= dx.abs() < a / 2.0 && dy.abs() < a / 2.0;
        }
    }
    let mut chamfer_err: f64 = 0.0;
    for _ in 0..100 {
        let (na, nb) = (rng.random_range(1..30), rng.random_range(1..30));
        let mut pts = |k: usize| -> Vec<Point> {
            (0..k).map(|_| [rng.random_range(-15.0..15.0), rng.random_range(-30.0..30.0)]).collect()
        };
        let (a, b) = (pts(na), pts(nb));
        let want = brute_chamfer(&a, &b);
        chamfer_err = chamfer_err.max((chamfer_distance(&a, &b)? - want).abs() / want.max(1.0));
    }
    let ok = radius_ok && max_disp <= radius && square_ok && chamfer_err <= 1e-12;
    Ok((
        ok,
        format!(
            "r {radius}, max displacement {max_disp:.4} over {draws} draws, square offsets inside {square_ok}, chamfer rel err {chamfer_err:.1e}"
        ),
    ))
}

fn brute_assignment(cost: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
    if row == cost.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.min(cost[row][c] + brute_assignment(cost, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn matching() -> Outcome {
    let mut rng = EanRng::seed_from_u64(60);
    let mut hung_bad = 0;
    for trial in 0..1000 {
        let cols = rng.random_range(1..=6);
        let rows = rng.random_range(1..=cols);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| if trial % 3 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(-5.0..5.0) })
                    .collect()
            })
            .collect();
        let a = hungarian(&cost)?;
        let got: f64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        if (got - brute_assignment(&cost, 0, &mut vec![false; cols])).abs() > 1e-9 {
            hung_bad += 1;
        }
    }
    let mean_l1 = |a: &[Point], b: &[Point]| {
        a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs()).sum::<f64>() / a.len() as f64
    };
    let mut cost_bad = 0;
    for n in 1..=8 {
        for closed in [false, true] {
            for _ in 0..50 {
                let mut pts = || -> Vec<Point> { (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect() };
                let (gt, pred) = (pts(), pts());
                let mut want = f64::INFINITY;
                for s in 0..if closed { n } else { 1 } {
                    for rev in [false, true] {
                        let mut t = gt.clone();
                        if rev {
                            t.reverse();
                        }
                        t.rotate_left(s);
                        want = want.min(mean_l1(&pred, &t));
                    }
                }
                let (got, o) = point_cost(&pred, &gt, closed)?;
                let count_ok = orderings(n, closed).len() == if closed { 2 * n } else { 2 };
                if (got - want).abs() > 1e-12 || (mean_l1(&pred, &reorder(&gt, o)) - got).abs() > 1e-12 || !count_ok {
                    cost_bad += 1;
                }
            }
        }
    }
    Ok((
        hung_bad == 0 && cost_bad == 0,
        format!("hungarian mismatches {hung_bad}/1000, point_cost mismatches {cost_bad}/800"),
    ))
}

fn monotone_in_threshold(r: &EvalReport) -> bool {
    r.classes.iter().all(|c| {
        let aps: Vec<f64> = c.per_threshold.iter().filter_map(|t| t.ap).collect();
        aps.windows(2).all(|w| w[0] <= w[1])
    })
}

fn evaluation(extra: &[EvalReport]) -> Outcome {
    let scenes = generate_split(&GeneratorConfig::default(), 0, 1 << 32, 64)?;
    let gts: Vec<_> = scenes.iter().map(|s| scene_targets(s, 10)).collect::<Result<_, _>>()?;
    let preds: Vec<_> = gts.iter().map(|g| oracle_predictions(g)).collect();
    let oracle = evaluate(&preds, &gts, &EvalConfig::default())?;
    let five_sixths = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2).ok_or("AP undefined")?;
    let hand_ok = (five_sixths - 5.0 / 6.0).abs() <= 1e-15;
    let mono = monotone_in_threshold(&oracle) && extra.iter().all(monotone_in_threshold);
    Ok((
        oracle.map == 1.0 && hand_ok && mono,
        format!(
            "oracle mAP {}, hand case {five_sixths:.15}, AP monotone over {} evaluated splits {mono}",
            oracle.map,
            1 + extra.len()
        ),
    ))
}

fn training_smoke(out: &Path, reports: &mut Vec<EvalReport>) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::load(None, &["seed=0".into()])?;
    cmd_gen_data(&cfg, out)?;
    let summary = cmd_train(&cfg, out)?;
    let report = cmd_eval(&cfg, out)?;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let first = *summary.epoch_losses.first().ok_or("no epochs")?;
    let last = *summary.epoch_losses.last().ok_or("no epochs")?;
    let ok = last <= 0.5 * first && report.map >= 0.30 && minutes <= 30.0;
    let detail = format!(
        "loss {first:.4} -> {last:.4} ({:.0}%), val mAP {:.4}, {minutes:.1} min",
        100.0 * last / first,
        report.map
    );
    reports.push(report);
    Ok((ok, detail))
}

fn ablation(out: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::load(
        None,
        &["seed=0".into(), "ablation.seeds=[0,1,2]".into(), r#"ablation.rows=["a","c"]"#.into()],
    )?;
    if !out.join("data").exists() {
        cmd_gen_data(&cfg, out)?;
    }
    let table = cmd_ablate(&cfg, out)?;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let (a, c) = (table.mean("a").ok_or("row a missing")?, table.mean("c").ok_or("row c missing")?);
    let per_seed: Vec<String> = table.rows.iter().map(|r| format!("{}@{} {:.4}", r.row, r.seed, r.map)).collect();
    Ok((
        c >= a && minutes <= 120.0,
        format!("mean mAP (c) {c:.4} vs (a) {a:.4} [{}], {minutes:.1} min", per_seed.join(", ")),
    ))
}

fn reproducibility(out: &Path) -> Outcome {
    let small = [
        "seed=7".to_string(),
        "data.train_scenes=8".into(),
        "data.val_scenes=2".into(),
        "train.epochs=3".into(),
        "train.checkpoint_every=1".into(),
        "train.threads=1".into(),
    ];
    let cfg = RunConfig::load(None, &small)?;
    cmd_gen_data(&cfg, out)?;
    let run = |name: &str, cfg: &RunConfig| -> Result<_, ean_core::Error> {
        let dir = out.join(name);
        let mut c = cfg.clone();
        c.data.dir = Some(out.join("data"));
        cmd_train(&c, &dir)
    };
    let a = run("a", &cfg)?;
    let b = run("b", &cfg)?;
    let identical = std::fs::read(&a.final_checkpoint)? == std::fs::read(&b.final_checkpoint)?;
    let mut resumed_cfg = cfg.clone();
    resumed_cfg.train.resume_from = Some(out.join("a").join("epoch001.ckpt"));
    let r = run("r", &resumed_cfg)?;
    let losses_equal = r.epoch_losses.iter().map(|x| x.to_bits()).eq(a.epoch_losses[1..].iter().map(|x| x.to_bits()));
    let params_equal = read_archive(&r.final_checkpoint)?.tensors == read_archive(&a.final_checkpoint)?.tensors;
    Ok((
        identical && losses_equal && params_equal,
        format!("bit-identical checkpoints {identical}, resumed losses bit-exact {losses_equal}, resumed tensors equal {params_equal}"),
    ))
}

fn main() -> ExitCode {
    let work = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot create a work directory: {e}");
            return ExitCode::FAILURE;
        }
    };
    let train_dir = work.path().join("train");
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(n);
        }
    };
    record(1, "scaling factor", scaling());
    record(2, "memory proxy", memory());
    record(3, "gradient correctness", gradients());
    record(4, "grouped attention invariants", glsa_invariants());
    record(5, "geometry and neighborhoods", geometry());
    record(6, "matching oracles", matching());
    let smoke = training_smoke(&train_dir, &mut reports);
    record(7, "evaluation oracle", evaluation(&reports));
    record(8, "training smoke", smoke);
    record(9, "ablation direction", ablation(&train_dir));
    record(10, "reproducibility", reproducibility(&work.path().join("repro")));
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
