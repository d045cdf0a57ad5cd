//! Operation counts of grouped local attention against all-token attention,
//! measured by running instrumented forward passes.
//!
//! Accounting: the step terms count score and value products of every
//! attention call plus one unit per point token of a group, and exclude the
//! linear projections. Step 1 counts the first local-query half only, step 2
//! counts score products only, and the all-token baseline counts score
//! products only. The tape's MAC counter gives a separate figure that
//! includes projections.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glsa::{
    glsa_forward, init_glsa, init_vanilla_decoder, vanilla_decoder_attention, AttentionTrace, AttnSite, GlsaConfig,
    GlsaHooks,
};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::EanRng;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub score_macs: u64,
    pub value_macs: u64,
    pub softmax_rows: u64,
    /// Attention-matrix elements, the memory proxy.
    pub matrix_elements: u64,
    pub o1: u64,
    pub o2: u64,
    pub o3: u64,
    /// `O1 + O2 + O3` for grouped attention, score MACs for the baseline.
    pub total: u64,
    /// Every multiply-accumulate of the pass, projections included.
    pub full_macs: u64,
}

fn sum_calls(trace: &AttentionTrace, f: impl Fn(&crate::glsa::AttentionCall) -> u64) -> u64 {
    trace.calls.iter().map(f).sum()
}

fn random(rng: &mut EanRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn check_dims(m: usize, n: usize, d: usize, h: usize) -> Result<()> {
    if m == 0 || n == 0 || d == 0 || h == 0 || d % h != 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "profiling needs positive dims with heads dividing d and d divisible by 4, got M={m} N={n} d={d} h={h}"
        )));
    }
    Ok(())
}

/// Instrumented grouped-attention forward at `M̂ = m`, `N = n`, width `d`,
/// `h` heads.
pub fn count_glsa(m: usize, n: usize, d: usize, h: usize) -> Result<(OpCounter, AttentionTrace)> {
    check_dims(m, n, d, h)?;
    let mut rng = EanRng::seed_from_u64(0);
    let cfg = GlsaConfig::new(d, h, m);
    let mut store = ParamStore::new();
    init_glsa(&mut store, "p", &cfg, &mut rng)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let c = tape.constant(random(&mut rng, &[m, n, d], -1.0, 1.0));
    let p = tape.constant(random(&mut rng, &[m, n, 2], 0.0, 1.0));
    let macs_before = tape.mac_count();
    let mut trace = AttentionTrace::default();
    glsa_forward(&mut tape, &bound, "p", &cfg, c, p, GlsaHooks::default(), Some(&mut trace))?;
    let term = |site: AttnSite, with_value: bool, points: bool| -> u64 {
        trace
            .calls_at(site)
            .map(|c| {
                let v = if with_value { c.value_macs() } else { 0 };
                let tokens = if points { (c.batch * n) as u64 } else { 0 };
                c.score_macs() + v + tokens
            })
            .sum()
    };
    let o1 = term(AttnSite::LocalQ, true, true);
    let o2 = term(AttnSite::Groups, false, false);
    let o3 = term(AttnSite::WithinGroup, true, true);
    let counter = OpCounter {
        score_macs: sum_calls(&trace, |c| c.score_macs()),
        value_macs: sum_calls(&trace, |c| c.value_macs()),
        softmax_rows: sum_calls(&trace, |c| c.softmax_rows()),
        matrix_elements: sum_calls(&trace, |c| c.matrix_elements()),
        o1,
        o2,
        o3,
        total: o1 + o2 + o3,
        full_macs: tape.mac_count() - macs_before,
    };
    Ok((counter, trace))
}

/// Instrumented all-token attention over `m * n` queries.
pub fn count_vanilla(m: usize, n: usize, d: usize, h: usize) -> Result<(OpCounter, AttentionTrace)> {
    check_dims(m, n, d, h)?;
    let mut rng = EanRng::seed_from_u64(0);
    let cfg = GlsaConfig::new(d, h, m);
    let mut store = ParamStore::new();
    init_vanilla_decoder(&mut store, "v", d, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let c = tape.constant(random(&mut rng, &[m, n, d], -1.0, 1.0));
    let p = tape.constant(random(&mut rng, &[m, n, 2], 0.0, 1.0));
    let macs_before = tape.mac_count();
    let mut trace = AttentionTrace::default();
    vanilla_decoder_attention(&mut tape, &bound, "v", &cfg, c, p, Some(&mut trace))?;
    let score = sum_calls(&trace, |c| c.score_macs());
    let counter = OpCounter {
        score_macs: score,
        value_macs: sum_calls(&trace, |c| c.value_macs()),
        softmax_rows: sum_calls(&trace, |c| c.softmax_rows()),
        matrix_elements: sum_calls(&trace, |c| c.matrix_elements()),
        total: score,
        full_macs: tape.mac_count() - macs_before,
        ..Default::default()
    };
    Ok((counter, trace))
}

/// Closed-form step terms for one head of width `d`.
pub fn closed_form(m: u64, n: u64, d: u64) -> (u64, u64, u64, u64) {
    let o1 = m * (2 * n * d + n);
    let o2 = m * m * d;
    let o3 = m * (2 * n * (n + 1) * d + n);
    let van = (m * n) * (m * n) * d;
    (o1, o2, o3, van)
}

pub fn predicted_scaling(m: usize, n: usize) -> f64 {
    2.0 / m as f64 + 1.0 / (n * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub measured: f64,
    pub predicted: f64,
    /// `measured / predicted`.
    pub ratio: f64,
}

/// Measured and predicted cost ratio, single head.
pub fn scaling_factor(m: usize, n: usize, d: usize) -> Result<Scaling> {
    let (gl, _) = count_glsa(m, n, d, 1)?;
    let (van, _) = count_vanilla(m, n, d, 1)?;
    let measured = gl.total as f64 / van.total as f64;
    let predicted = predicted_scaling(m, n);
    Ok(Scaling {
        measured,
        predicted,
        ratio: measured / predicted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProxy {
    pub glsa: u64,
    pub vanilla: u64,
    pub glsa_closed_form: u64,
    pub vanilla_closed_form: u64,
}

/// Attention-matrix element counts, measured on single-head passes and in
/// closed form (`2MN + M² + MN(N+1)` against `(MN)²`).
pub fn memory_proxy(m: usize, n: usize) -> Result<MemoryProxy> {
    let (gl, _) = count_glsa(m, n, 4, 1)?;
    let (van, _) = count_vanilla(m, n, 4, 1)?;
    let (mu, nu) = (m as u64, n as u64);
    Ok(MemoryProxy {
        glsa: gl.matrix_elements,
        vanilla: van.matrix_elements,
        glsa_closed_form: 2 * mu * nu + mu * mu + mu * nu * (nu + 1),
        vanilla_closed_form: (mu * nu) * (mu * nu),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// `(M̂, N, d)` triples.
    pub grid: Vec<[usize; 3]>,
    pub heads: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        let mut grid = Vec::new();
        for m in [25, 50, 100] {
            for n in [10, 20] {
                for d in [64, 256] {
                    grid.push([m, n, d]);
                }
            }
        }
        Self { grid, heads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub glsa: OpCounter,
    pub vanilla: OpCounter,
    pub measured: f64,
    pub predicted: f64,
    /// Wall-clock of the two forward passes; informational only.
    pub glsa_ms: f64,
    pub vanilla_ms: f64,
}

pub fn sweep(cfg: &ProfileConfig) -> Result<Vec<SweepRow>> {
    cfg.grid
        .iter()
        .map(|&[m, n, d]| {
            let t = Instant::now();
            let (glsa, _) = count_glsa(m, n, d, cfg.heads)?;
            let glsa_ms = t.elapsed().as_secs_f64() * 1e3;
            let t = Instant::now();
            let (vanilla, _) = count_vanilla(m, n, d, cfg.heads)?;
            let vanilla_ms = t.elapsed().as_secs_f64() * 1e3;
            Ok(SweepRow {
                m,
                n,
                d,
                measured: glsa.total as f64 / vanilla.total as f64,
                predicted: predicted_scaling(m, n),
                glsa,
                vanilla,
                glsa_ms,
                vanilla_ms,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "M,N,d,O1,O2,O3,O_GL,O_van,measured_∂,predicted_∂";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.m, r.n, r.d, r.glsa.o1, r.glsa.o2, r.glsa.o3, r.glsa.total, r.vanilla.total, r.measured, r.predicted
        ));
    }
    s
}
