//! Grouped local self-attention and the all-token reference attention.
//!
//! Queries are laid out as `[M̂, N, n]`: `M̂` groups of `N` point queries.
//! Every group owns a learnable local query that first summarizes its group
//! (step 1), then exchanges information with the other groups' local
//! queries through plain self-attention over `M̂` tokens (step 2), and is
//! finally prepended to its group's keys and values so that each point
//! query attends over `N + 1` tokens (step 3).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, layer_norm, Linear};
use crate::query::sine_pe;
use crate::tensor::{Archive, Bound, ParamStore, Tape, Tensor, Var};

/// Which attention product produced a trace record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnSite {
    /// Step 1, first half of the local query.
    LocalQ,
    /// Step 1, second half of the local query (improved local queries only).
    LocalP,
    /// Step 2, attention among group tokens.
    Groups,
    /// Step 3, attention within each group over `N + 1` tokens.
    WithinGroup,
    /// All-token attention.
    Vanilla,
}

/// Shape of one scaled dot-product attention evaluation: `batch * heads`
/// independent `rows x cols` score matrices with key width `head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCall {
    pub site: AttnSite,
    pub batch: usize,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub head_dim: usize,
}

impl AttentionCall {
    pub fn score_macs(&self) -> u64 {
        (self.batch * self.heads * self.rows * self.cols * self.head_dim) as u64
    }

    /// `A @ v` costs the same as the score product.
    pub fn value_macs(&self) -> u64 {
        self.score_macs()
    }

    /// Number of softmax normalizations (one per score row).
    pub fn softmax_rows(&self) -> u64 {
        (self.batch * self.heads * self.rows) as u64
    }

    pub fn matrix_elements(&self) -> u64 {
        (self.batch * self.heads * self.rows * self.cols) as u64
    }
}

/// Records every attention evaluation of a forward pass and, when
/// `capture` is set, the attention matrices and intermediate tensors.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub calls: Vec<AttentionCall>,
    pub capture: bool,
    /// Prefix for captured names, e.g. `layer0.central.`.
    pub scope: String,
    pub captured: BTreeMap<String, Tensor>,
}

impl AttentionTrace {
    pub fn capturing() -> Self {
        Self {
            capture: true,
            ..Default::default()
        }
    }

    fn record(&mut self, call: AttentionCall) {
        self.calls.push(call);
    }

    fn keep(&mut self, name: &str, t: &Tensor) {
        if self.capture {
            self.captured.insert(format!("{}{name}", self.scope), t.clone());
        }
    }

    pub fn calls_at(&self, site: AttnSite) -> impl Iterator<Item = &AttentionCall> {
        self.calls.iter().filter(move |c| c.site == site)
    }

    /// Writes the captured tensors as a tensor archive.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive {
            tensors: self.captured.clone(),
            ..Default::default()
        };
        a.meta
            .insert("calls".into(), serde_json::to_value(&self.calls).expect("calls serialize"));
        a
    }
}

/// Test and profiling switches for [`glsa_forward`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GlsaHooks {
    /// Replace the step-2 output by zeros so groups cannot see each other.
    pub zero_step2: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub groups: usize,
    /// Two local-query halves (`2n` wide) instead of a single `n`-wide one.
    pub improved_local_queries: bool,
    /// Add the per-group mean of the point queries to the step-2 input.
    pub use_group_mean: bool,
    pub ln_eps: f64,
    pub pe_temperature: f64,
}

impl GlsaConfig {
    pub fn new(dim: usize, heads: usize, groups: usize) -> Self {
        Self {
            dim,
            heads,
            groups,
            improved_local_queries: true,
            use_group_mean: true,
            ln_eps: 1e-5,
            pe_temperature: crate::query::DEFAULT_PE_TEMPERATURE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.dim, self.heads)?;
        if self.groups == 0 {
            return Err(Error::Config("at least one group is required".into()));
        }
        Ok(())
    }

    pub fn local_width(&self) -> usize {
        if self.improved_local_queries {
            2 * self.dim
        } else {
            self.dim
        }
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide embedding dim {dim}")));
    }
    Ok(())
}

const STEP1: [&str; 4] = ["s1.k", "s1.v", "s1.lq", "s1.lp"];
const STEP3: [&str; 5] = ["s3.q", "s3.k", "s3.v", "s3.kl", "s3.vl"];

/// Registers the parameters of one GL-SA block under `prefix`.
pub fn init_glsa<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &GlsaConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let n = cfg.dim;
    for name in STEP1 {
        if name == "s1.lp" && !cfg.improved_local_queries {
            continue;
        }
        init_linear(store, &format!("{prefix}.{name}"), n, n, rng);
    }
    init_vanilla(store, &format!("{prefix}.s2"), n, rng);
    for name in STEP3 {
        init_linear(store, &format!("{prefix}.{name}"), n, n, rng);
    }
    init_linear(store, &format!("{prefix}.out"), n, n, rng);
    init_layer_norm(store, &format!("{prefix}.norm"), n);
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    let width = cfg.local_width();
    let local = (0..cfg.groups * width).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
    store.insert(format!("{prefix}.local"), Tensor::new(&[cfg.groups, width], local)?);
    Ok(())
}

/// Registers q/k/v/out projections of a plain attention block.
pub fn init_vanilla<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, rng);
    }
}

/// Scaled dot-product attention with `heads` heads.
/// `q: [B, Tq, n]`, `k, v: [B, Tk, n]` -> `[B, Tq, n]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    site: AttnSite,
    mut trace: Option<&mut AttentionTrace>,
    capture_name: Option<&str>,
) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || tape.shape(v) != ks.as_slice() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Dimension(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            qs,
            ks,
            tape.shape(v)
        )));
    }
    let (b, tq, n) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    check_heads(n, heads)?;
    let dh = n / heads;
    let split = |tape: &mut Tape, x: Var, t: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, t, heads, dh])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(tape, q, tq)?;
    let kh = split(tape, k, tk)?;
    let vh = split(tape, v, tk)?;
    let kt = tape.transpose_last2(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_lastdim(scores)?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.record(AttentionCall {
            site,
            batch: b,
            heads,
            rows: tq,
            cols: tk,
            head_dim: dh,
        });
        if let Some(name) = capture_name {
            tr.keep(name, tape.value(attn));
        }
    }
    let out = tape.matmul(attn, vh)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[b, tq, n])
}

/// Plain self-attention block over `x: [B, T, n]` with residual:
/// `x + o(attn(q(x), k(x), v(x)))`.
pub fn vanilla_self_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    site: AttnSite,
    trace: Option<&mut AttentionTrace>,
    capture_name: Option<&str>,
) -> Result<Var> {
    let proj = |tape: &mut Tape, p: &str| Linear::bind(bound, &format!("{prefix}.{p}")).forward(tape, x);
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let a = multi_head_attention(tape, q, k, v, heads, site, trace, capture_name)?;
    let o = Linear::bind(bound, &format!("{prefix}.o")).forward(tape, a)?;
    tape.add(x, o)
}

/// Output of one GL-SA call.
#[derive(Clone, Copy, Debug)]
pub struct GlsaOutput {
    /// `LN(C + W_o Q̂)`, `[M̂, N, n]`.
    pub out: Var,
    /// Step-3 result `Q̂` before the output projection.
    pub q_hat: Var,
}

fn check_inputs(tape: &Tape, content: Var, pos: Var, cfg: &GlsaConfig) -> Result<(usize, usize)> {
    let cs = tape.shape(content);
    let ps = tape.shape(pos);
    if cs.len() != 3 || cs[2] != cfg.dim || ps.len() != 3 || ps[..2] != cs[..2] || ps[2] != 2 {
        return Err(Error::Dimension(format!(
            "GL-SA expects content [M, N, {}] and positions [M, N, 2], got {:?} and {:?}",
            cfg.dim, cs, ps
        )));
    }
    if cs[0] == 0 || cs[1] == 0 {
        return Err(Error::Dimension("GL-SA needs at least one group and one point".into()));
    }
    Ok((cs[0], cs[1]))
}

/// Grouped local self-attention over `content: [M̂, N, n]` with anchor
/// positions `pos: [M̂, N, 2]`. Weights and local queries are read from
/// `bound` under `prefix`.
pub fn glsa_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &GlsaConfig,
    content: Var,
    pos: Var,
    hooks: GlsaHooks,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<GlsaOutput> {
    cfg.validate()?;
    let (m, npts) = check_inputs(tape, content, pos, cfg)?;
    let n = cfg.dim;
    let h = cfg.heads;
    let lin = |name: &str| Linear::bind(bound, &format!("{prefix}.{name}"));

    let pe = sine_pe(tape, pos, n, cfg.pe_temperature)?;
    let qk = tape.add(content, pe)?;

    // step 1: each local query half attends over its own group
    let local = bound.var(&format!("{prefix}.local"));
    let lshape = tape.shape(local).to_vec();
    if lshape != [m, cfg.local_width()] {
        return Err(Error::Dimension(format!(
            "local queries {:?} do not match {m} groups of width {}",
            lshape,
            cfg.local_width()
        )));
    }
    let k1 = lin("s1.k").forward(tape, qk)?;
    let v1 = lin("s1.v").forward(tape, content)?;
    let step1 = |tape: &mut Tape, half: usize, proj: &str, site: AttnSite, tr: Option<&mut AttentionTrace>, cap: &str| {
        let l = tape.narrow(local, 1, half * n, n)?;
        let l = tape.reshape(l, &[m, 1, n])?;
        let q = lin(proj).forward(tape, l)?;
        let psi = multi_head_attention(tape, q, k1, v1, h, site, tr, Some(cap))?;
        tape.reshape(psi, &[m, n])
    };
    let psi_q = step1(tape, 0, "s1.lq", AttnSite::LocalQ, trace.as_deref_mut(), "A_q")?;
    let psi_p = if cfg.improved_local_queries {
        Some(step1(tape, 1, "s1.lp", AttnSite::LocalP, trace.as_deref_mut(), "A_p")?)
    } else {
        None
    };

    // step 2: interaction among group tokens
    let mut psi2 = match psi_p {
        Some(p) => {
            let s = tape.add(psi_q, p)?;
            tape.scale(s, 0.5)
        }
        None => psi_q,
    };
    let q_m = tape.mean_axis(qk, 1)?;
    if cfg.use_group_mean {
        psi2 = tape.add(psi2, q_m)?;
    }
    let psi2_tokens = tape.reshape(psi2, &[1, m, n])?;
    let psi2p = vanilla_self_attention(
        tape,
        bound,
        &format!("{prefix}.s2"),
        psi2_tokens,
        h,
        AttnSite::Groups,
        trace.as_deref_mut(),
        Some("A_2"),
    )?;
    let mut psi2p = tape.reshape(psi2p, &[m, 1, n])?;
    if hooks.zero_step2 {
        psi2p = tape.constant(Tensor::zeros(&[m, 1, n]));
    }

    // step 3: within-group attention over the local token and the N points
    let q3 = lin("s3.q").forward(tape, qk)?;
    let k3 = lin("s3.k").forward(tape, qk)?;
    let v3 = lin("s3.v").forward(tape, content)?;
    let kl = lin("s3.kl").forward(tape, psi2p)?;
    let vl = lin("s3.vl").forward(tape, psi2p)?;
    let keys = tape.concat(&[kl, k3], 1)?;
    let values = tape.concat(&[vl, v3], 1)?;
    let q_hat = multi_head_attention(tape, q3, keys, values, h, AttnSite::WithinGroup, trace.as_deref_mut(), Some("A_3"))?;

    let projected = lin("out").forward(tape, q_hat)?;
    let res = tape.add(content, projected)?;
    let out = layer_norm(tape, bound, &format!("{prefix}.norm"), res, cfg.ln_eps)?;

    if let Some(tr) = trace {
        if tr.capture {
            tr.keep("psi_q", tape.value(psi_q));
            if let Some(p) = psi_p {
                tr.keep("psi_p", tape.value(p));
            }
            tr.keep("psi_2", tape.value(psi2));
            tr.keep("psi_2_prime", tape.value(psi2p));
            tr.keep("q_m", tape.value(q_m));
            tr.keep("q_hat", tape.value(q_hat));
        }
    }
    debug_assert_eq!(tape.shape(out), &[m, npts, n]);
    Ok(GlsaOutput { out, q_hat })
}

/// Runs the central and non-central branches through the same weights and
/// local queries. The branches never attend to each other.
pub fn glsa_forward_dual(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &GlsaConfig,
    central: (Var, Var),
    noncentral: (Var, Var),
    hooks: GlsaHooks,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<(GlsaOutput, GlsaOutput)> {
    for (a, b) in [(central.0, noncentral.0), (central.1, noncentral.1)] {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Dimension(format!(
                "branch shapes differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
    }
    let c = glsa_forward(tape, bound, prefix, cfg, central.0, central.1, hooks, trace.as_deref_mut())?;
    let nc = glsa_forward(tape, bound, prefix, cfg, noncentral.0, noncentral.1, hooks, trace)?;
    Ok((c, nc))
}

/// Reference decoder self-attention over all `M̂ * N` queries jointly:
/// queries and keys carry the positional encoding, values do not, and the
/// result is `LN(C + o(attn))` like [`glsa_forward`].
pub fn vanilla_decoder_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &GlsaConfig,
    content: Var,
    pos: Var,
    trace: Option<&mut AttentionTrace>,
) -> Result<GlsaOutput> {
    check_heads(cfg.dim, cfg.heads)?;
    let (m, npts) = check_inputs(tape, content, pos, cfg)?;
    let n = cfg.dim;
    let pe = sine_pe(tape, pos, n, cfg.pe_temperature)?;
    let qk = tape.add(content, pe)?;
    let qk = tape.reshape(qk, &[1, m * npts, n])?;
    let flat = tape.reshape(content, &[1, m * npts, n])?;
    let lin = |name: &str| Linear::bind(bound, &format!("{prefix}.{name}"));
    let q = lin("q").forward(tape, qk)?;
    let k = lin("k").forward(tape, qk)?;
    let v = lin("v").forward(tape, flat)?;
    let a = multi_head_attention(tape, q, k, v, cfg.heads, AttnSite::Vanilla, trace, Some("A_van"))?;
    let q_hat = tape.reshape(a, &[m, npts, n])?;
    let projected = lin("o").forward(tape, q_hat)?;
    let res = tape.add(content, projected)?;
    let out = layer_norm(tape, bound, &format!("{prefix}.norm"), res, cfg.ln_eps)?;
    Ok(GlsaOutput { out, q_hat })
}

/// Parameters for [`vanilla_decoder_attention`].
pub fn init_vanilla_decoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
    init_vanilla(store, prefix, dim, rng);
    init_layer_norm(store, &format!("{prefix}.norm"), dim);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, npts: usize, n: usize, h: usize) -> (ParamStore, GlsaConfig, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GlsaConfig::new(n, h, m);
        let mut store = ParamStore::default();
        init_glsa(&mut store, "g", &cfg, &mut rng).unwrap();
        let c = Tensor::new(&[m, npts, n], (0..m * npts * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = Tensor::new(&[m, npts, 2], (0..m * npts * 2).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (store, cfg, c, p)
    }

    #[test]
    fn minimal_case_is_finite() {
        let (store, cfg, c, p) = setup(1, 1, 8, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let c = tape.constant(c);
        let p = tape.constant(p);
        let mut tr = AttentionTrace::default();
        let out = glsa_forward(&mut tape, &bound, "g", &cfg, c, p, GlsaHooks::default(), Some(&mut tr)).unwrap();
        assert_eq!(tape.shape(out.out), &[1, 1, 8]);
        assert!(tape.value(out.out).is_finite());
        let s3 = tr.calls_at(AttnSite::WithinGroup).next().unwrap();
        assert_eq!(s3.cols, 2);
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = GlsaConfig::new(10, 4, 2);
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(init_glsa(&mut store, "g", &cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_vanilla_reduces_to_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        init_vanilla(&mut store, "v", 4, &mut rng);
        let x = Tensor::new(&[1, 1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = vanilla_self_attention(&mut tape, &bound, "v", xv, 2, AttnSite::Vanilla, None, None).unwrap();
        let vv = Linear::bind(&bound, "v.v").forward(&mut tape, xv).unwrap();
        let ov = Linear::bind(&bound, "v.o").forward(&mut tape, vv).unwrap();
        let expect = tape.add(xv, ov).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-15);
    }
}
