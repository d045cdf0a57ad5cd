//! The decoder: query units, a stack of attention / BEV sampling /
//! feed-forward layers, per-layer prediction heads and iterative anchor
//! refinement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::meters_to_normalized_scale;
use crate::glsa::{
    glsa_forward, init_glsa, init_vanilla_decoder, vanilla_decoder_attention, AttentionTrace, GlsaConfig, GlsaHooks,
};
use crate::nn::{init_layer_norm, init_linear, init_linear_zero, layer_norm, Linear};
use crate::query::{assemble_queries, NoncentralAnchors, NoncentralMode, QueryLayout, QueryUnitBatch, QueryVars};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttentionKind {
    #[default]
    Glsa,
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub sampling_points: usize,
    /// Foreground classes; the heads emit one extra background logit.
    pub classes: usize,
    pub points: usize,
    pub groups: usize,
    pub a_meters: f64,
    pub omega: f64,
    pub use_noncentral_branch: bool,
    pub use_gt_neighborhood: bool,
    pub use_improved_local_queries: bool,
    pub use_group_mean: bool,
    pub noncentral_mode: NoncentralMode,
    pub self_attention: SelfAttentionKind,
    pub bev_channels: usize,
    pub bev_height: usize,
    pub bev_width: usize,
    /// Radius in meters of the initial BEV sampling pattern.
    pub sampling_radius_m: f64,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub anchor_eps: f64,
    pub pe_temperature: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            sampling_points: 4,
            classes: 3,
            points: 10,
            groups: 25,
            a_meters: 0.5,
            omega: 0.2,
            use_noncentral_branch: true,
            use_gt_neighborhood: true,
            use_improved_local_queries: true,
            use_group_mean: true,
            noncentral_mode: NoncentralMode::Neighborhood,
            self_attention: SelfAttentionKind::Glsa,
            bev_channels: 16,
            bev_height: 100,
            bev_width: 50,
            sampling_radius_m: 2.0,
            ffn_mult: 4,
            dropout: 0.0,
            ln_eps: 1e-5,
            anchor_eps: 1e-5,
            pe_temperature: crate::query::DEFAULT_PE_TEMPERATURE,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.layers == 0 || self.points == 0 || self.groups == 0 || self.sampling_points == 0 {
            return bad("layers, points, groups and sampling_points must be positive");
        }
        if self.classes == 0 {
            return bad("at least one foreground class is required");
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.bev_channels == 0 || self.bev_height == 0 || self.bev_width == 0 {
            return bad("BEV dims must be positive");
        }
        if !(self.a_meters > 0.0) || !(self.omega >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("a_meters must be > 0, omega >= 0 and dropout in [0, 1)");
        }
        if self.ffn_mult == 0 || !(self.anchor_eps > 0.0 && self.anchor_eps < 0.5) {
            return bad("ffn_mult must be positive and anchor_eps in (0, 0.5)");
        }
        Ok(())
    }

    pub fn glsa(&self) -> GlsaConfig {
        GlsaConfig {
            dim: self.dim,
            heads: self.heads,
            groups: self.groups,
            improved_local_queries: self.use_improved_local_queries,
            use_group_mean: self.use_group_mean,
            ln_eps: self.ln_eps,
            pe_temperature: self.pe_temperature,
        }
    }

    pub fn layout(&self) -> QueryLayout {
        QueryLayout {
            groups: self.groups,
            points: self.points,
            dim: self.dim,
        }
    }

    /// Logits per group: foreground classes plus background.
    pub fn logits(&self) -> usize {
        self.classes + 1
    }
}

/// One decoder layer's predictions for one branch.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[M̂, K + 1]`
    pub class_logits: Var,
    /// `[M̂, N, 2]`, normalized, inside `[0, 1]²`.
    pub points: Var,
}

/// Per-layer outputs of the central branch and, in training, of the
/// non-central twin.
#[derive(Clone, Debug)]
pub struct DetectionSet {
    pub central: Vec<LayerOutput>,
    pub noncentral: Option<Vec<LayerOutput>>,
}

impl DetectionSet {
    pub fn last(&self) -> &LayerOutput {
        self.central.last().expect("at least one layer")
    }
}

/// Test switches for [`Model::forward`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardHooks {
    pub glsa: GlsaHooks,
    /// Skip anchor refinement: every layer reports its input anchors.
    pub freeze_anchors: bool,
}

/// Decoder weights and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
}

fn layer_prefix(l: usize) -> String {
    format!("dec{l}")
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let units = QueryUnitBatch::init(cfg.groups, cfg.points, cfg.dim, cfg.a_meters, rng)?;
        units.export(&mut params);
        let n = cfg.dim;
        let s = cfg.sampling_points;
        for l in 0..cfg.layers {
            let p = layer_prefix(l);
            match cfg.self_attention {
                SelfAttentionKind::Glsa => init_glsa(&mut params, &format!("{p}.sa"), &cfg.glsa(), rng)?,
                SelfAttentionKind::Vanilla => init_vanilla_decoder(&mut params, &format!("{p}.sa"), n, rng),
            }
            let hs = cfg.heads * s;
            init_linear_zero(&mut params, &format!("{p}.ca.off"), n, 2 * hs);
            params.insert(format!("{p}.ca.off.b"), sampling_pattern(cfg.heads, s, cfg.sampling_radius_m)?);
            init_linear_zero(&mut params, &format!("{p}.ca.w"), n, hs);
            init_linear(&mut params, &format!("{p}.ca.proj"), cfg.heads * cfg.bev_channels, n, rng);
            init_layer_norm(&mut params, &format!("{p}.ca.norm"), n);
            init_linear(&mut params, &format!("{p}.ffn.1"), n, cfg.ffn_mult * n, rng);
            init_linear(&mut params, &format!("{p}.ffn.2"), cfg.ffn_mult * n, n, rng);
            init_layer_norm(&mut params, &format!("{p}.ffn.norm"), n);
            init_linear(&mut params, &format!("{p}.cls"), n, cfg.logits(), rng);
            init_linear(&mut params, &format!("{p}.pt.1"), n, n, rng);
            init_linear_zero(&mut params, &format!("{p}.pt.2"), n, 2);
        }
        Ok(Self { cfg, params })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the expected shape.
    pub fn from_params<R: Rng + ?Sized>(cfg: DecoderConfig, params: ParamStore, rng: &mut R) -> Result<Self> {
        let template = Self::new(cfg, rng)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {name} missing for this config"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Config("checkpoint holds parameters this config does not use".into()));
        }
        Ok(Self {
            cfg: template.cfg,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Full forward pass. `bev` is a `[C, H, W]` node; passing non-central
    /// anchors selects training mode and runs the twin branch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        bev: Var,
        noncentral: Option<&NoncentralAnchors>,
        hooks: ForwardHooks,
        mut dropout_rng: Option<&mut crate::EanRng>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<DetectionSet> {
        let cfg = &self.cfg;
        let expect = [cfg.bev_channels, cfg.bev_height, cfg.bev_width];
        if tape.shape(bev) != expect {
            return Err(Error::Dimension(format!(
                "BEV {:?} does not match configured {:?}",
                tape.shape(bev),
                expect
            )));
        }
        let vars = QueryVars::from_bound(bound);
        let q = assemble_queries(tape, &vars, cfg.layout(), noncentral)?;
        let mut branches = vec![(q.content, q.central_pos, Vec::new())];
        if let Some(p) = q.noncentral_pos {
            branches.push((q.content, p, Vec::new()));
        }
        for l in 0..cfg.layers {
            for (bi, (content, pos, outs)) in branches.iter_mut().enumerate() {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.scope = format!("layer{l}.{}.", if bi == 0 { "central" } else { "noncentral" });
                }
                let (x, out, next) =
                    self.layer(tape, bound, l, bev, *content, *pos, hooks, dropout_rng.as_deref_mut(), trace.as_deref_mut())?;
                *content = x;
                *pos = next;
                outs.push(out);
            }
        }
        let mut it = branches.into_iter().map(|(_, _, o)| o);
        let central = it.next().expect("central branch");
        Ok(DetectionSet {
            central,
            noncentral: it.next(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: usize,
        bev: Var,
        content: Var,
        pos: Var,
        hooks: ForwardHooks,
        mut rng: Option<&mut crate::EanRng>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, LayerOutput, Var)> {
        let cfg = &self.cfg;
        let (m, npts, s) = (cfg.groups, cfg.points, cfg.sampling_points);
        let p = layer_prefix(l);
        let lin = |name: &str| Linear::bind(bound, &format!("{p}.{name}"));
        let fault = |what: &str| Error::NumericFault {
            layer: l,
            what: what.to_string(),
        };

        let sa = match cfg.self_attention {
            SelfAttentionKind::Glsa => {
                glsa_forward(tape, bound, &format!("{p}.sa"), &cfg.glsa(), content, pos, hooks.glsa, trace)?
            }
            SelfAttentionKind::Vanilla => {
                vanilla_decoder_attention(tape, bound, &format!("{p}.sa"), &cfg.glsa(), content, pos, trace)?
            }
        };
        let x = sa.out;
        if !tape.value(x).is_finite() {
            return Err(fault("self-attention output"));
        }

        // BEV sampling around each anchor: `h` heads with `S` points each
        let k = m * npts;
        let h = cfg.heads;
        let cb = cfg.bev_channels;
        let off = lin("ca.off").forward(tape, x)?;
        let off = tape.reshape(off, &[k, h * s, 2])?;
        let anchor = tape.reshape(pos, &[k, 1, 2])?;
        let anchor = tape.expand(anchor, &[k, h * s, 2])?;
        let loc = tape.add(anchor, off)?;
        let loc = tape.reshape(loc, &[k * h * s, 2])?;
        let sampled = tape.bilinear_sample(bev, loc)?;
        let sampled = tape.reshape(sampled, &[k, h, s, cb])?;
        let w = lin("ca.w").forward(tape, x)?;
        let w = tape.reshape(w, &[k, h, 1, s])?;
        let w = tape.softmax_lastdim(w)?;
        let agg = tape.matmul(w, sampled)?;
        let agg = tape.reshape(agg, &[m, npts, h * cb])?;
        let ca = lin("ca.proj").forward(tape, agg)?;
        let ca = dropout(tape, ca, cfg.dropout, rng.as_deref_mut())?;
        let x = tape.add(x, ca)?;
        let x = layer_norm(tape, bound, &format!("{p}.ca.norm"), x, cfg.ln_eps)?;

        let hdn = lin("ffn.1").forward(tape, x)?;
        let hdn = tape.gelu(hdn);
        let hdn = dropout(tape, hdn, cfg.dropout, rng.as_deref_mut())?;
        let f = lin("ffn.2").forward(tape, hdn)?;
        let x = tape.add(x, f)?;
        let x = layer_norm(tape, bound, &format!("{p}.ffn.norm"), x, cfg.ln_eps)?;
        if !tape.value(x).is_finite() {
            return Err(fault("feed-forward output"));
        }

        let pooled = tape.mean_axis(x, 1)?;
        let class_logits = lin("cls").forward(tape, pooled)?;
        let points = if hooks.freeze_anchors {
            pos
        } else {
            let d = lin("pt.1").forward(tape, x)?;
            let d = tape.relu(d);
            let delta = lin("pt.2").forward(tape, d)?;
            let base = tape.inverse_sigmoid(pos, cfg.anchor_eps);
            let moved = tape.add(base, delta)?;
            tape.sigmoid(moved)
        };
        if !tape.value(class_logits).is_finite() || !tape.value(points).is_finite() {
            return Err(fault("prediction heads"));
        }
        let next = tape.detach(points);
        Ok((x, LayerOutput { class_logits, points }, next))
    }

    /// Fresh non-central placement for one training iteration, or `None`
    /// when the twin branch is disabled.
    pub fn sample_noncentral<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<NoncentralAnchors> {
        self.cfg
            .use_noncentral_branch
            .then(|| crate::query::sample_noncentral(self.cfg.layout(), self.cfg.noncentral_mode, self.cfg.a_meters, rng))
    }
}

/// Initial sampling offsets: head `k` looks along direction `2πk/h`, its
/// `S` points at radii `r (j + 1) / S`. Flattened `[dx, dy, ...]` in
/// normalized units, head-major.
fn sampling_pattern(heads: usize, s: usize, radius_m: f64) -> Result<Tensor> {
    let [sx, sy] = meters_to_normalized_scale();
    let mut data = Vec::with_capacity(2 * heads * s);
    for k in 0..heads {
        let t = 2.0 * std::f64::consts::PI * k as f64 / heads as f64;
        for j in 0..s {
            let r = radius_m * (j + 1) as f64 / s as f64;
            data.push(r * t.cos() * sx);
            data.push(r * t.sin() * sy);
        }
    }
    Tensor::new(&[2 * heads * s], data)
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut crate::EanRng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let shape = tape.shape(x).to_vec();
            let keep = 1.0 / (1.0 - p);
            let numel = tape.value(x).numel();
            let mask = (0..numel).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
            let mask = tape.constant(Tensor::new(&shape, mask)?);
            tape.mul(x, mask)
        }
        _ => Ok(x),
    }
}

/// Number of learnable scalars for a configuration.
pub fn count_parameters(cfg: &DecoderConfig) -> Result<usize> {
    let mut rng = <crate::EanRng as rand::SeedableRng>::seed_from_u64(0);
    Ok(Model::new(cfg.clone(), &mut rng)?.parameter_count())
}
