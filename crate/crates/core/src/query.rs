//! Grouped anchor query units.
//!
//! One shared template of `N` anchors `P` and content vectors `C` is copied
//! into `M̂` groups through per-group embeddings (`gp` for positions, `gc`
//! for content). Each central query has a non-central twin whose anchor is
//! displaced inside a square neighborhood and whose content is the very same
//! tensor, so both branches backpropagate into `C` and `gc`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{meters_to_normalized_scale, square_neighborhood_offset, Point};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub const PARAM_ANCHORS: &str = "query.P";
pub const PARAM_CONTENT: &str = "query.C";
pub const PARAM_GROUP_POS: &str = "query.gp";
pub const PARAM_GROUP_CONTENT: &str = "query.gc";

pub const DEFAULT_PE_TEMPERATURE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    pub groups: usize,
    pub points: usize,
    pub dim: usize,
}

/// How non-central anchors are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoncentralMode {
    /// Inside the square neighborhood of side `a` around the central anchor.
    #[default]
    Neighborhood,
    /// Anywhere on the BEV plane, independent of the central anchor.
    Random,
}

/// Per-iteration placement of the non-central anchors, `M̂ * N` entries in
/// group-major order, normalized units.
#[derive(Clone, Debug, PartialEq)]
pub enum NoncentralAnchors {
    Offsets(Vec<Point>),
    Absolute(Vec<Point>),
}

/// Learnable query-unit parameters plus the current non-central draw.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryUnitBatch {
    pub layout: QueryLayout,
    /// `[N, 2]` normalized anchor template.
    pub base_anchors: Tensor,
    /// `[N, n]`
    pub content: Tensor,
    /// `[M̂, 2]`
    pub group_pos: Tensor,
    /// `[M̂, n]`
    pub group_content: Tensor,
    pub noncentral: Option<NoncentralAnchors>,
}

impl QueryUnitBatch {
    /// Anchors uniform on the unit square, `gp = 0`, content and `gc` drawn
    /// from `N(0, 0.02²)`. Non-central anchors start empty.
    pub fn init<R: Rng + ?Sized>(groups: usize, points: usize, dim: usize, a_meters: f64, rng: &mut R) -> Result<Self> {
        if groups == 0 || points == 0 {
            return Err(Error::Config("query units need at least one group and one point".into()));
        }
        if dim % 2 != 0 {
            return Err(Error::Config(format!("embedding dim {dim} must be even")));
        }
        if a_meters.is_nan() || a_meters <= 0.0 {
            return Err(Error::Config("neighborhood side must be positive".into()));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let anchors = (0..points * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let content = (0..points * dim).map(|_| normal.sample(rng)).collect();
        let group_content = (0..groups * dim).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            layout: QueryLayout { groups, points, dim },
            base_anchors: Tensor::new(&[points, 2], anchors)?,
            content: Tensor::new(&[points, dim], content)?,
            group_pos: Tensor::zeros(&[groups, 2]),
            group_content: Tensor::new(&[groups, dim], group_content)?,
            noncentral: None,
        })
    }

    /// Draws fresh square-neighborhood offsets for every unit.
    pub fn resample_noncentral<R: Rng + ?Sized>(&mut self, a_meters: f64, rng: &mut R) {
        self.noncentral = Some(sample_noncentral(self.layout, NoncentralMode::Neighborhood, a_meters, rng));
    }

    pub fn clear_noncentral(&mut self) {
        self.noncentral = None;
    }

    pub fn export(&self, store: &mut ParamStore) {
        store.insert(PARAM_ANCHORS, self.base_anchors.clone());
        store.insert(PARAM_CONTENT, self.content.clone());
        store.insert(PARAM_GROUP_POS, self.group_pos.clone());
        store.insert(PARAM_GROUP_CONTENT, self.group_content.clone());
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> QueryVars {
        QueryVars {
            anchors: tape.leaf(self.base_anchors.clone(), trainable),
            content: tape.leaf(self.content.clone(), trainable),
            group_pos: tape.leaf(self.group_pos.clone(), trainable),
            group_content: tape.leaf(self.group_content.clone(), trainable),
        }
    }
}

/// Draws one placement of all non-central anchors.
pub fn sample_noncentral<R: Rng + ?Sized>(
    layout: QueryLayout,
    mode: NoncentralMode,
    a_meters: f64,
    rng: &mut R,
) -> NoncentralAnchors {
    let count = layout.groups * layout.points;
    match mode {
        NoncentralMode::Neighborhood => {
            let [sx, sy] = meters_to_normalized_scale();
            NoncentralAnchors::Offsets(
                (0..count)
                    .map(|_| {
                        let [dx, dy] = square_neighborhood_offset(a_meters, rng);
                        [dx * sx, dy * sy]
                    })
                    .collect(),
            )
        }
        NoncentralMode::Random => NoncentralAnchors::Absolute(
            (0..count)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect(),
        ),
    }
}

/// Query-unit parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub anchors: Var,
    pub content: Var,
    pub group_pos: Var,
    pub group_content: Var,
}

impl QueryVars {
    pub fn from_bound(bound: &Bound) -> Self {
        Self {
            anchors: bound.var(PARAM_ANCHORS),
            content: bound.var(PARAM_CONTENT),
            group_pos: bound.var(PARAM_GROUP_POS),
            group_content: bound.var(PARAM_GROUP_CONTENT),
        }
    }
}

/// Positional and content parts of both query branches. `content` is one
/// node shared by the two branches.
#[derive(Clone, Copy, Debug)]
pub struct AssembledQueries {
    /// `[M̂, N, 2]`
    pub central_pos: Var,
    /// `[M̂, N, 2]`, present when non-central anchors were supplied.
    pub noncentral_pos: Option<Var>,
    /// `[M̂, N, n]`
    pub content: Var,
}

impl AssembledQueries {
    /// `Cat(position, content)` for the central branch, `[M̂, N, 2 + n]`.
    pub fn central(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(&[self.central_pos, self.content], 2)
    }

    pub fn noncentral(&self, tape: &mut Tape) -> Result<Option<Var>> {
        self.noncentral_pos.map(|p| tape.concat(&[p, self.content], 2)).transpose()
    }
}

/// Central query `(i, j)` = `Cat(P[j] + gp[i], C[j] + gc[i])`; the
/// non-central twin adds the per-unit offset to the positional part only
/// (or replaces it outright for absolute placements).
pub fn assemble_queries(
    tape: &mut Tape,
    vars: &QueryVars,
    layout: QueryLayout,
    noncentral: Option<&NoncentralAnchors>,
) -> Result<AssembledQueries> {
    let QueryLayout { groups: m, points: n, dim } = layout;
    let grid_pos = [m, n, 2];
    let p = tape.expand(vars.anchors, &grid_pos)?;
    let gp = tape.reshape(vars.group_pos, &[m, 1, 2])?;
    let gp = tape.expand(gp, &grid_pos)?;
    let central_pos = tape.add(p, gp)?;

    let c = tape.expand(vars.content, &[m, n, dim])?;
    let gc = tape.reshape(vars.group_content, &[m, 1, dim])?;
    let gc = tape.expand(gc, &[m, n, dim])?;
    let content = tape.add(c, gc)?;

    let noncentral_pos = match noncentral {
        None => None,
        Some(NoncentralAnchors::Offsets(off)) | Some(NoncentralAnchors::Absolute(off)) if off.len() != m * n => {
            return Err(Error::Dimension(format!("{} non-central anchors for {} query units", off.len(), m * n)));
        }
        Some(NoncentralAnchors::Offsets(off)) => {
            let t = tape.constant(Tensor::new(&grid_pos, off.iter().flatten().copied().collect())?);
            Some(tape.add(central_pos, t)?)
        }
        Some(NoncentralAnchors::Absolute(abs)) => {
            Some(tape.constant(Tensor::new(&grid_pos, abs.iter().flatten().copied().collect())?))
        }
    };
    Ok(AssembledQueries {
        central_pos,
        noncentral_pos,
        content,
    })
}

/// Frequencies `2π · T^(-4i/n)` for `i in 0..n/4`.
fn pe_frequencies(dim: usize, temperature: f64) -> Vec<f64> {
    (0..dim / 4)
        .map(|i| 2.0 * std::f64::consts::PI * temperature.powf(-4.0 * i as f64 / dim as f64))
        .collect()
}

fn check_pe_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("sine positional encoding needs dim divisible by 4, got {dim}")));
    }
    Ok(())
}

/// Sine positional encoding of `[.., 2]` normalized coordinates into
/// `[.., n]`: for each axis `n/2` features `sin, cos` interleaved per
/// frequency, the x block followed by the y block. Differentiable in the
/// coordinates.
pub fn sine_pe(tape: &mut Tape, coords: Var, dim: usize, temperature: f64) -> Result<Var> {
    check_pe_dim(dim)?;
    let shape = tape.shape(coords).to_vec();
    if shape.last() != Some(&2) {
        return Err(Error::Dimension(format!("sine_pe expects [.., 2] coordinates, got {:?}", shape)));
    }
    let k: usize = shape[..shape.len() - 1].iter().product();
    let q = dim / 4;
    let flat = tape.reshape(coords, &[k, 2])?;
    let freqs = tape.constant(Tensor::new(&[q], pe_frequencies(dim, temperature))?);
    let freqs = tape.expand(freqs, &[k, q])?;
    let mut parts = Vec::with_capacity(2);
    for axis in 0..2 {
        let c = tape.narrow(flat, 1, axis, 1)?;
        let c = tape.expand(c, &[k, q])?;
        let arg = tape.mul(c, freqs)?;
        let s = tape.sin(arg);
        let co = tape.cos(arg);
        let s = tape.reshape(s, &[k, q, 1])?;
        let co = tape.reshape(co, &[k, q, 1])?;
        let inter = tape.concat(&[s, co], 2)?;
        parts.push(tape.reshape(inter, &[k, 2 * q])?);
    }
    let pe = tape.concat(&parts, 1)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = dim;
    tape.reshape(pe, &out_shape)
}

/// Plain evaluation of [`sine_pe`] for a list of points, row-major `[K, n]`.
pub fn sine_pe_values(coords: &[Point], dim: usize, temperature: f64) -> Result<Vec<f64>> {
    check_pe_dim(dim)?;
    let freqs = pe_frequencies(dim, temperature);
    let mut out = Vec::with_capacity(coords.len() * dim);
    for p in coords {
        for c in p {
            for f in &freqs {
                out.push((c * f).sin());
                out.push((c * f).cos());
            }
        }
    }
    Ok(out)
}
