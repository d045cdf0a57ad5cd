//! Synthetic bird's-eye-view scenes: classed polylines plus a rendered
//! feature grid standing in for a camera-derived BEV encoder, and the binary
//! split files they are stored in.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_bev, from_normalized, MapClass, MapElement, Point};
use crate::tensor::Tensor;

/// Generator settings. Counts are inclusive `[min, max]` ranges per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dividers: [usize; 2],
    pub boundaries: [usize; 2],
    pub crossings: [usize; 2],
    pub max_instances: usize,
    /// Maximum lateral bend of divider and boundary curves (meters).
    pub max_bend: f64,
    /// Width of the rendered distance falloff (meters).
    pub render_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 100,
            width: 50,
            dividers: [1, 3],
            boundaries: [1, 2],
            crossings: [0, 2],
            max_instances: 8,
            max_bend: 2.5,
            render_sigma: 0.75,
            noise_sigma: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.dividers, self.boundaries, self.crossings];
        if ranges.iter().all(|r| r[1] == 0) {
            return Err(Error::Config("generator requests zero map elements".into()));
        }
        if ranges.iter().any(|r| r[0] > r[1]) {
            return Err(Error::Config("count range with min > max".into()));
        }
        if self.boundaries[1] > 2 || self.dividers[1] > 4 || self.crossings[1] > 4 {
            return Err(Error::Config("at most 4 dividers, 2 boundaries and 4 crossings per scene".into()));
        }
        let max_total: usize = ranges.iter().map(|r| r[1]).sum();
        if max_total > self.max_instances {
            return Err(Error::Config(format!(
                "up to {} elements per scene exceeds max_instances {}",
                max_total, self.max_instances
            )));
        }
        if self.channels < MapClass::COUNT || self.height < 2 || self.width < 2 {
            return Err(Error::Config("BEV grid needs >= 3 channels and >= 2x2 cells".into()));
        }
        if self.render_sigma <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("render_sigma must be positive and noise_sigma non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this config plus the seed.
    pub fn hash(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMeta {
    pub seed: u64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub elements: Vec<MapElement>,
    /// `[C, H, W]`; row index runs along y, column index along x.
    pub bev: Tensor,
    pub meta: SceneMeta,
}

/// Rounds through `f32` so stored values survive the on-disk format exactly.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

fn quad_bezier(p0: Point, p1: Point, p2: Point, samples: usize) -> Vec<Point> {
    (0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            let u = 1.0 - t;
            let p = [
                u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0],
                u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1],
            ];
            let c = clamp_to_bev(p);
            [f32_exact(c[0]), f32_exact(c[1])]
        })
        .collect()
}

fn longitudinal_curve<R: Rng + ?Sized>(rng: &mut R, x0: f64, ys: f64, ye: f64, max_bend: f64) -> Vec<Point> {
    let drift = rng.random_range(-0.5 * max_bend..=0.5 * max_bend);
    let bend = rng.random_range(-max_bend..=max_bend);
    let p0 = [x0, ys];
    let p2 = [x0 + drift, ye];
    let p1 = [x0 + 0.5 * drift + bend, 0.5 * (ys + ye)];
    quad_bezier(p0, p1, p2, 16)
}

/// Generates one scene. All randomness comes from `rng`.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &GeneratorConfig, scene_id: u64, seed: u64, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let count = |r: [usize; 2], rng: &mut R| rng.random_range(r[0]..=r[1]);
    let mut n_div = count(cfg.dividers, rng);
    let mut n_bnd = count(cfg.boundaries, rng);
    let mut n_cross = count(cfg.crossings, rng);
    if n_div + n_bnd + n_cross == 0 {
        if cfg.dividers[1] > 0 {
            n_div = 1;
        } else if cfg.boundaries[1] > 0 {
            n_bnd = 1;
        } else {
            n_cross = 1;
        }
    }
    let mut elements = Vec::new();

    // lane dividers: separated lateral positions in the central corridor
    let mut lanes: Vec<f64> = Vec::new();
    while lanes.len() < n_div {
        let x: f64 = rng.random_range(-8.5..8.5);
        if lanes.iter().all(|l| (l - x).abs() > 3.0) {
            lanes.push(x);
        }
    }
    lanes.sort_by(f64::total_cmp);
    for x0 in lanes {
        let ys = rng.random_range(-30.0..-12.0);
        let ye = rng.random_range(12.0..30.0);
        let v = longitudinal_curve(rng, x0, ys, ye, cfg.max_bend);
        elements.push(MapElement::new(MapClass::Divider, v, false)?);
    }

    // road boundaries near the lateral borders, spanning the whole range
    let sides: Vec<f64> = match n_bnd {
        0 => vec![],
        1 => vec![if rng.random_bool(0.5) { -1.0 } else { 1.0 }],
        _ => vec![-1.0, 1.0],
    };
    for s in sides {
        let x0 = s * rng.random_range(11.5..13.0);
        let v = longitudinal_curve(rng, x0, -30.0, 30.0, 0.5 * cfg.max_bend);
        elements.push(MapElement::new(MapClass::Boundary, v, false)?);
    }

    // pedestrian crossings: rotated rectangles across the road
    let mut centers: Vec<f64> = Vec::new();
    while centers.len() < n_cross {
        let cy: f64 = rng.random_range(-24.0..24.0);
        if centers.iter().all(|c| (c - cy).abs() > 8.0) {
            centers.push(cy);
        }
    }
    for cy in centers {
        let cx = rng.random_range(-3.0..3.0);
        let half_len = rng.random_range(4.0..7.5);
        let half_wid = rng.random_range(1.5..2.5);
        let theta: f64 = rng.random_range(-0.25..0.25);
        let (s, c) = theta.sin_cos();
        let corners = [[-half_len, -half_wid], [half_len, -half_wid], [half_len, half_wid], [-half_len, half_wid]];
        let v: Vec<Point> = corners
            .iter()
            .map(|[u, w]| {
                let p = clamp_to_bev([cx + c * u - s * w, cy + s * u + c * w]);
                [f32_exact(p[0]), f32_exact(p[1])]
            })
            .collect();
        elements.push(MapElement::new(MapClass::PedCrossing, v, true)?);
    }

    let bev = render_bev(cfg, &elements, rng)?;
    Ok(Scene {
        scene_id,
        elements,
        bev,
        meta: SceneMeta {
            seed,
            noise_sigma: cfg.noise_sigma,
        },
    })
}

fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Distance from `p` to the element outline (closing edge included).
pub fn element_distance(p: Point, e: &MapElement) -> f64 {
    let v = e.vertices();
    let mut d = v.windows(2).map(|w| point_segment_dist(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
    if e.closed() {
        d = d.min(point_segment_dist(p, v[v.len() - 1], v[0]));
    }
    d
}

/// Center of cell `(row, col)` in meters.
pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> Point {
    from_normalized([(col as f64 + 0.5) / width as f64, (row as f64 + 0.5) / height as f64])
}

fn render_bev<R: Rng + ?Sized>(cfg: &GeneratorConfig, elements: &[MapElement], rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut grid = vec![0.0; c * h * w];
    let two_s2 = 2.0 * cfg.render_sigma * cfg.render_sigma;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    for class in MapClass::ALL {
        let ch = class.index();
        let members: Vec<&MapElement> = elements.iter().filter(|e| e.class() == class).collect();
        for row in 0..h {
            for col in 0..w {
                let p = cell_center(row, col, h, w);
                let d = members.iter().map(|e| element_distance(p, e)).fold(f64::INFINITY, f64::min);
                let signal = if d.is_finite() { (-d * d / two_s2).exp() } else { 0.0 };
                let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                grid[(ch * h + row) * w + col] = f32_exact(signal + n);
            }
        }
    }
    Tensor::new(&[c, h, w], grid)
}

/// Per-scene generator stream: the master seed with the scene id as the
/// ChaCha stream number.
pub fn scene_rng(seed: u64, scene_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    rng
}

/// Generates scenes with ids `first_id .. first_id + count`.
pub fn generate_split(cfg: &GeneratorConfig, seed: u64, first_id: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            generate_scene(cfg, id, seed, &mut scene_rng(seed, id))
        })
        .collect()
}

/// Per-split entry of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub scene_count: usize,
    pub n_points: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub config_hash: String,
    pub content_hash: String,
    pub file: String,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub splits: BTreeMap<String, DatasetManifest>,
}

const MANIFEST: &str = "manifest.json";

fn encode_scene(s: &Scene, buf: &mut Vec<u8>) {
    let mut rec = Vec::new();
    rec.extend_from_slice(&s.scene_id.to_le_bytes());
    rec.extend_from_slice(&(s.elements.len() as u16).to_le_bytes());
    for e in &s.elements {
        rec.push(e.class().index() as u8);
        rec.push(e.closed() as u8);
        rec.extend_from_slice(&(e.vertices().len() as u16).to_le_bytes());
        for v in e.vertices() {
            rec.extend_from_slice(&(v[0] as f32).to_le_bytes());
            rec.extend_from_slice(&(v[1] as f32).to_le_bytes());
        }
    }
    for x in s.bev.data() {
        rec.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(rec.len() as u64).to_le_bytes());
    buf.extend_from_slice(&rec);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptDataset("record truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

fn decode_scene(rec: &[u8], m: &DatasetManifest, meta: SceneMeta) -> Result<Scene> {
    let mut c = Cursor { bytes: rec, pos: 0 };
    let scene_id = c.u64()?;
    let n_el = c.u16()? as usize;
    let mut elements = Vec::with_capacity(n_el);
    for _ in 0..n_el {
        let class = MapClass::from_index(c.u8()? as usize)
            .ok_or_else(|| Error::CorruptDataset("unknown class id".into()))?;
        let closed = c.u8()? != 0;
        let nv = c.u16()? as usize;
        let mut v = Vec::with_capacity(nv);
        for _ in 0..nv {
            v.push([c.f32()?, c.f32()?]);
        }
        elements.push(MapElement::new(class, v, closed).map_err(|e| Error::CorruptDataset(e.to_string()))?);
    }
    let numel = m.channels * m.height * m.width;
    let mut grid = Vec::with_capacity(numel);
    for _ in 0..numel {
        grid.push(c.f32()?);
    }
    if c.pos != rec.len() {
        return Err(Error::CorruptDataset("trailing bytes in record".into()));
    }
    Ok(Scene {
        scene_id,
        elements,
        bev: Tensor::new(&[m.channels, m.height, m.width], grid)?,
        meta,
    })
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptDataset(format!("manifest: {e}")))
}

/// Manifest-only read: counts and dimensions without touching the grids.
pub fn read_split_manifest(dir: &Path, split: &str) -> Result<DatasetManifest> {
    read_index(dir)?
        .splits
        .remove(split)
        .ok_or_else(|| Error::CorruptDataset(format!("split {split} not in manifest")))
}

/// Writes `<dir>/<split>.bin` and records the split in `manifest.json`.
pub fn save_split(
    dir: &Path,
    split: &str,
    scenes: &[Scene],
    generator: &GeneratorConfig,
    seed: u64,
    n_points: usize,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    for s in scenes {
        encode_scene(s, &mut buf);
    }
    let file = format!("{split}.bin");
    fs::File::create(dir.join(&file))?.write_all(&buf)?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        scene_count: scenes.len(),
        n_points,
        channels: generator.channels,
        height: generator.height,
        width: generator.width,
        config_hash: generator.hash(seed),
        content_hash: hex::encode(Sha256::digest(&buf)),
        file,
    };
    let mut index = match read_index(dir) {
        Ok(i) if i.seed == seed && &i.generator == generator => i,
        _ => DatasetIndex {
            seed,
            generator: generator.clone(),
            splits: BTreeMap::new(),
        },
    };
    index.splits.insert(split.to_string(), manifest.clone());
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&index)?)?;
    Ok(manifest)
}

/// Loads a split, verifying both hashes against the manifest.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>> {
    let index = read_index(dir)?;
    let m = index
        .splits
        .get(split)
        .ok_or_else(|| Error::CorruptDataset(format!("split {split} not in manifest")))?;
    if m.config_hash != index.generator.hash(index.seed) {
        return Err(Error::CorruptDataset("config hash mismatch".into()));
    }
    let bytes = fs::read(dir.join(&m.file))?;
    if hex::encode(Sha256::digest(&bytes)) != m.content_hash {
        return Err(Error::CorruptDataset(format!("content hash mismatch for {}", m.file)));
    }
    let meta = SceneMeta {
        seed: index.seed,
        noise_sigma: index.generator.noise_sigma,
    };
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let mut scenes = Vec::with_capacity(m.scene_count);
    while c.pos < bytes.len() {
        let len = c.u64()? as usize;
        scenes.push(decode_scene(c.take(len)?, m, meta)?);
    }
    if scenes.len() != m.scene_count {
        return Err(Error::CorruptDataset(format!("expected {} scenes, read {}", m.scene_count, scenes.len())));
    }
    Ok(scenes)
}
