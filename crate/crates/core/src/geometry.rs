//! Map-element polylines in the ego frame, arc-length resampling, Chamfer
//! distance and the two neighborhood samplers (square anchor neighborhood,
//! circular ground-truth neighborhood).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Lateral extent of the BEV plane in meters.
pub const X_RANGE: (f64, f64) = (-15.0, 15.0);
/// Longitudinal extent of the BEV plane in meters.
pub const Y_RANGE: (f64, f64) = (-30.0, 30.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MapClass {
    PedCrossing = 0,
    Divider = 1,
    Boundary = 2,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::PedCrossing, MapClass::Divider, MapClass::Boundary];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }
}

/// A classed polyline (or polygon when `closed`) in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MapElement {
    class: MapClass,
    vertices: Vec<Point>,
    closed: bool,
}

impl MapElement {
    pub fn new(class: MapClass, vertices: Vec<Point>, closed: bool) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::DegenerateGeometry(format!("{} vertices", vertices.len())));
        }
        if closed {
            let mut distinct: Vec<Point> = Vec::new();
            for v in &vertices {
                if !distinct.iter().any(|d| d == v) {
                    distinct.push(*v);
                }
            }
            if distinct.len() < 3 {
                return Err(Error::DegenerateGeometry("closed element needs 3 distinct vertices".into()));
            }
        }
        if let Some(v) = vertices.iter().find(|v| !in_bev_range(**v)) {
            return Err(Error::DegenerateGeometry(format!("vertex {:?} outside the BEV range", v)));
        }
        Ok(Self {
            class,
            vertices,
            closed,
        })
    }

    pub fn class(&self) -> MapClass {
        self.class
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    /// Arc length, including the closing edge for polygons.
    pub fn length(&self) -> f64 {
        path_length(&self.vertices, self.closed)
    }
}

pub fn in_bev_range(p: Point) -> bool {
    (X_RANGE.0..=X_RANGE.1).contains(&p[0]) && (Y_RANGE.0..=Y_RANGE.1).contains(&p[1])
}

pub fn clamp_to_bev(p: Point) -> Point {
    [p[0].clamp(X_RANGE.0, X_RANGE.1), p[1].clamp(Y_RANGE.0, Y_RANGE.1)]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn path_length(v: &[Point], closed: bool) -> f64 {
    let open: f64 = v.windows(2).map(|w| dist(w[0], w[1])).sum();
    if closed && v.len() > 1 {
        open + dist(v[v.len() - 1], v[0])
    } else {
        open
    }
}

/// Element resampled to `N` points at equal arc-length spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampledElement {
    pub class: MapClass,
    pub points: Vec<Point>,
    pub closed: bool,
    /// Arc distance between consecutive samples (meters).
    pub spacing: f64,
}

/// Equal arc-length resampling. Open polylines keep both endpoints
/// (`spacing = length / (N - 1)`); polygons start at vertex 0 and walk the
/// stored orientation (`spacing = perimeter / N`).
pub fn resample(elem: &MapElement, n: usize) -> Result<ResampledElement> {
    if n < 2 {
        return Err(Error::Contract(format!("resample needs N >= 2, got {n}")));
    }
    let mut path = elem.vertices.clone();
    if elem.closed {
        path.push(elem.vertices[0]);
    }
    let mut cum = Vec::with_capacity(path.len());
    cum.push(0.0);
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(Error::DegenerateGeometry("element has zero length".into()));
    }
    let spacing = if elem.closed { total / n as f64 } else { total / (n - 1) as f64 };
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        if !elem.closed && k == n - 1 {
            points.push(*path.last().unwrap());
            continue;
        }
        let s = k as f64 * spacing;
        // first segment whose end lies beyond s
        let seg = cum.partition_point(|&c| c <= s).clamp(1, path.len() - 1) - 1;
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (path[seg], path[seg + 1]);
        points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(ResampledElement {
        class: elem.class,
        points,
        closed: elem.closed,
        spacing,
    })
}

/// Ground-truth points together with their neighborhood-perturbed copy.
#[derive(Clone, Debug, PartialEq)]
pub struct GtNeighborhoodSample {
    pub base_points: Vec<Point>,
    pub perturbed_points: Vec<Point>,
    pub radius: f64,
}

/// Radius of the circular ground-truth neighborhood: `omega * spacing / 2`.
pub fn gt_neighborhood_radius(omega: f64, spacing: f64) -> f64 {
    omega * (spacing / 2.0)
}

/// Uniform draw from the open interval (-1, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let b: f64 = rng.random_range(-1.0..1.0);
        if b > -1.0 {
            return b;
        }
    }
}

/// Displacement inside the radius-`r` disk for given `(beta1, beta2)`:
/// `dx = beta1 * r`, `dy = beta2 * sqrt(r^2 - dx^2)`.
pub fn disk_offset(r: f64, beta1: f64, beta2: f64) -> Point {
    let dx = beta1 * r;
    let dy = beta2 * (r * r - dx * dx).max(0.0).sqrt();
    [dx, dy]
}

/// Moves every point inside its ground-truth neighborhood with fresh
/// `(beta1, beta2)` per point. The vertical component is uniform on the
/// chord at `dx`, so draws concentrate near the horizontal diameter rather
/// than covering the disk uniformly.
pub fn perturb_in_gt_neighborhood<R: Rng + ?Sized>(
    elem: &ResampledElement,
    omega: f64,
    rng: &mut R,
) -> GtNeighborhoodSample {
    let r = gt_neighborhood_radius(omega, elem.spacing);
    let perturbed_points = elem
        .points
        .iter()
        .map(|p| {
            let b1 = open_unit(rng);
            let b2 = open_unit(rng);
            let [dx, dy] = disk_offset(r, b1, b2);
            [p[0] + dx, p[1] + dy]
        })
        .collect();
    GtNeighborhoodSample {
        base_points: elem.points.clone(),
        perturbed_points,
        radius: r,
    }
}

/// Offset of a non-central anchor inside the square neighborhood of side
/// `a_side` meters; strictly inside `(-a/2, a/2)^2`.
pub fn square_neighborhood_offset<R: Rng + ?Sized>(a_side: f64, rng: &mut R) -> Point {
    let b1 = open_unit(rng);
    let b2 = open_unit(rng);
    [b1 * a_side / 2.0, b2 * a_side / 2.0]
}

/// Symmetric mean nearest-neighbor distance:
/// `0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("chamfer distance of an empty point set".into()));
    }
    let directed = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Meters to unit-square coordinates over the fixed BEV range.
pub fn to_normalized(p: Point) -> Point {
    [
        (p[0] - X_RANGE.0) / (X_RANGE.1 - X_RANGE.0),
        (p[1] - Y_RANGE.0) / (Y_RANGE.1 - Y_RANGE.0),
    ]
}

pub fn from_normalized(p: Point) -> Point {
    [
        p[0] * (X_RANGE.1 - X_RANGE.0) + X_RANGE.0,
        p[1] * (Y_RANGE.1 - Y_RANGE.0) + Y_RANGE.0,
    ]
}

/// Per-axis size of one meter in normalized units.
pub fn meters_to_normalized_scale() -> Point {
    [1.0 / (X_RANGE.1 - X_RANGE.0), 1.0 / (Y_RANGE.1 - Y_RANGE.0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: Point, b: Point, tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn resample_straight_segment() {
        let e = MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [0.0, 9.0]], false).unwrap();
        let r = resample(&e, 10).unwrap();
        assert!((r.spacing - 1.0).abs() < 1e-12);
        for (k, p) in r.points.iter().enumerate() {
            assert!(approx(*p, [0.0, k as f64], 1e-12), "{k}: {p:?}");
        }
    }

    #[test]
    fn resample_unit_square_hits_corners() {
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let e = MapElement::new(MapClass::PedCrossing, sq.clone(), true).unwrap();
        let r = resample(&e, 4).unwrap();
        assert!((r.spacing - 1.0).abs() < 1e-12);
        for (p, q) in r.points.iter().zip(&sq) {
            assert!(approx(*p, *q, 1e-12));
        }
    }

    #[test]
    fn zero_length_element_is_degenerate() {
        let e = MapElement::new(MapClass::Divider, vec![[1.0, 1.0], [1.0, 1.0]], false).unwrap();
        assert!(matches!(resample(&e, 5), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(resample(&e, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn element_invariants_enforced() {
        assert!(MapElement::new(MapClass::Divider, vec![[0.0, 0.0]], false).is_err());
        assert!(MapElement::new(MapClass::PedCrossing, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]], true).is_err());
        assert!(MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [16.0, 0.0]], false).is_err());
    }

    #[test]
    fn gt_radius_arithmetic() {
        assert_eq!(gt_neighborhood_radius(0.25, 1.0), 0.125);
        assert_eq!(disk_offset(0.3, 0.0, 0.0), [0.0, 0.0]);
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer_distance(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        let a = [[0.0, 1.0], [2.0, 3.0]];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(chamfer_distance(&[], &a).is_err());
    }

    #[test]
    fn normalization_corners() {
        assert_eq!(to_normalized([-15.0, -30.0]), [0.0, 0.0]);
        assert_eq!(to_normalized([0.0, 0.0]), [0.5, 0.5]);
        assert_eq!(to_normalized([15.0, 30.0]), [1.0, 1.0]);
        let p = [3.7, -12.25];
        assert!(approx(from_normalized(to_normalized(p)), p, 1e-12));
    }

    #[test]
    fn square_offset_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let [dx, dy] = square_neighborhood_offset(0.55, &mut rng);
            assert!(dx.abs() < 0.275 && dy.abs() < 0.275);
        }
    }
}
