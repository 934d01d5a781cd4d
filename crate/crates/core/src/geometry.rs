//! Triangle-facet scene geometry with exact ray queries.
//!
//! Facets are one-sided for their normal (used for scattering half-space
//! tests) but intersectable from both sides. Intersection is a linear scan in
//! facet-id order; ties at identical distance go to the lowest id.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emfield::EmProperties;
use crate::error::{Error, Result};

/// Self-intersection guard and ray-hit tolerance in meters.
pub const EPS_HIT: f64 = 1e-6;
/// Minimum facet area accepted by the loader.
pub const MIN_FACET_AREA: f64 = 1e-9;

const PARALLEL_EPS: f64 = 1e-12;
const BARY_EPS: f64 = 1e-12;
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn normalize(self) -> Vec3 {
        self / self.norm()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub id: usize,
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    pub normal: Vec3,
    /// Category label, −1 when unlabeled.
    pub category: i64,
    pub patch_area: f64,
}

impl Facet {
    pub fn new(id: usize, v0: Vec3, v1: Vec3, v2: Vec3, category: i64) -> Result<Self> {
        let c = (v1 - v0).cross(v2 - v0);
        let area = 0.5 * c.norm();
        if !(area >= MIN_FACET_AREA) {
            return Err(Error::DegenerateFacet { facet: id, area });
        }
        Ok(Self {
            id,
            v0,
            v1,
            v2,
            normal: c.normalize(),
            category,
            patch_area: area,
        })
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v0 + self.v1 + self.v2) / 3.0
    }

    /// Signed distance of `p` from the supporting plane along the normal.
    pub fn plane_distance(&self, p: Vec3) -> f64 {
        (p - self.v0).dot(self.normal)
    }

    /// Barycentric containment test for a point assumed to lie on the plane.
    pub fn contains_point(&self, p: Vec3, tol: f64) -> bool {
        let e1 = self.v1 - self.v0;
        let e2 = self.v2 - self.v0;
        let w = p - self.v0;
        let d11 = e1.dot(e1);
        let d12 = e1.dot(e2);
        let d22 = e2.dot(e2);
        let w1 = w.dot(e1);
        let w2 = w.dot(e2);
        let den = d11 * d22 - d12 * d12;
        let u = (d22 * w1 - d12 * w2) / den;
        let v = (d11 * w2 - d12 * w1) / den;
        u >= -tol && v >= -tol && u + v <= 1.0 + tol
    }

    /// Closest point of the triangle to `p` (Voronoi-region walk).
    pub fn closest_point(&self, p: Vec3) -> Vec3 {
        let (a, b, c) = (self.v0, self.v1, self.v2);
        let (ab, ac, ap) = (b - a, c - a, p - a);
        let (d1, d2) = (ab.dot(ap), ac.dot(ap));
        if d1 <= 0.0 && d2 <= 0.0 {
            return a;
        }
        let bp = p - b;
        let (d3, d4) = (ab.dot(bp), ac.dot(bp));
        if d3 >= 0.0 && d4 <= d3 {
            return b;
        }
        let vc = d1 * d4 - d3 * d2;
        if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            return a + ab * (d1 / (d1 - d3));
        }
        let cp = p - c;
        let (d5, d6) = (ab.dot(cp), ac.dot(cp));
        if d6 >= 0.0 && d5 <= d6 {
            return c;
        }
        let vb = d5 * d2 - d1 * d6;
        if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            return a + ac * (d2 / (d2 - d6));
        }
        let va = d3 * d6 - d5 * d4;
        if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
            return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
        }
        let den = 1.0 / (va + vb + vc);
        a + ab * (vb * den) + ac * (vc * den)
    }

    pub fn distance_to(&self, p: Vec3) -> f64 {
        self.closest_point(p).distance(p)
    }

    /// Möller–Trumbore ray/triangle test, both faces. Returns the ray parameter.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let e1 = self.v1 - self.v0;
        let e2 = self.v2 - self.v0;
        let pvec = dir.cross(e2);
        let det = e1.dot(pvec);
        if det.abs() < PARALLEL_EPS {
            return None;
        }
        let inv = 1.0 / det;
        let tvec = origin - self.v0;
        let u = tvec.dot(pvec) * inv;
        if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
            return None;
        }
        let qvec = tvec.cross(e1);
        let v = dir.dot(qvec) * inv;
        if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
            return None;
        }
        Some(e2.dot(qvec) * inv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub facet_id: usize,
    pub point: Vec3,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }
}

/// On-disk scene description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub vertices: Vec<[f64; 3]>,
    pub facets: Vec<FacetSpec>,
    #[serde(default)]
    pub category_names: BTreeMap<i64, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_materials: Option<BTreeMap<i64, EmProperties>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FacetSpec {
    pub v: [usize; 3],
    #[serde(default = "unlabeled")]
    pub category: i64,
}

fn unlabeled() -> i64 {
    -1
}

#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub vertices: Vec<Vec3>,
    pub facet_indices: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    pub bounds: Bounds,
    pub category_names: BTreeMap<i64, String>,
    pub truth_materials: Option<BTreeMap<i64, EmProperties>>,
}

impl SceneGeometry {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            facet_indices: Vec::new(),
            facets: Vec::new(),
            bounds: Bounds {
                min: Vec3::ZERO,
                max: Vec3::ZERO,
            },
            category_names: BTreeMap::new(),
            truth_materials: None,
        }
    }

    pub fn from_file(file: SceneFile) -> Result<Self> {
        let vertices: Vec<Vec3> = file.vertices.iter().map(|&v| Vec3::from(v)).collect();
        if let Some(bad) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::SceneParse(format!("vertex {bad} is not finite")));
        }
        let mut facets = Vec::with_capacity(file.facets.len());
        let mut facet_indices = Vec::with_capacity(file.facets.len());
        for (id, spec) in file.facets.iter().enumerate() {
            for &index in &spec.v {
                if index >= vertices.len() {
                    return Err(Error::VertexIndex {
                        facet: id,
                        index,
                        count: vertices.len(),
                    });
                }
            }
            let [a, b, c] = spec.v;
            facets.push(Facet::new(
                id,
                vertices[a],
                vertices[b],
                vertices[c],
                spec.category,
            )?);
            facet_indices.push(spec.v);
        }
        let bounds = if vertices.is_empty() {
            Bounds {
                min: Vec3::ZERO,
                max: Vec3::ZERO,
            }
        } else {
            let mut min = vertices[0];
            let mut max = vertices[0];
            for &v in &vertices[1..] {
                min = min.min(v);
                max = max.max(v);
            }
            Bounds { min, max }
        };
        Ok(Self {
            vertices,
            facet_indices,
            facets,
            bounds,
            category_names: file.category_names,
            truth_materials: file.truth_materials,
        })
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            vertices: self.vertices.iter().map(|v| v.to_array()).collect(),
            facets: self
                .facet_indices
                .iter()
                .zip(&self.facets)
                .map(|(&v, f)| FacetSpec {
                    v,
                    category: f.category,
                })
                .collect(),
            category_names: self.category_names.clone(),
            truth_materials: self.truth_materials.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scene serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(&self.to_file()).expect("scene serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.facets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facets.is_empty()
    }

    /// Nearest hit with distance strictly inside `(t_min, t_max)`.
    pub fn intersect_ray(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best: Option<(usize, f64)> = None;
        for f in &self.facets {
            let Some(t) = f.intersect(origin, dir) else {
                continue;
            };
            if t <= t_min || t >= t_max {
                continue;
            }
            match best {
                Some((_, bt)) if t >= bt - TIE_EPS => {}
                _ => best = Some((f.id, t)),
            }
        }
        best.map(|(facet_id, distance)| Hit {
            facet_id,
            point: origin + dir * distance,
            distance,
        })
    }

    /// Distance from `p` to the nearest facet (∞ for an empty scene).
    pub fn distance_to_surface(&self, p: Vec3) -> f64 {
        self.facets
            .iter()
            .map(|f| f.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_visible(&self, p: Vec3, q: Vec3) -> bool {
        let d = q - p;
        let len = d.norm();
        if len <= 2.0 * EPS_HIT {
            return true;
        }
        let dir = d / len;
        let origin_tmin = EPS_HIT;
        let tmax = len - EPS_HIT;
        // Scan for any blocker; nearest-hit ordering is not needed here.
        !self.facets.iter().any(|f| {
            f.intersect(p, dir)
                .is_some_and(|t| t > origin_tmin && t < tmax)
        })
    }
}

pub fn load_scene(text: &str) -> Result<SceneGeometry> {
    let file: SceneFile =
        serde_json::from_str(text).map_err(|e| Error::SceneParse(e.to_string()))?;
    SceneGeometry::from_file(file)
}

/// Reflection of `p` across the facet's supporting plane.
pub fn mirror_point(p: Vec3, facet: &Facet) -> Vec3 {
    p - facet.normal * (2.0 * facet.plane_distance(p))
}

/// Reflect a direction about a plane normal.
pub fn reflect_dir(d: Vec3, n: Vec3) -> Vec3 {
    d - n * (2.0 * d.dot(n))
}

/// Incrementally assembles scenes from rectangles.
#[derive(Debug, Default, Clone)]
pub struct SceneBuilder {
    file: SceneFileDraft,
}

#[derive(Debug, Default, Clone)]
struct SceneFileDraft {
    vertices: Vec<[f64; 3]>,
    facets: Vec<FacetSpec>,
    names: BTreeMap<i64, String>,
    truth: BTreeMap<i64, EmProperties>,
}

impl SceneBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn category(mut self, id: i64, name: &str, truth: Option<EmProperties>) -> Self {
        self.file.names.insert(id, name.to_string());
        if let Some(t) = truth {
            self.file.truth.insert(id, t);
        }
        self
    }

    pub fn triangle(&mut self, a: Vec3, b: Vec3, c: Vec3, category: i64) {
        let base = self.file.vertices.len();
        self.file
            .vertices
            .extend([a.to_array(), b.to_array(), c.to_array()]);
        self.file.facets.push(FacetSpec {
            v: [base, base + 1, base + 2],
            category,
        });
    }

    /// Rectangle `origin + s·u + t·v`, s,t ∈ [0,1], split into `nu × nv`
    /// cells of two triangles each. The normal follows `u × v`.
    pub fn rect(&mut self, origin: Vec3, u: Vec3, v: Vec3, nu: usize, nv: usize, category: i64) {
        self.rect_with(origin, u, v, nu, nv, |_, _| category);
    }

    /// Like [`rect`](Self::rect) with a per-cell category chooser taking the
    /// cell center in (s, t) coordinates.
    pub fn rect_with(
        &mut self,
        origin: Vec3,
        u: Vec3,
        v: Vec3,
        nu: usize,
        nv: usize,
        mut category: impl FnMut(f64, f64) -> i64,
    ) {
        let (nu, nv) = (nu.max(1), nv.max(1));
        for i in 0..nu {
            for j in 0..nv {
                let s0 = i as f64 / nu as f64;
                let s1 = (i + 1) as f64 / nu as f64;
                let t0 = j as f64 / nv as f64;
                let t1 = (j + 1) as f64 / nv as f64;
                let p = |s: f64, t: f64| origin + u * s + v * t;
                let cat = category(0.5 * (s0 + s1), 0.5 * (t0 + t1));
                self.triangle(p(s0, t0), p(s1, t0), p(s1, t1), cat);
                self.triangle(p(s0, t0), p(s1, t1), p(s0, t1), cat);
            }
        }
    }

    pub fn build(self) -> Result<SceneGeometry> {
        SceneGeometry::from_file(SceneFile {
            vertices: self.file.vertices,
            facets: self.file.facets,
            category_names: self.file.names,
            truth_materials: if self.file.truth.is_empty() {
                None
            } else {
                Some(self.file.truth)
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floor() -> SceneGeometry {
        let mut b = SceneBuilder::new();
        b.rect(
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            1,
            1,
            0,
        );
        b.build().unwrap()
    }

    #[test]
    fn unit_square_floor() {
        let text = r#"{
            "vertices": [[0,0,0],[1,0,0],[1,1,0],[0,1,0]],
            "facets": [{"v":[0,1,2],"category":0},{"v":[0,2,3],"category":0}],
            "category_names": {"0": "floor"}
        }"#;
        let s = load_scene(text).unwrap();
        assert_eq!(s.facets.len(), 2);
        assert_eq!(s.bounds.min, Vec3::ZERO);
        assert_eq!(s.bounds.max, Vec3::new(1.0, 1.0, 0.0));
        assert_eq!(s.facets[0].normal, Vec3::new(0.0, 0.0, 1.0));
        assert!((s.facets[0].patch_area - 0.5).abs() < 1e-15);
        assert_eq!(s.category_names[&0], "floor");
    }

    #[test]
    fn bad_vertex_index() {
        let text = r#"{"vertices": [[0,0,0],[1,0,0],[1,1,0]], "facets": [{"v":[0,1,99]}]}"#;
        match load_scene(text) {
            Err(Error::VertexIndex { index: 99, count: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_and_unparseable() {
        let text = r#"{"vertices": [[0,0,0],[1,0,0],[2,0,0]], "facets": [{"v":[0,1,2]}]}"#;
        assert!(matches!(load_scene(text), Err(Error::DegenerateFacet { .. })));
        assert!(matches!(load_scene("{nope"), Err(Error::SceneParse(_))));
    }

    #[test]
    fn shoebox_bounds() {
        let s = crate::scenes::shoebox(10.0, 6.0, 3.0, None).unwrap();
        assert_eq!(s.facets.len(), 12);
        let e = s.bounds.extent();
        assert_eq!((e.x, e.y, e.z), (10.0, 6.0, 3.0));
        for (i, f) in s.facets.iter().enumerate() {
            assert_eq!(f.id, i);
        }
    }

    #[test]
    fn axis_aligned_hit() {
        let s = floor();
        let h = s
            .intersect_ray(
                Vec3::new(0.25, 0.25, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
                0.0,
                10.0,
            )
            .unwrap();
        assert!((h.distance - 1.0).abs() < 1e-15);
        assert!(h.point.distance(Vec3::new(0.25, 0.25, 0.0)) < 1e-15);
        // origin on the corner
        let h = s
            .intersect_ray(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0), 0.0, 10.0)
            .unwrap();
        assert!(h.point.distance(Vec3::ZERO) < 1e-15);
    }

    #[test]
    fn parallel_ray_misses() {
        let s = floor();
        let h = s.intersect_ray(
            Vec3::new(-1.0, 0.5, 0.5),
            Vec3::new(1.0, 0.0, 0.0),
            0.0,
            10.0,
        );
        assert!(h.is_none());
    }

    #[test]
    fn shared_edge_single_hit_lowest_id() {
        // The diagonal (0,0)-(1,1) is shared by facets 0 and 1.
        let s = floor();
        let hits: Vec<_> = s
            .facets
            .iter()
            .filter_map(|f| f.intersect(Vec3::new(0.5, 0.5, 1.0), Vec3::new(0.0, 0.0, -1.0)))
            .collect();
        assert_eq!(hits.len(), 2, "both facets touch the diagonal");
        let h = s
            .intersect_ray(Vec3::new(0.5, 0.5, 1.0), Vec3::new(0.0, 0.0, -1.0), 0.0, 10.0)
            .unwrap();
        assert_eq!(h.facet_id, 0);
    }

    #[test]
    fn visibility_cases() {
        let empty = SceneGeometry::empty();
        assert!(empty.is_visible(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0)));

        let mut b = SceneBuilder::new();
        b.rect(
            Vec3::new(0.0, -5.0, -5.0),
            Vec3::new(0.0, 10.0, 0.0),
            Vec3::new(0.0, 0.0, 10.0),
            1,
            1,
            0,
        );
        let wall = b.build().unwrap();
        assert!(!wall.is_visible(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)));

        let s = floor();
        let on = Vec3::new(0.3, 0.6, 0.0);
        assert!(s.is_visible(on, Vec3::new(0.3, 0.6, 2.0)));
        assert!(s.is_visible(Vec3::new(0.3, 0.6, 2.0), on));
    }

    #[test]
    fn mirror_examples() {
        let s = floor();
        let f = &s.facets[0];
        assert_eq!(mirror_point(Vec3::new(0.0, 0.0, 1.0), f), Vec3::new(0.0, 0.0, -1.0));
        let on = Vec3::new(0.4, 0.7, 0.0);
        assert_eq!(mirror_point(on, f), on);

        let plane_x2 = Facet::new(
            0,
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(2.0, 1.0, 0.0),
            Vec3::new(2.0, 0.0, 1.0),
            0,
        )
        .unwrap();
        let m = mirror_point(Vec3::new(1.0, 2.0, 3.0), &plane_x2);
        assert!(m.distance(Vec3::new(3.0, 2.0, 3.0)) < 1e-15);
    }

    #[test]
    fn closest_point_regions() {
        let f = Facet::new(0, Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 0).unwrap();
        assert_eq!(f.distance_to(Vec3::new(0.2, 0.2, 0.5)), 0.5);
        assert_eq!(f.closest_point(Vec3::new(-1.0, -1.0, 0.0)), Vec3::ZERO);
        assert_eq!(f.closest_point(Vec3::new(0.5, -2.0, 1.0)), Vec3::new(0.5, 0.0, 0.0));
        assert!((f.distance_to(Vec3::new(1.0, 1.0, 0.0)) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((floor().distance_to_surface(Vec3::new(0.3, 0.6, -0.25)) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reserialize_roundtrip() {
        let s = crate::scenes::shoebox(10.0, 6.0, 3.0, None).unwrap();
        let back = load_scene(&s.to_json()).unwrap();
        assert_eq!(back.facets.len(), s.facets.len());
        for (a, b) in s.facets.iter().zip(&back.facets) {
            assert!(a.v0.distance(b.v0) < 1e-9);
            assert!(a.v1.distance(b.v1) < 1e-9);
            assert!(a.v2.distance(b.v2) < 1e-9);
            assert_eq!(a.category, b.category);
        }
        assert_eq!(s.content_hash(), back.content_hash());
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn mirror_is_involution(p in vec3(), a in vec3(), b in vec3(), c in vec3()) {
            if let Ok(f) = Facet::new(0, a, b, c, 0) {
                let back = mirror_point(mirror_point(p, &f), &f);
                prop_assert!(back.distance(p) < 1e-9);
            }
        }

        #[test]
        fn hit_distance_consistent(o in vec3(), d in vec3()) {
            prop_assume!(d.norm() > 1e-3);
            let dir = d.normalize();
            let s = crate::scenes::shoebox(10.0, 6.0, 3.0, None).unwrap();
            if let Some(h) = s.intersect_ray(o, dir, 0.0, 1e3) {
                prop_assert!((h.point.distance(o) - h.distance).abs() < 1e-7);
            }
        }

        #[test]
        fn visibility_symmetric(p in vec3(), q in vec3()) {
            prop_assume!(p.distance(q) > 1e-3);
            let s = crate::scenes::partitioned_room(None).unwrap();
            prop_assert_eq!(s.is_visible(p, q), s.is_visible(q, p));
        }
    }
}
