//! Propagation path enumeration: line of sight, image-method specular
//! reflections up to a configurable order, and single-bounce diffuse
//! scattering sampled at facet centroids.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mirror_point, Facet, SceneGeometry, Vec3, EPS_HIT};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

static TRACE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`trace_paths`] invocations in this process.
pub fn trace_call_count() -> u64 {
    TRACE_CALLS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InteractionKind {
    Reflection,
    Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub point: Vec3,
    pub facet_id: usize,
    pub kind: InteractionKind,
    pub incident_dir: Vec3,
    pub outgoing_dir: Vec3,
    pub cos_theta_i: f64,
    pub cos_theta_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    pub interactions: Vec<Interaction>,
    pub segment_lengths: Vec<f64>,
    pub total_length: f64,
    /// Unit direction leaving the transmitter.
    pub departure_dir: Vec3,
    /// Unit direction from the receiver back toward the last point.
    pub arrival_dir: Vec3,
    pub phi_tx: f64,
    pub theta_tx: f64,
    pub phi_rx: f64,
    pub theta_rx: f64,
    /// Seconds.
    pub delay: f64,
}

impl PropagationPath {
    fn from_points(points: &[Vec3], interactions: Vec<Interaction>) -> Self {
        let segment_lengths: Vec<f64> = points.windows(2).map(|w| w[0].distance(w[1])).collect();
        let total_length: f64 = segment_lengths.iter().sum();
        let n = points.len();
        let departure_dir = (points[1] - points[0]).normalize();
        let arrival_dir = (points[n - 2] - points[n - 1]).normalize();
        let (phi_tx, theta_tx) = spherical_angles(departure_dir);
        let (phi_rx, theta_rx) = spherical_angles(arrival_dir);
        Self {
            interactions,
            segment_lengths,
            total_length,
            departure_dir,
            arrival_dir,
            phi_tx,
            theta_tx,
            phi_rx,
            theta_rx,
            delay: total_length / SPEED_OF_LIGHT,
        }
    }

    pub fn order(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_los(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn has_scatter(&self) -> bool {
        self.interactions
            .iter()
            .any(|i| i.kind == InteractionKind::Scatter)
    }

    pub fn signature(&self) -> Vec<(usize, InteractionKind)> {
        self.interactions
            .iter()
            .map(|i| (i.facet_id, i.kind))
            .collect()
    }

    /// tx, interaction points, rx.
    pub fn points(&self, tx: Vec3, rx: Vec3) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(self.interactions.len() + 2);
        pts.push(tx);
        pts.extend(self.interactions.iter().map(|i| i.point));
        pts.push(rx);
        pts
    }
}

/// Azimuth from +x in (−π, π] and polar angle from +z in [0, π].
pub fn spherical_angles(d: Vec3) -> (f64, f64) {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi <= -std::f64::consts::PI {
        phi += 2.0 * std::f64::consts::PI;
    }
    (phi, theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub tx: Vec3,
    pub rx: Vec3,
    pub paths: Vec<PropagationPath>,
}

impl PathSet {
    pub fn has_los(&self) -> bool {
        self.paths.iter().any(PropagationPath::is_los)
    }

    pub fn interaction_count(&self) -> usize {
        self.paths.iter().map(|p| p.interactions.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub max_order: usize,
    pub enable_scatter: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            max_order: 2,
            enable_scatter: true,
        }
    }
}

pub fn trace_los(scene: &SceneGeometry, tx: Vec3, rx: Vec3) -> Option<PropagationPath> {
    scene
        .is_visible(tx, rx)
        .then(|| PropagationPath::from_points(&[tx, rx], Vec::new()))
}

fn coplanar(a: &Facet, b: &Facet) -> bool {
    a.normal.dot(b.normal).abs() > 1.0 - 1e-12 && a.plane_distance(b.v0).abs() < 1e-9
}

/// Image-method specular paths of order 1..=`max_order`.
pub fn trace_specular(
    scene: &SceneGeometry,
    tx: Vec3,
    rx: Vec3,
    max_order: usize,
) -> Vec<PropagationPath> {
    let mut out = Vec::new();
    let mut seq = Vec::with_capacity(max_order);
    let mut images = Vec::with_capacity(max_order + 1);
    images.push(tx);
    for order in 1..=max_order {
        let before = out.len();
        enumerate(scene, rx, order, &mut seq, &mut images, &mut out);
        dedup_coincident(&mut out, before);
    }
    out
}

fn enumerate(
    scene: &SceneGeometry,
    rx: Vec3,
    order: usize,
    seq: &mut Vec<usize>,
    images: &mut Vec<Vec3>,
    out: &mut Vec<PropagationPath>,
) {
    if seq.len() == order {
        if let Some(p) = validate_sequence(scene, rx, seq, images) {
            out.push(p);
        }
        return;
    }
    for f in &scene.facets {
        if let Some(&last) = seq.last() {
            if coplanar(&scene.facets[last], f) {
                continue;
            }
        }
        let img = mirror_point(*images.last().unwrap(), f);
        seq.push(f.id);
        images.push(img);
        enumerate(scene, rx, order, seq, images, out);
        seq.pop();
        images.pop();
    }
}

fn validate_sequence(
    scene: &SceneGeometry,
    rx: Vec3,
    seq: &[usize],
    images: &[Vec3],
) -> Option<PropagationPath> {
    let m = seq.len();
    let mut pts = vec![Vec3::ZERO; m];
    let mut target = rx;
    for k in (0..m).rev() {
        let f = &scene.facets[seq[k]];
        let img = images[k + 1];
        let da = f.plane_distance(img);
        let db = f.plane_distance(target);
        // image and target must lie strictly on opposite sides
        if !(da * db < 0.0) {
            return None;
        }
        let t = da / (da - db);
        let p = img + (target - img) * t;
        if !f.contains_point(p, 1e-9) {
            return None;
        }
        pts[k] = p;
        target = p;
    }
    let tx = images[0];
    let mut all = Vec::with_capacity(m + 2);
    all.push(tx);
    all.extend_from_slice(&pts);
    all.push(rx);
    if all.windows(2).any(|w| w[0].distance(w[1]) <= EPS_HIT) {
        return None;
    }
    if !all.windows(2).all(|w| scene.is_visible(w[0], w[1])) {
        return None;
    }
    let interactions = (0..m)
        .map(|k| {
            let f = &scene.facets[seq[k]];
            let inc = (all[k + 1] - all[k]).normalize();
            let out = (all[k + 2] - all[k + 1]).normalize();
            Interaction {
                point: all[k + 1],
                facet_id: f.id,
                kind: InteractionKind::Reflection,
                incident_dir: inc,
                outgoing_dir: out,
                cos_theta_i: inc.dot(f.normal).abs(),
                cos_theta_o: out.dot(f.normal).abs(),
            }
        })
        .collect();
    Some(PropagationPath::from_points(&all, interactions))
}

/// Drops paths in `out[from..]` whose interaction points coincide with an
/// earlier path (reflection points on edges shared by coplanar facets).
fn dedup_coincident(out: &mut Vec<PropagationPath>, from: usize) {
    let mut keep: Vec<PropagationPath> = Vec::with_capacity(out.len() - from);
    for p in out.drain(from..) {
        let dup = keep.iter().any(|q| {
            q.interactions
                .iter()
                .zip(&p.interactions)
                .all(|(a, b)| a.point.distance(b.point) < 1e-9)
        });
        if !dup {
            keep.push(p);
        }
    }
    out.extend(keep);
}

/// One scatter candidate per facet at its centroid.
pub fn trace_diffuse(scene: &SceneGeometry, tx: Vec3, rx: Vec3) -> Vec<PropagationPath> {
    scene
        .facets
        .iter()
        .filter_map(|f| {
            let c = f.centroid();
            let to_tx = tx - c;
            let to_rx = rx - c;
            let (dt, dr) = (to_tx.norm(), to_rx.norm());
            if dt <= EPS_HIT || dr <= EPS_HIT {
                return None;
            }
            let cos_i = f.normal.dot(to_tx) / dt;
            let cos_o = f.normal.dot(to_rx) / dr;
            if !(cos_i > 0.0 && cos_o > 0.0) {
                return None;
            }
            if !scene.is_visible(tx, c) || !scene.is_visible(c, rx) {
                return None;
            }
            let inter = Interaction {
                point: c,
                facet_id: f.id,
                kind: InteractionKind::Scatter,
                incident_dir: -to_tx / dt,
                outgoing_dir: to_rx / dr,
                cos_theta_i: cos_i,
                cos_theta_o: cos_o,
            };
            Some(PropagationPath::from_points(&[tx, c, rx], vec![inter]))
        })
        .collect()
}

/// Union of LOS, specular and diffuse paths sorted by delay.
pub fn trace_paths(scene: &SceneGeometry, tx: Vec3, rx: Vec3, config: &TraceConfig) -> PathSet {
    TRACE_CALLS.fetch_add(1, Ordering::Relaxed);
    let mut paths = Vec::new();
    if tx.distance(rx) > EPS_HIT {
        paths.extend(trace_los(scene, tx, rx));
        if config.max_order >= 1 {
            paths.extend(trace_specular(scene, tx, rx, config.max_order));
        }
        if config.enable_scatter {
            paths.extend(trace_diffuse(scene, tx, rx));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    paths.retain(|p| seen.insert(p.signature()));
    paths.sort_by(|a, b| {
        a.delay
            .total_cmp(&b.delay)
            .then_with(|| a.signature().cmp(&b.signature()))
    });
    PathSet { tx, rx, paths }
}

/// Persistent path cache keyed by scene content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathCacheFile {
    pub scene_hash: String,
    pub config: TraceConfig,
    pub sets: Vec<PathSet>,
}

impl PathCacheFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads the cache, returning `None` if it was built for other content
    /// or another trace configuration.
    pub fn load_valid(path: &Path, scene_hash: &str, config: &TraceConfig) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let c: PathCacheFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("path cache: {e}")))?;
        Ok((c.scene_hash == scene_hash && c.config == *config).then_some(c))
    }

    pub fn lookup(&self, tx: Vec3, rx: Vec3) -> Option<&PathSet> {
        self.sets.iter().find(|s| s.tx == tx && s.rx == rx)
    }
}
