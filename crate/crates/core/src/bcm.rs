//! Bayesian channel map: geometric features, log-distance trend models and
//! Matérn-3/2 ARD Gaussian-process residuals, giving a dense gain / delay
//! spread map with posterior variances from a handful of measurements.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{extract_params, simulate_csi, Antennas, ChannelParams, Csi, FieldSource, OfdmConfig};
use crate::emfield::MaterialTable;
use crate::error::{Error, Result};
use crate::geometry::{SceneGeometry, Vec3};
use crate::tracer::{trace_paths, PathSet, TraceConfig};

pub const FEATURE_DIM: usize = 9;
/// Sentinel fade features for receivers without any path.
pub const FADE_SENTINEL: [f64; 2] = [0.0, -60.0];
pub const DOMINANCE_EPS: f64 = 1e-15;
/// Delay spreads below this are left out of the g_τ fit, seconds.
pub const TAU_FLOOR: f64 = 0.1e-9;
pub const MIN_LOS_SAMPLES: usize = 4;
pub const KAPPA_P_FLOOR: f64 = 0.25;
pub const KAPPA_TAU_FLOOR_NS2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub r: Vec3,
    pub csi: Csi,
    pub params: ChannelParams,
}

impl MeasurementSample {
    pub fn new(r: Vec3, csi: Csi, ofdm: &OfdmConfig) -> Result<Self> {
        let params = extract_params(&csi, ofdm)?;
        Ok(Self { r, csi, params })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub r: [f64; 3],
    /// los, ln(1 + path count), mean order, max order.
    pub phi_path: [f64; 4],
    /// Spectral std of 20log₁₀|H| (dB), strongest-path dominance (dB).
    pub phi_fade: [f64; 2],
    pub reachable: bool,
}

impl FusedFeature {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let mut v = [0.0; FEATURE_DIM];
        v[..3].copy_from_slice(&self.r);
        v[3..7].copy_from_slice(&self.phi_path);
        v[7..].copy_from_slice(&self.phi_fade);
        v
    }

    pub fn los(&self) -> bool {
        self.phi_path[0] > 0.5
    }
}

pub fn path_features(set: &PathSet) -> [f64; 4] {
    let n = set.paths.len();
    if n == 0 {
        return [0.0; 4];
    }
    let orders: Vec<f64> = set.paths.iter().map(|p| p.order() as f64).collect();
    [
        if set.has_los() { 1.0 } else { 0.0 },
        (1.0 + n as f64).ln(),
        orders.iter().sum::<f64>() / n as f64,
        orders.iter().cloned().fold(0.0, f64::max),
    ]
}

/// `path_powers` are |a_i|² per path.
pub fn fade_features(csi: &Csi, path_powers: &[f64]) -> [f64; 2] {
    if path_powers.is_empty() {
        return FADE_SENTINEL;
    }
    let db: Vec<f64> = csi
        .h
        .iter()
        .map(|c| 20.0 * c.norm().max(1e-300).log10())
        .collect();
    let mean = db.iter().sum::<f64>() / db.len() as f64;
    let std = (db.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / db.len() as f64).sqrt();
    let (mut best, mut total) = (0.0f64, 0.0);
    for &p in path_powers {
        best = best.max(p);
        total += p;
    }
    [std, 10.0 * (best / (total - best + DOMINANCE_EPS)).log10()]
}

/// Features at `r` from tracing the geometry with the probe materials.
pub fn extract_features(
    scene: &SceneGeometry,
    tx: Vec3,
    r: Vec3,
    probe: &MaterialTable,
    antennas: &Antennas,
    ofdm: &OfdmConfig,
    trace: &TraceConfig,
) -> Result<FusedFeature> {
    let set = trace_paths(scene, tx, r, trace);
    features_from_set(scene, &set, probe, antennas, ofdm)
}

pub fn features_from_set(
    scene: &SceneGeometry,
    set: &PathSet,
    probe: &MaterialTable,
    antennas: &Antennas,
    ofdm: &OfdmConfig,
) -> Result<FusedFeature> {
    let r = set.rx.to_array();
    if set.paths.is_empty() {
        return Ok(FusedFeature {
            r,
            phi_path: [0.0; 4],
            phi_fade: FADE_SENTINEL,
            reachable: false,
        });
    }
    let src = FieldSource::Table(probe);
    let a = crate::channel::pathset_coefficients(scene, set, src, antennas, ofdm.fc)?;
    let powers: Vec<f64> = a.iter().map(|c| c.norm_sqr()).collect();
    let csi = simulate_csi(scene, set, src, antennas, ofdm)?;
    Ok(FusedFeature {
        r,
        phi_path: path_features(set),
        phi_fade: fade_features(&csi, &powers),
        reachable: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalModel {
    /// dB.
    pub g0: f64,
    pub n0: f64,
    /// Seconds at d = 1 m.
    pub a0: f64,
    pub b0: f64,
}

impl PhysicalModel {
    pub fn gain(&self, d: f64) -> f64 {
        self.g0 - 10.0 * self.n0 * d.log10()
    }

    pub fn tau(&self, d: f64) -> f64 {
        self.a0 * d.powf(self.b0)
    }
}

/// Slope and intercept of y on x, `None` when x has no spread.
fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 1e-12 * n) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Log-distance fits on the LOS subset (all samples when fewer than four
/// are LOS). Returns the model and whether the fallback was used.
pub fn fit_physical(dist: &[f64], params: &[ChannelParams], los: &[bool]) -> Result<(PhysicalModel, bool)> {
    let n = dist.len();
    if params.len() != n || los.len() != n {
        return Err(Error::LengthMismatch(params.len(), n));
    }
    let n_los = los.iter().filter(|&&l| l).count();
    let fallback = n_los < MIN_LOS_SAMPLES;
    let keep: Vec<usize> = (0..n).filter(|&i| fallback || los[i]).collect();
    if keep.len() < 2 {
        return Err(Error::NotEnoughSamples {
            need: 2,
            have: keep.len(),
        });
    }
    let x: Vec<f64> = keep.iter().map(|&i| dist[i].log10()).collect();
    let p: Vec<f64> = keep.iter().map(|&i| params[i].p).collect();
    let (g0, n0) = match ols(&x, &p) {
        Some((slope, icpt)) => (icpt, -slope / 10.0),
        None => {
            let g0 = x.iter().zip(&p).map(|(x, p)| p + 20.0 * x).sum::<f64>() / x.len() as f64;
            (g0, 2.0)
        }
    };
    let tk: Vec<usize> = keep
        .iter()
        .cloned()
        .filter(|&i| params[i].tau >= TAU_FLOOR)
        .collect();
    let lx: Vec<f64> = tk.iter().map(|&i| dist[i].ln()).collect();
    let lt: Vec<f64> = tk.iter().map(|&i| params[i].tau.ln()).collect();
    let (a0, b0) = match (lt.len() >= 2).then(|| ols(&lx, &lt)).flatten() {
        Some((slope, icpt)) => (icpt.exp(), slope),
        None if !lt.is_empty() => ((lt.iter().sum::<f64>() / lt.len() as f64).exp(), 0.0),
        None => (TAU_FLOOR, 0.0),
    };
    Ok((PhysicalModel { g0, n0, a0, b0 }, fallback))
}

/// Per-dimension standardization; constant dimensions keep std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|k| {
                let s = (x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 * (1.0 + mean[k].abs()) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprHyper {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GprHyper {
    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            length_scales: v[..d].iter().map(|x| x.exp()).collect(),
            signal_var: v[d].exp(),
            noise_var: v[d + 1].exp(),
        }
    }
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Matérn ν = 3/2 with per-dimension length scales, without the noise term.
pub fn matern_ard(a: &[f64], b: &[f64], length_scales: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    let sr = SQRT3 * r2.sqrt();
    signal_var * (1.0 + sr) * (-sr).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Quasi-Newton refinement steps on the best restart.
    pub polish_steps: usize,
}

impl Default for GprFitConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            steps: 200,
            learning_rate: 0.05,
            polish_steps: 100,
        }
    }
}

const LOG_LS_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 6.907_755_278_982_137);
const LOG_SF2_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, 9.210_340_371_976_184);
const LOG_SN2_BOUNDS: (f64, f64) = (-18.420_680_743_952_367, 4.605_170_185_988_092);
const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

fn bounds_for(i: usize, d: usize) -> (f64, f64) {
    if i < d {
        LOG_LS_BOUNDS
    } else if i == d {
        LOG_SF2_BOUNDS
    } else {
        LOG_SN2_BOUNDS
    }
}

fn gram(x: &[Vec<f64>], h: &GprHyper) -> DMatrix<f64> {
    let m = x.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = h.signal_var;
        for j in 0..i {
            let v = matern_ard(&x[i], &x[j], &h.length_scales, h.signal_var);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + σ_n² I`, escalating diagonal jitter until it succeeds.
fn factor(kf: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &j in &JITTERS {
        let mut k = kf.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise + j;
        }
        if let Some(c) = k.cholesky() {
            return Ok((c, j));
        }
    }
    Err(Error::Cholesky(*JITTERS.last().unwrap()))
}

/// Log marginal likelihood and its gradient in log-hyperparameter space.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], h: &GprHyper) -> Result<(f64, Vec<f64>)> {
    let m = x.len();
    let d = h.length_scales.len();
    let kf = gram(x, h);
    let (chol, _) = factor(&kf, h.noise_var)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * logdet - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    let mut grad = vec![0.0; d + 2];
    for i in 0..m {
        for j in 0..m {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            grad[d] += w * kf[(i, j)];
            if i == j {
                grad[d + 1] += w * h.noise_var;
                continue;
            }
            let r2: f64 = (0..d)
                .map(|k| ((x[i][k] - x[j][k]) / h.length_scales[k]).powi(2))
                .sum();
            let e = h.signal_var * 3.0 * (-SQRT3 * r2.sqrt()).exp();
            for k in 0..d {
                grad[k] += w * e * ((x[i][k] - x[j][k]) / h.length_scales[k]).powi(2);
            }
        }
    }
    for g in grad.iter_mut() {
        *g *= 0.5;
    }
    Ok((lml, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GprModel {
    pub hyper: GprHyper,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`, row-major.
    pub chol_l: Vec<f64>,
    pub jitter: f64,
    pub lml: f64,
}

impl GprModel {
    /// Conditions on data with fixed hyperparameters.
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, hyper: GprHyper) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch(x.len(), y.len()));
        }
        let m = x.len();
        let kf = gram(&x, &hyper);
        let (chol, jitter) = factor(&kf, hyper.noise_var)?;
        let yv = DVector::from_column_slice(&y);
        let alpha = chol.solve(&yv);
        let l = chol.l();
        let logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * yv.dot(&alpha) - 0.5 * logdet - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
        let chol_l = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        Ok(Self {
            hyper,
            x,
            y,
            alpha: alpha.iter().cloned().collect(),
            chol_l,
            jitter,
            lml,
        })
    }
}

/// Posterior mean and latent variance at a normalized feature vector.
pub fn gpr_predict(model: &GprModel, xs: &[f64]) -> (f64, f64) {
    let m = model.x.len();
    let h = &model.hyper;
    let k: Vec<f64> = model
        .x
        .iter()
        .map(|xi| matern_ard(xi, xs, &h.length_scales, h.signal_var))
        .collect();
    let mean: f64 = k.iter().zip(&model.alpha).map(|(a, b)| a * b).sum();
    // forward substitution v = L⁻¹ k
    let mut v = vec![0.0; m];
    for i in 0..m {
        let row = &model.chol_l[i * m..i * m + i];
        let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        v[i] = (k[i] - s) / model.chol_l[i * m + i];
    }
    let var = h.signal_var - v.iter().map(|x| x * x).sum::<f64>();
    (mean, var.max(0.0))
}

/// Maximizes the log marginal likelihood by Adam ascent in log space.
/// Restart 0 starts from data-derived values, the rest log-uniform in bounds.
pub fn fit_gpr(x: &[Vec<f64>], y: &[f64], seed: u64, cfg: &GprFitConfig) -> Result<GprModel> {
    let m = x.len();
    if m < 2 {
        return Err(Error::NotEnoughSamples { need: 2, have: m });
    }
    if y.len() != m {
        return Err(Error::LengthMismatch(y.len(), m));
    }
    let d = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var_y = {
        let mu = y.iter().sum::<f64>() / m as f64;
        y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64
    };
    let clamp = |v: &mut [f64]| {
        for (i, t) in v.iter_mut().enumerate() {
            let (lo, hi) = bounds_for(i, d);
            *t = t.clamp(lo, hi);
        }
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut theta: Vec<f64> = if restart == 0 {
            let mut t = vec![0.0; d];
            t.push(var_y.max(1e-6).ln());
            t.push((0.01 * var_y).max(1e-8).ln());
            t
        } else {
            (0..d + 2)
                .map(|i| {
                    let (lo, hi) = bounds_for(i, d);
                    rng.gen_range(lo..hi)
                })
                .collect()
        };
        clamp(&mut theta);
        let (mut m1, mut m2) = (vec![0.0; d + 2], vec![0.0; d + 2]);
        for step in 0..=cfg.steps {
            let Ok((lml, g)) = log_marginal_likelihood(x, y, &GprHyper::from_log(&theta)) else {
                break;
            };
            if lml.is_finite() && best.as_ref().is_none_or(|b| lml > b.0) {
                best = Some((lml, theta.clone()));
            }
            if step == cfg.steps || g.iter().any(|v| !v.is_finite()) {
                break;
            }
            let t = (step + 1) as i32;
            let lr = cfg.learning_rate;
            for i in 0..d + 2 {
                m1[i] = 0.9 * m1[i] + 0.1 * g[i];
                m2[i] = 0.999 * m2[i] + 0.001 * g[i] * g[i];
                let mh = m1[i] / (1.0 - 0.9f64.powi(t));
                let vh = m2[i] / (1.0 - 0.999f64.powi(t));
                theta[i] += lr * mh / (vh.sqrt() + 1e-8);
            }
            clamp(&mut theta);
        }
    }
    let (lml, theta) = best.ok_or(Error::Cholesky(*JITTERS.last().unwrap()))?;
    let theta = bfgs_polish(x, y, theta, lml, cfg.polish_steps);
    GprModel::new(x.to_vec(), y.to_vec(), GprHyper::from_log(&theta))
}

/// Projected BFGS ascent with backtracking from the best Adam iterate.
fn bfgs_polish(x: &[Vec<f64>], y: &[f64], mut theta: Vec<f64>, mut f: f64, steps: usize) -> Vec<f64> {
    let n = theta.len();
    let d = n - 2;
    let eval = |t: &[f64]| log_marginal_likelihood(x, y, &GprHyper::from_log(t)).ok();
    let Some((_, mut g)) = eval(&theta) else {
        return theta;
    };
    let project = |t: &mut Vec<f64>| {
        for (i, v) in t.iter_mut().enumerate() {
            let (lo, hi) = bounds_for(i, d);
            *v = v.clamp(lo, hi);
        }
    };
    // inverse Hessian of −LML
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..steps {
        let gv = DVector::from_column_slice(&g);
        let dir = &h * &gv;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            project(&mut cand);
            let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let gain: f64 = s.iter().zip(&g).map(|(a, b)| a * b).sum();
            if let Some((fc, gc)) = eval(&cand) {
                if fc.is_finite() && fc >= f + 1e-4 * gain.max(0.0) && fc >= f {
                    accepted = Some((cand, fc, gc, s));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc, s)) = accepted else { break };
        let improvement = fc - f;
        let sv = DVector::from_vec(s);
        // y = ∇(−f)_new − ∇(−f)_old
        let yv = DVector::from_iterator(n, g.iter().zip(&gc).map(|(a, b)| a - b));
        let sy = sv.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - (&sv * yv.transpose()) * rho;
            let b = &i - (&yv * sv.transpose()) * rho;
            h = &a * &h * &b + (&sv * sv.transpose()) * rho;
        }
        theta = cand;
        f = fc;
        g = gc;
        if improvement < 1e-10 * (1.0 + f.abs()) && g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
            break;
        }
    }
    theta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcmEntry {
    /// Index into the target list passed to [`build_bcm`].
    pub index: usize,
    pub r_star: Vec3,
    /// dB.
    pub p_hat: f64,
    /// Seconds.
    pub tau_hat: f64,
    /// dB².
    pub kappa_p: f64,
    /// s².
    pub kappa_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcmConfig {
    pub trace: TraceConfig,
    pub antennas: Antennas,
    pub ofdm: OfdmConfig,
    pub gpr: GprFitConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcmMeta {
    pub physical: PhysicalModel,
    pub los_fallback: bool,
    pub hyper_p: GprHyper,
    pub hyper_tau_ns: GprHyper,
    pub lml_p: f64,
    pub lml_tau: f64,
    pub norm: FeatureNorm,
    pub seed: u64,
    pub n_samples: usize,
    pub dropped_targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Bcm {
    pub entries: Vec<BcmEntry>,
    pub meta: BcmMeta,
    pub gpr_p: GprModel,
    pub gpr_tau: GprModel,
}

/// Features for many receivers, in input order.
pub fn features_for(
    scene: &SceneGeometry,
    tx: Vec3,
    points: &[Vec3],
    probe: &MaterialTable,
    cfg: &BcmConfig,
) -> Result<Vec<FusedFeature>> {
    points
        .par_iter()
        .map(|&r| extract_features(scene, tx, r, probe, &cfg.antennas, &cfg.ofdm, &cfg.trace))
        .collect()
}

pub fn build_bcm(
    scene: &SceneGeometry,
    tx: Vec3,
    samples: &[MeasurementSample],
    targets: &[Vec3],
    cfg: &BcmConfig,
) -> Result<Bcm> {
    if samples.len() < 2 {
        return Err(Error::NotEnoughSamples {
            need: 2,
            have: samples.len(),
        });
    }
    let probe = MaterialTable::neutral();
    // canonical order makes the fit independent of input order
    let mut samples: Vec<&MeasurementSample> = samples.iter().collect();
    samples.sort_by(|a, b| {
        let (a, b) = (a.r.to_array(), b.r.to_array());
        (0..3).map(|k| a[k].total_cmp(&b[k])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let pts: Vec<Vec3> = samples.iter().map(|s| s.r).collect();
    let sf = features_for(scene, tx, &pts, &probe, cfg)?;
    let raw: Vec<Vec<f64>> = sf.iter().map(|f| f.to_array().to_vec()).collect();
    let norm = FeatureNorm::fit(&raw);
    let xs: Vec<Vec<f64>> = raw.iter().map(|r| norm.apply(r)).collect();

    let dist: Vec<f64> = pts.iter().map(|r| r.distance(tx)).collect();
    let params: Vec<ChannelParams> = samples.iter().map(|s| s.params).collect();
    let los: Vec<bool> = sf.iter().map(FusedFeature::los).collect();
    let (phys, los_fallback) = fit_physical(&dist, &params, &los)?;

    let res_p: Vec<f64> = (0..samples.len())
        .map(|i| params[i].p - phys.gain(dist[i]))
        .collect();
    let res_t: Vec<f64> = (0..samples.len())
        .map(|i| 1e9 * (params[i].tau - phys.tau(dist[i])))
        .collect();
    let seed_p = crate::pipeline::derive_seed(cfg.seed, "bcm/gpr-p");
    let seed_t = crate::pipeline::derive_seed(cfg.seed, "bcm/gpr-tau");
    let gpr_p = fit_gpr(&xs, &res_p, seed_p, &cfg.gpr)?;
    let gpr_tau = fit_gpr(&xs, &res_t, seed_t, &cfg.gpr)?;

    let tf = features_for(scene, tx, targets, &probe, cfg)?;
    let mut entries = Vec::with_capacity(targets.len());
    let mut dropped = Vec::new();
    for (i, (f, &r)) in tf.iter().zip(targets).enumerate() {
        if !f.reachable {
            dropped.push(i);
            continue;
        }
        let z = norm.apply(&f.to_array());
        let d = r.distance(tx);
        let (mp, vp) = gpr_predict(&gpr_p, &z);
        let (mt, vt) = gpr_predict(&gpr_tau, &z);
        entries.push(BcmEntry {
            index: i,
            r_star: r,
            p_hat: phys.gain(d) + mp,
            tau_hat: phys.tau(d) + 1e-9 * mt,
            kappa_p: vp.max(KAPPA_P_FLOOR),
            kappa_tau: 1e-18 * vt.max(KAPPA_TAU_FLOOR_NS2),
        });
    }
    let meta = BcmMeta {
        physical: phys,
        los_fallback,
        hyper_p: gpr_p.hyper.clone(),
        hyper_tau_ns: gpr_tau.hyper.clone(),
        lml_p: gpr_p.lml,
        lml_tau: gpr_tau.lml,
        norm,
        seed: cfg.seed,
        n_samples: samples.len(),
        dropped_targets: dropped,
    };
    Ok(Bcm {
        entries,
        meta,
        gpr_p,
        gpr_tau,
    })
}

pub fn write_bcm_csv(entries: &[BcmEntry], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,x,y,z,p_hat_db,tau_hat_ns,kappa_p_db2,kappa_tau_ns2")?;
    for e in entries {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            e.index,
            e.r_star.x,
            e.r_star.y,
            e.r_star.z,
            e.p_hat,
            e.tau_hat * 1e9,
            e.kappa_p,
            e.kappa_tau * 1e18
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_bcm_csv(path: &Path) -> Result<Vec<BcmEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(ln, line)| {
            let bad = || Error::Format(format!("{}: line {}", path.display(), ln + 1));
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 8 {
                return Err(bad());
            }
            let v: Vec<f64> = c[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            Ok(BcmEntry {
                index: c[0].parse().map_err(|_| bad())?,
                r_star: Vec3::new(v[0], v[1], v[2]),
                p_hat: v[3],
                tau_hat: v[4] * 1e-9,
                kappa_p: v[5],
                kappa_tau: v[6] * 1e-18,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::compute_csi;
    use crate::geometry::SceneBuilder;
    use num_complex::Complex64;

    fn cp(p: f64, tau: f64) -> ChannelParams {
        ChannelParams { p, tau }
    }

    #[test]
    fn path_feature_examples() {
        let open = trace_paths(&SceneGeometry::empty(), Vec3::ZERO, Vec3::new(3.0, 0.0, 0.0), &TraceConfig::default());
        assert_eq!(path_features(&open), [1.0, 2f64.ln(), 0.0, 0.0]);
        let mut b = SceneBuilder::new();
        b.rect(Vec3::new(-50.0, -50.0, 0.0), Vec3::new(200.0, 0.0, 0.0), Vec3::new(0.0, 100.0, 0.0), 1, 1, 0);
        let s = b.build().unwrap();
        let two = trace_paths(&s, Vec3::new(0.0, 0.0, 10.0), Vec3::new(100.0, 0.0, 2.0), &TraceConfig { max_order: 1, enable_scatter: false });
        assert_eq!(path_features(&two), [1.0, 3f64.ln(), 0.5, 1.0]);
    }

    #[test]
    fn fade_features_examples() {
        let o = OfdmConfig::default();
        let one = compute_csi(&[30e-9], &[Complex64::new(1e-3, 0.0)], &o);
        let f = fade_features(&one, &[1e-6]);
        assert!(f[0] < 1e-9);
        assert!((f[1] - 90.0).abs() < 1e-6);
        assert_eq!(fade_features(&Csi::zeros(8), &[]), FADE_SENTINEL);
        let two = compute_csi(&[30e-9, 47e-9], &[Complex64::new(1e-3, 0.0), Complex64::new(5e-4, 0.0)], &o);
        let f = fade_features(&two, &[1e-6, 2.5e-7]);
        assert!(f[0] > 1.0);
        assert!((f[1] - 10.0 * 4f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn unreachable_feature() {
        let mut b = SceneBuilder::new();
        let o = Vec3::new(-1.0, -1.0, -1.0);
        let (ex, ey, ez) = (Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 0.0, 2.0));
        for (org, u, v) in [(o, ey, ex), (o + ez, ex, ey), (o, ex, ez), (o + ey, ez, ex), (o, ez, ey), (o + ex, ey, ez)] {
            b.rect(org, u, v, 1, 1, 0);
        }
        let s = b.build().unwrap();
        let f = extract_features(&s, Vec3::new(5.0, 0.0, 0.0), Vec3::ZERO, &MaterialTable::neutral(), &Antennas::default(), &OfdmConfig::default(), &TraceConfig { max_order: 2, enable_scatter: false }).unwrap();
        assert!(!f.reachable);
        assert_eq!(f.phi_path, [0.0; 4]);
        assert_eq!(f.phi_fade, FADE_SENTINEL);
    }

    #[test]
    fn physical_fit_recovers_trend() {
        let d: Vec<f64> = (1..=12).map(|i| 1.0 + 0.7 * i as f64).collect();
        let params: Vec<ChannelParams> = d
            .iter()
            .map(|&d| cp(-40.0 - 20.0 * d.log10(), 10e-9 * d.sqrt()))
            .collect();
        let los = vec![true; d.len()];
        let (m, fb) = fit_physical(&d, &params, &los).unwrap();
        assert!(!fb);
        assert!((m.g0 + 40.0).abs() < 1e-9 && (m.n0 - 2.0).abs() < 1e-9);
        assert!((m.a0 - 10e-9).abs() < 1e-6 * 10e-9 && (m.b0 - 0.5).abs() < 1e-6);

        let mut p2 = params.clone();
        let mut los2 = los.clone();
        p2.push(cp(-40.0 - 20.0 * 5f64.log10() - 30.0, 1e-8));
        los2.push(false);
        let mut d2 = d.clone();
        d2.push(5.0);
        let (m2, _) = fit_physical(&d2, &p2, &los2).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn physical_fit_rank_deficient_and_fallback() {
        let d = vec![4.0; 5];
        let params: Vec<_> = (0..5).map(|i| cp(-60.0 + i as f64, 0.0)).collect();
        let (m, _) = fit_physical(&d, &params, &[true; 5]).unwrap();
        assert_eq!((m.n0, m.b0), (2.0, 0.0));
        assert!((m.gain(4.0) + 58.0).abs() < 1e-12);
        assert!(m.a0 > 0.0);
        let (_, fb) = fit_physical(&[1.0, 2.0, 3.0], &[cp(-1.0, 1e-9), cp(-2.0, 2e-9), cp(-3.0, 3e-9)], &[true, false, true]).unwrap();
        assert!(fb);
        assert!(fit_physical(&[1.0], &[cp(0.0, 0.0)], &[true]).is_err());
    }

    #[test]
    fn matern_examples() {
        let l = [1.0, 1.0];
        assert_eq!(matern_ard(&[0.3, 0.1], &[0.3, 0.1], &l, 2.5), 2.5);
        assert!(matern_ard(&[0.0, 0.0], &[1e3, 0.0], &l, 1.0) < 1e-300);
        let v = matern_ard(&[0.0, 0.0], &[0.6, 0.8], &l, 1.0);
        assert!((v - (1.0 + SQRT3) * (-SQRT3).exp()).abs() < 1e-15);
        assert!((v - 0.4834).abs() < 1e-4);
    }

    fn hyper(d: usize, sf2: f64, sn2: f64) -> GprHyper {
        GprHyper {
            length_scales: vec![0.8; d],
            signal_var: sf2,
            noise_var: sn2,
        }
    }

    #[test]
    fn single_point_scalar_algebra() {
        let h = hyper(1, 2.0, 0.5);
        let m = GprModel::new(vec![vec![0.0]], vec![3.0], h.clone()).unwrap();
        let xs = [0.4];
        let k = matern_ard(&[0.0], &xs, &h.length_scales, 2.0);
        let (mu, var) = gpr_predict(&m, &xs);
        assert!((mu - k * 3.0 / 2.5).abs() < 1e-12);
        assert!((var - (2.0 - k * k / 2.5)).abs() < 1e-12);
    }

    #[test]
    fn interpolates_at_zero_noise() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.9, (i as f64).sin()]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].cos() + r[1]).collect();
        let m = GprModel::new(x.clone(), y.clone(), hyper(2, 1.0, 0.0)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mu, var) = gpr_predict(&m, xi);
            assert!((mu - yi).abs() < 1e-8);
            assert!(var < 1e-8);
        }
    }

    #[test]
    fn zero_residuals() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.5 * i as f64]).collect();
        let m = fit_gpr(&x, &[0.0; 6], 1, &GprFitConfig::default()).unwrap();
        assert!(m.hyper.signal_var < 1e-3);
        let (mu, var) = gpr_predict(&m, &[1e7, 1e7]);
        assert_eq!(mu, 0.0);
        assert!((var - m.hyper.signal_var).abs() < 1e-15);
    }

    #[test]
    fn lml_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..15).map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let theta = vec![0.1, -0.3, 0.5, 0.2, -1.0];
        let (_, g) = log_marginal_likelihood(&x, &y, &GprHyper::from_log(&theta)).unwrap();
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += 1e-6;
            tm[i] -= 1e-6;
            let fp = log_marginal_likelihood(&x, &y, &GprHyper::from_log(&tp)).unwrap().0;
            let fm = log_marginal_likelihood(&x, &y, &GprHyper::from_log(&tm)).unwrap().0;
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn scaling_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (1.3 * r[0]).sin() + 0.5 * r[1] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let cfg = GprFitConfig::default();
        let a = fit_gpr(&x, &y, 3, &cfg).unwrap();
        let b = fit_gpr(&x, &y2, 3, &cfg).unwrap();
        let rs = b.hyper.signal_var / a.hyper.signal_var;
        let rn = b.hyper.noise_var / a.hyper.noise_var;
        assert!((rs / 4.0 - 1.0).abs() < 0.05, "signal ratio {rs}");
        assert!((rn / 4.0 - 1.0).abs() < 0.05, "noise ratio {rn}");
        let want = a.lml - 25.0 * 2f64.ln();
        assert!((b.lml - want).abs() < 1e-2 * want.abs(), "{} vs {}", b.lml, want);
    }

    #[test]
    fn feature_norm_stats() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 3.0, (i * i) as f64]).collect();
        let n = FeatureNorm::fit(&x);
        assert_eq!(n.std[1], 1.0);
        let z: Vec<Vec<f64>> = x.iter().map(|r| n.apply(r)).collect();
        for k in 0..3 {
            let m = z.iter().map(|r| r[k]).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-9);
            if k != 1 {
                let s = (z.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / 10.0).sqrt();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bcm_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = vec![BcmEntry {
            index: 3,
            r_star: Vec3::new(1.25, 2.5, 1.2),
            p_hat: -71.123456789,
            tau_hat: 12.5e-9,
            kappa_p: 0.25,
            kappa_tau: 1.5e-18,
        }];
        let p = dir.path().join("bcm.csv");
        write_bcm_csv(&e, &p).unwrap();
        let back = read_bcm_csv(&p).unwrap();
        assert_eq!(back[0].index, 3);
        assert!((back[0].p_hat - e[0].p_hat).abs() < 1e-12);
        assert!((back[0].tau_hat - e[0].tau_hat).abs() < 1e-21);
    }
}
