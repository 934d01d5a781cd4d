//! Path coefficients, OFDM frequency response, impulse response and the
//! (gain, RMS delay spread) pair, generic over [`Real`] so the whole chain
//! can run on a tape.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Cx, Real, Tape, Var};
use crate::emfield::{EmFieldNet, EmProperties, EmProps, MaterialTable};
use crate::error::{Error, Result};
use crate::geometry::{Facet, SceneGeometry, Vec3};
use crate::tracer::{Interaction, InteractionKind, PathSet, PropagationPath, SPEED_OF_LIGHT};

/// Vacuum permittivity, F/m.
pub const EPS0: f64 = 8.8541878128e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    /// Carrier, Hz.
    pub fc: f64,
    /// Bandwidth W, Hz.
    pub bandwidth: f64,
    pub n_sub: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            fc: 3.5e9,
            bandwidth: 200e6,
            n_sub: 256,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.fc > self.bandwidth / 2.0) {
            return Err(Error::Config(format!(
                "ofdm: need fc > W/2 > 0 (fc {}, W {})",
                self.fc, self.bandwidth
            )));
        }
        if self.n_sub < 8 || !self.n_sub.is_power_of_two() {
            return Err(Error::Config(format!(
                "ofdm: N must be a power of two >= 8, got {}",
                self.n_sub
            )));
        }
        Ok(())
    }

    pub fn delta_f(&self) -> f64 {
        self.bandwidth / self.n_sub as f64
    }

    /// Frequency of storage slot `i`, i.e. subcarrier n = i − N/2.
    pub fn freq(&self, i: usize) -> f64 {
        self.fc + (i as f64 - (self.n_sub / 2) as f64) * self.delta_f()
    }

    /// Signed index ℓ (or n) of storage slot `i`.
    pub fn signed_index(&self, i: usize) -> f64 {
        i as f64 - (self.n_sub / 2) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaPattern {
    pub phi_3db: f64,
    pub theta_3db: f64,
    /// dBi.
    pub g_max: f64,
    /// dB.
    pub a_max: f64,
    /// Polarization slant ζ.
    pub slant: f64,
}

impl AntennaPattern {
    /// 0 dBi everywhere.
    pub fn isotropic() -> Self {
        Self {
            phi_3db: 1e9,
            theta_3db: 1e9,
            g_max: 0.0,
            a_max: 0.0,
            slant: 0.0,
        }
    }

    /// Omnidirectional element with an 17° elevation beam and 8 dBi peak.
    pub fn omni_8dbi() -> Self {
        Self {
            phi_3db: 360f64.to_radians(),
            theta_3db: 17f64.to_radians(),
            g_max: 8.0,
            a_max: 30.0,
            slant: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Antennas {
    pub tx: AntennaPattern,
    pub rx: AntennaPattern,
}

impl Default for Antennas {
    fn default() -> Self {
        Self {
            tx: AntennaPattern::omni_8dbi(),
            rx: AntennaPattern::omni_8dbi(),
        }
    }
}

/// Pattern gain in dB.
pub fn antenna_gain(pat: &AntennaPattern, phi: f64, theta: f64) -> f64 {
    let pb = phi / pat.phi_3db;
    let tb = (theta - PI / 2.0) / pat.theta_3db;
    pat.g_max - (12.0 * (pb * pb + tb * tb)).min(pat.a_max)
}

/// Field response in the local (θ̂, φ̂) basis.
pub fn antenna_response(pat: &AntennaPattern, phi: f64, theta: f64) -> [f64; 2] {
    let g = 10f64.powf(antenna_gain(pat, phi, theta) / 20.0);
    [g * pat.slant.cos(), g * pat.slant.sin()]
}

/// (θ̂, φ̂) at the direction `d`.
pub fn spherical_basis(d: Vec3) -> [Vec3; 2] {
    let (phi, theta) = crate::tracer::spherical_angles(d);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [Vec3::new(ct * cp, ct * sp, -st), Vec3::new(-sp, cp, 0.0)]
}

/// `T[i][j] = next_i · prev_j`.
pub fn basis_transform(prev: &[Vec3; 2], next: &[Vec3; 2]) -> [[f64; 2]; 2] {
    [
        [next[0].dot(prev[0]), next[0].dot(prev[1])],
        [next[1].dot(prev[0]), next[1].dot(prev[1])],
    ]
}

/// Γ_TE, Γ_TM for incidence cosine `cos_i`.
pub fn fresnel_coeffs<T: Real>(props: &EmProps<T>, fc: f64, cos_i: f64) -> (Cx<T>, Cx<T>) {
    let x = -1.0 / (2.0 * PI * fc * EPS0);
    let eta = Cx::new(props.eps_r, props.sigma * x);
    let sin2 = 1.0 - cos_i * cos_i;
    // Re(η − sin²θ) ≥ cos²θ > 0, so the principal root is the smooth branch
    let st = Cx::new(props.eps_r - sin2, props.sigma * x).sqrt_pos_re();
    let c = Cx::from_real(T::cst(cos_i));
    let te = (c - st) / (c + st);
    let ec = eta.scale_f(cos_i);
    let tm = (ec - st) / (ec + st);
    (te, tm)
}

/// Complex 2×2 matrix, row-major.
pub type Mat2<T> = [[Cx<T>; 2]; 2];

/// F_k in the incidence-plane basis (TE axis first).
pub fn interaction_matrix<T: Real>(inter: &Interaction, facet: &Facet, props: &EmProps<T>, fc: f64) -> Mat2<T> {
    let (te, tm) = fresnel_coeffs(props, fc, inter.cos_theta_i);
    let zero = Cx::zero();
    match inter.kind {
        InteractionKind::Reflection => {
            let r = (T::cst(1.0) - props.s * props.s).sqrt();
            [[te.scale(r), zero], [zero, tm.scale(r)]]
        }
        InteractionKind::Scatter => {
            let gbar = ((te.abs2() + tm.abs2()) * 0.5).sqrt();
            let lobe = (facet.patch_area * inter.cos_theta_i * inter.cos_theta_o / PI).sqrt();
            let a_s = props.s * gbar * lobe;
            let co = Cx::from_real(a_s * (T::cst(1.0) - props.k_chi).sqrt());
            let cross = Cx::from_real(a_s * props.k_chi.sqrt());
            [[co, cross], [cross, co]]
        }
    }
}

/// Unit vector perpendicular to `d` and the facet normal; the facet's first
/// edge stands in at normal incidence.
fn te_axis(d: Vec3, facet: &Facet) -> Vec3 {
    let e = d.cross(facet.normal);
    if e.norm() > 1e-9 {
        return e.normalize();
    }
    let edge = facet.v1 - facet.v0;
    (edge - d * d.dot(edge)).normalize()
}

/// Incoming and outgoing local bases at an interaction.
fn interaction_bases(inter: &Interaction, facet: &Facet) -> ([Vec3; 2], [Vec3; 2]) {
    let (di, dout) = (inter.incident_dir, inter.outgoing_dir);
    let n = if di.dot(facet.normal) > 0.0 {
        -facet.normal
    } else {
        facet.normal
    };
    let oriented = Facet {
        normal: n,
        ..facet.clone()
    };
    let es_in = te_axis(di, &oriented);
    let es_out = match inter.kind {
        InteractionKind::Reflection => es_in,
        InteractionKind::Scatter => te_axis(dout, &oriented),
    };
    ([es_in, es_in.cross(di)], [es_out, es_out.cross(dout)])
}

fn apply_real<T: Real>(m: &[[f64; 2]; 2], v: &[Cx<T>; 2]) -> [Cx<T>; 2] {
    [
        v[0].scale_f(m[0][0]) + v[1].scale_f(m[0][1]),
        v[0].scale_f(m[1][0]) + v[1].scale_f(m[1][1]),
    ]
}

fn apply_complex<T: Real>(m: &Mat2<T>, v: &[Cx<T>; 2]) -> [Cx<T>; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Free-space prefactor and spreading for a path.
pub fn path_spreading(path: &PropagationPath, fc: f64) -> f64 {
    let pre = SPEED_OF_LIGHT / (4.0 * PI * fc);
    let spread = if path.has_scatter() {
        path.segment_lengths.iter().product::<f64>()
    } else {
        path.total_length
    };
    pre / spread
}

/// `a = c_Rᵀ (Π T F) c_T`, without delay phase. `props[k]` belongs to the
/// k-th interaction.
pub fn path_coefficient<T: Real>(
    path: &PropagationPath,
    facets: &[Facet],
    props: &[EmProps<T>],
    antennas: &Antennas,
    fc: f64,
) -> Cx<T> {
    assert_eq!(props.len(), path.interactions.len());
    let ct = antenna_response(&antennas.tx, path.phi_tx, path.theta_tx);
    let cr = antenna_response(&antennas.rx, path.phi_rx, path.theta_rx);
    let mut v = [Cx::from_real(T::cst(ct[0])), Cx::from_real(T::cst(ct[1]))];
    let mut basis = spherical_basis(path.departure_dir);
    for (inter, p) in path.interactions.iter().zip(props) {
        let facet = &facets[inter.facet_id];
        let (bin, bout) = interaction_bases(inter, facet);
        v = apply_real(&basis_transform(&basis, &bin), &v);
        v = apply_complex(&interaction_matrix(inter, facet, p, fc), &v);
        basis = bout;
    }
    let rx_basis = spherical_basis(path.arrival_dir);
    v = apply_real(&basis_transform(&basis, &rx_basis), &v);
    (v[0].scale_f(cr[0]) + v[1].scale_f(cr[1])).scale_f(path_spreading(path, fc))
}

/// Where material properties come from.
#[derive(Debug, Clone, Copy)]
pub enum FieldSource<'a> {
    Net(&'a EmFieldNet),
    Table(&'a MaterialTable),
}

impl FieldSource<'_> {
    pub fn props_at(&self, facet: &Facet, point: Vec3) -> Result<EmProperties> {
        match self {
            FieldSource::Net(n) => Ok(n.query(point, Some(facet.category))),
            FieldSource::Table(t) => t.get(facet.category),
        }
    }
}

/// Coefficients of every path in the set, in path order.
pub fn pathset_coefficients(
    scene: &SceneGeometry,
    set: &PathSet,
    source: FieldSource<'_>,
    antennas: &Antennas,
    fc: f64,
) -> Result<Vec<Complex64>> {
    set.paths
        .iter()
        .map(|p| {
            let props = p
                .interactions
                .iter()
                .map(|i| Ok(source.props_at(&scene.facets[i.facet_id], i.point)?.lift()))
                .collect::<Result<Vec<EmProps<f64>>>>()?;
            Ok(path_coefficient(p, &scene.facets, &props, antennas, fc).value())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csi {
    /// Slot i holds subcarrier n = i − N/2.
    pub h: Vec<Complex64>,
}

impl Csi {
    pub fn zeros(n: usize) -> Self {
        Self {
            h: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn energy(&self) -> f64 {
        self.h.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scale(&self, g: f64) -> Self {
        Self {
            h: self.h.iter().map(|c| c * g).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// dB.
    pub p: f64,
    /// Seconds.
    pub tau: f64,
}

/// `e^{−j2π f τ}`.
fn delay_phase(f: f64, tau: f64) -> Complex64 {
    let (s, c) = (2.0 * PI * f * tau).sin_cos();
    Complex64::new(c, -s)
}

/// `H[n] = Σ a_i e^{−j2π f_n τ_i}`.
pub fn compute_csi(delays: &[f64], coeffs: &[Complex64], ofdm: &OfdmConfig) -> Csi {
    assert_eq!(delays.len(), coeffs.len());
    let h = (0..ofdm.n_sub)
        .map(|i| {
            let f = ofdm.freq(i);
            delays
                .iter()
                .zip(coeffs)
                .map(|(&t, &a)| a * delay_phase(f, t))
                .sum()
        })
        .collect();
    Csi { h }
}

/// [`compute_csi`] over any [`Real`].
pub fn compute_csi_generic<T: Real>(delays: &[f64], coeffs: &[Cx<T>], ofdm: &OfdmConfig) -> Vec<Cx<T>> {
    (0..ofdm.n_sub)
        .map(|i| {
            let f = ofdm.freq(i);
            delays
                .iter()
                .zip(coeffs)
                .fold(Cx::zero(), |acc, (&t, &a)| acc + a.mul_c(delay_phase(f, t)))
        })
        .collect()
}

/// CSI of a traced set under a field source.
pub fn simulate_csi(
    scene: &SceneGeometry,
    set: &PathSet,
    source: FieldSource<'_>,
    antennas: &Antennas,
    ofdm: &OfdmConfig,
) -> Result<Csi> {
    let a = pathset_coefficients(scene, set, source, antennas, ofdm.fc)?;
    let d: Vec<f64> = set.paths.iter().map(|p| p.delay).collect();
    Ok(compute_csi(&d, &a, ofdm))
}

/// Centered unitary transforms between subcarrier and tap index, both
/// running over −N/2..N/2−1.
#[derive(Clone)]
pub struct CenteredDft {
    n: usize,
    inv: Arc<dyn Fft<f64>>,
    fwd: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CenteredDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CenteredDft").field("n", &self.n).finish()
    }
}

impl CenteredDft {
    pub fn new(n: usize) -> Self {
        assert!(n >= 4 && n.is_multiple_of(4));
        let mut planner = FftPlanner::new();
        Self {
            n,
            inv: planner.plan_fft_inverse(n),
            fwd: planner.plan_fft_forward(n),
        }
    }

    // (−1)^{i} alternation realizes the N/2 index shift on both sides;
    // the cross term (−1)^{N/2} is 1 because 4 | N.
    fn run(&self, x: &[Complex64], fft: &Arc<dyn Fft<f64>>) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n);
        let s = 1.0 / (self.n as f64).sqrt();
        let mut buf: Vec<Complex64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
            .collect();
        fft.process(&mut buf);
        for (i, v) in buf.iter_mut().enumerate() {
            *v *= if i % 2 == 0 { s } else { -s };
        }
        buf
    }

    /// `h[ℓ] = N^{-1/2} Σ_n H[n] e^{j2πnℓ/N}`.
    pub fn inverse(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.run(x, &self.inv)
    }

    /// Adjoint (and inverse) of [`Self::inverse`].
    pub fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.run(x, &self.fwd)
    }
}

pub fn csi_to_cir(csi: &Csi) -> Vec<Complex64> {
    CenteredDft::new(csi.h.len()).inverse(&csi.h)
}

/// Direct O(N²) unitary IDFT over any [`Real`].
pub fn csi_to_cir_generic<T: Real>(h: &[Cx<T>]) -> Vec<Cx<T>> {
    let n = h.len();
    let half = (n / 2) as f64;
    let s = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|l| {
            let ell = l as f64 - half;
            h.iter()
                .enumerate()
                .fold(Cx::zero(), |acc, (i, &v)| {
                    let ang = 2.0 * PI * (i as f64 - half) * ell / n as f64;
                    acc + v.mul_c(Complex64::new(ang.cos(), ang.sin()))
                })
                .scale_f(s)
        })
        .collect()
}

/// (p dB, τ s) from tap energy moments `Σ|h|²`, `Σℓ|h|²`, `Σℓ²|h|²`.
pub fn params_from_moments<T: Real>(p_lin: T, m1: T, m2: T, bandwidth: f64) -> (T, T) {
    let p = p_lin.log10() * 10.0;
    let mean = m1 / p_lin;
    let var = m2 / p_lin - mean * mean;
    let tau = if var.value() > 0.0 {
        var.sqrt() / bandwidth
    } else {
        T::cst(0.0)
    };
    (p, tau)
}

/// Gain and RMS delay spread of a tap vector.
pub fn cir_params(cir: &[Complex64], bandwidth: f64) -> Result<ChannelParams> {
    let n = cir.len();
    let half = (n / 2) as f64;
    let e: Vec<f64> = cir.iter().map(|c| c.norm_sqr()).collect();
    let p_lin: f64 = e.iter().sum();
    if !(p_lin > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let mean = e
        .iter()
        .enumerate()
        .map(|(i, &w)| (i as f64 - half) * w)
        .sum::<f64>()
        / p_lin;
    let var = e
        .iter()
        .enumerate()
        .map(|(i, &w)| (i as f64 - half - mean).powi(2) * w)
        .sum::<f64>()
        / p_lin;
    Ok(ChannelParams {
        p: 10.0 * p_lin.log10(),
        tau: var.sqrt() / bandwidth,
    })
}

pub fn extract_params(csi: &Csi, ofdm: &OfdmConfig) -> Result<ChannelParams> {
    cir_params(&csi_to_cir(csi), ofdm.bandwidth)
}

/// Tap-domain (p, τ) over any [`Real`] from a CIR.
pub fn cir_params_generic<T: Real>(cir: &[Cx<T>], bandwidth: f64) -> (T, T) {
    let half = (cir.len() / 2) as f64;
    let mut p = T::cst(0.0);
    let mut m1 = T::cst(0.0);
    let mut m2 = T::cst(0.0);
    for (i, c) in cir.iter().enumerate() {
        let l = i as f64 - half;
        let e = c.abs2();
        p = p + e;
        m1 = m1 + e * l;
        m2 = m2 + e * (l * l);
    }
    params_from_moments(p, m1, m2, bandwidth)
}

/// Fast (p, τ) on a tape: the three tap moments enter as custom nodes whose
/// partials with respect to each `a_k` come from the adjoint transform.
#[derive(Debug, Clone)]
pub struct MomentRoute {
    ofdm: OfdmConfig,
    dft: CenteredDft,
}

impl MomentRoute {
    pub fn new(ofdm: &OfdmConfig) -> Self {
        Self {
            ofdm: *ofdm,
            dft: CenteredDft::new(ofdm.n_sub),
        }
    }

    pub fn params<'t>(&self, tape: &'t Tape, delays: &[f64], coeffs: &[Cx<Var<'t>>]) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.ofdm.n_sub;
        let k = delays.len();
        let a: Vec<Complex64> = coeffs.iter().map(Cx::value).collect();
        // phases[i * k + j] = e^{−j2π f_i τ_j}
        let phases: Vec<Complex64> = (0..n)
            .flat_map(|i| {
                let f = self.ofdm.freq(i);
                delays.iter().map(move |&t| delay_phase(f, t))
            })
            .collect();
        let hf: Vec<Complex64> = (0..n)
            .map(|i| (0..k).map(|j| a[j] * phases[i * k + j]).sum())
            .collect();
        let h = self.dft.inverse(&hf);
        let half = (n / 2) as f64;
        let mut out = Vec::with_capacity(3);
        for pow in 0..3 {
            let w = |i: usize| (i as f64 - half).powi(pow);
            let value: f64 = h.iter().enumerate().map(|(i, c)| w(i) * c.norm_sqr()).sum();
            let u: Vec<Complex64> = h.iter().enumerate().map(|(i, &c)| c * w(i)).collect();
            let uf = self.dft.forward(&u);
            let mut parents = Vec::with_capacity(2 * k);
            for (j, c) in coeffs.iter().enumerate() {
                let g: Complex64 = (0..n).map(|i| phases[i * k + j].conj() * uf[i]).sum();
                parents.push((c.re, 2.0 * g.re));
                parents.push((c.im, 2.0 * g.im));
            }
            out.push(tape.custom(value, &parents));
        }
        if !(out[0].value() > 0.0) {
            return Err(Error::ZeroEnergy);
        }
        Ok(params_from_moments(out[0], out[1], out[2], self.ofdm.bandwidth))
    }
}
