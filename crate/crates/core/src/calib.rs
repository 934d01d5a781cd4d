//! Field calibration against a channel map: cached paths, uncertainty-weighted
//! NLL, EMA gain bias and Adam.
//!
//! Each iteration evaluates the field for every interaction point of the
//! batch in one dense pass, runs the channel chain per sample on its own tape
//! with the raw field outputs as leaves, and pushes the chained raw-output
//! gradients back through the network in one dense backward pass.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcm::BcmEntry;
use crate::channel::{
    extract_params, path_coefficient, simulate_csi, Antennas, ChannelParams, FieldSource, MomentRoute, OfdmConfig,
};
use crate::diffgraph::{Real, Tape, Var};
use crate::emfield::{activation_map, BatchCache, EmFieldNet, EmProps, NetArch};
use crate::error::{Error, Result};
use crate::geometry::{SceneGeometry, Vec3};
use crate::tracer::{trace_paths, PathSet, TraceConfig};

/// Starting value of the bias EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasInit {
    Zero,
    /// Batch estimate over every cached row under the initial field.
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub ema: f64,
    pub bias_init: BiasInit,
    pub eta_p: f64,
    pub eta_tau: f64,
    pub kappa_p_floor: f64,
    pub kappa_tau_floor_ns2: f64,
    pub seed: u64,
    pub trace: TraceConfig,
    pub arch: NetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            iterations: 1000,
            ema: 0.99,
            bias_init: BiasInit::Estimate,
            eta_p: 1.0,
            eta_tau: 1.0,
            kappa_p_floor: 0.25,
            kappa_tau_floor_ns2: 1.0,
            seed: 0,
            trace: TraceConfig::default(),
            arch: NetArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && (0.0..1.0).contains(&self.ema)
            && self.eta_p >= 0.0
            && self.eta_tau >= 0.0
            && self.learning_rate > 0.0
            && self.kappa_p_floor > 0.0
            && self.kappa_tau_floor_ns2 > 0.0
            && self.arch.num_freqs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }
}

/// One supervision point, τ in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTarget {
    pub p_hat: f64,
    pub tau_hat_ns: f64,
    pub kappa_p: f64,
    pub kappa_tau_ns2: f64,
}

impl From<&BcmEntry> for LossTarget {
    fn from(e: &BcmEntry) -> Self {
        Self {
            p_hat: e.p_hat,
            tau_hat_ns: e.tau_hat * 1e9,
            kappa_p: e.kappa_p,
            kappa_tau_ns2: e.kappa_tau * 1e18,
        }
    }
}

/// `(1/B) Σ η_p[(p+β−p̂)²/2κ_p + ½log 2πκ_p] + η_τ[(τ−τ̂)²/2κ_τ + ½log 2πκ_τ]`
/// with κ floored.
pub fn nll_loss<T: Real>(p: &[T], tau_ns: &[T], targets: &[LossTarget], beta: f64, cfg: &TrainConfig) -> T {
    assert!(p.len() == targets.len() && tau_ns.len() == targets.len());
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut acc = T::cst(0.0);
    for ((&pi, &ti), t) in p.iter().zip(tau_ns).zip(targets) {
        let kp = t.kappa_p.max(cfg.kappa_p_floor);
        let kt = t.kappa_tau_ns2.max(cfg.kappa_tau_floor_ns2);
        let rp = pi + beta - t.p_hat;
        let rt = ti - t.tau_hat_ns;
        acc = acc + (rp * rp * (0.5 / kp) + 0.5 * (two_pi * kp).ln()) * cfg.eta_p;
        acc = acc + (rt * rt * (0.5 / kt) + 0.5 * (two_pi * kt).ln()) * cfg.eta_tau;
    }
    acc * (1.0 / targets.len() as f64)
}

/// Batch mean of `p̂ − p_RT`.
pub fn estimate_bias(p_hat: &[f64], p_rt: &[f64]) -> f64 {
    assert!(!p_hat.is_empty() && p_hat.len() == p_rt.len());
    p_hat.iter().zip(p_rt).map(|(a, b)| a - b).sum::<f64>() / p_hat.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasState {
    /// dB.
    pub beta: f64,
}

pub fn update_bias(state: BiasState, beta_hat: f64, lambda: f64) -> BiasState {
    BiasState {
        beta: lambda * state.beta + (1.0 - lambda) * beta_hat,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Descent step on `w`.
    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        assert!(w.len() == self.m.len() && g.len() == w.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    /// Index into the BCM entry list.
    pub entry: usize,
    pub set: PathSet,
}

/// Path sets for the training transmitter, one row per traceable entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCache {
    pub tx: Vec3,
    pub trace: TraceConfig,
    pub rows: Vec<CacheRow>,
    /// Entries without any path.
    pub excluded: Vec<usize>,
}

impl PathCache {
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("path cache serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn precompute_cache(scene: &SceneGeometry, tx: Vec3, entries: &[BcmEntry], trace: &TraceConfig) -> PathCache {
    let sets: Vec<PathSet> = entries
        .par_iter()
        .map(|e| trace_paths(scene, tx, e.r_star, trace))
        .collect();
    let mut rows = Vec::with_capacity(sets.len());
    let mut excluded = Vec::new();
    for (i, set) in sets.into_iter().enumerate() {
        if set.paths.is_empty() {
            excluded.push(i);
        } else {
            rows.push(CacheRow { entry: i, set });
        }
    }
    if !excluded.is_empty() {
        log::info!("{} entries without paths excluded from training", excluded.len());
    }
    PathCache {
        tx,
        trace: *trace,
        rows,
        excluded,
    }
}

/// Everything the loss needs besides the network.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub scene: &'a SceneGeometry,
    pub cache: &'a PathCache,
    /// Aligned with `cache.rows`.
    pub targets: Vec<LossTarget>,
    pub antennas: Antennas,
    pub ofdm: OfdmConfig,
}

impl<'a> TrainData<'a> {
    pub fn new(
        scene: &'a SceneGeometry,
        cache: &'a PathCache,
        entries: &[BcmEntry],
        antennas: Antennas,
        ofdm: OfdmConfig,
    ) -> Self {
        let targets = cache.rows.iter().map(|r| LossTarget::from(&entries[r.entry])).collect();
        Self {
            scene,
            cache,
            targets,
            antennas,
            ofdm,
        }
    }
}

/// Field query points of a path set, in path then interaction order.
pub fn query_points(scene: &SceneGeometry, set: &PathSet) -> Vec<(Vec3, Option<i64>)> {
    set.paths
        .iter()
        .flat_map(|p| p.interactions.iter())
        .map(|i| (i.point, Some(scene.facets[i.facet_id].category)))
        .collect()
}

/// Channel parameters of one sample and their partials with respect to the
/// raw field outputs at each query point.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub p: f64,
    pub tau_ns: f64,
    pub dp: Vec<[f64; 4]>,
    pub dtau_ns: Vec<[f64; 4]>,
}

pub fn eval_sample(
    scene: &SceneGeometry,
    set: &PathSet,
    raw: &[[f64; 4]],
    antennas: &Antennas,
    route: &MomentRoute,
    fc: f64,
) -> Result<SampleEval> {
    let tape = Tape::new();
    let leaves: Vec<[Var<'_>; 4]> = raw
        .iter()
        .map(|r| std::array::from_fn(|k| tape.var(r[k])))
        .collect();
    let props: Vec<EmProps<Var<'_>>> = leaves.iter().map(|l| activation_map(*l)).collect();
    let mut coeffs = Vec::with_capacity(set.paths.len());
    let mut o = 0;
    for path in &set.paths {
        let n = path.interactions.len();
        coeffs.push(path_coefficient(path, &scene.facets, &props[o..o + n], antennas, fc));
        o += n;
    }
    assert_eq!(o, raw.len());
    let delays: Vec<f64> = set.paths.iter().map(|p| p.delay).collect();
    let (p, tau) = route.params(&tape, &delays, &coeffs)?;
    let gp = p.backward();
    let gt = tau.backward();
    let grab = |g: &crate::diffgraph::Gradients, scale: f64| -> Vec<[f64; 4]> {
        leaves
            .iter()
            .map(|l| std::array::from_fn(|k| scale * g.wrt(&l[k])))
            .collect()
    };
    Ok(SampleEval {
        p: p.value(),
        tau_ns: tau.value() * 1e9,
        dp: grab(&gp, 1.0),
        dtau_ns: grab(&gt, 1e9),
    })
}

/// Dense forward over the batch's query points, then per-sample chains.
pub fn forward_rows(
    net: &EmFieldNet,
    data: &TrainData<'_>,
    rows: &[usize],
) -> Result<(BatchCache, Vec<SampleEval>, Vec<usize>)> {
    let mut pts = Vec::new();
    let mut offsets = Vec::with_capacity(rows.len() + 1);
    offsets.push(0);
    for &r in rows {
        pts.extend(query_points(data.scene, &data.cache.rows[r].set));
        offsets.push(pts.len());
    }
    let cache = net.forward_batch(&pts);
    let route = MomentRoute::new(&data.ofdm);
    let raws: Vec<[f64; 4]> = (0..cache.len()).map(|j| cache.raw_at(j)).collect();
    let evals = rows
        .par_iter()
        .enumerate()
        .map(|(b, &r)| {
            let span = &raws[offsets[b]..offsets[b + 1]];
            eval_sample(data.scene, &data.cache.rows[r].set, span, &data.antennas, &route, data.ofdm.fc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cache, evals, offsets))
}

/// Loss value and parameter gradient at fixed β.
pub fn loss_backward(
    net: &EmFieldNet,
    cache: &BatchCache,
    evals: &[SampleEval],
    offsets: &[usize],
    targets: &[LossTarget],
    beta: f64,
    cfg: &TrainConfig,
) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let p: Vec<Var<'_>> = evals.iter().map(|e| tape.var(e.p)).collect();
    let t: Vec<Var<'_>> = evals.iter().map(|e| tape.var(e.tau_ns)).collect();
    let loss = nll_loss(&p, &t, targets, beta, cfg);
    let g = loss.backward();
    let mut delta = vec![[0.0; 4]; cache.len()];
    for (b, e) in evals.iter().enumerate() {
        let (lp, lt) = (g.wrt(&p[b]), g.wrt(&t[b]));
        for (j, d) in delta[offsets[b]..offsets[b + 1]].iter_mut().enumerate() {
            for k in 0..4 {
                d[k] = lp * e.dp[j][k] + lt * e.dtau_ns[j][k];
            }
        }
    }
    (loss.value(), net.backward_batch(cache, &delta))
}

/// Loss and gradient over `rows` at fixed β.
pub fn batch_loss_grad(
    net: &EmFieldNet,
    data: &TrainData<'_>,
    rows: &[usize],
    beta: f64,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let (cache, evals, offsets) = forward_rows(net, data, rows)?;
    let targets: Vec<LossTarget> = rows.iter().map(|&r| data.targets[r]).collect();
    Ok(loss_backward(net, &cache, &evals, &offsets, &targets, beta, cfg))
}

/// Loss over `rows` via plain CSI simulation and DFT parameter extraction.
pub fn batch_loss_direct(
    net: &EmFieldNet,
    data: &TrainData<'_>,
    rows: &[usize],
    beta: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut p = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len());
    for &r in rows {
        let set = &data.cache.rows[r].set;
        let csi = simulate_csi(data.scene, set, FieldSource::Net(net), &data.antennas, &data.ofdm)?;
        let ChannelParams { p: pi, tau } = extract_params(&csi, &data.ofdm)?;
        p.push(pi);
        t.push(tau * 1e9);
    }
    let targets: Vec<LossTarget> = rows.iter().map(|&r| data.targets[r]).collect();
    Ok(nll_loss(&p, &t, &targets, beta, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iteration: usize,
    pub loss: f64,
    pub beta: f64,
    pub beta_hat: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bias: BiasState,
    pub history: Vec<IterLog>,
    pub optimizer: Adam,
}

/// Seeded epoch-wise shuffled batches over `n` rows.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let b = b.min(self.order.len());
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn train(net: &mut EmFieldNet, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let bias0 = match cfg.bias_init {
        BiasInit::Zero => BiasState::default(),
        BiasInit::Estimate => initial_bias(net, data)?,
    };
    train_from(net, data, cfg, bias0)
}

/// Bias estimate over every cached row under the current field. Starting
/// the EMA here makes training equivariant to a constant shift of the map
/// gains: the shift lands in β and never reaches the field.
pub fn initial_bias(net: &EmFieldNet, data: &TrainData<'_>) -> Result<BiasState> {
    let rows: Vec<usize> = (0..data.cache.rows.len()).collect();
    if rows.is_empty() {
        return Err(Error::NotEnoughSamples { need: 1, have: 0 });
    }
    let (_, evals, _) = forward_rows(net, data, &rows)?;
    let p_rt: Vec<f64> = evals.iter().map(|e| e.p).collect();
    let p_hat: Vec<f64> = rows.iter().map(|&r| data.targets[r].p_hat).collect();
    Ok(BiasState {
        beta: estimate_bias(&p_hat, &p_rt),
    })
}

/// Training loop starting from a given bias.
pub fn train_from(net: &mut EmFieldNet, data: &TrainData<'_>, cfg: &TrainConfig, bias0: BiasState) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.cache.rows.len();
    if n == 0 {
        return Err(Error::NotEnoughSamples { need: 1, have: 0 });
    }
    let mut sampler = BatchSampler::new(n, cfg.seed);
    let mut adam = Adam::new(net.num_params(), cfg.learning_rate);
    let mut params = net.params();
    let mut bias = bias0;
    let mut history = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let rows = sampler.next_batch(cfg.batch_size);
        let (cache, evals, offsets) = forward_rows(net, data, &rows)?;
        let targets: Vec<LossTarget> = rows.iter().map(|&r| data.targets[r]).collect();
        let p_rt: Vec<f64> = evals.iter().map(|e| e.p).collect();
        let p_hat: Vec<f64> = targets.iter().map(|t| t.p_hat).collect();
        let beta_hat = estimate_bias(&p_hat, &p_rt);
        bias = update_bias(bias, beta_hat, cfg.ema);
        let (loss, grad) = loss_backward(net, &cache, &evals, &offsets, &targets, bias.beta, cfg);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let bad: Vec<usize> = rows
                .iter()
                .zip(&evals)
                .filter(|(_, e)| !(e.p.is_finite() && e.tau_ns.is_finite()))
                .map(|(&r, _)| data.cache.rows[r].entry)
                .collect();
            let entries = if bad.is_empty() {
                rows.iter().map(|&r| data.cache.rows[r].entry).collect()
            } else {
                bad
            };
            return Err(Error::NonFiniteLoss { iteration: it, entries });
        }
        adam.step(&mut params, &grad);
        net.set_params(&params);
        history.push(IterLog {
            iteration: it,
            loss,
            beta: bias.beta,
            beta_hat,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if it % 100 == 0 {
            log::debug!("iter {it}: loss {loss:.4}, β {:.3}", bias.beta);
        }
    }
    Ok(TrainOutcome {
        bias,
        history,
        optimizer: adam,
    })
}

pub fn write_train_log(history: &[IterLog], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss,beta,beta_hat,wall_ms")?;
    for h in history {
        writeln!(f, "{},{},{},{},{:.3}", h.iteration, h.loss, h.beta, h.beta_hat, h.wall_ms)?;
    }
    f.flush()?;
    Ok(())
}

/// Calibrated field plus bias and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub bias: BiasState,
    pub optimizer: Adam,
    pub net: EmFieldNet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emfield::{init_net, FourierEncoder};
    use crate::geometry::SceneBuilder;
    use rand::Rng;

    fn unit_cfg() -> TrainConfig {
        TrainConfig {
            kappa_p_floor: 1e-9,
            kappa_tau_floor_ns2: 1e-9,
            ..TrainConfig::default()
        }
    }

    fn target(p_hat: f64, tau: f64, kp: f64, kt: f64) -> LossTarget {
        LossTarget {
            p_hat,
            tau_hat_ns: tau,
            kappa_p: kp,
            kappa_tau_ns2: kt,
        }
    }

    #[test]
    fn nll_examples() {
        let k = 1.0 / (2.0 * std::f64::consts::PI);
        let cfg = unit_cfg();
        let l = nll_loss(&[-70.0], &[12.0], &[target(-70.0, 12.0, k, k)], 0.0, &cfg);
        assert!(l.abs() < 1e-15);
        let one = TrainConfig { eta_tau: 0.0, ..unit_cfg() };
        let l = nll_loss(&[1.0], &[0.0], &[target(0.0, 0.0, 0.5, 0.5)], 0.0, &one);
        assert!((l - (1.0 + 0.5 * std::f64::consts::PI.ln())).abs() < 1e-12);
        assert!((l - 1.5724).abs() < 1e-4);
        let a = nll_loss(&[0.0], &[0.0], &[target(0.0, 0.0, 0.7, 0.7)], 0.0, &cfg);
        let b = nll_loss(&[0.0], &[0.0], &[target(0.0, 0.0, 1.4, 1.4)], 0.0, &cfg);
        assert!((b - a - 2f64.ln()).abs() < 1e-12);
        // β shifts the gain residual only
        let l = nll_loss(&[-3.0], &[0.0], &[target(0.0, 0.0, 0.5, 0.5)], 3.0, &one);
        assert!((l - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_floors_keep_loss_finite() {
        let cfg = TrainConfig::default();
        let l = nll_loss(&[1e3], &[-1e3], &[target(0.0, 0.0, 0.0, 0.0)], 0.0, &cfg);
        assert!(l.is_finite());
    }

    #[test]
    fn bias_examples() {
        assert_eq!(estimate_bias(&[5.0, 6.0], &[2.0, 3.0]), 3.0);
        assert_eq!(estimate_bias(&[1.0, -1.0], &[0.0, 0.0]), 0.0);
        assert_eq!(estimate_bias(&[3.0, 5.0, 10.0], &[0.0; 3]), 6.0);
        assert_eq!(update_bias(BiasState { beta: 7.0 }, 2.5, 0.0).beta, 2.5);
        assert!((update_bias(BiasState::default(), 1.0, 0.99).beta - 0.01).abs() < 1e-15);
        let mut s = BiasState::default();
        for _ in 0..5000 {
            s = update_bias(s, 4.0, 0.99);
        }
        assert!((s.beta - 4.0).abs() < 1e-9);
    }

    #[test]
    fn adam_examples() {
        let mut w = vec![1.0, -2.0];
        let mut a = Adam::new(2, 1e-3);
        a.step(&mut w, &[0.0, 0.0]);
        assert_eq!(w, vec![1.0, -2.0]);
        for g in [1e-6, 3.0, -250.0] {
            let mut w = vec![0.5];
            let mut a = Adam::new(1, 1e-3);
            a.step(&mut w, &[g]);
            let step = 0.5 - w[0];
            assert!((step.abs() - 1e-3).abs() < 1e-3 * 1e-2, "{g}: {step}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn sampler_reshuffles_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let a = s.next_batch(10);
        let b = s.next_batch(10);
        let mut sa = a.clone();
        sa.sort();
        assert_eq!(sa, (0..10).collect::<Vec<_>>());
        assert_ne!(a, b);
        let mut t = BatchSampler::new(10, 3);
        assert_eq!(t.next_batch(10), a);
        assert_eq!(BatchSampler::new(3, 0).next_batch(8).len(), 3);
    }

    /// Floor 40 × 40 m at z = 0 plus one wall at x = 20.
    fn small_scene() -> SceneGeometry {
        let mut b = SceneBuilder::new();
        b.rect(Vec3::new(-20.0, -20.0, 0.0), Vec3::new(40.0, 0.0, 0.0), Vec3::new(0.0, 40.0, 0.0), 1, 1, 0);
        b.rect(Vec3::new(20.0, -20.0, 0.0), Vec3::new(0.0, 0.0, 10.0), Vec3::new(0.0, 40.0, 0.0), 1, 1, 1);
        b.build().unwrap()
    }

    fn small_net(seed: u64, scene: &SceneGeometry) -> EmFieldNet {
        // 10 inputs → 1 hidden unit → 4 outputs, one embedded category
        let arch = NetArch {
            hidden: vec![1],
            num_freqs: 1,
            embed_dim: 1,
        };
        init_net(seed, &arch, FourierEncoder::new(1, &scene.bounds), &[0])
    }

    fn entries(scene_tx: Vec3, n: usize, seed: u64) -> Vec<BcmEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let r = Vec3::new(rng.gen_range(-10.0..15.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.5..3.0));
                BcmEntry {
                    index: i,
                    r_star: r,
                    p_hat: -40.0 - 20.0 * r.distance(scene_tx).log10() + rng.gen_range(-3.0..3.0),
                    tau_hat: rng.gen_range(1e-9..20e-9),
                    kappa_p: rng.gen_range(0.5..4.0),
                    kappa_tau: rng.gen_range(1e-18..9e-18),
                }
            })
            .collect()
    }

    #[test]
    fn loss_gradient_matches_fd_on_reduced_net() {
        let scene = small_scene();
        let tx = Vec3::new(0.0, 0.0, 2.0);
        let es = entries(tx, 6, 1);
        let cache = precompute_cache(&scene, tx, &es, &TraceConfig::default());
        let ofdm = OfdmConfig {
            n_sub: 64,
            ..OfdmConfig::default()
        };
        let data = TrainData::new(&scene, &cache, &es, Antennas::default(), ofdm);
        let mut net = small_net(2, &scene);
        assert_eq!(net.num_params(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p0: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.3..0.3)).collect();
        // hidden bias keeps the single ReLU unit active
        p0[10] = 1.0;
        net.set_params(&p0);
        let rows: Vec<usize> = (0..cache.rows.len()).collect();
        let cfg = TrainConfig::default();
        let (l, g) = batch_loss_grad(&net, &data, &rows, 1.5, &cfg).unwrap();
        let ld = batch_loss_direct(&net, &data, &rows, 1.5, &cfg).unwrap();
        assert!((l - ld).abs() < 1e-9 * l.abs().max(1.0), "{l} vs {ld}");
        let h = 1e-5;
        for i in 0..20 {
            let mut q = p0.clone();
            q[i] = p0[i] + h;
            net.set_params(&q);
            let fp = batch_loss_direct(&net, &data, &rows, 1.5, &cfg).unwrap();
            q[i] = p0[i] - h;
            net.set_params(&q);
            let fm = batch_loss_direct(&net, &data, &rows, 1.5, &cfg).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let d = (fd - g[i]).abs();
            assert!(d <= 1e-4 * fd.abs().max(g[i].abs()) || d <= 1e-8, "param {i}: tape {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn zero_weights_freeze_net() {
        let scene = small_scene();
        let tx = Vec3::new(0.0, 0.0, 2.0);
        let es = entries(tx, 5, 3);
        let cache = precompute_cache(&scene, tx, &es, &TraceConfig::default());
        let ofdm = OfdmConfig {
            n_sub: 32,
            ..OfdmConfig::default()
        };
        let data = TrainData::new(&scene, &cache, &es, Antennas::default(), ofdm);
        let mut net = small_net(4, &scene);
        let before = net.params();
        let cfg = TrainConfig {
            eta_p: 0.0,
            eta_tau: 0.0,
            iterations: 5,
            batch_size: 3,
            ..TrainConfig::default()
        };
        train(&mut net, &data, &cfg).unwrap();
        assert_eq!(net.params(), before);
    }

    #[test]
    fn one_facet_smoke_run_lowers_loss() {
        let mut b = SceneBuilder::new();
        b.rect(Vec3::new(-30.0, -30.0, 0.0), Vec3::new(60.0, 0.0, 0.0), Vec3::new(0.0, 60.0, 0.0), 1, 1, 0);
        // one triangle
        let tri = b.build().unwrap();
        let one = SceneGeometry::from_file({
            let mut f = tri.to_file();
            f.facets.truncate(1);
            f
        })
        .unwrap();
        assert_eq!(one.len(), 1);
        let tx = Vec3::new(0.0, 0.0, 3.0);
        let mut es = entries(tx, 16, 7);
        for e in es.iter_mut() {
            e.r_star = Vec3::new(e.r_star.x.abs() * 0.5 - 8.0, -(e.r_star.y.abs()) * 0.5 - 8.0, e.r_star.z);
        }
        let cache = precompute_cache(&one, tx, &es, &TraceConfig::default());
        assert!(cache.rows.iter().any(|r| r.set.paths.len() > 1));
        let ofdm = OfdmConfig {
            n_sub: 32,
            ..OfdmConfig::default()
        };
        let data = TrainData::new(&one, &cache, &es, Antennas::default(), ofdm);
        let mut net = small_net(5, &one);
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let rows: Vec<usize> = (0..cache.rows.len()).collect();
        let bias0 = initial_bias(&net, &data).unwrap();
        let out = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 50);
        let first = out.history[0];
        let before = {
            let fresh = small_net(5, &one);
            batch_loss_grad(&fresh, &data, &rows, first.beta, &cfg).unwrap().0
        };
        let after = batch_loss_grad(&net, &data, &rows, first.beta, &cfg).unwrap().0;
        assert!(after < before, "{after} !< {before}");
        // EMA recursion holds exactly
        let mut prev = bias0.beta;
        for h in &out.history {
            assert!((h.beta - 0.99 * prev - 0.01 * h.beta_hat).abs() < 1e-12);
            prev = h.beta;
        }
    }

    #[test]
    fn gain_shift_lands_in_bias() {
        let scene = small_scene();
        let tx = Vec3::new(0.0, 0.0, 2.0);
        let es = entries(tx, 12, 4);
        let shifted: Vec<BcmEntry> = es.iter().map(|e| BcmEntry { p_hat: e.p_hat + 10.0, ..*e }).collect();
        let cache = precompute_cache(&scene, tx, &es, &TraceConfig::default());
        let ofdm = OfdmConfig {
            n_sub: 32,
            ..OfdmConfig::default()
        };
        let cfg = TrainConfig {
            iterations: 20,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = |es: &[BcmEntry]| {
            let data = TrainData::new(&scene, &cache, es, Antennas::default(), ofdm);
            let mut net = small_net(3, &scene);
            let b0 = initial_bias(&net, &data).unwrap();
            let out = train(&mut net, &data, &cfg).unwrap();
            (b0.beta, out.bias.beta, net.params())
        };
        let (a0, a, pa) = run(&es);
        let (b0, b, pb) = run(&shifted);
        assert!((b0 - a0 - 10.0).abs() < 1e-9);
        assert!((b - a - 10.0).abs() < 1e-9);
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let scene = small_scene();
        let tx = Vec3::new(0.0, 0.0, 2.0);
        let es = entries(tx, 8, 11);
        let cache = precompute_cache(&scene, tx, &es, &TraceConfig::default());
        assert_eq!(cache.content_hash(), precompute_cache(&scene, tx, &es, &TraceConfig::default()).content_hash());
        let ofdm = OfdmConfig {
            n_sub: 32,
            ..OfdmConfig::default()
        };
        let data = TrainData::new(&scene, &cache, &es, Antennas::default(), ofdm);
        let cfg = TrainConfig {
            iterations: 10,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = small_net(1, &scene);
            let o = train(&mut net, &data, &cfg).unwrap();
            let ck = Checkpoint {
                config_hash: "x".into(),
                seed: cfg.seed,
                iterations: 10,
                bias: o.bias,
                optimizer: o.optimizer,
                net,
            };
            serde_json::to_vec(&ck).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let scene = small_scene();
        let mut net = small_net(1, &scene);
        let p: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        net.set_params(&p);
        let mut optimizer = Adam::new(20, 1e-3);
        optimizer.step(&mut p.clone(), &p);
        let ck = Checkpoint {
            config_hash: "abc".into(),
            seed: u64::MAX,
            iterations: 3,
            bias: BiasState { beta: 0.1 + 0.2 },
            optimizer,
            net,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn empty_sets_excluded() {
        let mut b = SceneBuilder::new();
        let o = Vec3::new(-1.0, -1.0, -1.0);
        let (ex, ey, ez) = (Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 0.0, 2.0));
        for (org, u, v) in [(o, ey, ex), (o + ez, ex, ey), (o, ex, ez), (o + ey, ez, ex), (o, ez, ey), (o + ex, ey, ez)] {
            b.rect(org, u, v, 1, 1, 0);
        }
        let s = b.build().unwrap();
        let mut es = entries(Vec3::ZERO, 2, 1);
        es[0].r_star = Vec3::new(0.3, 0.2, 0.1);
        es[1].r_star = Vec3::new(5.0, 0.0, 0.0);
        let c = precompute_cache(&s, Vec3::ZERO, &es, &TraceConfig::default());
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.excluded, vec![1]);
    }
}
