//! Learnable surface EM property field and static material tables.
//!
//! The field maps a surface point to four raw outputs through a Fourier
//! encoding and a ReLU MLP; [`activation_map`] then constrains them to
//! physically valid ranges. Two evaluation paths exist: a generic one over
//! [`Real`] (used on tapes and for finite-difference checks) and a batched
//! dense one used by the trainer, which returns raw outputs and accepts their
//! adjoints.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Facet, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmProperties {
    pub eps_r: f64,
    pub sigma: f64,
    pub s: f64,
    pub k_chi: f64,
}

impl EmProperties {
    pub const NEUTRAL: EmProperties = EmProperties {
        eps_r: 2.0,
        sigma: 1.0,
        s: 0.5,
        k_chi: 0.5,
    };

    pub const fn new(eps_r: f64, sigma: f64, s: f64, k_chi: f64) -> Self {
        Self {
            eps_r,
            sigma,
            s,
            k_chi,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.eps_r >= 1.0
            && self.sigma >= 0.0
            && (0.0..=1.0).contains(&self.s)
            && (0.0..=1.0).contains(&self.k_chi)
    }

    pub fn lift<T: Real>(&self) -> EmProps<T> {
        EmProps {
            eps_r: T::cst(self.eps_r),
            sigma: T::cst(self.sigma),
            s: T::cst(self.s),
            k_chi: T::cst(self.k_chi),
        }
    }
}

/// [`EmProperties`] over any [`Real`].
#[derive(Debug, Clone, Copy)]
pub struct EmProps<T> {
    pub eps_r: T,
    pub sigma: T,
    pub s: T,
    pub k_chi: T,
}

impl<T: Real> EmProps<T> {
    pub fn value(&self) -> EmProperties {
        EmProperties {
            eps_r: self.eps_r.value(),
            sigma: self.sigma.value(),
            s: self.s.value(),
            k_chi: self.k_chi.value(),
        }
    }
}

/// eps_r = 1 + e^r₀, sigma = e^r₁, s = σ(r₂), k_chi = σ(r₃).
pub fn activation_map<T: Real>(raw: [T; 4]) -> EmProps<T> {
    EmProps {
        eps_r: raw[0].exp() + 1.0,
        sigma: raw[1].exp(),
        s: raw[2].sigmoid(),
        k_chi: raw[3].sigmoid(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierEncoder {
    pub num_freqs: usize,
    pub min: Vec3,
    pub max: Vec3,
}

impl FourierEncoder {
    /// Axes thinner than 1 mm are widened to 1 m around their center.
    pub fn new(num_freqs: usize, bounds: &Bounds) -> Self {
        assert!(num_freqs >= 1, "encoder needs at least one octave");
        let (mut lo, mut hi) = (bounds.min.to_array(), bounds.max.to_array());
        for d in 0..3 {
            if hi[d] - lo[d] < 1e-3 {
                let c = 0.5 * (hi[d] + lo[d]);
                lo[d] = c - 0.5;
                hi[d] = c + 0.5;
            }
        }
        Self {
            num_freqs,
            min: Vec3::from(lo),
            max: Vec3::from(hi),
        }
    }

    pub fn dim(&self) -> usize {
        3 + 6 * self.num_freqs
    }

    pub fn normalize(&self, q: Vec3) -> [f64; 3] {
        let (lo, hi, p) = (self.min.to_array(), self.max.to_array(), q.to_array());
        std::array::from_fn(|d| (2.0 * (p[d] - lo[d]) / (hi[d] - lo[d]) - 1.0).clamp(-1.0, 1.0))
    }

    /// `[u, sin(2^k π u_d), cos(2^k π u_d) …]`, octave-major.
    pub fn encode_into(&self, q: Vec3, out: &mut Vec<f64>) {
        let u = self.normalize(q);
        out.extend_from_slice(&u);
        let mut w = std::f64::consts::PI;
        for _ in 0..self.num_freqs {
            for &ud in &u {
                let (s, c) = (w * ud).sin_cos();
                out.push(s);
                out.push(c);
            }
            w *= 2.0;
        }
    }

    pub fn encode(&self, q: Vec3) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.encode_into(q, &mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    pub hidden: Vec<usize>,
    pub num_freqs: usize,
    /// 0 disables category embeddings.
    pub embed_dim: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            num_freqs: 8,
            embed_dim: 0,
        }
    }
}

/// Row-major `out × inp` weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFieldNet {
    pub arch: NetArch,
    pub encoder: FourierEncoder,
    pub layers: Vec<DenseLayer>,
    /// Sorted labels owning an embedding row.
    pub categories: Vec<i64>,
    /// `categories.len() × embed_dim`, row-major.
    pub embeddings: Vec<f64>,
}

/// Hidden layers He-uniform, output layer zero, embeddings U(−0.1, 0.1).
pub fn init_net(seed: u64, arch: &NetArch, encoder: FourierEncoder, categories: &[i64]) -> EmFieldNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cats: Vec<i64> = if arch.embed_dim > 0 {
        categories.to_vec()
    } else {
        Vec::new()
    };
    cats.sort_unstable();
    cats.dedup();
    let mut inp = encoder.dim() + arch.embed_dim;
    let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
    for &h in &arch.hidden {
        let lim = (6.0 / inp as f64).sqrt();
        let w = (0..h * inp).map(|_| rng.gen_range(-lim..lim)).collect();
        layers.push(DenseLayer {
            inp,
            out: h,
            w,
            b: vec![0.0; h],
        });
        inp = h;
    }
    layers.push(DenseLayer {
        inp,
        out: 4,
        w: vec![0.0; 4 * inp],
        b: vec![0.0; 4],
    });
    let embeddings = (0..cats.len() * arch.embed_dim)
        .map(|_| rng.gen_range(-0.1..0.1))
        .collect();
    EmFieldNet {
        arch: arch.clone(),
        encoder,
        layers,
        categories: cats,
        embeddings,
    }
}

/// Activations kept by [`EmFieldNet::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    /// Per layer input, `inp × P`.
    inputs: Vec<DMatrix<f64>>,
    /// Embedding row per point (`None` for no trainable row).
    emb_rows: Vec<Option<usize>>,
    /// `4 × P` raw outputs.
    pub raw: DMatrix<f64>,
}

impl BatchCache {
    pub fn raw_at(&self, j: usize) -> [f64; 4] {
        std::array::from_fn(|r| self.raw[(r, j)])
    }

    pub fn len(&self) -> usize {
        self.raw.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.ncols() == 0
    }
}

impl EmFieldNet {
    pub fn input_dim(&self) -> usize {
        self.encoder.dim() + self.arch.embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::len).sum::<usize>() + self.embeddings.len()
    }

    /// Layer by layer `w` then `b`, then embeddings.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.w);
            p.extend_from_slice(&l.b);
        }
        p.extend_from_slice(&self.embeddings);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut o = 0;
        for l in &mut self.layers {
            let (nw, nb) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&p[o..o + nw]);
            l.b.copy_from_slice(&p[o + nw..o + nw + nb]);
            o += nw + nb;
        }
        self.embeddings.copy_from_slice(&p[o..]);
    }

    fn embedding_row(&self, category: Option<i64>) -> Option<usize> {
        category.and_then(|c| self.categories.binary_search(&c).ok())
    }

    fn embedding_offset(&self) -> usize {
        self.layers.iter().map(DenseLayer::len).sum()
    }

    /// Encoding followed by the (possibly zero) category embedding.
    pub fn features(&self, q: Vec3, category: Option<i64>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_dim());
        self.encoder.encode_into(q, &mut v);
        let e = self.arch.embed_dim;
        match self.embedding_row(category) {
            Some(r) => v.extend_from_slice(&self.embeddings[r * e..(r + 1) * e]),
            None => v.extend(std::iter::repeat_n(0.0, e)),
        }
        v
    }

    /// Raw outputs using external parameters laid out as [`Self::params`].
    pub fn raw_generic<T: Real>(&self, params: &[T], q: Vec3, category: Option<i64>) -> [T; 4] {
        debug_assert_eq!(params.len(), self.num_params());
        let enc = self.encoder.encode(q);
        let mut act: Vec<T> = enc.into_iter().map(T::cst).collect();
        let e = self.arch.embed_dim;
        match self.embedding_row(category) {
            Some(r) => {
                let o = self.embedding_offset() + r * e;
                act.extend_from_slice(&params[o..o + e]);
            }
            None => act.extend(std::iter::repeat_n(T::cst(0.0), e)),
        }
        let mut o = 0;
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = &params[o..o + l.w.len()];
            let b = &params[o + l.w.len()..o + l.len()];
            o += l.len();
            act = (0..l.out)
                .map(|r| {
                    let row = &w[r * l.inp..(r + 1) * l.inp];
                    let mut z = b[r];
                    for (wi, ai) in row.iter().zip(&act) {
                        z = z + *wi * *ai;
                    }
                    if li < last && z.value() <= 0.0 {
                        T::cst(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        [act[0], act[1], act[2], act[3]]
    }

    pub fn raw(&self, q: Vec3, category: Option<i64>) -> [f64; 4] {
        let mut act = self.features(q, category);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            act = (0..l.out)
                .map(|r| {
                    let row = &l.w[r * l.inp..(r + 1) * l.inp];
                    let z = l.b[r] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
                    if li < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        [act[0], act[1], act[2], act[3]]
    }

    pub fn query(&self, q: Vec3, category: Option<i64>) -> EmProperties {
        activation_map(self.raw(q, category)).value()
    }

    /// Field value with every parameter a tape leaf; `params` from
    /// [`Self::params`] lifted onto `tape`.
    pub fn query_taped<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        q: Vec3,
        category: Option<i64>,
    ) -> EmProps<Var<'t>> {
        debug_assert!(params.iter().all(|p| p.is_constant() || p.id().is_some()));
        let _ = tape;
        activation_map(self.raw_generic(params, q, category))
    }

    /// Dense forward over many points at once.
    pub fn forward_batch(&self, points: &[(Vec3, Option<i64>)]) -> BatchCache {
        let p = points.len();
        let d = self.input_dim();
        let mut x = DMatrix::<f64>::zeros(d, p);
        let mut emb_rows = Vec::with_capacity(p);
        let mut buf = Vec::with_capacity(d);
        for (j, &(q, c)) in points.iter().enumerate() {
            buf.clear();
            buf.extend(self.features(q, c));
            x.column_mut(j).copy_from_slice(&buf);
            emb_rows.push(self.embedding_row(c));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = DMatrix::from_row_slice(l.out, l.inp, &l.w);
            let mut z = &w * &x;
            for (mut col, _) in z.column_iter_mut().zip(0..p) {
                for (v, b) in col.iter_mut().zip(&l.b) {
                    *v += b;
                    if li < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        BatchCache {
            inputs,
            emb_rows,
            raw: x,
        }
    }

    /// Parameter gradient given `∂L/∂raw` per point, in [`Self::params`] layout.
    pub fn backward_batch(&self, cache: &BatchCache, delta_raw: &[[f64; 4]]) -> Vec<f64> {
        let p = cache.len();
        assert_eq!(delta_raw.len(), p);
        let mut delta = DMatrix::<f64>::from_fn(4, p, |r, j| delta_raw[j][r]);
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let a = &cache.inputs[li];
            let gw = &delta * a.transpose();
            let mut g = Vec::with_capacity(l.len());
            for r in 0..l.out {
                for c in 0..l.inp {
                    g.push(gw[(r, c)]);
                }
            }
            for r in 0..l.out {
                g.push(delta.row(r).sum());
            }
            grads[li] = g;
            if li > 0 || !self.embeddings.is_empty() {
                let w = DMatrix::from_row_slice(l.out, l.inp, &l.w);
                let mut prev = w.transpose() * &delta;
                if li > 0 {
                    // ReLU mask: stored post-activation input is zero where inactive
                    prev.zip_apply(a, |d, act| {
                        if act <= 0.0 {
                            *d = 0.0
                        }
                    });
                }
                delta = prev;
            }
        }
        let mut out: Vec<f64> = grads.into_iter().flatten().collect();
        let e = self.arch.embed_dim;
        let mut ge = vec![0.0; self.embeddings.len()];
        if e > 0 {
            let off = self.encoder.dim();
            for (j, row) in cache.emb_rows.iter().enumerate() {
                if let Some(r) = row {
                    for k in 0..e {
                        ge[r * e + k] += delta[(off + k, j)];
                    }
                }
            }
        }
        out.extend(ge);
        out
    }
}

/// Category → properties, with an optional fallback entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaterialTable {
    pub entries: BTreeMap<i64, EmProperties>,
    pub default: Option<EmProperties>,
}

impl MaterialTable {
    pub fn uniform(props: EmProperties) -> Self {
        Self {
            entries: BTreeMap::new(),
            default: Some(props),
        }
    }

    /// The untrained field value everywhere.
    pub fn neutral() -> Self {
        Self::uniform(EmProperties::NEUTRAL)
    }

    pub fn from_entries(entries: BTreeMap<i64, EmProperties>) -> Self {
        Self {
            entries,
            default: None,
        }
    }

    pub fn get(&self, category: i64) -> Result<EmProperties> {
        self.entries
            .get(&category)
            .or(self.default.as_ref())
            .copied()
            .ok_or(Error::MissingMaterial(category))
    }

    /// Reference table chosen by category name, falling back to concrete.
    pub fn itu_baseline(category_names: &BTreeMap<i64, String>) -> Self {
        let entries = category_names
            .iter()
            .map(|(&c, name)| (c, itu_preset(name).unwrap_or(ITU_CONCRETE)))
            .collect();
        Self {
            entries,
            default: Some(ITU_CONCRETE),
        }
    }
}

pub fn table_lookup(table: &MaterialTable, facet: &Facet) -> Result<EmProperties> {
    table.get(facet.category)
}

const ITU_CONCRETE: EmProperties = EmProperties::new(5.24, 0.123, 0.2, 0.1);

/// ITU-style reference values evaluated at 3.5 GHz.
pub fn itu_preset(name: &str) -> Option<EmProperties> {
    let n = name.to_ascii_lowercase();
    let p = match n.as_str() {
        s if s.contains("concrete") => ITU_CONCRETE,
        s if s.contains("brick") => EmProperties::new(3.91, 0.038, 0.2, 0.1),
        s if s.contains("plaster") => EmProperties::new(2.73, 0.028, 0.2, 0.1),
        s if s.contains("wood") => EmProperties::new(1.99, 0.018, 0.2, 0.1),
        s if s.contains("glass") => EmProperties::new(6.31, 0.019, 0.1, 0.1),
        s if s.contains("floor") => EmProperties::new(3.66, 0.012, 0.2, 0.1),
        s if s.contains("metal") => EmProperties::new(1.0, 1e7, 0.1, 0.1),
        _ => return None,
    };
    Some(p)
}
