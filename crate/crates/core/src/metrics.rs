//! Propagation-consistency metrics and gain-map rendering.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::Csi;
use crate::error::{Error, Result};

const SSIM_WIN: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean absolute gain error in dB.
pub fn male(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Metric("male of zero points".into()));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Cell grid of gains; cell (ix, iy) lives at `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMap {
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub spacing: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GainMap {
    pub fn new(nx: usize, ny: usize, origin: [f64; 2], spacing: f64) -> Self {
        Self {
            nx,
            ny,
            origin,
            spacing,
            values: vec![0.0; nx * ny],
            mask: vec![false; nx * ny],
        }
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let i = iy * self.nx + ix;
        self.values[i] = v;
        self.mask[i] = true;
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(i, (&v, _))| (i, v))
    }

    pub fn cell_center(&self, i: usize) -> [f64; 2] {
        let (ix, iy) = (i % self.nx, i / self.nx);
        [
            self.origin[0] + ix as f64 * self.spacing,
            self.origin[1] + iy as f64 * self.spacing,
        ]
    }
}

/// SSIM over windows lying fully inside the shared mask, after joint min-max
/// normalization of both maps.
pub fn ssim(a: &GainMap, b: &GainMap) -> Result<f64> {
    if a.nx != b.nx || a.ny != b.ny {
        return Err(Error::Metric(format!(
            "map dims differ: {}×{} vs {}×{}",
            a.nx, a.ny, b.nx, b.ny
        )));
    }
    if a.mask != b.mask {
        return Err(Error::Metric("map masks differ".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, v) in a.valid().chain(b.valid()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (nx, ny) = (a.nx, a.ny);
    let windows: Vec<(usize, usize)> = (0..ny.saturating_sub(SSIM_WIN - 1))
        .flat_map(|y| (0..nx.saturating_sub(SSIM_WIN - 1)).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            (y..y + SSIM_WIN).all(|yy| (x..x + SSIM_WIN).all(|xx| a.mask[yy * nx + xx]))
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::Metric("no 7×7 window fits inside the mask".into()));
    }
    let range = hi - lo;
    if !(range > 0.0) {
        let equal = a.valid().zip(b.valid()).all(|((_, x), (_, y))| x == y);
        return Ok(if equal { 1.0 } else { 0.0 });
    }
    let na: Vec<f64> = a.values.iter().map(|v| (v - lo) / range).collect();
    let nb: Vec<f64> = b.values.iter().map(|v| (v - lo) / range).collect();
    let n = (SSIM_WIN * SSIM_WIN) as f64;
    let mut total = 0.0;
    for &(x, y) in &windows {
        let cells = || (y..y + SSIM_WIN).flat_map(move |yy| (x..x + SSIM_WIN).map(move |xx| yy * nx + xx));
        let ma = cells().map(|i| na[i]).sum::<f64>() / n;
        let mb = cells().map(|i| nb[i]).sum::<f64>() / n;
        let va = cells().map(|i| (na[i] - ma) * (na[i] - ma)).sum::<f64>() / n;
        let vb = cells().map(|i| (nb[i] - mb) * (nb[i] - mb)).sum::<f64>() / n;
        let cov = cells().map(|i| (na[i] - ma) * (nb[i] - mb)).sum::<f64>() / n;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsResult {
    pub mcs: f64,
    pub skipped: usize,
}

/// Mean of `|⟨H_pred, H_truth⟩| / (‖H_pred‖ ‖H_truth‖)` over receivers.
pub fn mcs(pred: &[Csi], truth: &[Csi]) -> Result<McsResult> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if p.h.len() != t.h.len() {
            return Err(Error::LengthMismatch(p.h.len(), t.h.len()));
        }
        let (np, nt) = (p.energy().sqrt(), t.energy().sqrt());
        if np == 0.0 || nt == 0.0 {
            skipped += 1;
            continue;
        }
        let ip: Complex64 = p.h.iter().zip(&t.h).map(|(a, b)| a * b.conj()).sum();
        sum += ip.norm() / (np * nt);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every CSI pair has zero norm".into()));
    }
    Ok(McsResult {
        mcs: sum / used as f64,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub male_db: f64,
    pub ssim: Option<f64>,
    pub mcs: f64,
    pub n_points: usize,
    pub config_hash: String,
}

/// Display range for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipRange {
    Fixed { lo_db: f64, hi_db: f64 },
    /// Map minimum to black and maximum to white.
    Auto,
}

impl Default for ClipRange {
    fn default() -> Self {
        ClipRange::Fixed {
            lo_db: -160.0,
            hi_db: -30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSidecar {
    pub clip_lo_db: f64,
    pub clip_hi_db: f64,
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub spacing: f64,
}

/// Pixel levels, row 0 = largest y so the image is upright.
pub fn gain_map_pixels(map: &GainMap, clip: ClipRange) -> (Vec<u8>, f64, f64) {
    let (lo, hi) = match clip {
        ClipRange::Fixed { lo_db, hi_db } => (lo_db, hi_db),
        ClipRange::Auto => map
            .valid()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, v)| (l.min(v), h.max(v))),
    };
    let mut px = Vec::with_capacity(map.nx * map.ny);
    for row in (0..map.ny).rev() {
        for col in 0..map.nx {
            let i = row * map.nx + col;
            let level = if !map.mask[i] {
                0
            } else if hi > lo {
                (255.0 * (map.values[i].clamp(lo, hi) - lo) / (hi - lo)).round() as u8
            } else {
                128
            };
            px.push(level);
        }
    }
    (px, lo, hi)
}

/// Writes `<stem>.pgm`, `<stem>.csv` and `<stem>.json` into `dir`.
pub fn render_gain_map(map: &GainMap, dir: &Path, stem: &str, clip: ClipRange) -> Result<()> {
    let (px, lo, hi) = gain_map_pixels(map, clip);
    let mut pgm = format!("P5\n{} {}\n255\n", map.nx, map.ny).into_bytes();
    pgm.extend_from_slice(&px);
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    write_gain_map_csv(map, &dir.join(format!("{stem}.csv")))?;
    let side = RenderSidecar {
        clip_lo_db: lo,
        clip_hi_db: hi,
        nx: map.nx,
        ny: map.ny,
        origin: map.origin,
        spacing: map.spacing,
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Rows `ix,iy,x,y,p_db` for valid cells.
pub fn write_gain_map_csv(map: &GainMap, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ix,iy,x,y,p_db")?;
    for (i, v) in map.valid() {
        let c = map.cell_center(i);
        writeln!(f, "{},{},{},{},{}", i % map.nx, i / map.nx, c[0], c[1], v)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_gain_map_csv`] into a map of known shape.
pub fn read_gain_map_csv(path: &Path, nx: usize, ny: usize, origin: [f64; 2], spacing: f64) -> Result<GainMap> {
    let text = std::fs::read_to_string(path)?;
    let mut map = GainMap::new(nx, ny, origin, spacing);
    for (ln, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{}: line {}", path.display(), ln + 1));
        if cols.len() != 5 {
            return Err(bad());
        }
        let ix: usize = cols[0].parse().map_err(|_| bad())?;
        let iy: usize = cols[1].parse().map_err(|_| bad())?;
        let v: f64 = cols[4].parse().map_err(|_| bad())?;
        if ix >= nx || iy >= ny {
            return Err(bad());
        }
        map.set(ix, iy, v);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_map(nx: usize, ny: usize, f: impl Fn(usize, usize) -> f64) -> GainMap {
        let mut m = GainMap::new(nx, ny, [0.0, 0.0], 0.25);
        for y in 0..ny {
            for x in 0..nx {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    #[test]
    fn male_examples() {
        assert_eq!(male(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(male(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(male(&[0.0, 10.0], &[1.0, 7.0]).unwrap(), 2.0);
        assert!(male(&[0.0], &[1.0, 2.0]).is_err());
    }

    /// Independent SSIM: per-window statistics via explicit two-pass sums.
    fn oracle_ssim(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let lo = a.iter().chain(b).flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(b).flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = |v: f64| (v - lo) / (hi - lo);
        let (ny, nx) = (a.len(), a[0].len());
        let mut acc = Vec::new();
        for y0 in 0..=ny - 7 {
            for x0 in 0..=nx - 7 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for r in a.iter().zip(b).skip(y0).take(7) {
                    for c in x0..x0 + 7 {
                        xs.push(n(r.0[c]));
                        ys.push(n(r.1[c]));
                    }
                }
                let mx = xs.iter().sum::<f64>() / 49.0;
                let my = ys.iter().sum::<f64>() / 49.0;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 49.0;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 49.0;
                let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / 49.0;
                let l = (2.0 * mx * my + 1e-4) / (mx * mx + my * my + 1e-4);
                let cs = (2.0 * cxy + 9e-4) / (vx + vy + 9e-4);
                acc.push(l * cs);
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn ssim_examples() {
        let a = full_map(12, 9, |x, y| -60.0 - (x * y) as f64 * 0.7);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = |x: usize, y: usize| if (x + y).is_multiple_of(2) { -50.0 } else { -90.0 };
        let c = full_map(10, 10, checker);
        let inv = full_map(10, 10, |x, y| -140.0 - checker(x, y));
        let s = ssim(&c, &inv).unwrap();
        assert!(s < 0.5);
        let grid = |m: &GainMap| -> Vec<Vec<f64>> {
            (0..m.ny).map(|y| (0..m.nx).map(|x| m.values[y * m.nx + x]).collect()).collect()
        };
        assert!((s - oracle_ssim(&grid(&c), &grid(&inv))).abs() < 1e-12);
        let k1 = full_map(8, 8, |_, _| -70.0);
        assert_eq!(ssim(&k1, &k1).unwrap(), 1.0);
        let small = full_map(6, 6, |_, _| 0.0);
        assert!(ssim(&small, &small).is_err());
        assert!(ssim(&a, &c).is_err());
    }

    #[test]
    fn ssim_masked_windows() {
        let mut a = full_map(14, 7, |x, y| (x + 2 * y) as f64);
        let i = 3 * 14 + 3;
        a.mask[i] = false;
        // the only windows left start at x ≥ 4
        let b = a.clone();
        assert_eq!(ssim(&a, &b).unwrap(), 1.0);
        a.mask[3 * 14 + 10] = false;
        let b = a.clone();
        assert!(ssim(&a, &b).is_err());
    }

    fn csi(v: &[(f64, f64)]) -> Csi {
        Csi {
            h: v.iter().map(|&(r, i)| Complex64::new(r, i)).collect(),
        }
    }

    #[test]
    fn mcs_examples() {
        let t = vec![csi(&[(1.0, 2.0), (0.5, -1.0), (0.0, 3.0)])];
        assert!((mcs(&t, &t).unwrap().mcs - 1.0).abs() < 1e-15);
        let c = Complex64::new(-0.3, 2.2);
        let p = vec![Csi {
            h: t[0].h.iter().map(|v| v * c).collect(),
        }];
        assert!((mcs(&p, &t).unwrap().mcs - 1.0).abs() < 1e-15);
        // single tap at ℓ=0 vs ℓ=1 are orthogonal in the frequency domain
        let n = 16;
        let tap = |l: f64| Csi {
            h: (0..n)
                .map(|i| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * i as f64 * l / n as f64))
                .collect(),
        };
        let r = mcs(&[tap(0.0)], &[tap(1.0)]).unwrap();
        assert!(r.mcs < 1e-14);
        let z = mcs(&[Csi::zeros(3), t[0].clone()], &[t[0].clone(), t[0].clone()]).unwrap();
        assert_eq!(z.skipped, 1);
        assert!(mcs(&[Csi::zeros(3)], &[Csi::zeros(3)]).is_err());
    }

    #[test]
    fn render_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = full_map(5, 4, |x, y| -100.0 + 3.3 * x as f64 - 1.7 * y as f64 + 1e-7);
        render_gain_map(&m, dir.path(), "gain", ClipRange::Auto).unwrap();
        let pgm = std::fs::read(dir.path().join("gain.pgm")).unwrap();
        let header = b"P5\n5 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 20);
        assert_eq!(*px.iter().max().unwrap(), 255);
        assert_eq!(*px.iter().min().unwrap(), 0);
        let (mx, _) = m.valid().fold((0, f64::MIN), |b, (i, v)| if v > b.1 { (i, v) } else { b });
        let (ix, iy) = (mx % 5, mx / 5);
        assert_eq!(px[(3 - iy) * 5 + ix], 255);
        let back = read_gain_map_csv(&dir.path().join("gain.csv"), 5, 4, [0.0, 0.0], 0.25).unwrap();
        for (a, b) in back.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let side: RenderSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("gain.json")).unwrap()).unwrap();
        assert!(side.clip_hi_db > side.clip_lo_db);

        let flat = full_map(3, 3, |_, _| -80.0);
        let (px, _, _) = gain_map_pixels(&flat, ClipRange::Auto);
        assert!(px.iter().all(|&p| p == px[0]));
        let (px, lo, hi) = gain_map_pixels(&flat, ClipRange::default());
        assert_eq!((lo, hi), (-160.0, -30.0));
        assert!(px.iter().all(|&p| p == px[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn male_nonnegative(v in prop::collection::vec((-150.0..-20.0f64, -150.0..-20.0f64), 1..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = male(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, a == b);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..500) {
            let a = full_map(9, 8, |x, y| ((seed as usize * 31 + x * 7 + y * 13) % 17) as f64);
            let b = full_map(9, 8, |x, y| ((seed as usize * 17 + x * 5 + y * 3) % 11) as f64);
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn mcs_global_scale(re in -3.0..3.0f64, im in -3.0..3.0f64, seed in 0u64..100) {
            prop_assume!(re.abs() + im.abs() > 1e-3);
            let g = Complex64::new(re, im);
            let t: Vec<Csi> = (0..4).map(|k| Csi { h: (0..8).map(|i| Complex64::new(((seed + k * 8 + i) % 5) as f64 - 2.0, ((seed * 3 + i) % 7) as f64 - 3.0)).collect() }).collect();
            let p: Vec<Csi> = t.iter().map(|c| Csi { h: c.h.iter().rev().cloned().collect() }).collect();
            let ps: Vec<Csi> = p.iter().map(|c| Csi { h: c.h.iter().map(|v| v * g).collect() }).collect();
            let a = mcs(&p, &t).unwrap().mcs;
            let b = mcs(&ps, &t).unwrap().mcs;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
