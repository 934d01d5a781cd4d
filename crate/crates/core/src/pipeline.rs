//! File-based end-to-end workflow: truth simulation, sparse sampling, map
//! building, calibration, prediction and evaluation.
//!
//! Every stage is a pure function of the run config, its input files and the
//! root seed. Outputs carry the config hash; consumers reject foreign hashes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcm::{build_bcm, read_bcm_csv, write_bcm_csv, BcmConfig, BcmEntry, BcmMeta, GprFitConfig, MeasurementSample};
use crate::calib::{
    precompute_cache, train, write_train_log, BiasState, Checkpoint, TrainConfig, TrainData, TrainOutcome,
};
use crate::channel::{extract_params, simulate_csi, Antennas, ChannelParams, Csi, FieldSource, OfdmConfig};
use crate::emfield::{init_net, EmFieldNet, FourierEncoder, MaterialTable};
use crate::error::{Error, Result};
use crate::geometry::{SceneGeometry, Vec3};
use crate::metrics::{male, mcs, render_gain_map, ssim, ClipRange, GainMap, MetricsReport};
use crate::tracer::{trace_paths, TraceConfig};

/// Stage seed from the root seed and a fixed label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub spacing: f64,
    pub height: f64,
    /// Cells closer than this to any facet are dropped.
    pub clearance: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            spacing: 0.25,
            height: 1.2,
            clearance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Online,
    Offline,
    Synchronous,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(Self::Online),
            "offline" => Ok(Self::Offline),
            "synchronous" => Ok(Self::Synchronous),
            _ => Err(Error::Config(format!("unknown sampling mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub m: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Online,
            m: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `builtin:<name>` for a demo scene, otherwise a scene JSON path.
    pub scene: String,
    /// Face subdivision for builtin scenes.
    pub scene_cell: Option<f64>,
    pub tx: Vec3,
    pub ofdm: OfdmConfig,
    pub antennas: Antennas,
    pub trace: TraceConfig,
    pub sampling: SamplingConfig,
    pub grid: GridConfig,
    pub gpr: GprFitConfig,
    pub train: TrainConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "builtin:shoebox".into(),
            scene_cell: None,
            tx: Vec3::new(2.0, 2.0, 1.5),
            ofdm: OfdmConfig::default(),
            antennas: Antennas::default(),
            trace: TraceConfig::default(),
            sampling: SamplingConfig::default(),
            grid: GridConfig::default(),
            gpr: GprFitConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    /// TOML for `.toml` files, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        self.train.validate()?;
        if self.sampling.m < 2 {
            return Err(Error::Config(format!("sampling.m must be ≥ 2, got {}", self.sampling.m)));
        }
        if !(self.grid.spacing > 0.0) || !self.tx.is_finite() {
            return Err(Error::Config("grid spacing must be positive and tx finite".into()));
        }
        if !self.scene.starts_with("builtin:") && !Path::new(&self.scene).exists() {
            return Err(Error::Config(format!("scene file '{}' not found", self.scene)));
        }
        Ok(())
    }

    /// SHA-256 of the config without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn load_scene(&self) -> Result<SceneGeometry> {
        match self.scene.strip_prefix("builtin:") {
            Some(name) => crate::scenes::by_name(name, self.scene_cell),
            None => crate::geometry::load_scene(&std::fs::read_to_string(&self.scene)?),
        }
    }

    pub fn bcm_config(&self) -> BcmConfig {
        BcmConfig {
            trace: self.trace,
            antennas: self.antennas,
            ofdm: self.ofdm,
            gpr: self.gpr,
            seed: derive_seed(self.seed, "bcm"),
        }
    }

    /// Training settings with the shared trace config and derived seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            trace: self.trace,
            seed: derive_seed(self.seed, "calibrate/batches"),
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub spacing: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub ix: usize,
    pub iy: usize,
    pub r: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub spec: GridSpec,
    /// Cells clear of every facet, row-major by (iy, ix).
    pub cells: Vec<GridCell>,
}

impl Grid {
    pub fn positions(&self) -> Vec<Vec3> {
        self.cells.iter().map(|c| c.r).collect()
    }

    pub fn empty_map(&self) -> GainMap {
        let s = &self.spec;
        GainMap::new(s.nx, s.ny, s.origin, s.spacing)
    }
}

/// Cell centers over the scene footprint at the configured height.
pub fn make_grid(scene: &SceneGeometry, cfg: &GridConfig) -> Result<Grid> {
    let b = &scene.bounds;
    let ext = b.extent();
    let nx = (ext.x / cfg.spacing + 1e-9).floor() as usize;
    let ny = (ext.y / cfg.spacing + 1e-9).floor() as usize;
    if nx == 0 || ny == 0 {
        return Err(Error::Config(format!("grid spacing {} exceeds scene extent", cfg.spacing)));
    }
    let origin = [
        b.min.x + 0.5 * (ext.x - (nx - 1) as f64 * cfg.spacing),
        b.min.y + 0.5 * (ext.y - (ny - 1) as f64 * cfg.spacing),
    ];
    let spec = GridSpec {
        nx,
        ny,
        origin,
        spacing: cfg.spacing,
        height: cfg.height,
    };
    let all: Vec<GridCell> = (0..ny)
        .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| GridCell {
            ix,
            iy,
            r: Vec3::new(
                origin[0] + ix as f64 * cfg.spacing,
                origin[1] + iy as f64 * cfg.spacing,
                cfg.height,
            ),
        })
        .collect();
    let keep: Vec<bool> = all
        .par_iter()
        .map(|c| scene.distance_to_surface(c.r) >= cfg.clearance)
        .collect();
    let cells = all.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect();
    Ok(Grid { spec, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecord {
    /// Index into [`Grid::cells`].
    pub cell: usize,
    pub r: Vec3,
    pub params: ChannelParams,
    pub csi: Csi,
}

/// Channels at every reachable grid cell for one transmitter.
pub fn simulate_grid(
    scene: &SceneGeometry,
    grid: &Grid,
    tx: Vec3,
    source: FieldSource<'_>,
    cfg: &RunConfig,
    gain_offset_db: f64,
) -> Result<Vec<ChannelRecord>> {
    let g = 10f64.powf(gain_offset_db / 20.0);
    let rows: Vec<Option<ChannelRecord>> = grid
        .cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let set = trace_paths(scene, tx, c.r, &cfg.trace);
            if set.paths.is_empty() {
                return Ok(None);
            }
            let mut csi = simulate_csi(scene, &set, source, &cfg.antennas, &cfg.ofdm)?;
            if gain_offset_db != 0.0 {
                csi = csi.scale(g);
            }
            let params = extract_params(&csi, &cfg.ofdm)?;
            Ok(Some(ChannelRecord {
                cell: i,
                r: c.r,
                params,
                csi,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn truth_table(scene: &SceneGeometry) -> Result<MaterialTable> {
    let t = scene.truth_materials.as_ref().ok_or(Error::MissingTruthMaterials)?;
    Ok(MaterialTable::from_entries(t.clone()))
}

/// Indices into `records` picked by the sampling mode.
pub fn select_samples(
    records: &[ChannelRecord],
    grid: &Grid,
    scene: &SceneGeometry,
    mode: SamplingMode,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = records.len();
    if m > n {
        return Err(Error::NotEnoughSamples { need: m, have: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match mode {
        SamplingMode::Online => sample_indices(&mut rng, n, m).into_vec(),
        SamplingMode::Offline => farthest_point(records, scene.bounds.center(), m),
        SamplingMode::Synchronous => random_walk(records, grid, m, &mut rng)?,
    };
    out.sort_unstable();
    Ok(out)
}

/// Greedy max-min selection. The record nearest `center` only anchors the
/// first pick, which is the record farthest from it.
fn farthest_point(records: &[ChannelRecord], center: Vec3, m: usize) -> Vec<usize> {
    let argmax = |score: &dyn Fn(usize) -> f64| {
        (0..records.len()).fold(0, |best, i| if score(i) > score(best) { i } else { best })
    };
    let anchor = argmax(&|i| -records[i].r.distance(center));
    let first = argmax(&|i| records[i].r.distance(records[anchor].r));
    let mut chosen = vec![first];
    let mut dmin: Vec<f64> = records.iter().map(|r| r.r.distance(records[first].r)).collect();
    while chosen.len() < m {
        let next = argmax(&|i| dmin[i]);
        chosen.push(next);
        for (d, r) in dmin.iter_mut().zip(records) {
            *d = d.min(r.r.distance(records[next].r));
        }
    }
    chosen
}

/// Distinct cells along a seeded walk over 4-neighbors, preferring unvisited
/// neighbors.
fn random_walk(records: &[ChannelRecord], grid: &Grid, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let by_cell: BTreeMap<(usize, usize), usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = &grid.cells[r.cell];
            ((c.ix, c.iy), i)
        })
        .collect();
    let mut cur = rng.gen_range(0..records.len());
    let mut seen = BTreeSet::from([cur]);
    let mut out = vec![cur];
    let limit = 100 * records.len().max(m);
    let mut steps = 0;
    while out.len() < m {
        steps += 1;
        if steps > limit {
            return Err(Error::NotEnoughSamples { need: m, have: out.len() });
        }
        let c = &grid.cells[records[cur].cell];
        let (ix, iy) = (c.ix as i64, c.iy as i64);
        let nbrs: Vec<usize> = [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .filter_map(|(dx, dy)| {
                let (x, y) = (ix + dx, iy + dy);
                (x >= 0 && y >= 0).then(|| by_cell.get(&(x as usize, y as usize)).copied()).flatten()
            })
            .collect();
        if nbrs.is_empty() {
            return Err(Error::NotEnoughSamples { need: m, have: out.len() });
        }
        let fresh: Vec<usize> = nbrs.iter().copied().filter(|i| !seen.contains(i)).collect();
        cur = if fresh.is_empty() {
            nbrs[rng.gen_range(0..nbrs.len())]
        } else {
            fresh[rng.gen_range(0..fresh.len())]
        };
        if seen.insert(cur) {
            out.push(cur);
        }
    }
    Ok(out)
}

pub fn measurements(records: &[ChannelRecord], picks: &[usize], ofdm: &OfdmConfig) -> Result<Vec<MeasurementSample>> {
    picks
        .iter()
        .map(|&i| MeasurementSample::new(records[i].r, records[i].csi.clone(), ofdm))
        .collect()
}

/// Zero-output network over the scene; evaluates to the neutral material.
pub fn fresh_net(scene: &SceneGeometry, cfg: &RunConfig) -> EmFieldNet {
    let enc = FourierEncoder::new(cfg.train.arch.num_freqs, &scene.bounds);
    let cats: Vec<i64> = scene.facets.iter().map(|f| f.category).collect();
    init_net(derive_seed(cfg.seed, "calibrate/init"), &cfg.train.arch, enc, &cats)
}

/// Trains a fresh network on the map entries from the config's Tx.
pub fn calibrate(
    scene: &SceneGeometry,
    entries: &[BcmEntry],
    cfg: &RunConfig,
) -> Result<(EmFieldNet, TrainOutcome)> {
    let tc = cfg.train_config();
    let cache = precompute_cache(scene, cfg.tx, entries, &tc.trace);
    let data = TrainData::new(scene, &cache, entries, cfg.antennas, cfg.ofdm);
    let mut net = fresh_net(scene, cfg);
    let out = train(&mut net, &data, &tc)?;
    Ok((net, out))
}

/// Metrics of `pred` against `truth` over cells present in both and not in
/// `exclude`. SSIM uses the full maps.
pub fn evaluate_records(
    truth: &[ChannelRecord],
    pred: &[ChannelRecord],
    grid: &Grid,
    exclude: &BTreeSet<usize>,
    config_hash: &str,
) -> Result<MetricsReport> {
    let pmap: BTreeMap<usize, &ChannelRecord> = pred.iter().map(|r| (r.cell, r)).collect();
    let mut pt = Vec::new();
    let mut pp = Vec::new();
    let mut ct = Vec::new();
    let mut cp = Vec::new();
    let mut ma = grid.empty_map();
    let mut mb = grid.empty_map();
    for t in truth {
        let Some(p) = pmap.get(&t.cell) else { continue };
        let c = &grid.cells[t.cell];
        ma.set(c.ix, c.iy, p.params.p);
        mb.set(c.ix, c.iy, t.params.p);
        if exclude.contains(&t.cell) {
            continue;
        }
        pp.push(p.params.p);
        pt.push(t.params.p);
        cp.push(p.csi.clone());
        ct.push(t.csi.clone());
    }
    let ssim = match ssim(&ma, &mb) {
        Ok(v) => Some(v),
        Err(Error::Metric(msg)) => {
            log::warn!("ssim undefined: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        male_db: male(&pp, &pt)?,
        ssim,
        mcs: mcs(&cp, &ct)?.mcs,
        n_points: pp.len(),
        config_hash: config_hash.to_string(),
    })
}

pub fn gain_map(records: &[ChannelRecord], grid: &Grid) -> GainMap {
    let mut m = grid.empty_map();
    for r in records {
        let c = &grid.cells[r.cell];
        m.set(c.ix, c.iy, r.params.p);
    }
    m
}

// ---------------------------------------------------------------------------
// Files

/// Sidecar of a channel dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub config_hash: String,
    pub tx: Vec3,
    pub grid: GridSpec,
    pub n_sub: usize,
    pub n_records: usize,
    pub csv_sha256: String,
}

pub fn write_records_csv(records: &[ChannelRecord], grid: &Grid, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "cell,ix,iy,x,y,z,p_db,tau_ns")?;
    let n = records.first().map_or(0, |r| r.csi.h.len());
    for i in 0..n {
        write!(f, ",h_re_{i},h_im_{i}")?;
    }
    writeln!(f)?;
    for r in records {
        let c = &grid.cells[r.cell];
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.cell,
            c.ix,
            c.iy,
            r.r.x,
            r.r.y,
            r.r.z,
            r.params.p,
            r.params.tau * 1e9
        )?;
        for h in &r.csi.h {
            write!(f, ",{},{}", h.re, h.im)?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads rows back; parameters are recomputed from the stored CSI.
pub fn read_records_csv(path: &Path, ofdm: &OfdmConfig) -> Result<Vec<ChannelRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        let bad = || Error::Format(format!("{}: line {}", path.display(), ln + 1));
        let c: Vec<&str> = line.split(',').collect();
        if c.len() < 8 || !(c.len() - 8).is_multiple_of(2) {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let h = c[8..]
            .chunks(2)
            .map(|p| Ok(Complex64::new(num(p[0])?, num(p[1])?)))
            .collect::<Result<Vec<_>>>()?;
        let csi = Csi { h };
        let params = extract_params(&csi, ofdm)?;
        out.push(ChannelRecord {
            cell: c[0].parse().map_err(|_| bad())?,
            r: Vec3::new(num(c[3])?, num(c[4])?, num(c[5])?),
            params,
            csi,
        });
    }
    Ok(out)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_hash(what: &str, got: &str, cfg: &RunConfig) -> Result<()> {
    let want = cfg.hash();
    if got == want {
        Ok(())
    } else {
        Err(Error::Lineage(format!("{what} was produced under config {got}, current config is {want}")))
    }
}

fn write_dataset(records: &[ChannelRecord], grid: &Grid, tx: Vec3, kind: &str, stem: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let csv = stem.with_extension("csv");
    let json = stem.with_extension("json");
    write_records_csv(records, grid, &csv)?;
    let meta = DatasetMeta {
        kind: kind.into(),
        config_hash: cfg.hash(),
        tx,
        grid: grid.spec,
        n_sub: cfg.ofdm.n_sub,
        n_records: records.len(),
        csv_sha256: file_sha256(&csv)?,
    };
    write_json(&meta, &json)?;
    Ok(vec![csv, json])
}

/// Loads a dataset after checking its lineage and checksum.
pub fn read_dataset(stem: &Path, cfg: &RunConfig) -> Result<(DatasetMeta, Vec<ChannelRecord>)> {
    let meta: DatasetMeta = read_json(&stem.with_extension("json"))?;
    check_hash(&stem.display().to_string(), &meta.config_hash, cfg)?;
    let csv = stem.with_extension("csv");
    if file_sha256(&csv)? != meta.csv_sha256 {
        return Err(Error::Format(format!("{} does not match its sidecar checksum", csv.display())));
    }
    let records = read_records_csv(&csv, &cfg.ofdm)?;
    if records.len() != meta.n_records {
        return Err(Error::Format(format!("{}: record count mismatch", csv.display())));
    }
    Ok((meta, records))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// File name → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Run provenance; contains no wall-clock data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub root_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST: &str = "manifest.json";

fn record_stage(out: &Path, cfg: &RunConfig, stage: &str, seed: u64, files: &[PathBuf]) -> Result<()> {
    let path = out.join(MANIFEST);
    let mut m: Manifest = if path.exists() { read_json(&path)? } else { Manifest::default() };
    if m.config_hash != cfg.hash() {
        m = Manifest {
            config_hash: cfg.hash(),
            root_seed: cfg.seed,
            stages: BTreeMap::new(),
        };
    }
    let mut rec = StageRecord {
        seed,
        outputs: BTreeMap::new(),
    };
    for f in files {
        let name = f.strip_prefix(out).unwrap_or(f).display().to_string();
        rec.outputs.insert(name, file_sha256(f)?);
    }
    m.stages.insert(stage.into(), rec);
    write_json(&m, &path)
}

/// Output file layout under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self { out: out.to_path_buf() })
    }

    /// `truth` for the training Tx, `truth_<tag>` otherwise.
    pub fn truth(&self, tag: Option<&str>) -> PathBuf {
        self.out.join(tag.map_or("truth".into(), |t| format!("truth_{t}")))
    }

    pub fn prediction(&self, tag: Option<&str>) -> PathBuf {
        self.out.join(tag.map_or("prediction".into(), |t| format!("prediction_{t}")))
    }

    pub fn samples(&self) -> PathBuf {
        self.out.join("samples")
    }

    pub fn bcm_csv(&self) -> PathBuf {
        self.out.join("bcm.csv")
    }

    pub fn bcm_json(&self) -> PathBuf {
        self.out.join("bcm.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn metrics(&self, tag: Option<&str>) -> PathBuf {
        self.out.join(tag.map_or("metrics.json".into(), |t| format!("metrics_{t}.json")))
    }
}

/// Tag naming a non-default Tx, e.g. `tx_6_4_1p5`.
pub fn tx_tag(tx: Option<Vec3>) -> Option<String> {
    // no '.' so the tag survives `with_extension`
    tx.map(|t| format!("tx_{}_{}_{}", t.x, t.y, t.z).replace('.', "p"))
}

pub fn stage_gen_scene(name: &str, cell: Option<f64>, path: &Path) -> Result<()> {
    let s = crate::scenes::by_name(name, cell)?;
    std::fs::write(path, s.to_json())?;
    Ok(())
}

pub fn stage_simulate_truth(cfg: &RunConfig, out: &Path, tx: Option<Vec3>) -> Result<PathBuf> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let table = truth_table(&scene)?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let t = tx.unwrap_or(cfg.tx);
    let records = simulate_grid(&scene, &grid, t, FieldSource::Table(&table), cfg, 0.0)?;
    let tag = tx_tag(tx);
    let stem = lay.truth(tag.as_deref());
    let mut files = write_dataset(&records, &grid, t, "truth", &stem, cfg)?;
    let map = stem.with_file_name(format!("{}_map", stem.file_name().unwrap().to_string_lossy()));
    render_gain_map(&gain_map(&records, &grid), out, &map.file_name().unwrap().to_string_lossy(), ClipRange::default())?;
    for ext in ["pgm", "csv", "json"] {
        files.push(map.with_extension(ext));
    }
    record_stage(out, cfg, &format!("simulate-truth{}", tag.map_or(String::new(), |t| format!(":{t}"))), 0, &files)?;
    Ok(stem)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub config_hash: String,
    pub mode: SamplingMode,
    pub m: usize,
    pub seed: u64,
    /// Grid cell ids of the picked records.
    pub cells: Vec<usize>,
}

pub fn stage_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let (_, truth) = read_dataset(&lay.truth(None), cfg)?;
    let seed = derive_seed(cfg.seed, "sample");
    let picks = select_samples(&truth, &grid, &scene, cfg.sampling.mode, cfg.sampling.m, seed)?;
    let rows: Vec<ChannelRecord> = picks.iter().map(|&i| truth[i].clone()).collect();
    let stem = lay.samples();
    let csv = stem.with_extension("csv");
    write_records_csv(&rows, &grid, &csv)?;
    let meta = SamplesMeta {
        config_hash: cfg.hash(),
        mode: cfg.sampling.mode,
        m: cfg.sampling.m,
        seed,
        cells: rows.iter().map(|r| r.cell).collect(),
    };
    let json = stem.with_extension("json");
    write_json(&meta, &json)?;
    record_stage(out, cfg, "sample", seed, &[csv, json])
}

fn read_samples(lay: &Layout, cfg: &RunConfig) -> Result<(SamplesMeta, Vec<ChannelRecord>)> {
    let stem = lay.samples();
    let meta: SamplesMeta = read_json(&stem.with_extension("json"))?;
    check_hash("samples", &meta.config_hash, cfg)?;
    let rows = read_records_csv(&stem.with_extension("csv"), &cfg.ofdm)?;
    Ok((meta, rows))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcmSidecar {
    pub config_hash: String,
    pub meta: BcmMeta,
}

pub fn stage_build_bcm(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let (_, rows) = read_samples(&lay, cfg)?;
    let samples = measurements(&rows, &(0..rows.len()).collect::<Vec<_>>(), &cfg.ofdm)?;
    let bc = cfg.bcm_config();
    let bcm = build_bcm(&scene, cfg.tx, &samples, &grid.positions(), &bc)?;
    write_bcm_csv(&bcm.entries, &lay.bcm_csv())?;
    write_json(
        &BcmSidecar {
            config_hash: cfg.hash(),
            meta: bcm.meta,
        },
        &lay.bcm_json(),
    )?;
    record_stage(out, cfg, "build-bcm", bc.seed, &[lay.bcm_csv(), lay.bcm_json()])
}

pub fn stage_calibrate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let side: BcmSidecar = read_json(&lay.bcm_json())?;
    check_hash("bcm", &side.config_hash, cfg)?;
    let entries = read_bcm_csv(&lay.bcm_csv())?;
    let (net, outcome) = calibrate(&scene, &entries, cfg)?;
    let ck = Checkpoint {
        config_hash: cfg.hash(),
        seed: cfg.train_config().seed,
        iterations: outcome.history.len(),
        bias: outcome.bias,
        optimizer: outcome.optimizer,
        net,
    };
    ck.save(&lay.checkpoint())?;
    write_train_log(&outcome.history, &lay.train_log())?;
    // the log carries wall-clock time and stays out of the manifest
    record_stage(out, cfg, "calibrate", cfg.train_config().seed, &[lay.checkpoint()])
}

/// Which field drives a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldChoice {
    Calibrated,
    /// Untrained network (neutral materials, β = 0).
    Neutral,
}

pub fn predict_records(
    scene: &SceneGeometry,
    grid: &Grid,
    net: &EmFieldNet,
    bias: BiasState,
    tx: Vec3,
    cfg: &RunConfig,
) -> Result<Vec<ChannelRecord>> {
    simulate_grid(scene, grid, tx, FieldSource::Net(net), cfg, bias.beta)
}

pub fn stage_predict(cfg: &RunConfig, out: &Path, tx: Option<Vec3>, field: FieldChoice) -> Result<PathBuf> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let (net, bias) = match field {
        FieldChoice::Calibrated => {
            let ck = Checkpoint::load(&lay.checkpoint())?;
            check_hash("checkpoint", &ck.config_hash, cfg)?;
            (ck.net, ck.bias)
        }
        FieldChoice::Neutral => (fresh_net(&scene, cfg), BiasState::default()),
    };
    let t = tx.unwrap_or(cfg.tx);
    let records = predict_records(&scene, &grid, &net, bias, t, cfg)?;
    let mut tag = tx_tag(tx);
    if field == FieldChoice::Neutral {
        tag = Some(tag.map_or("neutral".into(), |t| format!("neutral_{t}")));
    }
    let stem = lay.prediction(tag.as_deref());
    let files = write_dataset(&records, &grid, t, "prediction", &stem, cfg)?;
    record_stage(out, cfg, &format!("predict{}", tag.map_or(String::new(), |t| format!(":{t}"))), 0, &files)?;
    Ok(stem)
}

/// Compares a prediction with the truth for the same Tx; sampled cells are
/// held out.
pub fn stage_evaluate(cfg: &RunConfig, out: &Path, truth_stem: &Path, pred_stem: &Path, metrics: &Path) -> Result<MetricsReport> {
    let lay = Layout::new(out)?;
    let scene = cfg.load_scene()?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let (tm, truth) = read_dataset(truth_stem, cfg)?;
    let (pm, pred) = read_dataset(pred_stem, cfg)?;
    if tm.tx != pm.tx || tm.grid != pm.grid {
        return Err(Error::Lineage(format!(
            "truth (tx {:?}) and prediction (tx {:?}) describe different setups",
            tm.tx, pm.tx
        )));
    }
    let exclude: BTreeSet<usize> = match read_samples(&lay, cfg) {
        Ok((meta, _)) => meta.cells.into_iter().collect(),
        Err(Error::Io(_)) => BTreeSet::new(),
        Err(e) => return Err(e),
    };
    let rep = evaluate_records(&truth, &pred, &grid, &exclude, &cfg.hash())?;
    write_json(&rep, metrics)?;
    let stage = format!("evaluate:{}", metrics.file_name().unwrap().to_string_lossy());
    record_stage(out, cfg, &stage, 0, &[metrics.to_path_buf()])?;
    Ok(rep)
}

pub fn stage_export_map(cfg: &RunConfig, stem: &Path, dir: &Path, clip: ClipRange) -> Result<()> {
    let scene = cfg.load_scene()?;
    let grid = make_grid(&scene, &cfg.grid)?;
    let (_, records) = read_dataset(stem, cfg)?;
    let name = format!("{}_map", stem.file_name().unwrap().to_string_lossy());
    std::fs::create_dir_all(dir)?;
    render_gain_map(&gain_map(&records, &grid), dir, &name, clip)
}

/// Truth, sampling, map, calibration, prediction and evaluation for the
/// training Tx.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let lay = Layout::new(out)?;
    let truth = stage_simulate_truth(cfg, out, None)?;
    stage_sample(cfg, out)?;
    stage_build_bcm(cfg, out)?;
    stage_calibrate(cfg, out)?;
    let pred = stage_predict(cfg, out, None, FieldChoice::Calibrated)?;
    stage_evaluate(cfg, out, &truth, &pred, &lay.metrics(None))
}
