//! Dataset lifecycle: records and JSON-lines manifests, a content-addressed
//! geometry store, the two cleaning rules, binned deduplication in
//! normalized property space, and the active-learning loop.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::homogenize::{homogenize_cubic_eighth, BaseMaterial, CubicTensor, SolverOptions};
use crate::io::{read_vxl, write_vxl};
use crate::metrics::{CoverageRegion, PropertyPoint, PropertyRanges};
use crate::topopt::{optimize, trig_init, trig_level_set, Objective, TopOptProblem, TrigInitConfig};
use crate::voxel::{CellRole, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Topopt,
    Generated,
    Interpolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Path of the `.vxl` file relative to the store root.
    pub file: String,
    pub resolution: usize,
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
    pub vol: f64,
    pub bulk: f64,
    pub shear: f64,
    pub poisson: f64,
    pub zener: f64,
    pub source: Source,
    pub round: u32,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl DatasetRecord {
    pub fn point(&self) -> PropertyPoint {
        [self.c11, self.c12, self.c44, self.vol]
    }

    pub fn tensor(&self) -> CubicTensor {
        CubicTensor::new(self.c11, self.c12, self.c44)
    }

    pub fn is_rejected(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("rejected"))
    }
}

/// Content hash of a grid's `.vxl` encoding (first 16 hex digits).
pub fn geometry_id(grid: &VoxelGrid) -> String {
    let digest = Sha256::digest(write_vxl(grid));
    hex::encode(&digest[..8])
}

/// Homogenizes an eighth cell and fills a record for it.
pub fn make_record(
    grid: &VoxelGrid,
    base: &BaseMaterial,
    opts: &SolverOptions,
    source: Source,
    round: u32,
) -> Result<DatasetRecord> {
    let t = homogenize_cubic_eighth(grid, base, opts)?;
    let d = t.derived()?;
    let id = geometry_id(grid);
    Ok(DatasetRecord {
        file: format!("{id}.vxl"),
        id,
        resolution: grid.resolution(),
        c11: t.c11,
        c12: t.c12,
        c44: t.c44,
        vol: grid.volume_fraction(),
        bulk: d.bulk,
        shear: d.shear,
        poisson: d.poisson,
        zener: d.zener,
        source,
        round,
        flags: Vec::new(),
    })
}

/// Geometry files named by content hash under one directory.
#[derive(Clone, Debug)]
pub struct DatasetStore {
    root: PathBuf,
}

impl DatasetStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes the grid if absent; returns `(id, relative file name)`.
    pub fn put(&self, grid: &VoxelGrid) -> Result<(String, String)> {
        let id = geometry_id(grid);
        let file = format!("{id}.vxl");
        let path = self.root.join(&file);
        if !path.exists() {
            fs::write(&path, write_vxl(grid))?;
        }
        Ok((id, file))
    }

    pub fn load(&self, record: &DatasetRecord) -> Result<VoxelGrid> {
        read_vxl(&fs::read(self.root.join(&record.file))?)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Disconnected,
    NoBoundaryContact,
}

impl RejectReason {
    pub fn flag(&self) -> &'static str {
        match self {
            RejectReason::Disconnected => "rejected:disconnected",
            RejectReason::NoBoundaryContact => "rejected:no_boundary_contact",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub accepted: Vec<usize>,
    pub rejected: Vec<(usize, RejectReason)>,
}

impl CleaningReport {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejected.iter().filter(|(_, r)| *r == reason).count()
    }
}

/// Cleaning decision for one eighth cell, judged on its tessellation.
pub fn clean_one(grid: &VoxelGrid) -> Result<Option<RejectReason>> {
    let full = match grid.role() {
        CellRole::Eighth => grid.mirror_tessellate()?,
        CellRole::Full => grid.clone(),
    };
    if full.solid_count() == 0 {
        return Ok(Some(RejectReason::NoBoundaryContact));
    }
    if full.periodic_components().component_count() > 1 {
        return Ok(Some(RejectReason::Disconnected));
    }
    if !full.touches_all_faces() {
        return Ok(Some(RejectReason::NoBoundaryContact));
    }
    Ok(None)
}

/// Partitions candidate indices into accepted and rejected.
pub fn clean(candidates: &[VoxelGrid]) -> Result<CleaningReport> {
    let mut report = CleaningReport::default();
    for (i, g) in candidates.iter().enumerate() {
        match clean_one(g)? {
            None => report.accepted.push(i),
            Some(r) => report.rejected.push((i, r)),
        }
    }
    Ok(report)
}

/// Normalized property points, clamped into the unit cube.
pub fn normalized_points(records: &[DatasetRecord], ranges: &PropertyRanges) -> Vec<PropertyPoint> {
    records.iter().map(|r| ranges.normalize(r.point()).map(|v| v.clamp(0.0, 1.0))).collect()
}

/// Keeps at most `cap` records per bin of a `bins^4` grid, preferring the
/// smallest mean absolute normalized distance to the bin centre, then the
/// smallest id. Output is sorted by id.
pub fn dedup(records: &[DatasetRecord], ranges: &PropertyRanges, bins: usize, cap: usize) -> Vec<DatasetRecord> {
    let points = normalized_points(records, ranges);
    let mut groups: BTreeMap<[usize; 4], Vec<(f64, &DatasetRecord)>> = BTreeMap::new();
    for (r, p) in records.iter().zip(&points) {
        let cell: [usize; 4] =
            std::array::from_fn(|k| ((p[k] * bins as f64).floor() as usize).min(bins.saturating_sub(1)));
        let d = (0..4).map(|k| (p[k] - (cell[k] as f64 + 0.5) / bins as f64).abs()).sum::<f64>() / 4.0;
        groups.entry(cell).or_default().push((d, r));
    }
    let mut kept: Vec<DatasetRecord> = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        kept.extend(group.into_iter().take(cap).map(|(_, r)| r.clone()));
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    kept
}

/// Min/max ranges and normalized points of a manifest.
pub fn normalize_conditions(records: &[DatasetRecord]) -> Result<(PropertyRanges, Vec<PropertyPoint>)> {
    let points: Vec<PropertyPoint> = records.iter().map(|r| r.point()).collect();
    let ranges = PropertyRanges::from_points(&points)?;
    let normalized = points.iter().map(|p| ranges.normalize(*p)).collect();
    Ok((ranges, normalized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialDatasetConfig {
    pub count: usize,
    pub resolution: usize,
    pub vf_range: (f64, f64),
    pub max_freq_range: (usize, usize),
    /// Topology-optimization iterations applied to each trigonometric
    /// start; zero keeps the thresholded level set.
    pub topopt_iters: usize,
    pub seed: u64,
    pub solver_tol: f64,
}

impl Default for InitialDatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            resolution: 16,
            vf_range: (0.15, 0.6),
            max_freq_range: (1, 3),
            topopt_iters: 0,
            seed: 0,
            solver_tol: 1e-6,
        }
    }
}

/// Trigonometric (optionally optimized) structures that pass cleaning,
/// homogenized and stored; duplicates by geometry are skipped.
pub fn build_initial_dataset(
    cfg: &InitialDatasetConfig,
    base: &BaseMaterial,
    store: &DatasetStore,
) -> Result<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = SolverOptions::with_tol(cfg.solver_tol);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.count);
    let objectives = [Objective::MaxBulk, Objective::MaxShear, Objective::MaxYoung, Objective::MinPoisson];
    let mut attempts = 0usize;
    while out.len() < cfg.count {
        attempts += 1;
        if attempts > 50 * cfg.count.max(1) {
            return Err(Error::InsufficientData { got: out.len(), need: cfg.count });
        }
        let vf = rng.random_range(cfg.vf_range.0..=cfg.vf_range.1);
        let trig = TrigInitConfig {
            max_freq: rng.random_range(cfg.max_freq_range.0..=cfg.max_freq_range.1),
            seed: rng.random(),
            ..Default::default()
        };
        let grid = if cfg.topopt_iters == 0 {
            trig_level_set(&trig, cfg.resolution, vf)?
        } else {
            let problem = TopOptProblem {
                objective: objectives[rng.random_range(0..objectives.len())],
                target_vf: vf,
                max_iters: cfg.topopt_iters,
                base: *base,
                solver_tol: cfg.solver_tol,
                ..Default::default()
            };
            optimize(&problem, &trig_init(&trig, cfg.resolution, vf)?)?.grid().clone()
        };
        if clean_one(&grid)?.is_some() {
            continue;
        }
        let id = geometry_id(&grid);
        if !seen.insert(id) {
            continue;
        }
        store.put(&grid)?;
        out.push(make_record(&grid, base, &opts, Source::Topopt, 0)?);
    }
    info!("initial dataset: {} records from {attempts} attempts", out.len());
    Ok(out)
}

/// Produces candidate structures for normalized conditions and retrains
/// on the current dataset.
pub trait Generator {
    fn generate(&mut self, conditions: &[PropertyPoint], rng: &mut ChaCha8Rng) -> Result<Vec<VoxelGrid>>;

    /// Returns the mean training loss of the first and last logged steps.
    fn retrain(&mut self, records: &[DatasetRecord], store: &DatasetStore, rng: &mut ChaCha8Rng)
        -> Result<(f64, f64)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveLoopConfig {
    pub rounds: usize,
    pub samples_per_round: usize,
    pub dedup_bins: usize,
    pub dedup_cap: usize,
    /// Share of conditions drawn from empty cells bordering the data.
    pub outside_fraction: f64,
    pub seed: u64,
    pub solver_tol: f64,
}

impl Default for ActiveLoopConfig {
    fn default() -> Self {
        Self { rounds: 3, samples_per_round: 64, dedup_bins: 32, dedup_cap: 2, outside_fraction: 0.2, seed: 0, solver_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub generated: usize,
    pub accepted: usize,
    pub rejected_disconnected: usize,
    pub rejected_no_boundary_contact: usize,
    pub merged_size: usize,
    pub post_dedup_size: usize,
    /// Occupied fraction of the dedup grid after the round.
    pub coverage: f64,
    pub loss_first: f64,
    pub loss_last: f64,
}

/// Audit entry for a generated structure that failed cleaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedEntry {
    pub id: String,
    pub file: String,
    pub round: u32,
    pub reason: RejectReason,
}

/// Conditions for one round: uniform over the bounding box of occupied
/// cells, with a share placed in empty cells next to occupied ones.
pub fn sample_conditions(
    region: &CoverageRegion,
    count: usize,
    outside_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<PropertyPoint> {
    let cells: Vec<[usize; 4]> = region.occupied_cells().collect();
    let b = region.bins();
    if cells.is_empty() {
        return (0..count).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
    }
    let mut lo = [usize::MAX; 4];
    let mut hi = [0usize; 4];
    for c in &cells {
        for k in 0..4 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let in_cell = |c: [usize; 4], rng: &mut ChaCha8Rng| -> PropertyPoint {
        std::array::from_fn(|k| ((c[k] as f64 + rng.random::<f64>()) / b as f64).clamp(0.0, 1.0))
    };
    (0..count)
        .map(|_| {
            if rng.random::<f64>() < outside_fraction {
                // a few tries at an empty neighbour of a random occupied cell
                for _ in 0..16 {
                    let mut c = cells[rng.random_range(0..cells.len())];
                    let k = rng.random_range(0..4);
                    let up = rng.random_bool(0.5);
                    if up && c[k] + 1 < b {
                        c[k] += 1;
                    } else if !up && c[k] > 0 {
                        c[k] -= 1;
                    } else {
                        continue;
                    }
                    if !region.is_occupied(&c) {
                        return in_cell(c, rng);
                    }
                }
            }
            std::array::from_fn(|k| {
                ((lo[k] as f64 + rng.random::<f64>() * (hi[k] + 1 - lo[k]) as f64) / b as f64).clamp(0.0, 1.0)
            })
        })
        .collect()
}

/// Rounds of generate, clean, homogenize, merge, dedup and retrain.
/// Normalization stays in the frame of `ranges`. Rejected structures are
/// stored and listed in `rejected.jsonl` under `out_dir`; each round's
/// training manifest is written there as well.
pub fn active_loop<G: Generator>(
    cfg: &ActiveLoopConfig,
    initial: &[DatasetRecord],
    ranges: &PropertyRanges,
    generator: &mut G,
    store: &DatasetStore,
    base: &BaseMaterial,
    out_dir: &Path,
) -> Result<(Vec<DatasetRecord>, Vec<RoundReport>)> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = SolverOptions::with_tol(cfg.solver_tol);
    let mut records = initial.to_vec();
    let mut rejected_log: Vec<RejectedEntry> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let labelled: Vec<(String, PropertyPoint)> =
            records.iter().map(|r| r.id.clone()).zip(normalized_points(&records, ranges)).collect();
        let region = CoverageRegion::build(cfg.dedup_bins, &labelled)?;
        let conditions = sample_conditions(&region, cfg.samples_per_round, cfg.outside_fraction, &mut rng);
        let candidates = generator.generate(&conditions, &mut rng)?;
        let report = clean(&candidates)?;
        let mut known: HashSet<String> = records.iter().map(|r| r.id.clone()).collect();
        let mut added = 0;
        for &i in &report.accepted {
            let g = &candidates[i];
            if !known.insert(geometry_id(g)) {
                continue;
            }
            store.put(g)?;
            records.push(make_record(g, base, &opts, Source::Generated, round as u32)?);
            added += 1;
        }
        for &(i, reason) in &report.rejected {
            let (id, file) = store.put(&candidates[i])?;
            rejected_log.push(RejectedEntry { id, file, round: round as u32, reason });
        }
        let merged_size = records.len();
        records = dedup(&records, ranges, cfg.dedup_bins, cfg.dedup_cap);
        let labelled: Vec<(String, PropertyPoint)> =
            records.iter().map(|r| r.id.clone()).zip(normalized_points(&records, ranges)).collect();
        let coverage = CoverageRegion::build(cfg.dedup_bins, &labelled)?.fraction();
        write_manifest(out_dir.join(format!("round_{round}_manifest.jsonl")), &records)?;
        let (loss_first, loss_last) = generator.retrain(&records, store, &mut rng)?;
        let r = RoundReport {
            round,
            generated: candidates.len(),
            accepted: report.accepted.len(),
            rejected_disconnected: report.count(RejectReason::Disconnected),
            rejected_no_boundary_contact: report.count(RejectReason::NoBoundaryContact),
            merged_size,
            post_dedup_size: records.len(),
            coverage,
            loss_first,
            loss_last,
        };
        info!("active round {round}: {added} new, {r:?}");
        fs::write(out_dir.join(format!("round_{round}_report.json")), serde_json::to_vec_pretty(&r)?)?;
        reports.push(r);
    }
    let mut w = BufWriter::new(fs::File::create(out_dir.join("rejected.jsonl"))?);
    for r in &rejected_log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok((records, reports))
}
