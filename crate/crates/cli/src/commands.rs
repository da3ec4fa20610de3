use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use metavox_core::dataset::{
    self, active_loop, build_initial_dataset, clean_one, read_manifest, write_manifest, ActiveLoopConfig,
    DatasetRecord, DatasetStore, InitialDatasetConfig,
};
use metavox_core::diffusion::{
    self, gaussian_latent, load_diffusion, load_regressor, save_diffusion, save_regressor, train_regressor,
    training_pairs, ConditionVector, DiffusionConfig, DiffusionGenerator, DiffusionModel, GuidanceConfig,
    GuidedInterpolation, LatentGrid, RegressorConfig, SampleOptions, TrainConfig,
};
use metavox_core::homogenize::{
    homogenize_cubic_eighth, homogenize_grid, hs_upper, reduce_cubic, voigt_bulk, SolverOptions, TensorReport,
};
use metavox_core::io::{load_vxl, read_density, save_vxl, write_density};
use metavox_core::metrics::{
    coverage_project, coverage_query, diversity, novelty, relative_error, CoverageRegion, PropertyRanges,
    COMPONENT_NAMES,
};
use metavox_core::nn::{UNetConfig, Volume};
use metavox_core::topopt::{optimize, trig_init, DesignField, TrigInitConfig};
use metavox_core::{similarity, CellRole, Error, Result, VoxelGrid};

use crate::conditions::{parse_condition, parse_point, parse_tensor};
use crate::optimize_config::OptimizeConfig;
use crate::*;

pub fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Homogenize(a) => homogenize(a),
        Command::Bounds(a) => bounds(a),
        Command::Optimize(a) => optimize_cmd(a, cli.seed),
        Command::Dataset(a) => dataset_cmd(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::TrainRegressor(a) => train_regressor_cmd(a, cli.seed),
        Command::Sample(a) => sample(a, cli.seed),
        Command::Invert(a) => invert(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Clean(a) => clean(a),
        Command::Dedup(a) => dedup(a),
        Command::ActiveLoop(a) => active(a, cli.seed),
        Command::Metrics(m) => metrics(m),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn tensor_json(c: &metavox_core::CubicTensor, vol: f64) -> Result<Value> {
    let d = c.derived()?;
    Ok(json!({
        "c11": c.c11, "c12": c.c12, "c44": c.c44, "vol": vol,
        "bulk": d.bulk, "shear": d.shear, "youngs": d.youngs, "poisson": d.poisson, "zener": d.zener,
    }))
}

fn homogenize(a: &HomogenizeArgs) -> Result<Value> {
    let grid = load_vxl(&a.input)?;
    let full = homogenize_grid(&grid, &a.material.base(), &SolverOptions::with_tol(a.tol))?;
    let report = TensorReport::new(&full)?;
    let mut out = tensor_json(&reduce_cubic(&full)?, grid.volume_fraction())?;
    out["residual"] = json!(report.residual);
    out["full"] = json!(report.full);
    out["role"] = json!(match grid.role() {
        CellRole::Full => "full",
        CellRole::Eighth => "eighth",
    });
    out["resolution"] = json!(grid.resolution());
    Ok(out)
}

fn bounds(a: &BoundsArgs) -> Result<Value> {
    if !(0.0..=1.0).contains(&a.vf) {
        return Err(Error::InvalidArgument(format!("vf {} outside [0, 1]", a.vf)));
    }
    let base = a.material.base();
    let (k, g) = hs_upper(&base, a.vf);
    Ok(json!({ "vf": a.vf, "hs_bulk": k, "hs_shear": g, "voigt_bulk": voigt_bulk(&base, a.vf) }))
}

fn load_init(path: &Path) -> Result<DesignField> {
    if path.extension().is_some_and(|e| e == "vxl") {
        return Ok(DesignField::from_grid(&load_vxl(path)?));
    }
    let (resolution, values) = read_density(&fs::read(path)?)?;
    Ok(DesignField { resolution, values: values.into_iter().map(f64::from).collect() })
}

fn optimize_cmd(a: &OptimizeArgs, seed: u64) -> Result<Value> {
    let mut cfg = match &a.config {
        Some(p) => OptimizeConfig::parse(&fs::read_to_string(p)?)?,
        None => OptimizeConfig { seed, ..Default::default() },
    };
    if let Some(o) = &a.objective {
        cfg.set("objective", o)?;
    }
    if let Some(v) = a.vf {
        cfg.problem.target_vf = v;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(i) = a.iters {
        cfg.problem.max_iters = i;
    }
    if let Some(p) = &a.init {
        cfg.init = Some(p.clone());
    }
    cfg.problem.isotropy |= a.isotropy;
    cfg.problem.base = a.material.base();
    let init = match &cfg.init {
        Some(p) => load_init(p)?,
        None => trig_init(&TrigInitConfig { seed: cfg.seed, ..Default::default() }, cfg.resolution, cfg.problem.target_vf)?,
    };
    let result = optimize(&cfg.problem, &init)?;
    save_vxl(&a.out, result.grid())?;
    let history = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.json"));
    write_json(&history, &serde_json::to_value(&result)?)?;
    let last = result.history.last();
    Ok(json!({
        "design": a.out,
        "history": history,
        "resolved": cfg,
        "iterations": result.history.len(),
        "final_objective": last.map(|h| h.objective),
        "final_property": result.final_property,
        "final_vf": result.final_vf,
        "binarization_gap": result.binarization_gap,
        "tensor": tensor_json(&result.tensor, result.final_vf)?,
    }))
}

fn dataset_cmd(a: &DatasetArgs, seed: u64) -> Result<Value> {
    let cfg = InitialDatasetConfig {
        count: a.count,
        resolution: a.resolution,
        vf_range: (a.vf_min, a.vf_max),
        max_freq_range: (a.max_freq_min, a.max_freq_max),
        topopt_iters: a.topopt_iters,
        seed,
        solver_tol: a.tol,
    };
    let store = DatasetStore::open(&a.out_dir)?;
    let records = build_initial_dataset(&cfg, &a.material.base(), &store)?;
    let manifest = a.out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    let (ranges, _) = dataset::normalize_conditions(&records)?;
    let ranges_path = a.out_dir.join("ranges.json");
    write_json(&ranges_path, &serde_json::to_value(ranges)?)?;
    Ok(json!({ "records": records.len(), "manifest": manifest, "ranges": ranges_path }))
}

fn window(values: &[f64]) -> (f64, f64) {
    diffusion::window_means(values, 100)
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<Value> {
    let records = read_manifest(&a.manifest)?;
    let store = DatasetStore::open(&a.store)?;
    let mut model = match &a.resume {
        Some(p) => load_diffusion(p)?,
        None => {
            let resolution = records.first().ok_or(Error::EmptyManifest)?.resolution;
            let (ranges, _) = dataset::normalize_conditions(&records)?;
            let mut config = DiffusionConfig { resolution, cond_dropout: a.cond_dropout, ..Default::default() };
            config.unet = UNetConfig { widths: a.widths.clone(), ..UNetConfig::desk() };
            config.adam.lr = a.lr;
            DiffusionModel::new(config, ranges, seed)?
        }
    };
    let data = training_pairs(&records, &store, &model.ranges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses =
        diffusion::train(&mut model, &data, &TrainConfig { steps: a.steps, batch_size: a.batch, seed }, &mut rng)?;
    save_diffusion(&a.out, &model)?;
    if let Some(p) = &a.losses {
        write_json(p, &json!(losses))?;
    }
    let (first, last) = window(&losses);
    Ok(json!({
        "checkpoint": a.out,
        "records": records.len(),
        "steps": losses.len(),
        "loss_first_100": first,
        "loss_last_100": last,
        "ranges": model.ranges,
    }))
}

fn load_records_and_grids(manifest: &Path, store: &Path) -> Result<(Vec<DatasetRecord>, Vec<VoxelGrid>, DatasetStore)> {
    let records = read_manifest(manifest)?;
    let store = DatasetStore::open(store)?;
    let grids = records.iter().map(|r| store.load(r)).collect::<Result<Vec<_>>>()?;
    Ok((records, grids, store))
}

fn train_regressor_cmd(a: &TrainRegressorArgs, seed: u64) -> Result<Value> {
    let (records, grids, _) = load_records_and_grids(&a.manifest, &a.store)?;
    let cfg = RegressorConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        holdout_fraction: a.holdout,
        seed,
        ..Default::default()
    };
    let (model, report) = train_regressor(&records, &grids, &a.material.base(), &cfg)?;
    save_regressor(&a.out, &model)?;
    Ok(json!({ "checkpoint": a.out, "report": report }))
}

fn read_noise(path: &Path) -> Result<LatentGrid> {
    let (side, values) = read_density(&fs::read(path)?)?;
    Ok(Volume::from_data(1, side, values))
}

fn sample(a: &SampleArgs, seed: u64) -> Result<Value> {
    let model = load_diffusion(&a.model)?;
    let cond = parse_condition(&a.cond, a.physical, &model.ranges)?;
    let opts = SampleOptions {
        steps: a.steps,
        guidance: GuidanceConfig { scale: a.guidance },
        self_condition: !a.no_self_cond,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<LatentGrid> = match &a.noise {
        Some(p) => vec![read_noise(p)?],
        None => (0..a.count).map(|_| gaussian_latent(model.resolution(), &mut rng)).collect(),
    };
    let samples = model.sample_many(&noises, &vec![cond; noises.len()], &opts)?;
    fs::create_dir_all(&a.out_dir)?;
    let target = model.ranges.denormalize(cond.0);
    let base = a.material.base();
    let solver = SolverOptions::with_tol(a.tol);
    let mut items = Vec::with_capacity(samples.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in samples.iter().enumerate() {
        let file = a.out_dir.join(format!("sample_{i}.vxl"));
        save_vxl(&file, &s.grid)?;
        let rejected = clean_one(&s.grid)?;
        let mut item = json!({
            "file": file,
            "vol": s.grid.volume_fraction(),
            "symmetric": s.grid.is_permutation_symmetric(),
            "rejected": rejected.map(|r| r.flag()),
        });
        if a.best_of {
            if target[..3].contains(&diffusion::SENTINEL) {
                return Err(Error::InvalidArgument("--best-of needs c11, c12 and c44 in the condition".into()));
            }
            if s.grid.solid_count() > 0 {
                let t = homogenize_cubic_eighth(&s.grid, &base, &solver)?;
                let goal = metavox_core::CubicTensor::new(target[0], target[1], target[2]);
                let err = relative_error(&goal, &t, &model.ranges)?;
                item["tensor"] = json!({ "c11": t.c11, "c12": t.c12, "c44": t.c44 });
                item["error"] = json!(err);
                if best.is_none_or(|(_, e)| err < e) {
                    best = Some((i, err));
                }
            }
        }
        items.push(item);
    }
    let mut out = json!({ "condition": cond.0, "physical_condition": target, "samples": items });
    if let Some((i, err)) = best {
        let file = a.out_dir.join("best.vxl");
        save_vxl(&file, &samples[i].grid)?;
        out["best"] = json!({ "index": i, "error": err, "file": file });
    }
    Ok(out)
}

fn invert(a: &InvertArgs) -> Result<Value> {
    let model = load_diffusion(&a.model)?;
    let grid = load_vxl(&a.input)?;
    let opts = SampleOptions { invert_refine: a.refine, ..SampleOptions::deterministic(a.steps) };
    let z = model.ddim_invert(&grid, &opts)?;
    fs::write(&a.out, write_density(z.side, &z.data)?)?;
    let back = model.ddim_sample(&z, &ConditionVector::unconditioned(), &opts)?;
    Ok(json!({ "noise": a.out, "reconstruction_similarity": similarity(&grid, &back.grid)? }))
}

fn interpolate(a: &InterpolateArgs) -> Result<Value> {
    let model = load_diffusion(&a.model)?;
    let start = load_vxl(&a.start)?;
    let end = load_vxl(&a.end)?;
    let opts = SampleOptions { invert_refine: a.refine, ..SampleOptions::deterministic(a.steps) };
    let regressor = a.regressor.as_ref().map(load_regressor).transpose()?;
    let guided = regressor.clone().map(|r| GuidedInterpolation { step_size: a.step_size, ..GuidedInterpolation::new(r) });
    let frames = model.interpolate_sequence(&start, &end, a.count, &opts, guided.as_ref())?;
    fs::create_dir_all(&a.out_dir)?;
    let mut items = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let file = a.out_dir.join(format!("frame_{i}.vxl"));
        save_vxl(&file, f)?;
        let mut item = json!({
            "file": file,
            "vol": f.volume_fraction(),
            "similarity_to_start": similarity(f, &start)?,
            "similarity_to_end": similarity(f, &end)?,
        });
        if i > 0 {
            item["similarity_to_previous"] = json!(similarity(f, &frames[i - 1])?);
        }
        if let Some(r) = &regressor {
            item["predicted_bulk_ratio"] = json!(r.predict_grid(f));
        }
        items.push(item);
    }
    Ok(json!({ "guided": guided.is_some(), "frames": items }))
}

fn clean(a: &CleanArgs) -> Result<Value> {
    if let Some(m) = &a.manifest {
        let store = a.store.as_ref().ok_or_else(|| Error::InvalidArgument("--manifest needs --store".into()))?;
        let (records, grids, _) = load_records_and_grids(m, store)?;
        let mut kept = Vec::new();
        let mut rejected = Vec::new();
        for (r, g) in records.iter().zip(&grids) {
            match clean_one(g)? {
                None => kept.push(r.clone()),
                Some(reason) => rejected.push(json!({ "id": r.id, "reason": reason })),
            }
        }
        if let Some(out) = &a.out {
            write_manifest(out, &kept)?;
        }
        return Ok(json!({ "accepted": kept.len(), "rejected": rejected }));
    }
    if a.files.is_empty() {
        return Err(Error::InvalidArgument("give structure files or --manifest".into()));
    }
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for f in &a.files {
        match clean_one(&load_vxl(f)?)? {
            None => accepted.push(json!(f)),
            Some(reason) => rejected.push(json!({ "file": f, "reason": reason })),
        }
    }
    let n = a.files.len() as f64;
    Ok(json!({
        "accepted": accepted,
        "rejected": rejected,
        "disconnected_fraction": rejected.iter().filter(|r| r["reason"] == "disconnected").count() as f64 / n,
    }))
}

fn ranges_for(records: &[DatasetRecord], path: Option<&PathBuf>) -> Result<PropertyRanges> {
    match path {
        Some(p) => {
            let r: PropertyRanges = serde_json::from_slice(&fs::read(p)?)?;
            r.validate()?;
            Ok(r)
        }
        None => Ok(dataset::normalize_conditions(records)?.0),
    }
}

fn dedup(a: &DedupArgs) -> Result<Value> {
    let records = read_manifest(&a.manifest)?;
    let ranges = ranges_for(&records, a.ranges.as_ref())?;
    let kept = dataset::dedup(&records, &ranges, a.bins, a.cap);
    write_manifest(&a.out, &kept)?;
    Ok(json!({ "input": records.len(), "kept": kept.len(), "out": a.out }))
}

fn active(a: &ActiveLoopArgs, seed: u64) -> Result<Value> {
    let initial = read_manifest(&a.manifest)?;
    let store = DatasetStore::open(&a.store)?;
    let model = load_diffusion(&a.model)?;
    let ranges = model.ranges;
    let cfg = ActiveLoopConfig {
        rounds: a.rounds,
        samples_per_round: a.samples,
        dedup_bins: a.bins,
        dedup_cap: a.cap,
        outside_fraction: a.outside_fraction,
        seed,
        solver_tol: a.tol,
    };
    let mut generator = DiffusionGenerator {
        model,
        sample: SampleOptions { steps: a.steps, ..Default::default() },
        train: TrainConfig { steps: a.train_steps, batch_size: a.batch, seed },
    };
    let (records, reports) =
        active_loop(&cfg, &initial, &ranges, &mut generator, &store, &a.material.base(), &a.out_dir)?;
    let final_manifest = a.out_dir.join("final_manifest.jsonl");
    write_manifest(&final_manifest, &records)?;
    let model_path = a.out_dir.join("model.mvxc");
    save_diffusion(&model_path, &generator.model)?;
    Ok(json!({ "records": records.len(), "manifest": final_manifest, "model": model_path, "rounds": reports }))
}

fn metrics(m: &MetricsCommand) -> Result<Value> {
    match m {
        MetricsCommand::Error { cond, gen, ranges } => {
            let r: PropertyRanges = serde_json::from_slice(&fs::read(ranges)?)?;
            let e = relative_error(&parse_tensor(cond)?, &parse_tensor(gen)?, &r)?;
            Ok(json!({ "error": e }))
        }
        MetricsCommand::Novelty { sample, refs } => {
            let s = load_vxl(sample)?;
            let refs = refs.iter().map(load_vxl).collect::<Result<Vec<_>>>()?;
            Ok(json!({ "novelty": novelty(&s, &refs)? }))
        }
        MetricsCommand::Diversity { files } => {
            let grids = files.iter().map(load_vxl).collect::<Result<Vec<_>>>()?;
            Ok(serde_json::to_value(diversity(&grids)?)?)
        }
        MetricsCommand::Coverage { manifest, bins, ranges, query, project, bitmap } => {
            let records = read_manifest(manifest)?;
            let ranges = ranges_for(&records, ranges.as_ref())?;
            let points: Vec<(String, _)> = records
                .iter()
                .zip(dataset::normalized_points(&records, &ranges))
                .map(|(r, p)| (r.id.clone(), p))
                .collect();
            let region = CoverageRegion::build(*bins, &points)?;
            let mut out = json!({
                "bins": bins,
                "occupied": region.occupied_count(),
                "fraction": region.fraction(),
            });
            if let Some(q) = query {
                let p = parse_point(q)?;
                if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidArgument(format!("query {} must be normalized", COMPONENT_NAMES[i])));
                }
                out["query"] = json!(coverage_query(&region, &p));
                if *project {
                    let (q, id) = coverage_project(&region, &p)?;
                    out["projection"] = json!({ "point": q, "id": id });
                }
            }
            if let Some(path) = bitmap {
                region.write_bitmap(fs::File::create(path)?)?;
                out["bitmap"] = json!(path);
            }
            Ok(out)
        }
    }
}
