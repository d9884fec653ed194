use std::fs;
use std::io::Write as _;
use std::path::Path;

use mcddpm::config::RunConfig;
use mcddpm::data::{generate_phantom_dataset, load_records, split_records, write_dataset, AnomalySpec, PhantomSpec, Split};
use mcddpm::diffusion::make_linear_schedule;
use mcddpm::evaluation::{analyze_case, evaluate_cases, EvalReport};
use mcddpm::inference::residual_map;
use mcddpm::io::{read_volume, write_binary_map, write_pgm, write_volume};
use mcddpm::postprocess::clean;
use mcddpm::training::{fit_with, EpochMetrics, Trainer};
use mcddpm::{Checkpoint, Mcddpm};

use crate::options::{manifest_path, prepare_output, EvalArgs, InferArgs, PhantomArgs, TrainArgs, THETA_SWEEP};
use crate::{CliError, CliResult};

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const METRICS_LOG: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Argument(format!("cannot write {}: {e}", path.display())))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(mcddpm::Error::Io { path: path.to_path_buf(), source: e })
}

/// Config snapshot with the inputs that live outside `RunConfig`.
fn snapshot(dir: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> CliResult<()> {
    let mut text = format!("# mcddpm {command}\n");
    for (k, v) in extra {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push_str(&cfg.to_text());
    write_text(&dir.join(CONFIG_SNAPSHOT), &text)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Core(mcddpm::Error::Data { path: path.to_path_buf(), reason: "checkpoint file not found".into() }));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn phantom(a: PhantomArgs) -> CliResult<()> {
    let anomaly = AnomalySpec { count: (a.anomalies.min(1), a.anomalies), radius: (a.min_radius, a.max_radius), ..AnomalySpec::default() };
    let spec = PhantomSpec {
        image_size: (a.size, a.size),
        depth: a.depth,
        train_volumes: a.train,
        val_volumes: a.val,
        test_volumes: a.test,
        anomaly,
        seed: a.seed,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    let dir = prepare_output(&a.output, None, "phantom")?;
    let records = generate_phantom_dataset(&spec)?;
    let manifest = write_dataset(&dir, &records)?;
    let t = &spec.texture;
    let an = &spec.anomaly;
    let text = format!(
        "# mcddpm phantom\nseed = {}\nsize = {}\ndepth = {}\ntrain = {}\nval = {}\ntest = {}\nanomaly_count = {}..{}\n\
         anomaly_radius = {}..{}\nanomaly_offset = {}..{}\nprevalence = {}..{}\n\
         outer = {}\ninner = {}\nventricle = {}\nmodulation = {}\nnoise_std = {}\ndeformation = {}\n",
        a.seed, a.size, a.depth, a.train, a.val, a.test, an.count.0, an.count.1, an.radius.0, an.radius.1,
        an.intensity_offset.0, an.intensity_offset.1, an.prevalence.0, an.prevalence.1,
        t.outer, t.inner, t.ventricle, t.modulation, t.noise_std, t.deformation
    );
    write_text(&dir.join(CONFIG_SNAPSHOT), &text)?;
    println!("wrote {} volumes; manifest {}", records.len(), manifest.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = a.config.build()?;
    let manifest = manifest_path(a.data.as_deref(), cfg.manifest.as_deref())?;
    cfg.manifest = Some(manifest.clone());
    let dir = prepare_output(&a.output, cfg.output.as_deref(), "train")?;
    let records = load_records(&manifest)?;
    let train = split_records(records.clone(), Split::Train);
    let val = split_records(records, Split::Val);
    if train.is_empty() {
        return Err(CliError::Core(mcddpm::Error::Data { path: manifest, reason: "no train volumes".into() }));
    }
    let trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            cfg.model = ck.model_config.clone();
            Trainer::resume(&ck, cfg.train.clone())?
        }
        None => Trainer::new(Mcddpm::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let mut extra = vec![];
    if let Some(r) = &a.resume {
        extra.push(("resume", r.display().to_string()));
    }
    snapshot(&dir, "train", &cfg, &extra)?;
    log::info!("{} parameters, {} train and {} val volumes", trainer.model.params().count(), train.len(), val.len());

    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| io_err(&ck_dir, e))?;
    let log_path = dir.join(METRICS_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log_file, "{}", EpochMetrics::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
    let every = cfg.train.checkpoint_every;
    let outcome = fit_with(trainer, &train, &val, |m, t| {
        writeln!(log_file, "{}", m.csv_row()).map_err(|e| mcddpm::Error::Io { path: log_path.clone(), source: e })?;
        log_file.flush().map_err(|e| mcddpm::Error::Io { path: log_path.clone(), source: e })?;
        if every > 0 && m.epoch % every == 0 {
            Checkpoint::capture(&t.model, &t.optimizer, &t.config, m.epoch, m.val_error)
                .save(ck_dir.join(format!("epoch_{:04}.bin", m.epoch)))?;
        }
        Ok(())
    })?;
    outcome.best.save(ck_dir.join("best.bin"))?;
    let t = &outcome.final_trainer;
    let last_val = outcome.history.last().and_then(|h| h.val_error);
    Checkpoint::capture(&t.model, &t.optimizer, &t.config, t.epoch, last_val).save(ck_dir.join("last.bin"))?;
    println!(
        "trained {} epochs; best epoch {} val error {}; output {}",
        outcome.history.len(),
        outcome.best.epoch,
        outcome.best.val_error.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into()),
        dir.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = a.config.build()?;
    let split: Split = a.split.parse()?;
    let manifest = manifest_path(a.data.as_deref(), cfg.manifest.as_deref())?;
    cfg.manifest = Some(manifest.clone());
    let thetas: Vec<f64> = if a.theta_sweep {
        THETA_SWEEP.to_vec()
    } else if !a.thetas.is_empty() {
        a.thetas.clone()
    } else {
        vec![cfg.post.theta]
    };
    if let Some(bad) = thetas.iter().find(|t| !(**t > 0.0)) {
        return Err(CliError::Argument(format!("threshold must be positive, got {bad}")));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let dir = prepare_output(&a.output, cfg.output.as_deref(), "eval")?;
    snapshot(
        &dir,
        "eval",
        &cfg,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("split", split.to_string()),
            ("thetas", thetas.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        ],
    )?;
    let model = ck.model()?;
    let schedule = make_linear_schedule(ck.train_config.diffusion_steps)?;
    let records = split_records(load_records(&manifest)?, split);
    if records.is_empty() {
        return Err(CliError::Core(mcddpm::Error::Data { path: manifest, reason: format!("no {split} volumes") }));
    }
    let infer = cfg.inference();
    let mut cases = Vec::with_capacity(records.len());
    for r in &records {
        let case = analyze_case(&model, r, &schedule, &infer, &cfg.post, cfg.train.p_norm)?;
        log::info!("{}: recon error {}", r.subject_id, case.recon_error.map(|e| format!("{e:.6}")).unwrap_or_else(|| "NA".into()));
        if a.export_maps {
            let maps = dir.join("maps");
            let sp = r.volume.spacing();
            write_volume(maps.join(format!("{}_reconstruction.raw", r.subject_id)), &case.reconstruction)?;
            write_volume(maps.join(format!("{}_anomaly.raw", r.subject_id)), &case.residual.data)?;
            write_volume(maps.join(format!("{}_filtered.raw", r.subject_id)), &case.filtered.data)?;
            write_binary_map(maps.join(format!("{}_segmentation.raw", r.subject_id)), &case.segmentation(thetas[0])?, sp)?;
        }
        if a.heatmaps {
            let hm = dir.join("heatmaps");
            fs::create_dir_all(&hm).map_err(|e| io_err(&hm, e))?;
            let k = heatmap_slice(&case);
            let max = case.filtered.max().max(f32::MIN_POSITIVE);
            let id = &r.subject_id;
            write_pgm(hm.join(format!("{id}_s{k:03}_input.pgm")), &r.volume.slice(k), 1.0)?;
            write_pgm(hm.join(format!("{id}_s{k:03}_reconstruction.pgm")), &case.reconstruction.slice(k), 1.0)?;
            write_pgm(hm.join(format!("{id}_s{k:03}_anomaly.pgm")), &case.filtered.data.slice(k), max)?;
        }
        cases.push(case);
    }
    let name = a.dataset_name.clone().unwrap_or_else(|| {
        manifest.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
    });
    let rows = evaluate_cases(&cases, &thetas, &name, &a.checkpoint.display().to_string())?;
    let report = EvalReport { rows };
    report.write_csv(dir.join(REPORT_FILE))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Slice with the most ground-truth voxels, or the middle slice.
fn heatmap_slice(case: &mcddpm::evaluation::CaseResult) -> usize {
    let (h, w, d) = case.reconstruction.dims();
    match &case.truth {
        Some(t) if t.count() > 0 => (0..d)
            .max_by_key(|&k| (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|&(i, j)| t.get(i, j, k)).count())
            .unwrap_or(d / 2),
        _ => d / 2,
    }
}

pub fn infer(a: InferArgs) -> CliResult<()> {
    let cfg = a.config.build()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let volume = read_volume(&a.input)?;
    let dir = prepare_output(&a.output, cfg.output.as_deref(), "infer")?;
    snapshot(
        &dir,
        "infer",
        &cfg,
        &[("checkpoint", a.checkpoint.display().to_string()), ("input", a.input.display().to_string())],
    )?;
    let model = ck.model()?;
    let schedule = make_linear_schedule(ck.train_config.diffusion_steps)?;
    let recon = mcddpm::inference::reconstruct_volume(&model, &volume, &schedule, &cfg.inference())?;
    let residual = residual_map(&volume, &recon, cfg.train.p_norm)?;
    let cleaned = clean(&volume, &residual, &cfg.post)?;
    let seg = mcddpm::postprocess::threshold_binarize(&cleaned.filtered, &cleaned.mask, cfg.post.theta)?;
    write_volume(dir.join("reconstruction.raw"), &recon)?;
    write_volume(dir.join("anomaly.raw"), &residual.data)?;
    write_volume(dir.join("filtered.raw"), &cleaned.filtered.data)?;
    write_binary_map(dir.join("segmentation.raw"), &seg, volume.spacing())?;
    println!(
        "max anomaly score {:.5}; {} voxels above theta {}; output {}",
        cleaned.filtered.max(),
        seg.count(),
        cfg.post.theta,
        dir.display()
    );
    Ok(())
}
