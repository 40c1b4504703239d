use std::fs;
use std::path::{Path, PathBuf};

use lsda_core::masking::{apply_mask, generate_with, MaskConfig, MaskScheme};
use lsda_core::metrics::{box_plot_svg, evaluate, write_report_csv, DomainReport, Stage};
use lsda_core::networks::{read_checkpoint, ArchConfig, LatentCode, LatentRole, SegProb};
use lsda_core::synthdata::{generate, read_dataset, write_dataset, Corruption, Dataset, GenRequest, Split};
use lsda_core::trainer::{self, AdamConfig, Mode, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::ConfigFile;
use crate::output::{write_channels_csv, write_manifest, write_pgm, DATA_FILE, MANIFEST};
use crate::{Cli, CliError, Command, EvalArgs, GenDataArgs, MaskDemoArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let known: &[&str] = match &cli.command {
        Command::GenData(_) => &["n", "seed", "corrupt", "severity", "shifted", "split", "size", "first-index"],
        Command::Train(_) => &["mode", "data", "seed", "epochs", "lr", "batch-size", "checkpoint-every", "val", "eval-every"],
        Command::Eval(_) => &["stage"],
        Command::MaskDemo(_) => &[],
    };
    let unknown = file.unknown_keys(known);
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))));
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::MaskDemo(a) => mask_demo(a),
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    let path = dir.join(DATA_FILE);
    read_dataset(&path).map_err(|e| match e {
        lsda_core::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        e => CliError::from(e),
    })
}

fn gen_data(a: GenDataArgs, file: &ConfigFile) -> Result<(), CliError> {
    let n = file.pick(a.n, "n", 10usize)?;
    let seed = file.pick(a.seed, "seed", 0u64)?;
    let size = file.pick(a.size, "size", 64usize)?;
    let first_index = file.pick(a.first_index, "first-index", 0u64)?;
    let shifted = a.shifted || file.pick_opt(None::<bool>, "shifted")?.unwrap_or(false);
    let corrupt: Option<String> = file.pick_opt(a.corrupt, "corrupt")?;
    let severity: Option<f32> = file.pick_opt(a.severity, "severity")?;
    let split = match &corrupt {
        Some(kind) => Split::TestCorrupted(kind.parse::<Corruption>().map_err(usage)?),
        None => {
            if severity.is_some() {
                return Err(usage("--severity needs --corrupt"));
            }
            let s: String = file.pick(a.split, "split", "train".to_owned())?;
            match s.parse().map_err(usage)? {
                Split::TestCorrupted(_) => return Err(usage("use --corrupt for corrupted splits")),
                s => s,
            }
        }
    };
    let ds = generate(&GenRequest {
        split,
        height: size,
        width: size,
        count: n,
        seed,
        first_index,
        shifted,
        severity,
    })?;
    fs::create_dir_all(&a.out)?;
    write_dataset(&ds, &a.out.join(DATA_FILE))?;
    write_manifest(
        &a.out.join(MANIFEST),
        "gen-data",
        json!({
            "n": n, "seed": seed, "size": size, "first_index": first_index, "shifted": shifted,
            "corrupt": corrupt, "severity": severity, "split": split.to_string(),
            "dataset": serde_json::to_value(&ds.manifest).map_err(|e| CliError::Io(e.to_string()))?,
        }),
    )?;
    println!("wrote {} samples ({split}) to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, file: &ConfigFile) -> Result<(), CliError> {
    let data_dir: PathBuf = file
        .pick_opt(a.data, "data")?
        .ok_or_else(|| usage("--data is required"))?;
    let data = load_data(&data_dir)?;
    let val_dir: Option<PathBuf> = file.pick_opt(a.val, "val")?;
    let val = val_dir.as_deref().map(load_data).transpose()?;
    fs::create_dir_all(&a.out)?;

    let t = if a.resume {
        let mut t = Trainer::resume(&a.out)?;
        if let Some(e) = file.pick_opt(a.epochs, "epochs")? {
            t.config.epochs = e;
        }
        t
    } else {
        let mode: Mode = file.pick(a.mode, "mode", "standard".to_owned())?.parse().map_err(usage)?;
        let defaults = TrainConfig::default();
        let m = &data.manifest;
        let cfg = TrainConfig {
            mode,
            arch: ArchConfig {
                height: m.height,
                width: m.width,
                classes: m.classes,
                ..ArchConfig::default()
            },
            adam: AdamConfig {
                lr: file.pick(a.lr, "lr", defaults.adam.lr)?,
                ..AdamConfig::default()
            },
            batch_size: file.pick(a.batch_size, "batch-size", defaults.batch_size)?,
            epochs: file.pick(a.epochs, "epochs", defaults.epochs)?,
            seed: file.pick(a.seed, "seed", 0u64)?,
            checkpoint_every: file.pick(a.checkpoint_every, "checkpoint-every", defaults.checkpoint_every)?,
            eval_every: file.pick(a.eval_every, "eval-every", if val.is_some() { 10 } else { 0 })?,
            ..defaults
        };
        Trainer::new(cfg)?
    };
    if t.config.arch.height != data.manifest.height || t.config.arch.width != data.manifest.width {
        return Err(usage("dataset image size does not match the model"));
    }
    write_manifest(
        &a.out.join(MANIFEST),
        "train",
        json!({
            "config": serde_json::to_value(&t.config).map_err(|e| CliError::Io(e.to_string()))?,
            "data": data_dir, "data_manifest": serde_json::to_value(&data.manifest).map_err(|e| CliError::Io(e.to_string()))?,
            "val": val_dir, "resumed_from_step": t.step,
        }),
    )?;
    let mode = t.config.mode;
    t.config.validate()?;
    let out = trainer::run(t, &data, val.as_ref(), Some(&a.out))?;
    let last = out.log.last();
    println!(
        "trained {} ({} steps, final loss {}) -> {}",
        mode.name(),
        out.trainer.step,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
        a.out.join(trainer::files::FINAL).display()
    );
    if let Some(b) = &out.trainer.best {
        println!("best validation Dice {:.4} at epoch {} -> {}", b.dice, b.epoch, a.out.join(trainer::files::BEST).display());
    }
    Ok(())
}

fn domain_name(ds: &Dataset) -> String {
    let mut name = ds.manifest.split.to_string();
    if ds.manifest.shifted {
        name.push_str("-shifted");
    }
    name
}

fn eval(a: EvalArgs, file: &ConfigFile) -> Result<(), CliError> {
    let stage: Stage = file.pick(a.stage, "stage", "ftn+stn".to_owned())?.parse().map_err(usage)?;
    let model = read_checkpoint(&a.model)?;
    let mut reports: Vec<DomainReport> = Vec::new();
    for dir in &a.data {
        let ds = load_data(dir)?;
        let mut name = domain_name(&ds);
        if reports.iter().any(|r| r.domain == name) {
            name = format!("{name}#{}", reports.len());
        }
        reports.push(evaluate(&model, &ds, &name, stage)?);
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_report_csv(&reports, &a.report)?;
    if let Some(plot) = &a.plot {
        fs::write(plot, box_plot_svg(&reports))?;
    }
    let mut manifest = a.report.clone().into_os_string();
    manifest.push(".manifest.json");
    write_manifest(
        Path::new(&manifest),
        "eval",
        json!({ "model": a.model, "data": a.data, "stage": stage.name(), "report": a.report, "plot": a.plot }),
    )?;
    for r in &reports {
        println!("{:<28} {:<8} mean foreground Dice {:.4} (n={})", r.domain, stage.name(), r.mean_foreground(), r.count());
    }
    Ok(())
}

fn mask_demo(a: MaskDemoArgs) -> Result<(), CliError> {
    let scheme: MaskScheme = a.scheme.parse().map_err(usage)?;
    let model = read_checkpoint(&a.model)?;
    let ds = load_data(&a.data)?;
    let sample = ds
        .samples
        .get(a.index)
        .ok_or_else(|| usage(format!("--index {} out of range (dataset has {})", a.index, ds.len())))?;
    let pair = sample.to_pair(ds.manifest.classes)?;
    let cfg = MaskConfig {
        a_range: (a.a as f64, a.a as f64),
        ..MaskConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let he = generate_with(&model, &pair.x, &pair.y, scheme, a.p, &cfg, &mut rng)?;
    let z_i = model.encode(&pair.x)?;
    let z_s = model.decouple(&z_i)?;
    let zi_hat = apply_mask(&z_i.tensor, &he.mask_image)?;
    let zs_hat = apply_mask(&z_s.tensor, &he.mask_shape)?;
    let clean_seg = model.decode_seg(&LatentCode { role: LatentRole::Shape, tensor: z_s.tensor.clone() })?;
    let corrected = model.shape_correct(&SegProb(he.p_hat.clone()))?;

    fs::create_dir_all(&a.out)?;
    let (h, w) = (sample.height(), sample.width());
    let c = ds.manifest.classes as f32 - 1.0;
    let labels = |p: &SegProb| -> Vec<f32> { p.labels().into_iter().map(f32::from).collect() };
    let o = |f: &str| a.out.join(f);
    write_pgm(&o("x.pgm"), w, h, pair.x.data(), 0.0, 1.0)?;
    write_pgm(&o("x_hat.pgm"), w, h, he.x_hat.data(), 0.0, 1.0)?;
    write_pgm(&o("y.pgm"), w, h, &sample.labels.iter().map(|&l| l as f32).collect::<Vec<_>>(), 0.0, c)?;
    write_pgm(&o("p.pgm"), w, h, &labels(&clean_seg), 0.0, c)?;
    write_pgm(&o("p_hat.pgm"), w, h, &labels(&SegProb(he.p_hat.clone())), 0.0, c)?;
    write_pgm(&o("p_hat_corrected.pgm"), w, h, &labels(&corrected), 0.0, c)?;
    write_channels_csv(&o("mask_image.csv"), &he.mask_image)?;
    write_channels_csv(&o("mask_shape.csv"), &he.mask_shape)?;
    write_channels_csv(&o("z_i.csv"), &z_i.tensor)?;
    write_channels_csv(&o("z_s.csv"), &z_s.tensor)?;
    write_channels_csv(&o("z_i_masked.csv"), &zi_hat)?;
    write_channels_csv(&o("z_s_masked.csv"), &zs_hat)?;
    write_channels_csv(&o("p_hat.csv"), &he.p_hat)?;
    write_manifest(
        &o(MANIFEST),
        "mask-demo",
        json!({ "model": a.model, "data": a.data, "scheme": scheme.name(), "p": a.p, "a": a.a, "index": a.index, "seed": a.seed }),
    )?;
    println!("wrote {} hard example for sample {} to {}", scheme.name(), a.index, a.out.display());
    Ok(())
}
