//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use dfl_core::data::{generate, load_dataset, save_dataset, Dataset};
use dfl_core::eval::{
    class_profile, encode_pgm, energy_heatmap, energy_shift, evaluate, filter_heatmap, group_means, localize,
    map_csv,
};
use dfl_core::init::{candidates_csv, initialize_filter_bank_detailed};
use dfl_core::netdef::checkpoint;
use dfl_core::netdef::{build_model, receptive_field, Model, ModelSpec};
use dfl_core::tensor::{Element, Tensor};
use dfl_core::train::{ablate, fusion_weights, run as train_run, FUSION_SETTINGS};
use log::info;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::manifest::RunDir;
use crate::{resolve_config, CliError, Outcome};

/// Arguments recorded in the manifest: everything except the output
/// location and worker count, which do not affect results.
fn recorded_flags(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        match a.as_str() {
            "--out" | "--workers" => skip = true,
            s if s.starts_with("--out=") || s.starts_with("--workers=") => {}
            _ => out.push(a.clone()),
        }
    }
    out
}

pub fn dispatch(matches: &ArgMatches, args: &[String]) -> Result<Outcome, CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let config = resolve_config(sub)?;
    let out = PathBuf::from(sub.get_one::<String>("out").expect("has default"));
    let flags = recorded_flags(args);
    let ctx = Ctx {
        config,
        out,
        flags,
        sub,
    };
    if name == "rf" {
        return rf(sub);
    }
    if ctx.config.use_f64()? {
        run_typed::<f64>(name, &ctx)
    } else {
        run_typed::<f32>(name, &ctx)
    }
}

struct Ctx<'a> {
    config: RunConfig,
    out: PathBuf,
    flags: Vec<String>,
    sub: &'a ArgMatches,
}

fn run_typed<T: Element>(name: &str, ctx: &Ctx) -> Result<Outcome, CliError> {
    match name {
        "gen-data" => gen_data(ctx),
        "init-filters" => init_filters::<T>(ctx),
        "train" => train::<T>(ctx),
        "eval" => eval::<T>(ctx),
        "ablate" => ablation::<T>(ctx),
        "viz" => viz::<T>(ctx),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn load_data(config: &RunConfig) -> Result<Dataset, CliError> {
    let classes = config.synth_spec()?.classes;
    match config.data_dir() {
        Some(dir) => Ok(load_dataset(dir, config.synth_spec()?.image_size, classes)?),
        None => Ok(generate(&config.synth_spec()?)?),
    }
}

fn path_arg(sub: &ArgMatches, name: &str) -> Option<PathBuf> {
    sub.get_one::<String>(name).map(PathBuf::from)
}

fn gen_data(ctx: &Ctx) -> Result<Outcome, CliError> {
    let ds = generate(&ctx.config.synth_spec()?)?;
    let mut run = RunDir::create(&ctx.out, "gen-data", &ctx.config, "")?;
    save_dataset(&ds, run.join("data"))?;
    run.track_dir("data")?;
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    Ok(Outcome {
        stdout: format!(
            "wrote {} train and {} test images to {}\n",
            ds.train.len(),
            ds.test.len(),
            dir.join("data").display()
        ),
        run_dir: Some(dir),
    })
}

fn init_filters<T: Element>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.config.model_spec()?;
    let cfg = ctx.config.train_config()?;
    let ds = load_data(&ctx.config)?;
    let random: Model<T> = build_model(&spec, &[], cfg.seed)?;
    let mut run = RunDir::create(&ctx.out, "init-filters", &ctx.config, "")?;
    let mut banks = Vec::new();
    let mut stdout = String::new();
    for (j, d) in spec.dfl.iter().enumerate() {
        let report = initialize_filter_bank_detailed(&ds.train, &random, &d.tap, spec.classes, &cfg.init_config(d.k))?;
        run.write(&format!("candidates_{j}.csv"), candidates_csv(&report.candidates))?;
        let _ = writeln!(
            stdout,
            "module {j} at {}: {} filters from {} candidates",
            d.tap,
            report.bank.weight.shape()[0],
            report.candidates.len()
        );
        banks.push(Some(report.bank));
    }
    let model: Model<T> = build_model(&spec, &banks, cfg.seed)?;
    checkpoint::save(&model, run.join("model"))?;
    run.track_dir("model")?;
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    Ok(Outcome {
        stdout,
        run_dir: Some(dir),
    })
}

fn train<T: Element>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.config.model_spec()?;
    let cfg = ctx.config.train_config()?;
    let ds = load_data(&ctx.config)?;
    let result = train_run::<T>(&spec, &ds, &cfg)?;
    let mut run = RunDir::create(&ctx.out, "train", &ctx.config, "")?;
    checkpoint::save(&result.initial, run.join("initial"))?;
    checkpoint::save(&result.model, run.join("model"))?;
    run.track_dir("initial")?;
    run.track_dir("model")?;
    run.write("history.csv", result.history.to_csv())?;
    let mut stdout = String::new();
    if let Some(last) = result.history.epochs.last() {
        for (s, a) in FUSION_SETTINGS.iter().zip(&last.accuracy) {
            let _ = writeln!(stdout, "{s}: {a:.4}");
        }
    }
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    let _ = writeln!(stdout, "run directory: {}", dir.display());
    Ok(Outcome {
        stdout,
        run_dir: Some(dir),
    })
}

fn load_checkpoint<T: Element>(dir: &Path) -> Result<Model<T>, CliError> {
    Ok(checkpoint::load::<T>(dir)?)
}

fn checkpoint_input(dir: &Path) -> Result<String, CliError> {
    let manifest = dir.join("manifest.txt");
    let bytes = std::fs::read(&manifest).map_err(|e| CliError::Io(manifest.clone(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn eval<T: Element>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let ckpt = path_arg(ctx.sub, "checkpoint").expect("required");
    let model: Model<T> = load_checkpoint(&ckpt)?;
    let ds = load_data(&ctx.config)?;
    let mut csv = String::from("setting,fusion,accuracy\n");
    let mut stdout = String::new();
    let mut settings: Vec<(String, Vec<f64>)> = FUSION_SETTINGS
        .iter()
        .map(|s| (s.to_string(), fusion_weights(&model.spec, s)))
        .collect();
    settings.push(("configured".into(), ctx.config.fusion(&model.spec)?));
    for (name, w) in settings {
        let acc = evaluate(&model, &ds.test, &w)?;
        let ws: Vec<String> = w.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(csv, "{name},{},{acc}", ws.join(" "));
        let _ = writeln!(stdout, "{name}: {acc:.4}");
    }
    let mut run = RunDir::create(&ctx.out, "eval", &ctx.config, &checkpoint_input(&ckpt)?)?;
    run.write("eval.csv", csv)?;
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    Ok(Outcome {
        stdout,
        run_dir: Some(dir),
    })
}

fn ablation<T: Element>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.config.model_spec()?;
    let cfg = ctx.config.train_config()?;
    let ds = load_data(&ctx.config)?;
    let report = ablate::<T>(&spec, &ds, &cfg)?;
    let csv = report.to_csv();
    let mut run = RunDir::create(&ctx.out, "ablate", &ctx.config, "")?;
    run.write("ablation.csv", &csv)?;
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    Ok(Outcome {
        stdout: csv,
        run_dir: Some(dir),
    })
}

fn rf(sub: &ArgMatches) -> Result<Outcome, CliError> {
    let spec_arg = sub.get_one::<String>("spec").expect("required");
    let tap = sub.get_one::<String>("tap").expect("required");
    let spec = match spec_arg.as_str() {
        "tinynet" => ModelSpec::tinynet(8, 10),
        "vgg16" => ModelSpec::vgg16(200, 10, 448),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(PathBuf::from(path), e))?;
            ModelSpec::from_config(&text)?
        }
    };
    let info = receptive_field(&spec.backbone, tap)?;
    Ok(Outcome {
        stdout: format!("size={} stride={} offset={}\n", info.size, info.stride, info.offset),
        run_dir: None,
    })
}

fn viz<T: Element>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let ckpt = path_arg(ctx.sub, "checkpoint").expect("required");
    let before_dir = path_arg(ctx.sub, "before").unwrap_or_else(|| ckpt.with_file_name("initial"));
    let model: Model<T> = load_checkpoint(&ckpt)?;
    let before: Model<T> = load_checkpoint(&before_dir)?;
    let ds = load_data(&ctx.config)?;
    let classes = model.spec.classes;
    let inputs = format!("{}\n{}", checkpoint_input(&ckpt)?, checkpoint_input(&before_dir)?);
    let mut run = RunDir::create(&ctx.out, "viz", &ctx.config, &inputs)?;
    let mut stdout = String::new();

    for (module, d) in model.spec.dfl.iter().enumerate() {
        let mut top = String::from("class,filter,rank,image_id,label,h,w,x0,y0,x1,y1,response,iou\n");
        let mut profiles = String::from("class,peak_group,values\n");
        for class in 0..classes {
            let loc = localize(&model, &ds.train, &ds.test, class, module, 10)?;
            let filter = loc.filter;
            for (rank, (h, iou)) in loc.hits.iter().zip(&loc.ious).enumerate() {
                let s = &ds.test[h.image_id];
                let b = h.bbox;
                let _ = writeln!(
                    top,
                    "{class},{filter},{rank},{},{},{},{},{},{},{},{},{},{iou}",
                    h.image_id, s.label, h.location.0, h.location.1, b.x0, b.y0, b.x1, b.y1, h.response
                );
            }
            let profile = class_profile(&model, &ds.test, class, module)?;
            let groups = group_means(&profile, d.k);
            let peak = Tensor::from_vec(groups).argmax();
            let vals: Vec<String> = profile.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(profiles, "{class},{peak},{}", vals.join(" "));
            let _ = writeln!(
                stdout,
                "module {module} class {class}: best filter {filter}, top-10 localized {}/{}, profile peak group {peak}",
                loc.count_above(0.3),
                loc.hits.len()
            );

            if let Some(sample) = ds.test.iter().find(|s| s.label == class) {
                let heat = filter_heatmap(&model, &sample.image, module, filter)?;
                run.write(&format!("heatmaps/filter_m{module}_c{class}.pgm"), encode_pgm(&heat)?)?;
                run.write(&format!("heatmaps/filter_m{module}_c{class}.csv"), map_csv(&heat))?;
                for (tag, m) in [("before", &before), ("after", &model)] {
                    let e = energy_heatmap(m, &sample.image, &d.tap)?;
                    run.write(&format!("heatmaps/energy_{tag}_m{module}_c{class}.pgm"), encode_pgm(&e)?)?;
                    run.write(&format!("heatmaps/energy_{tag}_m{module}_c{class}.csv"), map_csv(&e))?;
                }
            }
        }
        run.write(&format!("top_patches_m{module}.csv"), top)?;
        run.write(&format!("class_profiles_m{module}.csv"), profiles)?;
        let shift = energy_shift(&before, &model, &ds.test, &d.tap)?;
        run.write(&format!("energy_shift_m{module}.csv"), shift.summary_csv(classes))?;
        let increased = shift
            .per_class(classes)
            .iter()
            .filter(|v| matches!(v, Some((b, a)) if a > b))
            .count();
        info!("module {module}: energy inside truth boxes increased for {increased}/{classes} classes");
        let _ = writeln!(stdout, "module {module}: inside-box energy increased for {increased}/{classes} classes");
    }
    let dir = run.finish(&ctx.config, &ctx.flags)?;
    Ok(Outcome {
        stdout,
        run_dir: Some(dir),
    })
}
