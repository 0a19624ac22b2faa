use std::collections::HashSet;
use std::path::{Path, PathBuf};

use moepot::data::{generate, pad_channels, read_trajectories, unify_resolution, write_trajectories, FamilyParams};
use moepot::data::{MixtureEntry, MixtureSpec, TrainingSet};
use moepot::eval::{evaluate, interpret, EvalOptions};
use moepot::model::{count_params, ModelConfig, ModelParams};
use moepot::train::{
    finetune, loss_and_grads, metrics_csv, pretrain, read_checkpoint, write_checkpoint, Checkpoint, Phase,
};
use moepot::{Error, Result};
use serde_json::json;

use crate::config::{RunConfig, DEFAULT_PRESET};
use crate::{
    Cli, Command, EvalArgs, FinetuneArgs, GenDataArgs, InspectArgs, InterpretArgs, PretrainArgs, TrainOverrides,
};

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, cli.preset.as_deref())?,
        None => RunConfig::from_preset(cli.preset.as_deref().unwrap_or(DEFAULT_PRESET))?,
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match &cli.command {
        Some(Command::Pretrain(a)) => apply_overrides(&mut cfg, &a.train, &a.data)?,
        Some(Command::Finetune(a)) => apply_overrides(&mut cfg, &a.train, &[])?,
        _ => {}
    }
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Ok(());
    };
    match command {
        Command::GenData(a) => gen_data(cli, &cfg, a),
        Command::Pretrain(a) => cmd_pretrain(cli, &cfg, a),
        Command::Finetune(a) => cmd_finetune(cli, &cfg, a),
        Command::Eval(a) => cmd_eval(cli, &cfg, a),
        Command::Interpret(a) => cmd_interpret(cli, &cfg, a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides, data: &[String]) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.peak_lr = v;
    }
    if let Some(v) = o.w_bal {
        cfg.model.w_bal = v;
    }
    if !data.is_empty() {
        cfg.data = parse_data_args(data)?;
    }
    cfg.model.validate()?;
    cfg.train.validate()
}

/// `PATH` or `PATH=WEIGHT` arguments.
fn parse_data_args(args: &[String]) -> Result<MixtureSpec> {
    let entries = args
        .iter()
        .map(|a| match a.rsplit_once('=') {
            Some((p, w)) => match w.parse::<f64>() {
                Ok(weight) => Ok(MixtureEntry { path: PathBuf::from(p), weight }),
                Err(_) => Err(Error::Config(format!("bad dataset weight in {a:?}"))),
            },
            None => Ok(MixtureEntry { path: PathBuf::from(a), weight: 1.0 }),
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = MixtureSpec { entries };
    spec.validate()?;
    Ok(spec)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Reads a trajectory file and adapts it to the model's grid and channels.
fn load_set(path: &Path, weight: f64, model: &ModelConfig) -> Result<TrainingSet> {
    let mut set = read_trajectories(path)?;
    let d = set.dims();
    if [d.h, d.w] != model.grid {
        if model.grid[0] != model.grid[1] {
            return Err(Error::Config(format!(
                "{} is {}x{} and the model grid {:?} is not square",
                path.display(),
                d.h,
                d.w,
                model.grid
            )));
        }
        log::info!("resampling {} from {}x{} to {:?}", path.display(), d.h, d.w, model.grid);
        set = unify_resolution(&set, model.grid[0])?;
    }
    if set.dims().c != model.channels {
        let phys = model.channels - set.mask() as usize;
        set = pad_channels(&set, phys, 0.0, false)?;
        if set.dims().c != model.channels {
            return Err(Error::Config(format!(
                "{} has {} channels, model expects {}",
                path.display(),
                set.dims().c,
                model.channels
            )));
        }
    }
    Ok(TrainingSet::new(dataset_name(path), set, weight))
}

fn load_sets(spec: &MixtureSpec, model: &ModelConfig) -> Result<Vec<TrainingSet>> {
    spec.validate()?;
    let sets = spec.entries.iter().map(|e| load_set(&e.path, e.weight, model)).collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for s in &sets {
        if !seen.insert(s.name.clone()) {
            return Err(Error::Config(format!("two datasets are named {}", s.name)));
        }
    }
    Ok(sets)
}

fn data_or_config(args: &[String], cfg: &RunConfig) -> Result<MixtureSpec> {
    if args.is_empty() {
        Ok(cfg.data.clone())
    } else {
        parse_data_args(args)
    }
}

/// CRC-32 of every parameter value in traversal order.
pub fn params_hash(p: &ModelParams) -> u32 {
    let mut h = crc32fast::Hasher::new();
    p.visit(&mut |_, t| {
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    });
    h.finalize()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen_data(cli: &Cli, cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    if !cli.dry_run {
        create_dir(&cli.out)?;
    }
    for &family in &a.family {
        let mut p = FamilyParams::preset(family, a.n, seed);
        if let Some(t) = a.t_total {
            p.t_total = t;
        }
        if let Some(g) = a.grid {
            p.grid = [g, g];
        }
        if let Some(dt) = a.dt {
            p.dt = dt;
        }
        if let Some(nu) = a.nu {
            p.nu = nu;
        }
        if let Some(d) = a.diffusivity {
            p.diffusivity = d;
        }
        if let Some(v) = &a.velocity {
            p.velocity = [v[0], v[1]];
        }
        p.reaction = !a.no_reaction;
        p.validate()?;
        let path = cli.out.join(format!("{}.mpot", family.name()));
        if !cli.dry_run {
            write_trajectories(&generate(&p)?, &path)?;
        }
        println!(
            "{}\t{}\tN={}\tT_total={}\tH={}\tW={}\tC=1",
            path.display(),
            family.name(),
            p.n_trajectories,
            p.t_total,
            p.grid[0],
            p.grid[1]
        );
    }
    Ok(())
}

fn dry_run_batch(params: &ModelParams, model: &ModelConfig, data: &[TrainingSet], batch: usize) -> Result<()> {
    let mut windows = Vec::new();
    'outer: for (i, d) in data.iter().enumerate() {
        for n in 0..d.split().0 {
            for s in 0..d.set.window_starts(model.t_window) {
                windows.push(d.set.window(n, s, model.t_window, i)?);
                if windows.len() == batch {
                    break 'outer;
                }
            }
        }
    }
    let out = loss_and_grads(&windows, params, model, |_| true)?;
    println!(
        "dry run ok: {} windows, prediction mse {:.6e}, balance {:.6e}",
        windows.len(),
        out.loss.prediction_mse,
        out.loss.balance()
    );
    Ok(())
}

fn save_outcome(out_dir: &Path, ckpt: &Checkpoint, csv: &str) -> Result<()> {
    create_dir(out_dir)?;
    let path = out_dir.join("checkpoint.mpck");
    write_checkpoint(ckpt, &path)?;
    write_file(&out_dir.join("metrics.csv"), csv)?;
    println!("checkpoint {} params-hash {:08x}", path.display(), params_hash(&ckpt.params));
    Ok(())
}

fn cmd_pretrain(cli: &Cli, cfg: &RunConfig, _a: &PretrainArgs) -> Result<()> {
    let data = load_sets(&cfg.data, &cfg.model)?;
    let init = ModelParams::init(&cfg.model, cfg.train.seed)?;
    println!("init params-hash {:08x}", params_hash(&init));
    if cli.dry_run {
        return dry_run_batch(&init, &cfg.model, &data, cfg.train.batch_size);
    }
    let out = pretrain(&data, &cfg.model, &cfg.train)?;
    report_last_metrics(&out.metrics);
    save_outcome(&cli.out, &out.checkpoint, &metrics_csv(&out.metrics))
}

fn report_last_metrics(rows: &[moepot::train::MetricsRow]) {
    if let Some(last) = rows.last() {
        for r in rows.iter().filter(|r| r.epoch == last.epoch) {
            println!("epoch {} {} l2re {:.6}", r.epoch, r.dataset, r.l2re);
        }
    }
}

fn cmd_finetune(cli: &Cli, cfg: &RunConfig, a: &FinetuneArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    if cli.config.is_some() {
        ckpt.ensure_model(&cfg.model)?;
    }
    let data = load_set(&a.dataset, 1.0, &ckpt.model)?;
    if cli.dry_run {
        return dry_run_batch(&ckpt.params, &ckpt.model, std::slice::from_ref(&data), cfg.train.batch_size);
    }
    let train = moepot::train::TrainConfig { phase: Phase::Finetune, ..cfg.train.clone() };
    let out = finetune(&ckpt, &data, &train)?;
    report_last_metrics(&out.metrics);
    save_outcome(&cli.out, &out.checkpoint, &metrics_csv(&out.metrics))
}

/// Drops configured horizons the shortest trajectory cannot reach.
fn fitting_horizons(horizons: &[usize], data: &[TrainingSet], t_window: usize) -> Vec<usize> {
    let reach = data.iter().map(|d| d.set.dims().t_total.saturating_sub(t_window)).min().unwrap_or(0);
    let kept: Vec<usize> = horizons.iter().copied().filter(|&h| h <= reach).collect();
    if kept.len() < horizons.len() {
        log::warn!("dropping rollout horizons beyond {reach} frames");
    }
    kept
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    let data = load_sets(&data_or_config(&a.data, cfg)?, &ckpt.model)?;
    let horizons = match &a.horizons {
        Some(h) => h.clone(),
        None => fitting_horizons(&cfg.eval.horizons, &data, ckpt.model.t_window),
    };
    let opts =
        EvalOptions { horizons, seed: cfg.train.seed, dump_frames: a.dump_frames.unwrap_or(cfg.eval.dump_frames) };
    let report = evaluate(&ckpt.params, &ckpt.model, &data, &opts)?;
    for d in &report.datasets {
        println!("{} one-step l2re {:.6}", d.name, d.one_step_l2re);
    }
    if cli.dry_run {
        return Ok(());
    }
    create_dir(&cli.out)?;
    let path = cli.out.join("eval.csv");
    write_file(&path, &report.to_csv(true))?;
    if opts.dump_frames > 0 {
        let dir = cli.out.join("frames");
        create_dir(&dir)?;
        let files = report.write_frames(&dir)?;
        println!("wrote {} frames to {}", files.len(), dir.display());
    }
    println!("report {}", path.display());
    Ok(())
}

fn cmd_interpret(cli: &Cli, cfg: &RunConfig, a: &InterpretArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    let data = load_sets(&data_or_config(&a.data, cfg)?, &ckpt.model)?;
    let report = interpret(&ckpt.params, &ckpt.model, &data, cfg.train.seed)?;
    if let Some(acc) = &report.accuracy {
        for (b, v) in acc.per_block.iter().enumerate() {
            if cfg.eval.blocks.is_empty() || cfg.eval.blocks.contains(&b) {
                println!("block {b} accuracy {v:.4}");
            }
        }
        println!("all blocks accuracy {:.4}", acc.all_blocks);
    }
    if cli.dry_run {
        return Ok(());
    }
    create_dir(&cli.out)?;
    let path = cli.out.join("interpret.csv");
    write_file(&path, &report.to_csv(false))?;
    println!("report {}", path.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.ckpt).map_err(|e| Error::Io { path: a.ckpt.clone(), source: e })?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let count = count_params(&ckpt.model);
    let tensors: Vec<(String, Vec<usize>)> =
        ckpt.params.leaves().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let hash = params_hash(&ckpt.params);
    if a.json {
        let doc = json!({
            "checkpoint": a.ckpt.display().to_string(),
            "crc": "ok",
            "step": ckpt.step,
            "phase": ckpt.train.phase.name(),
            "params_hash": format!("{hash:08x}"),
            "model": ckpt.model,
            "parameters": {
                "total": count.total,
                "activated": count.activated,
                "per_expert": count.per_expert,
                "activated_expert_fraction": count.activated_expert_fraction,
            },
            "tensors": tensors.iter().map(|(n, s)| json!({ "name": n, "shape": s })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("inspect document serializes"));
        return Ok(());
    }
    println!("checkpoint {}", a.ckpt.display());
    println!("crc ok");
    println!("step {} ({})", ckpt.step, ckpt.train.phase.name());
    println!("params-hash {hash:08x}");
    println!("model {}", serde_json::to_string(&ckpt.model).expect("model config serializes"));
    println!("parameters total {}", count.total);
    println!("parameters activated {}", count.activated);
    println!("parameters per expert {}", count.per_expert);
    println!(
        "activated expert fraction {:.6} ({} of {} experts per MoE layer)",
        count.activated_expert_fraction,
        ckpt.model.n_shared + ckpt.model.top_k,
        ckpt.model.n_shared + ckpt.model.n_routed
    );
    println!("tensors");
    for (n, s) in tensors {
        println!("  {n} {s:?}");
    }
    Ok(())
}
