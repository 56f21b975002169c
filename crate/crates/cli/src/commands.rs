use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mspn_core::config::parse_toml_with;
use mspn_core::data::{generate_split, ingest_directory, IngestConfig, MovingDigitsConfig};
use mspn_core::{
    evaluate, latest_checkpoint, load_generator, CopyLastFrame, DType, ExperimentConfig, Mspn, Predictor, Protocol, SequenceDataset,
    Tensor, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::render;
use crate::{usage, Cli, Command, EvalArgs, GenDataArgs, PredictArgs, PredictorKind, RenderArgs, RunArgs, TrainArgs};

const DEFAULT_OUT_ROOT: &str = "runs";

pub fn run(cli: Cli) -> Result<()> {
    let run = cli.run;
    if run.device != "cpu" {
        return Err(usage!("device {:?} is not available; only `cpu` is supported", run.device));
    }
    match cli.command {
        Command::GenData(a) => gen_data(&run, &a),
        Command::Train(a) => train(&run, &a),
        Command::Eval(a) => eval(&run, &a),
        Command::Predict(a) => predict(&run, &a),
        Command::Render(a) => render_cmd(&run, &a),
    }
}

fn out_dir(run: &RunArgs, command: &str) -> Result<PathBuf> {
    let dir = match (&run.out, &run.out_root) {
        (Some(o), _) => o.clone(),
        (None, Some(root)) => root.join(command),
        (None, None) => Path::new(DEFAULT_OUT_ROOT).join(command),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(usage!("config file {} does not exist", path.display()));
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn overrides_with_seed(run: &RunArgs) -> Vec<String> {
    let mut o = run.overrides.clone();
    if let Some(s) = run.seed {
        o.push(format!("seed={s}"));
    }
    o
}

fn experiment_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let text = match &run.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    Ok(ExperimentConfig::from_toml_with(&text, &overrides_with_seed(run))?)
}

/// Records how the run was invoked and the configuration it resolved to.
fn write_snapshot(out: &Path, command: &str, run: &RunArgs, resolved_toml: &str) -> Result<()> {
    std::fs::write(out.join("resolved_config.toml"), resolved_toml)?;
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": run.config,
        "overrides": run.overrides,
        "seed": run.seed,
        "checkpoint": run.checkpoint,
        "device": run.device,
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn load_dataset(path: &Path, what: &str) -> Result<SequenceDataset> {
    if !path.is_file() {
        return Err(usage!(
            "{what} dataset {} does not exist; create it with `mspn gen-data`",
            path.display()
        ));
    }
    SequenceDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn required_checkpoint(run: &RunArgs) -> Result<&Path> {
    let p = run
        .checkpoint
        .as_deref()
        .ok_or_else(|| usage!("--checkpoint is required"))?;
    if !p.is_file() {
        return Err(usage!("checkpoint {} does not exist", p.display()));
    }
    Ok(p)
}

/// Generator and configuration of a checkpoint. A `--config` file supplies the `data`
/// section; overrides apply last. Network settings always come from the checkpoint.
fn checkpoint_model(run: &RunArgs) -> Result<(ExperimentConfig, Mspn)> {
    let path = required_checkpoint(run)?;
    let (mut cfg, model, _) = load_generator(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(p) = &run.config {
        cfg.data = ExperimentConfig::from_toml(&read_text(p)?)?.data;
    }
    let cfg = ExperimentConfig::from_toml_with(&cfg.to_toml()?, &overrides_with_seed(run))?;
    if &cfg.network != model.config() {
        return Err(usage!("network settings come from the checkpoint and cannot be overridden"));
    }
    Ok((cfg, model))
}

fn test_data_path(arg: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| usage!("no test dataset: pass --data or set data.test"))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    /// Synthetic test sequences, generated from a disjoint random stream.
    test_count: Option<usize>,
    synthetic: MovingDigitsConfig,
    ingest: IngestConfig,
}

fn gen_data(run: &RunArgs, args: &GenDataArgs) -> Result<()> {
    let text = match &run.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut cfg: GenDataConfig = parse_toml_with(&text, &run.overrides)?;
    if let Some(s) = run.seed {
        cfg.synthetic.seed = s;
        cfg.ingest.seed = s;
    }
    let out = out_dir(run, "gen-data")?;
    let (train, test, manifest) = match &args.from_dir {
        Some(root) => {
            if !root.is_dir() {
                return Err(usage!("{} is not a directory", root.display()));
            }
            let o = ingest_directory(root, &cfg.ingest)?;
            (o.train, o.test, o.manifest)
        }
        None => {
            let test_count = *cfg.test_count.get_or_insert(200);
            generate_split(&cfg.synthetic, test_count)?
        }
    };
    write_snapshot(&out, "gen-data", run, &toml_string(&cfg)?)?;
    train.save(&out.join("train.safetensors"))?;
    test.save(&out.join("test.safetensors"))?;
    manifest.write(&out.join("split.json"))?;
    let (h, w) = train.frame_size();
    println!(
        "wrote {} train and {} test sequences of {} frames at {h}x{w} to {}",
        train.len(),
        test.len(),
        train.seq_len(),
        out.display()
    );
    Ok(())
}

fn toml_string<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string_pretty(v).context("serializing configuration")
}

fn train(run: &RunArgs, args: &TrainArgs) -> Result<()> {
    let out = out_dir(run, "train")?;
    let resume_from = if args.resume {
        let dir = out.join("checkpoints");
        let p = latest_checkpoint(&dir).ok_or_else(|| usage!("nothing to resume in {}", dir.display()))?;
        Some(p)
    } else {
        run.checkpoint.clone()
    };
    let (mut trainer, data) = match resume_from {
        Some(p) => {
            if !p.is_file() {
                return Err(usage!("checkpoint {} does not exist", p.display()));
            }
            let t = Trainer::resume(&p, &out).with_context(|| format!("resuming from {}", p.display()))?;
            let given = match &run.config {
                Some(_) => experiment_config(run)?,
                None => ExperimentConfig::from_toml_with(&t.config().to_toml()?, &overrides_with_seed(run))?,
            };
            if given.fingerprint() != t.config().fingerprint() {
                return Err(usage!(
                    "configuration differs from the checkpoint's (fingerprint {} vs {})",
                    given.fingerprint(),
                    t.config().fingerprint()
                ));
            }
            let data = given.data;
            log::info!("resuming at epoch {} step {}", t.epoch(), t.global_step());
            (t, data)
        }
        None => {
            let cfg = experiment_config(run)?;
            let data = cfg.data.clone();
            (Trainer::new(cfg, &out)?, data)
        }
    };
    let train_path = data
        .train
        .as_deref()
        .ok_or_else(|| usage!("data.train is not set; pass --override data.train=PATH (see `mspn gen-data`)"))?;
    let train_set = load_dataset(train_path, "training")?;
    let test_set = data.test.as_deref().map(|p| load_dataset(p, "test")).transpose()?;
    let mut resolved = trainer.config().clone();
    resolved.data = data.clone();
    write_snapshot(&out, "train", run, &resolved.to_toml()?)?;

    let summary = trainer.train(&train_set, test_set.as_ref())?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} epochs ({} batches, {} phase switches, {} guard trips)",
        summary.epochs, summary.global_step, summary.switches, summary.guard_trips
    );
    if let Some(s) = summary.snapshots.last() {
        println!("last evaluation: ssim {:.4} mse {:.5}", s.mean_ssim, s.mean_mse);
    }
    if let Some(c) = &summary.last_checkpoint {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

fn eval(run: &RunArgs, args: &EvalArgs) -> Result<()> {
    let (cfg, model) = match args.predictor {
        PredictorKind::Mspn => {
            let (c, m) = checkpoint_model(run)?;
            (c, Some(m))
        }
        PredictorKind::CopyLast => (experiment_config(run)?, None),
    };
    let data = load_dataset(&test_data_path(&args.data, &cfg)?, "test")?;
    let out = out_dir(run, "eval")?;
    write_snapshot(&out, "eval", run, &cfg.to_toml()?)?;
    let protocol = Protocol {
        context: cfg.data.context,
        horizon: cfg.data.horizon,
        batch_size: args.batch_size.max(1),
    };
    let predictor: &dyn Predictor = match &model {
        Some(m) => m,
        None => &CopyLastFrame,
    };
    let fingerprint = if model.is_some() { cfg.fingerprint() } else { String::new() };
    let report = evaluate(predictor, &data, protocol, &[], &fingerprint)?;
    let path = out.join("report.jsonl");
    report.write(&path)?;
    let psnr = match (report.mean.psnr, report.mean.psnr_infinite) {
        (_, true) => "inf".to_string(),
        (Some(p), _) => format!("{p:.3}"),
        (None, false) => "n/a".to_string(),
    };
    println!(
        "{}: {} sequences, ssim {:.4} mse {:.5} psnr {psnr}",
        report.predictor,
        report.sequences,
        report.mean_ssim(),
        report.mean_mse()
    );
    for s in &report.per_step {
        println!("  step {:2}: ssim {:.4} mse {:.5}", s.step, s.ssim, s.mse);
    }
    println!("report: {}", path.display());
    Ok(())
}

fn select_ids(data: &SequenceDataset, ids: &[String]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok((0..data.len()).collect());
    }
    ids.iter()
        .map(|id| data.index_of(id).ok_or_else(|| usage!("no sequence with id {id:?}")))
        .collect()
}

fn check_length(data: &SequenceDataset, context: usize, horizon: usize) -> Result<()> {
    if data.seq_len() < context + horizon {
        return Err(usage!(
            "sequences have {} frames; context {context} plus horizon {horizon} do not fit",
            data.seq_len()
        ));
    }
    Ok(())
}

fn predict(run: &RunArgs, args: &PredictArgs) -> Result<()> {
    let (cfg, model) = checkpoint_model(run)?;
    let data = load_dataset(&test_data_path(&args.data, &cfg)?, "input")?;
    let (ctx, hor) = (cfg.data.context, cfg.data.horizon);
    check_length(&data, ctx, hor)?;
    let indices = select_ids(&data, &args.ids)?;
    let out = out_dir(run, "predict")?;
    write_snapshot(&out, "predict", run, &cfg.to_toml()?)?;

    let mut parts = Vec::new();
    for chunk in indices.chunks(args.batch_size.max(1)) {
        let frames = data.batch(chunk, DType::F32)?;
        let preds = model.predict(&frames, ctx, hor)?;
        parts.push(Tensor::stack(&preds, 1)?);
    }
    let all = Tensor::cat(&parts, 0)?;
    let shape = all.dims().to_vec();
    let values: Vec<f32> = all.flatten_all()?.to_vec1()?;
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let ids: Vec<&str> = indices.iter().map(|&i| data.ids()[i].as_str()).collect();
    let mut meta = HashMap::new();
    meta.insert("ids".to_string(), serde_json::to_string(&ids)?);
    meta.insert("context".to_string(), ctx.to_string());
    meta.insert("horizon".to_string(), hor.to_string());
    let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape, &bytes)?;
    let path = out.join("predictions.safetensors");
    safetensors::serialize_to_file([("predictions", view)], Some(meta), &path)?;
    println!("wrote {} predicted sequences of {hor} frames to {}", ids.len(), path.display());
    Ok(())
}

fn render_cmd(run: &RunArgs, args: &RenderArgs) -> Result<()> {
    let (cfg, model) = checkpoint_model(run)?;
    let data = load_dataset(&test_data_path(&args.data, &cfg)?, "input")?;
    let ctx = cfg.data.context;
    let hor = args.horizon.unwrap_or(cfg.data.horizon);
    if hor == 0 {
        return Err(usage!("horizon must be at least 1"));
    }
    check_length(&data, ctx, hor)?;
    let index = match &args.id {
        Some(id) => select_ids(&data, std::slice::from_ref(id))?[0],
        None => 0,
    };
    let id = &data.ids()[index];
    let out = out_dir(run, "render")?;
    let mut resolved = cfg.clone();
    resolved.data.horizon = hor;
    write_snapshot(&out, "render", run, &resolved.to_toml()?)?;

    let frames = data.batch(&[index], DType::F32)?;
    let preds = model.predict(&frames, ctx, hor)?;
    let (h, w) = data.frame_size();
    let truth: Vec<Vec<f32>> = (0..hor)
        .map(|k| -> mspn_core::Result<Vec<f32>> { Ok(frames.get(0)?.get(ctx + k)?.flatten_all()?.to_vec1()?) })
        .collect::<mspn_core::Result<_>>()?;
    let predicted: Vec<Vec<f32>> = preds
        .iter()
        .map(|p| -> mspn_core::Result<Vec<f32>> { Ok(p.get(0)?.flatten_all()?.to_vec1()?) })
        .collect::<mspn_core::Result<_>>()?;
    let stem = format!("render_{}", render::file_stem(id));
    let grid = render::frame_grid(&[truth.clone(), predicted.clone()], h, w);
    let png = out.join(format!("{stem}.png"));
    grid.save(&png).with_context(|| format!("writing {}", png.display()))?;
    let gif = out.join(format!("{stem}.gif"));
    render::write_animation(&gif, &truth, &predicted, h, w)?;
    println!("rendered {id}: {} and {}", png.display(), gif.display());
    Ok(())
}

