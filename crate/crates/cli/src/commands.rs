use std::fs;
use std::path::{Path, PathBuf};

use tide_core::checkpoint::{self, load_model, load_session, Checkpointable};
use tide_core::config::KeyValues;
use tide_core::eval::{ablation_csv, consistency_report, depth_metrics_many, miou, summarize, DepthMetrics};
use tide_core::experiment::{self, procedural_dataset};
use tide_core::model::{BaseModel, ModelConfig, TideModel};
use tide_core::nn::gradcheck::grad_check_all;
use tide_core::sample::{batch_synthesize, sample_triple};
use tide_core::scenes::{
    generate_many, read_dataset, read_header, write_dataset, DatasetHeader, DepthRule, Grammar, Quadruple, CATEGORIES,
};
use tide_core::train::{encode_dataset, pretrain_session, finetune_session, EncodedSample, Objective, Session, Stage, TrainConfig};
use tide_core::{Result, TideError};

use crate::{AblateArgs, Command, EvalArgs, EvalCommand, GenDataArgs, GradcheckArgs, PretrainArgs, SampleArgs, SynthesizeArgs, TrainArgs, TrainFlags};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os("TIDE_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("tide-out"));
        root.join(command)
    })
}

/// `N` means seeds `0..N`; `A..B` is taken literally.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || TideError::invalid(format!("--seeds expects N or A..B, got {spec:?}"));
    let (a, b) = match spec.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => (0, spec.trim().parse().map_err(|_| bad())?),
    };
    if a > b {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let seeds = parse_seeds(&a.seeds)?;
    let grammar = Grammar::with_size(a.size);
    let records = generate_many(&seeds, &grammar)?;
    let out = out_dir(a.out, "gen-data");
    let entries = write_dataset(&records, &out, &DatasetHeader::for_grammar(&grammar))?;
    log::info!("wrote {} quadruples to {}", entries.len(), out.display());
    println!("{}\t{}", entries.len(), out.display());
    Ok(())
}

fn load_kv(config: &Option<PathBuf>) -> Result<KeyValues> {
    match config {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::new()),
    }
}

fn set_opt<T: std::fmt::Display>(kv: &mut KeyValues, key: &str, v: Option<T>) {
    if let Some(v) = v {
        kv.set(key, v);
    }
}

fn apply_train_flags(kv: &mut KeyValues, f: &TrainFlags) {
    set_opt(kv, "train.iterations", f.iterations);
    set_opt(kv, "train.batch", f.batch);
    set_opt(kv, "train.lr", f.lr.map(|v| format!("{v:?}")));
    set_opt(kv, "train.weight_decay", f.weight_decay.map(|v| format!("{v:?}")));
    set_opt(kv, "train.seed", f.seed);
    set_opt(kv, "train.timesteps", f.timesteps);
    set_opt(kv, "train.checkpoint_every", f.checkpoint_every);
}

/// Training data for a model with `size`-pixel images.
fn training_data(f: &TrainFlags, size: usize) -> Result<Vec<EncodedSample>> {
    let records: Vec<Quadruple> = match &f.data {
        Some(dir) => read_dataset(dir)?.into_iter().map(|(_, q)| q).collect(),
        None => procedural_dataset(f.scenes, size)?,
    };
    if let Some(q) = records.iter().find(|q| q.mask.dim() != (size, size)) {
        return Err(TideError::invalid(format!("dataset images are {:?}, model expects {size}x{size}", q.mask.dim())));
    }
    encode_dataset(&records)
}

fn run_session<M: Objective + Checkpointable>(mut s: Session<M>, data: &[EncodedSample], out: &Path) -> Result<()> {
    s.run(data, u64::MAX, Some(out))?;
    let last = s.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("{}\t{}\t{last:?}", checkpoint::step_dir(out, s.step).display(), s.step);
    Ok(())
}

fn resumed<M: Objective + Checkpointable>(f: &TrainFlags, out: &Path) -> Result<Session<M>> {
    let mut s = load_session::<M>(out)?;
    if let Some(n) = f.iterations {
        s.config.iterations = n;
    }
    log::info!("resuming {} at step {}", out.display(), s.step);
    Ok(s)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let out = out_dir(a.train.out.clone(), "pretrain");
    if a.train.resume {
        let s = resumed::<BaseModel>(&a.train, &out)?;
        let data = training_data(&a.train, s.model.config.image_size)?;
        return run_session(s, &data, &out);
    }
    let mut kv = load_kv(&a.train.config)?;
    apply_train_flags(&mut kv, &a.train);
    set_opt(&mut kv, "train.mini_iterations", a.mini_iterations);
    set_opt(&mut kv, "model.image_size", a.size);
    set_opt(&mut kv, "model.width", a.width);
    set_opt(&mut kv, "model.image_layers", a.image_layers);
    set_opt(&mut kv, "model.mini_layers", a.mini_layers);
    if let (Some(n), None) = (a.image_layers, kv.get_str("model.share_end")) {
        kv.set("model.share_end", n.saturating_sub(1));
    }
    let mut model_cfg = ModelConfig::default();
    model_cfg.read_from(&kv)?;
    let mut cfg = TrainConfig::default();
    cfg.read_from(&kv)?;
    let data = training_data(&a.train, model_cfg.image_size)?;
    let s = pretrain_session(model_cfg, TrainConfig { stage: Stage::A, ..cfg })?;
    run_session(s, &data, &out)
}

fn train(a: TrainArgs) -> Result<()> {
    let out = out_dir(a.train.out.clone(), "train");
    if a.train.resume {
        let s = resumed::<TideModel>(&a.train, &out)?;
        let data = training_data(&a.train, s.model.config.image_size)?;
        return run_session(s, &data, &out);
    }
    let init = a.init.as_deref().ok_or_else(|| TideError::invalid("--init is required"))?;
    let base = load_model::<BaseModel>(init)?;
    let mut kv = load_kv(&a.train.config)?;
    apply_train_flags(&mut kv, &a.train);
    set_opt(&mut kv, "model.share_start", a.share_start);
    set_opt(&mut kv, "model.share_end", a.share_end);
    set_opt(&mut kv, "model.share_stride", a.share_stride);
    if a.no_ils {
        kv.set("toggles.ils", false);
    }
    if a.no_tan {
        kv.set("toggles.tan", false);
        kv.set("model.tan", false);
    }
    let mut model_cfg = base.config.clone();
    model_cfg.read_from(&kv)?;
    let mut cfg = TrainConfig::default();
    cfg.read_from(&kv)?;
    let data = training_data(&a.train, model_cfg.image_size)?;
    let s = finetune_session(&base, model_cfg, TrainConfig { stage: Stage::B, ..cfg })?;
    run_session(s, &data, &out)
}

/// A stage-B model with the toggles and schedule it was trained with.
fn load_sampler(path: &Path) -> Result<(TideModel, TrainConfig)> {
    let model = load_model::<TideModel>(path)?;
    let kv = checkpoint::read_config(path)?;
    let mut cfg = TrainConfig::default();
    cfg.read_from(&kv)?;
    Ok((model, cfg))
}

fn sample(a: SampleArgs) -> Result<()> {
    let (model, cfg) = load_sampler(&a.checkpoint)?;
    let schedule = cfg.schedule()?;
    let steps = a.steps.unwrap_or(cfg.timesteps);
    let triple = sample_triple(&model, &schedule, &a.caption, steps, a.seed, cfg.toggles)?;
    let out = out_dir(a.out, "sample");
    let header = DatasetHeader::for_grammar(&Grammar::with_size(model.config.image_size));
    let entries = write_dataset([&triple.into_quadruple(&a.caption)], &out, &header)?;
    for e in &entries {
        let crcs: Vec<String> = e.crc32c.iter().map(|(k, v)| format!("{k}={v:08x}")).collect();
        println!("{}\t{}\t{}", out.display(), e.id, crcs.join("\t"));
    }
    Ok(())
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let (model, cfg) = load_sampler(&a.checkpoint)?;
    let text = fs::read_to_string(&a.captions_file).map_err(|e| TideError::io(&a.captions_file, e))?;
    let captions: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let steps = a.steps.unwrap_or(cfg.timesteps);
    let out = out_dir(a.out, "synthesize");
    let entries = batch_synthesize(&model, &cfg.schedule()?, &captions, a.n, a.seed, steps, cfg.toggles, &out)?;
    log::info!("wrote {} triples to {}", entries.len(), out.display());
    println!("{}\t{}", entries.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if let Some(EvalCommand::Consistency { dataset }) = a.sub {
        return eval_consistency(&dataset);
    }
    let (pred, gt) = match (a.pred, a.gt) {
        (Some(p), Some(g)) => (p, g),
        _ => return Err(TideError::invalid("eval needs --pred and --gt (or the consistency subcommand)")),
    };
    let pred = read_dataset(&pred)?;
    let gt = read_dataset(&gt)?;
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(TideError::invalid(format!("{} predictions for {} ground-truth records", pred.len(), gt.len())));
    }
    let depths: Vec<_> = pred
        .iter()
        .zip(&gt)
        .map(|((_, p), (_, g))| (p.depth.mapv(|v| (v as f64).max(DEPTH_FLOOR)), g.depth.mapv(|v| v as f64)))
        .collect();
    let valid: Vec<_> = depths.iter().map(|(_, g)| g.mapv(|v| v > 0.0)).collect();
    let views: Vec<_> = depths.iter().zip(&valid).map(|((p, g), v)| (p.view(), g.view(), Some(v.view()))).collect();
    let metrics = depth_metrics_many(&views, a.median_align, a.pooled)?;
    let mut miou_sum = 0.0;
    for ((_, p), (_, g)) in pred.iter().zip(&gt) {
        miou_sum += miou(p.mask.view(), g.mask.view(), CATEGORIES.len())?.mean;
    }
    println!("{},miou", DepthMetrics::CSV_HEADER);
    println!("{},{:.6}", metrics.csv_row(), miou_sum / pred.len() as f64);
    Ok(())
}

/// Predicted depths are clamped up to this before log-domain metrics.
const DEPTH_FLOOR: f64 = 1e-3;

fn eval_consistency(dataset: &Path) -> Result<()> {
    let rule = read_header(dataset)?.depth_rule;
    let records = read_dataset(dataset)?;
    let reports = records
        .iter()
        .map(|(_, q)| consistency_report(q.image.view(), q.depth.view(), q.mask.view(), &rule))
        .collect::<Result<Vec<_>>>()?;
    let s = summarize(&reports)?;
    println!("mask_image_miou,depth_mask_spearman,samples,undefined_depth");
    println!("{:.6},{:.6},{},{}", s.mask_image, s.depth_mask, s.samples, s.undefined_depth);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = grad_check_all(a.seed, a.tol)?;
    println!("unit,max_rel_err,checked,pass");
    for r in &reports {
        println!("{},{:.3e},{},{}", r.unit, r.max_rel_err, r.checked, r.pass);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.unit.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(TideError::invalid(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    kv.set("train.iterations", a.budget);
    kv.set("train.seed", a.seed);
    let mut cfg = TrainConfig::default();
    cfg.read_from(&kv)?;
    let flags = TrainFlags { data: a.data.clone(), scenes: a.scenes, ..TrainFlags::default() };
    let base = match &a.init {
        Some(p) => load_model::<BaseModel>(p)?,
        None => {
            let mut model_cfg = ModelConfig::default();
            model_cfg.read_from(&kv)?;
            let data = training_data(&flags, model_cfg.image_size)?;
            let stage_a = TrainConfig { iterations: a.pretrain_iterations, mini_iterations: a.pretrain_iterations, ..cfg.clone() };
            experiment::pretrain(model_cfg, stage_a, &data)?
        }
    };
    let mut model_cfg = base.config.clone();
    model_cfg.read_from(&kv)?;
    let data = training_data(&flags, model_cfg.image_size)?;
    let captions: Vec<String> = data.iter().take(a.samples).map(|s| s.caption.clone()).collect();
    let steps = a.steps.unwrap_or(cfg.timesteps);
    let rule = match &a.data {
        Some(dir) => read_header(dir)?.depth_rule,
        None => DepthRule::for_grammar(&Grammar::with_size(model_cfg.image_size)),
    };
    let cfg = TrainConfig { stage: Stage::B, ..cfg };
    let rows = experiment::ablate(&base, &model_cfg, &cfg, &data, &captions, steps, a.seed, &rule)?;
    let csv = ablation_csv(&rows);
    let out = out_dir(a.out, "ablate");
    fs::create_dir_all(&out).map_err(|e| TideError::io(&out, e))?;
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| TideError::io(&path, e))?;
    print!("{csv}");
    Ok(())
}
