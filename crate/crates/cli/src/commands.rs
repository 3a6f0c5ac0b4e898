//! The seven subcommands. Each one consumes its keys from the merged
//! configuration, rejects leftovers, runs, and prints a short summary to
//! stdout. File outputs are a pure function of config + seed, so rerunning a
//! command reproduces them byte for byte.

use std::path::Path;

use vflnet_core::checkpoint::{apply_tensors, load_checkpoint};
use vflnet_core::data::synth::{
    balanced_subset, generate_synthetic, load_corpus, SyntheticSpec,
};
use vflnet_core::data::Split;
use vflnet_core::distill::DistillConfig;
use vflnet_core::eval::{
    evaluate, export_modulator_maps, report_csv, EvalReport, ViewSpec,
};
use vflnet_core::focal::TemporalConvKind;
use vflnet_core::network::{
    build_model, expected_param_count, flop_count, BlockRef, Model, ModelConfig,
};
use vflnet_core::params::ParamStore;
use vflnet_core::train::{
    ablation_csv, ablation_grid, train, write_metrics_csv, PersistSpec, TrainConfig,
};
use vflnet_core::Tensor;

use crate::config::{CliError, RunConfig};

/// Everything a profile pins down; individual keys still override.
struct Profile {
    teacher: ModelConfig,
    student: ModelConfig,
    train_teacher: TrainConfig,
    train_student: TrainConfig,
    synth: SyntheticSpec,
    eval_frames: usize,
    eval_crop: usize,
}

/// "desk" fits the whole pipeline in CPU-minutes; "full" carries the
/// published recipe (batch 8, 120 epochs, 8 frames at 224 after a 20-epoch
/// warmup from lr 1e-3 to 0.1) and is documented rather than CI-run.
fn profile(cfg: &mut RunConfig) -> Result<Profile, CliError> {
    let name = cfg.take_str("profile", "desk");
    match name.as_str() {
        "desk" => Ok(Profile {
            teacher: ModelConfig::desk_teacher(),
            student: ModelConfig::desk_student(),
            train_teacher: TrainConfig::desk_teacher(),
            train_student: TrainConfig::desk_student(),
            synth: SyntheticSpec::desk(),
            eval_frames: 3,
            eval_crop: 32,
        }),
        "full" => {
            let mut teacher = TrainConfig::supervised(120, 8, 8, 224);
            teacher.warmup_epochs = 20;
            let student = teacher.clone();
            Ok(Profile {
                teacher: ModelConfig::teacher(),
                student: ModelConfig::student(),
                train_teacher: teacher,
                train_student: student,
                synth: SyntheticSpec::default(),
                eval_frames: 8,
                eval_crop: 224,
            })
        }
        other => Err(CliError::Config(format!(
            "key 'profile' = {other:?}: expected desk or full"
        ))),
    }
}

/// Preset lookup plus per-field overrides under `prefix`. When the corpus is
/// already known its class count replaces the preset's default, and an
/// explicit `<prefix>.num_classes` still wins.
fn resolve_model(
    cfg: &mut RunConfig,
    prefix: &str,
    default_preset: &str,
    p: &Profile,
    corpus_classes: Option<usize>,
) -> Result<ModelConfig, CliError> {
    let key = |f: &str| format!("{prefix}.{f}");
    let preset = cfg.take_str(&key("preset"), default_preset);
    let mut m = match preset.as_str() {
        "teacher" => p.teacher.clone(),
        "student" => p.student.clone(),
        "desk-teacher" => ModelConfig::desk_teacher(),
        "desk-student" => ModelConfig::desk_student(),
        other => {
            return Err(CliError::Config(format!(
                "key '{}' = {other:?}: expected teacher, student, desk-teacher or desk-student",
                key("preset")
            )))
        }
    };
    if let Some(n) = corpus_classes {
        m.num_classes = n;
    }
    if let Some(v) = cfg.take_usize_opt(&key("num_classes"))? {
        m.num_classes = v;
    }
    if let Some(v) = cfg.take_usize_opt(&key("embed_dim"))? {
        m.embed_dim = v;
    }
    if let Some(v) = cfg.take_usize4_opt(&key("depths"))? {
        m.depths = v;
    }
    if let Some(v) = cfg.take_usize4_opt(&key("focal_levels"))? {
        m.focal_levels = v;
    }
    if let Some(v) = cfg.take_usize4_opt(&key("focal_windows"))? {
        m.focal_windows = v;
    }
    if let Some(v) = cfg.take_usize4_opt(&key("patch_sizes"))? {
        m.patch_sizes = v;
    }
    if let Some(v) = cfg.take_f64_opt(&key("mlp_ratio"))? {
        m.mlp_ratio = v;
    }
    if let Some(v) = cfg.take_f64_opt(&key("drop_path_rate"))? {
        m.drop_path_rate = v;
    }
    if let Some(v) = cfg.take_str_opt(&key("temporal")) {
        m.temporal = match v.as_str() {
            "per-channel" => TemporalConvKind::PerChannel,
            "pointwise" => TemporalConvKind::Pointwise,
            "mixing" => TemporalConvKind::Mixing,
            other => {
                return Err(CliError::Config(format!(
                    "key '{}' = {other:?}: expected per-channel, pointwise or mixing",
                    key("temporal")
                )))
            }
        };
    }
    if let Some(v) = cfg.take_str_opt(&key("out_proj")) {
        m.out_proj = match v.as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(CliError::Config(format!(
                    "key '{}' = {other:?}: expected true or false",
                    key("out_proj")
                )))
            }
        };
    }
    Ok(m)
}

fn resolve_train(cfg: &mut RunConfig, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let mut t = base;
    t.epochs = cfg.take_usize("train.epochs", t.epochs)?;
    t.batch_size = cfg.take_usize("train.batch_size", t.batch_size)?;
    t.frames = cfg.take_usize("train.frames", t.frames)?;
    t.crop = cfg.take_usize("train.crop", t.crop)?;
    if let Some(s) = cfg.take_usize_opt("train.stride")? {
        t.stride = if s == 0 { None } else { Some(s) };
    }
    t.base_lr = cfg.take_f64("train.base_lr", t.base_lr)?;
    t.warmup_lr = cfg.take_f64("train.warmup_lr", t.warmup_lr)?;
    t.min_lr = cfg.take_f64("train.min_lr", t.min_lr)?;
    t.warmup_epochs = cfg.take_usize("train.warmup_epochs", t.warmup_epochs)?;
    t.seed = cfg.take_u64("seed", t.seed)?;
    Ok(t)
}

type Pairs = Vec<(Tensor<f32>, usize)>;

/// Loads a corpus directory into (train, val) pairs plus its class count.
fn load_sets(dir: &Path) -> Result<(Pairs, Pairs, usize), CliError> {
    let all = load_corpus(dir)?;
    if all.is_empty() {
        return Err(CliError::Data(format!(
            "corpus at {} lists no samples",
            dir.display()
        )));
    }
    let classes = all.iter().map(|(e, _)| e.label).max().unwrap_or(0) + 1;
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for (entry, sample) in all {
        let pair = (sample.frames, sample.label);
        match entry.split {
            Split::Train => train_set.push(pair),
            Split::Val => val_set.push(pair),
        }
    }
    Ok((train_set, val_set, classes))
}

fn load_into(
    cfg_model: &ModelConfig,
    path: &Path,
) -> Result<(Model, ParamStore<f32>), CliError> {
    let (model, mut store) = build_model::<f32>(cfg_model, 0)?;
    let loaded = load_checkpoint::<f32>(path, Some(&cfg_model.fingerprint()), false)?;
    apply_tensors(&mut store, &loaded.tensors)?;
    Ok((model, store))
}

fn print_report(rep: &EvalReport) {
    println!("samples: {} views per sample: {}", rep.n_samples, rep.views_per_sample);
    println!("top1: {:.4} top5: {:.4}", rep.top1, rep.top5);
    for (i, (acc, n)) in rep.per_class_top1.iter().zip(&rep.per_class_counts).enumerate() {
        println!("class {i}: top1 {acc:.4} ({n} samples)");
    }
}

pub fn gen_data(mut cfg: RunConfig) -> Result<(), CliError> {
    let p = profile(&mut cfg)?;
    let out = cfg.require_path("out")?;
    let mut spec = p.synth;
    spec.samples_per_class = cfg.take_usize("data.samples_per_class", spec.samples_per_class)?;
    spec.canvas = cfg.take_usize("data.canvas", spec.canvas)?;
    spec.t_raw = cfg.take_usize("data.t_raw", spec.t_raw)?;
    spec.noise = cfg.take_f64("data.noise", spec.noise as f64)? as f32;
    spec.seed = cfg.take_u64("data.seed", spec.seed)?;
    cfg.finish()?;
    let summary = generate_synthetic(&spec, &out)?;
    println!("classes: {}", summary.classes.join(","));
    println!("train: {} val: {}", summary.n_train, summary.n_val);
    println!("checksum: {}", summary.checksum);
    Ok(())
}

/// `train` fits a model on cross-entropy alone; `distill` (with_teacher)
/// additionally loads a frozen teacher checkpoint and blends its softened
/// logits in. The teacher is loaded before any output file is touched, so a
/// bad teacher path leaves nothing half-written.
pub fn fit(mut cfg: RunConfig, with_teacher: bool) -> Result<(), CliError> {
    let p = profile(&mut cfg)?;
    let data_dir = cfg.require_path("data")?;
    let ckpt_out = cfg.require_path("out.checkpoint")?;
    let metrics_out = cfg.take_path_opt("out.metrics");
    let resume = cfg.take_bool("resume", false)?;
    let stop_after = cfg.take_u64_opt("stop_after")?;
    let per_class = cfg.take_usize("data.per_class", 0)?;

    let (train_set, val_set, classes) = load_sets(&data_dir)?;
    let default_preset = if with_teacher { "student" } else { "teacher" };
    let mcfg = resolve_model(&mut cfg, "model", default_preset, &p, Some(classes))?;
    let base = if with_teacher { p.train_student.clone() } else { p.train_teacher.clone() };
    let mut tcfg = resolve_train(&mut cfg, base)?;

    let teacher = if with_teacher {
        let tpath = cfg.require_path("teacher.checkpoint")?;
        tcfg.distill = DistillConfig {
            alpha: cfg.take_f64("alpha", 0.3)?,
            tau: cfg.take_f64("tau", 10.0)?,
        };
        let tmcfg = resolve_model(&mut cfg, "teacher", "teacher", &p, Some(classes))?;
        let (tm, mut ts) = load_into(&tmcfg, &tpath)?;
        ts.freeze();
        Some((tm, ts))
    } else {
        None
    };
    cfg.finish()?;

    let (model, mut store) = build_model::<f32>(&mcfg, tcfg.seed)?;
    let items = if per_class > 0 { balanced_subset(&train_set, per_class) } else { train_set };
    let persist = PersistSpec { path: &ckpt_out, resume, stop_after };
    let rows = train(
        &model,
        &mut store,
        teacher.as_ref().map(|(m, s)| (m, s)),
        &items,
        &tcfg,
        Some(persist),
    )?;
    if let Some(mp) = &metrics_out {
        write_metrics_csv(mp, &rows)?;
    }
    println!("trained {} steps over {} samples", rows.len(), items.len());
    if let Some(last) = rows.last() {
        println!(
            "final loss: {:.6} (kd {:.6} ce {:.6})",
            last.loss_total, last.loss_kd, last.loss_ce
        );
    }
    if !val_set.is_empty() {
        let rep = evaluate(&model, &store, &val_set, &ViewSpec::single(tcfg.frames, tcfg.crop))?;
        println!("val top1: {:.4} top5: {:.4}", rep.top1, rep.top5);
    }
    println!("checkpoint: {}", ckpt_out.display());
    if let Some(mp) = &metrics_out {
        println!("metrics: {}", mp.display());
    }
    Ok(())
}

fn parse_views(cfg: &mut RunConfig) -> Result<(usize, usize), CliError> {
    let text = cfg.take_str("views", "1x1");
    let parsed = text
        .split_once('x')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    match parsed {
        Some((c, r)) if c >= 1 && r >= 1 => Ok((c, r)),
        _ => Err(CliError::Config(format!(
            "key 'views' = {text:?}: expected CLIPSxCROPS like 1x1 or 4x3"
        ))),
    }
}

fn view_spec(cfg: &mut RunConfig, p: &Profile, clips: usize, crops: usize) -> Result<ViewSpec, CliError> {
    let frames = cfg.take_usize("eval.frames", p.eval_frames)?;
    let stride = match cfg.take_usize("eval.stride", 0)? {
        0 => None,
        s => Some(s),
    };
    let crop = cfg.take_usize("eval.crop", p.eval_crop)?;
    Ok(ViewSpec { frames, stride, target: crop, n_clips: clips, n_crops: crops })
}

pub fn eval(mut cfg: RunConfig) -> Result<(), CliError> {
    let p = profile(&mut cfg)?;
    let data_dir = cfg.require_path("data")?;
    let ckpt = cfg.require_path("checkpoint")?;
    let split = cfg.take_str("eval.split", "val");
    let (clips, crops) = parse_views(&mut cfg)?;
    let spec = view_spec(&mut cfg, &p, clips, crops)?;
    let csv_out = cfg.take_path_opt("out.csv");
    let (train_set, val_set, classes) = load_sets(&data_dir)?;
    let mcfg = resolve_model(&mut cfg, "model", "teacher", &p, Some(classes))?;
    cfg.finish()?;

    let items = match split.as_str() {
        "val" => val_set,
        "train" => train_set,
        other => {
            return Err(CliError::Config(format!(
                "key 'eval.split' = {other:?}: expected val or train"
            )))
        }
    };
    if items.is_empty() {
        return Err(CliError::Data(format!("split '{split}' has no samples")));
    }
    let (model, store) = load_into(&mcfg, &ckpt)?;
    let rep = evaluate(&model, &store, &items, &spec)?;
    print_report(&rep);
    if let Some(path) = csv_out {
        std::fs::write(&path, report_csv(&rep)).map_err(|e| CliError::Data(e.to_string()))?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

/// Exports the spatial and temporal modulator heatmaps of one corpus video as
/// PGM files. Without a checkpoint the maps come from a freshly initialized
/// model, which is valid output, just uninformative.
pub fn inspect(mut cfg: RunConfig) -> Result<(), CliError> {
    let p = profile(&mut cfg)?;
    let data_dir = cfg.require_path("data")?;
    let out = cfg.require_path("out")?;
    let index = cfg.take_usize("inspect.index", 0)?;
    let block_text = cfg.take_str("inspect.block", "s2.b0");
    let ckpt = cfg.take_path_opt("checkpoint");
    let seed = cfg.take_u64("seed", 0)?;
    let spec = view_spec(&mut cfg, &p, 1, 1)?;
    let all = load_corpus(&data_dir)?;
    let classes = all.iter().map(|(e, _)| e.label).max().map_or(1, |m| m + 1);
    let mcfg = resolve_model(&mut cfg, "model", "teacher", &p, Some(classes))?;
    cfg.finish()?;

    let Some((entry, sample)) = all.get(index) else {
        return Err(CliError::Data(format!(
            "inspect.index {index} out of range, corpus has {} samples",
            all.len()
        )));
    };
    let block = BlockRef::parse(&block_text)?;
    let (model, store) = match ckpt {
        Some(path) => load_into(&mcfg, &path)?,
        None => build_model::<f32>(&mcfg, seed)?,
    };
    let written = export_modulator_maps(&model, &store, &sample.frames, &spec, block, &out)?;
    println!("sample: {} (label {})", entry.id, entry.label);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn count(mut cfg: RunConfig) -> Result<(), CliError> {
    let preset = cfg.take_str("preset", "both");
    let frames = cfg.take_usize("count.frames", 8)?;
    let height = cfg.take_usize("count.height", 224)?;
    let width = cfg.take_usize("count.width", 224)?;
    let csv = cfg.take_bool("csv", false)?;
    cfg.finish()?;

    let named = |name: &str| -> Result<ModelConfig, CliError> {
        match name {
            "teacher" => Ok(ModelConfig::teacher()),
            "student" => Ok(ModelConfig::student()),
            "desk-teacher" => Ok(ModelConfig::desk_teacher()),
            "desk-student" => Ok(ModelConfig::desk_student()),
            other => Err(CliError::Config(format!(
                "key 'preset' = {other:?}: expected teacher, student, desk-teacher, desk-student or both"
            ))),
        }
    };
    let rows: Vec<(&str, ModelConfig)> = match preset.as_str() {
        "both" => vec![("teacher", named("teacher")?), ("student", named("student")?)],
        name => vec![(name, named(name)?)],
    };
    if csv {
        println!("preset,params,gmacs,gflops");
    }
    for (name, mc) in rows {
        let params = expected_param_count(&mc);
        let cost = flop_count(&mc, frames, height, width)?;
        let gflops = cost.flops() as f64 / 1e9;
        if csv {
            println!("{name},{params},{:.3},{:.3}", cost.gmacs(), gflops);
        } else {
            println!(
                "{name:>13}  {params:>12} params  {:>9.2} GMACs  {:>9.2} GFLOPs  at {frames}x{height}x{width}",
                cost.gmacs(),
                gflops
            );
        }
    }
    Ok(())
}

pub fn ablate(mut cfg: RunConfig) -> Result<(), CliError> {
    let p = profile(&mut cfg)?;
    let data_dir = cfg.require_path("data")?;
    let tpath = cfg.require_path("teacher.checkpoint")?;
    let per_class = cfg.take_usize("data.per_class", 0)?;
    let alphas = cfg.take_f64_list("alphas", &[0.3, 0.5, 0.7])?;
    let taus = cfg.take_f64_list("taus", &[5.0, 10.0, 15.0])?;
    let csv_out = cfg.take_path_opt("out.csv");
    let (train_set, val_set, classes) = load_sets(&data_dir)?;
    let mcfg = resolve_model(&mut cfg, "model", "student", &p, Some(classes))?;
    let tmcfg = resolve_model(&mut cfg, "teacher", "teacher", &p, Some(classes))?;
    let tcfg = resolve_train(&mut cfg, p.train_student.clone())?;
    cfg.finish()?;

    if val_set.is_empty() {
        return Err(CliError::Data("corpus has no validation split to score".into()));
    }
    let (tm, mut ts) = load_into(&tmcfg, &tpath)?;
    ts.freeze();
    let items = if per_class > 0 { balanced_subset(&train_set, per_class) } else { train_set };
    let rows = ablation_grid(&mcfg, (&tm, &ts), &items, &val_set, &tcfg, &alphas, &taus)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(path) = csv_out {
        std::fs::write(&path, &csv).map_err(|e| CliError::Data(e.to_string()))?;
        println!("csv: {}", path.display());
    }
    Ok(())
}
