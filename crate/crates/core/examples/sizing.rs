// scratch calibration runner, not part of the library
use std::time::Instant;
use vflnet_core::checkpoint::{
    apply_tensors, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use vflnet_core::data::synth::{balanced_subset, generate_in_memory, split_sets, SyntheticSpec};
use vflnet_core::distill::DistillConfig;
use vflnet_core::eval::{bbox_hit_rate, evaluate, ViewSpec};
use vflnet_core::focal::TemporalConvKind;
use vflnet_core::network::{build_model, BlockRef, ModelConfig};
use vflnet_core::train::{train, StepMetrics, TrainConfig};

fn env_u(k: &str, d: u64) -> u64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_f(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_s(k: &str, d: &str) -> String {
    std::env::var(k).unwrap_or_else(|_| d.to_string())
}

fn cfg_at(embed: usize) -> ModelConfig {
    // embed 64 -> desk teacher shape, smaller -> student shape at that width
    ModelConfig {
        num_classes: 8,
        in_channels: 3,
        embed_dim: embed,
        depths: if embed >= 32 { [1, 1, 2, 1] } else { [1, 1, 1, 1] },
        focal_levels: [2, 2, 2, 2],
        focal_windows: [3, 3, 3, 3],
        patch_sizes: [4, 2, 2, 2],
        mlp_ratio: if embed >= 32 { env_f("MLP", 4.0) } else { 2.0 },
        drop_path_rate: if embed >= 32 { env_f("DPR", 0.0) } else { 0.0 },
        temporal: TemporalConvKind::Mixing,
        out_proj: true,
    }
}

fn corpus_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_class: env_u("SPC", 30) as usize,
        ..SyntheticSpec::desk()
    }
}

fn epoch_trace(rows: &[StepMetrics], every: u64) {
    let mut cur = u64::MAX;
    let (mut n, mut loss, mut top1) = (0usize, 0.0f64, 0.0f64);
    let mut flush = |ep: u64, n: usize, loss: f64, top1: f64| {
        if n > 0 && ep % every == 0 {
            println!("    ep {ep:3} loss {:.4} top1 {:.3}", loss / n as f64, top1 / n as f64);
        }
    };
    for r in rows {
        if r.epoch != cur {
            flush(cur, n, loss, top1);
            cur = r.epoch;
            n = 0;
            loss = 0.0;
            top1 = 0.0;
        }
        n += 1;
        loss += r.loss_total;
        top1 += r.top1;
    }
    flush(cur, n, loss, top1);
}

fn main() {
    let t_all = Instant::now();
    let samples = generate_in_memory(&corpus_spec()).unwrap();
    let (train_set, val_set) = split_sets(&samples);
    let view = ViewSpec::single(3, 32);
    let mode = env_s("MODE", "teacher");

    match mode.as_str() {
        "teacher" => {
            let embed = env_u("EMBED", 64) as usize;
            let lr = env_f("LR", 0.20);
            let epochs = env_u("EPOCHS", 48) as usize;
            let warm = env_u("WARM", 2) as usize;
            let batch = env_u("BATCH", 16) as usize;
            let seed = env_u("SEED", 1);
            let cfg = cfg_at(embed);
            let (model, mut store) = build_model::<f32>(&cfg, seed).unwrap();
            let mut tc = TrainConfig::supervised(epochs, batch, 3, 32);
            tc.base_lr = lr;
            tc.warmup_lr = lr / 100.0;
            tc.warmup_epochs = warm;
            tc.seed = seed;
            println!(
                "teacher e{embed} {epochs}ep b{batch} lr{lr} (peak {:.4e})",
                tc.schedule(1).peak_lr()
            );
            let rows = train(&model, &mut store, None, &train_set, &tc, None).unwrap();
            epoch_trace(&rows, env_u("EVERY", 4));
            let rep = evaluate(&model, &store, &val_set, &view).unwrap();
            println!("  => val top1 {:.3} top5 {:.3} ({:?})", rep.top1, rep.top5, t_all.elapsed());
            if let Ok(p) = std::env::var("CKPT") {
                let meta = CheckpointMeta { epoch: epochs as u64, fingerprint: cfg.fingerprint() };
                save_checkpoint(std::path::Path::new(&p), &meta, &store, None, None).unwrap();
                println!("  saved {p}");
            }
        }
        "bbox" => {
            let embed = env_u("EMBED", 64) as usize;
            let cfg = cfg_at(embed);
            let (model, mut store) = build_model::<f32>(&cfg, 1).unwrap();
            let p = env_s("CKPT", "/tmp/t64.ckpt");
            let loaded =
                load_checkpoint::<f32>(std::path::Path::new(&p), Some(&cfg.fingerprint()), false)
                    .unwrap();
            apply_tensors(&mut store, &loaded.tensors).unwrap();
            let items: Vec<(
                &vflnet_core::Tensor<f32>,
                &[Option<vflnet_core::data::synth::BBox>],
            )> = samples
                .iter()
                .filter(|s| s.split == vflnet_core::data::Split::Val)
                .map(|s| (&s.sample.frames, s.boxes.as_slice()))
                .collect();
            for sel in ["s0.b0", "s1.b0", "s2.b0", "s2.b1", "s3.b0"] {
                let block = BlockRef::parse(sel).unwrap();
                let (hits, checked) = bbox_hit_rate(&model, &store, &items, &view, block).unwrap();
                println!("  bbox {sel}: {hits}/{checked} = {:.3}", hits as f64 / checked as f64);
            }
        }
        "student" => {
            let per = env_u("PER", 6) as usize;
            let lr = env_f("LR", 0.32);
            let epochs = env_u("EPOCHS", 60) as usize;
            let batch = env_u("BATCH", 8) as usize;
            let alpha = env_f("ALPHA", 0.0);
            let tau = env_f("TAU", 10.0);
            let seed = env_u("SEED", 31);
            let scfg = cfg_at(env_u("EMBED", 16) as usize);
            let (student, mut sstore) = build_model::<f32>(&scfg, seed).unwrap();
            let mut sc = TrainConfig::supervised(epochs, batch, 3, 32);
            sc.base_lr = lr;
            sc.warmup_lr = lr / 100.0;
            sc.warmup_epochs = 2;
            sc.seed = seed;
            sc.distill = DistillConfig { alpha, tau };
            let starved =
                if per == 0 { train_set.clone() } else { balanced_subset(&train_set, per) };
            println!(
                "student per{per} {epochs}ep b{batch} lr{lr} (peak {:.4e}) alpha {alpha} tau {tau} seed {seed} n={}",
                sc.schedule(1).peak_lr(),
                starved.len()
            );
            let loaded_teacher;
            let teacher_pair;
            let teacher_ref = if alpha > 0.0 {
                let tcfg = cfg_at(env_u("TEMBED", 64) as usize);
                let p = env_s("TEACHER", "/tmp/t64.ckpt");
                let (tm, mut ts) = build_model::<f32>(&tcfg, 1).unwrap();
                let loaded = load_checkpoint::<f32>(
                    std::path::Path::new(&p),
                    Some(&tcfg.fingerprint()),
                    false,
                )
                .unwrap();
                apply_tensors(&mut ts, &loaded.tensors).unwrap();
                ts.freeze();
                loaded_teacher = tm;
                teacher_pair = ts;
                Some((&loaded_teacher, &teacher_pair))
            } else {
                None
            };
            let rows = train(&student, &mut sstore, teacher_ref, &starved, &sc, None).unwrap();
            epoch_trace(&rows, env_u("EVERY", 10));
            let rep = evaluate(&student, &sstore, &val_set, &view).unwrap();
            println!("  => val top1 {:.3} top5 {:.3} ({:?})", rep.top1, rep.top5, t_all.elapsed());
        }
        other => panic!("unknown MODE {other}"),
    }
}
