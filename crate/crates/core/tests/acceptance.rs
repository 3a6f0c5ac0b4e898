//! End-to-end acceptance gates. Each test prints one summary line so a full
//! run reads as a ten-point checklist; numeric tolerances are pinned inline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use vflnet_core::check::{fd_gradient, max_rel_err, run_op_gradient_suite};
use vflnet_core::data::sampling::multi_crop_views;
use vflnet_core::data::synth::{balanced_subset, generate_in_memory, split_sets, SyntheticSpec};
use vflnet_core::data::Split;
use vflnet_core::distill::{
    ce_loss_value, entropy, kd_loss_value, soften, total_loss_value, DistillConfig, DistillTape,
};
use vflnet_core::eval::{
    bbox_hit_rate, evaluate, multi_view_probs, read_pgm, view_logits, ViewSpec,
};
use vflnet_core::focal::{
    reference_modulation_naive, FocalConfig, FocalLayer, TemporalConvKind, NAIVE_MAX_C,
    NAIVE_MAX_HW, NAIVE_MAX_T,
};
use vflnet_core::network::{build_model, expected_param_count, flop_count, BlockRef, ModelConfig};
use vflnet_core::optim::ScheduleSpec;
use vflnet_core::params::{param_grads, ParamStore};
use vflnet_core::tensor::Tape;
use vflnet_core::train::{train, TrainConfig};
use vflnet_core::Tensor;

fn pass(n: usize, detail: impl AsRef<str>) {
    println!("criterion {n:2}: pass - {}", detail.as_ref());
}

#[test]
fn criterion_01_parameter_anchors() {
    let cases = [("teacher", ModelConfig::teacher(), 157e6), ("student", ModelConfig::student(), 22e6)];
    let mut got = Vec::new();
    for (name, cfg, anchor) in cases {
        let n = expected_param_count(&cfg) as f64;
        let rel = (n - anchor).abs() / anchor;
        assert!(rel < 0.15, "{name} params {n:.0} off anchor {anchor:.0} by {rel:.3}");
        got.push(format!("{name} {:.3}M ({:.1}% of {:.0}M)", n / 1e6, rel * 100.0, anchor / 1e6));
    }
    // The closed form must agree with an actually built store at desk width.
    let cfg = ModelConfig::desk_teacher();
    let (_, store) = build_model::<f32>(&cfg, 1).unwrap();
    assert_eq!(store.count(), expected_param_count(&cfg));
    pass(1, format!("params within 15%: {}", got.join(", ")));
}

#[test]
fn criterion_02_compute_anchors() {
    let cases = [("teacher", ModelConfig::teacher(), 220e9), ("student", ModelConfig::student(), 27e9)];
    let mut got = Vec::new();
    for (name, cfg, anchor) in cases {
        let report = flop_count(&cfg, 8, 224, 224).unwrap();
        let macs = report.macs as f64;
        let rel = (macs - anchor).abs() / anchor;
        assert!(rel < 0.25, "{name} macs {macs:.3e} off anchor {anchor:.0} by {rel:.3}");
        got.push(format!("{name} {:.2}G ({:.1}% of anchor)", macs / 1e9, rel * 100.0));
    }
    pass(2, format!("analytic MACs at 8x224x224 within 25%: {}", got.join(", ")));
}

#[test]
fn criterion_03_forward_matches_naive_reference() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t = rng.gen_range(1..=NAIVE_MAX_T);
        let h = rng.gen_range(1..=NAIVE_MAX_HW);
        let w = rng.gen_range(1..=NAIVE_MAX_HW);
        let c = rng.gen_range(1..=NAIVE_MAX_C);
        let levels = rng.gen_range(1..=2);
        let temporal = match seed % 3 {
            0 => TemporalConvKind::PerChannel,
            1 => TemporalConvKind::Pointwise,
            _ => TemporalConvKind::Mixing,
        };
        let cfg = FocalConfig { channels: c, levels, window: 3, temporal, out_proj: seed % 2 == 0 };
        let mut store = ParamStore::<f64>::new();
        let layer = FocalLayer::build(&mut store, "probe", cfg, &mut rng).unwrap();
        let n = t * h * w * c;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![t, h, w, c], data).unwrap();
        let expect = reference_modulation_naive(&layer, &store, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = layer.forward(&mut tape, &store, xv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "naive reference disagrees, max abs diff {worst:.3e}");
    pass(3, format!("50 seeded layer configs vs naive loops, max abs diff {worst:.1e} < 1e-5"));
}

fn focal_layer_fd_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FocalConfig {
        channels: 4,
        levels: 2,
        window: 3,
        temporal: TemporalConvKind::Mixing,
        out_proj: true,
    };
    let mut store = ParamStore::<f32>::new();
    let layer = FocalLayer::build(&mut store, "g", cfg, &mut rng).unwrap();
    let n = 2 * 3 * 3 * 4;
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![2, 3, 3, 4], data).unwrap();
    let weights: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0) / n as f32).collect();

    let scalar = |store: &ParamStore<f32>, input: &Tensor<f32>| -> f32 {
        let mut tape = Tape::new();
        let xv = tape.constant(input.clone());
        let y = layer.forward(&mut tape, store, xv).unwrap();
        let wv = tape.constant(Tensor::new(vec![2, 3, 3, 4], weights.clone()).unwrap());
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod);
        tape.value(loss).data()[0]
    };

    // analytic pass with the input and all parameters as tracked leaves
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = layer.forward(&mut tape, &store, xv).unwrap();
    let wv = tape.constant(Tensor::new(vec![2, 3, 3, 4], weights.clone()).unwrap());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;

    let gx = grads.get(xv).unwrap();
    let fd = fd_gradient(
        |vals: &[f32]| scalar(&store, &Tensor::new(vec![2, 3, 3, 4], vals.to_vec()).unwrap()),
        x.data(),
        1e-3,
    );
    worst = worst.max(max_rel_err(gx, &fd));

    for (id, g) in param_grads(&tape, &grads) {
        let base = store.get(id).value.clone();
        let mut probe_store = store.clone();
        let fd = fd_gradient(
            |vals: &[f32]| {
                probe_store.get_mut(id).value =
                    Tensor::new(base.shape().to_vec(), vals.to_vec()).unwrap();
                scalar(&probe_store, &x)
            },
            base.data(),
            1e-3,
        );
        worst = worst.max(max_rel_err(g, &fd));
    }
    worst
}

#[test]
fn criterion_04_gradient_suite() {
    for seed in 0..20u64 {
        run_op_gradient_suite::<f32>(seed);
        run_op_gradient_suite::<f64>(seed);
    }

    let mut layer_worst = 0.0f64;
    for seed in 0..20u64 {
        layer_worst = layer_worst.max(focal_layer_fd_worst(7 + seed));
    }
    assert!(layer_worst < 1e-3, "focal layer fd err {layer_worst:.3e}");

    // Losses in f64 against central differences on the student logits.
    let mut loss_worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let k = rng.gen_range(2..8);
        let tl: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sl: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let teacher = Tensor::new(vec![k], tl.clone()).unwrap();
        let cfg = DistillConfig { alpha: 0.3, tau: rng.gen_range(1.0..12.0) };
        let label = rng.gen_range(0..k);
        for which in 0..3 {
            let eval = |vals: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let s = tape.leaf(Tensor::new(vec![k], vals.to_vec()).unwrap(), true);
                let v = match which {
                    0 => DistillTape::kd_loss(&mut tape, &teacher, s, &cfg).unwrap(),
                    1 => DistillTape::ce_loss(&mut tape, s, label).unwrap(),
                    _ => DistillTape::total_loss(&mut tape, &teacher, s, label, &cfg).unwrap().0,
                };
                tape.value(v).data()[0]
            };
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::new(vec![k], sl.clone()).unwrap(), true);
            let v = match which {
                0 => DistillTape::kd_loss(&mut tape, &teacher, s, &cfg).unwrap(),
                1 => DistillTape::ce_loss(&mut tape, s, label).unwrap(),
                _ => DistillTape::total_loss(&mut tape, &teacher, s, label, &cfg).unwrap().0,
            };
            let grads = tape.backward(v).unwrap();
            let fd = fd_gradient(eval, &sl, 1e-6);
            loss_worst = loss_worst.max(max_rel_err(grads.get(s).unwrap(), &fd));
        }
    }
    assert!(loss_worst < 1e-4, "loss fd err {loss_worst:.3e}");
    pass(
        4,
        format!(
            "20-seed fd checks: all ops f32+f64; focal layer worst {layer_worst:.1e} < 1e-3; losses worst {loss_worst:.1e} < 1e-4"
        ),
    );
}

#[test]
fn criterion_05_loss_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // kd >= 0 and zero exactly on identical logits.
    for _ in 0..200 {
        let k = rng.gen_range(2..9);
        let t: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cfg = DistillConfig { alpha: 0.5, tau: rng.gen_range(0.5..15.0) };
        let kd = kd_loss_value(&t, &s, &cfg).unwrap();
        assert!(kd >= -1e-12, "kd negative: {kd}");
        let same = kd_loss_value(&t, &t, &cfg).unwrap();
        assert!(same.abs() < 1e-12, "kd({{x}},{{x}}) = {same}");
        // shift invariance under independent per-sample offsets
        let (a, b) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let ts: Vec<f64> = t.iter().map(|v| v + a).collect();
        let ss: Vec<f64> = s.iter().map(|v| v + b).collect();
        let shifted = kd_loss_value(&ts, &ss, &cfg).unwrap();
        assert!((kd - shifted).abs() < 1e-9, "shift changed kd: {kd} vs {shifted}");
    }
    // exact blend endpoints
    let t = [1.0, -0.5, 2.0];
    let s = [0.3, 0.8, -1.0];
    let cfg0 = DistillConfig { alpha: 0.0, tau: 4.0 };
    let cfg1 = DistillConfig { alpha: 1.0, tau: 4.0 };
    let ce = ce_loss_value(&s, 2).unwrap();
    let kd = kd_loss_value(&t, &s, &cfg1).unwrap();
    assert_eq!(total_loss_value(&t, &s, 2, &cfg0).unwrap().total, ce);
    assert_eq!(total_loss_value(&t, &s, 2, &cfg1).unwrap().total, kd);
    // entropy monotone in tau
    let logits = [2.0, 0.0, -1.0, 0.5];
    let mut last = -1.0;
    for tau in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
        let h = entropy(&soften(&logits, tau).unwrap());
        assert!(h >= last - 1e-12, "entropy dropped at tau {tau}: {h} < {last}");
        last = h;
    }
    // The teacher enters kd as plain data: even a trainable leaf holding the
    // same values stays disconnected from the loss graph.
    let mut tape = Tape::<f64>::new();
    let teacher = Tensor::new(vec![3], t.to_vec()).unwrap();
    let teacher_leaf = tape.leaf(teacher.clone(), true);
    let sv = tape.leaf(Tensor::new(vec![3], s.to_vec()).unwrap(), true);
    let kd_node = DistillTape::kd_loss(&mut tape, &teacher, sv, &cfg1).unwrap();
    let grads = tape.backward(kd_node).unwrap();
    assert!(grads.get(sv).is_some(), "student must receive a gradient");
    assert!(grads.get(teacher_leaf).is_none(), "teacher must not receive a gradient");
    pass(5, "kd nonnegative/zero-at-equality/shift-invariant; blend endpoints exact; entropy monotone in tau; teacher gradient-free");
}

#[test]
fn criterion_06_schedule_anchors() {
    let spec = ScheduleSpec::new(8, 100, 1000);
    let start = spec.lr_at(0);
    assert!((start - 1.5625e-5).abs() < 1e-18, "start lr {start}");
    let peak = spec.lr_at(100);
    assert!((peak - 1.5625e-3).abs() < 1e-18, "peak lr {peak}");
    // junction continuity: the linear ramp extrapolated to the boundary step
    // meets the cosine value there
    let linear_at_junction = start + (peak - start) * 1.0;
    assert!((spec.lr_at(100) - linear_at_junction).abs() < 1e-12, "junction discontinuous");
    let before = spec.lr_at(99);
    let linear_slope = (peak - start) / 100.0;
    assert!((peak - before - linear_slope).abs() < 1e-12, "warmup not linear to the junction");
    let last = spec.lr_at(1000);
    assert!(last < 1e-12, "schedule-end lr {last}");
    for step in 0..1000 {
        let a = spec.lr_at(step);
        let b = spec.lr_at(step + 1);
        if step < 100 {
            assert!(b > a, "warmup must rise at step {step}");
        } else {
            assert!(b <= a + 1e-15, "cosine must not rise at step {step}");
        }
    }
    pass(6, "batch-8 anchors: lr(0)=1.5625e-5, lr(warmup end)=1.5625e-3, lr(final)<1e-12, junction continuous");
}

#[test]
fn criterion_07_desk_distillation() {
    let t0 = Instant::now();
    let spec = SyntheticSpec::desk();
    let samples = generate_in_memory(&spec).unwrap();
    let (train_set, val_set) = split_sets(&samples);

    let (teacher, mut tstore) = build_model::<f32>(&ModelConfig::desk_teacher(), 1).unwrap();
    let tc = TrainConfig::desk_teacher();
    let view = ViewSpec::single(tc.frames, tc.crop);
    train(&teacher, &mut tstore, None, &train_set, &tc, None).unwrap();
    let trep = evaluate(&teacher, &tstore, &val_set, &view).unwrap();
    assert!(
        trep.top1 >= 0.90,
        "teacher val top1 {:.3} below the 0.90 gate",
        trep.top1
    );

    // Spatial modulator attends the sprite: argmax cell inside the true box.
    let items: Vec<(&Tensor<f32>, &[Option<vflnet_core::data::synth::BBox>])> = samples
        .iter()
        .filter(|s| s.split == Split::Val)
        .map(|s| (&s.sample.frames, s.boxes.as_slice()))
        .collect();
    let block = BlockRef::parse("s1.b0").unwrap();
    let (hits, checked) = bbox_hit_rate(&teacher, &tstore, &items, &view, block).unwrap();
    let hit_rate = hits as f64 / checked as f64;
    assert!(hit_rate >= 0.70, "modulator bbox hit rate {hit_rate:.3} below 0.70");

    tstore.freeze();
    let starved = balanced_subset(&train_set, 6);
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in [31u64, 32] {
        let mut top1 = Vec::new();
        for alpha in [0.0f64, 0.3] {
            let (student, mut sstore) = build_model::<f32>(&ModelConfig::desk_student(), seed).unwrap();
            let mut sc = TrainConfig::desk_student();
            sc.seed = seed;
            sc.distill = DistillConfig { alpha, tau: 10.0 };
            let teacher_ref = if alpha > 0.0 { Some((&teacher, &tstore)) } else { None };
            train(&student, &mut sstore, teacher_ref, &starved, &sc, None).unwrap();
            let rep = evaluate(&student, &sstore, &val_set, &view).unwrap();
            top1.push(rep.top1);
        }
        gaps.push(top1[1] - top1[0]);
        detail.push(format!("seed {seed}: {:.3} -> {:.3}", top1[0], top1[1]));
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap >= 0.02,
        "distillation gap {mean_gap:.3} below 2 points ({})",
        detail.join("; ")
    );
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs <= 1800.0, "experiment took {secs:.0}s, budget 1800s");
    pass(
        7,
        format!(
            "teacher val {:.3} (>=0.90); modulator-in-box {:.2} (>=0.70); kd gap {:+.3} (>= +0.02, {}); {secs:.0}s of 1800s",
            trep.top1, hit_rate, mean_gap, detail.join("; ")
        ),
    );
}

#[test]
fn criterion_08_multi_view_identities() {
    let spec = SyntheticSpec { samples_per_class: 2, ..SyntheticSpec::desk() };
    let samples = generate_in_memory(&spec).unwrap();
    let video = &samples[5].sample.frames;
    let (model, store) = build_model::<f32>(&ModelConfig::desk_student(), 9).unwrap();

    // (1,1) bit-equals a single forward of the eval view.
    let single = ViewSpec::single(3, 32);
    let p11 = multi_view_probs(&model, &store, video, &single).unwrap();
    let view = multi_crop_views(video, 3, None, 32, 1, 1).unwrap().pop().unwrap();
    let logits = view_logits(&model, &store, &view).unwrap();
    let direct = soften(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>(), 1.0).unwrap();
    assert_eq!(p11, direct, "(1,1) must be bit-identical to the single forward");

    // (4,3) equals the independent mean of the 12 per-view distributions.
    let multi = ViewSpec { frames: 3, stride: None, target: 32, n_clips: 4, n_crops: 3 };
    let views = multi_crop_views(video, 3, None, 32, 4, 3).unwrap();
    assert_eq!(views.len(), 12);
    let averaged = multi_view_probs(&model, &store, video, &multi).unwrap();
    let k = averaged.len();
    let mut manual = vec![0.0f64; k];
    for v in &views {
        let l = view_logits(&model, &store, v).unwrap();
        let p = soften(&l.iter().map(|&x| x as f64).collect::<Vec<_>>(), 1.0).unwrap();
        for (m, q) in manual.iter_mut().zip(p) {
            *m += q / 12.0;
        }
    }
    let worst = averaged
        .iter()
        .zip(&manual)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-12, "12-view mean mismatch {worst:.3e}");
    pass(8, format!("(1,1) bit-equal to single forward; (4,3) equals independent 12-view mean (diff {worst:.1e})"));
}

#[test]
fn criterion_09_determinism_and_formats() {
    let dir = tempfile::tempdir().unwrap();

    // Corpus generation twice: byte-identical checksums.
    let spec = SyntheticSpec { samples_per_class: 3, ..SyntheticSpec::desk() };
    let a = vflnet_core::data::synth::generate_synthetic(&spec, &dir.path().join("a")).unwrap();
    let b = vflnet_core::data::synth::generate_synthetic(&spec, &dir.path().join("b")).unwrap();
    assert_eq!(a.checksum, b.checksum, "corpus checksum differs between runs");

    // .vtr round trip, bit exact.
    let made = generate_in_memory(&spec).unwrap();
    let sample = &made[7].sample;
    let bytes = vflnet_core::data::vtr::encode_bytes(sample).unwrap();
    let (frames, label) = vflnet_core::data::vtr::decode_bytes(&bytes, "mem").unwrap();
    assert_eq!(frames.data(), sample.frames.data());
    assert_eq!(label, sample.label);

    // End-to-end reduced desk run twice: metrics, weights and checkpoint
    // bytes all identical.
    let (train_set, _) = split_sets(&made);
    let run = |tag: &str| {
        let (model, mut store) = build_model::<f32>(&ModelConfig::desk_student(), 3).unwrap();
        let mut tc = TrainConfig::desk_student();
        tc.epochs = 3;
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let rows = train(
            &model,
            &mut store,
            None,
            &train_set,
            &tc,
            Some(vflnet_core::train::PersistSpec { path: &ckpt, resume: false, stop_after: None }),
        )
        .unwrap();
        (vflnet_core::train::metrics_csv(&rows), store.value_checksum(), std::fs::read(ckpt).unwrap())
    };
    let (csv1, sum1, ckpt1) = run("r1");
    let (csv2, sum2, ckpt2) = run("r2");
    assert_eq!(csv1, csv2, "metrics differ between identical runs");
    assert_eq!(sum1.to_bits(), sum2.to_bits(), "weights differ between identical runs");
    assert_eq!(ckpt1, ckpt2, "checkpoint bytes differ between identical runs");

    // Checkpoint round trip restores identical tensors.
    let (model, store) = build_model::<f32>(&ModelConfig::desk_student(), 4).unwrap();
    let meta = vflnet_core::checkpoint::CheckpointMeta {
        epoch: 9,
        fingerprint: model.cfg.fingerprint(),
    };
    let path = dir.path().join("rt.ckpt");
    vflnet_core::checkpoint::save_checkpoint(&path, &meta, &store, None, None).unwrap();
    let loaded =
        vflnet_core::checkpoint::load_checkpoint::<f32>(&path, Some(&meta.fingerprint), false).unwrap();
    assert_eq!(loaded.meta.epoch, 9);
    for ((_, p), (name, tensor)) in store.iter().zip(&loaded.tensors) {
        assert_eq!(&p.name, name);
        assert_eq!(p.value.data(), tensor.data());
    }

    // Modulator map export produces parseable PGMs.
    let video = &made[0].sample.frames;
    let maps_dir = dir.path().join("maps");
    let written = vflnet_core::eval::export_modulator_maps(
        &model,
        &store,
        video,
        &ViewSpec::single(3, 32),
        BlockRef::parse("s0.b0").unwrap(),
        &maps_dir,
    )
    .unwrap();
    assert!(written.len() >= 2);
    for p in &written {
        let (w, h, payload) = read_pgm(p).unwrap();
        assert_eq!(w * h, payload.len());
    }
    pass(9, format!(
        "corpus bytes, .vtr and checkpoint round trips, {} PGM exports parse; reduced end-to-end rerun byte-identical",
        written.len()
    ));
}

#[test]
fn criterion_10_ablation_grid() {
    let spec = SyntheticSpec { samples_per_class: 4, ..SyntheticSpec::desk() };
    let samples = generate_in_memory(&spec).unwrap();
    let (train_set, val_set) = split_sets(&samples);
    let mut teacher_cfg = ModelConfig::desk_student();
    teacher_cfg.embed_dim = 24;
    let (teacher, mut tstore) = build_model::<f32>(&teacher_cfg, 2).unwrap();
    let mut warm = TrainConfig::desk_student();
    warm.epochs = 2;
    train(&teacher, &mut tstore, None, &train_set, &warm, None).unwrap();
    tstore.freeze();

    let mut base = TrainConfig::desk_student();
    base.epochs = 3;
    let alphas = [0.3, 0.5, 0.7];
    let taus = [5.0, 10.0, 15.0];
    let grid = vflnet_core::train::ablation_grid(
        &ModelConfig::desk_student(),
        (&teacher, &tstore),
        &train_set,
        &val_set,
        &base,
        &alphas,
        &taus,
    )
    .unwrap();
    assert_eq!(grid.len(), 9, "expected a 3x3 grid");
    let again = vflnet_core::train::ablation_grid(
        &ModelConfig::desk_student(),
        (&teacher, &tstore),
        &train_set,
        &val_set,
        &base,
        &alphas,
        &taus,
    )
    .unwrap();
    let csv = vflnet_core::train::ablation_csv(&grid);
    assert_eq!(csv, vflnet_core::train::ablation_csv(&again), "grid must be deterministic");
    for (cell, (ea, et)) in grid.iter().zip(
        alphas.iter().flat_map(|a| taus.iter().map(move |t| (*a, *t))),
    ) {
        assert_eq!(cell.alpha, ea);
        assert_eq!(cell.tau, et);
        assert!(cell.val_top1.is_finite() && cell.loss_total.is_finite());
    }
    assert_eq!(csv.lines().count(), 10, "header plus nine rows");
    pass(10, "3x3 alpha x tau grid: 9 rows, deterministic across repeat, csv well-formed");
}
