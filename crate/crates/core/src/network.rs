//! Four-stage video classifier built from focal modulation blocks.
//!
//! Each stage halves the spatial grid through a patch embedding (factor 4 at
//! the stem) and doubles the channel width; the time axis is never reduced.
//! Blocks are pre-norm residual pairs (modulation, MLP) with stochastic depth
//! ramped linearly over the global block index. The head is a layer norm, a
//! global average pool over all positions, and a linear classifier.

use crate::focal::{focal_param_count, FocalConfig, FocalLayer, Modulators, TemporalConvKind};
use crate::params::{LinearParams, NormParams, ParamStore};
use crate::tensor::{Element, Tape, TensorError, Val};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const STAGES: usize = 4;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Stage 0 width; stage i runs at embed_dim * 2^i channels.
    pub embed_dim: usize,
    pub depths: [usize; STAGES],
    pub focal_levels: [usize; STAGES],
    pub focal_windows: [usize; STAGES],
    /// Spatial reduction per stage; time is untouched.
    pub patch_sizes: [usize; STAGES],
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
    pub temporal: TemporalConvKind,
    pub out_proj: bool,
}

impl ModelConfig {
    /// 24-block teacher configuration.
    pub fn teacher() -> Self {
        ModelConfig {
            num_classes: 101,
            in_channels: 3,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            focal_levels: [2, 2, 2, 2],
            focal_windows: [3, 3, 3, 3],
            patch_sizes: [4, 2, 2, 2],
            mlp_ratio: 4.0,
            drop_path_rate: 0.5,
            temporal: TemporalConvKind::Mixing,
            out_proj: true,
        }
    }

    /// 5-block student configuration.
    pub fn student() -> Self {
        ModelConfig {
            embed_dim: 96,
            depths: [1, 1, 2, 1],
            drop_path_rate: 0.2,
            ..Self::teacher()
        }
    }

    /// Teacher sized for the 8-class synthetic experiment on a laptop CPU.
    pub fn desk_teacher() -> Self {
        ModelConfig {
            num_classes: 8,
            embed_dim: 64,
            depths: [1, 1, 2, 1],
            drop_path_rate: 0.0,
            ..Self::teacher()
        }
    }

    /// Student counterpart to `desk_teacher`.
    pub fn desk_student() -> Self {
        ModelConfig {
            num_classes: 8,
            embed_dim: 16,
            depths: [1, 1, 1, 1],
            mlp_ratio: 2.0,
            drop_path_rate: 0.0,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.num_classes == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(TensorError::invalid("model_config", "zero-sized dimension"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(TensorError::invalid(
                "model_config",
                format!("drop_path_rate {} outside [0,1)", self.drop_path_rate),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(TensorError::invalid("model_config", "mlp_ratio must be positive"));
        }
        for s in 0..STAGES {
            if self.patch_sizes[s] == 0 {
                return Err(TensorError::invalid("model_config", "zero patch size"));
            }
            if self.depths[s] > 0 {
                self.focal_config(s).validate()?;
            }
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    fn focal_config(&self, stage: usize) -> FocalConfig {
        FocalConfig {
            channels: self.stage_dim(stage),
            levels: self.focal_levels[stage],
            window: self.focal_windows[stage],
            temporal: self.temporal,
            out_proj: self.out_proj,
        }
    }

    fn mlp_hidden(&self, stage: usize) -> usize {
        ((self.mlp_ratio * self.stage_dim(stage) as f64).round() as usize).max(1)
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Total spatial reduction factor; input H and W must divide by it.
    pub fn reduction(&self) -> usize {
        self.patch_sizes.iter().product()
    }

    /// Grid (H, W) at a stage's output for a given input size.
    pub fn stage_grid(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        let f: usize = self.patch_sizes[..=stage].iter().product();
        (h / f, w / f)
    }

    /// Digest over every architectural field; checkpoints refuse to load
    /// into a model with a different fingerprint.
    pub fn fingerprint(&self) -> [u8; 32] {
        let text = format!(
            "classes={} in={} embed={} depths={:?} levels={:?} windows={:?} patches={:?} mlp={} dpr={} temporal={:?} out_proj={}",
            self.num_classes,
            self.in_channels,
            self.embed_dim,
            self.depths,
            self.focal_levels,
            self.focal_windows,
            self.patch_sizes,
            self.mlp_ratio,
            self.drop_path_rate,
            self.temporal,
            self.out_proj,
        );
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Stochastic-depth probability of global block `index` out of `total`,
/// ramped linearly from 0 to `rate`.
pub fn block_drop_prob(total: usize, index: usize, rate: f64) -> f64 {
    if total <= 1 {
        0.0
    } else {
        rate * index as f64 / (total - 1) as f64
    }
}

/// Survive flags per global block, one per residual branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropPlan(pub Vec<[bool; 2]>);

/// Names one block for modulator capture: stage `s`, block `b` within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRef {
    pub stage: usize,
    pub block: usize,
}

impl BlockRef {
    /// Parses the `s<stage>.b<block>` form, e.g. `s2.b0`.
    pub fn parse(text: &str) -> Result<Self, TensorError> {
        let bad = || TensorError::invalid("block_ref", format!("expected s<stage>.b<block>, got {text:?}"));
        let rest = text.strip_prefix('s').ok_or_else(bad)?;
        let (stage, block) = rest.split_once(".b").ok_or_else(bad)?;
        Ok(BlockRef {
            stage: stage.parse().map_err(|_| bad())?,
            block: block.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone)]
struct PatchEmbed {
    patch: usize,
    proj: LinearParams,
    norm: NormParams,
}

impl PatchEmbed {
    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<Val, TensorError> {
        let merged = tape.patch_merge(x, self.patch)?;
        let projected = self.proj.apply(tape, store, merged)?;
        self.norm.apply(tape, store, projected, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: NormParams,
    modulation: FocalLayer,
    norm2: NormParams,
    mlp_fc1: LinearParams,
    mlp_fc2: LinearParams,
    drop_prob: f64,
}

impl Block {
    /// Two pre-norm residual branches; `survive` gates them during training
    /// (None = eval, both branches always on, no rescale).
    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
        survive: Option<[bool; 2]>,
    ) -> Result<(Val, Modulators), TensorError> {
        let normed = self.norm1.apply(tape, store, x, LN_EPS)?;
        let (modulated, mods) = self.modulation.forward_with_modulators(tape, store, normed)?;
        let x = self.residual(tape, x, modulated, survive.map(|s| s[0]))?;
        let normed = self.norm2.apply(tape, store, x, LN_EPS)?;
        let hidden = self.mlp_fc1.apply(tape, store, normed)?;
        let hidden = tape.gelu(hidden);
        let expanded = self.mlp_fc2.apply(tape, store, hidden)?;
        let x = self.residual(tape, x, expanded, survive.map(|s| s[1]))?;
        Ok((x, mods))
    }

    fn residual<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Val,
        branch: Val,
        survive: Option<bool>,
    ) -> Result<Val, TensorError> {
        match survive {
            Some(false) => Ok(x), // branch dropped for this sample
            Some(true) if self.drop_prob > 0.0 => {
                let scaled = tape.scale(branch, 1.0 / (1.0 - self.drop_prob));
                tape.add(x, scaled)
            }
            _ => tape.add(x, branch),
        }
    }
}

/// Logits plus optionally captured modulators of one block.
pub struct ForwardDetail {
    pub logits: Val,
    pub modulators: Option<Modulators>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    embeds: Vec<PatchEmbed>,
    stages: Vec<Vec<Block>>,
    head_norm: NormParams,
    head: LinearParams,
}

/// Deterministically initialized model and its parameter store.
pub fn build_model<T: Element>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Model, ParamStore<T>), TensorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let total = cfg.total_blocks();
    let mut global = 0usize;
    let mut embeds = Vec::with_capacity(STAGES);
    let mut stages = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let dim = cfg.stage_dim(s);
        let prev = if s == 0 { cfg.in_channels } else { cfg.stage_dim(s - 1) };
        let p = cfg.patch_sizes[s];
        // Fan-in scale; the norm right after makes the forward invariant to
        // this, but larger weights mean proportionally smaller gradients,
        // which keeps the embeds from dominating the early update direction.
        let fan = prev * p * p;
        let proj = LinearParams::build_init(
            &mut store,
            &format!("embed{s}.proj"),
            fan,
            dim,
            crate::params::fan_in_std(fan),
            0.0,
            &mut rng,
        )?;
        let norm = NormParams::build(&mut store, &format!("embed{s}.norm"), dim)?;
        embeds.push(PatchEmbed { patch: p, proj, norm });
        let mut blocks = Vec::with_capacity(cfg.depths[s]);
        for b in 0..cfg.depths[s] {
            let prefix = format!("s{s}.b{b}");
            let norm1 = NormParams::build(&mut store, &format!("{prefix}.norm1"), dim)?;
            let modulation =
                FocalLayer::build(&mut store, &format!("{prefix}.focal"), cfg.focal_config(s), &mut rng)?;
            let norm2 = NormParams::build(&mut store, &format!("{prefix}.norm2"), dim)?;
            let hidden = cfg.mlp_hidden(s);
            let mlp_fc1 = LinearParams::build(&mut store, &format!("{prefix}.mlp.fc1"), dim, hidden, &mut rng)?;
            let mlp_fc2 = LinearParams::build(&mut store, &format!("{prefix}.mlp.fc2"), hidden, dim, &mut rng)?;
            blocks.push(Block {
                norm1,
                modulation,
                norm2,
                mlp_fc1,
                mlp_fc2,
                drop_prob: block_drop_prob(total, global, cfg.drop_path_rate),
            });
            global += 1;
        }
        stages.push(blocks);
    }
    let final_dim = cfg.stage_dim(STAGES - 1);
    let head_norm = NormParams::build(&mut store, "head.norm", final_dim)?;
    let head = LinearParams::build(&mut store, "head.fc", final_dim, cfg.num_classes, &mut rng)?;
    Ok((Model { cfg: cfg.clone(), embeds, stages, head_norm, head }, store))
}

impl Model {
    /// Per-branch survival draws for one training sample.
    pub fn draw_drop_plan(&self, rng: &mut ChaCha8Rng) -> DropPlan {
        let mut plan = Vec::with_capacity(self.cfg.total_blocks());
        for blocks in &self.stages {
            for b in blocks {
                let keep = |r: &mut ChaCha8Rng| r.gen::<f64>() >= b.drop_prob;
                plan.push([keep(rng), keep(rng)]);
            }
        }
        DropPlan(plan)
    }

    /// Stochastic-depth probabilities in global block order.
    pub fn drop_probs(&self) -> Vec<f64> {
        self.stages.iter().flatten().map(|b| b.drop_prob).collect()
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        video: Val,
        plan: Option<&DropPlan>,
    ) -> Result<Val, TensorError> {
        Ok(self.forward_detailed(tape, store, video, plan, None)?.logits)
    }

    /// Full forward; `capture` selects one block whose modulators are kept.
    pub fn forward_detailed<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        video: Val,
        plan: Option<&DropPlan>,
        capture: Option<BlockRef>,
    ) -> Result<ForwardDetail, TensorError> {
        if let Some(sel) = capture {
            if sel.stage >= STAGES || sel.block >= self.stages[sel.stage].len() {
                return Err(TensorError::invalid(
                    "block_ref",
                    format!("no block s{}.b{} in this model", sel.stage, sel.block),
                ));
            }
        }
        if let Some(p) = plan {
            if p.0.len() != self.cfg.total_blocks() {
                return Err(TensorError::invalid("drop_plan", "plan length != block count"));
            }
        }
        let mut x = video;
        let mut captured = None;
        let mut global = 0usize;
        for (s, embed) in self.embeds.iter().enumerate() {
            x = embed.apply(tape, store, x)?;
            for (b, block) in self.stages[s].iter().enumerate() {
                let survive = plan.map(|p| p.0[global]);
                let (next, mods) = block.apply(tape, store, x, survive)?;
                if capture == Some(BlockRef { stage: s, block: b }) {
                    captured = Some(mods);
                }
                x = next;
                global += 1;
            }
        }
        let logits = self.head_forward(tape, store, x)?;
        Ok(ForwardDetail { logits, modulators: captured })
    }

    /// Classifier: layer norm, mean over all positions, linear.
    pub fn head_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<Val, TensorError> {
        let normed = self.head_norm.apply(tape, store, x, LN_EPS)?;
        let pooled = tape.avg_pool(normed, &[0, 1, 2], false)?;
        self.head.apply(tape, store, pooled)
    }

    /// Embedding stack alone (all blocks skipped), for identity tests.
    pub fn embed_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        video: Val,
    ) -> Result<Val, TensorError> {
        let mut x = video;
        for embed in &self.embeds {
            x = embed.apply(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Closed-form count the built store is checked against.
pub fn expected_param_count(cfg: &ModelConfig) -> u64 {
    let mut n = 0u64;
    for s in 0..STAGES {
        let dim = cfg.stage_dim(s) as u64;
        let prev = if s == 0 { cfg.in_channels } else { cfg.stage_dim(s - 1) } as u64;
        let p = cfg.patch_sizes[s] as u64;
        n += prev * p * p * dim + dim; // embed projection
        n += 2 * dim; // embed norm
        let hidden = cfg.mlp_hidden(s) as u64;
        let per_block = 4 * dim // two norms
            + focal_param_count(&cfg.focal_config(s))
            + dim * hidden + hidden + hidden * dim + dim; // mlp
        n += cfg.depths[s] as u64 * per_block;
    }
    let fd = cfg.stage_dim(STAGES - 1) as u64;
    n + 2 * fd + fd * cfg.num_classes as u64 + cfg.num_classes as u64
}

/// Multiply-accumulate and elementwise tallies of one forward pass.
/// `flops()` applies the 2-ops-per-MAC convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostReport {
    pub macs: u64,
    pub elementwise: u64,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

/// Analytic cost of one eval-mode forward at the given input size.
pub fn flop_count(cfg: &ModelConfig, t: usize, h: usize, w: usize) -> Result<CostReport, TensorError> {
    cfg.validate()?;
    if h % cfg.reduction() != 0 || w % cfg.reduction() != 0 {
        return Err(TensorError::invalid(
            "flop_count",
            format!("{h}x{w} not divisible by total reduction {}", cfg.reduction()),
        ));
    }
    let mut macs = 0u64;
    let mut ew = 0u64;
    let (mut gh, mut gw) = (h, w);
    for s in 0..STAGES {
        let dim = cfg.stage_dim(s) as u64;
        let prev = if s == 0 { cfg.in_channels } else { cfg.stage_dim(s - 1) } as u64;
        let p = cfg.patch_sizes[s] as u64;
        gh /= p as usize;
        gw /= p as usize;
        let n = (t * gh * gw) as u64;
        macs += n * prev * p * p * dim;
        ew += 7 * n * dim; // embed norm
        let fc = cfg.focal_config(s);
        let levels = fc.levels as u64;
        let hidden = cfg.mlp_hidden(s) as u64;
        let mut block_macs = n * dim * dim; // query
        block_macs += 2 * n * dim * (dim + levels + 1); // fused projections
        for l in 1..=fc.levels {
            block_macs += n * (fc.spatial_kernel(l) * fc.spatial_kernel(l)) as u64 * dim;
            block_macs += match fc.temporal {
                TemporalConvKind::PerChannel => n * fc.temporal_kernel(l) as u64 * dim,
                _ => n * fc.temporal_kernel(l) as u64 * dim * dim,
            };
        }
        block_macs += 2 * n * dim * dim; // modulator projections
        if fc.out_proj {
            block_macs += n * dim * dim;
        }
        block_macs += 2 * n * dim * hidden; // mlp
        let mut block_ew = 14 * n * dim; // two norms
        block_ew += 2 * levels * n * dim; // ladder activations
        block_ew += 2 * n * dim; // global means
        block_ew += 4 * n * dim * (levels + 1); // gated sums
        block_ew += 2 * n * dim; // query modulation
        block_ew += n * hidden; // mlp activation
        block_ew += 2 * n * dim; // residual adds
        macs += cfg.depths[s] as u64 * block_macs;
        ew += cfg.depths[s] as u64 * block_ew;
    }
    let n3 = (t * gh * gw) as u64;
    let fd = cfg.stage_dim(STAGES - 1) as u64;
    ew += 7 * n3 * fd + n3 * fd; // head norm + pool
    macs += fd * cfg.num_classes as u64;
    Ok(CostReport { macs, elementwise: ew })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_grads;
    use crate::tensor::Tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_classes: 5,
            embed_dim: 4,
            depths: [1, 1, 1, 1],
            focal_levels: [2, 2, 2, 2],
            focal_windows: [3, 3, 3, 3],
            drop_path_rate: 0.0,
            ..ModelConfig::teacher()
        }
    }

    fn rand_video(t: usize, hw: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t * hw * hw * 3;
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![t, hw, hw, 3], data).unwrap()
    }

    #[test]
    fn preset_block_counts() {
        assert_eq!(ModelConfig::student().total_blocks(), 5);
        assert_eq!(ModelConfig::teacher().total_blocks(), 24);
    }

    #[test]
    fn store_count_matches_closed_form() {
        for cfg in [ModelConfig::teacher(), ModelConfig::student(), tiny_cfg()] {
            let (_, store) = build_model::<f32>(&cfg, 1).unwrap();
            assert_eq!(store.count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn table_configs_hit_size_anchors() {
        let teacher = expected_param_count(&ModelConfig::teacher()) as f64;
        let student = expected_param_count(&ModelConfig::student()) as f64;
        assert!((teacher - 157e6).abs() <= 0.15 * 157e6, "teacher params {teacher:.3e}");
        assert!((student - 22e6).abs() <= 0.15 * 22e6, "student params {student:.3e}");
        let t_cost = flop_count(&ModelConfig::teacher(), 8, 224, 224).unwrap();
        let s_cost = flop_count(&ModelConfig::student(), 8, 224, 224).unwrap();
        assert!((t_cost.gmacs() - 220.0).abs() <= 0.25 * 220.0, "teacher {} gmacs", t_cost.gmacs());
        assert!((s_cost.gmacs() - 27.0).abs() <= 0.25 * 27.0, "student {} gmacs", s_cost.gmacs());
    }

    #[test]
    fn zero_depth_config_is_embeds_plus_head() {
        let cfg = ModelConfig {
            num_classes: 10,
            embed_dim: 8,
            depths: [0, 0, 0, 0],
            ..tiny_cfg()
        };
        // stem 3*16*8+8 and norm 16; then 528+32, 2080+64, 8256+128;
        // head norm 128 and classifier 650
        assert_eq!(expected_param_count(&cfg), 12274);
        let (_, store) = build_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.count(), 12274);
    }

    #[test]
    fn same_seed_reproduces_parameters() {
        let cfg = tiny_cfg();
        let (_, a) = build_model::<f32>(&cfg, 42).unwrap();
        let (_, b) = build_model::<f32>(&cfg, 42).unwrap();
        let (_, c) = build_model::<f32>(&cfg, 43).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
        assert_ne!(a.value_checksum(), c.value_checksum());
    }

    #[test]
    fn eval_forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let (model, store) = build_model::<f32>(&cfg, 7).unwrap();
        let x = rand_video(2, 32, 9);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let out = model.forward(&mut tape, &store, v, None).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[5]);
        assert_eq!(a.data(), run().data());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = tiny_cfg();
        let (model, store) = build_model::<f32>(&cfg, 7).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::<f32>::zeros(vec![2, 33, 33, 3]).unwrap());
        assert!(model.forward(&mut tape, &store, v, None).is_err());
        assert!(flop_count(&cfg, 8, 33, 33).is_err());
    }

    #[test]
    fn all_dropped_plan_reduces_to_embeds_and_head() {
        let cfg = ModelConfig { drop_path_rate: 0.5, ..tiny_cfg() };
        let (model, store) = build_model::<f32>(&cfg, 3).unwrap();
        let x = rand_video(2, 32, 4);
        let plan = DropPlan(vec![[false, false]; 4]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let full = model.forward(&mut tape, &store, v, Some(&plan)).unwrap();
        let v2 = tape.constant(x);
        let trunk = model.embed_forward(&mut tape, &store, v2).unwrap();
        let direct = model.head_forward(&mut tape, &store, trunk).unwrap();
        assert_eq!(tape.value(full).data(), tape.value(direct).data());
    }

    #[test]
    fn drop_probs_ramp_and_survivor_scale_is_unbiased() {
        let cfg = ModelConfig {
            depths: [1, 1, 0, 0],
            drop_path_rate: 0.5,
            ..tiny_cfg()
        };
        let (model, _) = build_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(model.drop_probs(), vec![0.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mean = 0.0f64;
        let n = 10_000;
        for _ in 0..n {
            let plan = model.draw_drop_plan(&mut rng);
            assert!(plan.0[0] == [true, true], "p=0 block must always survive");
            mean += if plan.0[1][0] { 1.0 / (1.0 - 0.5) } else { 0.0 };
        }
        mean /= n as f64;
        assert!((mean - 1.0).abs() < 0.02, "survivor mean scale {mean}");
    }

    #[test]
    fn block_ref_parse_and_capture() {
        assert_eq!(BlockRef::parse("s2.b17").unwrap(), BlockRef { stage: 2, block: 17 });
        assert!(BlockRef::parse("stage2").is_err());
        assert!(BlockRef::parse("s2.b").is_err());

        let cfg = tiny_cfg();
        let (model, store) = build_model::<f32>(&cfg, 5).unwrap();
        let x = rand_video(2, 32, 5);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = model
            .forward_detailed(&mut tape, &store, v, None, Some(BlockRef { stage: 1, block: 0 }))
            .unwrap();
        let mods = out.modulators.unwrap();
        // stage 1 of a 32px input: grid 4x4, width 8
        assert_eq!(tape.value(mods.spatial).shape(), &[2, 4, 4, 8]);
        assert_eq!(tape.value(mods.temporal).shape(), &[2, 4, 4, 8]);
        let mut tape = Tape::new();
        let v = tape.constant(rand_video(2, 32, 5));
        let err = model.forward_detailed(&mut tape, &store, v, None, Some(BlockRef { stage: 0, block: 9 }));
        assert!(err.is_err());
    }

    #[test]
    fn mac_to_flop_convention() {
        let r = CostReport { macs: 6, elementwise: 0 };
        assert_eq!(r.flops(), 12);
    }

    #[test]
    fn stage_grid_math() {
        let cfg = ModelConfig::student();
        assert_eq!(cfg.reduction(), 32);
        assert_eq!(cfg.stage_grid(0, 224, 224), (56, 56));
        assert_eq!(cfg.stage_grid(3, 224, 224), (7, 7));
        assert_eq!(cfg.stage_dim(3), 768);
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::student().fingerprint();
        assert_eq!(a, ModelConfig::student().fingerprint());
        assert_ne!(a, ModelConfig::teacher().fingerprint());
        let mut alt = ModelConfig::student();
        alt.out_proj = false;
        assert_ne!(a, alt.fingerprint());
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let cfg = tiny_cfg();
        let (model, store) = build_model::<f32>(&cfg, 13).unwrap();
        let x = rand_video(2, 32, 13);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let logits = model.forward(&mut tape, &store, v, None).unwrap();
        let loss = tape.mean(logits);
        let grads = tape.backward(loss).unwrap();
        let by_id = param_grads(&tape, &grads);
        assert_eq!(by_id.len(), store.len());
        for (id, g) in by_id {
            assert!(
                g.iter().all(|v| v.is_finite()),
                "non-finite gradient in {}",
                store.get(id).name
            );
        }
        assert!(grads.get(v).unwrap().iter().all(|v| v.is_finite()));
    }
}
