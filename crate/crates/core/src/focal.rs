//! Dual-branch spatio-temporal focal modulation.
//!
//! One fused projection per branch produces the level-0 context and the
//! per-level gates; hierarchical contexts come from growing depthwise
//! convolutions (spatial, per frame) and 1-D convolutions along time, each
//! followed by GeLU; a broadcast mean forms the extra global level. The gated
//! sums are mapped through per-branch modulator projections and multiply the
//! query pointwise.

use crate::params::{LinearParams, ParamId, ParamStore};
use crate::tensor::{Element, Tape, Tensor, TensorError, Val};
use rand_chacha::ChaCha8Rng;

/// How the temporal context ladder convolves along T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalConvKind {
    /// One length-k kernel per channel; channels never mix.
    PerChannel,
    /// 1x1 kernel mixing channels, no temporal extent.
    Pointwise,
    /// Channel-mixing kernel with the same growing lengths as the spatial branch.
    Mixing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub channels: usize,
    /// Ladder depth L; the gated sum spans L+1 levels including the global one.
    pub levels: usize,
    /// Base kernel size at level 1, odd.
    pub window: usize,
    pub temporal: TemporalConvKind,
    pub out_proj: bool,
}

impl FocalConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels == 0 || self.levels == 0 {
            return Err(TensorError::invalid(
                "focal_config",
                format!("channels {} and levels {} must be positive", self.channels, self.levels),
            ));
        }
        if self.window % 2 == 0 {
            return Err(TensorError::invalid(
                "focal_config",
                format!("window {} must be odd", self.window),
            ));
        }
        Ok(())
    }

    /// Spatial kernel size at 1-based level l: window + 2(l-1).
    pub fn spatial_kernel(&self, level: usize) -> usize {
        self.window + 2 * (level - 1)
    }

    pub fn temporal_kernel(&self, level: usize) -> usize {
        match self.temporal {
            TemporalConvKind::Pointwise => 1,
            _ => self.window + 2 * (level - 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Branch {
    Spatial,
    Temporal,
}

/// Tape handles for the two modulator tensors of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Modulators {
    pub spatial: Val,
    pub temporal: Val,
}

/// Split outputs of the input projections.
pub struct Projected {
    pub query: Val,
    pub context_s: Val,
    pub gates_s: Val,
    pub context_t: Val,
    pub gates_t: Val,
}

#[derive(Debug, Clone)]
pub struct FocalLayer {
    pub cfg: FocalConfig,
    query: LinearParams,
    fused_s: LinearParams,
    fused_t: LinearParams,
    kernels_s: Vec<ParamId>,
    kernels_t: Vec<ParamId>,
    h_s: LinearParams,
    h_t: LinearParams,
    out: Option<LinearParams>,
}

impl FocalLayer {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: FocalConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let c = cfg.channels;
        let fused_out = c + cfg.levels + 1;
        // The context pathway (fused projections, context convs, modulator
        // projections) gets fan-in scaled weights, and the modulator
        // projections start at bias one so y = q * Ms * Mt opens as roughly
        // q times order-one context instead of a product of near-zeros. With
        // everything at std 0.02 the product (and every gradient through it)
        // is ~1e-8 at init; that is fine under adaptive optimizers but plain
        // SGD never escapes it.
        let proj_std = crate::params::fan_in_std(c);
        let query = LinearParams::build(store, &format!("{prefix}.query"), c, c, rng)?;
        let fused_s =
            LinearParams::build_init(store, &format!("{prefix}.proj_s"), c, fused_out, proj_std, 0.0, rng)?;
        let fused_t =
            LinearParams::build_init(store, &format!("{prefix}.proj_t"), c, fused_out, proj_std, 0.0, rng)?;
        let mut kernels_s = Vec::with_capacity(cfg.levels);
        let mut kernels_t = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let ks = cfg.spatial_kernel(l);
            kernels_s.push(store.add(
                format!("{prefix}.ctx_s.{}", l - 1),
                crate::params::trunc_normal(
                    vec![ks, ks, c],
                    crate::params::fan_in_std(ks * ks),
                    rng,
                )?,
                true,
            ));
            let kt = cfg.temporal_kernel(l);
            let (shape, t_fan) = match cfg.temporal {
                TemporalConvKind::PerChannel => (vec![kt, c], kt),
                _ => (vec![kt, c, c], kt * c),
            };
            kernels_t.push(store.add(
                format!("{prefix}.ctx_t.{}", l - 1),
                crate::params::trunc_normal(shape, crate::params::fan_in_std(t_fan), rng)?,
                true,
            ));
        }
        let h_s = LinearParams::build_init(store, &format!("{prefix}.h_s"), c, c, proj_std, 1.0, rng)?;
        let h_t = LinearParams::build_init(store, &format!("{prefix}.h_t"), c, c, proj_std, 1.0, rng)?;
        let out = if cfg.out_proj {
            Some(LinearParams::build(store, &format!("{prefix}.out"), c, c, rng)?)
        } else {
            None
        };
        Ok(FocalLayer { cfg, query, fused_s, fused_t, kernels_s, kernels_t, h_s, h_t, out })
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, x: Val) -> Result<(), TensorError> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[3] != self.cfg.channels {
            return Err(TensorError::ShapeMismatch {
                op: "focal_forward",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0, self.cfg.channels],
            });
        }
        Ok(())
    }

    /// Query plus per-branch fused projection, split into context and gates.
    pub fn project_inputs<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<Projected, TensorError> {
        self.check_input(tape, x)?;
        let c = self.cfg.channels;
        let gates = self.cfg.levels + 1;
        let query = self.query.apply(tape, store, x)?;
        let fused_s = self.fused_s.apply(tape, store, x)?;
        let fused_t = self.fused_t.apply(tape, store, x)?;
        let context_s = tape.slice_last(fused_s, 0, c)?;
        let gates_s = tape.slice_last(fused_s, c, gates)?;
        let context_t = tape.slice_last(fused_t, 0, c)?;
        let gates_t = tape.slice_last(fused_t, c, gates)?;
        Ok(Projected { query, context_s, gates_s, context_t, gates_t })
    }

    /// Hierarchical contexts Z^1..Z^L: GeLU after each level's convolution.
    pub fn contextualize<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        context0: Val,
        branch: Branch,
    ) -> Result<Vec<Val>, TensorError> {
        let mut levels = Vec::with_capacity(self.cfg.levels);
        let mut z = context0;
        for l in 0..self.cfg.levels {
            let conv = match branch {
                Branch::Spatial => {
                    let k = store.lease(tape, self.kernels_s[l]);
                    tape.dwconv2d(z, k)?
                }
                Branch::Temporal => {
                    let k = store.lease(tape, self.kernels_t[l]);
                    match self.cfg.temporal {
                        TemporalConvKind::PerChannel => tape.tconv_pc(z, k)?,
                        _ => tape.tconv_mix(z, k)?,
                    }
                }
            };
            z = tape.gelu(conv);
            levels.push(z);
        }
        Ok(levels)
    }

    /// Global context: mean over (H, W) per frame for the spatial branch,
    /// mean over T per location for the temporal branch, broadcast back.
    pub fn global_level<T: Element>(
        &self,
        tape: &mut Tape<T>,
        z_last: Val,
        branch: Branch,
    ) -> Result<Val, TensorError> {
        let shape = tape.value(z_last).shape().to_vec();
        let axes: &[usize] = match branch {
            Branch::Spatial => &[1, 2],
            Branch::Temporal => &[0],
        };
        let pooled = tape.avg_pool(z_last, axes, true)?;
        tape.broadcast_to(pooled, &shape)
    }

    /// Σ_l gate_l ⊙ Z^l over the L+1 levels; gates broadcast over channels.
    pub fn gated_aggregate<T: Element>(
        &self,
        tape: &mut Tape<T>,
        levels: &[Val],
        gates: Val,
    ) -> Result<Val, TensorError> {
        let gshape = tape.value(gates).shape().to_vec();
        if levels.is_empty() || *gshape.last().unwrap() != levels.len() {
            return Err(TensorError::invalid(
                "gated_aggregate",
                format!("{} levels vs {} gate channels", levels.len(), gshape.last().unwrap()),
            ));
        }
        let target = tape.value(levels[0]).shape().to_vec();
        let mut acc: Option<Val> = None;
        for (l, &z) in levels.iter().enumerate() {
            let gate = tape.slice_last(gates, l, 1)?;
            let gate = tape.broadcast_to(gate, &target)?;
            let term = tape.mul(gate, z)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// q(x) ⊙ M_s ⊙ M_t, then the output projection when configured.
    pub fn modulate<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Val,
        ms: Val,
        mt: Val,
    ) -> Result<Val, TensorError> {
        let y = tape.mul(query, ms)?;
        let y = tape.mul(y, mt)?;
        match &self.out {
            Some(p) => p.apply(tape, store, y),
            None => Ok(y),
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<Val, TensorError> {
        Ok(self.forward_with_modulators(tape, store, x)?.0)
    }

    pub fn forward_with_modulators<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<(Val, Modulators), TensorError> {
        let p = self.project_inputs(tape, store, x)?;
        let mut zs = self.contextualize(tape, store, p.context_s, Branch::Spatial)?;
        let gs = self.global_level(tape, *zs.last().unwrap(), Branch::Spatial)?;
        zs.push(gs);
        let mut zt = self.contextualize(tape, store, p.context_t, Branch::Temporal)?;
        let gt = self.global_level(tape, *zt.last().unwrap(), Branch::Temporal)?;
        zt.push(gt);
        let zout_s = self.gated_aggregate(tape, &zs, p.gates_s)?;
        let zout_t = self.gated_aggregate(tape, &zt, p.gates_t)?;
        let ms = self.h_s.apply(tape, store, zout_s)?;
        let mt = self.h_t.apply(tape, store, zout_t)?;
        let out = self.modulate(tape, store, p.query, ms, mt)?;
        Ok((out, Modulators { spatial: ms, temporal: mt }))
    }

    /// Scalar parameter count of this layer.
    pub fn param_count(&self) -> u64 {
        focal_param_count(&self.cfg)
    }
}

/// Closed-form scalar parameter count of one focal layer.
pub fn focal_param_count(cfg: &FocalConfig) -> u64 {
    let c = cfg.channels as u64;
    let fused = c * (c + cfg.levels as u64 + 1) + c + cfg.levels as u64 + 1;
    let mut n = (c * c + c) + 2 * fused; // query + two fused projections
    for l in 1..=cfg.levels {
        n += (cfg.spatial_kernel(l) * cfg.spatial_kernel(l)) as u64 * c;
        n += match cfg.temporal {
            TemporalConvKind::PerChannel => cfg.temporal_kernel(l) as u64 * c,
            _ => cfg.temporal_kernel(l) as u64 * c * c,
        };
    }
    n += 2 * (c * c + c); // h_s, h_t
    if cfg.out_proj {
        n += c * c + c;
    }
    n
}

/// Upper bounds under which the naive oracle is willing to run.
pub const NAIVE_MAX_T: usize = 4;
pub const NAIVE_MAX_HW: usize = 6;
pub const NAIVE_MAX_C: usize = 8;

/// Straight-line re-implementation of the layer as nested loops over plain
/// slices. Shares no code with the tape ops; used as the equivalence oracle.
pub fn reference_modulation_naive<T: Element>(
    layer: &FocalLayer,
    store: &ParamStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::invalid("reference_modulation_naive", "input must be rank 4"));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if t > NAIVE_MAX_T || h > NAIVE_MAX_HW || w > NAIVE_MAX_HW || c > NAIVE_MAX_C {
        return Err(TensorError::invalid(
            "reference_modulation_naive",
            format!("input {s:?} exceeds naive size guard ({NAIVE_MAX_T}, {NAIVE_MAX_HW}, {NAIVE_MAX_HW}, {NAIVE_MAX_C})"),
        ));
    }
    if c != layer.cfg.channels {
        return Err(TensorError::ShapeMismatch {
            op: "reference_modulation_naive",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, layer.cfg.channels],
        });
    }
    let levels = layer.cfg.levels;
    let positions = t * h * w;
    let val = |id: ParamId| store.get(id).value.data();
    let at = |it: usize, ih: usize, iw: usize| (it * h + ih) * w + iw;

    // position-wise linear, dot-product order
    let lin = |xd: &[T], win: usize, wout: usize, wm: &[T], bm: &[T]| -> Vec<T> {
        let rows = xd.len() / win;
        let mut y = vec![T::zero(); rows * wout];
        for r in 0..rows {
            for o in 0..wout {
                let mut acc = bm[o];
                for i in 0..win {
                    acc += xd[r * win + i] * wm[i * wout + o];
                }
                y[r * wout + o] = acc;
            }
        }
        y
    };
    let gelu = |v: T| -> T {
        let half = T::from_f64(0.5);
        v * ((v * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf() * half + half)
    };

    let fused_dim = c + levels + 1;
    let query = lin(x.data(), c, c, val(layer.query.w), val(layer.query.b));
    let fs = lin(x.data(), c, fused_dim, val(layer.fused_s.w), val(layer.fused_s.b));
    let ft = lin(x.data(), c, fused_dim, val(layer.fused_t.w), val(layer.fused_t.b));
    let mut ctx_s = vec![T::zero(); positions * c];
    let mut ctx_t = vec![T::zero(); positions * c];
    let mut gates_s = vec![T::zero(); positions * (levels + 1)];
    let mut gates_t = vec![T::zero(); positions * (levels + 1)];
    for p in 0..positions {
        for i in 0..c {
            ctx_s[p * c + i] = fs[p * fused_dim + i];
            ctx_t[p * c + i] = ft[p * fused_dim + i];
        }
        for l in 0..=levels {
            gates_s[p * (levels + 1) + l] = fs[p * fused_dim + c + l];
            gates_t[p * (levels + 1) + l] = ft[p * fused_dim + c + l];
        }
    }

    let mut zout_s = vec![T::zero(); positions * c];
    let mut zout_t = vec![T::zero(); positions * c];

    // spatial ladder
    let mut z = ctx_s;
    for l in 1..=levels {
        let k = layer.cfg.spatial_kernel(l);
        let r = k / 2;
        let kern = val(layer.kernels_s[l - 1]);
        let mut nz = vec![T::zero(); positions * c];
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    for ic in 0..c {
                        let mut acc = T::zero();
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = ih as isize + dy as isize - r as isize;
                                let sx = iw as isize + dx as isize - r as isize;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let src = at(it, sy as usize, sx as usize) * c + ic;
                                acc += z[src] * kern[(dy * k + dx) * c + ic];
                            }
                        }
                        nz[at(it, ih, iw) * c + ic] = gelu(acc);
                    }
                }
            }
        }
        z = nz;
        for p in 0..positions {
            for ic in 0..c {
                zout_s[p * c + ic] += gates_s[p * (levels + 1) + (l - 1)] * z[p * c + ic];
            }
        }
    }
    // spatial global level: mean over (H, W) per frame
    for it in 0..t {
        for ic in 0..c {
            let mut mean = T::zero();
            for ih in 0..h {
                for iw in 0..w {
                    mean += z[at(it, ih, iw) * c + ic];
                }
            }
            mean *= T::from_f64(1.0 / (h * w) as f64);
            for ih in 0..h {
                for iw in 0..w {
                    let p = at(it, ih, iw);
                    zout_s[p * c + ic] += gates_s[p * (levels + 1) + levels] * mean;
                }
            }
        }
    }

    // temporal ladder
    let mut z = ctx_t;
    for l in 1..=levels {
        let k = layer.cfg.temporal_kernel(l);
        let r = k / 2;
        let kern = val(layer.kernels_t[l - 1]);
        let mut nz = vec![T::zero(); positions * c];
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    for oc in 0..c {
                        let mut acc = T::zero();
                        for dt in 0..k {
                            let st = it as isize + dt as isize - r as isize;
                            if st < 0 || st >= t as isize {
                                continue;
                            }
                            let src = at(st as usize, ih, iw) * c;
                            match layer.cfg.temporal {
                                TemporalConvKind::PerChannel => {
                                    acc += z[src + oc] * kern[dt * c + oc];
                                }
                                _ => {
                                    for ic in 0..c {
                                        acc += z[src + ic] * kern[(dt * c + ic) * c + oc];
                                    }
                                }
                            }
                        }
                        nz[at(it, ih, iw) * c + oc] = gelu(acc);
                    }
                }
            }
        }
        z = nz;
        for p in 0..positions {
            for ic in 0..c {
                zout_t[p * c + ic] += gates_t[p * (levels + 1) + (l - 1)] * z[p * c + ic];
            }
        }
    }
    // temporal global level: mean over T per location
    for ih in 0..h {
        for iw in 0..w {
            for ic in 0..c {
                let mut mean = T::zero();
                for it in 0..t {
                    mean += z[at(it, ih, iw) * c + ic];
                }
                mean *= T::from_f64(1.0 / t as f64);
                for it in 0..t {
                    let p = at(it, ih, iw);
                    zout_t[p * c + ic] += gates_t[p * (levels + 1) + levels] * mean;
                }
            }
        }
    }

    let ms = lin(&zout_s, c, c, val(layer.h_s.w), val(layer.h_s.b));
    let mt = lin(&zout_t, c, c, val(layer.h_t.w), val(layer.h_t.b));
    let mut y = vec![T::zero(); positions * c];
    for i in 0..positions * c {
        y[i] = query[i] * ms[i] * mt[i];
    }
    let y = match &layer.out {
        Some(p) => lin(&y, c, c, val(p.w), val(p.b)),
        None => y,
    };
    Tensor::new(s.to_vec(), y)
}
