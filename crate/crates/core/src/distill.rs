//! Response-based distillation objective: temperature-softened KL against a
//! frozen teacher, blended with cross entropy on the true label.

use crate::tensor::{Element, Tape, Tensor, TensorError, Val};

/// Floor applied to the student distribution inside the KL sum.
const Q_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Blend weight: total = alpha * kd + (1 - alpha) * ce.
    pub alpha: f64,
    /// Softening temperature; the KL term is rescaled by tau^2.
    pub tau: f64,
}

impl DistillConfig {
    pub fn new(alpha: f64, tau: f64) -> Result<Self, TensorError> {
        let cfg = DistillConfig { alpha, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(TensorError::invalid(
                "distill_config",
                format!("alpha {} outside [0,1]", self.alpha),
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TensorError::invalid(
                "distill_config",
                format!("tau {} must be positive", self.tau),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kd: f64,
    pub ce: f64,
    pub total: f64,
}

fn check_pair(teacher: &[f64], student: &[f64]) -> Result<(), TensorError> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(TensorError::LengthMismatch {
            op: "distill",
            shape: vec![teacher.len()],
            expected: teacher.len(),
            got: student.len(),
        });
    }
    Ok(())
}

/// softmax(logits / tau).
pub fn soften(logits: &[f64], tau: f64) -> Result<Vec<f64>, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::invalid("soften", format!("tau {tau} must be positive")));
    }
    if logits.is_empty() {
        return Err(TensorError::invalid("soften", "empty logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Σ p·log(p/q) with 0·log(0/·) = 0 and q floored at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, TensorError> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(Q_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// KL(soften(teacher) ‖ soften(student)) · tau².
pub fn kd_loss_value(teacher: &[f64], student: &[f64], cfg: &DistillConfig) -> Result<f64, TensorError> {
    check_pair(teacher, student)?;
    let p = soften(teacher, cfg.tau)?;
    let q = soften(student, cfg.tau)?;
    Ok(kl_divergence(&p, &q)? * cfg.tau * cfg.tau)
}

/// -log softmax(logits)[label], via log-sum-exp.
pub fn ce_loss_value(logits: &[f64], label: usize) -> Result<f64, TensorError> {
    if label >= logits.len() {
        return Err(TensorError::invalid(
            "ce_loss",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

/// All three losses at once; total = alpha·kd + (1-alpha)·ce.
pub fn total_loss_value(
    teacher: &[f64],
    student: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<LossBreakdown, TensorError> {
    cfg.validate()?;
    let kd = kd_loss_value(teacher, student, cfg)?;
    let ce = ce_loss_value(student, label)?;
    Ok(LossBreakdown { kd, ce, total: blend(kd, ce, cfg.alpha) })
}

/// Endpoint-exact blend: alpha 0 or 1 returns the single term untouched.
pub fn blend(kd: f64, ce: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        ce
    } else if alpha == 1.0 {
        kd
    } else {
        alpha * kd + (1.0 - alpha) * ce
    }
}

/// Tape losses for training. The teacher side is evaluated eagerly and enters
/// the tape as a constant, so no gradient can reach it.
pub struct DistillTape;

impl DistillTape {
    /// τ²·Σ exp(lt)·(lt − ls) with lt = log softmax(teacher/τ) as data and
    /// ls = log softmax(student/τ) on the tape. Zero exactly when the logits
    /// agree, since both sides run the same log-softmax code.
    pub fn kd_loss<T: Element>(
        tape: &mut Tape<T>,
        teacher_logits: &Tensor<T>,
        student_logits: Val,
        cfg: &DistillConfig,
    ) -> Result<Val, TensorError> {
        cfg.validate()?;
        let k = teacher_logits.numel();
        let srank = tape.value(student_logits).shape().len();
        if srank != 1 || tape.value(student_logits).numel() != k {
            return Err(TensorError::LengthMismatch {
                op: "kd_loss",
                shape: vec![k],
                expected: k,
                got: tape.value(student_logits).numel(),
            });
        }
        // teacher side, eager
        let t_scaled = tape.constant(teacher_logits.map(|v| v * T::from_f64(1.0 / cfg.tau)));
        let lt = tape.log_softmax(t_scaled, 0)?;
        let lt_data = tape.value(lt).clone();
        let p: Vec<T> = lt_data.data().iter().map(|v| v.exp()).collect();
        let p = tape.constant(Tensor::new(vec![k], p)?);
        let lt = tape.constant(lt_data);
        // student side, tracked
        let s_scaled = tape.scale(student_logits, 1.0 / cfg.tau);
        let ls = tape.log_softmax(s_scaled, 0)?;
        let diff = tape.sub(lt, ls)?;
        let terms = tape.mul(p, diff)?;
        let sum = tape.sum(terms);
        Ok(tape.scale(sum, cfg.tau * cfg.tau))
    }

    /// -log softmax(student_logits)[label].
    pub fn ce_loss<T: Element>(
        tape: &mut Tape<T>,
        student_logits: Val,
        label: usize,
    ) -> Result<Val, TensorError> {
        let k = tape.value(student_logits).numel();
        if label >= k {
            return Err(TensorError::invalid(
                "ce_loss",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let ls = tape.log_softmax(student_logits, 0)?;
        let picked = tape.select(ls, label)?;
        Ok(tape.scale(picked, -1.0))
    }

    /// Blended objective on the tape; returns the three scalars' nodes.
    pub fn total_loss<T: Element>(
        tape: &mut Tape<T>,
        teacher_logits: &Tensor<T>,
        student_logits: Val,
        label: usize,
        cfg: &DistillConfig,
    ) -> Result<(Val, Val, Val), TensorError> {
        let kd = Self::kd_loss(tape, teacher_logits, student_logits, cfg)?;
        let ce = Self::ce_loss(tape, student_logits, label)?;
        let total = if cfg.alpha == 0.0 {
            ce
        } else if cfg.alpha == 1.0 {
            kd
        } else {
            let a = tape.scale(kd, cfg.alpha);
            let b = tape.scale(ce, 1.0 - cfg.alpha);
            tape.add(a, b)?
        };
        Ok((total, kd, ce))
    }
}

/// Shannon entropy of a distribution, for the smoothing property tests.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(alpha: f64, tau: f64) -> DistillConfig {
        DistillConfig::new(alpha, tau).unwrap()
    }

    #[test]
    fn config_bounds() {
        assert!(DistillConfig::new(-0.1, 1.0).is_err());
        assert!(DistillConfig::new(1.1, 1.0).is_err());
        assert!(DistillConfig::new(0.5, 0.0).is_err());
        assert!(DistillConfig::new(0.5, -2.0).is_err());
        assert!(DistillConfig::new(0.0, 1e9).is_ok());
    }

    #[test]
    fn soften_known_values() {
        let p = soften(&[std::f64::consts::LN_2, 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        // huge tau flattens
        let p = soften(&[3.0, -1.0, 0.5], 1e9).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        // equal logits are uniform at any tau
        let p = soften(&[0.7, 0.7, 0.7, 0.7], 0.3).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_known_values() {
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        let half_ln3 = 0.5 * 3.0f64.ln(); // 0.549306...
        assert!((kl_divergence(&[0.75, 0.25], &[0.25, 0.75]).unwrap() - half_ln3).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kd_known_value_and_tau_scaling() {
        // teacher [2,0], student [0,2] at tau=1: both softmaxes are the same
        // pair reversed, so KL = (p0-p1)·(2-0)/1 = 2·tanh(1)
        let expect = 2.0 * 1.0f64.tanh(); // 1.5231883...
        let kd = kd_loss_value(&[2.0, 0.0], &[0.0, 2.0], &cfg(0.5, 1.0)).unwrap();
        assert!((kd - expect).abs() < 1e-12, "kd {kd}");
        assert!((kd - 1.5231884).abs() < 1e-7);

        // tau=2 equals tau² times the KL of the softened pair
        let c2 = cfg(0.5, 2.0);
        let kd2 = kd_loss_value(&[2.0, 0.0], &[0.0, 2.0], &c2).unwrap();
        let p = soften(&[2.0, 0.0], 2.0).unwrap();
        let q = soften(&[0.0, 2.0], 2.0).unwrap();
        let direct = 4.0 * kl_divergence(&p, &q).unwrap();
        assert!((kd2 - direct).abs() < 1e-12);
    }

    #[test]
    fn kd_zero_on_identical_logits() {
        for tau in [1.0, 5.0, 10.0, 15.0] {
            let z = [0.3, -1.2, 4.0, 0.0];
            let kd = kd_loss_value(&z, &z, &cfg(0.5, tau)).unwrap();
            assert!(kd.abs() < 1e-9, "tau {tau}: kd {kd}");
        }
    }

    #[test]
    fn ce_known_values() {
        // confident and correct
        let mut z = vec![0.0; 4];
        z[2] = 1000.0;
        assert!(ce_loss_value(&z, 2).unwrap() < 1e-9);
        // uniform logits
        let ce = ce_loss_value(&[0.0; 7], 3).unwrap();
        assert!((ce - 7.0f64.ln()).abs() < 1e-12);
        // [1,0] label 1 -> ln(1+e)
        let ce = ce_loss_value(&[1.0, 0.0], 1).unwrap();
        assert!((ce - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((ce - 1.3132616875).abs() < 1e-9);
        assert!(ce_loss_value(&[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn total_blend_and_endpoints() {
        // alpha=0.3 with kd=2, ce=1
        assert!((blend(2.0, 1.0, 0.3) - 1.3).abs() < 1e-15);
        let t = [2.0, 0.0];
        let s = [0.0, 2.0];
        let b0 = total_loss_value(&t, &s, 0, &cfg(0.0, 10.0)).unwrap();
        assert_eq!(b0.total, b0.ce);
        let b1 = total_loss_value(&t, &s, 0, &cfg(1.0, 10.0)).unwrap();
        assert_eq!(b1.total, b1.kd);
        let b = total_loss_value(&t, &s, 0, &cfg(0.3, 10.0)).unwrap();
        assert!((b.total - (0.3 * b.kd + 0.7 * b.ce)).abs() < 1e-15);
    }

    #[test]
    fn entropy_rises_with_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut last = -1.0;
            for tau in [1.0, 2.0, 5.0, 10.0, 15.0, 100.0] {
                let h = entropy(&soften(&z, tau).unwrap());
                assert!(h >= last - 1e-12, "entropy fell at tau {tau}");
                last = h;
            }
        }
    }

    #[test]
    fn tape_losses_match_eager_and_are_shift_invariant() {
        let c = cfg(0.3, 10.0);
        let t64 = [1.5, -0.2, 0.0, 2.2];
        let s64 = [0.1, 0.4, -1.0, 1.0];
        let want = total_loss_value(&t64, &s64, 2, &c).unwrap();

        let run = |toff: f64, soff: f64| -> (f64, f64, f64) {
            let mut tape = Tape::<f64>::new();
            let t = Tensor::new(vec![4], t64.iter().map(|v| v + toff).collect()).unwrap();
            let s = tape.leaf(
                Tensor::new(vec![4], s64.iter().map(|v| v + soff).collect()).unwrap(),
                true,
            );
            let (total, kd, ce) = DistillTape::total_loss(&mut tape, &t, s, 2, &c).unwrap();
            let _ = (kd, ce);
            (
                tape.value(total).item(),
                tape.value(kd).item(),
                tape.value(ce).item(),
            )
        };
        let (total, kd, _ce) = run(0.0, 0.0);
        assert!((total - want.total).abs() < 1e-12);
        assert!((kd - want.kd).abs() < 1e-12);
        // kd is invariant to per-sample constants on either side
        let (_, kd_t, _) = run(3.7, 0.0);
        let (_, kd_s, _) = run(0.0, -2.5);
        assert!((kd_t - kd).abs() < 1e-9);
        assert!((kd_s - kd).abs() < 1e-9);
    }

    #[test]
    fn tape_kd_is_exactly_zero_on_identical_logits() {
        let mut tape = Tape::<f32>::new();
        let z = Tensor::new(vec![3], vec![0.5f32, -1.25, 2.0]).unwrap();
        let s = tape.leaf(z.clone(), true);
        let kd = DistillTape::kd_loss(&mut tape, &z, s, &cfg(0.5, 10.0)).unwrap();
        assert_eq!(tape.value(kd).item(), 0.0);
    }

    #[test]
    fn teacher_gets_no_gradient_and_student_matches_fd() {
        let c = cfg(0.3, 5.0);
        let t = Tensor::new(vec![4], vec![1.5, -0.2, 0.0, 2.2]).unwrap();
        let s0 = [0.1, 0.4, -1.0, 1.0];
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::new(vec![4], s0.to_vec()).unwrap(), true);
        let (total, _, _) = DistillTape::total_loss(&mut tape, &t, s, 2, &c).unwrap();
        let grads = tape.backward(total).unwrap();
        // every tracked leaf is the student; the teacher entered as constants
        assert!(tape.tagged_leaves().is_empty());
        let analytic = grads.get(s).unwrap();
        crate::check::assert_grads_close(
            |vals: &[f64]| {
                total_loss_value(&[1.5, -0.2, 0.0, 2.2], vals, 2, &c).unwrap().total
            },
            &s0,
            analytic,
            1e-6,
            1e-4,
            "student logits",
        );
    }

    proptest! {
        #[test]
        fn kd_is_nonnegative(
            t in proptest::collection::vec(-5.0f64..5.0, 2..8),
            soff in proptest::collection::vec(-5.0f64..5.0, 2..8),
            tau in 0.5f64..20.0,
        ) {
            let n = t.len().min(soff.len());
            let kd = kd_loss_value(&t[..n], &soff[..n], &cfg(0.5, tau)).unwrap();
            prop_assert!(kd >= -1e-12, "kd {kd}");
        }

        #[test]
        fn blend_stays_between_terms(kd in 0.0f64..10.0, ce in 0.0f64..10.0, alpha in 0.0f64..=1.0) {
            let b = blend(kd, ce, alpha);
            let lo = kd.min(ce) - 1e-12;
            let hi = kd.max(ce) + 1e-12;
            prop_assert!(b >= lo && b <= hi);
        }
    }
}
