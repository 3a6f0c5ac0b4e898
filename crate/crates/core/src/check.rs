//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to validate every backward rule against a value
//! that is computed without touching the tape's reverse pass: the checked
//! function is re-evaluated forward at perturbed inputs only.

use crate::tensor::{Dtype, Element};

/// Step size matched to the element type's precision.
pub fn default_eps<T: Element>() -> f64 {
    match T::DTYPE {
        Dtype::F32 => 1e-3,
        Dtype::F64 => 1e-6,
    }
}

/// Relative tolerance matched to the element type's precision.
pub fn default_tol<T: Element>() -> f64 {
    match T::DTYPE {
        Dtype::F32 => 1e-3,
        Dtype::F64 => 1e-6,
    }
}

/// Central differences of a scalar function at `x`, one coordinate at a time.
pub fn fd_gradient<T: Element>(mut f: impl FnMut(&[T]) -> T, x: &[T], eps: f64) -> Vec<f64> {
    let mut pert = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    let e = T::from_f64(eps);
    for i in 0..x.len() {
        let orig = pert[i];
        pert[i] = orig + e;
        let hi = f(&pert).to_f64();
        pert[i] = orig - e;
        let lo = f(&pert).to_f64();
        pert[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Worst relative disagreement between analytic and numeric gradients.
/// Per component: `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_err<T: Element>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (a, &n) in analytic.iter().zip(numeric.iter()) {
        let a = a.to_f64();
        let denom = 1.0f64.max(a.abs()).max(n.abs());
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Assert the analytic gradient of `f` at `x` against central differences.
/// `analytic` must align with `x`. Panics with the worst component on failure.
pub fn assert_grads_close<T: Element>(
    f: impl FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    eps: f64,
    tol: f64,
    what: &str,
) {
    let numeric = fd_gradient(f, x, eps);
    let err = max_rel_err(analytic, &numeric);
    assert!(
        err <= tol,
        "{what}: gradient mismatch, max rel err {err:.3e} > tol {tol:.1e}"
    );
}

/// Exercise every differentiable tape operation once against central
/// differences at this seed. Panics on the first disagreement.
pub fn run_op_gradient_suite<T: Element>(seed: u64) {
    use crate::tensor::{Tape, Tensor, Val};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let eps = default_eps::<T>();
    let tol = default_tol::<T>();

    fn rand_tensor<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    // Loss is a fixed random weighting of the op output, kept O(1) in size so
    // f32 finite differences stay well conditioned.
    let check = |name: &str,
                     shapes: &[&[usize]],
                     build: &dyn Fn(&mut Tape<T>, &[Val]) -> Val| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(
            name.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)),
        ));
        let inputs: Vec<Tensor<T>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let mut tape = Tape::new();
        let vals: Vec<Val> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vals);
        let out_n = tape.value(out).numel();
        let wdata: Vec<T> = (0..out_n)
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0) / out_n as f64))
            .collect();
        let weights = Tensor::new(tape.value(out).shape().to_vec(), wdata.clone()).unwrap();
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vals[i])
                .unwrap_or_else(|| panic!("{name}: missing grad for input {i}"));
            let f = |xs: &[T]| {
                let mut tape = Tape::new();
                let vals: Vec<Val> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == i {
                            Tensor::new(t.shape().to_vec(), xs.to_vec()).unwrap()
                        } else {
                            t.clone()
                        };
                        tape.leaf(t, false)
                    })
                    .collect();
                let out = build(&mut tape, &vals);
                let wv = tape.constant(weights.clone());
                let prod = tape.mul(out, wv).unwrap();
                let loss = tape.sum(prod);
                tape.value(loss).item()
            };
            assert_grads_close(f, input.data(), analytic, eps, tol, &format!("{name}[input {i}]"));
        }
    };

    check("add", &[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", &[&[2, 3], &[2, 3]], &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", &[&[2, 3], &[2, 3]], &|t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", &[&[7]], &|t, v| t.scale(v[0], -1.7));
    check("gelu", &[&[3, 4]], &|t, v| t.gelu(v[0]));
    check("softmax_last", &[&[2, 5]], &|t, v| t.softmax(v[0], 1).unwrap());
    check("softmax_mid", &[&[3, 4, 2]], &|t, v| t.softmax(v[0], 1).unwrap());
    check("log_softmax", &[&[2, 5]], &|t, v| t.log_softmax(v[0], 1).unwrap());
    check("layer_norm", &[&[2, 3, 4], &[4], &[4]], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check("linear", &[&[2, 3, 4], &[4, 5], &[5]], &|t, v| {
        t.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    check("linear_nobias", &[&[3, 4], &[4, 2]], &|t, v| t.linear(v[0], v[1], None).unwrap());
    check("dwconv2d", &[&[2, 4, 4, 3], &[3, 3, 3]], &|t, v| t.dwconv2d(v[0], v[1]).unwrap());
    check("tconv_pc", &[&[4, 2, 2, 3], &[3, 3]], &|t, v| t.tconv_pc(v[0], v[1]).unwrap());
    check("tconv_mix", &[&[4, 2, 2, 3], &[3, 3, 3]], &|t, v| t.tconv_mix(v[0], v[1]).unwrap());
    check("avg_pool_keep", &[&[2, 3, 4, 2]], &|t, v| {
        t.avg_pool(v[0], &[1, 2], true).unwrap()
    });
    check("avg_pool_squeeze", &[&[2, 3, 4, 2]], &|t, v| {
        t.avg_pool(v[0], &[0, 1, 2], false).unwrap()
    });
    check("broadcast_to", &[&[2, 1, 1, 3]], &|t, v| {
        t.broadcast_to(v[0], &[2, 4, 2, 3]).unwrap()
    });
    check("slice_last", &[&[2, 3, 6]], &|t, v| t.slice_last(v[0], 1, 4).unwrap());
    check("select", &[&[7]], &|t, v| t.select(v[0], 3).unwrap());
    check("sum", &[&[3, 3]], &|t, v| t.sum(v[0]));
    check("mean", &[&[3, 3]], &|t, v| t.mean(v[0]));
    check("reshape", &[&[2, 6]], &|t, v| t.reshape(v[0], vec![3, 4]).unwrap());
    check("patch_merge", &[&[2, 4, 6, 3]], &|t, v| t.patch_merge(v[0], 2).unwrap());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_derivative() {
        // f(x) = x0² + 3 x1, df = [2 x0, 3]
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        let x = [1.5f64, -2.0];
        let g = fd_gradient(f, &x, 1e-6);
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
        assert!(max_rel_err(&[3.0f64, 3.0], &g) < 1e-8);
    }

    #[test]
    fn eps_scales_with_dtype() {
        assert_eq!(default_eps::<f32>(), 1e-3);
        assert_eq!(default_eps::<f64>(), 1e-6);
        assert_eq!(default_tol::<f32>(), 1e-3);
        assert_eq!(default_tol::<f64>(), 1e-6);
    }
}
