use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// differences at `point`.
///
/// `build` records the function on a fresh graph given the leaf holding the
/// point and returns the scalar output. The result is the maximum over leaf
/// entries of `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(point.clone(), true);
    let out = build(&mut g, leaf)?;
    let analytic = g.gradient(out, &[leaf])?.remove(0);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(p, false);
        let out = build(&mut g, leaf)?;
        Ok(g.scalar(out))
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn check<F: Fn(&mut Graph, Var) -> Result<Var>>(f: F, p: &Tensor) -> f64 {
        finite_difference_check(f, p, 1e-5).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::row_vector(vec![0.3, -1.2, 2.0]);
        let err = check(
            |g, x| {
                let w = g.constant(Tensor::row_vector(vec![1.5, -2.0, 0.25]));
                let y = g.mul(x, w)?;
                g.sum(y)
            },
            &p,
        );
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::row_vector(vec![0.3, -1.2]);
        let err = check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 4.0)
            },
            &p,
        );
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }

    // Every differentiable primitive against central differences on random inputs.
    #[test]
    fn primitives_pass_gradient_check() {
        let mut r = rng();
        let a = Tensor::randn(3, 4, 1.0, &mut r);
        let b = Tensor::randn(4, 2, 1.0, &mut r);
        let same = Tensor::randn(3, 4, 1.0, &mut r);
        let row = Tensor::randn(1, 4, 1.0, &mut r);
        let col = Tensor::randn(3, 1, 1.0, &mut r);
        let weights = Tensor::randn(3, 4, 1.0, &mut r);
        let positive = Tensor::matrix(3, 4, a.data().iter().map(|v| v.abs() + 0.5).collect());

        type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let w = weights.clone();
        let weighted = move |g: &mut Graph, y: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            g.sum(p)
        };
        let cases: Vec<(&str, Tensor, Case)> = vec![
            ("matmul_lhs", a.clone(), {
                let b = b.clone();
                Box::new(move |g, x| {
                    let bv = g.constant(b.clone());
                    let y = g.matmul(x, bv)?;
                    let t = g.tanh(y)?;
                    g.sum(t)
                })
            }),
            ("matmul_rhs", b.clone(), {
                let a = a.clone();
                Box::new(move |g, x| {
                    let av = g.constant(a.clone());
                    let y = g.matmul(av, x)?;
                    let t = g.tanh(y)?;
                    g.sum(t)
                })
            }),
            ("transpose", a.clone(), {
                let f = weighted.clone();
                Box::new(move |g, x| {
                    let t = g.transpose(x)?;
                    let t = g.transpose(t)?;
                    f(g, t)
                })
            }),
            ("mul_add_sub", a.clone(), {
                let (s, f) = (same.clone(), weighted.clone());
                Box::new(move |g, x| {
                    let sv = g.constant(s.clone());
                    let m = g.mul(x, x)?;
                    let ad = g.add(m, sv)?;
                    let sb = g.sub(ad, x)?;
                    f(g, sb)
                })
            }),
            ("add_row", row.clone(), {
                let (s, f) = (same.clone(), weighted.clone());
                Box::new(move |g, x| {
                    let sv = g.constant(s.clone());
                    let y = g.add_row(sv, x)?;
                    let y = g.mul(y, y)?;
                    f(g, y)
                })
            }),
            ("mul_col", col.clone(), {
                let (s, f) = (same.clone(), weighted.clone());
                Box::new(move |g, x| {
                    let sv = g.constant(s.clone());
                    let y = g.mul_col(sv, x)?;
                    let y = g.mul(y, y)?;
                    f(g, y)
                })
            }),
            (
                "gelu",
                a.clone(),
                Box::new({
                    let f = weighted.clone();
                    move |g, x| {
                        let y = g.gelu(x)?;
                        f(g, y)
                    }
                }),
            ),
            (
                "exp_log_sqrt",
                positive.clone(),
                Box::new({
                    let f = weighted.clone();
                    move |g, x| {
                        let y = g.log(x)?;
                        let y = g.exp(y)?;
                        let y = g.sqrt(y)?;
                        f(g, y)
                    }
                }),
            ),
            (
                "softmax",
                a.clone(),
                Box::new({
                    let f = weighted.clone();
                    move |g, x| {
                        let y = g.softmax(x, None)?;
                        f(g, y)
                    }
                }),
            ),
            (
                "masked_log_softmax",
                a.clone(),
                Box::new({
                    let f = weighted.clone();
                    move |g, x| {
                        let mask = Arc::new((0..12).map(|i| i % 5 != 0).collect::<Vec<_>>());
                        let y = g.log_softmax(x, Some(mask))?;
                        f(g, y)
                    }
                }),
            ),
            (
                "layer_norm_input",
                a.clone(),
                Box::new({
                    let (row, f) = (row.clone(), weighted.clone());
                    move |g, x| {
                        let gam = g.constant(row.clone());
                        let beta = g.constant(Tensor::full(1, 4, 0.1));
                        let y = g.layer_norm(x, gam, beta)?;
                        f(g, y)
                    }
                }),
            ),
            (
                "layer_norm_gamma",
                row.clone(),
                Box::new({
                    let (a, f) = (a.clone(), weighted.clone());
                    move |g, x| {
                        let av = g.constant(a.clone());
                        let beta = g.constant(Tensor::full(1, 4, 0.1));
                        let y = g.layer_norm(av, x, beta)?;
                        f(g, y)
                    }
                }),
            ),
            (
                "reductions",
                a.clone(),
                Box::new(|g, x| {
                    let c = g.sum_cols(x)?;
                    let c = g.mul(c, c)?;
                    let r = g.sum_rows(x)?;
                    let r = g.tanh(r)?;
                    let s1 = g.sum(c)?;
                    let s2 = g.mean(r)?;
                    g.add(s1, s2)
                }),
            ),
            (
                "indexing",
                a.clone(),
                Box::new({
                    let f = weighted.clone();
                    move |g, x| {
                        let rows = g.gather_rows(x, &[2, 0, 2])?;
                        let top = g.slice_rows(rows, 0, 2)?;
                        let left = g.slice_cols(x, 1, 2)?;
                        let picked = g.select_cols(x, &[3, 0])?;
                        let lc = g.concat_cols(&[left, picked])?;
                        let lc3 = g.slice_rows(lc, 0, 2)?;
                        let both = g.concat_rows(&[top, lc3])?;
                        let both = g.tanh(both)?;
                        let s = g.sum(both)?;
                        let rest = f(g, x)?;
                        g.add(s, rest)
                    }
                }),
            ),
            (
                "clamp_minimum",
                a.clone(),
                Box::new({
                    let (s, f) = (same.clone(), weighted.clone());
                    move |g, x| {
                        let sv = g.constant(s.clone());
                        let c = g.clamp(x, -0.8, 0.8)?;
                        let m = g.minimum(c, sv)?;
                        f(g, m)
                    }
                }),
            ),
        ];
        for (name, point, f) in cases {
            let err = finite_difference_check(|g, x| f(g, x), &point, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: rel. error {err}");
        }
    }
}
