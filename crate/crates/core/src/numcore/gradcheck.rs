use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, Var};
use crate::numcore::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar graph function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates of `x`.
///
/// `f` receives a fresh graph and the input variable and must return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let analytic = g.backward(out)?.wrt(v);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let out = f(&mut g, v)?;
        let y = g.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite function value at probe point".into()));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::graph::Axis;
    use crate::numcore::rng::SeededRng;

    #[test]
    fn quadratic() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(|g, v| g.mul(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mse_of_layer_norm() {
        let mut rng = SeededRng::new(17);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let target = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let gain = g.constant(Tensor::ones(&[4]));
                let bias = g.constant(Tensor::zeros(&[4]));
                let y = g.layer_norm(v, gain, bias, 1e-5)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| g.mul(v, v), &x, 1e-2).is_err());
    }

    // Every primitive, on random inputs of at most 64 elements.
    #[test]
    fn every_primitive_passes() {
        let mut rng = SeededRng::new(23);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let bias = Tensor::randn(&[6], 1.0, &mut rng);
        let t45 = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let t46 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let t64 = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let t24 = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let t43 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let t26 = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let table = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let angles: Vec<f64> = (0..24).map(|i| 0.3 * (i / 2) as f64).collect();
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();

        type Case<'a> = (&'a str, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>);
        let cases: Vec<Case> = vec![
            ("matmul_lhs", Box::new(|g, v| {
                let bb = g.constant(b.clone());
                let y = g.matmul(v, bb)?;
                let t = g.constant(t45.clone());
                g.mse(y, t)
            })),
            ("matmul_rhs", Box::new(|g, v| {
                let aa = g.constant(a.clone());
                let y = g.matmul(aa, v)?;
                let t = g.constant(t45.clone());
                g.mse(y, t)
            })),
            ("add", Box::new(|g, v| {
                let cc = g.constant(c.clone());
                let y = g.add(v, cc)?;
                let y = g.mul(y, y)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("add_row", Box::new(|g, v| {
                let aa = g.constant(a.clone());
                let y = g.add_row(aa, v)?;
                let y = g.mul(y, y)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("mul", Box::new(|g, v| {
                let cc = g.constant(c.clone());
                let y = g.mul(v, cc)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("scale", Box::new(|g, v| {
                let y = g.scale(v, -1.7)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("concat_rows", Box::new(|g, v| {
                let cc = g.constant(c.clone());
                let y = g.concat(&[cc, v], Axis::Rows)?;
                let y = g.mul(y, y)?;
                let t = g.constant(Tensor::concat_rows(&[&t46, &t46])?);
                g.mse(y, t)
            })),
            ("concat_cols", Box::new(|g, v| {
                let cc = g.constant(t24.clone().reshape(&[4, 2])?);
                let y = g.concat(&[v, cc], Axis::Cols)?;
                let y = g.mul(y, y)?;
                let y = g.slice(y, Axis::Cols, 0, 5)?;
                let t = g.constant(t45.clone());
                g.mse(y, t)
            })),
            ("slice_rows", Box::new(|g, v| {
                let y = g.slice(v, Axis::Rows, 1, 3)?;
                let y = g.mul(y, y)?;
                let t = g.constant(t26.clone());
                g.mse(y, t)
            })),
            ("transpose", Box::new(|g, v| {
                let y = g.transpose(v)?;
                let y = g.mul(y, y)?;
                let t = g.constant(t64.clone());
                g.mse(y, t)
            })),
            ("softmax", Box::new(|g, v| {
                let y = g.softmax(v)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("layer_norm_x", Box::new(|g, v| {
                let gain = g.constant(bias.clone());
                let bb = g.constant(Tensor::ones(&[6]));
                let y = g.layer_norm(v, gain, bb, 1e-5)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("layer_norm_gain", Box::new(|g, v| {
                let x = g.constant(a.clone());
                let bb = g.constant(Tensor::ones(&[6]));
                let y = g.layer_norm(x, v, bb, 1e-5)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("gelu", Box::new(|g, v| {
                let y = g.gelu(v)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("mse_rhs", Box::new(|g, v| {
                let cc = g.constant(c.clone());
                g.mse(cc, v)
            })),
            ("embedding", Box::new(|g, v| {
                let y = g.embedding(v, &[0, 3, 3, 1])?;
                let y = g.mul(y, y)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
            ("reshape", Box::new(|g, v| {
                let y = g.reshape(v, &[2, 12])?;
                let y = g.mul(y, y)?;
                let t = g.constant(t46.clone().reshape(&[2, 12])?);
                g.mse(y, t)
            })),
            ("rotary", Box::new(|g, v| {
                let y = g.rotary(v, &cos, &sin)?;
                let y = g.mul(y, y)?;
                let t = g.constant(t46.clone());
                g.mse(y, t)
            })),
        ];
        let inputs: Vec<&Tensor> = vec![
            &a, &b, &a, &bias, &a, &a, &a, &t43,
            &a, &a, &a, &a, &bias, &a, &a, &table, &a, &a,
        ];
        assert_eq!(inputs.len(), cases.len());
        for ((name, f), x) in cases.iter().zip(inputs) {
            assert!(x.len() <= 64);
            let err = grad_check(f, x, 1e-5).unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
