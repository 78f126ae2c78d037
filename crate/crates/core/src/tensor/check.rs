//! Finite-difference gradient checking.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Compare analytic gradients of a scalar function against central
/// finite differences.
///
/// `build` receives a fresh graph plus one leaf per parameter (in the
/// order of `params`) and must return the scalar loss. Returns the
/// maximum over all parameter elements of
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn grad_check<T, F>(build: F, params: &[Tensor<T>], step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss);
        if value.numel() != 1 {
            return Err(Error::Usage("grad_check expects a scalar function".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite loss during gradient check".into()));
        }
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); g.value(v).numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + T::from_f64(step);
            let (g_plus, _, l_plus) = eval(&work)?;
            let f_plus = g_plus.value(l_plus).data()[0].to_f64();
            work[p].data_mut()[i] = orig - T::from_f64(step);
            let (g_minus, _, l_minus) = eval(&work)?;
            let f_minus = g_minus.value(l_minus).data()[0].to_f64();
            work[p].data_mut()[i] = orig;

            let central = (f_plus - f_minus) / (2.0 * step);
            if !central.is_finite() {
                return Err(Error::Numeric("non-finite finite-difference quotient".into()));
            }
            let rel = (analytic[p][i].to_f64() - central).abs() / (central.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let params = [Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap()];
        let err = grad_check(
            |g, vars| {
                let c = g.leaf(Tensor::new(vec![3], vec![2.0, 3.0, -1.0]).unwrap(), false);
                let prod = g.mul(vars[0], c)?;
                Ok(g.sum(prod))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear grad check err {err}");
    }

    #[test]
    fn random_conv_kernel_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::new(2, 2, 3, vec![3, 3], vec![1, 1], vec![1, 1], false).unwrap();
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&spec.weight_shape(), 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let err = grad_check(
            |g, vars| {
                let y = g.conv_nd(vars[0], vars[1], Some(vars[2]), &spec)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv grad check err {err}");
    }

    #[test]
    fn dice_loss_graph_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::<f64>::randn(&[1, 3, 8], 1.0, &mut rng);
        let target = [0u16, 1, 2, 1, 0, 2, 2, 1];
        let err = grad_check(
            |g, vars| {
                let p = g.softmax_channels(vars[0])?;
                g.dice_loss(p, &target, 1e-5)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dice grad check err {err}");
    }
}
