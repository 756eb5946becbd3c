use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the largest relative error.
///
/// The error for one coordinate is `|a - n| / max(|a|, |n|, 1)`, so tiny
/// gradients are judged on absolute error. The graph runs in eval mode in
/// 64-bit precision.
pub fn grad_check<Func>(f: Func, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::eval();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::shape(format!(
                "grad_check needs a scalar output, got {:?}",
                g.shape(out)
            )));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::<f64>::eval();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.0, 7.0]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 1e-5).is_err());
    }

    #[test]
    fn bad_eps_is_error() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.0).is_err());
    }
}
