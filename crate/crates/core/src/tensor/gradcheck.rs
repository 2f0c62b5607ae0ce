//! Central finite differences, used as an independent oracle for `backward`.

use std::collections::BTreeMap;

use super::array::Tensor;
use super::params::ParamSet;
use crate::error::Result;

/// Numeric gradient of `f` with respect to every element of every trainable
/// parameter: `(f(p+h) − f(p−h)) / 2h`.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &ParamSet,
    h: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let paths: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    for path in paths {
        let base = params.value(&path)?.clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            let orig = base.data()[i];
            work.get_mut(&path).unwrap().value.data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&path).unwrap().value.data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&path).unwrap().value.data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(path, grad);
    }
    Ok(out)
}

/// Numeric gradient of a function of a single tensor.
pub fn finite_diff_tensor<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut work = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + h;
        let up = f(&work)?;
        work.data_mut()[i] = orig - h;
        let down = f(&work)?;
        work.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`, maximized over elements.
///
/// The floor keeps near-zero gradients from turning rounding noise into
/// large relative errors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_h_squared() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_tensor(|t| Ok(t.data().iter().map(|v| 3.0 * v * v).sum()), &x, 1e-5)
            .unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 6.0 * xv).abs() < 1e-8);
        }
    }
}
