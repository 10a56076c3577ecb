use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Central-difference gradient check.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// parameters. Every coordinate is perturbed by `±step`; the result is the
/// largest `|g_fd − g| / max(1, |g_fd|, |g|)`.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, ParamStore)>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidInput(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric("objective is not finite at the base point".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic.get(&name).ok().map(|t| t.values().to_vec());
        for i in 0..n {
            let original = params.get(&name)?.values()[i];
            probe.get_mut(&name)?.values_mut()[i] = original + step;
            let plus = f(&probe)?.0;
            probe.get_mut(&name)?.values_mut()[i] = original - step;
            let minus = f(&probe)?.0;
            probe.get_mut(&name)?.values_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite when perturbing {name}[{i}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * step);
            let g = grad.as_ref().map_or(0.0, |v| v[i]);
            let rel = (fd - g).abs() / 1f64.max(fd.abs()).max(g.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::vector(vec![0.3, -1.2, 2.5])).unwrap();
        let f = |s: &ParamStore| {
            let t = s.get("theta")?;
            let v = 0.5 * t.values().iter().map(|x| x * x).sum::<f64>();
            let mut g = ParamStore::new();
            g.insert("theta", t.clone())?;
            Ok((v, g))
        };
        assert!(finite_diff_check(f, &p, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::vector(vec![1.0])).unwrap();
        let f = |s: &ParamStore| {
            let t = s.get("theta")?;
            let mut g = ParamStore::new();
            g.insert("theta", Tensor::vector(vec![0.0]))?;
            Ok((t.values()[0].powi(2), g))
        };
        assert!(finite_diff_check(f, &p, 1e-5).unwrap() > 0.5);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::vector(vec![0.0])).unwrap();
        let ok = |s: &ParamStore| Ok((s.get("theta")?.values()[0], ParamStore::new()));
        assert!(finite_diff_check(ok, &p, 1e-2).is_err());
        let blowup = |s: &ParamStore| {
            let x = s.get("theta")?.values()[0];
            Ok((if x > 0.0 { f64::INFINITY } else { 0.0 }, ParamStore::new()))
        };
        assert!(matches!(finite_diff_check(blowup, &p, 1e-5), Err(Error::Numeric(_))));
    }
}
