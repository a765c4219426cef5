//! Central-difference verification of analytic gradients.

use super::{GradStore, ParamSet, Scalar};
use crate::{GlrError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` gradients of `f` against central differences on a
/// random subsample of at least `min_coords` coordinates (all of them when the
/// parameter set is small). Errors are measured relative to
/// max(|analytic|, |numeric|, global max |analytic|), so uniformly tiny
/// gradients do not inflate the report; the returned value is the max over
/// sampled coordinates.
pub fn finite_diff_check<S, F>(
    mut f: F,
    params: &ParamSet<S>,
    analytic: &GradStore<S>,
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamSet<S>) -> Result<S>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| params.get(n).unwrap().numel())
        .collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(GlrError::Config("finite_diff_check: no parameters".into()));
    }
    for n in &names {
        let a = analytic.get(n)?;
        if a.dims() != params.get(n)?.dims() {
            return Err(GlrError::Shape(format!(
                "analytic grad shape mismatch for {n:?}"
            )));
        }
    }

    let want = min_coords.max(200).min(total);
    let mut coords: Vec<usize> = if want == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut v = Vec::with_capacity(want);
        while v.len() < want {
            let c = rng.random_range(0..total);
            if seen.insert(c) {
                v.push(c);
            }
        }
        v
    };
    coords.sort_unstable();

    let g_scale = names
        .iter()
        .map(|n| analytic.get(n).unwrap().max_abs())
        .fold(0.0f64, f64::max);

    let locate = |flat: usize| -> (usize, usize) {
        let mut rest = flat;
        for (pi, &sz) in sizes.iter().enumerate() {
            if rest < sz {
                return (pi, rest);
            }
            rest -= sz;
        }
        unreachable!("coordinate within total")
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        n_coords: coords.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for flat in coords {
        let (pi, idx) = locate(flat);
        let name = &names[pi];
        let orig = work.get(name)?.data()[idx];
        let hs = S::from_f64(h);

        work.get_mut(name)?.data_mut()[idx] = orig + hs;
        let fp = f(&work)?.as_f64();
        work.get_mut(name)?.data_mut()[idx] = orig - hs;
        let fm = f(&work)?.as_f64();
        work.get_mut(name)?.data_mut()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GlrError::NonFinite(format!(
                "objective non-finite while perturbing {name:?}[{idx}]"
            )));
        }

        let numeric = (fp - fm) / (2.0 * h);
        let an = analytic.get(name)?.data()[idx].as_f64();
        let denom = an.abs().max(numeric.abs()).max(g_scale).max(1e-300);
        let rel = (an - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), idx, an, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_objective_checks_at_roundoff() {
        // f = sum(c .* p): gradient is exactly c.
        let c: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut params = ParamSet::new();
        params
            .insert("p", Tensor::from_vec(&[300], vec![0.5; 300]).unwrap())
            .unwrap();
        let mut grads = GradStore::new();
        grads
            .insert("p", Tensor::from_vec(&[300], c.clone()).unwrap())
            .unwrap();
        let f = |p: &ParamSet<f64>| -> crate::Result<f64> {
            Ok(p.get("p")?.data().iter().zip(&c).map(|(a, b)| a * b).sum())
        };
        let rep = finite_diff_check(f, &params, &grads, 1e-5, 200, 42).unwrap();
        assert!(rep.n_coords >= 200);
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let c: Vec<f64> = (0..50).map(|i| 1.0 + i as f64).collect();
        let mut params = ParamSet::new();
        params
            .insert("p", Tensor::from_vec(&[50], vec![0.1; 50]).unwrap())
            .unwrap();
        let mut grads = GradStore::new();
        // Deliberately doubled gradients.
        grads
            .insert(
                "p",
                Tensor::from_vec(&[50], c.iter().map(|v| 2.0 * v).collect()).unwrap(),
            )
            .unwrap();
        let f = |p: &ParamSet<f64>| -> crate::Result<f64> {
            Ok(p.get("p")?.data().iter().zip(&c).map(|(a, b)| a * b).sum())
        };
        let rep = finite_diff_check(f, &params, &grads, 1e-5, 200, 42).unwrap();
        assert!(
            rep.max_rel_err > 1e-2,
            "should flag corruption, got {}",
            rep.max_rel_err
        );
    }
}
