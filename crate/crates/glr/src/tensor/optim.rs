//! Adam with bias correction and global-norm gradient clipping.

use super::{GradStore, NamedTensors, ParamSet, Scalar, Tensor};
use crate::{GlrError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamHyper<S> {
    pub fn with_lr(lr: S) -> Self {
        AdamHyper {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: NamedTensors<S>,
    pub v: NamedTensors<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update, in place. Params, grads, and moments must share names and
/// shapes (insertion order of `params` drives the update order).
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &GradStore<S>,
    state: &mut AdamState<S>,
    hp: &AdamHyper<S>,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = S::one() - hp.beta1.powi(t as i32);
    let bc2 = S::one() - hp.beta2.powi(t as i32);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let g = grads.get(name)?;
        let p = params.get_mut(name)?;
        if g.dims() != p.dims() {
            return Err(GlrError::Shape(format!(
                "adam: grad dims {:?} vs param dims {:?} for {name:?}",
                g.dims(),
                p.dims()
            )));
        }
        let m = state.m.get_mut(name)?;
        update_moment(m, g, hp.beta1, false)?;
        let v = state.v.get_mut(name)?;
        update_moment(v, g, hp.beta2, true)?;
        let m = state.m.get(name)?;
        let v = state.v.get(name)?;
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

fn update_moment<S: Scalar>(
    m: &mut Tensor<S>,
    g: &Tensor<S>,
    beta: S,
    squared: bool,
) -> Result<()> {
    if m.dims() != g.dims() {
        return Err(GlrError::Shape("adam: moment/grad shape mismatch".into()));
    }
    let one_minus = S::one() - beta;
    for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
        let upd = if squared { gv * gv } else { gv };
        *mv = beta * *mv + one_minus * upd;
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. The norm is accumulated in f64 regardless of S.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradStore<S>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(GlrError::Bounds(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0f64;
    for (_, t) in grads.iter() {
        for &v in t.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale_assign(S::from_f64(max_norm / norm));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![v]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single_param(1.25);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamHyper::with_lr(0.1)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With g=1 the bias-corrected moments are both exactly 1, so the update
        // is lr / (1 + eps).
        let mut p = single_param(0.0);
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut()[0] = 1.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamHyper::with_lr(0.1)).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-6, "w={w}");
    }

    #[test]
    fn quadratic_descent_is_monotone_after_warmup() {
        // f(w) = (w - 3)^2, df/dw = 2(w - 3).
        let mut p = single_param(0.0);
        let mut st = AdamState::new(&p);
        let hp = AdamHyper::with_lr(0.1);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let w = p.get("w").unwrap().data()[0];
            losses.push((w - 3.0) * (w - 3.0));
            let mut g = p.zeros_like();
            g.get_mut("w").unwrap().data_mut()[0] = 2.0 * (w - 3.0);
            adam_step(&mut p, &g, &mut st, &hp).unwrap();
        }
        for i in 2..losses.len() {
            assert!(
                losses[i] < losses[i - 1],
                "loss should decrease after step 2: {losses:?}"
            );
        }
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut g = GradStore::<f64>::new();
        g.insert("a", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let pre = clip_global_norm(&mut g, 1.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        let d = g.get("a").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);

        let mut g2 = GradStore::<f64>::new();
        g2.insert("a", Tensor::from_vec(&[2], vec![0.3, 0.4]).unwrap())
            .unwrap();
        let before = g2.clone();
        let pre = clip_global_norm(&mut g2, 1.0).unwrap();
        assert!((pre - 0.5).abs() < 1e-12);
        assert_eq!(g2, before);

        assert!(clip_global_norm(&mut g2, 0.0).is_err());
    }
}
