use crate::autodiff::GradStore;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Tensor4<T>> = params.iter().map(|(_, e)| Tensor4::zeros(e.value.shape())).collect();
        OptimizerState {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn adamw_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("state tracks {} tensors, store has {}", state.m.len(), params.len()),
        ));
    }
    for (id, g) in grads.iter() {
        if id.0 >= params.len() || g.shape() != params.get(id).shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient for parameter {} has the wrong shape", id.0),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    let c = state.cfg;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = params.get_mut(id);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].to_f64());
            let mi = c.beta1 * m.data()[i].to_f64() + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v.data()[i].to_f64() + (1.0 - c.beta2) * gi * gi;
            m.data_mut()[i] = T::from_f64(mi);
            v.data_mut()[i] = T::from_f64(vi);
            let mut w = p.data()[i].to_f64();
            w -= lr * c.weight_decay * w;
            w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            p.data_mut()[i] = T::from_f64(w);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::params::ParamRole;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w", ParamRole::ConvWeight, Tensor4::vector(&[w]));
        s
    }

    fn grad(g: f64) -> GradStore<f64> {
        let mut gs = GradStore::new();
        gs.accumulate(ParamId(0), Tensor4::vector(&[g]));
        gs
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut st, &mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn hand_stepped_scalar() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_step(&mut st, &mut p, &grad(1.0), 0.1).unwrap();
        // decay: 1 − 0.1·0.01 = 0.999; m̂ = 1, v̂ = 1, step = 0.1/(1 + 1e-8)
        let expect = 0.999 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(ParamId(0)).data()[0] - expect).abs() < 1e-15);
        adamw_step(&mut st, &mut p, &grad(-0.5), 0.1).unwrap();
        let (m, v) = (0.9 * 0.1 + 0.1 * -0.5, 0.999 * 0.001 + 0.001 * 0.25);
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let expect = expect * (1.0 - 0.001) - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p.get(ParamId(0)).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_wd_w() {
        let mut p = scalar_store(2.0);
        let mut st = OptimizerState::new(
            &p,
            AdamWConfig {
                weight_decay: 0.3,
                ..Default::default()
            },
        );
        adamw_step(&mut st, &mut p, &GradStore::new(), 0.1).unwrap();
        assert!((p.get(ParamId(0)).data()[0] - (2.0 - 0.1 * 0.3 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        assert!(adamw_step(&mut st, &mut p, &grad(f64::INFINITY), 0.1).is_err());
        assert_eq!(p.get(ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3, 0.0).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-15);
    }
}
