use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, dice: 1.0 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `λ_bce·mean BCE(σ(z), t) + λ_dice·(1 − mean_b softDice_b)` and its gradient
/// with respect to the logits. Dice is computed per batch item.
pub fn composite_loss<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>, w: LossWeights) -> Result<(T, Tensor4<T>)> {
    let s = logits.shape();
    if target.shape() != s {
        return Err(Error::shape(
            "composite_loss",
            format!("logits {s} vs target {}", target.shape()),
        ));
    }
    let per_item = s.c * s.plane();
    let z = logits.data();
    let t = target.data();
    if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits of batch item {}", bad / per_item)));
    }
    let total = z.len() as f64;
    let mut bce = 0.0;
    let mut grad = vec![T::zero(); z.len()];
    let mut dice_sum = 0.0;
    for b in 0..s.n {
        let range = b * per_item..(b + 1) * per_item;
        let mut inter = 0.0;
        let mut mass = 0.0;
        let mut probs = Vec::with_capacity(per_item);
        for i in range.clone() {
            let (zi, ti) = (z[i].to_f64(), t[i].to_f64());
            bce += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
            let p = sigmoid(zi);
            probs.push(p);
            inter += p * ti;
            mass += p + ti;
        }
        let den = mass + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        dice_sum += num / den;
        for (j, i) in range.enumerate() {
            let (p, ti) = (probs[j], t[i].to_f64());
            let d_dice_dp = (2.0 * ti * den - num) / (den * den);
            let dz = w.bce * (p - ti) / total - w.dice * d_dice_dp * p * (1.0 - p) / s.n as f64;
            grad[i] = T::from_f64(dz);
        }
    }
    let loss = w.bce * bce / total + w.dice * (1.0 - dice_sum / s.n as f64);
    Ok((T::from_f64(loss), Tensor4::from_vec(s, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let z = Tensor4::<f64>::zeros(Shape4::new(1, 1, 2, 2));
        let t = Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0);
        let (l, _) = composite_loss(&z, &t, LossWeights { bce: 1.0, dice: 0.0 }).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_logits_have_tiny_loss() {
        let t = Tensor4::from_fn(Shape4::new(2, 1, 4, 4), |n, _, y, x| ((n + y + x) % 2) as f64);
        let z = t.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let (l, _) = composite_loss(&z, &t, LossWeights::default()).unwrap();
        assert!(l < 1e-3, "{l}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = Shape4::new(2, 1, 3, 3);
        let z = Tensor4::from_fn(s, |n, _, y, x| ((n * 9 + y * 3 + x) as f64 * 0.77).sin() * 2.0);
        let t = Tensor4::from_fn(s, |n, _, y, x| ((n + y * x) % 2) as f64);
        let w = LossWeights { bce: 0.7, dice: 1.3 };
        let (_, g) = composite_loss(&z, &t, w).unwrap();
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += eps;
            let mut zm = z.clone();
            zm.data_mut()[i] -= eps;
            let num = (composite_loss(&zp, &t, w).unwrap().0 - composite_loss(&zm, &t, w).unwrap().0) / (2.0 * eps);
            let a = g.data()[i];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4,
                "{i}: {a} vs {num}"
            );
        }
    }

    #[test]
    fn non_finite_logits_name_the_item() {
        let mut z = Tensor4::<f32>::zeros(Shape4::new(3, 1, 2, 2));
        z.data_mut()[9] = f32::NAN;
        let t = Tensor4::zeros(z.shape());
        let err = composite_loss(&z, &t, LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("batch item 2"), "{err}");
    }
}
