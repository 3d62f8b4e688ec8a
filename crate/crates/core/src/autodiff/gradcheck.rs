//! Central finite-difference verification of model gradients.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{OpKind, ParamId, Tape};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::models::ModelGraph;
use crate::tensor::Tensor4;
use crate::training::{composite_loss, LossWeights};

/// Scalar objective differentiated by the check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckLoss {
    /// The training loss against a target mask.
    Composite(LossWeights),
    /// Sum of all logits; the target is ignored.
    Sum,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub mode: Mode,
    pub loss: CheckLoss,
    /// Floor of the relative-error denominator.
    pub floor: f64,
    /// Corrupts one backward rule; for negative controls only.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            mode: Mode::Train,
            loss: CheckLoss::Composite(LossWeights::default()),
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Probes that needed a reduced step to stay clear of a ReLU or pooling switch.
    pub reduced_steps: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub eps: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.pass)
    }

    /// `param-name  max-rel-err  PASS|FAIL` lines and a verdict line.
    pub fn to_text(&self) -> String {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for p in &self.params {
            let _ = writeln!(
                s,
                "{:<width$}  {:.3e}  {}",
                p.name,
                p.max_rel_err,
                if p.pass { "PASS" } else { "FAIL" }
            );
        }
        let fails = self.failures().count();
        if fails == 0 {
            s.push_str("ALL PASS\n");
        } else {
            let _ = writeln!(s, "FAIL {fails} of {} parameters", self.params.len());
        }
        s
    }
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate(
    model: &ModelGraph<f64>,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    opts: &GradCheckOptions,
    grads: bool,
) -> Result<(Eval, Option<super::GradStore<f64>>)> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.corrupt_backward(kind);
    }
    let x = tape.input(input.clone());
    let out = m.forward_on(&mut tape, x, opts.mode)?;
    let logits = tape.value(out);
    let (loss, seed) = match opts.loss {
        CheckLoss::Composite(w) => {
            if let Some(bad) = tape.first_non_finite() {
                return Err(non_finite(&tape, bad));
            }
            composite_loss(logits, target, w)?
        }
        CheckLoss::Sum => (logits.sum(), Tensor4::full(logits.shape(), 1.0)),
    };
    if !loss.is_finite() {
        return Err(match tape.first_non_finite() {
            Some(bad) => non_finite(&tape, bad),
            None => Error::NonFinite("loss".into()),
        });
    }
    let g = if grads { Some(tape.backward(out, &seed)?) } else { None };
    Ok((
        Eval {
            loss,
            signature: tape.kink_signature(),
        },
        g,
    ))
}

fn non_finite(tape: &Tape<f64>, node: super::NodeId) -> Error {
    Error::NonFinite(format!(
        "loss: first non-finite value produced by layer {}",
        tape.layer_of(node).unwrap_or("<unlabelled>")
    ))
}

/// Compares backpropagated gradients of every parameter scalar with central
/// differences. Probes whose step would cross a ReLU or max-pool switch are
/// retried with steps shrunk by 10× and 100×. A probe that still crosses one
/// falls back to a one-sided difference on the side matching the unperturbed
/// switch pattern, which agrees with the subgradient backprop uses at a kink.
pub fn finite_diff_check(
    model: &ModelGraph<f64>,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (base, grads) = evaluate(model, input, target, opts, true)?;
    let grads = grads.expect("gradients requested");
    let clean = GradCheckOptions {
        fault: None,
        ..opts.clone()
    };

    let probes: Vec<(ParamId, usize)> = model
        .params
        .iter()
        .flat_map(|(id, e)| (0..e.value.len()).map(move |i| (id, i)))
        .collect();
    let results: Vec<(f64, bool)> = probes
        .par_iter()
        .map(|&(id, i)| {
            let steps = [opts.eps, opts.eps / 10.0, opts.eps / 100.0];
            let mut m = model.clone();
            let v = m.params.get(id).data()[i];
            for (k, h) in steps.into_iter().enumerate() {
                m.params.get_mut(id).data_mut()[i] = v + h;
                let (plus, _) = evaluate(&m, input, target, &clean, false)?;
                m.params.get_mut(id).data_mut()[i] = v - h;
                let (minus, _) = evaluate(&m, input, target, &clean, false)?;
                let (p_ok, m_ok) = (plus.signature == base.signature, minus.signature == base.signature);
                if p_ok && m_ok {
                    return Ok(((plus.loss - minus.loss) / (2.0 * h), k > 0));
                }
                if k + 1 == steps.len() {
                    let numeric = match (p_ok, m_ok) {
                        (true, _) => (plus.loss - base.loss) / h,
                        (_, true) => (base.loss - minus.loss) / h,
                        _ => (plus.loss - minus.loss) / (2.0 * h),
                    };
                    return Ok((numeric, true));
                }
            }
            unreachable!("step list is non-empty")
        })
        .collect::<Result<_>>()?;

    let mut params = Vec::with_capacity(model.params.len());
    let mut at = 0;
    for (id, e) in model.params.iter() {
        let analytic = grads.get_or_zeros(id, e.value.shape());
        let (mut rel, mut abs, mut reduced_steps) = (0.0f64, 0.0f64, 0);
        for i in 0..e.value.len() {
            let (n, reduced) = results[at];
            at += 1;
            let a = analytic.data()[i];
            let diff = (a - n).abs();
            abs = abs.max(diff);
            rel = rel.max(diff / a.abs().max(n.abs()).max(opts.floor));
            reduced_steps += usize::from(reduced);
        }
        params.push(ParamCheck {
            name: e.name.clone(),
            numel: e.value.len(),
            max_rel_err: rel,
            max_abs_err: abs,
            reduced_steps,
            pass: rel < opts.tol,
        });
    }
    Ok(GradCheckReport {
        params,
        eps: opts.eps,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;
    use crate::tensor::Shape4;

    fn input(shape: Shape4) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |n, c, y, x| {
            (((n * 7 + c) * 31 + y * 5 + x * 3) as f64 * 0.61).sin()
        })
    }

    #[test]
    fn bias_gradient_at_zero_logits() {
        let mut m: ModelGraph<f64> = ModelGraph::build_with(&ArchConfig::simple_unet(4), 0).unwrap();
        m.params.get_mut(m.head.weight).data_mut().fill(0.0);
        let x = Tensor4::zeros(Shape4::new(1, 3, 16, 16));
        let t = Tensor4::from_fn(Shape4::new(1, 1, 16, 16), |_, _, y, _| if y < 4 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let xi = tape.input(x);
        let out = m.forward_on(&mut tape, xi, Mode::Infer).unwrap();
        let (_, seed) = composite_loss(tape.value(out), &t, LossWeights { bce: 1.0, dice: 0.0 }).unwrap();
        let g = tape.backward(out, &seed).unwrap();
        let gb = g.get(m.head.bias).unwrap().data()[0];
        assert!((gb - (0.5 - 0.25)).abs() < 1e-6, "{gb}");
    }

    #[test]
    fn tiny_model_passes_and_fault_is_caught() {
        let m: ModelGraph<f64> = ModelGraph::build_with(&ArchConfig::simple_unet(4), 2).unwrap();
        let x = input(Shape4::new(2, 3, 16, 16));
        let t = Tensor4::from_fn(Shape4::new(2, 1, 16, 16), |n, _, y, x| {
            ((y + x + n) % 3 == 0) as u8 as f64
        });
        let opts = GradCheckOptions::default();
        let report = finite_diff_check(&m, &x, &t, &opts).unwrap();
        assert!(report.all_pass(), "{}", report.to_text());

        let bad = GradCheckOptions {
            fault: Some(OpKind::ChannelScale),
            ..opts
        };
        let report = finite_diff_check(&m, &x, &t, &bad).unwrap();
        let failed: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|n| n.contains("/fuse/")), "{failed:?}");
    }

    #[test]
    fn non_finite_loss_names_layer() {
        let mut m: ModelGraph<f64> = ModelGraph::build_with(&ArchConfig::simple_unet(4), 0).unwrap();
        let id = m.params.find("enc3/unit0/conv/bias").unwrap();
        m.params.get_mut(id).data_mut()[0] = f64::NAN;
        let x = input(Shape4::new(1, 3, 16, 16));
        let t = Tensor4::zeros(Shape4::new(1, 1, 16, 16));
        let err = finite_diff_check(&m, &x, &t, &GradCheckOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("enc3"), "{err}");
    }
}
