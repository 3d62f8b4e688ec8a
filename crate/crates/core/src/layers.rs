//! Composite blocks: N-repeat conv units, the 1×1 shortcut selector and
//! adaptive feature fusion.

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore, StatsEntry};
use crate::tensor::{ConvGeom, Scalar, Tensor4};

/// Batch-norm epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// Forward mode: batch statistics with running-stat updates, or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything a layer needs to record itself on a tape.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub stats: &'a mut [StatsEntry<T>],
    pub mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn leaf(&mut self, id: ParamId) -> NodeId {
        self.tape.param(id, self.params.get(id).clone())
    }
}

/// A convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub(crate) fn build<T: Scalar, R: rand::Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Self {
        let (weight, bias) = pb.conv(prefix, out_ch, in_ch / geom.groups, k);
        Conv {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            geom,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.leaf(self.weight);
        let b = ctx.leaf(self.bias);
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

/// 2×2 stride-2 transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.leaf(self.weight);
        let b = ctx.leaf(self.bias);
        ctx.tape.conv_transpose2x(x, w, b)
    }
}

/// Affine batch normalization.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
    pub ch: usize,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let g = ctx.leaf(self.gamma);
        let b = ctx.leaf(self.beta);
        let train = ctx.mode == Mode::Train;
        let stats = &mut ctx.stats[self.stats].stats;
        ctx.tape.batch_norm(x, g, b, stats, T::from_f64(NORM_EPS), train)
    }
}

/// conv → norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvUnit {
    pub(crate) fn build<T: Scalar, R: rand::Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let conv = Conv::build(
            pb,
            &format!("{prefix}/conv"),
            in_ch,
            out_ch,
            k,
            ConvGeom::same(k, dilation, 1),
        );
        let (gamma, beta, stats) = pb.norm(&format!("{prefix}/norm"), out_ch);
        ConvUnit {
            conv,
            norm: Norm {
                gamma,
                beta,
                stats,
                ch: out_ch,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
    pub repeats: usize,
}

impl ConvBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("conv block needs at least one unit".into()));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.k)));
        }
        if self.in_ch == 0 || self.out_ch == 0 || self.dilation == 0 {
            return Err(Error::Config(
                "conv block channels and dilation must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `repeats` conv units; the first maps `in_ch → out_ch`, the rest keep `out_ch`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub units: Vec<ConvUnit>,
}

impl ConvBlock {
    pub(crate) fn build<T: Scalar, R: rand::Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        spec: ConvBlockSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let units = (0..spec.repeats)
            .map(|i| {
                let cin = if i == 0 { spec.in_ch } else { spec.out_ch };
                ConvUnit::build(
                    pb,
                    &format!("{prefix}/unit{i}"),
                    cin,
                    spec.out_ch,
                    spec.k,
                    spec.dilation,
                )
            })
            .collect();
        Ok(ConvBlock { spec, units })
    }

    /// Records the block on the tape; see [`conv_block_forward`] for a tape-free call.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = ctx.tape.value(x).shape().c;
        if c != self.spec.in_ch {
            return Err(Error::shape(
                "conv_block",
                format!("input has {c} channels, block expects {}", self.spec.in_ch),
            ));
        }
        self.units.iter().try_fold(x, |h, u| u.forward(ctx, h))
    }
}

/// Runs a standalone block outside any model.
pub fn conv_block_forward<T: Scalar>(
    block: &ConvBlock,
    params: &ParamStore<T>,
    stats: &mut [StatsEntry<T>],
    x: &Tensor4<T>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let mut ctx = Ctx {
        tape: &mut tape,
        params,
        stats,
        mode,
    };
    let out = block.forward(&mut ctx, input)?;
    Ok(tape.value(out).clone())
}

/// `round(rate·ch)` with halves rounded up.
pub fn selected_channels(ch: usize, rate: f64) -> usize {
    (rate * ch as f64 + 0.5).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShortcutSelectSpec {
    pub in_ch: usize,
    pub rate: f64,
    pub groups: usize,
}

impl ShortcutSelectSpec {
    /// Grouped selection with one group per output channel when that divides
    /// the input evenly, dense otherwise.
    pub fn grouped(in_ch: usize, rate: f64) -> Self {
        let out = selected_channels(in_ch, rate);
        let groups = if out > 0 && in_ch.is_multiple_of(out) { out } else { 1 };
        ShortcutSelectSpec { in_ch, rate, groups }
    }

    pub fn dense(in_ch: usize, rate: f64) -> Self {
        ShortcutSelectSpec { in_ch, rate, groups: 1 }
    }

    pub fn out_ch(&self) -> usize {
        selected_channels(self.in_ch, self.rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("selection rate {} outside (0, 1]", self.rate)));
        }
        let out = self.out_ch();
        if out == 0 {
            return Err(Error::Config(format!(
                "selection rate {} keeps no channels of {}",
                self.rate, self.in_ch
            )));
        }
        if self.groups == 0 || !self.in_ch.is_multiple_of(self.groups) || !out.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} groups must divide {} inputs and {out} outputs",
                self.groups, self.in_ch
            )));
        }
        Ok(())
    }

    /// Weights plus biases of the selection convolution.
    pub fn param_count(&self) -> usize {
        let out = self.out_ch();
        out * (self.in_ch / self.groups) + out
    }
}

/// 1×1 convolution (bias, no norm) keeping `round(R·C)` channels.
#[derive(Clone, Debug)]
pub struct ShortcutSelect {
    pub spec: ShortcutSelectSpec,
    pub conv: Conv,
}

impl ShortcutSelect {
    pub(crate) fn build<T: Scalar, R: rand::Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        spec: ShortcutSelectSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let conv = Conv::build(
            pb,
            &format!("{prefix}/conv"),
            spec.in_ch,
            spec.out_ch(),
            1,
            ConvGeom::same(1, 1, spec.groups),
        );
        Ok(ShortcutSelect { spec, conv })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = ctx.tape.value(x).shape().c;
        if c != self.spec.in_ch {
            return Err(Error::shape(
                "shortcut_select",
                format!("input has {c} channels, selector expects {}", self.spec.in_ch),
            ));
        }
        self.conv.forward(ctx, x)
    }
}

/// Runs a standalone selector outside any model.
pub fn shortcut_select<T: Scalar>(sel: &ShortcutSelect, params: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let mut ctx = Ctx {
        tape: &mut tape,
        params,
        stats: &mut [],
        mode: Mode::Infer,
    };
    let out = sel.forward(&mut ctx, input)?;
    Ok(tape.value(out).clone())
}

/// Per-channel α (shortcut) and β (deep) weights of one decoder stage.
/// Disabled fusion is plain concatenation and owns no parameters.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub alpha: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub channels: usize,
}

impl FusionWeights {
    pub(crate) fn build<T: Scalar, R: rand::Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        channels: usize,
        enabled: bool,
    ) -> Self {
        if !enabled {
            return FusionWeights {
                alpha: None,
                beta: None,
                channels,
            };
        }
        FusionWeights {
            alpha: Some(pb.ones(&format!("{prefix}/alpha"), channels)),
            beta: Some(pb.ones(&format!("{prefix}/beta"), channels)),
            channels,
        }
    }

    pub fn enabled(&self) -> bool {
        self.alpha.is_some()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, shortcut: NodeId, deep_up: NodeId) -> Result<NodeId> {
        let (sc, dc) = (ctx.tape.value(shortcut).shape().c, ctx.tape.value(deep_up).shape().c);
        if sc != self.channels || dc != self.channels {
            return Err(Error::shape(
                "aff_fuse",
                format!("shortcut {sc} and deep {dc} channels must both equal {}", self.channels),
            ));
        }
        let (mut a, mut b) = (shortcut, deep_up);
        if let Some(alpha) = self.alpha {
            let w = ctx.leaf(alpha);
            a = ctx.tape.channel_scale(a, w)?;
        }
        if let Some(beta) = self.beta {
            let w = ctx.leaf(beta);
            b = ctx.tape.channel_scale(b, w)?;
        }
        ctx.tape.concat(a, b)
    }
}

/// `concat(α ⊙ shortcut, β ⊙ deep_up)`; plain concatenation when disabled.
pub fn aff_fuse<T: Scalar>(
    w: &FusionWeights,
    params: &ParamStore<T>,
    shortcut: &Tensor4<T>,
    deep_up: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let a = tape.input(shortcut.clone());
    let b = tape.input(deep_up.clone());
    let mut ctx = Ctx {
        tape: &mut tape,
        params,
        stats: &mut [],
        mode: Mode::Infer,
    };
    let out = w.forward(&mut ctx, a, b)?;
    Ok(tape.value(out).clone())
}
