use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ArchConfig, ShortcutGrouping, UpsampleMode, Variant};
use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::layers::{
    selected_channels, Conv, ConvBlock, ConvBlockSpec, ConvTranspose, ConvUnit, Ctx, FusionWeights, Mode,
    ShortcutSelect, ShortcutSelectSpec,
};
use crate::params::{ParamBuilder, ParamStore, StatsEntry};
use crate::tensor::{ConvGeom, NormStats, Scalar, Shape4, Tensor4};

/// Number of resolution stages of every built model.
pub const STAGES: usize = 5;

/// How a decoder stage lifts the deeper feature map to its resolution.
#[derive(Clone, Debug)]
pub enum UpPath {
    /// Optional 1×1 channel selection at the deep resolution, then nearest 2×.
    Nearest {
        select: Option<Conv>,
    },
    /// Nearest 2× followed by a conv unit.
    Conv(ConvUnit),
    Transposed(ConvTranspose),
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: UpPath,
    pub fusion: FusionWeights,
    pub block: ConvBlock,
}

/// A built encoder-decoder network with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct ModelGraph<T> {
    pub cfg: ArchConfig,
    depth: usize,
    pub encoders: Vec<ConvBlock>,
    pub shortcuts: Vec<Option<ShortcutSelect>>,
    pub bottleneck: Option<ConvBlock>,
    /// Indexed by stage, shallowest first.
    pub decoders: Vec<DecoderStage>,
    pub head: Conv,
    pub params: ParamStore<T>,
    pub stats: Vec<StatsEntry<T>>,
}

/// Per-layer entry of a shape-level walk through the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub kind: LayerKind,
    pub out: Shape4,
    pub params: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        dilation: usize,
    },
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
    },
    Norm {
        ch: usize,
    },
    Relu,
    MaxPool,
    Upsample,
    Scale,
    Concat,
}

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Encoder,
    Shortcut,
    Bottleneck,
    Decoder,
    Head,
}

impl LayerTrace {
    pub fn region(&self) -> Region {
        let stage = self.name.split('/').next().unwrap_or("");
        if stage.starts_with("enc") {
            Region::Encoder
        } else if stage.starts_with("sc") {
            Region::Shortcut
        } else if stage == "bottleneck" {
            Region::Bottleneck
        } else if stage == "head" {
            Region::Head
        } else {
            Region::Decoder
        }
    }
}

impl ModelGraph<f32> {
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        Self::build_truncated(cfg, STAGES, seed)
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds with a generator seeded from `seed` (stream 0).
    pub fn build_with(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        Self::build_truncated(cfg, STAGES, seed)
    }

    /// Builds only the first `depth` stages. Exists for depth-scaling analysis;
    /// regular models always use all five.
    pub fn build_truncated(cfg: &ArchConfig, depth: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(2..=STAGES).contains(&depth) {
            return Err(Error::Config(format!("depth {depth} outside 2..={STAGES}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut pb = ParamBuilder::<T, _>::new(&mut rng);

        let w = cfg.stage_widths();
        let (k, d, n) = (cfg.kernel, cfg.dilation, cfg.blocks);
        let selects = cfg.variant.selects();
        let s: Vec<usize> = (0..depth)
            .map(|i| {
                if selects {
                    selected_channels(w[i], cfg.rate)
                } else {
                    w[i]
                }
            })
            .collect();
        if s.contains(&0) {
            return Err(Error::Config(format!(
                "rate {} leaves a stage without channels",
                cfg.rate
            )));
        }
        // Channels each decoder stage emits.
        let emit: Vec<usize> = (0..depth)
            .map(|i| match cfg.upsample {
                UpsampleMode::Nearest if i > 0 => s[i - 1],
                _ => s[i],
            })
            .collect();

        let mut encoders = Vec::with_capacity(depth);
        let mut shortcuts = Vec::with_capacity(depth - 1);
        for i in 0..depth {
            let repeats = if i == 0 && cfg.variant == Variant::SimpleUnet {
                1
            } else {
                n
            };
            let in_ch = if i == 0 { cfg.in_ch } else { w[i - 1] };
            let spec = ConvBlockSpec {
                in_ch,
                out_ch: w[i],
                k,
                dilation: d,
                repeats,
            };
            encoders.push(ConvBlock::build(&mut pb, &format!("enc{}", i + 1), spec)?);
            if i + 1 < depth {
                let sc = if selects {
                    let spec = match cfg.shortcut {
                        ShortcutGrouping::Grouped => ShortcutSelectSpec::grouped(w[i], cfg.rate),
                        ShortcutGrouping::Dense => ShortcutSelectSpec::dense(w[i], cfg.rate),
                    };
                    Some(ShortcutSelect::build(&mut pb, &format!("sc{}", i + 1), spec)?)
                } else {
                    None
                };
                shortcuts.push(sc);
            }
        }

        let last = depth - 1;
        let bottleneck = if cfg.variant == Variant::SimpleUnet {
            let spec = ConvBlockSpec {
                in_ch: w[last],
                out_ch: s[last - 1],
                k,
                dilation: d,
                repeats: n,
            };
            Some(ConvBlock::build(&mut pb, "bottleneck", spec)?)
        } else {
            None
        };

        let mut deep = if bottleneck.is_some() { s[last - 1] } else { w[last] };
        let mut decoders = Vec::with_capacity(last);
        for i in (0..last).rev() {
            let name = format!("dec{}", i + 1);
            let up = match cfg.upsample {
                UpsampleMode::Nearest => {
                    let select = (deep != s[i]).then(|| {
                        Conv::build(
                            &mut pb,
                            &format!("{name}/up/select"),
                            deep,
                            s[i],
                            1,
                            ConvGeom::default(),
                        )
                    });
                    UpPath::Nearest { select }
                }
                UpsampleMode::Conv => UpPath::Conv(ConvUnit::build(&mut pb, &format!("{name}/up"), deep, s[i], k, d)),
                UpsampleMode::Transposed => {
                    let (weight, bias) = pb.conv_transpose(&format!("{name}/up/tconv"), deep, s[i]);
                    UpPath::Transposed(ConvTranspose {
                        weight,
                        bias,
                        in_ch: deep,
                        out_ch: s[i],
                    })
                }
            };
            let fusion = FusionWeights::build(&mut pb, &format!("{name}/fuse"), s[i], cfg.aff);
            let repeats = if cfg.variant == Variant::FsUnet { 1 } else { n };
            let spec = ConvBlockSpec {
                in_ch: 2 * s[i],
                out_ch: emit[i],
                k,
                dilation: d,
                repeats,
            };
            let block = ConvBlock::build(&mut pb, &name, spec)?;
            decoders.push(DecoderStage { up, fusion, block });
            deep = emit[i];
        }
        decoders.reverse();

        let head = Conv::build(&mut pb, "head/conv", deep, cfg.out_ch, 1, ConvGeom::default());
        let ParamBuilder { params, stats, .. } = pb;
        Ok(ModelGraph {
            cfg: cfg.clone(),
            depth,
            encoders,
            shortcuts,
            bottleneck,
            decoders,
            head,
            params,
            stats,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Spatial dims must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Same graph with parameters and statistics converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            cfg: self.cfg.clone(),
            depth: self.depth,
            encoders: self.encoders.clone(),
            shortcuts: self.shortcuts.clone(),
            bottleneck: self.bottleneck.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
            stats: self
                .stats
                .iter()
                .map(|s| StatsEntry {
                    name: s.name.clone(),
                    stats: NormStats {
                        mean: s.stats.mean.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
                        var: s.stats.var.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
                        momentum: U::from_f64(Scalar::to_f64(s.stats.momentum)),
                    },
                })
                .collect(),
        }
    }

    fn check_input(&self, s: Shape4) -> Result<()> {
        let m = self.required_multiple();
        if s.c != self.cfg.in_ch {
            return Err(Error::shape(
                "forward_segment",
                format!("input has {} channels, model expects {}", s.c, self.cfg.in_ch),
            ));
        }
        if !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::shape(
                "forward_segment",
                format!("spatial dims {}x{} must be multiples of {m}", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Records the whole network on `tape`, returning the logits node.
    pub fn forward_on(&mut self, tape: &mut Tape<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        self.check_input(tape.value(x).shape())?;
        let ModelGraph {
            encoders,
            shortcuts,
            bottleneck,
            decoders,
            head,
            params,
            stats,
            ..
        } = self;
        let mut ctx = Ctx {
            tape,
            params,
            stats,
            mode,
        };
        let mut skips = Vec::with_capacity(shortcuts.len());
        let mut f = x;
        for (i, enc) in encoders.iter().enumerate() {
            f = enc.forward(&mut ctx, f)?;
            ctx.tape.label(f, format!("enc{}", i + 1));
            if let Some(sc) = shortcuts.get(i) {
                let skip = match sc {
                    Some(sel) => {
                        let y = sel.forward(&mut ctx, f)?;
                        ctx.tape.label(y, format!("sc{}", i + 1));
                        y
                    }
                    None => f,
                };
                skips.push(skip);
                f = ctx.tape.maxpool2x(f)?;
            }
        }
        if let Some(b) = bottleneck {
            f = b.forward(&mut ctx, f)?;
            ctx.tape.label(f, "bottleneck");
        }
        for (i, dec) in decoders.iter().enumerate().rev() {
            let up = match &dec.up {
                UpPath::Nearest { select } => {
                    let g = match select {
                        Some(c) => c.forward(&mut ctx, f)?,
                        None => f,
                    };
                    ctx.tape.upsample2x(g)
                }
                UpPath::Conv(unit) => {
                    let g = ctx.tape.upsample2x(f);
                    unit.forward(&mut ctx, g)?
                }
                UpPath::Transposed(t) => t.forward(&mut ctx, f)?,
            };
            ctx.tape.label(up, format!("dec{}/up", i + 1));
            let fused = dec.fusion.forward(&mut ctx, skips[i], up)?;
            ctx.tape.label(fused, format!("dec{}/fuse", i + 1));
            f = dec.block.forward(&mut ctx, fused)?;
            ctx.tape.label(f, format!("dec{}", i + 1));
        }
        let logits = head.forward(&mut ctx, f)?;
        ctx.tape.label(logits, "head");
        Ok(logits)
    }

    /// Logits for `x`. Train mode normalizes with batch statistics and updates
    /// the running estimates.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let input = tape.input(x.clone());
        let out = self.forward_on(&mut tape, input, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-mode logits without touching the model.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.clone().forward(x, Mode::Infer)
    }

    /// Every parameter and running statistic as named tensors, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor4<T>)> {
        let mut out: Vec<(String, Tensor4<T>)> = self
            .params
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        for s in &self.stats {
            out.push((format!("{}/running_mean", s.name), Tensor4::vector(&s.stats.mean)));
            out.push((format!("{}/running_var", s.name), Tensor4::vector(&s.stats.var)));
        }
        out
    }

    /// Replaces every parameter and statistic from named tensors; all names
    /// must be present with matching element counts.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor4<T>>) -> Result<()> {
        let expected = self.params.len() + 2 * self.stats.len();
        if tensors.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                tensors.len()
            )));
        }
        let fetch = |name: &str, shape: Shape4| -> Result<&Tensor4<T>> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {}, model needs {shape}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let e = self.params.entry(id);
            let t = fetch(&e.name, e.value.shape())?.clone();
            *self.params.get_mut(id) = t;
        }
        for s in &mut self.stats {
            let shape = Shape4::new(1, s.stats.mean.len(), 1, 1);
            s.stats.mean = fetch(&format!("{}/running_mean", s.name), shape)?.data().to_vec();
            s.stats.var = fetch(&format!("{}/running_var", s.name), shape)?.data().to_vec();
        }
        Ok(())
    }

    /// Shape-level walk mirroring [`ModelGraph::forward_on`].
    pub fn trace(&self, input: Shape4) -> Result<Vec<LayerTrace>> {
        self.check_input(input)?;
        let mut t = Tracer { rows: Vec::new() };
        let mut skips = Vec::new();
        let mut f = input;
        for (i, enc) in self.encoders.iter().enumerate() {
            f = t.block(&format!("enc{}", i + 1), enc, f);
            if let Some(sc) = self.shortcuts.get(i) {
                let skip = match sc {
                    Some(sel) => t.conv(&format!("sc{}/conv", i + 1), &sel.conv, f),
                    None => f,
                };
                skips.push(skip);
                f = t.push(
                    format!("enc{}/pool", i + 1),
                    LayerKind::MaxPool,
                    Shape4::new(f.n, f.c, f.h / 2, f.w / 2),
                    vec![],
                );
            }
        }
        if let Some(b) = &self.bottleneck {
            f = t.block("bottleneck", b, f);
        }
        for (i, dec) in self.decoders.iter().enumerate().rev() {
            let name = format!("dec{}", i + 1);
            let up = match &dec.up {
                UpPath::Nearest { select } => {
                    let g = match select {
                        Some(c) => t.conv(&format!("{name}/up/select"), c, f),
                        None => f,
                    };
                    t.push(
                        format!("{name}/up/upsample"),
                        LayerKind::Upsample,
                        Shape4::new(g.n, g.c, g.h * 2, g.w * 2),
                        vec![],
                    )
                }
                UpPath::Conv(unit) => {
                    let g = t.push(
                        format!("{name}/up/upsample"),
                        LayerKind::Upsample,
                        Shape4::new(f.n, f.c, f.h * 2, f.w * 2),
                        vec![],
                    );
                    t.unit(&format!("{name}/up"), unit, g)
                }
                UpPath::Transposed(c) => t.push(
                    format!("{name}/up/tconv"),
                    LayerKind::ConvTranspose {
                        in_ch: c.in_ch,
                        out_ch: c.out_ch,
                    },
                    Shape4::new(f.n, c.out_ch, f.h * 2, f.w * 2),
                    vec![c.weight, c.bias],
                ),
            };
            let skip = skips[i];
            if let (Some(a), Some(b)) = (dec.fusion.alpha, dec.fusion.beta) {
                t.push(format!("{name}/fuse/alpha"), LayerKind::Scale, skip, vec![a]);
                t.push(format!("{name}/fuse/beta"), LayerKind::Scale, up, vec![b]);
            }
            let cat = t.push(
                format!("{name}/concat"),
                LayerKind::Concat,
                Shape4::new(up.n, skip.c + up.c, up.h, up.w),
                vec![],
            );
            f = t.block(&name, &dec.block, cat);
        }
        t.conv("head/conv", &self.head, f);
        Ok(t.rows)
    }
}

struct Tracer {
    rows: Vec<LayerTrace>,
}

impl Tracer {
    fn push(&mut self, name: String, kind: LayerKind, out: Shape4, params: Vec<ParamId>) -> Shape4 {
        self.rows.push(LayerTrace {
            name,
            kind,
            out,
            params,
        });
        out
    }

    fn conv(&mut self, name: &str, c: &Conv, x: Shape4) -> Shape4 {
        self.push(
            name.to_string(),
            LayerKind::Conv {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                k: c.k,
                groups: c.geom.groups,
                dilation: c.geom.dilation,
            },
            Shape4::new(x.n, c.out_ch, x.h, x.w),
            vec![c.weight, c.bias],
        )
    }

    fn unit(&mut self, prefix: &str, u: &ConvUnit, x: Shape4) -> Shape4 {
        let y = self.conv(&format!("{prefix}/conv"), &u.conv, x);
        self.push(
            format!("{prefix}/norm"),
            LayerKind::Norm { ch: u.norm.ch },
            y,
            vec![u.norm.gamma, u.norm.beta],
        );
        self.push(format!("{prefix}/relu"), LayerKind::Relu, y, vec![])
    }

    fn block(&mut self, prefix: &str, b: &ConvBlock, x: Shape4) -> Shape4 {
        b.units
            .iter()
            .enumerate()
            .fold(x, |h, (i, u)| self.unit(&format!("{prefix}/unit{i}"), u, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::config::WidthSpec;

    fn small() -> ArchConfig {
        ArchConfig::simple_unet(8)
    }

    #[test]
    fn simple_unet_forward_shape() {
        let mut m = ModelGraph::build(&small(), 0).unwrap();
        let x = Tensor4::full(Shape4::new(1, 3, 32, 32), 0.5f32);
        let y = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 32, 32));
    }

    #[test]
    fn every_variant_builds_and_runs() {
        for v in Variant::ALL {
            for up in [UpsampleMode::Nearest, UpsampleMode::Conv, UpsampleMode::Transposed] {
                let cfg = ArchConfig {
                    upsample: up,
                    ..ArchConfig::defaults(v).with_width(4)
                };
                let mut m = ModelGraph::build(&cfg, 1).unwrap();
                let x = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |n, c, y, x| {
                    ((n + c + y * x) % 5) as f32 * 0.2
                });
                let y = m.forward(&x, Mode::Train).unwrap();
                assert_eq!(y.shape(), Shape4::new(2, 1, 16, 16), "{v} {up:?}");
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn stage_structure_follows_config() {
        let m = ModelGraph::build(&small(), 0).unwrap();
        assert_eq!(m.encoders.len(), 5);
        assert_eq!(m.shortcuts.len(), 4);
        assert_eq!(m.decoders.len(), 4);
        assert!(m.bottleneck.is_some());
        assert_eq!(m.encoders[0].units.len(), 1);
        for d in &m.decoders {
            assert_eq!(d.fusion.channels, 4);
        }
        let names: std::collections::BTreeSet<_> = m.params.iter().map(|(_, e)| e.name.clone()).collect();
        assert_eq!(names.len(), m.params.len());
        assert!(names.contains("sc1/conv/weight"));
        assert!(names.contains("dec4/fuse/alpha"));
        assert!(names.contains("head/conv/bias"));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut m = ModelGraph::build(&small(), 0).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 3, 24, 32));
        let err = m.forward(&x, Mode::Infer).unwrap_err().to_string();
        assert!(err.contains("multiples of 16"), "{err}");
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut m = ModelGraph::build(&small(), 0).unwrap();
        m.params.get_mut(m.head.weight).data_mut().fill(0.0);
        m.params.get_mut(m.head.bias).data_mut().fill(0.375);
        let x = Tensor4::from_fn(Shape4::new(1, 3, 16, 16), |_, c, y, x| (c + y + x) as f32 / 30.0);
        let y = m.forward(&x, Mode::Infer).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = ModelGraph::build(&small(), 3).unwrap();
        let x = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |n, c, y, x| {
            ((n * 31 + c * 7 + y * 3 + x) % 11) as f32 / 11.0
        });
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn named_tensors_round_trip() {
        let a = ModelGraph::build(&small(), 4).unwrap();
        let mut b = ModelGraph::build(&small(), 5).unwrap();
        let map: BTreeMap<_, _> = a.named_tensors().into_iter().collect();
        b.load_named(&map).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        let mut short = map.clone();
        short.pop_first();
        assert!(b.load_named(&short).is_err());
    }

    #[test]
    fn trace_matches_forward_shapes() {
        let cfg = ArchConfig {
            widths: WidthSpec::Base(4),
            ..ArchConfig::defaults(Variant::VanillaUnet)
        };
        let m = ModelGraph::build(&cfg, 0).unwrap();
        let rows = m.trace(Shape4::new(1, 3, 32, 32)).unwrap();
        assert_eq!(rows.last().unwrap().out, Shape4::new(1, 1, 32, 32));
        let traced: usize = rows
            .iter()
            .flat_map(|r| r.params.iter())
            .map(|&p| m.params.get(p).len())
            .sum();
        assert_eq!(traced, m.params.numel());
    }

    #[test]
    fn truncated_depth_builds() {
        let cfg = ArchConfig::defaults(Variant::FixedWidthUnet).with_width(4);
        for depth in 2..=5 {
            let mut m = ModelGraph::<f32>::build_truncated(&cfg, depth, 0).unwrap();
            assert_eq!(m.encoders.len(), depth);
            let x = Tensor4::zeros(Shape4::new(1, 3, 16, 16));
            assert_eq!(m.forward(&x, Mode::Infer).unwrap().shape(), Shape4::new(1, 1, 16, 16));
        }
    }
}
