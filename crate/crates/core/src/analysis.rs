//! Parameter and FLOP accounting over built models, and the asymptotic
//! cost-constant diagnostics of the architecture families.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::models::{ArchConfig, LayerKind, LayerTrace, ModelGraph, Region, ShortcutGrouping, UpsampleMode, Variant};
use crate::params::ParamRole;
use crate::tensor::{Scalar, Shape4};

/// Which scalars count as parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamConvention {
    /// Weights, biases, norm affine, norm running statistics and fusion weights.
    Full,
    /// Exactly the scalars the optimizer updates.
    OptimizerVisible,
    /// Convolution weights only.
    ConvWeights,
}

impl fmt::Display for ParamConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamConvention::Full => "weights + biases + norm affine + norm running stats + fusion weights",
            ParamConvention::OptimizerVisible => "weights + biases + norm affine + fusion weights",
            ParamConvention::ConvWeights => "convolution weights only",
        })
    }
}

/// How forward-pass operations are tallied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopConvention {
    /// Operations per multiply-accumulate (1 or 2).
    pub ops_per_mac: u64,
    /// Count norm (4 per element), ReLU, pooling, upsampling and channel scaling (1 per element).
    pub elementwise: bool,
}

impl FlopConvention {
    /// The convention fixed against the reference cost tables.
    pub const CALIBRATED: FlopConvention = FlopConvention {
        ops_per_mac: 1,
        elementwise: true,
    };
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} per MAC, 1 per bias add", self.ops_per_mac)?;
        if self.elementwise {
            f.write_str(", 4 per norm element, 1 per ReLU/pool/upsample/scale output element")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub region: Region,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<CostRow>,
    pub params: ParamConvention,
    pub flops: FlopConvention,
    pub input: Shape4,
    /// `(selector, groups)` for every shortcut selection convolution.
    pub shortcut_groups: Vec<(String, usize)>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn region_params(&self, region: Region) -> u64 {
        self.rows.iter().filter(|r| r.region == region).map(|r| r.params).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params() as f64 / 1e6
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}", self.model);
        let _ = writeln!(s, "input: {}", self.input);
        let _ = writeln!(s, "params: {}", self.params);
        let _ = writeln!(s, "flops: {}", self.flops);
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.flops);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>16}",
            "total",
            self.total_params(),
            self.total_flops()
        );
        let _ = writeln!(s, "totals: {:.3} M params, {:.3} GFLOPs", self.mparams(), self.gflops());
        if !self.shortcut_groups.is_empty() {
            let groups: Vec<String> = self.shortcut_groups.iter().map(|(n, g)| format!("{n}={g}")).collect();
            let _ = writeln!(s, "shortcut groups: {}", groups.join(" "));
        }
        s
    }

    /// `name,params,flops` rows with a header and a final `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_flops());
        s
    }
}

fn row_params<T: Scalar>(model: &ModelGraph<T>, row: &LayerTrace, conv: ParamConvention) -> u64 {
    let mut n: u64 = row
        .params
        .iter()
        .filter(|&&id| conv != ParamConvention::ConvWeights || model.params.entry(id).role == ParamRole::ConvWeight)
        .map(|&id| model.params.get(id).len() as u64)
        .sum();
    if let (LayerKind::Norm { ch }, ParamConvention::Full) = (row.kind, conv) {
        n += 2 * ch as u64;
    }
    n
}

fn row_ops(row: &LayerTrace, conv: FlopConvention) -> (u64, u64) {
    let out = row.out.numel() as u64;
    let ew = u64::from(conv.elementwise);
    match row.kind {
        LayerKind::Conv { in_ch, k, groups, .. } => {
            let macs = out * (in_ch / groups * k * k) as u64;
            (macs, macs * conv.ops_per_mac + out)
        }
        LayerKind::ConvTranspose { in_ch, .. } => {
            let macs = out * in_ch as u64;
            (macs, macs * conv.ops_per_mac + out)
        }
        LayerKind::Norm { .. } => (0, 4 * out * ew),
        LayerKind::Relu | LayerKind::MaxPool | LayerKind::Upsample | LayerKind::Scale => (0, out * ew),
        LayerKind::Concat => (0, 0),
    }
}

/// Full per-layer accounting at `input`.
pub fn cost_report<T: Scalar>(
    model: &ModelGraph<T>,
    input: Shape4,
    params: ParamConvention,
    flops: FlopConvention,
) -> Result<CostReport> {
    let rows = model
        .trace(input)?
        .into_iter()
        .map(|r| {
            let (macs, fl) = row_ops(&r, flops);
            CostRow {
                params: row_params(model, &r, params),
                region: r.region(),
                macs,
                flops: fl,
                name: r.name,
            }
        })
        .collect();
    let shortcut_groups = model
        .shortcuts
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|s| (format!("sc{}", i + 1), s.spec.groups)))
        .collect();
    Ok(CostReport {
        model: model.cfg.variant.to_string(),
        rows,
        params,
        flops,
        input,
        shortcut_groups,
    })
}

/// Parameter counts only; FLOPs are evaluated at the smallest admissible input.
pub fn count_params<T: Scalar>(model: &ModelGraph<T>, conv: ParamConvention) -> CostReport {
    let m = model.required_multiple();
    cost_report(
        model,
        Shape4::new(1, model.cfg.in_ch, m, m),
        conv,
        FlopConvention::CALIBRATED,
    )
    .expect("minimal input is always admissible")
}

/// FLOPs at `input`, with parameters under the full convention.
pub fn count_flops<T: Scalar>(model: &ModelGraph<T>, input: Shape4, conv: FlopConvention) -> Result<CostReport> {
    cost_report(model, input, ParamConvention::Full, conv)
}

/// Architecture families whose weight counts scale as `c·W²·k²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Doubling widths, one conv per stage, transposed-conv up path.
    Vanilla,
    /// Vanilla with `R = 0.5` dense shortcut selection.
    FeatureSelected,
    /// Fixed width with `R = 0.5` selection, no fusion.
    FixedSelect,
    /// The full fixed-width model with selection, `R = 0.5`, one unit per stage.
    SimpleUnet,
}

type Measure = fn(&CostReport) -> f64;

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Vanilla,
        Family::FeatureSelected,
        Family::FixedSelect,
        Family::SimpleUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Vanilla => "vanilla",
            Family::FeatureSelected => "feature-selected",
            Family::FixedSelect => "fixed-width+selection",
            Family::SimpleUnet => "simpleunet",
        }
    }

    pub fn config(self, width: usize, k: usize) -> ArchConfig {
        let base = match self {
            Family::Vanilla => ArchConfig {
                blocks: 1,
                upsample: UpsampleMode::Transposed,
                ..ArchConfig::defaults(Variant::VanillaUnet)
            },
            Family::FeatureSelected => ArchConfig {
                blocks: 1,
                upsample: UpsampleMode::Transposed,
                shortcut: ShortcutGrouping::Dense,
                ..ArchConfig::defaults(Variant::FsUnet)
            },
            Family::FixedSelect | Family::SimpleUnet => ArchConfig {
                aff: false,
                ..ArchConfig::defaults(Variant::SimpleUnet)
            },
        };
        ArchConfig {
            kernel: k,
            ..base.with_width(width)
        }
    }

    /// `(constant name, target, measure)` triples evaluated on a conv-weights report.
    fn constants(self) -> Vec<(&'static str, f64, Measure)> {
        fn total(r: &CostReport) -> f64 {
            r.total_params() as f64
        }
        fn decoder_share(r: &CostReport) -> f64 {
            r.region_params(Region::Decoder) as f64 / r.total_params() as f64
        }
        fn decoder_side(r: &CostReport) -> f64 {
            (r.region_params(Region::Decoder) + r.region_params(Region::Shortcut)) as f64
        }
        fn encoder(r: &CostReport) -> f64 {
            r.region_params(Region::Encoder) as f64
        }
        fn bottleneck_decoder(r: &CostReport) -> f64 {
            (r.region_params(Region::Bottleneck) + r.region_params(Region::Decoder)) as f64
        }
        match self {
            Family::Vanilla => vec![("total", 384.0, total), ("decoder share", 214.0 / 384.0, decoder_share)],
            Family::FeatureSelected => vec![("decoder + shortcuts", 85.5, decoder_side)],
            Family::FixedSelect => vec![
                ("encoder", 4.0, encoder),
                ("bottleneck + decoder", 2.25, bottleneck_decoder),
            ],
            Family::SimpleUnet => vec![("total", 6.0, total)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormRow {
    pub family: Family,
    pub constant: &'static str,
    pub width: usize,
    /// Counted weights over `W²k²` (shares are reported as fractions).
    pub ratio: f64,
    pub target: f64,
    /// `(ratio − target) / target`.
    pub deviation: f64,
    /// `|deviation|` did not grow relative to the previous width of the sweep.
    pub converging: bool,
}

/// Measured cost constants of `family` over a width sweep.
pub fn closed_form_report(family: Family, sweep: &[usize], k: usize) -> Result<Vec<ClosedFormRow>> {
    if sweep.iter().any(|&w| w < 8) {
        return Err(Error::Config("closed-form sweep widths must be at least 8".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::with_capacity(sweep.len());
    for &w in sweep {
        let model = ModelGraph::<f32>::build(&family.config(w, k), 0)?;
        reports.push((w, count_params(&model, ParamConvention::ConvWeights)));
    }
    for (name, target, measure) in family.constants() {
        let mut prev: Option<f64> = None;
        for (w, report) in &reports {
            let raw = measure(report);
            let ratio = if target < 1.0 {
                raw
            } else {
                raw / (w * w * k * k) as f64
            };
            let deviation = (ratio - target) / target;
            let converging = prev.is_none_or(|p| deviation.abs() <= p + 1e-12);
            prev = Some(deviation.abs());
            rows.push(ClosedFormRow {
                family,
                constant: name,
                width: *w,
                ratio,
                target,
                deviation,
                converging,
            });
        }
    }
    Ok(rows)
}

pub fn closed_form_text(rows: &[ClosedFormRow]) -> String {
    let mut s = format!(
        "{:<22}  {:<22}  {:>6}  {:>10}  {:>10}  {:>9}  {}\n",
        "family", "constant", "width", "ratio", "target", "deviation", "trend"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22}  {:<22}  {:>6}  {:>10.4}  {:>10.4}  {:>+8.2}%  {}",
            r.family.name(),
            r.constant,
            r.width,
            r.ratio,
            r.target,
            100.0 * r.deviation,
            if r.converging { "converging" } else { "diverging" }
        );
    }
    s
}
