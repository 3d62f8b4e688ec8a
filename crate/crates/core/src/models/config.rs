//! Architecture descriptions and their `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! variant  = simple_unet     # vanilla_unet | fs_unet | fixed_width_unet | aff_unet | simple_unet
//! width    = 64              # fixed width W, or initial width C for doubling variants
//! widths   = 8,16,32,64,128  # explicit stage widths (overrides width)
//! kernel   = 3
//! dilation = 2
//! rate     = 0.5
//! blocks   = 1
//! aff      = true
//! upsample = nearest         # nearest | conv | transposed
//! shortcut = grouped         # grouped | dense
//! ```
//!
//! Missing keys take the defaults of the chosen variant.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    VanillaUnet,
    FsUnet,
    FixedWidthUnet,
    AffUnet,
    SimpleUnet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::VanillaUnet,
        Variant::FsUnet,
        Variant::FixedWidthUnet,
        Variant::AffUnet,
        Variant::SimpleUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaUnet => "vanilla_unet",
            Variant::FsUnet => "fs_unet",
            Variant::FixedWidthUnet => "fixed_width_unet",
            Variant::AffUnet => "aff_unet",
            Variant::SimpleUnet => "simple_unet",
        }
    }

    /// Stage widths double from the initial width.
    pub fn doubling(self) -> bool {
        matches!(self, Variant::VanillaUnet | Variant::FsUnet | Variant::AffUnet)
    }

    /// Shortcuts pass through a 1×1 selection convolution.
    pub fn selects(self) -> bool {
        matches!(self, Variant::FsUnet | Variant::SimpleUnet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// How deep features are brought to the next resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Parameter-free nearest-neighbour 2×.
    Nearest,
    /// Nearest 2× followed by a conv unit.
    Conv,
    /// 2×2 stride-2 transposed convolution.
    Transposed,
}

impl UpsampleMode {
    pub fn name(self) -> &'static str {
        match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Conv => "conv",
            UpsampleMode::Transposed => "transposed",
        }
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "conv" => Ok(UpsampleMode::Conv),
            "transposed" => Ok(UpsampleMode::Transposed),
            _ => Err(Error::Config(format!("unknown upsample mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutGrouping {
    /// One group per selected channel when it divides the input, dense otherwise.
    Grouped,
    Dense,
}

impl ShortcutGrouping {
    pub fn name(self) -> &'static str {
        match self {
            ShortcutGrouping::Grouped => "grouped",
            ShortcutGrouping::Dense => "dense",
        }
    }
}

impl FromStr for ShortcutGrouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouped" => Ok(ShortcutGrouping::Grouped),
            "dense" => Ok(ShortcutGrouping::Dense),
            _ => Err(Error::Config(format!("unknown shortcut grouping '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthSpec {
    /// Fixed width W, or the initial width C of a doubling variant.
    Base(usize),
    List([usize; 5]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    pub widths: WidthSpec,
    pub kernel: usize,
    pub dilation: usize,
    pub rate: f64,
    pub blocks: usize,
    pub aff: bool,
    pub upsample: UpsampleMode,
    pub shortcut: ShortcutGrouping,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ArchConfig {
    /// Defaults of a variant at width 64.
    pub fn defaults(variant: Variant) -> Self {
        let base = ArchConfig {
            variant,
            widths: WidthSpec::Base(64),
            kernel: 3,
            dilation: 1,
            rate: 1.0,
            blocks: 2,
            aff: false,
            upsample: UpsampleMode::Conv,
            shortcut: ShortcutGrouping::Grouped,
            in_ch: 3,
            out_ch: 1,
        };
        match variant {
            Variant::VanillaUnet | Variant::FixedWidthUnet => base,
            Variant::AffUnet => ArchConfig { aff: true, ..base },
            Variant::FsUnet => ArchConfig {
                rate: 0.5,
                upsample: UpsampleMode::Nearest,
                ..base
            },
            Variant::SimpleUnet => ArchConfig {
                dilation: 2,
                rate: 0.5,
                blocks: 1,
                aff: true,
                upsample: UpsampleMode::Nearest,
                ..base
            },
        }
    }

    pub fn simple_unet(width: usize) -> Self {
        ArchConfig {
            widths: WidthSpec::Base(width),
            ..Self::defaults(Variant::SimpleUnet)
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.widths = WidthSpec::Base(width);
        self
    }

    /// Resolved widths of the five stages.
    pub fn stage_widths(&self) -> [usize; 5] {
        match self.widths {
            WidthSpec::List(w) => w,
            WidthSpec::Base(c) if self.variant.doubling() => [c, 2 * c, 4 * c, 8 * c, 16 * c],
            WidthSpec::Base(c) => [c; 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths().contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be at least 1".into()));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config("input and output channels must be positive".into()));
        }
        if self.variant.selects() {
            if !(self.rate > 0.0 && self.rate <= 1.0) {
                return Err(Error::Config(format!(
                    "rate {} outside (0, 1] for {}",
                    self.rate, self.variant
                )));
            }
        } else if self.rate != 1.0 {
            return Err(Error::Config(format!(
                "{} has no shortcut selection; rate must be 1",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(pk, _, _): &(&str, &str, usize)| *pk == k) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
            pairs.push((k, v, lineno + 1));
        }
        let variant = match pairs.iter().find(|(k, _, _)| *k == "variant") {
            Some((_, v, _)) => v.parse()?,
            None => return Err(Error::Config("missing key 'variant'".into())),
        };
        let mut cfg = ArchConfig::defaults(variant);
        for (k, v, line) in pairs {
            let bad = |what: &str| Error::Config(format!("line {line}: invalid {what} '{v}'"));
            match k {
                "variant" => {}
                "width" => cfg.widths = WidthSpec::Base(v.parse().map_err(|_| bad("width"))?),
                "widths" => {
                    let list = v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("widths"))?;
                    let arr: [usize; 5] = list.try_into().map_err(|l: Vec<usize>| {
                        Error::Config(format!("line {line}: widths needs 5 entries, got {}", l.len()))
                    })?;
                    cfg.widths = WidthSpec::List(arr);
                }
                "kernel" => cfg.kernel = v.parse().map_err(|_| bad("kernel"))?,
                "dilation" => cfg.dilation = v.parse().map_err(|_| bad("dilation"))?,
                "rate" => cfg.rate = v.parse().map_err(|_| bad("rate"))?,
                "blocks" => cfg.blocks = v.parse().map_err(|_| bad("blocks"))?,
                "aff" => cfg.aff = parse_bool(v).ok_or_else(|| bad("aff"))?,
                "upsample" => cfg.upsample = v.parse()?,
                "shortcut" => cfg.shortcut = v.parse()?,
                "in_ch" => cfg.in_ch = v.parse().map_err(|_| bad("in_ch"))?,
                "out_ch" => cfg.out_ch = v.parse().map_err(|_| bad("out_ch"))?,
                _ => return Err(Error::Config(format!("line {line}: unknown key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text; `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let widths = match self.widths {
            WidthSpec::Base(w) => format!("width = {w}"),
            WidthSpec::List(l) => format!("widths = {}", l.map(|w| w.to_string()).join(",")),
        };
        format!(
            "variant = {}\n{widths}\nkernel = {}\ndilation = {}\nrate = {:?}\nblocks = {}\naff = {}\nupsample = {}\nshortcut = {}\nin_ch = {}\nout_ch = {}\n",
            self.variant,
            self.kernel,
            self.dilation,
            self.rate,
            self.blocks,
            self.aff,
            self.upsample.name(),
            self.shortcut.name(),
            self.in_ch,
            self.out_ch,
        )
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}
