use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

/// Which attention runs first inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionOrder {
    WindowedFirst,
    LongTermFirst,
}

/// Kinds of the two attention sub-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Both,
    WindowedOnly,
    LongTermOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Dilation `2^ℓ` at layer `ℓ`.
    Dilated,
    /// Dilation 1 everywhere.
    Plain,
    /// No convolution and no activation before the attentions.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Windowed,
    LongTerm,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: {}"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(AttentionOrder { WindowedFirst => "wa_then_ltc", LongTermFirst => "ltc_then_wa" });
keyword_enum!(AttentionMode {
    Both => "both",
    WindowedOnly => "windowed_only",
    LongTermOnly => "longterm_only",
});
keyword_enum!(ConvMode { Dilated => "dilated", Plain => "plain", None => "none" });

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Width of the first stage.
    pub d1: usize,
    /// Width of the refinement stages; when it differs from `d1` the first
    /// stage ends with a reduction layer.
    pub d2: usize,
    /// Blocks per stage.
    pub layers: usize,
    pub stages: usize,
    pub classes: usize,
    pub attention: AttentionConfig,
    pub order: AttentionOrder,
    pub mode: AttentionMode,
    pub conv: ConvMode,
    pub heads: usize,
    pub cross_attention: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(d_in: usize, classes: usize) -> Self {
        Self {
            d_in,
            d1: 64,
            d2: 32,
            layers: 9,
            stages: 4,
            classes,
            attention: AttentionConfig::default(),
            order: AttentionOrder::WindowedFirst,
            mode: AttentionMode::Both,
            conv: ConvMode::Dilated,
            heads: 1,
            cross_attention: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d1", self.d1),
            ("d2", self.d2),
            ("layers", self.layers),
            ("stages", self.stages),
            ("classes", self.classes),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v < 1) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        self.attention.validate()?;
        for width in [self.d1, self.d2] {
            if width % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{} heads do not divide attention width {width}",
                    self.heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn has_reduction(&self) -> bool {
        self.d1 != self.d2
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.d1
        } else {
            self.d2
        }
    }

    /// Width fed to the prediction head of every stage.
    pub fn head_width(&self, stage: usize) -> usize {
        if stage == 0 && !self.has_reduction() {
            self.d1
        } else {
            self.d2
        }
    }

    pub fn uses_cross_attention(&self, stage: usize) -> bool {
        self.cross_attention && stage >= 1
    }

    pub fn attention_kinds(&self) -> [AttentionKind; 2] {
        use AttentionKind::*;
        match (self.mode, self.order) {
            (AttentionMode::Both, AttentionOrder::WindowedFirst) => [Windowed, LongTerm],
            (AttentionMode::Both, AttentionOrder::LongTermFirst) => [LongTerm, Windowed],
            (AttentionMode::WindowedOnly, _) => [Windowed, Windowed],
            (AttentionMode::LongTermOnly, _) => [LongTerm, LongTerm],
        }
    }

    /// Convolution dilation of block `layer`; resets at every stage.
    pub fn dilation(&self, layer: usize) -> usize {
        match self.conv {
            ConvMode::Dilated => 1usize << layer,
            ConvMode::Plain | ConvMode::None => 1,
        }
    }

    /// `(key, value)` pairs covering every field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_in", self.d_in.to_string()),
            ("d1", self.d1.to_string()),
            ("d2", self.d2.to_string()),
            ("layers", self.layers.to_string()),
            ("stages", self.stages.to_string()),
            ("classes", self.classes.to_string()),
            ("window", self.attention.window.to_string()),
            ("stride", self.attention.stride.to_string()),
            ("overlap_windows", self.attention.overlap_windows.to_string()),
            ("attention_order", self.order.to_string()),
            ("attention_mode", self.mode.to_string()),
            ("conv_mode", self.conv.to_string()),
            ("heads", self.heads.to_string()),
            ("cross_attention", on_off(self.cross_attention).to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that
    /// are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_in" => self.d_in = parse(key, value)?,
            "d1" => self.d1 = parse(key, value)?,
            "d2" => self.d2 = parse(key, value)?,
            "layers" | "N" => self.layers = parse(key, value)?,
            "stages" | "S" => self.stages = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "window" | "W" => self.attention.window = parse(key, value)?,
            "stride" | "G" => self.attention.stride = parse(key, value)?,
            "overlap_windows" => self.attention.overlap_windows = parse(key, value)?,
            "attention_order" => self.order = value.parse()?,
            "attention_mode" => self.mode = value.parse()?,
            "conv_mode" => self.conv = value.parse()?,
            "heads" => self.heads = parse(key, value)?,
            "cross_attention" => self.cross_attention = parse_on_off(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

pub(crate) fn parse_on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}
