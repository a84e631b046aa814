use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

/// Structural switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Structure {
    /// Hierarchical channel-split convolutions inside each MCB. When off the
    /// split/hierarchy is replaced by a single kernel-3 convolution.
    pub multi_scale: bool,
    /// Use each block's dilation rate. When off every MCB convolution has
    /// dilation 1.
    pub dilated: bool,
    /// Temporal attention gate at the end of each MCB.
    pub temporal_attention: bool,
    /// Residual BLSTM block between the MCBs and the pooling layer.
    pub residual_blstm: bool,
}

impl Default for Structure {
    fn default() -> Self {
        Self {
            multi_scale: true,
            dilated: true,
            temporal_attention: true,
            residual_blstm: true,
        }
    }
}

impl Structure {
    /// The full model and the four single-component ablations, labelled.
    pub fn variants() -> [(&'static str, Structure); 5] {
        let full = Structure::default();
        [
            ("full", full),
            (
                "single_scale",
                Structure {
                    multi_scale: false,
                    ..full
                },
            ),
            (
                "standard_conv",
                Structure {
                    dilated: false,
                    ..full
                },
            ),
            (
                "no_attention",
                Structure {
                    temporal_attention: false,
                    ..full
                },
            ),
            (
                "no_blstm",
                Structure {
                    residual_blstm: false,
                    ..full
                },
            ),
        ]
    }
}

/// Hyperparameters of the embedding network and its classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcrnConfig {
    pub n_mels: usize,
    pub initial_kernel: usize,
    pub initial_channels: usize,
    pub n_mcb: usize,
    pub mcb_channels: Vec<usize>,
    pub mcb_kernel: Vec<usize>,
    pub mcb_dilations: Vec<usize>,
    pub n_scales: usize,
    /// Kernel size of the convolution inside each scale of the hierarchy.
    pub scale_kernel: usize,
    /// Post-concatenation convolution uses kernel 1 instead of `mcb_kernel`.
    pub pointwise_fusion: bool,
    pub ta_kernel: usize,
    pub blstm_hidden: usize,
    pub blstm_layers: usize,
    pub blstm_dropout: f64,
    pub pool_bottleneck: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
    pub structure: Structure,
}

impl Default for AmcrnConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            initial_kernel: 5,
            initial_channels: 512,
            n_mcb: 3,
            mcb_channels: vec![512; 3],
            mcb_kernel: vec![3; 3],
            mcb_dilations: vec![2, 3, 4],
            n_scales: 8,
            scale_kernel: 3,
            pointwise_fusion: false,
            ta_kernel: 7,
            blstm_hidden: 450,
            blstm_layers: 2,
            blstm_dropout: 0.2,
            pool_bottleneck: 128,
            embedding_dim: 256,
            n_classes: 5994,
            aam_margin: 0.2,
            aam_scale: 30.0,
            structure: Structure::default(),
        }
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

impl AmcrnConfig {
    /// Small configuration used for fast end-to-end runs: 64 channels,
    /// 4 scales, 64 hidden units per LSTM direction.
    pub fn tiny(n_classes: usize) -> Self {
        Self {
            initial_channels: 64,
            mcb_channels: vec![64; 3],
            n_scales: 4,
            blstm_hidden: 64,
            pool_bottleneck: 32,
            embedding_dim: 256,
            n_classes,
            ..Self::default()
        }
    }

    /// Copy with every channel count set to `channels`.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.initial_channels = channels;
        self.mcb_channels = vec![channels; self.n_mcb];
        self
    }

    /// Dilation used by block `i` after applying the structure switches.
    pub fn dilation(&self, i: usize) -> usize {
        if self.structure.dilated {
            self.mcb_dilations[i]
        } else {
            1
        }
    }

    /// Kernel size of the post-concatenation convolution of block `i`.
    pub fn fusion_kernel(&self, i: usize) -> usize {
        if self.pointwise_fusion {
            1
        } else {
            self.mcb_kernel[i]
        }
    }

    /// Channel count entering the pooling layer.
    pub fn final_channels(&self) -> usize {
        *self.mcb_channels.last().unwrap_or(&self.initial_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("initial_channels", self.initial_channels),
            ("n_mcb", self.n_mcb),
            ("blstm_hidden", self.blstm_hidden),
            ("blstm_layers", self.blstm_layers),
            ("pool_bottleneck", self.pool_bottleneck),
            ("embedding_dim", self.embedding_dim),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, len) in [
            ("mcb_channels", self.mcb_channels.len()),
            ("mcb_kernel", self.mcb_kernel.len()),
            ("mcb_dilations", self.mcb_dilations.len()),
        ] {
            if len != self.n_mcb {
                return Err(Error::config(format!(
                    "{name} has {len} entries but n_mcb = {}",
                    self.n_mcb
                )));
            }
        }
        if self.n_scales < 2 {
            return Err(Error::config("n_scales must be at least 2"));
        }
        for (i, &c) in self.mcb_channels.iter().enumerate() {
            if c != self.initial_channels {
                return Err(Error::config(format!(
                    "mcb_channels[{i}] = {c} must equal initial_channels = {} (blocks are residual)",
                    self.initial_channels
                )));
            }
            if c % self.n_scales != 0 {
                return Err(Error::config(format!(
                    "mcb_channels[{i}] = {c} is not divisible by n_scales = {}",
                    self.n_scales
                )));
            }
        }
        let kernels = std::iter::once(("initial_kernel", self.initial_kernel))
            .chain(self.mcb_kernel.iter().map(|&k| ("mcb_kernel", k)))
            .chain([("scale_kernel", self.scale_kernel), ("ta_kernel", self.ta_kernel)]);
        for (name, k) in kernels {
            if k % 2 == 0 {
                return Err(Error::config(format!("{name} = {k} must be odd")));
            }
        }
        if self.mcb_dilations.contains(&0) {
            return Err(Error::config("dilation rates must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.blstm_dropout) {
            return Err(Error::config("blstm_dropout must lie in [0, 1)"));
        }
        if !(self.aam_margin >= 0.0 && self.aam_scale > 0.0) {
            return Err(Error::config("aam_margin must be >= 0 and aam_scale > 0"));
        }
        Ok(())
    }

    /// Flat `key = value` pairs understood by [`AmcrnConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.structure;
        vec![
            ("n_mels", self.n_mels.to_string()),
            ("initial_kernel", self.initial_kernel.to_string()),
            ("initial_channels", self.initial_channels.to_string()),
            ("n_mcb", self.n_mcb.to_string()),
            ("mcb_channels", join(&self.mcb_channels)),
            ("mcb_kernel", join(&self.mcb_kernel)),
            ("mcb_dilations", join(&self.mcb_dilations)),
            ("n_scales", self.n_scales.to_string()),
            ("scale_kernel", self.scale_kernel.to_string()),
            ("pointwise_fusion", self.pointwise_fusion.to_string()),
            ("ta_kernel", self.ta_kernel.to_string()),
            ("blstm_hidden", self.blstm_hidden.to_string()),
            ("blstm_layers", self.blstm_layers.to_string()),
            ("blstm_dropout", self.blstm_dropout.to_string()),
            ("pool_bottleneck", self.pool_bottleneck.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("aam_margin", self.aam_margin.to_string()),
            ("aam_scale", self.aam_scale.to_string()),
            ("multi_scale", s.multi_scale.to_string()),
            ("dilated", s.dilated.to_string()),
            ("temporal_attention", s.temporal_attention.to_string()),
            ("residual_blstm", s.residual_blstm.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` when the key is not a
    /// model setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_mels" => self.n_mels = parse(key, value)?,
            "initial_kernel" => self.initial_kernel = parse(key, value)?,
            "initial_channels" => self.initial_channels = parse(key, value)?,
            "n_mcb" => self.n_mcb = parse(key, value)?,
            "mcb_channels" => self.mcb_channels = parse_list(key, value)?,
            "mcb_kernel" => self.mcb_kernel = parse_list(key, value)?,
            "mcb_dilations" => self.mcb_dilations = parse_list(key, value)?,
            "n_scales" => self.n_scales = parse(key, value)?,
            "scale_kernel" => self.scale_kernel = parse(key, value)?,
            "pointwise_fusion" => self.pointwise_fusion = parse(key, value)?,
            "ta_kernel" => self.ta_kernel = parse(key, value)?,
            "blstm_hidden" => self.blstm_hidden = parse(key, value)?,
            "blstm_layers" => self.blstm_layers = parse(key, value)?,
            "blstm_dropout" => self.blstm_dropout = parse(key, value)?,
            "pool_bottleneck" => self.pool_bottleneck = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "aam_margin" => self.aam_margin = parse(key, value)?,
            "aam_scale" => self.aam_scale = parse(key, value)?,
            "multi_scale" => self.structure.multi_scale = parse(key, value)?,
            "dilated" => self.structure.dilated = parse(key, value)?,
            "temporal_attention" => self.structure.temporal_attention = parse(key, value)?,
            "residual_blstm" => self.structure.residual_blstm = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        AmcrnConfig::default().validate().unwrap();
        AmcrnConfig::tiny(4).validate().unwrap();
    }

    #[test]
    fn divisibility_is_enforced() {
        let mut c = AmcrnConfig::tiny(4);
        c.n_scales = 6;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_scales = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn even_kernels_and_bad_lists_rejected() {
        let mut c = AmcrnConfig::default();
        c.initial_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = AmcrnConfig::default();
        c.mcb_dilations = vec![2, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = AmcrnConfig::tiny(7);
        c.structure.temporal_attention = false;
        c.pointwise_fusion = true;
        let mut back = AmcrnConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("n_scales", "x").is_err());
    }
}
