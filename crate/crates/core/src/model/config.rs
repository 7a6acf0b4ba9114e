use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and initialization seed of a captioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            d_model: 128,
            n_heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_mult: 4,
            vocab_size: 512,
            max_len: 16,
            dropout: 0.0,
            seed: 0,
        }
    }
}

const FIELDS: [&str; 12] = [
    "image_size",
    "channels",
    "patch_size",
    "d_model",
    "n_heads",
    "encoder_layers",
    "decoder_layers",
    "ffn_mult",
    "vocab_size",
    "max_len",
    "dropout",
    "seed",
];

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::contract(format!("model config: {m}")));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image_size, patch_size and channels must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail("image_size must be divisible by patch_size");
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size < 4 || self.max_len < 2 || self.ffn_mult == 0 {
            return fail("vocab_size >= 4, max_len >= 2 and ffn_mult >= 1 are required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_manifest(&self) -> String {
        let vals = [
            self.image_size.to_string(),
            self.channels.to_string(),
            self.patch_size.to_string(),
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.encoder_layers.to_string(),
            self.decoder_layers.to_string(),
            self.ffn_mult.to_string(),
            self.vocab_size.to_string(),
            self.max_len.to_string(),
            format!("{:?}", self.dropout),
            self.seed.to_string(),
        ];
        FIELDS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_manifest(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "image_size" => cfg.image_size = int()?,
                "channels" => cfg.channels = int()?,
                "patch_size" => cfg.patch_size = int()?,
                "d_model" => cfg.d_model = int()?,
                "n_heads" => cfg.n_heads = int()?,
                "encoder_layers" => cfg.encoder_layers = int()?,
                "decoder_layers" => cfg.decoder_layers = int()?,
                "ffn_mult" => cfg.ffn_mult = int()?,
                "vocab_size" => cfg.vocab_size = int()?,
                "max_len" => cfg.max_len = int()?,
                "dropout" => cfg.dropout = v.parse().map_err(|e| err(format!("{k}: {e}")))?,
                "seed" => cfg.seed = v.parse().map_err(|e| err(format!("{k}: {e}")))?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
            seen.push(k.to_string());
        }
        if let Some(missing) = FIELDS.iter().find(|f| !seen.iter().any(|s| s == *f)) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("manifest lacks {missing}"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
