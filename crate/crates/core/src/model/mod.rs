//! Patch-embedding image encoder and a dual-mode autoregressive decoder.
//!
//! The decoder's cross-attention reads either the encoded image patches
//! (multimodal, `P(T|I)`) or a single learned null-image row (unimodal,
//! `P(T)`). Both modes share every decoder weight.

mod config;
mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use config::ModelConfig;
use layers::{Attention, Block, FeedForward, LayerNormIds, Linear};

use crate::corpus::{Image, BOS};
use crate::error::{Error, Result};
use crate::numerics::{self, Graph, ParamId, ParamStore, Tensor, Var};

/// What the decoder cross-attends to.
#[derive(Debug, Clone, Copy)]
pub enum Memory<'a> {
    /// Encoded patches, `[num_patches, d_model]`.
    Image(&'a Tensor),
    /// The learned null-image embedding.
    Null,
}

/// Per-forward dropout source. `None` disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct Ids {
    patch: Linear,
    patch_pos: ParamId,
    encoder: Vec<Block>,
    encoder_ln: LayerNormIds,
    null_image: ParamId,
    tok: ParamId,
    tok_pos: ParamId,
    decoder: Vec<Block>,
    decoder_ln: LayerNormIds,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct CaptionerModel {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(&format!("{name}.w"), &[d_in, d_out], std)?,
            b: self.constant(&format!("{name}.b"), &[1, d_out], 0.0)?,
        })
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            gain: self.constant(&format!("{name}.g"), &[1, d], 1.0)?,
            bias: self.constant(&format!("{name}.b"), &[1, d], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize, std: f64) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, std)?,
            k: self.linear(&format!("{name}.k"), d, d, std)?,
            v: self.linear(&format!("{name}.v"), d, d, std)?,
            o: self.linear(&format!("{name}.o"), d, d, std)?,
        })
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig, cross: bool, std: f64) -> Result<Block> {
        let d = cfg.d_model;
        Ok(Block {
            ln_self: self.layer_norm(&format!("{name}.ln1"), d)?,
            self_attn: self.attention(&format!("{name}.self"), d, std)?,
            cross: if cross {
                Some((
                    self.layer_norm(&format!("{name}.ln2"), d)?,
                    self.attention(&format!("{name}.cross"), d, std)?,
                ))
            } else {
                None
            },
            ln_ffn: self.layer_norm(&format!("{name}.ln3"), d)?,
            ffn: FeedForward {
                up: self.linear(&format!("{name}.ffn.up"), d, d * cfg.ffn_mult, std)?,
                down: self.linear(&format!("{name}.ffn.down"), d * cfg.ffn_mult, d, std)?,
            },
        })
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl CaptionerModel {
    /// Seeded initialization. Output logits start near zero, so the model is
    /// close to uniform over the vocabulary.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: ParamStore::new(),
        };
        let d = config.d_model;
        let patch = init.linear("enc.patch", config.patch_dim(), d, INIT_STD)?;
        let patch_pos = init.normal("enc.pos", &[config.num_patches(), d], INIT_STD)?;
        let encoder = (0..config.encoder_layers)
            .map(|l| init.block(&format!("enc.{l}"), &config, false, INIT_STD))
            .collect::<Result<_>>()?;
        let encoder_ln = init.layer_norm("enc.ln", d)?;
        // Encoder memory leaves a layer norm with unit gain, so rows have unit
        // variance; the null row starts at the same scale.
        let null_image = init.normal("null_image", &[1, d], 1.0)?;
        let tok = init.normal("dec.tok", &[config.vocab_size, d], INIT_STD)?;
        let tok_pos = init.normal("dec.pos", &[config.max_len, d], INIT_STD)?;
        let decoder = (0..config.decoder_layers)
            .map(|l| init.block(&format!("dec.{l}"), &config, true, INIT_STD))
            .collect::<Result<_>>()?;
        let decoder_ln = init.layer_norm("dec.ln", d)?;
        let out = init.linear("dec.out", d, config.vocab_size, INIT_STD)?;
        Ok(CaptionerModel {
            config,
            params: init.store,
            ids: Ids {
                patch,
                patch_pos,
                encoder,
                encoder_ln,
                null_image,
                tok,
                tok_pos,
                decoder,
                decoder_ln,
                out,
            },
        })
    }

    /// Rebinds a parameter store (e.g. a loaded checkpoint) to `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = CaptionerModel::new(config)?;
        if template.params.len() != params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, config expects {}",
                params.len(),
                template.params.len()
            )));
        }
        for (id, name, t) in template.params.iter() {
            if params.name(id) != name || params.get(id).shape() != t.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {:?} {:?} does not match expected {name:?} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    t.shape()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        Ok(CaptionerModel {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Parameters belonging to the image encoder (patch embedding through the
    /// final encoder layer norm).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("enc."))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn null_image_id(&self) -> ParamId {
        self.ids.null_image
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(numerics::encode_checkpoint(&self.params));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, checkpoint: &Path, manifest: &Path) -> Result<()> {
        numerics::save_checkpoint(&self.params, checkpoint)?;
        std::fs::write(manifest, self.config.to_manifest()).map_err(|e| Error::io(manifest, e))
    }

    pub fn load(checkpoint: &Path, manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let config = ModelConfig::from_manifest(&text, manifest)?;
        CaptionerModel::from_params(config, numerics::load_checkpoint(checkpoint)?)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.image_size, c.image_size, c.channels] {
            return Err(Error::contract(format!(
                "image shape {:?} does not match model input {}x{}x{}",
                image.shape(),
                c.image_size,
                c.image_size,
                c.channels
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::contract("decoder input must begin with BOS"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Encoder forward inside `g`; returns `[num_patches, d_model]`.
    pub fn encode_image_in<'p>(
        &'p self,
        g: &mut Graph<'p>,
        image: &Image,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.check_image(image)?;
        let c = &self.config;
        let patches = g.input(Tensor::matrix(c.num_patches(), c.patch_dim(), image.patches(c.patch_size))?);
        let x = self.ids.patch.forward(g, &self.params, patches);
        let pos = g.param(&self.params, self.ids.patch_pos);
        let mut x = g.add(x, pos);
        for block in &self.ids.encoder {
            x = block.forward(g, &self.params, x, None, c.n_heads, false, dropout.as_deref_mut());
        }
        Ok(self.ids.encoder_ln.forward(g, &self.params, x, LN_EPS))
    }

    /// Decoder forward inside `g`; row `n` scores token `n+1`. `memory` of
    /// `None` selects the null-image (unimodal) path.
    pub fn decode_logits_in<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tokens: &[usize],
        memory: Option<Var>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let memory = memory.unwrap_or_else(|| g.param(&self.params, self.ids.null_image));
        let table = g.param(&self.params, self.ids.tok);
        let emb = g.embed(table, tokens)?;
        let pos_table = g.param(&self.params, self.ids.tok_pos);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.embed(pos_table, &positions)?;
        let mut x = g.add(emb, pos);
        for block in &self.ids.decoder {
            x = block.forward(g, &self.params, x, Some(memory), c.n_heads, true, dropout.as_deref_mut());
        }
        let x = self.ids.decoder_ln.forward(g, &self.params, x, LN_EPS);
        Ok(self.ids.out.forward(g, &self.params, x))
    }

    /// Mean next-token cross entropy of `tokens` (teacher forcing), as a graph scalar.
    pub fn caption_nll_in<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tokens: &[usize],
        memory: Option<Var>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::contract("caption needs at least BOS and EOS"));
        }
        let logits = self.decode_logits_in(g, &tokens[..tokens.len() - 1], memory, dropout)?;
        g.cross_entropy_rows(logits, &tokens[1..])
    }

    /// Encoded image patches, `[num_patches, d_model]`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.encode_image_in(&mut g, image, None)?;
        Ok(g.value(v).clone())
    }

    /// `[N, V]` logits for `tokens` under the given conditioning.
    pub fn decode_logits(&self, tokens: &[usize], memory: Memory<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mem = self.memory_var(&mut g, memory)?;
        let v = self.decode_logits_in(&mut g, tokens, mem, None)?;
        Ok(g.value(v).clone())
    }

    fn memory_var<'p>(&'p self, g: &mut Graph<'p>, memory: Memory<'_>) -> Result<Option<Var>> {
        Ok(match memory {
            Memory::Image(t) => {
                if t.cols() != self.config.d_model {
                    return Err(Error::contract(format!(
                        "memory width {} != d_model {}",
                        t.cols(),
                        self.config.d_model
                    )));
                }
                Some(g.input(t.clone()))
            }
            Memory::Null => None,
        })
    }

    /// `Σ_{n≥2} log P(t_n | t_<n, memory)`; with `normalize`, divided by the
    /// number of predicted tokens.
    pub fn sequence_logprob(&self, tokens: &[usize], memory: Memory<'_>, normalize: bool) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::contract("caption needs at least BOS and EOS"));
        }
        let mut g = Graph::new();
        let mem = self.memory_var(&mut g, memory)?;
        let logits = self.decode_logits_in(&mut g, &tokens[..tokens.len() - 1], mem, None)?;
        let logp = g.log_softmax(logits)?;
        let picked = g.pick(logp, &tokens[1..])?;
        let total: f64 = g.value(picked).data().iter().sum();
        if !total.is_finite() {
            return Err(Error::Numeric("sequence log-probability is not finite".into()));
        }
        Ok(if normalize {
            total / (tokens.len() - 1) as f64
        } else {
            total
        })
    }
}
