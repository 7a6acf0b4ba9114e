//! Caption scoring: conditional log-likelihoods, cached text priors and the
//! α-weighted information-gain combination.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Image, PromptTable, Vocab};
use crate::error::{Error, Result};
use crate::model::{CaptionerModel, Memory};
use crate::par::Parallelism;

pub const DEFAULT_ALPHA: f64 = 0.8;
/// α used by the two-model LM+Cap objective.
pub const LM_PLUS_CAP_ALPHA: f64 = 1.0;

/// Candidate captions with their class and prompt-ensemble index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    captions: Vec<Vec<usize>>,
    class_ids: Vec<usize>,
    prompt_indices: Vec<usize>,
}

impl CandidateSet {
    pub fn new(captions: Vec<Vec<usize>>, class_ids: Vec<usize>, prompt_indices: Vec<usize>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::contract("candidate set is empty"));
        }
        if captions.len() != class_ids.len() || captions.len() != prompt_indices.len() {
            return Err(Error::contract("captions, class_ids and prompt_indices differ in length"));
        }
        let mut pairs: Vec<(usize, usize)> = class_ids.iter().copied().zip(prompt_indices.iter().copied()).collect();
        pairs.sort_unstable();
        if let Some(w) = pairs.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::contract(format!(
                "duplicate candidate (class {}, prompt {})",
                w[0].0, w[0].1
            )));
        }
        Ok(CandidateSet {
            captions,
            class_ids,
            prompt_indices,
        })
    }

    /// Encodes every prompt; any out-of-vocabulary word is an error.
    pub fn from_prompts(table: &PromptTable, vocab: &Vocab) -> Result<Self> {
        let mut captions = Vec::with_capacity(table.entries.len());
        for p in &table.entries {
            captions.push(vocab.encode(&p.text)?);
        }
        CandidateSet::new(
            captions,
            table.entries.iter().map(|p| p.class_id).collect(),
            table.entries.iter().map(|p| p.prompt_index).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn captions(&self) -> &[Vec<usize>] {
        &self.captions
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn prompt_indices(&self) -> &[usize] {
        &self.prompt_indices
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.iter().max().map_or(0, |m| m + 1)
    }

    fn check_model(&self, model: &CaptionerModel) -> Result<()> {
        let v = model.vocab_size();
        for (j, c) in self.captions.iter().enumerate() {
            if let Some(&t) = c.iter().find(|&&t| t >= v) {
                return Err(Error::contract(format!(
                    "candidate {j} uses token {t}, model vocabulary has {v} entries"
                )));
            }
        }
        Ok(())
    }

    /// Sidecar mapping score-matrix columns to `(class_id, prompt_index)`.
    pub fn manifest(&self) -> String {
        let mut out = String::from("column\tclass_id\tprompt_index\n");
        for j in 0..self.len() {
            out.push_str(&format!("{j}\t{}\t{}\n", self.class_ids[j], self.prompt_indices[j]));
        }
        out
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    UnimodalMode,
    ZeroImage,
    ExternalLm,
}

/// Per-candidate `log P(T)`, computed once and shared by every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCache {
    pub logp_prior: Vec<f64>,
    pub source: PriorSource,
    pub fingerprint: String,
    pub normalized: bool,
}

impl PriorCache {
    pub fn len(&self) -> usize {
        self.logp_prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_prior.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("prior cache serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: PriorCache = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if cache.logp_prior.iter().any(|v| !v.is_finite() || *v > 0.0) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "prior values must be finite and <= 0".into(),
            });
        }
        Ok(cache)
    }
}

/// `model` supplies the prior. For `ExternalLm` pass the separately trained
/// language model; its null-conditioned path is used.
pub fn build_prior_cache(
    model: &CaptionerModel,
    candidates: &CandidateSet,
    source: PriorSource,
    normalize: bool,
    par: &Parallelism,
) -> Result<PriorCache> {
    candidates.check_model(model)?;
    let zero_memory = match source {
        PriorSource::ZeroImage => {
            let c = model.config();
            Some(model.encode_image(&Image::zeros(c.image_size, c.image_size, c.channels))?)
        }
        _ => None,
    };
    let logp_prior = par.try_map(candidates.len(), |j| {
        let memory = match &zero_memory {
            Some(m) => Memory::Image(m),
            None => Memory::Null,
        };
        model.sequence_logprob(&candidates.captions[j], memory, normalize)
    })?;
    Ok(PriorCache {
        logp_prior,
        source,
        fingerprint: model.fingerprint(),
        normalized: normalize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Mle,
    Ig { alpha: f64 },
}

impl Objective {
    pub fn alpha(&self) -> f64 {
        match self {
            Objective::Mle => 0.0,
            Objective::Ig { alpha } => *alpha,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Mle => "mle".into(),
            Objective::Ig { alpha } => format!("ig:{alpha}"),
        }
    }
}

const TAG_MLE: u32 = 0;
const TAG_IG: u32 = 1;
const TAG_NORMALIZED: u32 = 0x100;
const HEADER_LEN: usize = 8 + 8 + 4 + 8;

/// `[num_images × num_candidates]` scores under one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    objective: Objective,
    normalized: bool,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, objective: Objective, normalized: bool) -> Result<Self> {
        if rows * cols != values.len() || cols == 0 {
            return Err(Error::contract(format!(
                "score matrix {rows}x{cols} cannot hold {} values",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score at image {}, candidate {}",
                k / cols,
                k % cols
            )));
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            values,
            objective,
            normalized,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        ScoreMatrix::new(
            self.rows,
            self.cols,
            self.values.iter().map(|v| v + c).collect(),
            self.objective,
            self.normalized,
        )
    }

    /// Header `u64 rows, u64 cols, u32 tag, f64 α`, then row-major `f64`
    /// values, all little-endian. Bit 8 of the tag marks length-normalized scores.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        let mut tag = match self.objective {
            Objective::Mle => TAG_MLE,
            Objective::Ig { .. } => TAG_IG,
        };
        if self.normalized {
            tag |= TAG_NORMALIZED;
        }
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&self.objective.alpha().to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err("truncated header".into());
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let rows = u64_at(0) as usize;
        let cols = u64_at(8) as usize;
        let tag = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let alpha = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let objective = match tag & !TAG_NORMALIZED {
            TAG_MLE => Objective::Mle,
            TAG_IG => Objective::Ig { alpha },
            t => return Err(format!("unknown objective tag {t}")),
        };
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or("matrix dimensions overflow")?;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ScoreMatrix::new(rows, cols, values, objective, tag & TAG_NORMALIZED != 0).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ScoreMatrix::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// `values[i][j] = log P(T_j | I_i)`; each image is encoded once.
pub fn score_mle(
    model: &CaptionerModel,
    images: &[&Image],
    candidates: &CandidateSet,
    normalize: bool,
    par: &Parallelism,
) -> Result<ScoreMatrix> {
    candidates.check_model(model)?;
    if images.is_empty() {
        return Err(Error::contract("no images to score"));
    }
    let rows = par.try_map(images.len(), |i| -> Result<Vec<f64>> {
        let mem = model.encode_image(images[i])?;
        candidates
            .captions
            .iter()
            .map(|c| model.sequence_logprob(c, Memory::Image(&mem), normalize))
            .collect()
    })?;
    let values = rows.into_iter().flatten().collect();
    ScoreMatrix::new(images.len(), candidates.len(), values, Objective::Mle, normalize)
}

/// `out[i][j] = mle[i][j] − α·prior[j]`.
pub fn score_ig(mle: &ScoreMatrix, prior: &PriorCache, alpha: f64) -> Result<ScoreMatrix> {
    check_ig_inputs(mle, prior, alpha)?;
    let mut values = vec![0.0; mle.values.len()];
    for (out, row) in values.chunks_exact_mut(mle.cols).zip(mle.values.chunks_exact(mle.cols)) {
        ig_row(row, &prior.logp_prior, alpha, out);
    }
    ScoreMatrix::new(mle.rows, mle.cols, values, Objective::Ig { alpha }, mle.normalized)
}

pub(crate) fn check_ig_inputs(mle: &ScoreMatrix, prior: &PriorCache, alpha: f64) -> Result<()> {
    if mle.objective != Objective::Mle {
        return Err(Error::contract("score_ig expects an MLE score matrix"));
    }
    if prior.len() != mle.cols {
        return Err(Error::contract(format!(
            "prior has {} entries, score matrix has {} candidates",
            prior.len(),
            mle.cols
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if prior.normalized != mle.normalized {
        return Err(Error::contract("prior and score matrix disagree on length normalization"));
    }
    Ok(())
}

/// One IG row into `out`; at α = 0 the MLE row is copied, keeping -0.0.
pub(crate) fn ig_row(mle: &[f64], prior: &[f64], alpha: f64, out: &mut [f64]) {
    if alpha == 0.0 {
        out.copy_from_slice(mle);
    } else {
        for ((o, &s), &p) in out.iter_mut().zip(mle).zip(prior) {
            *o = s - alpha * p;
        }
    }
}

/// Captioner likelihood minus `α` times a separate language model's prior.
pub fn score_lm_plus_cap(
    cap_model: &CaptionerModel,
    lm_model: &CaptionerModel,
    images: &[&Image],
    candidates: &CandidateSet,
    alpha: f64,
    par: &Parallelism,
) -> Result<ScoreMatrix> {
    if cap_model.vocab_size() != lm_model.vocab_size() {
        return Err(Error::contract(format!(
            "captioner vocabulary {} differs from language model vocabulary {}",
            cap_model.vocab_size(),
            lm_model.vocab_size()
        )));
    }
    let mle = score_mle(cap_model, images, candidates, false, par)?;
    let prior = build_prior_cache(lm_model, candidates, PriorSource::ExternalLm, false, par)?;
    score_ig(&mle, &prior, alpha)
}
