//! Seeded generator for a skewed-prior image/caption corpus.
//!
//! Each class owns a zero-mean ±1 texture over a small square tile (a row of a
//! Sylvester Hadamard matrix) and a per-channel sign. Its images are a gray
//! canvas with that texture repeated across it, plus clamped Gaussian pixel
//! noise. With probability `distractor_rate` an image shows the texture of a
//! uniformly drawn other class instead of its own, so an image does not always
//! settle its caption. Training classes are drawn from a Zipf law over class
//! rank, so the caption marginal is skewed. The evaluation split is
//! class-balanced and rendered the same way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::vocab::{build_vocab, Vocab};
use super::{Dataset, MultimodalExample, Prompt, PromptTable};
use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.5;

pub const DEFAULT_CLASS_NAMES: [&str; 20] = [
    "cat", "dog", "bird", "fish", "horse", "frog", "ship", "truck", "plane", "deer", "apple",
    "chair", "clock", "lamp", "rose", "tiger", "whale", "train", "bus", "kite",
];

pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a {}",
    "a bad photo of a {}",
    "a photo of the {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "a close-up photo of a {}",
    "a bright photo of a {}",
    "a photo of my {}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub prompts_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Zipf exponent over class rank for the training split.
    pub prior_skew: f64,
    pub noise_sigma: f64,
    /// Texture amplitude relative to the gray background.
    pub signal_contrast: f64,
    /// Side of the repeated texture tile; a power of two dividing `image_size`.
    pub tile_size: usize,
    /// Probability that an image renders another class's texture.
    pub distractor_rate: f64,
    pub train_size: usize,
    pub eval_per_class: usize,
    /// Defaults to [`DEFAULT_CLASS_NAMES`], then `thing{k}`.
    pub class_names: Vec<String>,
    /// `{}` marks the class name.
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            prompts_per_class: 8,
            image_size: 32,
            channels: 3,
            prior_skew: 1.5,
            noise_sigma: 0.35,
            signal_contrast: 0.2,
            tile_size: 4,
            distractor_rate: 0.0,
            train_size: 20_000,
            eval_per_class: 50,
            class_names: Vec::new(),
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

/// Texture and channel signs of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    /// Row-major ±1 values over one tile.
    pub pattern: Vec<f64>,
    /// Per-channel sign, each ±1.
    pub tint: Vec<f64>,
}

fn hadamard_row(order: usize, row: usize, col: usize) -> f64 {
    debug_assert!(order.is_power_of_two() && row < order && col < order);
    if (row & col).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 }
}

impl SyntheticSpec {
    /// Number of distinct signatures the tile and channel count allow.
    pub fn signature_capacity(&self) -> usize {
        let rows = (self.tile_size * self.tile_size).saturating_sub(1);
        rows.saturating_mul(1usize << self.channels.min(16))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.prompts_per_class < 1 {
            return fail("prompts_per_class must be >= 1".into());
        }
        if self.prompts_per_class > self.templates.len() {
            return fail(format!(
                "prompts_per_class {} exceeds the {} available templates",
                self.prompts_per_class,
                self.templates.len()
            ));
        }
        if let Some(t) = self.templates.iter().find(|t| t.matches("{}").count() != 1) {
            return fail(format!("template {t:?} must contain exactly one {{}}"));
        }
        if !(self.prior_skew >= 0.0 && self.prior_skew.is_finite()) {
            return fail(format!("prior_skew must be a finite value >= 0, got {}", self.prior_skew));
        }
        if !(self.noise_sigma >= 0.0) || !(self.signal_contrast > 0.0 && self.signal_contrast <= BACKGROUND) {
            return fail("noise_sigma must be >= 0 and signal_contrast in (0, 0.5]".into());
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return fail(format!("distractor_rate must be in [0, 1), got {}", self.distractor_rate));
        }
        if self.tile_size < 2 || !self.tile_size.is_power_of_two() {
            return fail(format!("tile_size must be a power of two >= 2, got {}", self.tile_size));
        }
        if self.channels == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.tile_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of tile_size {}",
                self.image_size, self.tile_size
            ));
        }
        if self.num_classes > self.signature_capacity() {
            return fail(format!(
                "{} classes exceed the {} signatures of a {}-pixel tile",
                self.num_classes,
                self.signature_capacity(),
                self.tile_size
            ));
        }
        if self.train_size == 0 || self.eval_per_class == 0 {
            return fail("train_size and eval_per_class must be positive".into());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return fail("class_names must be empty or list one name per class".into());
        }
        if self.class_names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return fail("class names must be single tokens".into());
        }
        Ok(())
    }

    pub fn class_name(&self, k: usize) -> String {
        if let Some(n) = self.class_names.get(k) {
            return n.clone();
        }
        DEFAULT_CLASS_NAMES
            .get(k)
            .map_or_else(|| format!("thing{k}"), |s| s.to_string())
    }

    pub fn caption(&self, class: usize, prompt: usize) -> String {
        self.templates[prompt].replace("{}", &self.class_name(class))
    }

    /// Unnormalized Zipf weights `(k+1)^-s` over class rank.
    pub fn zipf_weights(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| ((k + 1) as f64).powf(-self.prior_skew))
            .collect()
    }

    pub fn signature(&self, k: usize) -> ClassSignature {
        let order = self.tile_size * self.tile_size;
        // Row 0 is constant, so textures start at row 1; channel signs vary
        // only once every row is used.
        let row = 1 + k % (order - 1);
        let signs = k / (order - 1);
        ClassSignature {
            pattern: (0..order).map(|col| hadamard_row(order, row, col)).collect(),
            tint: (0..self.channels)
                .map(|c| if c < 64 && (signs >> c) & 1 == 1 { -1.0 } else { 1.0 })
                .collect(),
        }
    }

    /// Noise-free rendering of class `k`.
    pub fn clean_image(&self, k: usize) -> Image {
        self.render(k, |_| 0.0)
    }

    fn render(&self, k: usize, mut noise: impl FnMut(usize) -> f64) -> Image {
        let sig = self.signature(k);
        let (n, ch, t) = (self.image_size, self.channels, self.tile_size);
        let mut data = Vec::with_capacity(n * n * ch);
        for y in 0..n {
            for x in 0..n {
                let texel = sig.pattern[(y % t) * t + x % t];
                for c in 0..ch {
                    let base = BACKGROUND + self.signal_contrast * texel * sig.tint[c];
                    let v = (base + noise(data.len())).clamp(0.0, 1.0);
                    data.push(v as f32);
                }
            }
        }
        Image::new(n, n, ch, data).expect("rendered pixels are clamped")
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    pub train: Dataset,
    pub eval: Dataset,
    pub prompts: PromptTable,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let prompts = PromptTable {
        entries: (0..spec.num_classes)
            .flat_map(|c| {
                (0..spec.prompts_per_class).map(move |p| (c, p))
            })
            .map(|(class_id, prompt_index)| Prompt {
                class_id,
                prompt_index,
                text: spec.caption(class_id, prompt_index),
            })
            .collect(),
    };
    let texts: Vec<&str> = prompts.entries.iter().map(|p| p.text.as_str()).collect();
    let vocab = build_vocab(&texts)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let classes = WeightedIndex::new(spec.zipf_weights()).map_err(|e| Error::contract(e.to_string()))?;
    let sample_image = |class: usize, rng: &mut ChaCha8Rng| {
        let k = if spec.distractor_rate > 0.0 && rng.random::<f64>() < spec.distractor_rate {
            (class + rng.random_range(1..spec.num_classes)) % spec.num_classes
        } else {
            class
        };
        if spec.noise_sigma == 0.0 {
            spec.clean_image(k)
        } else {
            spec.render(k, |_| normal.sample(rng))
        }
    };

    let mut train = Vec::with_capacity(spec.train_size);
    for _ in 0..spec.train_size {
        let class = classes.sample(&mut rng);
        let prompt = rng.random_range(0..spec.prompts_per_class);
        let image = sample_image(class, &mut rng);
        train.push(MultimodalExample {
            image,
            tokens: vocab.encode(&spec.caption(class, prompt))?,
            class_id: None,
        });
    }

    let mut eval = Vec::with_capacity(spec.eval_per_class * spec.num_classes);
    for class in 0..spec.num_classes {
        for _ in 0..spec.eval_per_class {
            let image = sample_image(class, &mut rng);
            eval.push(MultimodalExample {
                image,
                tokens: vocab.encode(&spec.caption(class, 0))?,
                class_id: Some(class),
            });
        }
    }

    let shape = [spec.image_size, spec.image_size, spec.channels];
    Ok(SyntheticCorpus {
        vocab,
        train: Dataset::new(train, Some(shape))?,
        eval: Dataset::new(eval, Some(shape))?,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(skew: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            image_size: 8,
            prior_skew: skew,
            train_size: n,
            eval_per_class: 3,
            ..SyntheticSpec::default()
        }
    }

    fn class_counts(spec: &SyntheticSpec, corpus: &SyntheticCorpus) -> Vec<usize> {
        // class word is the final content token of every template
        let mut counts = vec![0; spec.num_classes];
        for ex in corpus.train.examples() {
            let word = corpus.vocab.token(ex.tokens[ex.tokens.len() - 2]).unwrap();
            let k = (0..spec.num_classes).find(|&k| spec.class_name(k) == word).unwrap();
            counts[k] += 1;
        }
        counts
    }

    #[test]
    fn zero_skew_is_uniform() {
        let spec = small(0.0, 10_000);
        let corpus = generate_synthetic(&spec).unwrap();
        for c in class_counts(&spec, &corpus) {
            // 1000 expected, binomial sd ≈ 30
            assert!((c as f64 - 1000.0).abs() < 150.0, "{c}");
        }
    }

    #[test]
    fn skew_ratio_matches_zipf_mass() {
        let spec = small(1.5, 10_000);
        let corpus = generate_synthetic(&spec).unwrap();
        let counts = class_counts(&spec, &corpus);
        let ratio = counts[0] as f64 / counts[9] as f64;
        let analytic = 10f64.powf(1.5); // ≈ 31.6
        assert!(ratio >= 10.0);
        assert!((ratio - analytic).abs() <= 0.2 * analytic, "{ratio} vs {analytic}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small(1.5, 300);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn whole_prompt_table_encodes() {
        let spec = SyntheticSpec {
            num_classes: 20,
            image_size: 12,
            ..small(1.0, 10)
        };
        let corpus = generate_synthetic(&spec).unwrap();
        assert_eq!(corpus.prompts.entries.len(), 20 * 8);
        for p in &corpus.prompts.entries {
            let ids = corpus.vocab.encode(&p.text).unwrap();
            assert_eq!(corpus.vocab.decode(&ids).unwrap(), p.text);
        }
    }

    #[test]
    fn eval_split_is_balanced_and_labelled() {
        let spec = small(2.0, 50);
        let corpus = generate_synthetic(&spec).unwrap();
        assert_eq!(corpus.eval.len(), 30);
        for k in 0..10 {
            let n = corpus.eval.examples().iter().filter(|e| e.class_id == Some(k)).count();
            assert_eq!(n, 3);
        }
        assert!(corpus.train.examples().iter().all(|e| e.class_id.is_none()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = small(1.0, 10);
        for bad in [
            SyntheticSpec { num_classes: 1, ..base.clone() },
            SyntheticSpec { prompts_per_class: 0, ..base.clone() },
            SyntheticSpec { prompts_per_class: 9, ..base.clone() },
            SyntheticSpec { prior_skew: -0.1, ..base.clone() },
            SyntheticSpec { image_size: 10, ..base.clone() },
            SyntheticSpec { tile_size: 3, image_size: 9, ..base.clone() },
            SyntheticSpec { distractor_rate: 1.0, ..base.clone() },
            SyntheticSpec { num_classes: 31, channels: 1, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(Error::Contract(_))), "{bad:?}");
        }
    }

    #[test]
    fn signatures_are_distinct() {
        let spec = SyntheticSpec { num_classes: 40, ..SyntheticSpec::default() };
        for a in 0..40 {
            for b in 0..a {
                assert_ne!(spec.clean_image(a), spec.clean_image(b));
            }
        }
    }

    #[test]
    fn textures_are_orthogonal_and_zero_mean() {
        let spec = SyntheticSpec::default();
        let sigs: Vec<_> = (0..15).map(|k| spec.signature(k).pattern).collect();
        for a in 0..15 {
            assert_eq!(sigs[a].iter().sum::<f64>(), 0.0);
            for b in 0..a {
                let dot: f64 = sigs[a].iter().zip(&sigs[b]).map(|(x, y)| x * y).sum();
                assert_eq!(dot, 0.0);
            }
        }
    }

    #[test]
    fn distractors_show_other_classes() {
        let clean = SyntheticSpec { noise_sigma: 0.0, ..small(0.0, 10) };
        let spec = SyntheticSpec { distractor_rate: 0.4, eval_per_class: 200, ..clean.clone() };
        let corpus = generate_synthetic(&spec).unwrap();
        let images: Vec<Image> = (0..10).map(|k| clean.clean_image(k)).collect();
        let mut own = 0;
        for ex in corpus.eval.examples() {
            let shown = images.iter().position(|im| *im == ex.image).unwrap();
            own += usize::from(Some(shown) == ex.class_id);
        }
        // 1200 expected of 2000, binomial sd ≈ 22
        assert!((own as f64 - 1200.0).abs() < 110.0, "{own}");
    }
}
