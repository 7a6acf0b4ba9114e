//! Tokenization, the synthetic skewed-prior corpus, and on-disk datasets.

mod image;
mod jsonl;
mod synthetic;
mod vocab;

use std::path::Path;

pub use image::{Image, RASTER_MAGIC};
pub use jsonl::{load_jsonl, write_jsonl};
pub use synthetic::{
    generate_synthetic, ClassSignature, SyntheticCorpus, SyntheticSpec, DEFAULT_CLASS_NAMES,
    DEFAULT_TEMPLATES,
};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD};

use crate::error::{Error, Result};

/// One (image, caption) pair. `tokens` is `BOS … EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub image: Image,
    pub tokens: Vec<usize>,
    pub class_id: Option<usize>,
}

/// Immutable collection of examples sharing one image shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    examples: Vec<MultimodalExample>,
    image_shape: Option<[usize; 3]>,
}

impl Dataset {
    pub fn new(examples: Vec<MultimodalExample>, image_shape: Option<[usize; 3]>) -> Result<Self> {
        let shape = image_shape.or_else(|| examples.first().map(|e| e.image.shape()));
        for (i, ex) in examples.iter().enumerate() {
            if Some(ex.image.shape()) != shape {
                return Err(Error::contract(format!(
                    "example {i} has image shape {:?}, expected {:?}",
                    ex.image.shape(),
                    shape.unwrap()
                )));
            }
            if ex.tokens.len() < 2 || ex.tokens[0] != BOS || *ex.tokens.last().unwrap() != EOS {
                return Err(Error::contract(format!("example {i}: tokens must be BOS … EOS")));
            }
        }
        Ok(Dataset {
            examples,
            image_shape: shape,
        })
    }

    pub fn examples(&self) -> &[MultimodalExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image_shape
    }

    pub fn images(&self) -> Vec<&Image> {
        self.examples.iter().map(|e| &e.image).collect()
    }

    /// Class labels of a labelled split; errors if any example lacks one.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.class_id
                    .ok_or_else(|| Error::contract(format!("example {i} has no class_id")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub class_id: usize,
    pub prompt_index: usize,
    pub text: String,
}

/// The per-class prompt ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptTable {
    pub entries: Vec<Prompt>,
}

impl PromptTable {
    /// `class_id<TAB>prompt` per line; prompt_index counts up within each class.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.entries {
            out.push_str(&format!("{}\t{}\n", p.class_id, p.text));
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut next_index: std::collections::HashMap<usize, usize> = Default::default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (cls, prompt) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected class_id<TAB>prompt"))?;
            let class_id: usize = cls.trim().parse().map_err(|_| parse_err("class_id is not an integer"))?;
            let idx = next_index.entry(class_id).or_default();
            entries.push(Prompt {
                class_id,
                prompt_index: *idx,
                text: prompt.to_string(),
            });
            *idx += 1;
        }
        Ok(PromptTable { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|p| p.class_id + 1).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_table_round_trip() {
        let t = PromptTable {
            entries: vec![
                Prompt { class_id: 0, prompt_index: 0, text: "a cat".into() },
                Prompt { class_id: 0, prompt_index: 1, text: "the cat".into() },
                Prompt { class_id: 1, prompt_index: 0, text: "a dog".into() },
            ],
        };
        let back = PromptTable::parse_tsv(&t.to_tsv(), Path::new("p.tsv")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn prompt_table_reports_bad_line() {
        let err = PromptTable::parse_tsv("0\ta cat\nx\ta dog\n", Path::new("p.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
