use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Closed whitespace vocabulary with PAD/BOS/EOS at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an ordered token list whose first three entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != SPECIALS {
            return Err(Error::contract("vocabulary must start with <pad> <bos> <eos>"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid token {t:?}")));
            }
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `[BOS, ids…, EOS]`; any unknown token is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for tok in text.split_whitespace() {
            let id = self.id(tok).ok_or_else(|| Error::OutOfVocabulary {
                token: tok.to_string(),
            })?;
            ids.push(id);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins tokens with single spaces, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < SPECIALS.len() {
                continue;
            }
            words.push(
                self.token(id)
                    .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))?,
            );
        }
        Ok(words.join(" "))
    }

    /// Valid caption: `BOS … EOS`, length ≥ 2, no specials inside, every id in range.
    pub fn validate_caption(&self, ids: &[usize]) -> Result<()> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::contract("token sequence must start with BOS and end with EOS"));
        }
        for &id in &ids[1..ids.len() - 1] {
            if id >= self.len() {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {}", self.len())));
            }
            if id < SPECIALS.len() {
                return Err(Error::contract(format!("special token {id} inside caption")));
            }
        }
        Ok(())
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Specials first, then distinct tokens by descending frequency, ties lexicographic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for tok in doc.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ordering_rule() {
        let v = build_vocab(&["a b", "b c"]).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "b", "a", "c"]);
    }

    #[test]
    fn single_document_tokens_once() {
        let v = build_vocab(&["the quick brown fox"]).unwrap();
        assert_eq!(v.len(), 3 + 4);
        for t in ["the", "quick", "brown", "fox"] {
            assert_eq!(v.tokens().iter().filter(|x| *x == t).count(), 1);
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty), Err(Error::Contract(_))));
    }

    #[test]
    fn ids_match_frequency_count_oracle() {
        let words = ["cat", "dog", "a", "photo", "of", "the", "bird", "fish", "red", "tiny"];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<String> = (0..100)
            .map(|_| {
                let n = rng.random_range(1..6);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        // oracle: count by linear scan, then order by repeated max extraction
        let mut pool: Vec<(String, usize)> = Vec::new();
        for doc in &corpus {
            for w in doc.split(' ') {
                match pool.iter_mut().find(|(t, _)| t == w) {
                    Some(e) => e.1 += 1,
                    None => pool.push((w.to_string(), 1)),
                }
            }
        }
        let mut expected = vec!["<pad>".to_string(), "<bos>".into(), "<eos>".into()];
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (t, c) = &pool[i];
                let (bt, bc) = &pool[best];
                if c > bc || (c == bc && t < bt) {
                    best = i;
                }
            }
            expected.push(pool.remove(best).0);
        }
        assert_eq!(build_vocab(&corpus).unwrap().tokens(), expected.as_slice());
    }

    #[test]
    fn empty_text_encodes_to_bos_eos() {
        let v = build_vocab(&["a"]).unwrap();
        assert_eq!(v.encode("").unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn oov_is_explicit() {
        let v = build_vocab(&["a photo of a cat"]).unwrap();
        assert!(matches!(v.encode("a photo of a dog"), Err(Error::OutOfVocabulary { token }) if token == "dog"));
    }

    #[test]
    fn round_trip_sentence() {
        let v = build_vocab(&["a photo of a cat"]).unwrap();
        let ids = v.encode("a photo of a cat").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "a photo of a cat");
    }

    #[test]
    fn save_load_round_trip() {
        let v = build_vocab(&["x y y z"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in proptest::collection::vec("[a-z]{1,6}", 0..12)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str(), "pad"]).unwrap();
            let ids = v.encode(&text).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
