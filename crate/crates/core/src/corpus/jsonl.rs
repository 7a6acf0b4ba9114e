//! JSONL datasets: one `{image_path, caption, class_id?}` object per line.
//!
//! `image_path` is resolved relative to the JSONL file's directory and points
//! at a raw raster (see [`Image::to_raster_bytes`]). A line may carry
//! pre-tokenized `tokens` instead of, or in addition to, `caption`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, MultimodalExample, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_id: Option<usize>,
}

pub fn load_jsonl(path: &Path, vocab: &Vocab, image_shape: Option<[usize; 3]>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut examples = Vec::new();
    let mut shape = image_shape;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let line: Line = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let tokens = match (&line.caption, &line.tokens) {
            (None, None) => return Err(err("needs `caption` or `tokens`".into())),
            (Some(c), None) => vocab.encode(c).map_err(|e| err(e.to_string()))?,
            (caption, Some(ids)) => {
                let ids: Vec<usize> = ids
                    .iter()
                    .map(|&t| usize::try_from(t).map_err(|_| err(format!("bad token id {t}"))))
                    .collect::<Result<_>>()?;
                vocab.validate_caption(&ids).map_err(|e| err(format!("bad token ids: {e}")))?;
                if let Some(c) = caption {
                    let enc = vocab.encode(c).map_err(|e| err(e.to_string()))?;
                    if enc != ids {
                        return Err(err("`caption` and `tokens` disagree".into()));
                    }
                }
                ids
            }
        };
        let image_path: PathBuf = base.join(&line.image_path);
        if !image_path.exists() {
            return Err(err(format!("missing image file {}", image_path.display())));
        }
        let image = Image::load_raster(&image_path)?;
        match shape {
            None => shape = Some(image.shape()),
            Some(s) if s != image.shape() => {
                return Err(err(format!("image shape {:?} differs from {:?}", image.shape(), s)))
            }
            _ => {}
        }
        examples.push(MultimodalExample {
            image,
            tokens,
            class_id: line.class_id,
        });
    }
    Dataset::new(examples, shape)
}

/// Writes `dataset` as `jsonl_path` plus one raster per example under
/// `<jsonl dir>/<image_subdir>/<stem>_<index>.raw`.
pub fn write_jsonl(dataset: &Dataset, vocab: &Vocab, jsonl_path: &Path, image_subdir: &str) -> Result<()> {
    let base = jsonl_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let img_dir = base.join(image_subdir);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let stem = jsonl_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("data");
    let mut out = Vec::new();
    for (i, ex) in dataset.examples().iter().enumerate() {
        let rel = format!("{image_subdir}/{stem}_{i:06}.raw");
        ex.image.save_raster(&base.join(&rel))?;
        let line = Line {
            image_path: rel,
            caption: Some(vocab.decode(&ex.tokens)?),
            tokens: None,
            class_id: ex.class_id,
        };
        serde_json::to_writer(&mut out, &line).expect("in-memory serialization");
        out.push(b'\n');
    }
    std::fs::File::create(jsonl_path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(jsonl_path, e))
}
