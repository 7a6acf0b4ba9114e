use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use igcap::corpus::{generate_synthetic, load_jsonl, write_jsonl, Dataset, PromptTable, Vocab};
use igcap::evalharness::{
    alpha_sweep, classify_voting, mean_image_pcc, retrieval_recalls, sweep_csv, sweep_text, ClassificationReport,
    PccReport, RetrievalReport, SweepRow, TruthMap,
};
use igcap::model::CaptionerModel;
use igcap::par::Parallelism;
use igcap::scoring::{
    build_prior_cache, score_ig, score_mle, CandidateSet, Objective, PriorCache, PriorSource, ScoreMatrix,
};
use igcap::training::{train, TrainLogRecord, TRAIN_LOG_HEADER};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, EvalObjective, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(igcap::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn say(out: &mut dyn Write, msg: impl AsRef<str>) {
    let _ = writeln!(out, "{}", msg.as_ref());
}

/// Unix seconds; the only non-deterministic field of every JSON report.
pub fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    secs.to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

fn print_resolved(cfg: &RunConfig, out: &mut dyn Write) {
    say(out, format!("# resolved config (sha256 {})", cfg.hash()));
    say(out, cfg.to_toml());
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub generated_at: String,
    pub config_hash: String,
    pub train_size: usize,
    pub eval_size: usize,
    pub vocab_size: usize,
    pub num_prompts: usize,
    pub class_counts: Vec<usize>,
    /// Least-squares slope of log count against log rank, negated.
    pub fitted_skew: f64,
    /// Count of the most frequent class over the rarest.
    pub skew_ratio: f64,
}

pub fn cmd_gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<GenSummary> {
    print_resolved(cfg, out);
    let corpus = generate_synthetic(&cfg.data)?;
    let dir = cfg.data_dir();
    mkdir(&dir)?;
    write_jsonl(&corpus.train, &corpus.vocab, &dir.join("train.jsonl"), "images")?;
    write_jsonl(&corpus.eval, &corpus.vocab, &dir.join("eval.jsonl"), "images")?;
    corpus.prompts.save(&dir.join("prompts.tsv"))?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    let candidates = CandidateSet::from_prompts(&corpus.prompts, &corpus.vocab)?;
    let truth = TruthMap::from_labels(&corpus.eval.labels()?, &candidates);
    write_file(&dir.join("truth.tsv"), truth.to_tsv())?;

    // training captions carry no label; the class word is the last content token
    let class_of_token: std::collections::HashMap<usize, usize> = (0..cfg.data.num_classes)
        .filter_map(|k| corpus.vocab.id(&cfg.data.class_name(k)).map(|id| (id, k)))
        .collect();
    let mut counts = vec![0usize; cfg.data.num_classes];
    for ex in corpus.train.examples() {
        if let Some(&k) = class_of_token.get(&ex.tokens[ex.tokens.len() - 2]) {
            counts[k] += 1;
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (((k + 1) as f64).ln(), (c as f64).ln()))
        .unzip();
    let summary = GenSummary {
        generated_at: timestamp(),
        config_hash: cfg.hash(),
        train_size: corpus.train.len(),
        eval_size: corpus.eval.len(),
        vocab_size: corpus.vocab.len(),
        num_prompts: corpus.prompts.entries.len(),
        fitted_skew: -slope(&xs, &ys),
        skew_ratio: counts[0] as f64 / (*counts.last().unwrap()).max(1) as f64,
        class_counts: counts,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    say(
        out,
        format!(
            "wrote {} train / {} eval examples to {}\nclass counts {:?}\nfitted skew {:.3} (configured {}), max/min ratio {:.1}",
            summary.train_size,
            summary.eval_size,
            dir.display(),
            summary.class_counts,
            summary.fitted_skew,
            cfg.data.prior_skew,
            summary.skew_ratio
        ),
    );
    Ok(summary)
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

struct DataFiles {
    vocab: Vocab,
    prompts: PromptTable,
}

fn load_data_files(cfg: &RunConfig) -> Result<DataFiles> {
    let dir = cfg.data_dir();
    Ok(DataFiles {
        vocab: Vocab::load(&dir.join("vocab.txt"))?,
        prompts: PromptTable::load(&dir.join("prompts.tsv"))?,
    })
}

fn image_shape(cfg: &RunConfig) -> Option<[usize; 3]> {
    Some([cfg.data.image_size, cfg.data.image_size, cfg.data.channels])
}

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("model.ckpt"), dir.join("model.manifest"))
}

fn load_model(dir: &Path, vocab: &Vocab) -> Result<CaptionerModel> {
    let (ck, mf) = checkpoint_paths(dir);
    let model = CaptionerModel::load(&ck, &mf)?;
    if model.vocab_size() != vocab.len() {
        return Err(igcap::Error::Contract(format!(
            "checkpoint {} expects {} tokens, vocabulary has {}",
            ck.display(),
            model.vocab_size(),
            vocab.len()
        ))
        .into());
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub generated_at: String,
    pub config_hash: String,
    pub checkpoint_fingerprint: String,
    pub steps: usize,
    pub first_combined: Option<f64>,
    pub final_combined: Option<f64>,
    pub final_multimodal: Option<f64>,
    pub final_unimodal: Option<f64>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub log: Vec<TrainLogRecord>,
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome> {
    let files = load_data_files(cfg)?;
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = files.vocab.len();
    print_resolved(&cfg, out);
    let data = load_jsonl(&cfg.data_dir().join("train.jsonl"), &files.vocab, image_shape(&cfg))?;
    let dir = cfg.model_dir();
    let ckpt_dir = dir.join("checkpoints");
    mkdir(&ckpt_dir)?;

    let mut model = CaptionerModel::new(cfg.model.clone())?;
    say(out, format!("{} parameters, {} training examples", model.params().num_scalars(), data.len()));
    let par = Parallelism::new(cfg.workers);
    let every = cfg.train.eval_every;
    let report_every = (cfg.train.steps / 20).max(1);
    let log = train(&mut model, &data, &cfg.train, &par, |r, m| {
        if r.step % report_every == 0 || r.step == cfg.train.steps {
            say(
                out,
                format!(
                    "step {:>6}  L {:.4}  multi {:.4}  uni {:.4}  |g| {:.3}  {:.1}s",
                    r.step, r.combined, r.l_multimodal, r.l_unimodal, r.grad_norm, r.seconds
                ),
            );
        }
        if every > 0 && r.step % every == 0 {
            igcap::numerics::save_checkpoint(m.params(), &ckpt_dir.join(format!("step_{:06}.ckpt", r.step)))?;
        }
        Ok(())
    })?;

    let (ck, mf) = checkpoint_paths(&dir);
    model.save(&ck, &mf)?;
    let mut csv = format!("{TRAIN_LOG_HEADER}\n");
    for r in &log {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&dir.join("train_log.csv"), csv)?;

    let report = TrainReport {
        generated_at: timestamp(),
        config_hash: cfg.hash(),
        checkpoint_fingerprint: model.fingerprint(),
        steps: log.len(),
        first_combined: log.first().map(|r| r.combined),
        final_combined: log.last().map(|r| r.combined),
        final_multimodal: log.last().map(|r| r.l_multimodal),
        final_unimodal: log.last().map(|r| r.l_unimodal),
    };
    write_json(&dir.join("train_report.json"), &report)?;
    say(out, format!("checkpoint {} (sha256 {})", ck.display(), report.checkpoint_fingerprint));
    Ok(TrainOutcome { report, log })
}

struct EvalContext {
    model: CaptionerModel,
    lm: Option<CaptionerModel>,
    candidates: CandidateSet,
    data: Dataset,
    labels: Vec<usize>,
    cache_dir: PathBuf,
    par: Parallelism,
    normalize: bool,
}

fn source_of(obj: EvalObjective) -> PriorSource {
    match obj {
        EvalObjective::Mle | EvalObjective::Ig(_) => PriorSource::UnimodalMode,
        EvalObjective::ZeroImage(_) => PriorSource::ZeroImage,
        EvalObjective::LmPlusCap(_) => PriorSource::ExternalLm,
    }
}

fn source_name(s: PriorSource) -> &'static str {
    match s {
        PriorSource::UnimodalMode => "unimodal_mode",
        PriorSource::ZeroImage => "zero_image",
        PriorSource::ExternalLm => "external_lm",
    }
}

fn open_eval(cfg: &RunConfig, obj: EvalObjective) -> Result<EvalContext> {
    let files = load_data_files(cfg)?;
    let model = load_model(&cfg.model_dir(), &files.vocab)?;
    let lm = match obj {
        EvalObjective::LmPlusCap(_) => {
            let dir = cfg
                .eval
                .lm_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("lm_plus_cap needs eval.lm_dir".into()))?;
            Some(load_model(dir, &files.vocab)?)
        }
        _ => None,
    };
    let candidates = CandidateSet::from_prompts(&files.prompts, &files.vocab)?;
    let eval_path = cfg.data_dir().join("eval.jsonl");
    let data = load_jsonl(&eval_path, &files.vocab, image_shape(cfg))?;
    let labels = data.labels()?;

    // scores depend on the checkpoint, the candidates, the images and the normalization flag
    let mut h = Sha256::new();
    h.update(model.fingerprint().as_bytes());
    h.update(candidates.manifest().as_bytes());
    for c in candidates.captions() {
        h.update(format!("{c:?}").as_bytes());
    }
    for img in data.images() {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update([cfg.eval.normalize as u8]);
    let key = hex(&h.finalize());
    let cache_dir = cfg.eval_dir().join("cache").join(&key[..16]);
    mkdir(&cache_dir)?;
    Ok(EvalContext {
        model,
        lm,
        candidates,
        data,
        labels,
        cache_dir,
        par: Parallelism::new(cfg.workers),
        normalize: cfg.eval.normalize,
    })
}

impl EvalContext {
    /// MLE matrix from the cache when present; `true` if it was reused.
    fn mle(&self) -> Result<(ScoreMatrix, bool)> {
        let path = self.cache_dir.join("mle.bin");
        if path.exists() {
            let m = ScoreMatrix::load(&path)?;
            if m.rows() == self.data.len() && m.cols() == self.candidates.len() {
                return Ok((m, true));
            }
        }
        let m = score_mle(&self.model, &self.data.images(), &self.candidates, self.normalize, &self.par)?;
        m.save(&path)?;
        self.candidates.save_manifest(&self.cache_dir.join("mle.columns.tsv"))?;
        Ok((m, false))
    }

    fn prior(&self, source: PriorSource) -> Result<PriorCache> {
        let model = match source {
            PriorSource::ExternalLm => self.lm.as_ref().expect("lm loaded for external prior"),
            _ => &self.model,
        };
        let path = self.cache_dir.join(format!("prior_{}_{}.json", source_name(source), &model.fingerprint()[..16]));
        if path.exists() {
            let p = PriorCache::load(&path)?;
            if p.source == source && p.fingerprint == model.fingerprint() && p.len() == self.candidates.len() {
                return Ok(p);
            }
        }
        let p = build_prior_cache(model, &self.candidates, source, self.normalize, &self.par)?;
        p.save(&path)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub generated_at: String,
    pub config_hash: String,
    pub checkpoint_fingerprint: String,
    pub lm_fingerprint: Option<String>,
    pub objective: String,
    pub alpha: f64,
    pub prior_source: PriorSource,
    pub classification: ClassificationReport,
    /// Prior against the plain conditional score.
    pub pcc_mle: PccReport,
    /// Prior against the evaluated objective.
    pub pcc_objective: PccReport,
    pub retrieval: Option<Vec<RetrievalReport>>,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub scores_cached: bool,
    pub report_path: PathBuf,
}

fn label_slug(label: &str) -> String {
    label.replace(':', "_")
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalOutcome> {
    print_resolved(cfg, out);
    let obj = cfg.objective()?;
    let ctx = open_eval(cfg, obj)?;
    let t = Instant::now();
    let (mle, cached) = ctx.mle()?;
    say(
        out,
        if cached {
            format!("reused cached scores from {}", ctx.cache_dir.display())
        } else {
            format!("scored {}x{} in {:.1}s", mle.rows(), mle.cols(), t.elapsed().as_secs_f64())
        },
    );
    let source = source_of(obj);
    let prior = ctx.prior(source)?;
    let alpha = obj.alpha();
    let scores = match obj {
        EvalObjective::Mle => mle.clone(),
        _ => score_ig(&mle, &prior, alpha)?,
    };
    let classification = classify_voting(&scores, &ctx.candidates, &ctx.labels)?;
    let pcc_mle = mean_image_pcc(&mle, &prior, Objective::Mle, &ctx.par)?;
    let pcc_objective = mean_image_pcc(&mle, &prior, scores.objective(), &ctx.par)?;
    let retrieval = match &cfg.eval.truth_map {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let truth = TruthMap::parse_tsv(&text, scores.rows(), path)?;
            let (a, b) = retrieval_recalls(&scores, &truth, &cfg.eval.recall_ks, &ctx.par)?;
            Some(vec![a, b])
        }
        None => None,
    };
    let report = EvalReport {
        generated_at: timestamp(),
        config_hash: cfg.hash(),
        checkpoint_fingerprint: ctx.model.fingerprint(),
        lm_fingerprint: ctx.lm.as_ref().map(|m| m.fingerprint()),
        objective: obj.label(),
        alpha,
        prior_source: source,
        classification,
        pcc_mle,
        pcc_objective,
        retrieval,
    };
    let dir = cfg.eval_dir();
    let slug = label_slug(&report.objective);
    let report_path = dir.join(format!("report_{slug}.json"));
    write_json(&report_path, &report)?;
    let mut text = report.classification.to_text();
    text.push_str(&report.pcc_mle.to_text());
    text.push_str(&report.pcc_objective.to_text());
    for r in report.retrieval.iter().flatten() {
        text.push_str(&r.to_text());
    }
    write_file(&dir.join(format!("report_{slug}.txt")), &text)?;
    say(out, text);
    Ok(EvalOutcome {
        report,
        scores_cached: cached,
        report_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub generated_at: String,
    pub config_hash: String,
    pub checkpoint_fingerprint: String,
    pub prior_source: PriorSource,
    pub rows: Vec<SweepRow>,
}

pub struct SweepOutcome {
    pub report: SweepReport,
    pub scores_cached: bool,
    pub csv_path: PathBuf,
}

pub fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<SweepOutcome> {
    print_resolved(cfg, out);
    let obj = cfg.objective()?;
    let ctx = open_eval(cfg, obj)?;
    let (mle, cached) = ctx.mle()?;
    let source = source_of(obj);
    let prior = ctx.prior(source)?;
    let rows = alpha_sweep(&mle, &prior, &ctx.candidates, &ctx.labels, &cfg.eval.alpha_grid, &ctx.par)?;
    let dir = cfg.eval_dir();
    let name = source_name(source);
    let csv_path = dir.join(format!("sweep_{name}.csv"));
    write_file(&csv_path, sweep_csv(&rows))?;
    write_file(&dir.join(format!("sweep_{name}.txt")), sweep_text(&rows))?;
    let report = SweepReport {
        generated_at: timestamp(),
        config_hash: cfg.hash(),
        checkpoint_fingerprint: ctx.model.fingerprint(),
        prior_source: source,
        rows,
    };
    write_json(&dir.join(format!("sweep_{name}.json")), &report)?;
    say(out, sweep_text(&report.rows));
    Ok(SweepOutcome {
        report,
        scores_cached: cached,
        csv_path,
    })
}
