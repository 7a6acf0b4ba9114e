//! Classification, correlation and retrieval metrics over score matrices.

mod report;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::scoring::{check_ig_inputs, score_ig, CandidateSet, Objective, PriorCache, ScoreMatrix};

pub use report::{sweep_csv, sweep_text, SWEEP_CSV_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub objective: String,
    pub alpha: f64,
    pub num_images: usize,
    pub top1: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Checks that every class owns prompts `0..P` for one shared `P`; returns
/// `(num_classes, P)`.
fn prompt_grid(candidates: &CandidateSet) -> Result<(usize, usize)> {
    let c = candidates.num_classes();
    let mut per_class: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); c];
    for (&k, &p) in candidates.class_ids().iter().zip(candidates.prompt_indices()) {
        per_class[k].insert(p);
    }
    let p = per_class[0].len();
    for (k, set) in per_class.iter().enumerate() {
        if set.len() != p || set.iter().next_back().is_some_and(|&m| m + 1 != p) {
            return Err(Error::contract(format!(
                "class {k} has prompts {set:?}; every class needs prompts 0..{p}"
            )));
        }
    }
    Ok((c, p))
}

/// Per-image class by prompt-ensemble voting.
///
/// Each prompt index casts one vote for its highest-scoring class (ties to
/// the lower class id). Most votes wins; ties go to the larger summed score
/// over the class's prompts, then to the lower class id.
pub fn vote(scores: &ScoreMatrix, candidates: &CandidateSet) -> Result<Vec<usize>> {
    if scores.cols() != candidates.len() {
        return Err(Error::contract(format!(
            "score matrix has {} columns, candidate set has {}",
            scores.cols(),
            candidates.len()
        )));
    }
    let voter = Voter::new(candidates)?;
    let mut votes = Vec::new();
    Ok((0..scores.rows()).map(|i| voter.predict(scores.row(i), &mut votes)).collect())
}

/// Alphas evaluated side by side in the sweep kernels.
const LANES: usize = 4;

/// Column layout for voting over one score row.
struct Voter {
    classes: usize,
    prompts: usize,
    /// Column of `(class, prompt)` at `prompt * classes + class`.
    column: Vec<usize>,
}

impl Voter {
    fn new(candidates: &CandidateSet) -> Result<Self> {
        let (c, p) = prompt_grid(candidates)?;
        let mut column = vec![0usize; c * p];
        for (j, (&k, &pi)) in candidates.class_ids().iter().zip(candidates.prompt_indices()).enumerate() {
            column[pi * c + k] = j;
        }
        Ok(Voter { classes: c, prompts: p, column })
    }

    fn predict(&self, row: &[f64], votes: &mut Vec<usize>) -> usize {
        let c = self.classes;
        votes.clear();
        votes.resize(c, 0);
        for cols in self.column.chunks(c) {
            let (mut best, mut bv) = (0, row[cols[0]]);
            for (k, &j) in cols.iter().enumerate().skip(1) {
                if row[j] > bv {
                    (best, bv) = (k, row[j]);
                }
            }
            votes[best] += 1;
        }
        self.winner(votes, |j| row[j])
    }

    /// Most votes, then largest summed score, then lowest class id.
    fn winner(&self, votes: &[usize], at: impl Fn(usize) -> f64) -> usize {
        let c = self.classes;
        let top = *votes.iter().max().unwrap();
        let summed = |k: usize| (0..self.prompts).map(|pi| at(self.column[pi * c + k])).sum::<f64>();
        let mut win = votes.iter().position(|&v| v == top).unwrap();
        let mut win_sum = None;
        for k in win + 1..c {
            if votes[k] == top {
                let ws = *win_sum.get_or_insert_with(|| summed(win));
                let ks = summed(k);
                if ks > ws {
                    win = k;
                    win_sum = Some(ks);
                }
            }
        }
        win
    }

    /// `predict` for each lane of `ys[column]`.
    fn predict_lanes(&self, ys: &[[f64; LANES]]) -> [usize; LANES] {
        let c = self.classes;
        let mut votes = vec![[0usize; LANES]; c];
        for cols in self.column.chunks(c) {
            let (mut best, mut bv) = ([0usize; LANES], ys[cols[0]]);
            for (k, &j) in cols.iter().enumerate().skip(1) {
                let v = &ys[j];
                for w in 0..LANES {
                    if v[w] > bv[w] {
                        (best[w], bv[w]) = (k, v[w]);
                    }
                }
            }
            for w in 0..LANES {
                votes[best[w]][w] += 1;
            }
        }
        let mut lane_votes = vec![0usize; c];
        std::array::from_fn(|w| {
            for (lv, v) in lane_votes.iter_mut().zip(&votes) {
                *lv = v[w];
            }
            self.winner(&lane_votes, |j| ys[j][w])
        })
    }
}

pub fn classify_voting(scores: &ScoreMatrix, candidates: &CandidateSet, labels: &[usize]) -> Result<ClassificationReport> {
    if labels.len() != scores.rows() {
        return Err(Error::contract(format!(
            "{} labels for {} images",
            labels.len(),
            scores.rows()
        )));
    }
    let predictions = vote(scores, candidates)?;
    let c = candidates.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} is not a candidate class")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in labels.iter().zip(&predictions) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    let objective = scores.objective();
    Ok(ClassificationReport {
        objective: objective.label(),
        alpha: objective.alpha(),
        num_images: labels.len(),
        top1: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        per_class_accuracy,
        confusion,
        predictions,
    })
}

/// Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(format!(
            "pearson needs two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Centered::new(x).pearson(y)
}

/// One side of a Pearson correlation, centered once and reused.
struct Centered<'a> {
    x: &'a [f64],
    mean: f64,
    sxx: f64,
}

impl<'a> Centered<'a> {
    fn new(x: &'a [f64]) -> Self {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let sxx = x.iter().map(|a| (a - mean) * (a - mean)).fold(0.0, |acc, d| acc + d);
        Centered { x, mean, sxx }
    }

    fn pearson(&self, y: &[f64]) -> Result<f64> {
        let my = y.iter().fold(-0.0, |acc, v| acc + v) / y.len() as f64;
        let (mut sxy, mut syy) = (0.0, 0.0);
        for (a, b) in self.x.iter().zip(y) {
            let (dx, dy) = (a - self.mean, b - my);
            sxy += dx * dy;
            syy += dy * dy;
        }
        if self.sxx == 0.0 || syy == 0.0 {
            return Err(Error::Degenerate("zero variance".into()));
        }
        Ok((sxy / (self.sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    }

    /// `pearson` for each lane of `ys[column]`; `None` on zero variance.
    fn pearson_lanes(&self, ys: &[[f64; LANES]]) -> [Option<f64>; LANES] {
        let n = self.x.len() as f64;
        let mut my = [-0.0; LANES];
        for y in ys {
            for w in 0..LANES {
                my[w] += y[w];
            }
        }
        let my = my.map(|m| m / n);
        let (mut sxy, mut syy) = ([0.0; LANES], [0.0; LANES]);
        for (x, y) in self.x.iter().zip(ys) {
            let dx = x - self.mean;
            for w in 0..LANES {
                let dy = y[w] - my[w];
                sxy[w] += dx * dy;
                syy[w] += dy * dy;
            }
        }
        std::array::from_fn(|w| {
            (self.sxx != 0.0 && syy[w] != 0.0).then(|| (sxy[w] / (self.sxx.sqrt() * syy[w].sqrt())).clamp(-1.0, 1.0))
        })
    }
}

/// Largest magnitude, or NaN / infinity when `x` holds a non-finite value.
fn max_abs(x: &[f64]) -> f64 {
    if x.iter().all(|v| v.is_finite()) {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PccReport {
    /// Which pair was correlated, e.g. `logP(T) vs mle`.
    pub pair: String,
    pub alpha: f64,
    pub mean_pcc: f64,
    /// `None` for images excluded for zero variance.
    pub per_image: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Per-image PCC between the candidate prior and the objective row
/// `mle − α·prior`, averaged over images with nonzero variance.
pub fn mean_image_pcc(mle: &ScoreMatrix, prior: &PriorCache, objective: Objective, par: &Parallelism) -> Result<PccReport> {
    let alpha = objective.alpha();
    let scored = score_ig(mle, prior, alpha)?;
    let per_image: Vec<Option<f64>> = par.try_map(scored.rows(), |i| match pearson(&prior.logp_prior, scored.row(i)) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    })?;
    let kept: Vec<f64> = per_image.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("every image has zero score or prior variance".into()));
    }
    Ok(PccReport {
        pair: format!("logP(T) vs {}", objective.label()),
        alpha,
        mean_pcc: kept.iter().sum::<f64>() / kept.len() as f64,
        excluded: per_image.len() - kept.len(),
        per_image,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Correct captions of each image; many-to-many.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruthMap {
    pub captions_of_image: Vec<BTreeSet<usize>>,
}

impl TruthMap {
    /// Image `i` matches every candidate of class `labels[i]`.
    pub fn from_labels(labels: &[usize], candidates: &CandidateSet) -> Self {
        TruthMap {
            captions_of_image: labels
                .iter()
                .map(|&l| {
                    candidates
                        .class_ids()
                        .iter()
                        .enumerate()
                        .filter(|&(_, &k)| k == l)
                        .map(|(j, _)| j)
                        .collect()
                })
                .collect(),
        }
    }

    /// `image<TAB>caption` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, set) in self.captions_of_image.iter().enumerate() {
            for j in set {
                out.push_str(&format!("{i}\t{j}\n"));
            }
        }
        out
    }

    pub fn parse_tsv(text: &str, num_images: usize, path: &std::path::Path) -> Result<Self> {
        let mut captions_of_image = vec![BTreeSet::new(); num_images];
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (a, b) = line.split_once('\t').ok_or_else(|| err("expected image<TAB>caption"))?;
            let i: usize = a.trim().parse().map_err(|_| err("image index is not an integer"))?;
            let j: usize = b.trim().parse().map_err(|_| err("caption index is not an integer"))?;
            captions_of_image
                .get_mut(i)
                .ok_or_else(|| err("image index out of range"))?
                .insert(j);
        }
        Ok(TruthMap { captions_of_image })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// `(K, recall@K)` in the order requested.
    pub recalls: Vec<(usize, f64)>,
    pub queries: usize,
    /// Queries without any correct item (text→image only).
    pub skipped: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.0 == k).map(|r| r.1)
    }
}

pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];

/// Best rank (0-based) of any correct item among `scores`, ties to the lower index.
fn best_rank(scores: &[f64], correct: &BTreeSet<usize>) -> usize {
    correct
        .iter()
        .map(|&j| {
            let s = scores[j];
            scores
                .iter()
                .enumerate()
                .filter(|&(k, &v)| v > s || (v == s && k < j))
                .count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

fn recalls(ranks: &[usize], ks: &[usize]) -> Vec<(usize, f64)> {
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / ranks.len().max(1) as f64)
        })
        .collect()
}

/// Image→text and text→image recall@K from one similarity matrix.
pub fn retrieval_recalls(
    scores: &ScoreMatrix,
    truth: &TruthMap,
    ks: &[usize],
    par: &Parallelism,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if truth.captions_of_image.len() != rows {
        return Err(Error::contract(format!(
            "truth map covers {} images, score matrix has {rows}",
            truth.captions_of_image.len()
        )));
    }
    if let Some(i) = truth.captions_of_image.iter().position(|s| s.is_empty()) {
        return Err(Error::contract(format!("image {i} has no correct caption")));
    }
    if let Some(j) = truth.captions_of_image.iter().flatten().find(|&&j| j >= cols) {
        return Err(Error::contract(format!("truth map names caption {j}, matrix has {cols}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > cols || k > rows) {
        return Err(Error::contract(format!(
            "K={k} must lie in 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }

    let i2t = par.map(rows, |i| best_rank(scores.row(i), &truth.captions_of_image[i]));

    let mut images_of_caption = vec![BTreeSet::new(); cols];
    for (i, set) in truth.captions_of_image.iter().enumerate() {
        for &j in set {
            images_of_caption[j].insert(i);
        }
    }
    let queries: Vec<usize> = (0..cols).filter(|&j| !images_of_caption[j].is_empty()).collect();
    let t2i = par.map(queries.len(), |q| {
        let j = queries[q];
        best_rank(&scores.column(j), &images_of_caption[j])
    });

    Ok((
        RetrievalReport {
            direction: Direction::ImageToText,
            recalls: recalls(&i2t, ks),
            queries: rows,
            skipped: 0,
        },
        RetrievalReport {
            direction: Direction::TextToImage,
            recalls: recalls(&t2i, ks),
            queries: queries.len(),
            skipped: cols - queries.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub top1: f64,
    pub mean_pcc: f64,
    pub r_excluded: usize,
}

/// Accuracy and mean PCC for every `α` in `grid`, reusing one MLE matrix and one prior.
pub fn alpha_sweep(
    mle: &ScoreMatrix,
    prior: &PriorCache,
    candidates: &CandidateSet,
    labels: &[usize],
    grid: &[f64],
    par: &Parallelism,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::contract("alpha grid is empty"));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::contract(format!("alpha {a} outside [0, 1]")));
    }
    if labels.len() != mle.rows() {
        return Err(Error::contract(format!("{} labels for {} images", labels.len(), mle.rows())));
    }
    if mle.cols() != candidates.len() {
        return Err(Error::contract(format!(
            "score matrix has {} columns, candidate set has {}",
            mle.cols(),
            candidates.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= candidates.num_classes()) {
        return Err(Error::contract(format!("label {bad} is not a candidate class")));
    }
    if mle.cols() < 2 {
        return Err(Error::contract("pearson needs at least 2 candidates"));
    }
    for &alpha in grid {
        check_ig_inputs(mle, prior, alpha)?;
    }
    let voter = Voter::new(candidates)?;
    let prior_side = Centered::new(&prior.logp_prior);
    // per image, alphas in blocks of LANES; same arithmetic as score_ig, vote and pearson
    let prior_max = max_abs(&prior.logp_prior);
    let per_image = par.try_map(mle.rows(), |i| {
        let row = mle.row(i);
        // finite inputs this small cannot overflow for any alpha in [0, 1]
        let safe = max_abs(row) + prior_max <= f64::MAX / 2.0;
        let mut ig = vec![[0.0; LANES]; row.len()];
        let mut cells = Vec::with_capacity(grid.len());
        for block in grid.chunks(LANES) {
            let alphas: [f64; LANES] = std::array::from_fn(|w| block.get(w).copied().unwrap_or(0.0));
            for ((cell, &s), &p) in ig.iter_mut().zip(row).zip(&prior.logp_prior) {
                *cell = alphas.map(|alpha| if alpha == 0.0 { s } else { s - alpha * p });
            }
            if !safe {
                if let Some(j) = ig.iter().position(|cell| cell[..block.len()].iter().any(|v| !v.is_finite())) {
                    return Err(Error::Numeric(format!("non-finite score at image {i}, candidate {j}")));
                }
            }
            let pcc = prior_side.pearson_lanes(&ig);
            let pred = voter.predict_lanes(&ig);
            cells.extend(pred.into_iter().zip(pcc).take(block.len()));
        }
        Ok(cells)
    })?;
    (0..grid.len())
        .map(|a| {
            let correct = per_image.iter().zip(labels).filter(|(cells, &l)| cells[a].0 == l).count();
            let kept: Vec<f64> = per_image.iter().filter_map(|cells| cells[a].1).collect();
            if kept.is_empty() {
                return Err(Error::Degenerate("every image has zero score or prior variance".into()));
            }
            Ok(SweepRow {
                alpha: grid[a],
                top1: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
                mean_pcc: kept.iter().sum::<f64>() / kept.len() as f64,
                r_excluded: per_image.len() - kept.len(),
            })
        })
        .collect()
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}
