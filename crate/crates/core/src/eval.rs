//! Zero-shot scoring: minimal pairs, two-by-two image/caption matching and
//! candidate-answer ranking, all reduced to summed sequence log-probabilities.
//!
//! A text is scored as `encode(text) ++ [EOS]` after an implicit BOS (and the
//! image block, when conditioned). Scores are not length-normalized unless
//! [`ScoreOptions::length_normalize`] is set.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_ppm, resolve, Batch, Example};
use crate::error::{Error, Result};
use crate::model::{encode_grouped, Bound, ModelConfig, ModelParams};
use crate::tensor::{Real, Tape, Tensor};
use crate::tokenizer::{BpeVocab, BOS, EOS};

pub const REPORT_SCHEMA: &str = "evalreport-v1";

/// Summed `log p(tokens[i] | BOS, tokens[..i])` for each sequence, computed in
/// one padded batch. `images`, when given, holds one grouped feature block per
/// sequence.
pub fn batch_log_probs<T: Real>(
    params: &ModelParams<T>,
    seqs: &[&[u32]],
    images: Option<&[&Tensor<T>]>,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::contract("cannot score an empty token sequence"));
    }
    let examples: Vec<Example> = seqs
        .iter()
        .map(|s| {
            let mut tokens = Vec::with_capacity(s.len() + 1);
            tokens.push(BOS);
            tokens.extend_from_slice(s);
            Example { tokens, image: None }
        })
        .collect();
    let ids: Vec<usize> = (0..seqs.len()).collect();
    let batch = Batch::from_examples(&examples, &ids)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, |_| false);
    let logits = bound.batch_logits(&batch, images)?.value();
    let v = logits.shape()[1];
    let rows = logits.data();
    let mut out = Vec::with_capacity(seqs.len());
    for (r, s) in seqs.iter().enumerate() {
        let mut total = 0.0;
        for (p, &target) in s.iter().enumerate() {
            let row = &rows[(r * batch.width + p) * v..(r * batch.width + p + 1) * v];
            total += log_softmax_at(row, target as usize);
        }
        out.push(total);
    }
    Ok(out)
}

fn log_softmax_at<T: Real>(row: &[T], i: usize) -> f64 {
    let max = row.iter().map(|x| x.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.to_f64().unwrap() - max).exp()).sum::<f64>().ln() + max;
    row[i].to_f64().unwrap() - lse
}

/// Summed log-probability of `tokens` after BOS (and the image block).
pub fn sequence_log_prob<T: Real>(params: &ModelParams<T>, tokens: &[u32], image: Option<&Tensor<T>>) -> Result<f64> {
    let imgs = image.map(|i| [i]);
    Ok(batch_log_probs(params, &[tokens], imgs.as_ref().map(|a| &a[..]))?[0])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    /// Divide each score by its token count.
    pub length_normalize: bool,
    pub batch_size: usize,
}

/// Grouped encoder features keyed by image path. The encoder is frozen, so
/// one cache serves every checkpoint that shares its vision weights.
#[derive(Debug)]
pub struct FeatureCache {
    vision_digest: String,
    map: RefCell<HashMap<PathBuf, Tensor<f32>>>,
}

impl FeatureCache {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self {
            vision_digest: params.vision_digest(),
            map: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, params: &ModelParams<f32>, path: &Path) -> Result<Tensor<f32>> {
        if let Some(t) = self.map.borrow().get(path) {
            return Ok(t.clone());
        }
        let img = load_ppm(path, params.config().image_side)?;
        let t = encode_grouped(params, &img)?;
        self.map.borrow_mut().insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

/// Text scorer bound to a model and tokenizer.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams<f32>,
    pub vocab: &'a BpeVocab,
    pub options: ScoreOptions,
    cache: Option<&'a FeatureCache>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, vocab: &'a BpeVocab) -> Self {
        Self {
            params,
            vocab,
            options: ScoreOptions::default(),
            cache: None,
        }
    }

    /// Reuses `cache` when it was built for the same vision weights.
    pub fn with_cache(mut self, cache: &'a FeatureCache) -> Self {
        if cache.vision_digest == self.params.vision_digest() {
            self.cache = Some(cache);
        }
        self
    }

    pub fn tokens(&self, text: &str) -> Vec<u32> {
        let mut t = self.vocab.encode(text);
        t.push(EOS);
        t
    }

    fn chunk(&self) -> usize {
        if self.options.batch_size == 0 {
            16
        } else {
            self.options.batch_size
        }
    }

    /// Scores texts, optionally each paired with an image block.
    pub fn score(&self, texts: &[String], images: Option<&[&Tensor<f32>]>) -> Result<Vec<f64>> {
        let toks: Vec<Vec<u32>> = texts.iter().map(|t| self.tokens(t)).collect();
        let mut out = Vec::with_capacity(texts.len());
        let step = self.chunk();
        for start in (0..toks.len()).step_by(step) {
            let end = (start + step).min(toks.len());
            let seqs: Vec<&[u32]> = toks[start..end].iter().map(Vec::as_slice).collect();
            let imgs = images.map(|im| &im[start..end]);
            out.extend(batch_log_probs(self.params, &seqs, imgs)?);
        }
        if self.options.length_normalize {
            for (s, t) in out.iter_mut().zip(&toks) {
                *s /= t.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn image(&self, path: &Path) -> Result<Tensor<f32>> {
        if let Some(c) = self.cache {
            return c.get(self.params, path);
        }
        let img = load_ppm(path, self.params.config().image_side)?;
        encode_grouped(self.params, &img)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default = "default_category")]
    pub category: String,
}

fn default_category() -> String {
    "all".into()
}

impl MinimalPair {
    fn with_context(&self, s: &str) -> String {
        match self.context.as_deref() {
            Some(c) if !c.is_empty() => format!("{c} {s}"),
            _ => s.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub n: usize,
    pub accuracy: f64,
    pub by_category: BTreeMap<String, CategoryScore>,
}

/// Credit 1 when good outscores bad, 0.5 on an exact tie.
pub fn pair_accuracy_from_scores(good: &[f64], bad: &[f64], categories: &[&str]) -> Result<PairReport> {
    if good.is_empty() || good.len() != bad.len() || good.len() != categories.len() {
        return Err(Error::contract("minimal-pair scores must be non-empty and aligned"));
    }
    let mut cats: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for ((g, b), c) in good.iter().zip(bad).zip(categories) {
        let credit = if g > b {
            1.0
        } else if g == b {
            0.5
        } else {
            0.0
        };
        total += credit;
        let e = cats.entry(c.to_string()).or_default();
        e.0 += 1;
        e.1 += credit;
    }
    Ok(PairReport {
        n: good.len(),
        accuracy: total / good.len() as f64,
        by_category: cats
            .into_iter()
            .map(|(k, (n, s))| (k, CategoryScore { n, accuracy: s / n as f64 }))
            .collect(),
    })
}

pub fn minimal_pair_accuracy(scorer: &ModelScorer, pairs: &[MinimalPair]) -> Result<PairReport> {
    if pairs.is_empty() {
        return Err(Error::config("no minimal pairs to score"));
    }
    let good: Vec<String> = pairs.iter().map(|p| p.with_context(&p.good)).collect();
    let bad: Vec<String> = pairs.iter().map(|p| p.with_context(&p.bad)).collect();
    let cats: Vec<&str> = pairs.iter().map(|p| p.category.as_str()).collect();
    pair_accuracy_from_scores(&scorer.score(&good, None)?, &scorer.score(&bad, None)?, &cats)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchItem {
    #[serde(default)]
    pub id: String,
    pub image0: PathBuf,
    pub image1: PathBuf,
    pub caption0: String,
    pub caption1: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub n: usize,
    pub text: f64,
    pub image: f64,
    pub group: f64,
}

/// `s[item][j][k]` is the score of caption `j` given image `k`. Every
/// required comparison is strict.
pub fn matching_from_scores(s: &[[[f64; 2]; 2]]) -> Result<MatchReport> {
    if s.is_empty() {
        return Err(Error::contract("no matching items"));
    }
    let (mut text, mut image, mut group) = (0usize, 0usize, 0usize);
    for m in s {
        let t = m[0][0] > m[1][0] && m[1][1] > m[0][1];
        let i = m[0][0] > m[0][1] && m[1][1] > m[1][0];
        text += t as usize;
        image += i as usize;
        group += (t && i) as usize;
    }
    let n = s.len() as f64;
    Ok(MatchReport {
        n: s.len(),
        text: text as f64 / n,
        image: image as f64 / n,
        group: group as f64 / n,
    })
}

pub fn matching_scores(scorer: &ModelScorer, items: &[MatchItem]) -> Result<MatchReport> {
    if items.is_empty() {
        return Err(Error::config("no matching items to score"));
    }
    let mut s = Vec::with_capacity(items.len());
    for it in items {
        if it.caption0 == it.caption1 {
            return Err(Error::config(format!("matching item `{}` has identical captions", it.id)));
        }
        let i0 = scorer.image(&it.image0)?;
        let i1 = scorer.image(&it.image1)?;
        let texts = [it.caption0.clone(), it.caption1.clone(), it.caption0.clone(), it.caption1.clone()];
        let v = scorer.score(&texts, Some(&[&i0, &i0, &i1, &i1]))?;
        s.push([[v[0], v[2]], [v[1], v[3]]]);
    }
    matching_from_scores(&s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankItem {
    #[serde(default)]
    pub id: String,
    pub image: PathBuf,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub n: usize,
    pub accuracy: f64,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn rank_from_scores(scores: &[Vec<f64>], gold: &[usize]) -> Result<RankReport> {
    if scores.is_empty() || scores.len() != gold.len() {
        return Err(Error::contract("ranking scores must be non-empty and aligned"));
    }
    let hits = scores.iter().zip(gold).filter(|(s, &g)| argmax_first(s) == g).count();
    Ok(RankReport {
        n: scores.len(),
        accuracy: hits as f64 / scores.len() as f64,
    })
}

pub fn rank_accuracy(scorer: &ModelScorer, items: &[RankItem]) -> Result<RankReport> {
    if items.is_empty() {
        return Err(Error::config("no ranking items to score"));
    }
    let mut scores = Vec::with_capacity(items.len());
    for it in items {
        if it.candidates.len() < 2 || it.gold >= it.candidates.len() {
            return Err(Error::config(format!("ranking item `{}` needs 2+ candidates and a valid gold", it.id)));
        }
        let img = scorer.image(&it.image)?;
        let texts: Vec<String> = it.candidates.iter().map(|a| format!("{} {a}", it.question)).collect();
        let imgs = vec![&img; texts.len()];
        scores.push(scorer.score(&texts, Some(&imgs))?);
    }
    let gold: Vec<usize> = items.iter().map(|i| i.gold).collect();
    rank_from_scores(&scores, &gold)
}

fn read_jsonl<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let pairs: Vec<MinimalPair> = read_jsonl(path)?;
    if let Some(p) = pairs.iter().find(|p| p.good == p.bad) {
        return Err(Error::config(format!("minimal pair with identical sides: `{}`", p.good)));
    }
    Ok(pairs)
}

pub fn load_match_items(path: &Path) -> Result<Vec<MatchItem>> {
    let mut items: Vec<MatchItem> = read_jsonl(path)?;
    for (i, it) in items.iter_mut().enumerate() {
        if it.id.is_empty() {
            it.id = format!("item-{i}");
        }
        it.image0 = resolve(path, &it.image0.to_string_lossy());
        it.image1 = resolve(path, &it.image1.to_string_lossy());
    }
    Ok(items)
}

pub fn load_rank_items(path: &Path) -> Result<Vec<RankItem>> {
    let mut items: Vec<RankItem> = read_jsonl(path)?;
    for (i, it) in items.iter_mut().enumerate() {
        if it.id.is_empty() {
            it.id = format!("item-{i}");
        }
        it.image = resolve(path, &it.image.to_string_lossy());
    }
    Ok(items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MinimalPairs,
    Matching,
    Ranking,
}

impl TaskKind {
    pub fn language_only(self) -> bool {
        self == TaskKind::MinimalPairs
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub path: PathBuf,
}

/// `[[task]]` entries in TOML; relative paths resolve against the manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteManifest {
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskSpec>,
}

impl SuiteManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: SuiteManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        for t in &mut m.tasks {
            t.path = resolve(path, &t.path.to_string_lossy());
        }
        Ok(m)
    }

    pub fn language_only(&self) -> Self {
        Self {
            tasks: self.tasks.iter().filter(|t| t.kind.language_only()).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskResult {
    MinimalPairs(PairReport),
    Matching(MatchReport),
    Ranking(RankReport),
}

impl TaskResult {
    /// Named scalar metrics, in a fixed order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        match self {
            TaskResult::MinimalPairs(r) => vec![("accuracy", r.accuracy)],
            TaskResult::Matching(r) => vec![("text", r.text), ("image", r.image), ("group", r.group)],
            TaskResult::Ranking(r) => vec![("accuracy", r.accuracy)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub label: String,
    pub model_digest: String,
    pub config: ModelConfig,
    pub options: ScoreOptions,
    pub tasks: BTreeMap<String, TaskResult>,
    pub absent: Vec<String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// `task/metric` to value, e.g. `grammar/accuracy`.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        self.tasks
            .iter()
            .flat_map(|(name, r)| r.metrics().into_iter().map(move |(m, v)| (format!("{name}/{m}"), v)))
            .collect()
    }
}

fn run_task(scorer: &ModelScorer, task: &TaskSpec) -> Result<TaskResult> {
    Ok(match task.kind {
        TaskKind::MinimalPairs => TaskResult::MinimalPairs(minimal_pair_accuracy(scorer, &load_pairs(&task.path)?)?),
        TaskKind::Matching => TaskResult::Matching(matching_scores(scorer, &load_match_items(&task.path)?)?),
        TaskKind::Ranking => TaskResult::Ranking(rank_accuracy(scorer, &load_rank_items(&task.path)?)?),
    })
}

/// Runs every task whose dataset file exists; missing files are listed in
/// `absent` and do not stop the rest.
pub fn run_suite(scorer: &ModelScorer, suite: &SuiteManifest, label: &str) -> Result<EvalReport> {
    let before = scorer.params.digest();
    let mut tasks = BTreeMap::new();
    let mut absent = Vec::new();
    for t in &suite.tasks {
        if !t.path.exists() {
            log::warn!("eval task `{}`: {} not found", t.name, t.path.display());
            absent.push(t.name.clone());
            continue;
        }
        log::info!("eval task `{}` ({:?})", t.name, t.kind);
        tasks.insert(t.name.clone(), run_task(scorer, t)?);
    }
    debug_assert_eq!(before, scorer.params.digest());
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        label: label.into(),
        model_digest: before,
        config: scorer.params.config().clone(),
        options: scorer.options,
        tasks,
        absent,
        notes: vec!["developmental similarity tasks need human response data and are not evaluated".into()],
    })
}

/// One row per labelled report, columns `task/metric`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub model_digest: String,
    pub scores: BTreeMap<String, f64>,
}

pub fn comparison_table(reports: &[EvalReport]) -> ComparisonTable {
    let mut columns: Vec<String> = reports.iter().flat_map(|r| r.flat().into_keys()).collect();
    columns.sort();
    columns.dedup();
    ComparisonTable {
        schema: REPORT_SCHEMA.into(),
        columns,
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                label: r.label.clone(),
                model_digest: r.model_digest.clone(),
                scores: r.flat(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_ties_and_categories() {
        let r = pair_accuracy_from_scores(&[1.0, 2.0, 0.0], &[1.0, 1.0, 3.0], &["a", "a", "b"]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.by_category["a"].accuracy, 0.75);
        assert_eq!(r.by_category["b"].n, 1);
        let always_tie = pair_accuracy_from_scores(&[0.0; 4], &[0.0; 4], &["x"; 4]).unwrap();
        assert_eq!(always_tie.accuracy, 0.5);
        assert!(pair_accuracy_from_scores(&[], &[], &[]).is_err());
    }

    #[test]
    fn perfect_matcher_and_ties() {
        let perfect = [[1.0, -1.0], [-1.0, 1.0]];
        let r = matching_from_scores(&[perfect]).unwrap();
        assert_eq!((r.text, r.image, r.group), (1.0, 1.0, 1.0));
        // captions separate on both images, but caption 0 ties across images
        let tied = [[1.0, 1.0], [-1.0, 2.0]];
        let r = matching_from_scores(&[tied]).unwrap();
        assert_eq!((r.text, r.image, r.group), (1.0, 0.0, 0.0));
    }

    #[test]
    fn ranking_ties_to_lowest_index() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[2.0, 2.0]), 0);
        let r = rank_from_scores(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn manifest_parses_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("suite.toml");
        std::fs::write(
            &p,
            "[[task]]\nname = \"g\"\nkind = \"minimal-pairs\"\npath = \"p.jsonl\"\n\n[[task]]\nname = \"m\"\nkind = \"matching\"\npath = \"m.jsonl\"\n",
        )
        .unwrap();
        let m = SuiteManifest::load(&p).unwrap();
        assert_eq!(m.tasks.len(), 2);
        assert_eq!(m.tasks[0].path, dir.path().join("p.jsonl"));
        assert_eq!(m.language_only().tasks.len(), 1);
        std::fs::write(&p, "").unwrap();
        assert!(SuiteManifest::load(&p).unwrap().tasks.is_empty());
    }
}
