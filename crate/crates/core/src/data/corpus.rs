use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::image::{load_ppm, Image};
use super::{resolve, write_atomic};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
}

/// Ordered documents plus optional generation metadata (set for synthetic
/// corpora and written as a leading `{"meta": ...}` line).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextCorpus {
    pub documents: Vec<Document>,
    pub meta: Option<Value>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Deserialize)]
struct JsonDoc {
    text: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

impl TextCorpus {
    pub fn word_count(&self) -> usize {
        self.documents.iter().map(|d| word_count(&d.text)).sum()
    }

    pub fn word_count_by(&self, provenance: Provenance) -> usize {
        self.documents
            .iter()
            .filter(|d| d.provenance == provenance)
            .map(|d| word_count(&d.text))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(meta) = &self.meta {
            out.push_str(&serde_json::json!({ "meta": meta }).to_string());
            out.push('\n');
        }
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d).expect("documents serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Loads a JSONL corpus (one object with a `text` field per line, blank lines
/// ignored). A first line of the form `{"meta": {...}}` is kept as metadata,
/// and its `provenance` field sets the default tag for the file.
pub fn load_text_corpus(path: &Path) -> Result<TextCorpus> {
    let file = std::fs::File::open(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("doc").to_string();
    let mut corpus = TextCorpus::default();
    let mut default_prov = Provenance::Real;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if i == 0 {
            if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&line) {
                if let Some(meta) = obj.get("meta") {
                    if meta.get("provenance").and_then(Value::as_str) == Some("synthetic") {
                        default_prov = Provenance::Synthetic;
                    }
                    corpus.meta = Some(meta.clone());
                    continue;
                }
            }
        }
        let doc: JsonDoc = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let id = doc.id.unwrap_or_else(|| format!("{stem}:{lineno}"));
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate document id `{id}`")));
        }
        corpus.documents.push(Document {
            id,
            text: doc.text,
            provenance: doc.provenance.unwrap_or(default_prov),
        });
    }
    log::info!(
        "loaded {} documents, {} words from {}",
        corpus.len(),
        corpus.word_count(),
        path.display()
    );
    Ok(corpus)
}

/// Concatenates and applies a seeded uniform shuffle of document order.
pub fn mix_corpora(real: &TextCorpus, synth: &TextCorpus, seed: u64) -> TextCorpus {
    let mut documents: Vec<Document> = real
        .documents
        .iter()
        .chain(&synth.documents)
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    documents.shuffle(&mut rng);
    TextCorpus {
        documents,
        meta: None,
    }
}

/// Splits off the last 2% of documents (at least one) as validation, before
/// any shuffling.
pub fn split_validation<T: Clone>(items: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 documents for a train/validation split, got {}",
            items.len()
        )));
    }
    let n_val = ((items.len() as f64 * 0.02).round() as usize).max(1);
    let cut = items.len() - n_val;
    Ok((items[..cut].to_vec(), items[cut..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionEntry {
    pub image_path: PathBuf,
    pub caption: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPair {
    pub image_path: PathBuf,
    pub image: Image,
    pub caption: String,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub line: usize,
    pub path: String,
    pub reason: String,
}

/// Items dropped while loading, serialized as JSON next to run artifacts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub items: Vec<SkippedItem>,
}

impl SkipReport {
    pub fn skip(&mut self, line: usize, path: &str, reason: String) {
        log::warn!("skipping line {line} ({path}): {reason}");
        self.skipped += 1;
        self.items.push(SkippedItem {
            line,
            path: path.to_string(),
            reason,
        });
    }

    pub fn merge(&mut self, other: SkipReport) {
        self.skipped += other.skipped;
        self.items.extend(other.items);
    }
}

/// Reads `image_path<TAB>caption[<TAB>source]` rows without decoding images.
/// Rows without a tab or with an empty caption are reported and skipped.
pub fn read_caption_manifest(path: &Path) -> Result<(Vec<CaptionEntry>, SkipReport)> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut report = SkipReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let img = cols.next().unwrap_or_default();
        let Some(caption) = cols.next().map(str::trim).filter(|c| !c.is_empty()) else {
            report.skip(i + 1, img, "missing caption".into());
            continue;
        };
        entries.push(CaptionEntry {
            image_path: resolve(path, img),
            caption: caption.to_string(),
            source: cols.next().unwrap_or("unknown").to_string(),
        });
    }
    Ok((entries, report))
}

/// Loads and decodes a caption manifest; unreadable images are skipped and
/// counted in the report.
pub fn load_caption_corpus(path: &Path, side: usize) -> Result<(Vec<CaptionPair>, SkipReport)> {
    let (entries, mut report) = read_caption_manifest(path)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        match load_ppm(&e.image_path, side) {
            Ok(image) => pairs.push(CaptionPair {
                image_path: e.image_path,
                image,
                caption: e.caption,
                source: e.source,
            }),
            Err(err) => report.skip(i + 1, &e.image_path.display().to_string(), err.to_string()),
        }
    }
    Ok((pairs, report))
}

/// Reads image paths from a manifest (first tab-separated column per line).
pub fn load_image_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| resolve(path, l.split('\t').next().unwrap_or_default().trim()))
        .collect())
}
