//! Corpora, images, sentence segmentation and batching.

mod batch;
mod corpus;
pub mod image;
mod segment;
pub mod toy;

use std::io::Write;
use std::path::Path;

pub use batch::{frame, make_batches, Batch, Example};
pub use corpus::{
    load_caption_corpus, load_image_manifest, load_text_corpus, mix_corpora, read_caption_manifest,
    split_validation, word_count, CaptionEntry, CaptionPair, Document, Provenance, SkipReport,
    TextCorpus,
};
pub use image::{load_ppm, Image};
pub use segment::{segment_document, split_sentences, MAX_SENTENCE_TOKENS, MIN_SENTENCE_TOKENS};

use crate::error::Result;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Resolves `p` relative to the directory containing `base` unless absolute.
pub(crate) fn resolve(base: &Path, p: &str) -> std::path::PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}
