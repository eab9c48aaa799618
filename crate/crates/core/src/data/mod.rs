//! Annotation records, JSONL ingestion, vocabulary, splits and synthetic scenes.
//!
//! Record schema, one JSON object per line:
//! `{"image": <path or nested array>, "hazard": [x, y], "caption": <string>}`
//! with an optional `"category"` of `"predictable"` or `"unpredictable"`.
//! Inline images are `S×S` (one channel) or `C×S×S` arrays of values in
//! `[0, 1]`. Paths are resolved against an image root and may point at PNG
//! files or `.json` files holding the same nested array.

mod schema;
mod split;
mod synth;
mod vocab;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use schema::{
    load_dataset, parse_jsonl, read_image, write_jsonl, AnnotatedSample, LoadOptions, LoadReport,
    RejectKind, Rejection, CATEGORIES,
};
pub use split::split;
pub use synth::{
    caption_for, parse_caption_point, snap_to_patch_center, synth_generate, SynthConfig, PROMPT,
};
pub use vocab::{normalize, Vocabulary, END_ID, PAD_ID, RESERVED, START_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("split: {0}")]
    Split(String),
    #[error("image: {0}")]
    Image(String),
    #[error("synthetic data: {0}")]
    Synth(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
