use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Text bundled with the crate: original prose dedicated to the public
/// domain.
pub const BUNDLED_TEXT: &str = include_str!("../../fixtures/corpus.txt");

/// Byte documents with a seeded train/held-out partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Vec<u8>>,
    train: Vec<usize>,
    held_out: Vec<usize>,
    generated: Vec<bool>,
}

impl Corpus {
    /// Split `documents` so that about `held_out_fraction` of them (at least
    /// one, never all) are held out.
    pub fn from_documents(documents: Vec<Vec<u8>>, held_out_fraction: f64, seed: u64) -> Result<Self> {
        let documents: Vec<Vec<u8>> = documents.into_iter().filter(|d| d.len() >= 2).collect();
        if documents.len() < 2 {
            return Err(Error::InvalidConfig(
                "corpus needs at least two documents of two or more bytes".into(),
            ));
        }
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::InvalidConfig(format!(
                "held-out fraction {held_out_fraction} outside [0, 1)"
            )));
        }
        let n = documents.len();
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut Rng::new(seed));
        let n_held = ((n as f64 * held_out_fraction).round() as usize).clamp(1, n - 1);
        let mut held_out = order[..n_held].to_vec();
        let mut train = order[n_held..].to_vec();
        held_out.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            generated: vec![false; n],
            documents,
            train,
            held_out,
        })
    }

    /// One document per blank-line separated paragraph.
    pub fn from_text(text: &str, held_out_fraction: f64, seed: u64) -> Result<Self> {
        let docs = text
            .split("\n\n")
            .map(|p| p.trim().as_bytes().to_vec())
            .collect();
        Self::from_documents(docs, held_out_fraction, seed)
    }

    pub fn from_file(path: impl AsRef<Path>, held_out_fraction: f64, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&String::from_utf8_lossy(&bytes), held_out_fraction, seed)
    }

    pub fn bundled(seed: u64) -> Self {
        Self::from_text(BUNDLED_TEXT, 0.1, seed).expect("bundled corpus is valid")
    }

    /// Documents produced by a model rather than taken from text. All of
    /// them are training documents.
    pub fn generated(documents: Vec<Vec<u8>>) -> Result<Self> {
        let documents: Vec<Vec<u8>> = documents.into_iter().filter(|d| d.len() >= 2).collect();
        if documents.is_empty() {
            return Err(Error::InvalidConfig("no generated documents".into()));
        }
        let n = documents.len();
        Ok(Self {
            documents,
            train: (0..n).collect(),
            held_out: Vec::new(),
            generated: vec![true; n],
        })
    }

    pub fn documents(&self) -> &[Vec<u8>] {
        &self.documents
    }

    pub fn train_docs(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.train.iter().map(|&i| self.documents[i].as_slice())
    }

    pub fn held_out_docs(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.held_out.iter().map(|&i| self.documents[i].as_slice())
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn held_out_indices(&self) -> &[usize] {
        &self.held_out
    }

    pub fn is_generated(&self, index: usize) -> bool {
        self.generated[index]
    }
}

/// Fisher-Yates with the crate RNG.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Consecutive windows of `len + 1` bytes (the last may be shorter but has
/// at least two) covering each document once.
pub(crate) fn chunk_windows<'a>(docs: impl Iterator<Item = &'a [u8]>, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for doc in docs {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + len + 1).min(doc.len());
            out.push(doc[start..end].iter().map(|&b| b as usize).collect());
            start += len;
        }
    }
    out
}

/// A window of up to `len + 1` bytes at a random offset of `doc`.
pub(crate) fn random_window(doc: &[u8], len: usize, rng: &mut Rng) -> Vec<usize> {
    let span = (len + 1).min(doc.len());
    let start = rng.below((doc.len() - span + 1) as u64) as usize;
    doc[start..start + span].iter().map(|&b| b as usize).collect()
}
