//! Precomputed word vectors in whitespace-separated text form: one word
//! followed by its components per line.

use std::fs;
use std::path::Path;

use structkd_core::ModelParams;

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Overwrites rows of the embedding table for every vocabulary word found in
/// `text` and freezes the table. Returns the number of rows filled.
pub fn apply_vectors(text: &str, path: &Path, vocab: &Vocab, params: &mut ModelParams) -> Result<usize> {
    let dim = params.dims.emb_dim;
    let mut filled = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split_whitespace();
        let Some(word) = cols.next() else { continue };
        let values: Vec<f64> = cols
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("{e}"),
            })?;
        if values.len() == 1 && i == 0 {
            continue; // word2vec "count dim" header
        }
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {dim} components, found {}", values.len()),
            });
        }
        let id = vocab.id(word) as usize;
        if id == 0 || filled[id] {
            continue;
        }
        filled[id] = true;
        params.embeddings[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    params.freeze_embeddings = true;
    let n = filled.iter().filter(|&&f| f).count();
    log::info!("{}: {n}/{} vocabulary rows from precomputed vectors", path.display(), vocab.len() - 1);
    Ok(n)
}

pub fn load_vectors(path: &Path, vocab: &Vocab, params: &mut ModelParams) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_vectors(&text, path, vocab, params)
}
