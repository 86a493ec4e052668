//! Byte-level data pipeline: tokenization is the identity on byte values
//! (vocab 256), batches are random contiguous windows.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::path::Path;

pub fn byte_tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn byte_detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Data(format!("token {t} is not a byte value")))
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

/// `batch` random contiguous windows of `seq_len` tokens; targets are the
/// same windows shifted one position forward.
pub fn sample_batch(
    corpus: &[usize],
    batch: usize,
    seq_len: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::Data("batch and seq_len must be >= 1".into()));
    }
    if corpus.len() <= seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus length {} is too short for seq_len {}",
            corpus.len(),
            seq_len
        )));
    }
    let starts = corpus.len() - seq_len - 1;
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let start = rng.next_index(starts);
        tokens.push(corpus[start..start + seq_len].to_vec());
        targets.push(corpus[start + 1..start + seq_len + 1].to_vec());
    }
    Ok((tokens, targets))
}
