//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, version, seed, head, frozen flag, the four model
//! dimensions, the named tensors (name, rows, cols, f64 data) in canonical
//! order, then the tagset labels and the vocabulary words.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use structkd_core::{ModelDims, ModelParams, OutputHead, Tagset};

use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"STRUCTKD";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn strings(&mut self, items: &[String]) {
        self.u32(items.len() as u32);
        items.iter().for_each(|s| self.str(s));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.str()).collect()
    }
}

pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let p = &model.params;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(p.seed);
    w.u8(match p.head {
        OutputHead::Crf => 0,
        OutputHead::Softmax => 1,
    });
    w.u8(p.freeze_embeddings as u8);
    for d in [p.dims.vocab, p.dims.emb_dim, p.dims.hidden, p.dims.num_labels] {
        w.u64(d as u64);
    }
    let mut count = 0;
    p.visit(|_, _| count += 1);
    w.u32(count);
    p.visit(|name, t| {
        let (r, c) = p.tensor_shape(name).expect("known tensor");
        w.str(name);
        w.u64(r as u64);
        w.u64(c as u64);
        t.iter().for_each(|x| w.u64(x.to_bits()));
    });
    w.strings(model.tagset.labels());
    w.strings(model.vocab.words());
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a structkd checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let head = match r.u8()? {
        0 => OutputHead::Crf,
        1 => OutputHead::Softmax,
        h => return Err(Error::Checkpoint(format!("unknown output head {h}"))),
    };
    let frozen = r.u8()? != 0;
    let mut d = [0usize; 4];
    for x in &mut d {
        *x = r.u64()? as usize;
    }
    let dims = ModelDims {
        vocab: d[0],
        emb_dim: d[1],
        hidden: d[2],
        num_labels: d[3],
    };
    dims.validate()?;
    let mut params = ModelParams::zeros(dims, head);
    params.seed = seed;
    params.freeze_embeddings = frozen;
    let count = r.u32()?;
    for _ in 0..count {
        let name = r.str()?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let expected = params
            .tensor_shape(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if expected != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                expected.0, expected.1
            )));
        }
        let data = (0..rows * cols)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        *params.tensor_mut(&name).expect("known tensor") = data;
    }
    let tagset = Tagset::new(r.strings()?)?;
    let vocab = Vocab::from_id_order(r.strings()?);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    TrainedModel::new(params, vocab, tagset)
}

pub fn save(path: &Path, model: &TrainedModel) -> Result<String> {
    let bytes = to_bytes(model);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> Result<(TrainedModel, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((from_bytes(&bytes)?, digest(&bytes)))
}

/// Hex sha256.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash identifying a model: the digest of its checkpoint bytes.
pub fn model_hash(model: &TrainedModel) -> String {
    digest(&to_bytes(model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TrainedModel {
        let dims = ModelDims {
            vocab: 4,
            emb_dim: 3,
            hidden: 2,
            num_labels: 2,
        };
        let mut params = ModelParams::init(dims, OutputHead::Crf, 9).unwrap();
        params.projection[0] = f64::MIN_POSITIVE / 3.0;
        TrainedModel::new(
            params,
            Vocab::from_words(["a", "b", "c"]),
            Tagset::new(["F", "T"]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
