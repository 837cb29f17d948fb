//! Word-to-phone upsampling and the `.fmat` feature-matrix file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "FMAT" | version: u8 | rows: u32 | cols: u32 | rows*cols f32, row-major
//!        | meta_len: u32 | meta_len bytes of UTF-8 "key=value\n" lines
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::textfront::PhoneSequence;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u8 = 1;

/// Repeats each word's feature row once per phone of that word and appends an
/// is-word flag column. Non-word phones (`SIL`, `EOS`) get an all-zero row.
pub fn upsample(word_feats: &Array2<f64>, phones: &PhoneSequence) -> Result<Array2<f64>> {
    let expected = phones.word_count();
    if word_feats.nrows() != expected {
        return Err(Error::AlignmentError {
            expected,
            got: word_feats.nrows(),
        });
    }
    let dim = word_feats.ncols();
    let mut out = Array2::zeros((phones.len(), dim + 1));
    for (t, word) in phones.word_index.iter().enumerate() {
        if let Some(w) = *word {
            let mut row = out.row_mut(t);
            row.slice_mut(ndarray::s![..dim]).assign(&word_feats.row(w));
            row[dim] = 1.0;
        }
    }
    Ok(out)
}

/// A row-major float matrix with string metadata, as stored in `.fmat` files.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub meta: BTreeMap<String, String>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Self {
        FeatureMatrix {
            data,
            meta: BTreeMap::new(),
        }
    }

    pub fn from_f64(data: &Array2<f64>) -> Self {
        FeatureMatrix::new(data.mapv(|v| v as f32))
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (rows, cols) = self.data.dim();
        let rows32 = u32::try_from(rows).map_err(|_| Error::ShapeError("too many rows".into()))?;
        let cols32 = u32::try_from(cols).map_err(|_| Error::ShapeError("too many cols".into()))?;
        let mut buf = Vec::with_capacity(13 + 4 * rows * cols + 64);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&rows32.to_le_bytes());
        buf.extend_from_slice(&cols32.to_le_bytes());
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(i));
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::ConfigError(format!("unencodable metadata key {k:?}")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptFile(msg.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(corrupt("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(Error::CorruptFile(format!("unsupported version {version}")));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt("dimensions overflow"))?;
        let values: Vec<f32> = take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let meta_len = u32_at(take(4)?);
        let meta_text =
            std::str::from_utf8(take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt("metadata line without '='"))?;
            meta.insert(k.to_string(), v.to_string());
        }
        if !cur.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|_| corrupt("shape"))?;
        Ok(FeatureMatrix { data, meta })
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

pub fn write_matrix(m: &FeatureMatrix, path: &Path) -> Result<()> {
    atomic_write(path, &m.to_bytes()?)
}

pub fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    FeatureMatrix::from_bytes(&bytes)
}

/// Stores a phone sequence as a `T × 2` matrix of `(phone id, word index or -1)`.
pub fn phones_to_matrix(seq: &PhoneSequence) -> FeatureMatrix {
    let mut data = Array2::zeros((seq.len(), 2));
    for (t, (&p, w)) in seq.phones.iter().zip(&seq.word_index).enumerate() {
        data[[t, 0]] = p as f32;
        data[[t, 1]] = w.map_or(-1.0, |w| w as f32);
    }
    FeatureMatrix::new(data).with_meta("kind", "phones")
}

pub fn matrix_to_phones(m: &FeatureMatrix) -> Result<PhoneSequence> {
    if m.cols() != 2 {
        return Err(Error::CorruptFile(format!(
            "phone matrix needs 2 columns, found {}",
            m.cols()
        )));
    }
    let mut phones = Vec::with_capacity(m.rows());
    let mut word_index = Vec::with_capacity(m.rows());
    for row in m.data.rows() {
        if row[0] < 0.0 || row[0].fract() != 0.0 || row[1].fract() != 0.0 {
            return Err(Error::CorruptFile("phone ids must be integers".into()));
        }
        phones.push(row[0] as usize);
        word_index.push((row[1] >= 0.0).then_some(row[1] as usize));
    }
    Ok(PhoneSequence { phones, word_index })
}
