//! Token embedding matrices and their two file encodings.
//!
//! Text: a `T D` header line, then `T` lines of `D` whitespace-separated reals.
//! Binary: the magic bytes `RSEB`, `T` and `D` as little-endian `u64`, then
//! `T * D` little-endian `f32` values in row-major order.
//!
//! Both readers keep values at `f32` precision, so the two encodings of one
//! matrix load identically.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, RslmError};

pub const BINARY_MAGIC: &[u8; 4] = b"RSEB";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

/// `rows x cols` matrix, one row per token id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(RslmError::InvalidArgument(format!(
                "embedding matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(RslmError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(RslmError::InvalidArgument(format!(
                "non-finite value in row {}",
                i / cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy with every row scaled to unit Euclidean length (zero rows stay zero).
    pub fn normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Reads either encoding, chosen by the leading magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            parse_binary(path, &bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| RslmError::format(path, "neither RSEB binary nor UTF-8 text"))?;
            parse_text(path, &text)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
        let bytes = match format {
            EmbeddingFormat::Text => self.to_text().into_bytes(),
            EmbeddingFormat::Binary => self.to_binary(),
        };
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Text encoding; values are written with the shortest `f32` round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for row in self.data.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|&x| format!("{}", x as f32)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }
}

fn parse_text(path: &Path, text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| RslmError::format(path, "empty embedding file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| RslmError::format(path, format!("malformed header {header:?}")))?;
    let (rows, cols) = match dims[..] {
        [r, c] if r > 0 && c > 0 => (r, c),
        _ => {
            return Err(RslmError::format(
                path,
                format!("malformed header {header:?}, expected \"T D\""),
            ))
        }
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line_no, line) in lines {
        if seen == rows {
            return Err(RslmError::format(
                path,
                format!("more than {rows} rows (line {})", line_no + 1),
            ));
        }
        let before = data.len();
        for field in line.split_whitespace() {
            let x = field.parse::<f32>().map_err(|_| {
                RslmError::format(path, format!("row {seen}: cannot parse {field:?}"))
            })? as f64;
            if !x.is_finite() {
                return Err(RslmError::format(
                    path,
                    format!("row {seen}: non-finite value"),
                ));
            }
            data.push(x);
        }
        let got = data.len() - before;
        if got != cols {
            return Err(RslmError::format(
                path,
                format!("row {seen} has {got} values, expected {cols}"),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(RslmError::format(
            path,
            format!("header declares {rows} rows, found {seen}"),
        ));
    }
    EmbeddingMatrix::new(rows, cols, data)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 20 {
        return Err(RslmError::format(path, "truncated RSEB header"));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(RslmError::format(
            path,
            format!("malformed header {rows}x{cols}"),
        ));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RslmError::format(path, "header dimensions overflow"))?;
    let body = &bytes[20..];
    if body.len() != expected {
        return Err(RslmError::format(
            path,
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !x.is_finite() {
            return Err(RslmError::format(
                path,
                format!("row {}: non-finite value", i / cols),
            ));
        }
        data.push(x);
    }
    EmbeddingMatrix::new(rows, cols, data)
}

/// Isotropic Gaussian blobs for testing the budgeting pipeline.
///
/// Token `i` belongs to blob `i * blobs / tokens`, so blobs are contiguous id
/// ranges of near-equal size. Blob `b` is centred at `10 * (1 + b / dim)` along
/// axis `b % dim`; noise has standard deviation 0.5. Values are rounded to
/// `f32` so that both file encodings hold the matrix exactly.
pub fn synth_blobs(
    tokens: usize,
    dim: usize,
    blobs: usize,
    seed: u64,
) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    if tokens == 0 || dim == 0 || blobs == 0 || blobs > tokens {
        return Err(RslmError::InvalidArgument(format!(
            "need tokens >= blobs >= 1 and dim >= 1, got tokens={tokens} dim={dim} blobs={blobs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let mut data = Vec::with_capacity(tokens * dim);
    let mut labels = Vec::with_capacity(tokens);
    for i in 0..tokens {
        let b = i * blobs / tokens;
        labels.push(b);
        for j in 0..dim {
            let centre = if j == b % dim {
                10.0 * (1 + b / dim) as f64
            } else {
                0.0
            };
            data.push((centre + noise.sample(&mut rng)) as f32 as f64);
        }
    }
    Ok((EmbeddingMatrix::new(tokens, dim, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", b"3 2\n0.0 0.0\n1.0 0.0\n0.0 1.0\n");
        let e = EmbeddingMatrix::load(&p).unwrap();
        assert_eq!((e.rows(), e.cols()), (3, 2));
        assert_eq!(e.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn reports_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", b"3 2\n0.0 0.0\n1.0\n0.0 1.0\n");
        let msg = EmbeddingMatrix::load(&p).unwrap_err().to_string();
        assert!(msg.contains("row 1 has 1 values"), "{msg}");
    }

    #[test]
    fn rejects_bad_header_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "h.txt", b"3\n0 0\n");
        assert!(EmbeddingMatrix::load(&p)
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
        let p = write(&dir, "n.txt", b"1 2\n0.0 NaN\n");
        assert!(EmbeddingMatrix::load(&p)
            .unwrap_err()
            .to_string()
            .contains("non-finite"));
        let p = write(&dir, "c.txt", b"2 1\n0.5\n");
        assert!(EmbeddingMatrix::load(&p).is_err());
    }

    #[test]
    fn binary_and_text_agree() {
        let (e, _) = synth_blobs(20, 3, 2, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("e.txt");
        let b = dir.path().join("e.bin");
        e.save(&t, EmbeddingFormat::Text).unwrap();
        e.save(&b, EmbeddingFormat::Binary).unwrap();
        assert_eq!(EmbeddingMatrix::load(&t).unwrap(), e);
        assert_eq!(EmbeddingMatrix::load(&b).unwrap(), e);
        let bytes = fs::read(&b).unwrap();
        assert_eq!(&bytes[..4], b"RSEB");
        assert_eq!(bytes.len(), 20 + 4 * 60);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"RSEB".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let p = write(&dir, "t.bin", &bytes);
        assert!(EmbeddingMatrix::load(&p).is_err());
    }

    #[test]
    fn synth_shape_and_labels() {
        let (e, labels) = synth_blobs(10, 4, 3, 1).unwrap();
        assert_eq!((e.rows(), e.cols()), (10, 4));
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(synth_blobs(10, 4, 3, 1).unwrap().0, e);
        assert!(synth_blobs(2, 4, 3, 1).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_length() {
        let e = EmbeddingMatrix::new(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = e.normalized();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }
}
