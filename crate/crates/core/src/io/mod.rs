//! On-disk formats: binary feature matrices, label lists and JSON documents.

mod provider;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::Matrix;

pub use provider::{fetch_embeddings, FetchStats, ProviderConfig, ProviderError};

pub const FMAT_MAGIC: [u8; 4] = *b"FMAT";
pub const FMAT_VERSION: u16 = 1;
pub const DTYPE_F64_LE: u8 = 1;
/// Magic, version, dtype, reserved byte, rows, cols, 4 reserved zero bytes.
pub const FMAT_HEADER_LEN: usize = 28;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("bad magic {found:?}, expected \"FMAT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported FMAT version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported FMAT dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("reserved FMAT header byte is {0}, expected 0")]
    ReservedByte(u8),
    #[error("payload CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file: {actual} bytes, expected {expected}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("{extra} trailing bytes after FMAT payload")]
    TrailingData { extra: u64 },
    #[error("label file line {line}: {message}")]
    Label { line: usize, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingArtifact(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub fn fmat_len(rows: usize, cols: usize) -> usize {
    FMAT_HEADER_LEN + rows * cols * 8 + CRC_LEN
}

pub fn encode_fmat(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(fmat_len(m.rows(), m.cols()));
    out.extend_from_slice(&FMAT_MAGIC);
    out.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F64_LE);
    out.push(0);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[FMAT_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_fmat(bytes: &[u8]) -> Result<Matrix, IoError> {
    let truncated = |expected: usize| IoError::TruncatedFile {
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(FMAT_HEADER_LEN + CRC_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FMAT_MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    if bytes.len() < FMAT_HEADER_LEN {
        return Err(truncated(FMAT_HEADER_LEN + CRC_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FMAT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F64_LE {
        return Err(IoError::UnsupportedDtype(bytes[6]));
    }
    if let Some(&b) = std::iter::once(&bytes[7]).chain(&bytes[24..28]).find(|&&b| b != 0) {
        return Err(IoError::ReservedByte(b));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add((FMAT_HEADER_LEN + CRC_LEN) as u64))
        .unwrap_or(u64::MAX);
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(IoError::TruncatedFile { expected, actual });
    }
    if actual > expected {
        return Err(IoError::TrailingData {
            extra: actual - expected,
        });
    }
    let payload = &bytes[FMAT_HEADER_LEN..bytes.len() - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(IoError::CrcMismatch { stored, computed });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Matrix::from_vec(rows as usize, cols as usize, data).expect("length checked"))
}

pub fn read_fmat(path: &Path) -> Result<Matrix, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_fmat(&bytes)
}

pub fn write_fmat(m: &Matrix, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &encode_fmat(m))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelFile {
    pub labels: Vec<usize>,
    /// From the optional `# classes=C` header.
    pub classes: Option<usize>,
}

impl LabelFile {
    pub fn num_classes(&self) -> usize {
        self.classes
            .unwrap_or_else(|| self.labels.iter().max().map_or(0, |m| m + 1))
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut out = LabelFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if i != 0 {
                    return Err(IoError::Label {
                        line: lineno,
                        message: "header allowed only on the first line".into(),
                    });
                }
                let value = rest
                    .trim()
                    .strip_prefix("classes=")
                    .ok_or_else(|| IoError::Label {
                        line: lineno,
                        message: format!("unrecognized header {line:?}"),
                    })?;
                let c = value.trim().parse().map_err(|_| IoError::Label {
                    line: lineno,
                    message: format!("bad class count {value:?}"),
                })?;
                out.classes = Some(c);
                continue;
            }
            if line.is_empty() {
                return Err(IoError::Label {
                    line: lineno,
                    message: "empty line".into(),
                });
            }
            let label: usize = line.parse().map_err(|_| IoError::Label {
                line: lineno,
                message: format!("not a nonnegative integer: {line:?}"),
            })?;
            if let Some(c) = out.classes {
                if label >= c {
                    return Err(IoError::Label {
                        line: lineno,
                        message: format!("label {label} outside [0, {c})"),
                    });
                }
            }
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.labels.len() * 3 + 16);
        if let Some(c) = self.classes {
            s.push_str(&format!("# classes={c}\n"));
        }
        for l in &self.labels {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }
}

pub fn read_labels(path: &Path) -> Result<LabelFile, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    LabelFile::parse(&text)
}

pub fn write_labels(labels: &LabelFile, path: &Path) -> Result<(), IoError> {
    write_atomic(path, labels.render().as_bytes())
}

/// Pretty JSON with a trailing newline. Floats use the shortest
/// representation that parses back to the same bits.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
