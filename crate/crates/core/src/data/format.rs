//! Binary dataset file.
//!
//! ```text
//! magic        6 bytes  "LLTTS1"
//! version      u32
//! vocab_size   u32
//! frame_dim    u32
//! language_id  u32
//! num_languages u32
//! n_train, n_dev, n_test  u32 x 3
//! records      n_train + n_dev + n_test, in split order:
//!   len        u32
//!   tokens     u32 x len
//!   frames     f64 x (len * frame_dim), row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use super::{Sample, SampleId, Split, TaskDataset};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"LLTTS1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(ds: &TaskDataset, num_languages: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        ds.vocab_size as u32,
        ds.frame_dim as u32,
        ds.language_id,
        num_languages as u32,
        ds.train.len() as u32,
        ds.dev.len() as u32,
        ds.test.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
        buf.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        for t in &s.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for f in &s.frames {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("unexpected end of file reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TaskDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let vocab_size = r.u32("vocab_size")? as usize;
    let frame_dim = r.u32("frame_dim")? as usize;
    let language_id = r.u32("language_id")?;
    let num_languages = r.u32("num_languages")?;
    if language_id >= num_languages {
        return Err(Error::Validation(format!(
            "language id {language_id} >= declared language count {num_languages}"
        )));
    }
    if frame_dim == 0 {
        return Err(Error::Format {
            offset: 14,
            message: "frame_dim is zero".into(),
        });
    }
    let counts = [r.u32("n_train")?, r.u32("n_dev")?, r.u32("n_test")?];

    let mut splits: [Vec<Sample>; 3] = Default::default();
    for (slot, (split, n)) in [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .zip(counts)
        .enumerate()
    {
        for index in 0..n {
            let at = r.pos as u64;
            let len = r.u32("record length")? as usize;
            // Bound the allocation by what the file can actually hold.
            if len.saturating_mul(4 + 8 * frame_dim) > bytes.len() - r.pos {
                return Err(Error::Format {
                    offset: at,
                    message: format!("record length {len} exceeds remaining file"),
                });
            }
            let tokens = (0..len)
                .map(|_| r.u32("token"))
                .collect::<Result<Vec<_>>>()?;
            let frames = (0..len * frame_dim)
                .map(|_| r.f64("frame"))
                .collect::<Result<Vec<_>>>()?;
            splits[slot].push(Sample {
                id: SampleId {
                    language_id,
                    split,
                    index,
                },
                tokens,
                frames,
                frame_dim,
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let [train, dev, test] = splits;
    let ds = TaskDataset {
        language_id,
        vocab_size,
        frame_dim,
        train,
        dev,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the dataset atomically (temporary file in the same directory, then rename).
pub fn save_dataset(ds: &TaskDataset, num_languages: usize, path: &Path) -> Result<()> {
    if ds.language_id as usize >= num_languages {
        return Err(Error::Validation(format!(
            "language id {} >= language count {num_languages}",
            ds.language_id
        )));
    }
    write_atomic(path, &encode(ds, num_languages))
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset> {
    decode(&std::fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, TaskSpec};

    fn dataset() -> TaskDataset {
        let spec = TaskSpec {
            n_train: 12,
            n_dev: 3,
            n_test: 3,
            ..TaskSpec::new(1, 9)
        };
        generate_task(&spec, 10, 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lltts");
        save_dataset(&ds, 4, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode(&dataset(), 4);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&dataset(), 4);
        bytes[6..10].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn language_out_of_declared_range() {
        let bytes = encode(&dataset(), 1);
        assert!(matches!(decode(&bytes), Err(Error::Validation(_))));
        assert!(save_dataset(&dataset(), 1, Path::new("/nonexistent/x")).is_err());
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let mut ds = dataset();
        ds.train[0].tokens[0] = 99;
        assert!(matches!(decode(&encode(&ds, 4)), Err(Error::Validation(_))));
    }
}
