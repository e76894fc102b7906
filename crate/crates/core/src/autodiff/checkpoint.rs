//! Checkpoint file.
//!
//! ```text
//! VIVICKPT <version> <record count>\n
//! <metadata as one line of JSON>\n
//! record*: u32 name length, name (UTF-8), u32 rank, u32 extents[rank],
//!          f32 values (little-endian, row-major)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "VIVICKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{MAGIC} {VERSION} {}", self.records.len()).map_err(io)?;
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        writeln!(w, "{meta}").map_err(io)?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let fmt = |record: &str, msg: String| Error::Format {
            path: path.to_path_buf(),
            record: record.to_string(),
            msg,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut header = String::new();
        r.read_line(&mut header).map_err(io)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(fmt("header", format!("bad header `{}`", header.trim())));
        }
        let version: u32 = parts[1]
            .parse()
            .map_err(|_| fmt("header", "bad version".into()))?;
        if version != VERSION {
            return Err(fmt("header", format!("unsupported version {version}")));
        }
        let count: usize = parts[2]
            .parse()
            .map_err(|_| fmt("header", "bad record count".into()))?;
        let mut meta_line = String::new();
        r.read_line(&mut meta_line).map_err(io)?;
        let meta = serde_json::from_str(meta_line.trim_end())
            .map_err(|e| fmt("metadata", e.to_string()))?;

        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let tag = format!("#{i}");
            let trunc = |_| fmt(&tag, "truncated record".into());
            let mut u32buf = [0u8; 4];
            let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
                r.read_exact(&mut u32buf).map_err(trunc)?;
                Ok(u32::from_le_bytes(u32buf))
            };
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| fmt(&tag, "name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(fmt(&name, format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = read_u32(&mut r)? as usize;
                if d == 0 {
                    return Err(fmt(&name, "zero extent".into()));
                }
                shape.push(d);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| fmt(&name, "truncated values".into()))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((name, Tensor::new(shape, data)));
        }
        Ok(Self { meta, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = Checkpoint {
            meta: serde_json::json!({"step": 3}),
            records: vec![
                ("a/w".into(), Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e-39])),
                ("b".into(), Tensor::new(vec![1], vec![7.0])),
            ],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.records.iter().zip(&back.records) {
            assert_eq!(n1, n2);
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            records: vec![("w".into(), Tensor::new(vec![4], vec![1.0; 4]))],
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
