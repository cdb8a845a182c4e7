//! Plain-text checkpoint container.
//!
//! ```text
//! klcpd-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <16-hex-digit f64 bit patterns, space separated, one line per row>
//! end
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns so a save/load round trip
//! is bit-exact. Tensor names may not contain whitespace; metadata values may.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "klcpd-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("checkpoint is missing meta key {key}")))
    }

    pub fn push_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Parameter(format!("invalid tensor name {name:?}")));
        }
        self.tensors.push((name.to_string(), value));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            for row in m.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_TAG) {
            return Err(Error::Parse("not a klcpd checkpoint".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing checkpoint version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        let mut ended = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(Error::Parse(format!("bad tensor header: {line}")));
                }
                let rows: usize = f[1].parse().map_err(|_| Error::Parse(format!("bad rows in {line}")))?;
                let cols: usize = f[2].parse().map_err(|_| Error::Parse(format!("bad cols in {line}")))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let row = lines
                        .next()
                        .ok_or_else(|| Error::Parse(format!("truncated tensor {}", f[0])))?;
                    for tok in row.split_whitespace() {
                        let bits = u64::from_str_radix(tok, 16)
                            .map_err(|_| Error::Parse(format!("bad value {tok:?} in tensor {}", f[0])))?;
                        data.push(f64::from_bits(bits));
                    }
                }
                let m = Matrix::from_vec(rows, cols, data)
                    .map_err(|e| Error::Parse(format!("tensor {}: {e}", f[0])))?;
                ck.tensors.push((f[0].to_string(), m));
            } else if !line.trim().is_empty() {
                return Err(Error::Parse(format!("unexpected checkpoint line: {line}")));
            }
        }
        if !ended {
            return Err(Error::Parse("checkpoint missing end marker".into()));
        }
        Ok(ck)
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, value) in store.iter() {
            self.push_tensor(&format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a store from all tensors whose name starts with `prefix`, in
    /// file order. Optimizer state starts fresh.
    pub fn extract_store(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, value) in &self.tensors {
            if let Some(local) = name.strip_prefix(prefix) {
                store.insert(local, value.clone())?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_other_versions() {
        assert!(Checkpoint::from_text("klcpd-checkpoint 2\nend\n").is_err());
        assert!(Checkpoint::from_text("something 1\nend\n").is_err());
        assert!(Checkpoint::from_text("klcpd-checkpoint 1\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        let mut ck = Checkpoint::new();
        ck.set_meta("mode", "klcpd");
        ck.set_meta("note", "two words");
        ck.push_tensor("phi/w", Matrix::from_rows(&[[0.1, -0.0], [f64::MIN_POSITIVE, 3.5e300]]).unwrap())
            .unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("note").unwrap(), "two words");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
            let mut s = seed;
            let data: Vec<f64> = (0..rows * cols).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2) // finite, arbitrary bit patterns
            }).collect();
            let mut ck = Checkpoint::new();
            ck.push_tensor("t", Matrix::from_vec(rows, cols, data.clone()).unwrap()).unwrap();
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            let got: Vec<u64> = back.tensor("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
