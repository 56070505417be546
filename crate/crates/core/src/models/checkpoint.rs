//! `DIPVAE1` checkpoint container: a magic line, `key=value` header lines,
//! one empty line, then little-endian `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "DIPVAE1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value for `{key}`: {raw:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * 8);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.header {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_end = MAGIC.len() + 1;
        if bytes.len() < magic_end || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err(Error::Format(format!("missing {MAGIC} magic")));
        }
        let mut header = Vec::new();
        let mut pos = magic_end;
        loop {
            let rel = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("unterminated checkpoint header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + rel])
                .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
            pos += rel + 1;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let body = &bytes[pos..];
        if body.len() % 8 != 0 {
            return Err(Error::Truncated {
                expected: body.len().next_multiple_of(8),
                found: body.len(),
            });
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Checkpoint { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut ck = Checkpoint::default();
        ck.set("latent_dim", 4);
        ck.set("widths", "8,3");
        ck.payload = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parse::<usize>("latent_dim").unwrap(), 4);
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let ck = Checkpoint {
            header: vec![("a".into(), "1".into())],
            payload: vec![1.0, 2.0],
        };
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }
}
