//! Checksums of a frozen run, for regression checks.
//!
//! A golden file is `key = hex-sha256` lines: `params_round_<t>` for every
//! round and `metrics` for the metrics CSV. Lines starting with `#` are
//! comments.

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiment::{run_experiment_with, RunOptions};
use crate::error::{Error, Result};
use crate::protocol::{ClientState, ServerState};

/// SHA-256 over the global model's parameters followed by every client's
/// model in id order, each value little-endian.
pub fn params_checksum(server: &ServerState, clients: &[ClientState]) -> String {
    let mut h = Sha256::new();
    for v in server.global.params() {
        h.update(v.to_le_bytes());
    }
    for c in clients {
        for v in c.model.params() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Golden {
    pub entries: Vec<(String, String)>,
}

impl Golden {
    pub fn compute(cfg: &ExperimentConfig) -> Result<Self> {
        let out = run_experiment_with(cfg, RunOptions { record_checksums: true })?;
        let mut entries: Vec<(String, String)> = out
            .checksums
            .into_iter()
            .enumerate()
            .map(|(t, c)| (format!("params_round_{}", t + 1), c))
            .collect();
        entries.push(("metrics".into(), sha256_hex(out.log.to_csv_string().as_bytes())));
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# fedbsd golden v1\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: Some(i + 1),
                msg: format!("expected 'key = checksum', got '{line}'"),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    /// Keys whose values differ or that exist on one side only.
    pub fn mismatches(&self, expected: &Golden) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &expected.entries {
            match self.entries.iter().find(|(k2, _)| k2 == k) {
                Some((_, v2)) if v2 == v => {}
                Some(_) => out.push(k.clone()),
                None => out.push(format!("{k} (missing)")),
            }
        }
        for (k, _) in &self.entries {
            if !expected.entries.iter().any(|(k2, _)| k2 == k) {
                out.push(format!("{k} (unexpected)"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip_and_diff() {
        let g = Golden {
            entries: vec![("params_round_1".into(), "ab".into()), ("metrics".into(), "cd".into())],
        };
        let back = Golden::parse(&g.render()).unwrap();
        assert_eq!(back, g);
        assert!(back.mismatches(&g).is_empty());
        let other = Golden {
            entries: vec![("params_round_1".into(), "ff".into()), ("extra".into(), "00".into())],
        };
        assert_eq!(other.mismatches(&g), vec!["params_round_1", "metrics (missing)", "extra (unexpected)"]);
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
