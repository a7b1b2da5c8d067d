//! Artifact stamping and write-once, all-or-nothing file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

pub const TOOL: &str = concat!("chiral ", env!("CARGO_PKG_VERSION"));

/// Provenance carried by every artifact.
#[derive(Clone, Debug)]
pub struct Stamp {
    pub command: &'static str,
    pub digest: String,
    pub seed: u64,
}

impl Stamp {
    pub fn csv_header(&self) -> String {
        format!("# {TOOL} command={} config_sha256={} seed={}\n", self.command, self.digest, self.seed)
    }

    /// Prepends the stamp fields to a JSON object.
    pub fn json(&self, body: Value) -> Value {
        let mut m = Map::new();
        m.insert("tool".into(), TOOL.into());
        m.insert("command".into(), self.command.into());
        m.insert("config_sha256".into(), self.digest.clone().into());
        m.insert("seed".into(), self.seed.into());
        match body {
            Value::Object(b) => m.extend(b),
            other => {
                m.insert("data".into(), other);
            }
        }
        Value::Object(m)
    }
}

#[derive(Clone, Debug)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn csv(name: &str, stamp: &Stamp, body: &str) -> Self {
        Self { name: name.into(), bytes: format!("{}{body}", stamp.csv_header()).into_bytes() }
    }

    pub fn json(name: &str, stamp: &Stamp, body: Value) -> Self {
        let mut text = serde_json::to_string_pretty(&stamp.json(body)).expect("json value serializes");
        text.push('\n');
        Self { name: name.into(), bytes: text.into_bytes() }
    }
}

#[derive(Debug)]
pub enum WriteError {
    Exists(PathBuf),
    Io(std::io::Error),
}

/// Writes every artifact into `dir`. Existing targets abort the whole batch
/// before anything is written unless `force` is set; each file lands via an
/// atomic rename.
pub fn write_all(dir: &Path, artifacts: &[Artifact], force: bool) -> Result<Vec<PathBuf>, WriteError> {
    let paths: Vec<PathBuf> = artifacts.iter().map(|a| dir.join(&a.name)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(WriteError::Exists(p.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(WriteError::Io)?;
    for (a, path) in artifacts.iter().zip(&paths) {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(WriteError::Io)?;
        tmp.write_all(&a.bytes).map_err(WriteError::Io)?;
        tmp.as_file().sync_all().map_err(WriteError::Io)?;
        if force {
            tmp.persist(path).map_err(|e| WriteError::Io(e.error))?;
        } else {
            tmp.persist_noclobber(path).map_err(|e| match e.error.kind() {
                std::io::ErrorKind::AlreadyExists => WriteError::Exists(path.clone()),
                _ => WriteError::Io(e.error),
            })?;
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp() -> Stamp {
        Stamp { command: "bands", digest: "ab".repeat(32), seed: 7 }
    }

    #[test]
    fn stamps() {
        let a = Artifact::csv("x.csv", &stamp(), "a,b\n1,2\n");
        let text = String::from_utf8(a.bytes).unwrap();
        assert!(text.starts_with("# chiral ") && text.contains("seed=7") && text.ends_with("a,b\n1,2\n"));
        let j = stamp().json(serde_json::json!({"gap": 0.5}));
        assert_eq!(j["seed"], 7);
        assert_eq!(j["gap"], 0.5);
        assert!(j["tool"].as_str().unwrap().starts_with("chiral "));
    }

    #[test]
    fn write_once_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let arts = vec![Artifact::csv("a.csv", &stamp(), "1\n"), Artifact::csv("b.csv", &stamp(), "2\n")];
        write_all(dir.path(), &arts, false).unwrap();
        fs::remove_file(dir.path().join("b.csv")).unwrap();
        // a.csv exists: nothing is written, b.csv stays absent.
        assert!(matches!(write_all(dir.path(), &arts, false), Err(WriteError::Exists(_))));
        assert!(!dir.path().join("b.csv").exists());
        write_all(dir.path(), &arts, true).unwrap();
        assert!(dir.path().join("b.csv").exists());
        let leftovers = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 2);
    }
}
