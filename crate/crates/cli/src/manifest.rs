//! Run manifests: every artifact directory gets a `manifest.json`
//! recording the resolved flags, seed, input checksums and outputs, so a
//! result can be reproduced from the manifest alone. No timestamps —
//! reruns must be byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub flags: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            tool: "sigver",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            flags: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn flag(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.flags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        fs::write(dir.join("manifest.json"), body + "\n")?;
        Ok(())
    }
}

/// FNV-1a over file names and contents, names sorted, so the digest does
/// not depend on directory iteration order.
pub fn dir_checksum(dir: &Path) -> Result<String, CliError> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    names.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for path in names {
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            feed(name.as_bytes());
            feed(&[0]);
            feed(&fs::read(&path)?);
            feed(&[0]);
        }
    }
    Ok(format!("fnv1a64:{hash:016x}"))
}
