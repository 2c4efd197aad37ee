//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub created_utc: String,
    pub tool_version: String,
    pub status: String,
    pub config: RunConfig,
    /// Input path to per-file hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the run directory, to hash.
    pub outputs: BTreeMap<String, String>,
}

/// A fresh, uniquely named directory under the output root.
pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `<root>/<UTC time>-seed<seed>-<command>`, adding `-1`, `-2`, …
    /// when the name is taken. Existing directories are never reused.
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let now = chrono::Utc::now();
        let base = format!("{}-seed{}-{command}", now.format("%Y%m%dT%H%M%SZ"), config.seed);
        let mut n = 0;
        let path = loop {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e.into()),
            }
        };
        log::info!("run directory {}", path.display());
        Ok(RunDir {
            path,
            manifest: Manifest {
                manifest_version: MANIFEST_VERSION,
                command: command.to_string(),
                args: std::env::args().collect(),
                created_utc: now.to_rfc3339(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                status: "running".into(),
                config: config.clone(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Records the hashes of every file under `path`.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let files = hash_tree(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for (p, h) in files {
            self.manifest.inputs.insert(p.display().to_string(), h);
        }
        Ok(())
    }

    /// Writes the manifest with the given status and the hashes of
    /// everything in the run directory.
    pub fn finish(&mut self, status: &str) -> Result<PathBuf, CliError> {
        self.manifest.status = status.to_string();
        self.manifest.outputs.clear();
        for (p, h) in hash_tree(&self.path)? {
            let rel = p.strip_prefix(&self.path).unwrap_or(&p);
            if rel != Path::new(MANIFEST_FILE) {
                self.manifest.outputs.insert(rel.display().to_string(), h);
            }
        }
        let out = self.path.join(MANIFEST_FILE);
        fs::write(&out, serde_json::to_string_pretty(&self.manifest).expect("manifest serializes"))?;
        Ok(out)
    }
}

/// SHA-256 of `blob <len>\0<content>`, hex encoded.
pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let len = fs::metadata(path)?.len();
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    let mut f = fs::File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

/// Hashes of all regular files under `root` (or `root` itself), sorted by path.
pub fn hash_tree(root: &Path) -> Result<Vec<(PathBuf, String)>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in fs::read_dir(&p)? {
                stack.push(e?.path());
            }
        } else {
            out.push((p.clone(), hash_file(&p)?));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"hello\n").unwrap();
        // sha256 of "blob 6\0hello\n"
        assert_eq!(
            hash_file(&p).unwrap(),
            "sha256:2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn run_dirs_are_never_reused() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default();
        let a = RunDir::create(dir.path(), "generate", &c).unwrap();
        let b = RunDir::create(dir.path(), "generate", &c).unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.file_name().unwrap().to_str().unwrap().contains("-seed0-generate"));
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunDir::create(dir.path(), "eval", &RunConfig::default()).unwrap();
        fs::create_dir(r.join("sub")).unwrap();
        fs::write(r.join("sub/a.txt"), "a").unwrap();
        let m = r.finish("ok").unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(m.status, "ok");
        assert_eq!(m.outputs.len(), 1);
        assert!(m.outputs.keys().next().unwrap().ends_with("a.txt"));
    }
}
