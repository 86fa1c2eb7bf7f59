//! Output plumbing shared by every subcommand: checksummed manifests, CSV
//! emission, and the JSON conventions that keep reruns byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vortexmc::{MomentTable, StructureFunction};

use crate::Failure;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Create the output directory, refusing to write into one that already
/// holds a finished or in-flight run.
pub fn prepare_out_dir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Other(format!("cannot create {}: {e}", out.display())))?;
    for guard in [MANIFEST_NAME, "config.json"] {
        if out.join(guard).exists() {
            return Err(Failure::Config(format!(
                "{} already contains {guard}; resume it or pick another directory",
                out.display()
            )));
        }
    }
    Ok(())
}

pub fn write_bytes(root: &Path, rel: &str, bytes: &[u8]) -> Result<(), Failure> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(&path, bytes).map_err(|e| Failure::Other(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline; field order follows the struct, so
/// identical values serialize to identical bytes.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Other(format!("serialization: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(root: &Path, rel: &str, value: &T) -> Result<(), Failure> {
    write_bytes(root, rel, &to_json_bytes(value)?)
}

/// Quote a CSV field only when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSeed {
    pub chain: u32,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Inventory of everything a command wrote. `files` covers every file under
/// the output directory except the manifest itself, so nothing exists that
/// the manifest does not list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub status: String,
    pub config_sha256: Option<String>,
    pub seeds: Vec<ChainSeed>,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel.to_string_lossy().into_owned();
            if rel == MANIFEST_NAME {
                continue;
            }
            let bytes = fs::read(&path)?;
            out.push(FileEntry { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
    }
    Ok(())
}

/// Walk the output directory and write the manifest last, so its inventory
/// is complete by construction.
pub fn write_manifest(
    root: &Path,
    status: &str,
    config_sha256: Option<String>,
    seeds: Vec<ChainSeed>,
    started: Instant,
) -> Result<(), Failure> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)
        .map_err(|e| Failure::Other(format!("cannot inventory {}: {e}", root.display())))?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: status.to_string(),
        config_sha256,
        seeds,
        wall_clock_seconds: (started.elapsed().as_millis() as f64) / 1000.0,
        files,
    };
    write_bytes(root, MANIFEST_NAME, &to_json_bytes(&manifest)?)
}

pub fn default_out_dir(flag: Option<PathBuf>, default_name: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os("VORTEXMC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(default_name))
}

/// One row per component and power: `component,p,moment,stderr`.
pub fn moments_csv(table: &MomentTable) -> String {
    let mut s = String::from("component,p,moment,stderr\n");
    for c in 0..3 {
        for p in 1..=table.max_p() {
            writeln!(s, "{c},{p},{},{}", table.moment(c, p), table.stderr(c, p)).unwrap();
        }
    }
    s
}

pub const STRUCTURE_HEADER: &str = "m,r,raw,raw_stderr,normalized,normalized_stderr";

/// Rows without the header so callers can prepend extra key columns.
pub fn structure_rows(sf: &StructureFunction, prefix: &str) -> String {
    let mut s = String::new();
    for (i, (&r, &raw)) in sf.separations.iter().zip(&sf.raw).enumerate() {
        let (norm, norm_err) = match (&sf.normalized, &sf.normalized_stderr) {
            (Some(n), Some(e)) => (n[i].to_string(), e[i].to_string()),
            _ => (String::new(), String::new()),
        };
        writeln!(s, "{prefix}{},{r},{raw},{},{norm},{norm_err}", i + 1, sf.raw_stderr[i]).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_quoting_covers_commas_and_quotes() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
