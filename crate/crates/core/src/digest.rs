//! Content digests and file-tree helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256, Sha512};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Digest algorithm used for archive content hashes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestAlgorithm {
    #[default]
    Sha256,
    Sha512,
}

impl DigestAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            DigestAlgorithm::Sha256 => "sha256",
            DigestAlgorithm::Sha512 => "sha512",
        }
    }

    /// Returns `"<algo>:<hex>"`.
    pub fn digest(self, bytes: &[u8]) -> String {
        format!("{}:{}", self.name(), self.hex(bytes))
    }

    pub fn hex(self, bytes: &[u8]) -> String {
        match self {
            DigestAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
            DigestAlgorithm::Sha512 => hex::encode(Sha512::digest(bytes)),
        }
    }

    pub fn from_tagged(tagged: &str) -> Option<(Self, &str)> {
        let (algo, hex) = tagged.split_once(':')?;
        let algo = match algo {
            "sha256" => DigestAlgorithm::Sha256,
            "sha512" => DigestAlgorithm::Sha512,
            _ => return None,
        };
        Some((algo, hex))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative path (forward slashes) → sha256 hex of every regular file under `root`.
pub type FileTree = BTreeMap<String, String>;

pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::storage(root, e.into()))?;
        if entry.file_type().is_file() {
            out.push(rel_path(root, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_tree(root: &Path) -> Result<FileTree> {
    list_files(root)?
        .into_iter()
        .map(|rel| {
            let path = root.join(&rel);
            let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
            Ok((rel, sha256_hex(&bytes)))
        })
        .collect()
}

/// Digest over a whole directory: paths, executable bits and contents.
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in list_files(root)? {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        hasher.update(rel.as_bytes());
        hasher.update([0, is_executable(&path) as u8, 0]);
        hasher.update(sha256_hex(&bytes).as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

pub(crate) fn rel_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(unix)]
pub(crate) fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(path)
        .map(|m| m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

#[cfg(not(unix))]
pub(crate) fn is_executable(path: &Path) -> bool {
    path.exists()
}

#[cfg(unix)]
pub(crate) fn set_executable(path: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    let mut perms = fs::metadata(path)
        .map_err(|e| Error::storage(path, e))?
        .permissions();
    perms.set_mode(0o755);
    fs::set_permissions(path, perms).map_err(|e| Error::storage(path, e))
}

#[cfg(not(unix))]
pub(crate) fn set_executable(_path: &Path) -> Result<()> {
    Ok(())
}

/// Recursively copies `src` into `dst`, preserving executable bits.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> Result<u64> {
    let mut bytes = 0;
    fs::create_dir_all(dst).map_err(|e| Error::storage(dst, e))?;
    for rel in list_files(src)? {
        let from = src.join(&rel);
        let to: PathBuf = dst.join(&rel);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::storage(parent, e))?;
        }
        bytes += fs::copy(&from, &to).map_err(|e| Error::storage(&from, e))?;
    }
    Ok(bytes)
}
