//! Run manifests: every output directory records the command, the fully
//! resolved configuration, input fingerprints and the seed, so a run can be
//! audited and reproduced exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use terratex_core::error::{CoreError, Result};

/// sha256 of the raw file bytes, hex-encoded.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Creates (or reuses, with `force`) an output directory. Write-once:
/// a non-empty directory is rejected unless `force` is set.
pub fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let mut entries = path.read_dir().map_err(|e| CoreError::io(path, e))?;
        if entries.next().is_some() && !force {
            return Err(CoreError::InvalidArgument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                path.display()
            )));
        }
    } else {
        std::fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

pub fn write_manifest(
    path: &Path,
    command: &str,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    seed: u64,
) -> Result<()> {
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "tool_version": terratex_core::VERSION,
        "format_version": terratex_core::FORMAT_VERSION,
        "created_unix": created_unix,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}
