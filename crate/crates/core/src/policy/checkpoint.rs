use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "oprlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arch: Arch,
    values: Vec<f64>,
}

/// Writes a self-describing JSON checkpoint. Floats are printed in
/// shortest round-trip form, so loading restores the exact bits.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        values: params.values.clone(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };
    if file.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", file.version)));
    }
    PolicyParams::from_values(file.arch, file.values)
}
