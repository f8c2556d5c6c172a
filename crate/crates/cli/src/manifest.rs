use crate::{commands, Command, Failure};
use cde_core::config::RunConfig;
use cde_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Everything needed to re-run a command: the command with its arguments,
/// every effective config value and the hashes of the files it read.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub parallel: bool,
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hash_inputs(cmd: &Command) -> Result<BTreeMap<String, String>, Error> {
    cmd.inputs()
        .into_iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

pub fn write(cmd: &Command, cfg: &RunConfig, out_dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, Error> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.clone(),
        seed: cfg.seed,
        config: cfg.entries(),
        inputs: hash_inputs(cmd)?,
        outputs: outputs.to_vec(),
        parallel: cde_core::par::is_parallel(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let path = out_dir.join(format!("manifest-{}.json", cmd.name()));
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read(path: &Path) -> Result<Manifest, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-runs a recorded command after checking that its inputs are unchanged.
pub fn replay(path: &Path, out_dir: &Path) -> Result<(), Failure> {
    if !path.exists() {
        return Err(Failure::missing(path));
    }
    let m = read(path)?;
    if let Command::Replay { .. } = m.command {
        return Err(Failure::config("a manifest cannot record a replay"));
    }
    for p in m.command.inputs() {
        if !p.exists() {
            return Err(Failure::missing(p));
        }
    }
    let now = hash_inputs(&m.command)?;
    if now != m.inputs {
        let changed: Vec<&String> = now.iter().filter(|(k, v)| m.inputs.get(*k) != Some(*v)).map(|(k, _)| k).collect();
        return Err(Error::Consistency(format!("inputs changed since the manifest was written: {changed:?}")).into());
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&m.config)?;
    commands::execute(&m.command, &cfg, out_dir)
}
