//! Run manifests: a JSON record of what a subcommand consumed and produced,
//! with content digests for every input and output.
//!
//! Output files are written atomically (temp file in the same directory,
//! then rename), and the manifest itself is written last, so an interrupted
//! run leaves either no manifest or a manifest whose outputs all exist.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use windshed::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    let path_str = path.as_ref().display().to_string();
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path_str, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` via a same-directory temp file and rename, so
/// readers never observe a half-written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("`{path_str}` has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let tmp_str = tmp.display().to_string();
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp_str, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&path_str, e))
}

pub struct ManifestBuilder {
    command: &'static str,
    out_dir: PathBuf,
    config_hash: String,
    master_seed: u64,
    started_unix: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seed_streams: BTreeMap<String, u64>,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, out_dir: &Path, config_text: &str, master_seed: u64) -> Self {
        Self {
            command,
            out_dir: out_dir.to_path_buf(),
            config_hash: sha256_hex(config_text.as_bytes()),
            master_seed,
            started_unix: unix_now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed_streams: BTreeMap::new(),
        }
    }

    /// Digests an input file; call when the file is first read so the
    /// manifest reflects exactly what the run saw.
    pub fn record_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let digest = digest_file(path.as_ref())?;
        self.inputs
            .insert(path.as_ref().display().to_string(), digest);
        Ok(())
    }

    /// Records an input that is embedded in the binary rather than read
    /// from disk, keyed `bundled:<name>`.
    pub fn record_bundled_input(&mut self, name: &str, text: &str) {
        self.inputs
            .insert(format!("bundled:{name}"), sha256_hex(text.as_bytes()));
    }

    /// Atomically writes one output file into the run directory and records
    /// its digest.
    pub fn write_output(&mut self, file_name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(file_name);
        write_atomic(&path, bytes)?;
        self.outputs
            .insert(file_name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records which deterministic seed stream a component consumed.
    pub fn record_stream(&mut self, component: &str, stream_id: u64) {
        self.seed_streams.insert(component.to_string(), stream_id);
    }

    /// Writes `<command>.manifest.json`, the last file the run touches.
    pub fn finish(self) -> Result<()> {
        let manifest = serde_json::json!({
            "format": "windshed-manifest-v1",
            "command": self.command,
            "versions": {
                "windshed": windshed::VERSION,
                "windshed-cli": env!("CARGO_PKG_VERSION"),
            },
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "seed_streams": self.seed_streams,
            "started_unix": self.started_unix,
            "finished_unix": unix_now(),
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Numerical(format!("manifest serialization: {e}")))?;
        text.push('\n');
        let path = self.out_dir.join(format!("{}.manifest.json", self.command));
        write_atomic(path, text.as_bytes())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
