//! Result files: replicate JSONL, summary JSON and CSV traces.
//!
//! Every file starts with the resolved configuration: JSONL and JSON embed it
//! as an object, CSV files carry it on a leading `# config: {...}` line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use debias_core::estimator::ReplicateSink;
use debias_core::DebiasReplicate;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let mut file = File::open(path).map_err(CliError::io(format!("opening {}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(CliError::io(format!("reading {}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Short content hash of the configuration and input data.
pub fn run_id(config: &BTreeMap<String, String>, data_sha256: Option<&str>) -> String {
    let payload = json!({ "config": config, "data": data_sha256 });
    sha256_hex(payload.to_string().as_bytes())[..12].to_string()
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(CliError::io(format!("creating {}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(CliError::io(format!("writing {}", path.display())))
}

/// Writes a CSV with a config comment line, a header and rows.
pub fn write_csv(
    path: &Path,
    config: &BTreeMap<String, String>,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    let ctx = || format!("writing {}", path.display());
    writeln!(w, "# config: {}", serde_json::to_string(config)?).map_err(CliError::io(ctx()))?;
    writeln!(w, "{}", header.join(",")).map_err(CliError::io(ctx()))?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(CliError::io(ctx()))?;
    }
    w.flush().map_err(CliError::io(ctx()))
}

/// Formats an optional value; missing values are written as `NaN`.
pub fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

#[derive(Serialize)]
struct ReplicateLine {
    r: usize,
    seed: u64,
    #[serde(rename = "T")]
    truncation: usize,
    phi_star: f64,
    likelihood_evals: u64,
}

/// Streams replicates to a JSONL file as they are aggregated, so a run that
/// stops early still leaves every finished replicate on disk.
pub struct JsonlSink {
    writer: BufWriter<File>,
    pub path: PathBuf,
}

impl JsonlSink {
    pub fn create(path: &Path, config: &BTreeMap<String, String>, master_seed: u64) -> Result<Self, CliError> {
        let mut writer = create(path)?;
        let header = json!({ "config": config, "master_seed": master_seed });
        writeln!(writer, "{header}").map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer
            .flush()
            .map_err(CliError::io(format!("writing {}", self.path.display())))
    }
}

impl ReplicateSink for JsonlSink {
    fn accept(&mut self, rep: &DebiasReplicate) -> std::io::Result<()> {
        let line = ReplicateLine {
            r: rep.index,
            seed: rep.seed,
            truncation: rep.truncation,
            phi_star: rep.phi_star,
            likelihood_evals: rep.likelihood_evals,
        };
        serde_json::to_writer(&mut self.writer, &line)?;
        self.writer.write_all(b"\n")
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
