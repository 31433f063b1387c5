use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// What a run did and with which settings. Passing the file back through
/// `--config` repeats the run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn path(out: &Path, subcommand: &str) -> PathBuf {
    out.join("provenance").join(format!("{subcommand}.json"))
}

pub fn write(out: &Path, record: &Provenance) -> CliResult<PathBuf> {
    let p = path(out, &record.subcommand);
    let dir = p.parent().expect("provenance path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| islandseg::Error::io(dir, e))?;
    std::fs::write(&p, serde_json::to_string_pretty(record)?).map_err(|e| islandseg::Error::io(&p, e))?;
    Ok(p)
}

/// Read a subcommand config. A provenance record is accepted in place of a
/// bare config when it belongs to the same subcommand.
pub fn load_config<C: DeserializeOwned>(path: Option<&Path>, subcommand: &str) -> CliResult<Option<C>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).map_err(|e| islandseg::Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| islandseg::Error::format(path, format!("config does not parse: {e}")))?;
    let body = match (value.get("subcommand"), value.get("config")) {
        (Some(sub), Some(cfg)) => {
            if sub.as_str() != Some(subcommand) {
                return Err(CliError::Usage(format!(
                    "{} records a `{}` run, not `{subcommand}`",
                    path.display(),
                    sub.as_str().unwrap_or("?")
                )));
            }
            cfg.clone()
        }
        _ => value,
    };
    serde_json::from_value(body)
        .map(Some)
        .map_err(|e| islandseg::Error::format(path, format!("invalid {subcommand} config: {e}")).into())
}
