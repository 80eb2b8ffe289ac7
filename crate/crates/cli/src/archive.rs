//! Trajectory archives: `trajectories/*.json`, `failed/*.json` (partial
//! records of failed rollouts) and `manifest.json`.

use std::path::{Path, PathBuf};

use mem1_core::config::RolloutConfig;
use mem1_core::rollout::{RolloutError, Termination, TrajectoryRecord};
use serde::{Deserialize, Serialize};

use crate::{data, CliError};

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminated: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RolloutConfig,
    pub count: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub entries: Vec<ManifestEntry>,
}

fn file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{index:05}-{safe}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("archive records serialize");
    std::fs::write(path, text + "\n").map_err(data(path.display()))
}

pub fn write_archive(
    out: &Path,
    config: &RolloutConfig,
    results: &[Result<TrajectoryRecord, RolloutError>],
) -> Result<Manifest, CliError> {
    if out.join("manifest.json").exists() {
        return Err(CliError::Data(format!("{} already holds an archive", out.display())));
    }
    let ok_dir = out.join("trajectories");
    let failed_dir = out.join("failed");
    std::fs::create_dir_all(&ok_dir).map_err(data(ok_dir.display()))?;
    let mut entries = Vec::with_capacity(results.len());
    for (i, result) in results.iter().enumerate() {
        let entry = match result {
            Ok(t) => {
                let name = file_name(i, &t.task.id);
                write_json(&ok_dir.join(&name), t)?;
                ManifestEntry {
                    id: t.task.id.clone(),
                    file: format!("trajectories/{name}"),
                    ok: true,
                    terminated: Some(t.terminated),
                    error: None,
                }
            }
            Err(e) => {
                std::fs::create_dir_all(&failed_dir).map_err(data(failed_dir.display()))?;
                let name = file_name(i, &e.partial.task.id);
                write_json(&failed_dir.join(&name), e.partial.as_ref())?;
                ManifestEntry {
                    id: e.partial.task.id.clone(),
                    file: format!("failed/{name}"),
                    ok: false,
                    terminated: None,
                    error: Some(e.to_string()),
                }
            }
        };
        entries.push(entry);
    }
    let succeeded = entries.iter().filter(|e| e.ok).count();
    let manifest = Manifest {
        config: config.clone(),
        count: entries.len(),
        succeeded,
        failed: entries.len() - succeeded,
        entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub struct Archive {
    pub trajectories: Vec<(PathBuf, TrajectoryRecord)>,
    pub unreadable: Vec<(PathBuf, String)>,
}

/// Loads every `trajectories/*.json`, in file-name order.
pub fn read_archive(dir: &Path) -> Result<Archive, CliError> {
    let traj_dir = dir.join("trajectories");
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: not an archive directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&traj_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(CliError::Data(format!("{}: {e}", traj_dir.display()))),
    };
    paths.sort();
    let mut archive = Archive {
        trajectories: Vec::new(),
        unreadable: Vec::new(),
    };
    for path in paths {
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<TrajectoryRecord>(&text).map_err(|e| e.to_string()));
        match parsed {
            Ok(t) => archive.trajectories.push((path, t)),
            Err(why) => archive.unreadable.push((path, why)),
        }
    }
    Ok(archive)
}
