//! Plot-ready series merged from per-stage run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppo::{RunManifest, Stage};

use super::metrics::REPORT_FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub stage: Stage,
    pub mean_reward: f64,
    pub mean_r_entail: f64,
    pub mean_r_quality: f64,
    pub mean_kl: f64,
    pub sft_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSeries {
    pub format_version: u32,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub points: Vec<SeriesPoint>,
    /// Mean entailment reward of the first and last `window` RL episodes.
    pub first_window_r_entail: Option<f64>,
    pub last_window_r_entail: Option<f64>,
}

/// Concatenates manifests in the given order. A manifest whose steps do not
/// continue past the previous one is shifted so the step axis stays strictly
/// increasing.
pub fn merge_manifests(manifests: &[RunManifest], window: usize) -> Result<RewardSeries> {
    if manifests.is_empty() {
        return Err(Error::Validation("report needs at least one run manifest".into()));
    }
    let mut points: Vec<SeriesPoint> = Vec::new();
    let mut episodes = Vec::new();
    for m in manifests {
        let last = points.last().map_or(0, |p| p.step);
        let shift = match m.steps.first() {
            Some(s) if s.step <= last => last + 1 - s.step,
            _ => 0,
        };
        for s in &m.steps {
            let step = s.step + shift;
            if points.last().is_some_and(|p| p.step >= step) {
                return Err(Error::Format(format!("manifest for {} has unordered steps", m.stage.as_str())));
            }
            points.push(SeriesPoint {
                step,
                stage: s.stage,
                mean_reward: s.mean_reward,
                mean_r_entail: s.mean_r_entail,
                mean_r_quality: s.mean_r_quality,
                mean_kl: s.mean_kl,
                sft_loss: s.sft_loss,
                policy_loss: s.policy_loss,
                value_loss: s.value_loss,
            });
        }
        episodes.extend(m.episodes.iter().map(|e| e.r_entail));
    }
    let w = window.min(episodes.len());
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mut seeds: Vec<u64> = manifests.iter().map(|m| m.seed).collect();
    seeds.dedup();
    let mut config_hashes: Vec<String> = manifests.iter().map(|m| m.config_hash.clone()).collect();
    config_hashes.dedup();
    Ok(RewardSeries {
        format_version: REPORT_FORMAT_VERSION,
        seeds,
        config_hashes,
        first_window_r_entail: mean(&episodes[..w]),
        last_window_r_entail: mean(&episodes[episodes.len() - w..]),
        points,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `reward_series.json` and `reward_series.csv` into `dir`.
pub fn write_series(dir: &Path, series: &RewardSeries) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("reward_series.json"), serde_json::to_string_pretty(series)?)?;
    let mut csv = String::from("step,stage,mean_reward,mean_r_entail,mean_r_quality,mean_kl,sft_loss,policy_loss,value_loss\n");
    for p in &series.points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.step,
            p.stage.as_str(),
            p.mean_reward,
            p.mean_r_entail,
            p.mean_r_quality,
            p.mean_kl,
            opt(p.sft_loss),
            opt(p.policy_loss),
            opt(p.value_loss)
        ));
    }
    std::fs::write(dir.join("reward_series.csv"), csv)?;
    Ok(())
}

/// Run manifests under `root`, one directory level down, in stage order.
pub fn find_manifests(root: &Path) -> Result<Vec<RunManifest>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path().join("run_manifest.json");
        if path.is_file() {
            found.push(RunManifest::load(&path)?);
        }
    }
    found.sort_by_key(|m| (m.stage, m.steps.first().map(|s| s.step)));
    Ok(found)
}
