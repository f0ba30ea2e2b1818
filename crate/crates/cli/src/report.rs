//! Report files: experiment CSV with a config-hash header, and line-delimited
//! trajectory records.
//!
//! CSV layout:
//!
//! ```text
//! # experiment=<id> config_hash=<hex> seed=<n>
//! condition,attention,decoder,seed,accuracy,fpt,tokens_per_sec,mean_k,mean_delta,n_items
//! ...one row per condition...
//! ```
//!
//! Trajectory files are JSON lines: a meta record first, then one record per
//! sweep with fields `outer, planned_k, sweep, cursor, delta, committed,
//! confidence, entropy, forward_passes`.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cdlm_core::infer::TrajectoryEvent;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub attention: String,
    pub decoder: String,
    pub seed: u64,
    pub accuracy: f64,
    pub fpt: f64,
    pub tokens_per_sec: f64,
    pub mean_k: f64,
    pub mean_delta: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ConditionRow>,
}

impl ExperimentReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "# experiment={} config_hash={} seed={}",
            self.experiment, self.config_hash, self.seed
        )?;
        writeln!(
            f,
            "condition,attention,decoder,seed,accuracy,fpt,tokens_per_sec,mean_k,mean_delta,n_items"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                r.condition,
                r.attention,
                r.decoder,
                r.seed,
                r.accuracy,
                r.fpt,
                r.tokens_per_sec,
                r.mean_k,
                r.mean_delta,
                r.n_items
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().context("empty report")?;
        let mut experiment = String::new();
        let mut config_hash = String::new();
        let mut seed = 0u64;
        for part in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = part.split_once('=') {
                match k {
                    "experiment" => experiment = v.to_string(),
                    "config_hash" => config_hash = v.to_string(),
                    "seed" => seed = v.parse()?,
                    _ => {}
                }
            }
        }
        let columns = lines.next().context("missing column row")?;
        if !columns.starts_with("condition,") {
            bail!("unexpected column row {columns:?}");
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                bail!("row {} has {} fields, expected 10", i + 3, f.len());
            }
            rows.push(ConditionRow {
                condition: f[0].into(),
                attention: f[1].into(),
                decoder: f[2].into(),
                seed: f[3].parse()?,
                accuracy: f[4].parse()?,
                fpt: f[5].parse()?,
                tokens_per_sec: f[6].parse()?,
                mean_k: f[7].parse()?,
                mean_delta: f[8].parse()?,
                n_items: f[9].parse()?,
            });
        }
        Ok(ExperimentReport { experiment, config_hash, seed, rows })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub config_hash: String,
    pub checkpoint: String,
    pub prompt: String,
    pub mode: String,
    pub gamma: f64,
}

pub fn write_trajectory(
    path: &Path,
    meta: &TrajectoryMeta,
    events: &[TrajectoryEvent],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(meta)?)?;
    for ev in events {
        writeln!(f, "{}", serde_json::to_string(ev)?)?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(TrajectoryMeta, Vec<TrajectoryEvent>)> {
    let f = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(f).lines();
    let meta_line = lines.next().context("empty trajectory file")??;
    let meta: TrajectoryMeta = serde_json::from_str(&meta_line)?;
    let mut events = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok((meta, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_its_own_parser() {
        let report = ExperimentReport {
            experiment: "ablation".into(),
            config_hash: "0011aabb".into(),
            seed: 3,
            rows: vec![
                ConditionRow {
                    condition: "causal+elastic".into(),
                    attention: "causal".into(),
                    decoder: "elastic".into(),
                    seed: 3,
                    accuracy: 0.9375,
                    fpt: 0.421875,
                    tokens_per_sec: 812.25,
                    mean_k: 7.5,
                    mean_delta: 1.25,
                    n_items: 64,
                },
                ConditionRow {
                    condition: "bidirectional+ar".into(),
                    attention: "bidirectional".into(),
                    decoder: "ar".into(),
                    seed: 3,
                    accuracy: 0.875,
                    fpt: 1.0,
                    tokens_per_sec: 400.0,
                    mean_k: 1.0,
                    mean_delta: 0.0,
                    n_items: 64,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let back = ExperimentReport::read_csv(&path).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn trajectory_round_trips() {
        let meta = TrajectoryMeta {
            config_hash: "ff".into(),
            checkpoint: "m.ckpt".into(),
            prompt: "Q:1+2=".into(),
            mode: "elastic".into(),
            gamma: 0.9,
        };
        let events = vec![TrajectoryEvent {
            outer: 0,
            planned_k: 4,
            sweep: 0,
            cursor: 0,
            delta: 2,
            committed: vec![7, 8, 9],
            confidence: vec![0.99, 0.97, 0.95, 0.2],
            entropy: vec![0.1, 0.2, 0.3, 2.0],
            forward_passes: 1,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_trajectory(&path, &meta, &events).unwrap();
        let (m2, e2) = read_trajectory(&path).unwrap();
        assert_eq!(m2.prompt, meta.prompt);
        assert_eq!(e2.len(), 1);
        assert_eq!(e2[0].committed, events[0].committed);
    }
}
