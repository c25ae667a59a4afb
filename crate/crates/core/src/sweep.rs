//! Parallel method x seed sweeps with resume by file presence.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::curve::{curve_path, run_id, status_path, CurveWriter, RunStatus};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::run_training;

#[derive(Clone, Debug, PartialEq)]
pub enum RunRecord {
    Ran(RunStatus),
    /// A finished curve file already existed.
    Skipped { run_id: String },
}

impl RunRecord {
    pub fn run_id(&self) -> &str {
        match self {
            RunRecord::Ran(s) => &s.run_id,
            RunRecord::Skipped { run_id } => run_id,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepTask {
    pub method: Method,
    pub seed: u64,
}

/// Every (method, seed) pair, methods outermost, seeds shifted by `seed_offset`.
pub fn sweep_tasks(cfg: &ExperimentConfig, seed_offset: u64) -> Result<Vec<SweepTask>> {
    let methods = cfg.resolved_methods()?;
    Ok(methods
        .iter()
        .flat_map(|m| {
            cfg.seeds.iter().map(move |&s| SweepTask {
                method: m.clone(),
                seed: s.wrapping_add(seed_offset),
            })
        })
        .collect())
}

/// Trains and writes one run: rows stream into `<id>.csv.partial`, the
/// status sidecar is written, then the curve is renamed into place.
pub fn execute_run(cfg: &ExperimentConfig, task: &SweepTask, data: &Dataset, out: &Path) -> Result<RunStatus> {
    let id = run_id(&task.method.label, task.seed);
    let mut writer = CurveWriter::create(curve_path(out, &id))?;
    let result = run_training(cfg, &task.method, task.seed, data, |row| writer.push(row))?;
    result.status.write(&status_path(out, &id))?;
    writer.finish()?;
    Ok(result.status)
}

/// Runs every task not already finished in `out` on `jobs` threads.
/// Records come back in task order regardless of scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, data: &Dataset, out: &Path, jobs: usize, seed_offset: u64) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let tasks = sweep_tasks(cfg, seed_offset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let id = run_id(&t.method.label, t.seed);
                if curve_path(out, &id).exists() {
                    return Ok(RunRecord::Skipped { run_id: id });
                }
                execute_run(cfg, t, data, out).map(RunRecord::Ran)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{MethodEntry, Strategy};
    use crate::curve::read_curve;
    use crate::data::{DatasetConfig, GeneratorConfig};
    use crate::model::HourglassConfig;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            steps: 4,
            eval_every: 2,
            batch_size: 2,
            seeds: vec![1, 2, 3],
            methods: vec![MethodEntry::Name(Strategy::Iou), MethodEntry::Name(Strategy::Kgc)],
            dataset: DatasetConfig {
                n_train: 4,
                n_val: 2,
                generator: GeneratorConfig { height: 16, width: 16, size_scale: 1.5, ..Default::default() },
                ..Default::default()
            },
            model: HourglassConfig {
                height: 16,
                width: 16,
                encoder: vec![4],
                dropout_layers: vec![],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn sweep_writes_one_curve_per_run_and_resumes() {
        let c = cfg();
        let data = Dataset::generate(&c.dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = run_sweep(&c, &data, dir.path(), 3, 0).unwrap();
        assert_eq!(first.len(), 6);
        assert!(first.iter().all(|r| matches!(r, RunRecord::Ran(_))));
        let ids: Vec<_> = first.iter().map(|r| r.run_id().to_string()).collect();
        assert_eq!(ids[0], "iou_seed1");
        assert_eq!(ids[5], "kgc_seed3");
        let bytes = fs::read(dir.path().join("kgc_seed2.csv")).unwrap();

        fs::remove_file(dir.path().join("kgc_seed2.csv")).unwrap();
        let second = run_sweep(&c, &data, dir.path(), 2, 0).unwrap();
        let ran: Vec<_> = second.iter().filter(|r| matches!(r, RunRecord::Ran(_))).map(|r| r.run_id()).collect();
        assert_eq!(ran, vec!["kgc_seed2"]);
        assert_eq!(fs::read(dir.path().join("kgc_seed2.csv")).unwrap(), bytes);
        assert_eq!(read_curve(&dir.path().join("iou_seed3.csv")).unwrap().rows.len(), 3);
    }

    #[test]
    fn seed_offset_shifts_run_ids() {
        let tasks = sweep_tasks(&cfg(), 100).unwrap();
        assert_eq!(tasks.iter().map(|t| t.seed).collect::<Vec<_>>(), vec![101, 102, 103, 101, 102, 103]);
    }
}
