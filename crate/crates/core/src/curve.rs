//! Per-run curve tables and status sidecars.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 10] = [
    "step",
    "loss_iou",
    "loss_distance_px",
    "w_iou",
    "w_distance",
    "eval_iou_error",
    "eval_distance_px",
    "eval_distance_cm",
    "eval_pickup_error",
    "eval_combined",
];

/// Averaged validation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iou_error: f64,
    pub distance_px: f64,
    pub distance_cm: f64,
    pub pickup_error: f64,
    pub combined: f64,
}

/// One curve row. Training columns are NaN where they do not apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss_iou: f64,
    pub loss_distance_px: f64,
    pub w_iou: f64,
    pub w_distance: f64,
    pub eval: EvalRecord,
}

impl CurveRow {
    fn values(&self) -> [f64; 9] {
        let e = &self.eval;
        [
            self.loss_iou,
            self.loss_distance_px,
            self.w_iou,
            self.w_distance,
            e.iou_error,
            e.distance_px,
            e.distance_cm,
            e.pickup_error,
            e.combined,
        ]
    }

    /// Value of a named column.
    pub fn get(&self, column: &str) -> Option<f64> {
        if column == "step" {
            return Some(self.step as f64);
        }
        let i = COLUMNS.iter().position(|c| *c == column)?;
        Some(self.values()[i - 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunCurve {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub rows: Vec<CurveRow>,
}

impl RunCurve {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.get(name)).collect()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.step).collect()
    }
}

pub fn run_id(method: &str, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

/// Splits `<method>_seed<n>` back into its parts.
pub fn parse_run_id(id: &str) -> Option<(String, u64)> {
    let (method, seed) = id.rsplit_once("_seed")?;
    if method.is_empty() {
        return None;
    }
    Some((method.to_string(), seed.parse().ok()?))
}

pub fn curve_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.csv"))
}

pub fn status_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.status.toml"))
}

fn format_row(row: &CurveRow) -> Vec<String> {
    let mut out = vec![row.step.to_string()];
    // Display on f64 is the shortest string that parses back exactly.
    out.extend(row.values().iter().map(|v| v.to_string()));
    out
}

/// Writes rows as they arrive to `<final>.partial` and renames it into place
/// on [`CurveWriter::finish`], so a complete file always means a finished run.
pub struct CurveWriter {
    writer: csv::Writer<fs::File>,
    partial: PathBuf,
    target: PathBuf,
}

impl CurveWriter {
    pub fn create(target: PathBuf) -> Result<Self> {
        let mut partial = target.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let file = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(COLUMNS).map_err(|e| csv_err(&partial, e))?;
        writer.flush().map_err(|e| Error::io(&partial, e))?;
        Ok(Self { writer, partial, target })
    }

    pub fn push(&mut self, row: &CurveRow) -> Result<()> {
        self.writer.write_record(format_row(row)).map_err(|e| csv_err(&self.partial, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.partial, e))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| Error::io(&self.partial, e))?;
        let file = self.writer.into_inner().map_err(|e| Error::io(&self.partial, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.partial, e))?;
        fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(self.target)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::malformed(path, e.to_string())
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = CurveWriter::create(path.to_path_buf())?;
    for r in rows {
        w.push(r)?;
    }
    w.finish().map(|_| ())
}

/// Parses a curve table. The run id comes from the file stem.
pub fn read_curve(path: &Path) -> Result<RunCurve> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::malformed(path, "file name is not valid UTF-8"))?;
    let (method, seed) = parse_run_id(stem).ok_or_else(|| Error::malformed(path, "file name is not <method>_seed<n>.csv"))?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::malformed(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows: Vec<CurveRow> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let step: usize = rec[0]
            .parse()
            .map_err(|_| Error::malformed(path, format!("line {line}: bad step {:?}", &rec[0])))?;
        let mut v = [0.0; 9];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = rec[j + 1]
                .parse()
                .map_err(|_| Error::malformed(path, format!("line {line}: bad {} {:?}", COLUMNS[j + 1], &rec[j + 1])))?;
        }
        if rows.last().is_some_and(|r| r.step >= step) {
            return Err(Error::malformed(path, format!("line {line}: steps must increase")));
        }
        rows.push(CurveRow {
            step,
            loss_iou: v[0],
            loss_distance_px: v[1],
            w_iou: v[2],
            w_distance: v[3],
            eval: EvalRecord {
                iou_error: v[4],
                distance_px: v[5],
                distance_cm: v[6],
                pickup_error: v[7],
                combined: v[8],
            },
        });
    }
    Ok(RunCurve {
        run_id: stem.to_string(),
        method,
        seed,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Dead,
}

/// Counts of notable events during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    /// Steps where a variance rule hit the weight floor.
    pub floored_weights: u64,
    pub main_skipped_non_finite: u64,
    pub aux_guarded: u64,
    pub aux_skipped_non_finite: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub method: String,
    pub strategy: String,
    pub seed: u64,
    pub outcome: RunOutcome,
    pub cause: Option<String>,
    pub steps_run: usize,
    pub parameters: usize,
    pub events: EventCounts,
    /// Smallest and largest weight seen in any training step, per loss.
    pub w_iou_range: Option<[f64; 2]>,
    pub w_distance_range: Option<[f64; 2]>,
}

impl RunStatus {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<RunStatus> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn is_dead(&self) -> bool {
        self.outcome == RunOutcome::Dead
    }
}

/// A finished run on disk: its curve and, when present, its status sidecar.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub curve: RunCurve,
    pub status: Option<RunStatus>,
}

/// Reads every finished curve in `dir`, sorted by method then seed.
/// Unreadable files are returned separately so callers can report them
/// and carry on with the rest.
pub fn load_curve_dir(dir: &Path) -> Result<(Vec<StoredRun>, Vec<Error>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let (mut runs, mut bad) = (Vec::new(), Vec::new());
    for path in paths {
        let curve = match read_curve(&path) {
            Ok(c) => c,
            Err(e) => {
                bad.push(e);
                continue;
            }
        };
        let sp = status_path(dir, &curve.run_id);
        let status = if sp.exists() {
            match RunStatus::read(&sp) {
                Ok(s) => Some(s),
                Err(e) => {
                    bad.push(e);
                    continue;
                }
            }
        } else {
            None
        };
        runs.push(StoredRun { curve, status });
    }
    runs.sort_by(|a, b| (&a.curve.method, a.curve.seed).cmp(&(&b.curve.method, b.curve.seed)));
    Ok((runs, bad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, x: f64) -> CurveRow {
        CurveRow {
            step,
            loss_iou: f64::NAN,
            loss_distance_px: x * 3.0,
            w_iou: 1.0 / 3.0,
            w_distance: f64::NAN,
            eval: EvalRecord {
                iou_error: x,
                distance_px: 0.1 + 0.2,
                distance_cm: 1e-300,
                pickup_error: f64::MIN_POSITIVE,
                combined: 123456789.123456789,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = curve_path(dir.path(), &run_id("kgc_eps", 7));
        let rows = vec![row(0, 0.9), row(100, std::f64::consts::PI), row(200, 1e-17)];
        write_curve(&path, &rows).unwrap();
        let c = read_curve(&path).unwrap();
        assert_eq!((c.method.as_str(), c.seed), ("kgc_eps", 7));
        assert_eq!(c.rows.len(), 3);
        for (a, b) in rows.iter().zip(&c.rows) {
            for col in COLUMNS {
                let (x, y) = (a.get(col).unwrap(), b.get(col).unwrap());
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()), "{col}");
            }
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss_iou,loss_distance_px,w_iou,w_distance,eval_iou_error"));
    }

    #[test]
    fn partial_file_until_finished() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iou_seed1.csv");
        let mut w = CurveWriter::create(path.clone()).unwrap();
        w.push(&row(0, 0.5)).unwrap();
        assert!(!path.exists());
        assert!(dir.path().join("iou_seed1.csv.partial").exists());
        w.finish().unwrap();
        assert!(path.exists());
    }

    #[test]
    fn malformed_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iou_seed1.csv");
        fs::write(&path, "step,a\n1,2\n").unwrap();
        let err = read_curve(&path).unwrap_err().to_string();
        assert!(err.contains("iou_seed1.csv"), "{err}");
        assert!(read_curve(&dir.path().join("nonsense.csv")).is_err());
    }

    #[test]
    fn decreasing_steps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iou_seed2.csv");
        write_curve(&path, &[row(5, 0.1), row(5, 0.2)]).unwrap();
        assert!(read_curve(&path).is_err());
    }

    #[test]
    fn run_ids() {
        assert_eq!(parse_run_id("kgc_mean_seed12"), Some(("kgc_mean".into(), 12)));
        assert_eq!(parse_run_id("seed12"), None);
        assert_eq!(parse_run_id("iou_seedx"), None);
    }

    #[test]
    fn curve_dir_skips_partials_and_reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        write_curve(&dir.path().join("sum_seed2.csv"), &[row(0, 0.1)]).unwrap();
        write_curve(&dir.path().join("sum_seed1.csv"), &[row(0, 0.1)]).unwrap();
        write_curve(&dir.path().join("auxnet_seed9.csv"), &[row(0, 0.1)]).unwrap();
        fs::write(dir.path().join("iou_seed1.csv.partial"), "junk").unwrap();
        fs::write(dir.path().join("iou_seed3.csv"), "junk\n").unwrap();
        let (runs, bad) = load_curve_dir(dir.path()).unwrap();
        let ids: Vec<_> = runs.iter().map(|r| r.curve.run_id.as_str()).collect();
        assert_eq!(ids, ["auxnet_seed9", "sum_seed1", "sum_seed2"]);
        assert_eq!(bad.len(), 1);
        assert!(bad[0].to_string().contains("iou_seed3.csv"));
    }
}
