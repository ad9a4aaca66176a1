//! Training telemetry as CSV: fixed header, one row per emission event,
//! missing values empty (never zero-filled).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Column order of the metrics file. `wall_clock_s` is provenance, not a
/// deterministic quantity; comparisons between runs strip it.
pub const COLUMNS: [&str; 22] = [
    "step",
    "row",
    "probe_type",
    "episode",
    "episode_return",
    "eval_mean",
    "eval_min",
    "eval_max",
    "loss_q1",
    "loss_q2",
    "actor_objective",
    "kl",
    "entropy",
    "cross_entropy",
    "alpha",
    "beta",
    "eq_median",
    "eq_excluded",
    "bound_source",
    "bound_target_shift",
    "bound_policy_shift",
    "wall_clock_s",
];

/// What a row records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Train,
    Episode,
    Eval,
    Probe,
}

impl RowKind {
    fn as_str(&self) -> &'static str {
        match self {
            RowKind::Train => "train",
            RowKind::Episode => "episode",
            RowKind::Eval => "eval",
            RowKind::Probe => "probe",
        }
    }

    fn parse(s: &str) -> Option<RowKind> {
        match s {
            "train" => Some(RowKind::Train),
            "episode" => Some(RowKind::Episode),
            "eval" => Some(RowKind::Eval),
            "probe" => Some(RowKind::Probe),
            _ => None,
        }
    }
}

/// One telemetry row; unset fields serialize as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub row: RowKind,
    pub probe_type: Option<String>,
    pub episode: Option<u64>,
    pub episode_return: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_min: Option<f64>,
    pub eval_max: Option<f64>,
    pub loss_q1: Option<f64>,
    pub loss_q2: Option<f64>,
    pub actor_objective: Option<f64>,
    pub kl: Option<f64>,
    pub entropy: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub eq_median: Option<f64>,
    pub eq_excluded: Option<u64>,
    pub bound_source: Option<f64>,
    pub bound_target_shift: Option<f64>,
    pub bound_policy_shift: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub fn new(step: u64, row: RowKind, wall_clock_s: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            row,
            probe_type: None,
            episode: None,
            episode_return: None,
            eval_mean: None,
            eval_min: None,
            eval_max: None,
            loss_q1: None,
            loss_q2: None,
            actor_objective: None,
            kl: None,
            entropy: None,
            cross_entropy: None,
            alpha: None,
            beta: None,
            eq_median: None,
            eq_excluded: None,
            bound_source: None,
            bound_target_shift: None,
            bound_policy_shift: None,
            wall_clock_s,
        }
    }

    fn to_line(&self) -> String {
        fn opt_f(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        fn opt_u(v: Option<u64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.row.as_str(),
            self.probe_type.clone().unwrap_or_default(),
            opt_u(self.episode),
            opt_f(self.episode_return),
            opt_f(self.eval_mean),
            opt_f(self.eval_min),
            opt_f(self.eval_max),
            opt_f(self.loss_q1),
            opt_f(self.loss_q2),
            opt_f(self.actor_objective),
            opt_f(self.kl),
            opt_f(self.entropy),
            opt_f(self.cross_entropy),
            opt_f(self.alpha),
            opt_f(self.beta),
            opt_f(self.eq_median),
            opt_u(self.eq_excluded),
            opt_f(self.bound_source),
            opt_f(self.bound_target_shift),
            opt_f(self.bound_policy_shift),
            self.wall_clock_s,
        );
        line
    }
}

/// Buffered CSV writer with the fixed header.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", COLUMNS.join(","))?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn parse_cell_f(path: &str, line: usize, name: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|_| Error::Metrics {
        path: path.to_string(),
        line,
        message: format!("column {name}: cannot parse {cell:?} as a real"),
    })
}

fn parse_cell_u(path: &str, line: usize, name: &str, cell: &str) -> Result<Option<u64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<u64>().map(Some).map_err(|_| Error::Metrics {
        path: path.to_string(),
        line,
        message: format!("column {name}: cannot parse {cell:?} as an integer"),
    })
}

/// Parse a metrics file back into records, reporting the offending line
/// number on malformed input.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == COLUMNS.join(",") => {}
        Some((_, header)) => {
            return Err(Error::Metrics {
                path: display,
                line: 1,
                message: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(Error::Metrics {
                path: display,
                line: 1,
                message: "empty file".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').collect();
        if cells.len() != COLUMNS.len() {
            return Err(Error::Metrics {
                path: display.clone(),
                line: lineno,
                message: format!("expected {} columns, found {}", COLUMNS.len(), cells.len()),
            });
        }
        let step = parse_cell_u(&display, lineno, "step", cells[0])?.ok_or(Error::Metrics {
            path: display.clone(),
            line: lineno,
            message: "missing step".to_string(),
        })?;
        let row = RowKind::parse(cells[1]).ok_or(Error::Metrics {
            path: display.clone(),
            line: lineno,
            message: format!("unknown row kind {:?}", cells[1]),
        })?;
        records.push(MetricsRecord {
            step,
            row,
            probe_type: if cells[2].is_empty() {
                None
            } else {
                Some(cells[2].to_string())
            },
            episode: parse_cell_u(&display, lineno, "episode", cells[3])?,
            episode_return: parse_cell_f(&display, lineno, "episode_return", cells[4])?,
            eval_mean: parse_cell_f(&display, lineno, "eval_mean", cells[5])?,
            eval_min: parse_cell_f(&display, lineno, "eval_min", cells[6])?,
            eval_max: parse_cell_f(&display, lineno, "eval_max", cells[7])?,
            loss_q1: parse_cell_f(&display, lineno, "loss_q1", cells[8])?,
            loss_q2: parse_cell_f(&display, lineno, "loss_q2", cells[9])?,
            actor_objective: parse_cell_f(&display, lineno, "actor_objective", cells[10])?,
            kl: parse_cell_f(&display, lineno, "kl", cells[11])?,
            entropy: parse_cell_f(&display, lineno, "entropy", cells[12])?,
            cross_entropy: parse_cell_f(&display, lineno, "cross_entropy", cells[13])?,
            alpha: parse_cell_f(&display, lineno, "alpha", cells[14])?,
            beta: parse_cell_f(&display, lineno, "beta", cells[15])?,
            eq_median: parse_cell_f(&display, lineno, "eq_median", cells[16])?,
            eq_excluded: parse_cell_u(&display, lineno, "eq_excluded", cells[17])?,
            bound_source: parse_cell_f(&display, lineno, "bound_source", cells[18])?,
            bound_target_shift: parse_cell_f(&display, lineno, "bound_target_shift", cells[19])?,
            bound_policy_shift: parse_cell_f(&display, lineno, "bound_policy_shift", cells[20])?,
            wall_clock_s: parse_cell_f(&display, lineno, "wall_clock_s", cells[21])?.ok_or(
                Error::Metrics {
                    path: display.clone(),
                    line: lineno,
                    message: "missing wall_clock_s".to_string(),
                },
            )?,
        });
    }
    Ok(records)
}

/// The file with the wall-clock column removed from every line; two runs of
/// the same (config, seed) are bit-identical under this projection.
pub fn strip_wall_clock(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        match line.rfind(',') {
            Some(pos) => {
                out.push_str(&line[..pos]);
                out.push('\n');
            }
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}
