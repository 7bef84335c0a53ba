//! Plain-text file formats: float tables, the dynamics CSV and the model dump.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use lco_core::model::PolicyModel;
use lco_core::trainer::DynamicsRecord;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("line {line}: cannot parse `{token}` as a number")]
    Number { line: usize, token: String },
    #[error("line {line}: expected {expected} values, got {got}")]
    Ragged {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("table has no rows")]
    Empty,
}

/// Rows of whitespace-separated floats; `#` starts a comment, blank lines are skipped.
pub fn parse_table(text: &str) -> Result<Vec<Vec<f64>>, TableError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let row = content
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| TableError::Number {
                    line: i + 1,
                    token: tok.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(TableError::Ragged {
                    line: i + 1,
                    expected: first.len(),
                    got: row.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TableError::Empty);
    }
    Ok(rows)
}

pub fn read_table(path: &Path) -> Result<Vec<Vec<f64>>, TableError> {
    parse_table(&std::fs::read_to_string(path)?)
}

pub const DYNAMICS_HEADER: [&str; 9] = [
    "step",
    "loss",
    "grad_norm_param",
    "grad_sampled_logit",
    "grad_nonsampled_logit",
    "entropy",
    "sampled_prob",
    "adv_bucket",
    "bound",
];

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_dynamics_csv<W: io::Write>(out: W, records: &[DynamicsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DYNAMICS_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            fmt_float(r.loss),
            fmt_float(r.grad_norm_param),
            fmt_float(r.grad_sampled_logit),
            fmt_float(r.grad_nonsampled_logit),
            fmt_float(r.entropy),
            fmt_float(r.sampled_prob),
            r.adv_bucket.name().to_string(),
            r.bound.map(fmt_float).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Named numeric columns of a CSV file. Non-numeric or empty cells become NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvColumns {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvColumns {
    pub fn read(path: &Path) -> csv::Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(
                rec?.iter()
                    .map(|c| c.trim().parse::<f64>().unwrap_or(f64::NAN))
                    .collect(),
            );
        }
        Ok(Self { header, rows })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.index(name)?;
        Some(
            self.rows
                .iter()
                .map(|r| r.get(i).copied().unwrap_or(f64::NAN))
                .collect(),
        )
    }
}

/// One parameter per line under a comment naming the family and shape.
pub fn model_dump(model: &PolicyModel) -> String {
    let mut s = format!(
        "# family={} vocab={} horizon={} params={}\n",
        model.family(),
        model.vocab(),
        model.horizon(),
        model.param_count()
    );
    for p in model.params() {
        let _ = writeln!(s, "{}", fmt_float(*p));
    }
    s
}
