//! One-axis grid sweeps over a run template.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::train::{run_training, RunSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Temperature,
    LambdaMax,
    Method,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Temperature => "temperature",
            SweepAxis::LambdaMax => "lambda_max",
            SweepAxis::Method => "method",
        }
    }

    /// Apply one value of the axis to a copy of `template`.
    pub fn apply(self, template: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = template.clone();
        let number = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::config(self.name(), format!("`{value}` is not a number")))
        };
        match self {
            SweepAxis::Temperature => c.temperature = number()?,
            SweepAxis::LambdaMax => c.lambda_max = number()?,
            SweepAxis::Method => c.method = value.trim().parse::<Method>()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(SweepAxis::Temperature),
            "lambda_max" | "lambda-max" => Ok(SweepAxis::LambdaMax),
            "method" => Ok(SweepAxis::Method),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Outcome of one child run; failed children keep their error instead of a summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

/// One training per value, sharing the template's seed. With `out_dir`, each
/// child writes into `<out_dir>/<axis>-<value>` and the table goes to
/// `<out_dir>/sweep.csv`.
pub fn sweep(
    template: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    teacher: Option<&ToyModel>,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "need at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let child_dir = out_dir.map(|d| d.join(format!("{}-{}", axis.name(), value.trim())));
        let result = axis.apply(template, value).and_then(|mut c| {
            if let Some(dir) = &child_dir {
                c.out_dir = dir.clone();
            }
            run_training(&c, teacher, child_dir.as_deref())
        });
        rows.push(match result {
            Ok(outcome) => SweepRow {
                value: value.trim().to_string(),
                summary: Some(outcome.summary),
                error: None,
            },
            Err(e) => SweepRow {
                value: value.trim().to_string(),
                summary: None,
                error: Some(format!("{}: {e}", e.kind())),
            },
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), to_csv(axis, &rows)?)?;
    }
    Ok(rows)
}

pub fn to_csv(axis: SweepAxis, rows: &[SweepRow]) -> Result<String> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        axis.name(),
        "status",
        "method",
        "final_accuracy",
        "final_ratio",
        "final_mask_density",
        "teacher_accuracy",
        "steps",
        "error",
    ])
    .map_err(io)?;
    for r in rows {
        let record = match &r.summary {
            Some(s) => [
                r.value.clone(),
                "ok".into(),
                s.method.name().into(),
                s.final_accuracy.to_string(),
                s.final_ratio.to_string(),
                s.final_mask_density.to_string(),
                s.teacher_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                s.steps.to_string(),
                String::new(),
            ],
            None => [
                r.value.clone(),
                "error".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                r.error.clone().unwrap_or_default(),
            ],
        };
        w.write_record(&record).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}
