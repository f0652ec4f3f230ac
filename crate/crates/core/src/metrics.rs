//! Per-iteration metric rows and their CSV files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};

/// Which policy a metrics row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scope {
    Global,
    Oracle,
    Context(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Oracle => f.write_str("oracle"),
            Scope::Context(i) => write!(f, "context:{i}"),
        }
    }
}

impl FromStr for Scope {
    type Err = DncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "oracle" => Ok(Scope::Oracle),
            _ => s
                .strip_prefix("context:")
                .and_then(|i| i.parse().ok())
                .map(Scope::Context)
                .ok_or_else(|| DncError::Input(format!("unknown scope {s:?}"))),
        }
    }
}

impl TryFrom<String> for Scope {
    type Error = DncError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub scope: Scope,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_kl_penalty: f64,
    pub timesteps_consumed: u64,
    pub wall_seconds: f64,
}

pub const METRICS_COLUMNS: [&str; 7] = [
    "iteration",
    "scope",
    "mean_return",
    "success_rate",
    "mean_kl_penalty",
    "timesteps_consumed",
    "wall_seconds",
];

fn csv_err(path: &Path, e: csv::Error) -> DncError {
    DncError::Input(format!("{}: {e}", path.display()))
}

/// Writes serializable records as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DncError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        std::fs::write(path, METRICS_COLUMNS.join(",") + "\n").map_err(|e| DncError::io(path, e))
    } else {
        write_csv(path, rows)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

/// Last row for `scope`, if any.
pub fn final_row(rows: &[MetricsRow], scope: Scope) -> Option<&MetricsRow> {
    rows.iter().rev().find(|r| r.scope == scope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scope_strings() {
        for s in [Scope::Global, Scope::Oracle, Scope::Context(3)] {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert_eq!(Scope::Context(12).to_string(), "context:12");
        assert!("context:x".parse::<Scope>().is_err());
    }

    #[test]
    fn header_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), METRICS_COLUMNS.join(",") + "\n");
        let row = MetricsRow {
            iteration: 1,
            scope: Scope::Context(0),
            mean_return: -1.5,
            success_rate: 0.25,
            mean_kl_penalty: 0.0,
            timesteps_consumed: 100,
            wall_seconds: 0.0,
        };
        write_metrics(&p, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(read_metrics(&p).unwrap(), vec![row]);
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            it in 0usize..10_000,
            ctx in proptest::option::of(0usize..64),
            ret in -1e6f64..1e6,
            succ in 0.0f64..=1.0,
            kl in 0.0f64..10.0,
            ts in 0u64..u64::MAX / 2,
            wall in 0.0f64..1e4,
        ) {
            let row = MetricsRow {
                iteration: it,
                scope: ctx.map(Scope::Context).unwrap_or(Scope::Global),
                mean_return: ret,
                success_rate: succ,
                mean_kl_penalty: kl,
                timesteps_consumed: ts,
                wall_seconds: wall,
            };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.csv");
            write_metrics(&p, std::slice::from_ref(&row)).unwrap();
            prop_assert_eq!(read_metrics(&p).unwrap(), vec![row]);
        }
    }
}
