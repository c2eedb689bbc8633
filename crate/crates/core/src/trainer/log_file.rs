use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const LOG_HEADER: &str = "step,l_lab,l_aux,l_unsup,l_total";

/// One row of `log.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub l_lab: f64,
    pub l_aux: f64,
    pub l_unsup: f64,
    pub l_total: f64,
}

impl LogRow {
    pub fn from_report(step: u64, r: &LossReport) -> Self {
        Self {
            step,
            l_lab: r.l_lab,
            l_aux: r.l_aux,
            l_unsup: r.l_unsup,
            l_total: r.l_total,
        }
    }

    /// `l_lab + l_aux`, the supervised part of the objective.
    pub fn l_sup(&self) -> f64 {
        self.l_lab + self.l_aux
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_lab, self.l_aux, self.l_unsup, self.l_total)
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            l_lab: f[1].parse().ok()?,
            l_aux: f[2].parse().ok()?,
            l_unsup: f[3].parse().ok()?,
            l_total: f[4].parse().ok()?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::header(path, "missing log header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| LogRow::parse(l).ok_or_else(|| Error::header(path, format!("malformed row {l:?}"))))
        .collect()
}

/// Drops rows whose leading step field exceeds `step`.
pub(crate) fn truncate_rows(path: &Path, step: u64, header: Option<&str>) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(h);
        out.push('\n');
    }
    for line in text.lines() {
        if Some(line) == header || line.is_empty() {
            continue;
        }
        let keep = line
            .split(',')
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
