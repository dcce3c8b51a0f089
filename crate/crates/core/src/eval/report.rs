//! Schema-versioned evaluation reports in JSON or CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mr::{MrResult, MrValue};
use super::sweep::{DirectionMetrics, DirectionStat, GridEntry, SweepResult, DIRECTIONS};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "arcnn-eval/1";
pub const CSV_HEADER: &str = "kind,key,dx,dy,mr,mu,sigma,fppi,miss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            o => Err(Error::InvalidArgument(format!("unknown report format '{o}' (json|csv)"))),
        }
    }
}

/// Direction block; absent directions are omitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionsBlock {
    #[serde(rename = "S0", default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<DirectionStat>,
    #[serde(rename = "S45", default, skip_serializing_if = "Option::is_none")]
    pub s45: Option<DirectionStat>,
    #[serde(rename = "S90", default, skip_serializing_if = "Option::is_none")]
    pub s90: Option<DirectionStat>,
    #[serde(rename = "S135", default, skip_serializing_if = "Option::is_none")]
    pub s135: Option<DirectionStat>,
}

impl DirectionsBlock {
    fn slots(&self) -> [(&'static str, Option<DirectionStat>); 4] {
        [
            (DIRECTIONS[0], self.s0),
            (DIRECTIONS[1], self.s45),
            (DIRECTIONS[2], self.s90),
            (DIRECTIONS[3], self.s135),
        ]
    }

    fn set(&mut self, name: &str, stat: DirectionStat) -> Result<()> {
        let slot = match name {
            "S0" => &mut self.s0,
            "S45" => &mut self.s45,
            "S90" => &mut self.s90,
            "S135" => &mut self.s135,
            o => return Err(Error::InvalidArgument(format!("unknown direction '{o}'"))),
        };
        *slot = Some(stat);
        Ok(())
    }
}

impl From<DirectionMetrics> for DirectionsBlock {
    fn from(m: DirectionMetrics) -> Self {
        Self {
            s0: Some(m.s0),
            s45: Some(m.s45),
            s90: Some(m.s90),
            s135: Some(m.s135),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub mr: MrValue,
    /// `[fppi, miss_rate]` pairs.
    pub curve: Vec<[f64; 2]>,
    pub grid: Vec<GridEntry>,
    pub directions: DirectionsBlock,
}

impl Report {
    pub fn empty() -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            mr: MrValue::NoGt,
            curve: Vec::new(),
            grid: Vec::new(),
            directions: DirectionsBlock::default(),
        }
    }

    pub fn from_score(r: &MrResult) -> Self {
        Self {
            mr: r.mr,
            curve: r.curve.points.iter().map(|&(f, m)| [f, m]).collect(),
            ..Self::empty()
        }
    }

    /// Sweep report; `mr` is the identity mode's value when present.
    pub fn from_sweep(s: &SweepResult) -> Self {
        Self {
            mr: s.get(0, 0).unwrap_or(MrValue::NoGt),
            grid: s.grid.clone(),
            directions: s.directions.map(Into::into).unwrap_or_default(),
            ..Self::empty()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Header, one row per grid mode, then one per present direction. With an
    /// empty grid a summary row and the curve rows are written instead.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for e in &self.grid {
            writeln!(s, "grid,,{},{},{},,,,", e.dx, e.dy, e.mr).unwrap();
        }
        for (name, st) in self.directions.slots() {
            if let Some(st) = st {
                writeln!(s, "direction,{name},,,,{},{},,", st.mu, st.sigma).unwrap();
            }
        }
        if self.grid.is_empty() {
            writeln!(s, "summary,{},,,{},,,,", self.schema, self.mr).unwrap();
            for (i, p) in self.curve.iter().enumerate() {
                writeln!(s, "curve,{i},,,,,,{},{}", p[0], p[1]).unwrap();
            }
        }
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| Error::parse("report", &e))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::InvalidArgument(format!("unsupported report schema '{}'", r.schema)));
        }
        Ok(r)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::InvalidArgument("CSV report lacks the expected header".into()));
        }
        let mut r = Report::empty();
        let mut sweep_mr = None;
        let bad = |n: usize, m: &str| Error::Parse {
            context: "CSV report".into(),
            line: n + 2,
            column: 0,
            message: m.to_string(),
        };
        let num = |n: usize, v: &str| v.parse::<f64>().map_err(|_| bad(n, &format!("'{v}' is not a number")));
        let int = |n: usize, v: &str| v.parse::<i32>().map_err(|_| bad(n, &format!("'{v}' is not an integer")));
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(n, "expected 9 fields"));
            }
            match f[0] {
                "grid" => {
                    let e = GridEntry {
                        dx: int(n, f[2])?,
                        dy: int(n, f[3])?,
                        mr: f[4].parse().map_err(|_| bad(n, "bad mr"))?,
                    };
                    if (e.dx, e.dy) == (0, 0) {
                        sweep_mr = Some(e.mr);
                    }
                    r.grid.push(e);
                }
                "direction" => r
                    .directions
                    .set(f[1], DirectionStat { mu: num(n, f[5])?, sigma: num(n, f[6])? })
                    .map_err(|_| bad(n, "unknown direction"))?,
                "summary" => {
                    if f[1] != REPORT_SCHEMA {
                        return Err(bad(n, "unsupported schema"));
                    }
                    r.mr = f[4].parse().map_err(|_| bad(n, "bad mr"))?;
                }
                "curve" => r.curve.push([num(n, f[7])?, num(n, f[8])?]),
                o => return Err(bad(n, &format!("unknown row kind '{o}'"))),
            }
        }
        if !r.grid.is_empty() {
            r.mr = sweep_mr.unwrap_or(MrValue::NoGt);
        }
        Ok(r)
    }

    pub fn parse(text: &str, format: ReportFormat) -> Result<Self> {
        match format {
            ReportFormat::Json => Self::from_json(text),
            ReportFormat::Csv => Self::from_csv(text),
        }
    }
}

pub fn emit_report(report: &Report, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.render(format)).map_err(|e| Error::io(path, e))
}
