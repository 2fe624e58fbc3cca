//! Per-iteration metrics as CSV with a fixed header and fixed decimals.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "run_id",
    "seed",
    "strategy",
    "phase",
    "iteration",
    "target_id",
    "avg_timestep_reward",
    "avg_timestep_cost",
    "total",
    "J_c",
    "stage",
    "violation_rate",
];

/// Decimal places of every real-valued column.
pub const DECIMALS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    pub phase: String,
    pub iteration: usize,
    /// `0` when the batch spans every target.
    pub target_id: usize,
    pub avg_timestep_reward: f64,
    pub avg_timestep_cost: f64,
    pub total: f64,
    pub j_c: f64,
    pub stage: String,
    pub violation_rate: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 12] {
        let f = |v: f64| format!("{v:.DECIMALS$}");
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.strategy.clone(),
            self.phase.clone(),
            self.iteration.to_string(),
            self.target_id.to_string(),
            f(self.avg_timestep_reward),
            f(self.avg_timestep_cost),
            f(self.total),
            f(self.j_c),
            self.stage.clone(),
            f(self.violation_rate),
        ]
    }

    fn parse(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::InvalidArgument(format!(
                "metrics line {line}: expected {} fields, got {}",
                METRICS_HEADER.len(),
                rec.len()
            )));
        }
        let bad = |col: usize| {
            Error::InvalidArgument(format!(
                "metrics line {line}: cannot parse {} = {:?}",
                METRICS_HEADER[col], &rec[col]
            ))
        };
        let real = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        let int = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        Ok(Self {
            run_id: rec[0].to_string(),
            seed: int(1)?,
            strategy: rec[2].to_string(),
            phase: rec[3].to_string(),
            iteration: int(4)? as usize,
            target_id: int(5)? as usize,
            avg_timestep_reward: real(6)?,
            avg_timestep_cost: real(7)?,
            total: real(8)?,
            j_c: real(9)?,
            stage: rec[10].to_string(),
            violation_rate: real(11)?,
        })
    }
}

pub fn write_metrics_to<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_metrics_to(rows, File::create(path)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| MetricsRow::parse(&rec?, i + 2))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize) -> MetricsRow {
        MetricsRow {
            run_id: "s0-scda".into(),
            seed: 7,
            strategy: "scda".into(),
            phase: "adapt".into(),
            iteration: i,
            target_id: 2,
            avg_timestep_reward: -0.1234567,
            avg_timestep_cost: 0.05,
            total: -0.1734567,
            j_c: 0.05,
            stage: "soft_conflict".into(),
            violation_rate: 0.1,
        }
    }

    #[test]
    fn header_is_exact() {
        let mut buf = Vec::new();
        write_metrics_to(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "run_id,seed,strategy,phase,iteration,target_id,avg_timestep_reward,avg_timestep_cost,total,J_c,stage,violation_rate\n"
        );
    }

    #[test]
    fn fixed_decimals_and_byte_identical() {
        let rows: Vec<_> = (0..3).map(row).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_metrics_to(&rows, &mut a).unwrap();
        write_metrics_to(&rows, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .contains(",-0.123457,0.050000,-0.173457,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<_> = (0..5).map(row).collect();
        write_metrics(&rows, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[4].iteration, 4);
        assert_eq!(back[0].avg_timestep_reward, -0.123457);
    }
}
