//! Per-iteration records of a run and their CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub theta: Vec<f64>,
    pub ess: f64,
    /// Running log-evidence; `None` for algorithms that cannot estimate it.
    pub log_evidence: Option<f64>,
    pub grad_norm: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: TrajectoryRow) {
        self.rows.push(row);
    }

    pub fn thetas(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.theta.as_slice())
    }

    pub fn log_evidence(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.log_evidence).collect()
    }

    pub fn resample_count(&self) -> usize {
        self.rows.iter().filter(|r| r.resampled).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let d = self.rows.first().map_or(0, |r| r.theta.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((0..d).map(|j| format!("theta_{j}")));
        header.extend(["ess", "log_evidence", "grad_norm", "resampled"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string()];
            rec.extend(r.theta.iter().map(|v| v.to_string()));
            rec.push(r.ess.to_string());
            rec.push(r.log_evidence.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.grad_norm.to_string());
            rec.push(u8::from(r.resampled).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let d = r.headers()?.iter().filter(|h| h.starts_with("theta_")).count();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |j: usize| -> Result<&str> {
                rec.get(j).ok_or_else(|| Error::Dataset(format!("trajectory row has no column {j}")))
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Dataset(format!("bad float {s:?}: {e}")));
            let k = f(0)?.parse::<usize>().map_err(|e| Error::Dataset(e.to_string()))?;
            let theta = (0..d).map(|j| num(f(1 + j)?)).collect::<Result<Vec<_>>>()?;
            let le = f(d + 2)?;
            rows.push(TrajectoryRow {
                k,
                theta,
                ess: num(f(d + 1)?)?,
                log_evidence: if le.is_empty() { None } else { Some(num(le)?) },
                grad_norm: num(f(d + 3)?)?,
                resampled: f(d + 4)? == "1",
            });
        }
        Ok(Self { rows })
    }
}
