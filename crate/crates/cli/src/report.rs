//! CSV emission. Numbers use Rust's shortest round-trip formatting, so the
//! same inputs always give byte-identical files.

use std::io::Write;
use std::path::Path;

use detalloc::montecarlo::{GridPoint, McEstimate};
use detalloc::scenario::mw_to_dbm;

use crate::Failure;

pub struct AllocationRow {
    pub p_tot_mw: f64,
    pub allocator: &'static str,
    pub solver: &'static str,
    pub certified: bool,
    pub powers: Vec<f64>,
    pub approx_j: f64,
    pub pd_fc: Option<McEstimate>,
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    /// Rows are sorted by `(p_tot, allocator)`.
    pub fn allocation(k: usize, with_mc: bool, mut rows: Vec<AllocationRow>) -> Table {
        rows.sort_by(|a, b| a.p_tot_mw.total_cmp(&b.p_tot_mw).then(a.allocator.cmp(b.allocator)));
        let mut header: Vec<String> = ["p_tot_dBm", "p_tot_mW", "allocator", "solver", "certified"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=k).map(|j| format!("p{j}_mW")));
        header.extend((1..=k).map(|j| format!("p{j}_pct")));
        header.push("approx_j".into());
        if with_mc {
            header.extend(["pd_fc".to_string(), "pd_fc_stderr".into(), "mc_runs".into(), "seed".into()]);
        }
        let rows = rows
            .into_iter()
            .map(|r| {
                let mut out = vec![
                    round_dbm(mw_to_dbm(r.p_tot_mw)),
                    r.p_tot_mw.to_string(),
                    r.allocator.to_string(),
                    r.solver.to_string(),
                    r.certified.to_string(),
                ];
                out.extend(r.powers.iter().map(|p| p.to_string()));
                out.extend(r.powers.iter().map(|p| (100.0 * p / r.p_tot_mw).to_string()));
                out.push(r.approx_j.to_string());
                if let Some(e) = r.pd_fc {
                    out.extend([e.value.to_string(), e.stderr.to_string(), e.n_runs.to_string(), e.seed.to_string()]);
                } else if with_mc {
                    out.extend(std::iter::repeat_n(String::new(), 4));
                }
                out
            })
            .collect();
        Table { header, rows }
    }

    pub fn surface(points: &[GridPoint]) -> Table {
        Table {
            header: vec!["p1_mW".into(), "p2_mW".into(), "value".into()],
            rows: points
                .iter()
                .map(|p| vec![p.p1.to_string(), p.p2.to_string(), p.value.to_string()])
                .collect(),
        }
    }

    fn emit<W: Write>(&self, w: W) -> Result<(), Failure> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&self.header)?;
        for row in &self.rows {
            csv.write_record(row)?;
        }
        csv.flush().map_err(|e| Failure::Io(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let file = std::fs::File::create(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        self.emit(file)
    }

    pub fn write_stdout(&self) -> Result<(), Failure> {
        self.emit(std::io::stdout().lock())
    }
}

/// dBm rounded to 1e-9 so budgets given in dBm print as typed.
fn round_dbm(x: f64) -> String {
    ((x * 1e9).round() / 1e9).to_string()
}
