use std::io::Write;
use std::path::Path;

use crate::comm::CommLedger;
use crate::error::{Error, Result};
use crate::problem::format_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 1-based outer epoch.
    pub epoch: usize,
    /// 1-based inner step within the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Train loss at the epoch outputs: index 0 is the starting point and
    /// index `k` the snapshot produced by epoch `k`.
    pub epoch_train_loss: Vec<f64>,
    pub final_x: Vec<f64>,
    pub ledger: CommLedger,
}

impl RunTrace {
    pub const CSV_HEADER: &'static str =
        "k,t,train_loss,test_loss,test_acc,ww_scalars,ws_scalars,sw_scalars,rounds";

    pub fn initial_loss(&self) -> f64 {
        self.epoch_train_loss.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epoch_train_loss.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Relative optimality gap `(F(x̄_k) − F*) / |F*|` per epoch output.
    pub fn epoch_gaps(&self, optimum: f64) -> Vec<f64> {
        let scale = if optimum.abs() > 0.0 { optimum.abs() } else { 1.0 };
        self.epoch_train_loss.iter().map(|l| (l - optimum) / scale).collect()
    }

    /// First epoch whose output is within `threshold` relative gap of `optimum`.
    pub fn epochs_to_gap(&self, optimum: f64, threshold: f64) -> Option<usize> {
        self.epoch_gaps(optimum).iter().position(|g| *g <= threshold)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                format_f64(r.train_loss),
                format_f64(r.test_loss),
                format_f64(r.test_accuracy),
                r.ledger.worker_worker_scalars,
                r.ledger.worker_server_scalars,
                r.ledger.server_worker_scalars,
                r.ledger.parallel_rounds
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
