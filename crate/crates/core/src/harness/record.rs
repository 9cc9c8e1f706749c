use std::io::Write;

use serde::Serialize;

use crate::error::Result;

pub const RECORD_HEADER: &str =
    "epoch,train_loss,train_acc,val_loss,val_acc,test_acc,lr,eff_lr,theta_norm,avg_active,wall_ms";

/// One row per completed epoch. Metrics describe the model the run would
/// return at that point: the averaged weights once averaging is active,
/// otherwise the current iterate. `lr`, `eff_lr` and `theta_norm` always
/// refer to the iterate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    /// 1-based count of completed epochs.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    /// Mean of `lr / ||W||^2` over BN-preceding blocks.
    pub eff_lr: Option<f64>,
    pub theta_norm: f64,
    pub avg_active: bool,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.test_acc,
            self.lr,
            self.eff_lr.map(|v| v.to_string()).unwrap_or_default(),
            self.theta_norm,
            u8::from(self.avg_active),
            self.wall_ms
        )
    }
}

pub fn write_records<W: Write>(records: &[RunRecord], mut out: W) -> Result<()> {
    writeln!(out, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn records_csv(records: &[RunRecord]) -> String {
    let mut buf = Vec::new();
    write_records(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("CSV is ASCII")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let r = RunRecord {
            epoch: 2,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: 0.625,
            val_acc: 0.7,
            test_acc: 0.65,
            lr: 0.001,
            eff_lr: None,
            theta_norm: 4.0,
            avg_active: true,
            wall_ms: 0,
        };
        assert_eq!(r.csv_row(), "2,0.5,0.75,0.625,0.7,0.65,0.001,,4,1,0");
        let csv = records_csv(&[r]);
        assert!(csv.starts_with("epoch,train_loss"));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }
}
