//! CSV history and JSON run metadata.

use std::fmt::Write as _;

use serde::Serialize;
use sha1::{Digest, Sha1};

use crate::trainer::HistoryRow;

pub const HISTORY_HEADER: &str = "epoch,train_ce,val_ce,val_acc,mean_tb_loss,mean_abs_logZ,zero_mask_freq";

/// History as CSV with a header row and `\n` line endings. Floats use the
/// shortest representation that parses back to the same value.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_ce, r.val_ce, r.val_acc, r.mean_tb_loss, r.mean_abs_log_z, r.zero_mask_freq
        );
    }
    out
}

/// Hash git assigns to a blob with these contents.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub method: String,
    pub config: String,
    pub config_hash: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    pub created_unix: u64,
}

impl RunMetadata {
    pub fn new(config_text: &str, seed: u64, method: &str, history: &[HistoryRow], best_epoch: usize) -> Self {
        let best_val_acc = history
            .iter()
            .find(|r| r.epoch == best_epoch)
            .map_or(f64::NAN, |r| r.val_acc);
        Self {
            seed,
            method: method.to_string(),
            config: config_text.to_string(),
            config_hash: git_blob_hash(config_text.as_bytes()),
            best_epoch,
            epochs_run: history.len(),
            best_val_acc,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_hashes() {
        assert_eq!(git_blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
        assert_eq!(git_blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    #[test]
    fn csv_layout() {
        let row = HistoryRow {
            epoch: 1,
            train_ce: 0.5,
            val_ce: 0.25,
            val_acc: 1.0,
            mean_tb_loss: 0.0,
            mean_abs_log_z: 0.1,
            zero_mask_freq: 0.0,
        };
        assert_eq!(
            history_csv(&[row]),
            "epoch,train_ce,val_ce,val_acc,mean_tb_loss,mean_abs_logZ,zero_mask_freq\n1,0.5,0.25,1,0,0.1,0\n"
        );
        let parsed: f64 = "0.1".parse().unwrap();
        assert_eq!(parsed.to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn metadata_json() {
        let m = RunMetadata::new("seed = 3\n", 3, "none", &[], 0);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["config_hash"], git_blob_hash(b"seed = 3\n"));
    }
}
