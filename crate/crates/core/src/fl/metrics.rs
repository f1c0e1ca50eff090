//! Round metrics as CSV rows.
//!
//! One row per client followed by one `SERVER` row per round:
//!
//! ```text
//! round,client_id,loss,accuracy,samples,epoch_wall_ms,global_accuracy
//! ```
//!
//! Client rows carry the mean training objective, the local-window
//! validation accuracy and the client model's accuracy on the whole
//! validation set. The server row carries validation loss and accuracy
//! (repeated in `global_accuracy`) and the aggregated sample count. Fields
//! that were not measured, or belong to a failed client, are empty.
//! `epoch_wall_ms` is `0` unless wall-clock recording is enabled, so reruns
//! stay byte-identical.

use std::fmt::Write;

use super::RoundReport;

pub const METRICS_HEADER: &str = "round,client_id,loss,accuracy,samples,epoch_wall_ms,global_accuracy";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_rows(report: &RoundReport, wall_clock: bool) -> String {
    let ms = |v: f64| if wall_clock { format!("{v:.3}") } else { "0".into() };
    let mut s = String::new();
    for c in &report.clients {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            report.round,
            c.client_id,
            opt(c.loss),
            opt(c.local_accuracy),
            if c.error.is_some() { 0 } else { c.samples },
            ms(c.wall_ms),
            opt(c.global_accuracy)
        );
    }
    let _ = writeln!(
        s,
        "{},SERVER,{},{},{},{},{}",
        report.round,
        report.server_loss,
        report.server_accuracy,
        report.aggregated_samples,
        ms(report.wall_ms),
        report.server_accuracy
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::ClientReport;

    #[test]
    fn row_layout() {
        let r = RoundReport {
            round: 3,
            clients: vec![ClientReport {
                client_id: 0,
                loss: Some(0.5),
                local_accuracy: Some(0.25),
                global_accuracy: None,
                samples: 40,
                steps: 2,
                ala_iterations: None,
                wall_ms: 12.5,
                error: None,
            }],
            server_loss: 1.5,
            server_accuracy: 0.125,
            aggregated_samples: 40,
            wall_ms: 20.0,
            seed: 0,
        };
        assert_eq!(metrics_rows(&r, false), "3,0,0.5,0.25,40,0,\n3,SERVER,1.5,0.125,40,0,0.125\n");
        assert!(metrics_rows(&r, true).starts_with("3,0,0.5,0.25,40,12.500,"));
    }
}
