//! Per-round metrics and their CSV schema.

use crate::error::{Result, SparkError};

/// One CSV row per round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Holdout accuracy of the uniform average of all client weights.
    pub aggregated_model_accuracy: f64,
    /// Mean of each client's own holdout accuracy.
    pub mean_client_accuracy: f64,
    /// Mean training cross-entropy over clients (on their round batch).
    pub mean_train_loss: f64,
    /// Bytes over all directed messages this round.
    pub total_bytes_sent: u64,
    pub per_client_bytes: Vec<u64>,
    pub wall_time_ms: f64,
    pub graph_connected: bool,
    /// Mean selected evolution step over clients.
    pub mean_t_star: f64,
    /// Mean L2 norm of the applied parameter update over clients.
    pub mean_update_norm: f64,
    /// `||grad L(w_bar)||^2` on a fixed probe batch, when diagnostics are on.
    pub grad_norm_sq: Option<f64>,
}

pub const CSV_HEADER: &str =
    "round,agg_acc,client_acc,train_loss,bytes,cum_bytes,connected,wall_ms,t_star,update_norm,grad_norm_sq";

/// Serializes a metrics series with a running byte total.
pub fn to_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut cum: u64 = 0;
    for m in rows {
        cum += m.total_bytes_sent;
        let grad = m
            .grad_norm_sq
            .map(|g| format!("{g:.12e}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.3},{:.2},{:.6e},{}\n",
            m.round,
            m.aggregated_model_accuracy,
            m.mean_client_accuracy,
            m.mean_train_loss,
            m.total_bytes_sent,
            cum,
            m.graph_connected,
            m.wall_time_ms,
            m.mean_t_star,
            m.mean_update_norm,
            grad
        ));
    }
    out
}

/// Minimal reader for the columns `report` needs.
#[derive(Clone, Debug)]
pub struct CsvRow {
    pub round: usize,
    pub agg_acc: f64,
    pub client_acc: f64,
    pub bytes: u64,
    pub cum_bytes: u64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SparkError::parse(0, "empty metrics CSV".to_string()))?;
    if header != CSV_HEADER {
        return Err(SparkError::parse(0, format!("unexpected CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 8 {
            return Err(SparkError::parse(i + 1, format!("short CSV row {line:?}")));
        }
        let bad = |e: &dyn std::fmt::Display| SparkError::parse(i + 1, format!("row {line:?}: {e}"));
        rows.push(CsvRow {
            round: fields[0].parse().map_err(|e| bad(&e))?,
            agg_acc: fields[1].parse().map_err(|e| bad(&e))?,
            client_acc: fields[2].parse().map_err(|e| bad(&e))?,
            bytes: fields[4].parse().map_err(|e| bad(&e))?,
            cum_bytes: fields[5].parse().map_err(|e| bad(&e))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, acc: f64, bytes: u64) -> RoundMetrics {
        RoundMetrics {
            round,
            aggregated_model_accuracy: acc,
            mean_client_accuracy: acc - 0.01,
            mean_train_loss: 1.0,
            total_bytes_sent: bytes,
            per_client_bytes: vec![bytes],
            wall_time_ms: 1.5,
            graph_connected: true,
            mean_t_star: 3.0,
            mean_update_norm: 0.1,
            grad_norm_sq: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(1, 0.5, 100), row(2, 0.7, 100)];
        let text = to_csv(&rows);
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].round, 1);
        assert!((parsed[1].agg_acc - 0.7).abs() < 1e-9);
        assert_eq!(parsed[1].cum_bytes, 200);
    }

    #[test]
    fn empty_series_is_header_only() {
        let text = to_csv(&[]);
        assert_eq!(text.trim(), CSV_HEADER);
        assert!(parse_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_csv("nope\n1,2,3").is_err());
    }
}
