//! Comma-separated report writers. Every report has a header row and LF line
//! endings; floats use the shortest representation that round-trips.

use std::collections::BTreeMap;

use ubimap_core::netsim::NetStats;

/// Renders rows as CSV text.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

/// Two-column `metric,value` table.
pub fn metrics_csv(metrics: &[(&str, String)]) -> String {
    let rows: Vec<Vec<String>> = metrics.iter().map(|(k, v)| vec![k.to_string(), v.clone()]).collect();
    to_csv(&["metric", "value"], &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSample {
    pub t: f64,
    pub robot_id: u16,
    pub error: f64,
}

/// Metrics of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub localization: Vec<LocalizationSample>,
    /// Fraction of camera-visible cells whose fused state matches ground truth.
    pub map_accuracy: f64,
    /// Fraction of free cells seen by at least one camera.
    pub coverage_ratio: f64,
    /// Per camera: rotation error (rad), translation error (m).
    pub calibration_errors: BTreeMap<u32, (f64, f64)>,
    pub stats: NetStats,
    pub server_revision: u32,
    pub client_revisions: BTreeMap<u16, u32>,
}

impl RunReport {
    /// Last localization error of each robot.
    pub fn final_errors(&self) -> BTreeMap<u16, f64> {
        self.localization.iter().map(|s| (s.robot_id, s.error)).collect()
    }

    pub fn localization_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .localization
            .iter()
            .map(|s| vec![s.t.to_string(), s.robot_id.to_string(), s.error.to_string()])
            .collect();
        to_csv(&["t_s", "robot_id", "error_m"], &rows)
    }

    pub fn calibration_csv(&self) -> String {
        calibration_errors_csv(&self.calibration_errors)
    }

    pub fn summary_csv(&self) -> String {
        let mut metrics = vec![
            ("map_accuracy", self.map_accuracy.to_string()),
            ("coverage_ratio", self.coverage_ratio.to_string()),
            ("messages_sent", self.stats.sent.to_string()),
            ("messages_delivered", self.stats.delivered.to_string()),
            ("messages_dropped", self.stats.dropped.to_string()),
            ("messages_stale", self.stats.stale.to_string()),
            ("server_revision", self.server_revision.to_string()),
        ];
        let finals = self.final_errors();
        let names: Vec<(String, String)> = finals
            .iter()
            .map(|(id, e)| (format!("final_error_robot_{id}"), e.to_string()))
            .chain(self.client_revisions.iter().map(|(id, r)| (format!("client_revision_{id}"), r.to_string())))
            .collect();
        metrics.extend(names.iter().map(|(k, v)| (k.as_str(), v.clone())));
        metrics_csv(&metrics)
    }
}

pub fn calibration_errors_csv(errors: &BTreeMap<u32, (f64, f64)>) -> String {
    let rows: Vec<Vec<String>> = errors
        .iter()
        .map(|(id, (r, t))| vec![id.to_string(), r.to_string(), t.to_string()])
        .collect();
    to_csv(&["camera_id", "rotation_error_rad", "translation_error_m"], &rows)
}
