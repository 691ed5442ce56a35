//! Machine-readable run outcome with stable field ordering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;
use crate::schema::EnvironmentDef;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub links: Vec<LinkReport>,
    pub kms: KmsReport,
    pub gateways: Vec<GatewayReport>,
    pub environment: Vec<EnvironmentDef>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkReport {
    pub id: String,
    pub protocol: String,
    pub mean_transmission: f64,
    pub blocks: u64,
    pub aborted_blocks: u64,
    /// Secure bits accumulated over the simulated interval.
    pub key_volume_bits: u64,
    pub skr_bps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secret_fraction_bits_per_symbol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transmission_estimate: Option<f64>,
    /// Estimated channel-input excess noise; for fading links this is the
    /// population-weighted mean over the analyzed sub-channels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess_noise_snu: Option<f64>,
    /// Naive whole-batch estimate on fading links (inflated by the
    /// transmission spread), kept for comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_excess_noise_snu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_key_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tolerable_xi_snu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimized_v_a: Option<OptimizedVa>,
    /// CV rates are Gaussian-equivalent asymptotic bounds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub security_model: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OptimizedVa {
    pub v_a: f64,
    pub key_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KmsReport {
    pub stores: BTreeMap<String, StoreReport>,
    pub ledger: LedgerReport,
    pub relays: Vec<RelayReport>,
    pub combines: Vec<CombineReport>,
    pub bus_mac_failures: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StoreReport {
    pub available: u64,
    pub reserved: u64,
    pub consumed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LedgerReport {
    pub used_blocks: u64,
    pub double_delivery_attempts: u64,
    pub endpoint_mismatches: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelayReport {
    pub id: String,
    pub established: u64,
    pub starved: u64,
    pub delivered_bits: u64,
    pub transcript_bits: u64,
    pub transcript_monobit_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CombineReport {
    pub id: String,
    pub executed: u64,
    pub starved: u64,
    pub out_bits: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GatewayReport {
    pub id: String,
    pub ksid: String,
    pub epochs_consumed: u64,
    pub frames_forwarded: u64,
    pub plaintext_bytes: u64,
    pub decrypt_failures: u64,
    pub replays_rejected: u64,
    pub rekey_alarms: u64,
    pub demo_roundtrip_ok: bool,
    pub state: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" => Ok(ReportFormat::Text),
            other => Err(format!("unknown format {other:?} (expected json or text)")),
        }
    }
}

/// Renders a report with stable ordering; the JSON form is byte-stable for
/// identical runs.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<Vec<u8>, ScenarioError> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Text => Ok(render_text(report).into_bytes()),
    }
}

fn render_text(report: &Report) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {}  seed {}  duration {} s",
        report.scenario, report.seed, report.duration_s
    );
    let _ = writeln!(
        out,
        "{:<12} {:<14} {:>10} {:>12} {:>9} {:>14}",
        "link", "protocol", "blocks", "key bits", "SKR", "QBER / xi"
    );
    for link in &report.links {
        let quality = if let Some(q) = link.qber {
            format!("{:.3}%", q * 100.0)
        } else if let Some(q) = link.qber_z {
            format!("{:.3}%", q * 100.0)
        } else if let Some(xi) = link.excess_noise_snu {
            format!("{xi:.5} snu")
        } else {
            "-".into()
        };
        let _ = writeln!(
            out,
            "{:<12} {:<14} {:>10} {:>12} {:>9} {:>14}",
            link.id,
            link.protocol,
            link.blocks,
            link.key_volume_bits,
            format_rate(link.skr_bps),
            quality
        );
    }
    let _ = writeln!(
        out,
        "kms: {} blocks used, {} double deliveries, {} endpoint mismatches, {} MAC failures",
        report.kms.ledger.used_blocks,
        report.kms.ledger.double_delivery_attempts,
        report.kms.ledger.endpoint_mismatches,
        report.kms.bus_mac_failures
    );
    for relay in &report.kms.relays {
        let _ = writeln!(
            out,
            "relay {}: {} established, {} starved, {} key bits, monobit {}",
            relay.id,
            relay.established,
            relay.starved,
            relay.delivered_bits,
            if relay.transcript_monobit_ok { "ok" } else { "FAIL" }
        );
    }
    for combine in &report.kms.combines {
        let _ = writeln!(
            out,
            "combine {}: {} executed, {} starved, {} key bits",
            combine.id, combine.executed, combine.starved, combine.out_bits
        );
    }
    for gw in &report.gateways {
        let _ = writeln!(
            out,
            "gateway {}: {} epochs, {} frames, {} plaintext bytes, demo {}, state {}",
            gw.id,
            gw.epochs_consumed,
            gw.frames_forwarded,
            gw.plaintext_bytes,
            if gw.demo_roundtrip_ok { "ok" } else { "FAIL" },
            gw.state
        );
    }
    for warning in &report.warnings {
        let _ = writeln!(out, "warning: {warning}");
    }
    out
}

fn format_rate(bps: f64) -> String {
    if bps >= 1e6 {
        format!("{:.2} Mb/s", bps / 1e6)
    } else if bps >= 1e3 {
        format!("{:.2} kb/s", bps / 1e3)
    } else {
        format!("{bps:.1} b/s")
    }
}
