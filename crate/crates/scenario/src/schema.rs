//! Scenario file schema: strict JSON (unknown fields rejected) with
//! semantic validation producing JSON-pointer paths.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub nodes: Vec<NodeDef>,
    pub links: Vec<LinkDef>,
    #[serde(default)]
    pub relays: Vec<RelayDef>,
    #[serde(default)]
    pub combines: Vec<CombineDef>,
    #[serde(default)]
    pub external_sources: Vec<ExternalDef>,
    #[serde(default)]
    pub gateways: Vec<GatewayDef>,
    #[serde(default)]
    pub environment: Vec<EnvironmentDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinkDef {
    pub id: String,
    pub a: String,
    pub b: String,
    pub segments: Vec<SegmentDef>,
    pub protocol: ProtocolDef,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SegmentDef {
    pub kind: SegmentKindDef,
    #[serde(default)]
    pub length_m: f64,
    pub loss_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fading: Option<FadingDef>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKindDef {
    Fiber,
    Fso,
    Component,
}

/// Fading statistics: either a direct scintillation index, or a
/// refractive-index structure constant plus wavelength mapped through the
/// plane-wave Rytov variance (saturated at 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FadingDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scintillation_index: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cn2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelength_m: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolDef {
    #[serde(rename = "bb84_1decoy")]
    Bb84OneDecoy(Bb84Def),
    Bbm92(Bbm92Def),
    HdTimebin(HdDef),
    CvGaussian(CvDef),
    CvFading(CvFadingDef),
}

impl ProtocolDef {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolDef::Bb84OneDecoy(_) => "bb84_1decoy",
            ProtocolDef::Bbm92(_) => "bbm92",
            ProtocolDef::HdTimebin(_) => "hd_timebin",
            ProtocolDef::CvGaussian(_) => "cv_gaussian",
            ProtocolDef::CvFading(_) => "cv_fading",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorDef {
    pub efficiency: f64,
    #[serde(default)]
    pub dark_count_prob: f64,
    #[serde(default)]
    pub dead_time_s: f64,
    #[serde(default)]
    pub jitter_fwhm_s: f64,
}

fn default_mu1() -> f64 {
    0.47
}
fn default_mu2() -> f64 {
    0.17
}
fn default_half() -> f64 {
    0.5
}
fn default_block_sifted() -> u64 {
    50_000
}
fn default_eps_sec_bb84() -> f64 {
    1e-9
}
fn default_eps_cor_bb84() -> f64 {
    1e-15
}
fn default_f_ec() -> f64 {
    1.16
}
fn default_detectors_z() -> u32 {
    1
}
fn default_detectors_x() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Bb84Def {
    #[serde(default = "default_mu1")]
    pub mu1: f64,
    #[serde(default = "default_mu2")]
    pub mu2: f64,
    #[serde(default = "default_half")]
    pub p_mu1: f64,
    #[serde(default = "default_half")]
    pub p_z_alice: f64,
    #[serde(default = "default_half")]
    pub p_z_bob: f64,
    pub pulse_rate_hz: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub detector: DetectorDef,
    #[serde(default = "default_detectors_z")]
    pub detectors_z: u32,
    #[serde(default = "default_detectors_x")]
    pub detectors_x: u32,
    #[serde(default = "default_block_sifted")]
    pub block_size_sifted_z: u64,
    #[serde(default = "default_eps_sec_bb84")]
    pub eps_sec: f64,
    #[serde(default = "default_eps_cor_bb84")]
    pub eps_cor: f64,
    #[serde(default = "default_f_ec")]
    pub f_ec: f64,
}

fn default_block_coinc() -> u64 {
    160_000
}
fn default_eps_bbm92() -> f64 {
    1e-10
}
fn default_q_tol() -> f64 {
    0.10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Bbm92Def {
    pub pair_rate_hz: f64,
    pub visibility: f64,
    #[serde(default)]
    pub accidental_fraction: f64,
    pub det_a: DetectorDef,
    pub det_b: DetectorDef,
    /// Source-to-Alice arm; the link's own segments are the source-to-Bob
    /// arm (the pair source sits beside Alice).
    #[serde(default)]
    pub arm_a: Vec<SegmentDef>,
    #[serde(default = "default_block_coinc")]
    pub block_size: u64,
    /// Fraction of each block sacrificed for parameter estimation.
    #[serde(default = "default_half")]
    pub pe_fraction: f64,
    #[serde(default = "default_eps_bbm92")]
    pub eps_sec: f64,
    #[serde(default = "default_eps_bbm92")]
    pub eps_cor: f64,
    #[serde(default = "default_q_tol")]
    pub q_tol: f64,
    #[serde(default = "default_f_ec")]
    pub f_ec: f64,
}

fn default_dimension() -> u32 {
    4
}
fn default_block_duration() -> f64 {
    120.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HdDef {
    #[serde(default = "default_dimension")]
    pub dimension: u32,
    pub sifted_rate_bps: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    #[serde(default = "default_block_duration")]
    pub block_duration_s: f64,
    /// Interferometer lock-in dead interval at the start of each block.
    #[serde(default)]
    pub lock_in_dead_s: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModulationDef {
    Gaussian,
    Qpsk,
}

fn default_v_a() -> f64 {
    2.0
}
fn default_v_el() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    0.95
}
fn default_batch() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CvDef {
    pub modulation: ModulationDef,
    /// Modulation variance in snu (per-quadrature variance is half this).
    #[serde(default = "default_v_a")]
    pub v_a: f64,
    pub xi: f64,
    pub detector_efficiency: f64,
    #[serde(default = "default_v_el")]
    pub v_el: f64,
    pub symbol_rate_hz: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch")]
    pub batch_symbols: u64,
    /// Optional [lo, hi] range: also report the key fraction maximized
    /// over the per-quadrature modulation variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize_v_a: Option<[f64; 2]>,
}

fn default_bin_width() -> f64 {
    0.009
}
fn default_top_bins() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CvFadingDef {
    #[serde(flatten)]
    pub cv: CvDef,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    #[serde(default = "default_top_bins")]
    pub top_bins: u32,
}

fn default_relay_bits() -> u64 {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RelayDef {
    pub id: String,
    pub hops: Vec<String>,
    #[serde(default = "default_relay_bits")]
    pub n_bits: u64,
    pub period_s: f64,
}

fn default_out_len() -> u32 {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CombineDef {
    pub id: String,
    pub a: String,
    pub b: String,
    pub inputs: Vec<CombineInputDef>,
    pub label: String,
    #[serde(default = "default_out_len")]
    pub out_len_bits: u32,
    pub period_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum CombineInputDef {
    /// A QKD link directly connecting the recipe endpoints.
    Link(String),
    /// End-to-end keys previously derived between the endpoints.
    Pair,
    /// A registered external source id.
    External(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExternalDef {
    pub id: String,
    pub seed: u64,
}

fn default_rekey() -> f64 {
    120.0
}
fn default_chunk_bits() -> u32 {
    256
}
fn default_demo_bytes() -> u64 {
    65_536
}
fn default_frames_per_epoch() -> u32 {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GatewayDef {
    pub id: String,
    pub a: String,
    pub b: String,
    #[serde(default = "default_rekey")]
    pub rekey_interval_s: f64,
    #[serde(default = "default_chunk_bits")]
    pub key_chunk_bits: u32,
    /// Size of the file-server stand-in payload round-tripped at start.
    #[serde(default = "default_demo_bytes")]
    pub demo_payload_bytes: u64,
    /// Soak frames exchanged per direction per epoch.
    #[serde(default = "default_frames_per_epoch")]
    pub frames_per_epoch: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentDef {
    pub timestamp_s: f64,
    pub cn2: f64,
    pub solar_irradiance_w_m2: f64,
}

/// Parses and validates a scenario from JSON bytes.
pub fn parse_scenario(bytes: &[u8]) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario =
        serde_json::from_slice(bytes).map_err(|e| ScenarioError::Schema(e.to_string()))?;
    validate(&scenario)?;
    Ok(scenario)
}

pub fn load_scenario(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
    let bytes = std::fs::read(path)?;
    parse_scenario(&bytes)
}

fn validate(s: &Scenario) -> Result<(), ScenarioError> {
    if !(s.duration_s >= 0.0) {
        return Err(ScenarioError::validation(
            "/duration_s",
            "must be non-negative",
        ));
    }
    let mut nodes = BTreeSet::new();
    for (i, node) in s.nodes.iter().enumerate() {
        if !nodes.insert(node.id.as_str()) {
            return Err(ScenarioError::validation(
                format!("/nodes/{i}/id"),
                format!("duplicate node id {:?}", node.id),
            ));
        }
    }
    let mut links = BTreeSet::new();
    for (i, link) in s.links.iter().enumerate() {
        if !links.insert(link.id.as_str()) {
            return Err(ScenarioError::validation(
                format!("/links/{i}/id"),
                format!("duplicate link id {:?}", link.id),
            ));
        }
        for (field, node) in [("a", &link.a), ("b", &link.b)] {
            if !nodes.contains(node.as_str()) {
                return Err(ScenarioError::validation(
                    format!("/links/{i}/{field}"),
                    format!("unknown node id {node:?}"),
                ));
            }
        }
        if link.a == link.b {
            return Err(ScenarioError::validation(
                format!("/links/{i}/b"),
                "link endpoints must differ",
            ));
        }
        validate_segments(&link.segments, &format!("/links/{i}/segments"))?;
        if let ProtocolDef::Bbm92(def) = &link.protocol {
            validate_segments(&def.arm_a, &format!("/links/{i}/protocol/arm_a"))?;
        }
        if matches!(link.protocol, ProtocolDef::CvFading(_)) {
            let fades = link.segments.iter().any(|seg| seg.fading.is_some());
            if !fades {
                return Err(ScenarioError::validation(
                    format!("/links/{i}/protocol"),
                    "cv_fading requires a fading segment on the link",
                ));
            }
        }
    }
    for (i, relay) in s.relays.iter().enumerate() {
        if relay.hops.len() < 2 {
            return Err(ScenarioError::validation(
                format!("/relays/{i}/hops"),
                "relay paths need at least two hops",
            ));
        }
        for (j, hop) in relay.hops.iter().enumerate() {
            if !links.contains(hop.as_str()) {
                return Err(ScenarioError::validation(
                    format!("/relays/{i}/hops/{j}"),
                    format!("unknown link id {hop:?}"),
                ));
            }
        }
        if !(relay.period_s > 0.0) {
            return Err(ScenarioError::validation(
                format!("/relays/{i}/period_s"),
                "must be positive",
            ));
        }
    }
    let externals: BTreeSet<&str> = s.external_sources.iter().map(|e| e.id.as_str()).collect();
    for (i, combine) in s.combines.iter().enumerate() {
        for (field, node) in [("a", &combine.a), ("b", &combine.b)] {
            if !nodes.contains(node.as_str()) {
                return Err(ScenarioError::validation(
                    format!("/combines/{i}/{field}"),
                    format!("unknown node id {node:?}"),
                ));
            }
        }
        if combine.inputs.is_empty() {
            return Err(ScenarioError::validation(
                format!("/combines/{i}/inputs"),
                "at least one input required",
            ));
        }
        for (j, input) in combine.inputs.iter().enumerate() {
            match input {
                CombineInputDef::Link(l) if !links.contains(l.as_str()) => {
                    return Err(ScenarioError::validation(
                        format!("/combines/{i}/inputs/{j}"),
                        format!("unknown link id {l:?}"),
                    ));
                }
                CombineInputDef::External(e) if !externals.contains(e.as_str()) => {
                    return Err(ScenarioError::validation(
                        format!("/combines/{i}/inputs/{j}"),
                        format!("unknown external source {e:?}"),
                    ));
                }
                _ => {}
            }
        }
        if !(combine.period_s > 0.0) {
            return Err(ScenarioError::validation(
                format!("/combines/{i}/period_s"),
                "must be positive",
            ));
        }
    }
    for (i, gw) in s.gateways.iter().enumerate() {
        for (field, node) in [("a", &gw.a), ("b", &gw.b)] {
            if !nodes.contains(node.as_str()) {
                return Err(ScenarioError::validation(
                    format!("/gateways/{i}/{field}"),
                    format!("unknown node id {node:?}"),
                ));
            }
        }
        if gw.key_chunk_bits % 8 != 0 || gw.key_chunk_bits == 0 {
            return Err(ScenarioError::validation(
                format!("/gateways/{i}/key_chunk_bits"),
                "must be a positive multiple of 8",
            ));
        }
        if !(gw.rekey_interval_s > 0.0) {
            return Err(ScenarioError::validation(
                format!("/gateways/{i}/rekey_interval_s"),
                "must be positive",
            ));
        }
    }
    Ok(())
}

fn validate_segments(segments: &[SegmentDef], pointer: &str) -> Result<(), ScenarioError> {
    for (j, seg) in segments.iter().enumerate() {
        if !(seg.loss_db >= 0.0) {
            return Err(ScenarioError::validation(
                format!("{pointer}/{j}/loss_db"),
                "segment loss must be non-negative",
            ));
        }
        if let Some(fading) = &seg.fading {
            if seg.kind != SegmentKindDef::Fso {
                return Err(ScenarioError::validation(
                    format!("{pointer}/{j}/fading"),
                    "fading is only valid on fso segments",
                ));
            }
            match (fading.scintillation_index, fading.cn2, fading.wavelength_m) {
                (Some(si), _, _) if si >= 0.0 => {}
                (Some(_), _, _) => {
                    return Err(ScenarioError::validation(
                        format!("{pointer}/{j}/fading/scintillation_index"),
                        "must be non-negative",
                    ));
                }
                (None, Some(cn2), Some(wl)) if cn2 > 0.0 && wl > 0.0 => {}
                _ => {
                    return Err(ScenarioError::validation(
                        format!("{pointer}/{j}/fading"),
                        "set scintillation_index, or cn2 together with wavelength_m",
                    ));
                }
            }
        }
    }
    Ok(())
}
