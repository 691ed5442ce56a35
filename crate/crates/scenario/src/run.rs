//! Deterministic orchestration: channels -> session simulators -> key-rate
//! engines -> key management -> gateways, then report assembly.
//!
//! Every random stream is derived from the scenario seed and a stable
//! label (`link`, block index, ...), so links can simulate on parallel
//! threads and still produce byte-identical reports.

use std::sync::{Arc, Mutex};

use qkdsim_core::channel::{
    bin_transmissions, rytov_variance, scintillation_index_from_rytov, ChannelSegment,
    CompositeLink, ScintillationParams, SegmentKind,
};
use qkdsim_core::keyrate::cv::{
    estimate_t_xi, fading_key_fraction, gaussian_key_fraction, max_tolerable_xi,
    weighted_excess_noise, BinEstimate, CvRateParams, Detection, MIN_ESTIMATION_SYMBOLS,
};
use qkdsim_core::keyrate::dv::{
    bbm92_key_length, hd_secret_fraction, onedecoy_key_length, Bbm92Params, OneDecoyParams,
};
use qkdsim_core::rng::StreamRng;
use qkdsim_core::sim::{
    expected_cell_counts, simulate_cv_batch, simulate_decoy_block, simulate_pair_block,
    split_pair_block, Basis, CvBatch, CvConfig, CvModulation, DecoyConfig, DetectorModel,
    PairSourceModel,
};
use qkdsim_gateway::{establish_pair, TunnelConfig, TunnelError, TunnelState, MAGIC};
use qkdsim_kms::{
    monobit_within_4_sigma, CombineRecipe, KeyId, KeySource, KmsClient, KmsConfig, KmsNetwork,
    LinkId, NodeId, Qos, RelayPath, SharedNetwork,
};

use crate::error::ScenarioError;
use crate::report::{
    CombineReport, GatewayReport, KmsReport, LedgerReport, LinkReport, OptimizedVa, RelayReport,
    Report, StoreReport,
};
use crate::schema::{
    Bb84Def, Bbm92Def, CombineInputDef, CvDef, DetectorDef, GatewayDef, HdDef, LinkDef,
    ModulationDef, ProtocolDef, Scenario, SegmentDef, SegmentKindDef,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Route the gateway demo payload through real loopback sockets
    /// instead of the in-process transport.
    pub real_sockets: bool,
}

struct LinkOutcome {
    report: LinkReport,
    /// Secret key blocks to push into both endpoint stores, in production
    /// order, with their creation timestamps.
    keys: Vec<(Vec<u8>, f64)>,
    warnings: Vec<String>,
}

pub fn run(scenario: &Scenario) -> Result<Report, ScenarioError> {
    run_with(scenario, &RunOptions::default())
}

pub fn run_with(scenario: &Scenario, options: &RunOptions) -> Result<Report, ScenarioError> {
    run_with_network(scenario, options).map(|(report, _)| report)
}

/// Like [`run_with`], additionally handing back the populated
/// key-management network (for serving key delivery after the run).
pub fn run_with_network(
    scenario: &Scenario,
    options: &RunOptions,
) -> Result<(Report, SharedNetwork), ScenarioError> {
    let master = StreamRng::new(scenario.seed);
    let links_rng = master.derive("links");

    // ---- quantum phase: links simulate independently, in parallel ------
    let mut outcomes: Vec<Option<Result<LinkOutcome, ScenarioError>>> =
        (0..scenario.links.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for link in &scenario.links {
            let rng = links_rng.derive(&link.id);
            let duration = scenario.duration_s;
            handles.push(scope.spawn(move || simulate_link(link, duration, rng)));
        }
        for (slot, handle) in outcomes.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("link simulation thread"));
        }
    });

    let mut link_reports = Vec::new();
    let mut link_keys: Vec<Vec<(Vec<u8>, f64)>> = Vec::new();
    let mut warnings = Vec::new();
    for (link, outcome) in scenario.links.iter().zip(outcomes) {
        let outcome = outcome
            .expect("joined")
            .map_err(|e| ScenarioError::LinkRuntime {
                link: link.id.clone(),
                message: e.to_string(),
            })?;
        if outcome.report.mean_transmission > 1.0 {
            warnings.push(format!(
                "link {} has net gain (mean transmission {:.4} > 1)",
                link.id, outcome.report.mean_transmission
            ));
        }
        link_reports.push(outcome.report);
        link_keys.push(outcome.keys);
        warnings.extend(outcome.warnings);
    }

    // ---- key-management phase ------------------------------------------
    let mut net = KmsNetwork::new(KmsConfig::default())
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    for node in &scenario.nodes {
        net.add_node(NodeId::from(node.id.as_str()))
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    for link in &scenario.links {
        net.add_link(
            LinkId::from(link.id.as_str()),
            NodeId::from(link.a.as_str()),
            NodeId::from(link.b.as_str()),
        )
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    for external in &scenario.external_sources {
        net.register_external(external.id.as_str(), external.seed);
    }

    let keys_rng = master.derive("key-ids");
    for (link, keys) in scenario.links.iter().zip(&link_keys) {
        let mut id_rng = keys_rng.derive(&link.id);
        for (bytes, created_at) in keys {
            let mut id = [0u8; 16];
            id_rng.fill(&mut id);
            net.push_key(
                &LinkId::from(link.id.as_str()),
                bytes.clone(),
                KeyId(id),
                *created_at,
            )
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        }
    }

    // relays fire on their periods across the simulated interval
    let mut relay_reports = Vec::new();
    for relay in &scenario.relays {
        let path = build_relay_path(&net, relay)?;
        let events = (scenario.duration_s / relay.period_s).floor() as u64;
        let mut established = 0;
        let mut starved = 0;
        let before = net.relay_transcript().len();
        for event in 0..events {
            let now = (event + 1) as f64 * relay.period_s;
            match net.xor_relay_establish(&path, relay.n_bits, now) {
                Ok(_) => established += 1,
                Err(qkdsim_kms::KmsError::RelayStarvation(hop)) => {
                    starved += 1;
                    warnings.push(format!(
                        "relay {} event {} starved on hop {}",
                        relay.id, event, hop
                    ));
                }
                Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
            }
        }
        let transcript = &net.relay_transcript()[before..];
        relay_reports.push(RelayReport {
            id: relay.id.clone(),
            established,
            starved,
            delivered_bits: established * relay.n_bits,
            transcript_bits: transcript.len() as u64 * 8,
            transcript_monobit_ok: monobit_within_4_sigma(transcript),
        });
    }

    let mut combine_reports = Vec::new();
    for combine in &scenario.combines {
        let recipe = CombineRecipe {
            id: combine.id.clone(),
            endpoints: (
                NodeId::from(combine.a.as_str()),
                NodeId::from(combine.b.as_str()),
            ),
            inputs: combine
                .inputs
                .iter()
                .map(|input| match input {
                    CombineInputDef::Link(l) => KeySource::QkdLink(LinkId::from(l.as_str())),
                    CombineInputDef::Pair => KeySource::Pair,
                    CombineInputDef::External(e) => KeySource::External(e.clone()),
                })
                .collect(),
            label: combine.label.clone(),
            out_len: combine.out_len_bits,
        };
        let events = (scenario.duration_s / combine.period_s).floor() as u64;
        let mut executed = 0;
        let mut starved = 0;
        for event in 0..events {
            let now = (event + 1) as f64 * combine.period_s;
            match net.execute_combine(&recipe, now) {
                Ok(_) => executed += 1,
                Err(qkdsim_kms::KmsError::InsufficientKeyMaterial { scope, .. }) => {
                    starved += 1;
                    warnings.push(format!(
                        "combine {} event {} starved on {}",
                        combine.id, event, scope
                    ));
                }
                Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
            }
        }
        combine_reports.push(CombineReport {
            id: combine.id.clone(),
            executed,
            starved,
            out_bits: executed * combine.out_len_bits as u64,
        });
    }

    // ---- gateway phase ---------------------------------------------------
    let shared: SharedNetwork = Arc::new(Mutex::new(net));
    let mut gateway_reports = Vec::new();
    if scenario.duration_s > 0.0 {
        for gw in &scenario.gateways {
            let rng = master.derive("gateway").derive(&gw.id);
            gateway_reports.push(run_gateway(gw, &shared, scenario.duration_s, rng, options)?);
        }
    }

    let kms_report = {
        let net = shared.lock().expect("network lock");
        let stores = net
            .store_counts()
            .into_iter()
            .map(|(scope, c)| {
                (
                    scope,
                    StoreReport {
                        available: c.available,
                        reserved: c.reserved,
                        consumed: c.consumed,
                    },
                )
            })
            .collect();
        let ledger = net.ledger_stats();
        KmsReport {
            stores,
            ledger: LedgerReport {
                used_blocks: ledger.used_blocks,
                double_delivery_attempts: ledger.double_delivery_attempts,
                endpoint_mismatches: ledger.endpoint_mismatches,
            },
            relays: relay_reports,
            combines: combine_reports,
            bus_mac_failures: net.bus_mac_failures(),
        }
    };

    let report = Report {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        duration_s: scenario.duration_s,
        links: link_reports,
        kms: kms_report,
        gateways: gateway_reports,
        environment: scenario.environment.clone(),
        warnings,
    };
    Ok((report, shared))
}

// ---- channel construction -------------------------------------------------

fn build_segment(def: &SegmentDef) -> Result<ChannelSegment, ScenarioError> {
    let mut segment = match def.kind {
        SegmentKindDef::Fiber => ChannelSegment::fiber(def.length_m, def.loss_db),
        SegmentKindDef::Component => {
            let mut seg = ChannelSegment::component(def.loss_db);
            seg.length = def.length_m;
            seg.kind = SegmentKind::Component;
            seg
        }
        SegmentKindDef::Fso => ChannelSegment::fso(def.length_m, def.loss_db),
    };
    if let Some(fading) = &def.fading {
        let sigma = match fading.scintillation_index {
            Some(si) => si,
            None => {
                let rytov = rytov_variance(&ScintillationParams {
                    cn2: fading.cn2.expect("validated"),
                    wavelength: fading.wavelength_m.expect("validated"),
                    path_length: def.length_m,
                })
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
                scintillation_index_from_rytov(rytov)
            }
        };
        segment = ChannelSegment::fso_fading(def.length_m, def.loss_db, sigma)
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    Ok(segment)
}

fn build_link(id: &str, segments: &[SegmentDef]) -> Result<CompositeLink, ScenarioError> {
    let segments = segments
        .iter()
        .map(build_segment)
        .collect::<Result<Vec<_>, _>>()?;
    CompositeLink::new(id, segments).map_err(|e| ScenarioError::Runtime(e.to_string()))
}

fn build_detector(def: &DetectorDef) -> DetectorModel {
    DetectorModel {
        efficiency: def.efficiency,
        dark_count_prob: def.dark_count_prob,
        dead_time: def.dead_time_s,
        jitter_fwhm: def.jitter_fwhm_s,
    }
}

fn build_relay_path(
    net: &KmsNetwork,
    def: &crate::schema::RelayDef,
) -> Result<RelayPath, ScenarioError> {
    let hops: Vec<LinkId> = def.hops.iter().map(|h| LinkId::from(h.as_str())).collect();
    // derive endpoints and interior nodes from the topology
    let mut path = RelayPath {
        id: def.id.clone(),
        hops: hops.clone(),
        endpoints: (NodeId::from(""), NodeId::from("")),
        relay_nodes: Vec::new(),
    };
    let first = net
        .link_endpoints(&hops[0])
        .ok_or_else(|| ScenarioError::Runtime(format!("unknown link {}", hops[0])))?
        .clone();
    let second = net
        .link_endpoints(&hops[1])
        .ok_or_else(|| ScenarioError::Runtime(format!("unknown link {}", hops[1])))?
        .clone();
    let shared = if first.0 == second.0 || first.0 == second.1 {
        first.0.clone()
    } else {
        first.1.clone()
    };
    let start = if first.0 == shared { first.1 } else { first.0 };
    let mut interior = Vec::new();
    let mut junction = shared;
    let mut prev = net.link_endpoints(&hops[0]).expect("checked").clone();
    for pair in hops.windows(2) {
        let next = net
            .link_endpoints(&pair[1])
            .ok_or_else(|| ScenarioError::Runtime(format!("unknown link {}", pair[1])))?
            .clone();
        let s = if prev.0 == next.0 || prev.0 == next.1 {
            prev.0.clone()
        } else {
            prev.1.clone()
        };
        interior.push(s.clone());
        junction = s;
        prev = next;
    }
    let end = if prev.0 == junction { prev.1.clone() } else { prev.0.clone() };
    path.endpoints = (start, end);
    path.relay_nodes = interior;
    Ok(path)
}

// ---- per-protocol link simulation ------------------------------------------

fn simulate_link(
    link: &LinkDef,
    duration: f64,
    rng: StreamRng,
) -> Result<LinkOutcome, ScenarioError> {
    match &link.protocol {
        ProtocolDef::Bb84OneDecoy(def) => simulate_bb84_link(link, def, duration, rng),
        ProtocolDef::Bbm92(def) => simulate_bbm92_link(link, def, duration, rng),
        ProtocolDef::HdTimebin(def) => simulate_hd_link(link, def, duration, rng),
        ProtocolDef::CvGaussian(def) => simulate_cv_link(link, def, None, duration, rng),
        ProtocolDef::CvFading(def) => {
            simulate_cv_link(link, &def.cv, Some((def.bin_width, def.top_bins)), duration, rng)
        }
    }
}

fn base_report(link: &LinkDef, mean_transmission: f64) -> LinkReport {
    LinkReport {
        id: link.id.clone(),
        protocol: link.protocol.name().to_string(),
        mean_transmission,
        blocks: 0,
        aborted_blocks: 0,
        key_volume_bits: 0,
        skr_bps: 0.0,
        qber_z: None,
        qber_x: None,
        qber: None,
        secret_fraction_bits_per_symbol: None,
        transmission_estimate: None,
        excess_noise_snu: None,
        pooled_excess_noise_snu: None,
        pooled_key_fraction: None,
        max_tolerable_xi_snu: None,
        optimized_v_a: None,
        security_model: None,
    }
}

/// Secret bits to whole key blocks; sub-byte remainders are dropped from
/// the stores but kept in the volume accounting.
fn emit_key(keys: &mut Vec<(Vec<u8>, f64)>, rng: &mut StreamRng, bits: u64, now: f64) {
    let bytes = (bits / 8) as usize;
    if bytes == 0 {
        return;
    }
    let mut key = vec![0u8; bytes];
    rng.fill(&mut key);
    keys.push((key, now));
}

fn simulate_bb84_link(
    link: &LinkDef,
    def: &Bb84Def,
    duration: f64,
    rng: StreamRng,
) -> Result<LinkOutcome, ScenarioError> {
    let channel = build_link(&link.id, &link.segments)?;
    let cfg = DecoyConfig {
        mu1: def.mu1,
        mu2: def.mu2,
        p_mu1: def.p_mu1,
        p_z_alice: def.p_z_alice,
        p_z_bob: def.p_z_bob,
        pulse_rate: def.pulse_rate_hz,
        intrinsic_qber_z: def.qber_z,
        intrinsic_qber_x: def.qber_x,
        detectors_z: def.detectors_z,
        detectors_x: def.detectors_x,
    };
    let det = build_detector(&def.detector);
    let params = OneDecoyParams {
        eps_sec: def.eps_sec,
        eps_cor: def.eps_cor,
        f_ec: def.f_ec,
        mu1: def.mu1,
        mu2: def.mu2,
        p_mu1: def.p_mu1,
    };

    // Block sizing: enough pulses that the sifted key basis reaches the
    // configured block size in expectation at the mean transmission.
    let expect = expected_cell_counts(&cfg, &det, channel.mean_transmission(), 1_000_000_000);
    let yield_z = (expect[0][0].0 + expect[0][1].0) / 1e9;
    if yield_z <= 0.0 {
        return Err(ScenarioError::Runtime(
            "link yields no sifted detections".into(),
        ));
    }
    let pulses_per_block = (def.block_size_sifted_z as f64 / yield_z).ceil() as u64;
    let block_wall = pulses_per_block as f64 / cfg.pulse_rate;
    let n_blocks = (duration / block_wall).floor() as u64;

    let mut report = base_report(link, channel.mean_transmission());
    let mut keys = Vec::new();
    let mut n_z_total = 0u64;
    let mut m_z_total = 0u64;
    let mut n_x_total = 0u64;
    let mut m_x_total = 0u64;
    for block in 0..n_blocks {
        let mut block_rng = rng.derive_u64(block);
        let stats = simulate_decoy_block(&cfg, &channel, &det, pulses_per_block, &mut block_rng)
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        let result = onedecoy_key_length(&stats, &params)
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        n_z_total += stats.n_basis(Basis::Z);
        m_z_total += stats.m_basis(Basis::Z);
        n_x_total += stats.n_basis(Basis::X);
        m_x_total += stats.m_basis(Basis::X);
        report.blocks += 1;
        if result.aborted {
            report.aborted_blocks += 1;
        }
        report.key_volume_bits += result.secret_bits;
        emit_key(
            &mut keys,
            &mut block_rng.derive("key"),
            result.secret_bits,
            (block + 1) as f64 * block_wall,
        );
    }
    let sim_time = n_blocks as f64 * block_wall;
    report.skr_bps = if sim_time > 0.0 {
        report.key_volume_bits as f64 / sim_time
    } else {
        0.0
    };
    report.qber_z = (n_z_total > 0).then(|| m_z_total as f64 / n_z_total as f64);
    report.qber_x = (n_x_total > 0).then(|| m_x_total as f64 / n_x_total as f64);
    Ok(LinkOutcome {
        report,
        keys,
        warnings: Vec::new(),
    })
}

fn simulate_bbm92_link(
    link: &LinkDef,
    def: &Bbm92Def,
    duration: f64,
    rng: StreamRng,
) -> Result<LinkOutcome, ScenarioError> {
    let arm_b = build_link(&link.id, &link.segments)?;
    let arm_a = build_link(&format!("{}:arm-a", link.id), &def.arm_a)?;
    let src = PairSourceModel {
        pair_rate: def.pair_rate_hz,
        visibility: def.visibility,
        accidental_fraction: def.accidental_fraction,
    };
    let det_a = build_detector(&def.det_a);
    let det_b = build_detector(&def.det_b);
    let params = Bbm92Params {
        eps_sec: def.eps_sec,
        eps_cor: def.eps_cor,
        q_tol: def.q_tol,
        f_ec: def.f_ec,
    };

    let p_coinc = det_a.efficiency
        * det_b.efficiency
        * arm_a.mean_transmission()
        * arm_b.mean_transmission();
    let rate = src.pair_rate * p_coinc;
    if rate <= 0.0 {
        return Err(ScenarioError::Runtime("no coincidence rate".into()));
    }
    let block_duration = def.block_size as f64 / rate;
    let n_blocks = (duration / block_duration).floor() as u64;

    let mut report = base_report(link, arm_a.mean_transmission() * arm_b.mean_transmission());
    let mut keys = Vec::new();
    let mut n_total = 0u64;
    let mut m_total = 0u64;
    for block in 0..n_blocks {
        let mut block_rng = rng.derive_u64(block);
        let stats = simulate_pair_block(
            &src,
            &arm_a,
            &arm_b,
            &det_a,
            &det_b,
            block_duration,
            &mut block_rng,
        )
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        n_total += stats.n_sifted;
        m_total += stats.m_errors;
        let split = split_pair_block(&stats, def.pe_fraction, &mut block_rng);
        report.blocks += 1;
        if split.n_key == 0 || split.n_pe == 0 {
            report.aborted_blocks += 1;
            continue;
        }
        let result = bbm92_key_length(
            split.n_key,
            split.n_pe,
            split.q_key(),
            split.q_pe(),
            &params,
        )
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        if result.aborted {
            report.aborted_blocks += 1;
        }
        report.key_volume_bits += result.secret_bits;
        emit_key(
            &mut keys,
            &mut block_rng.derive("key"),
            result.secret_bits,
            (block + 1) as f64 * block_duration,
        );
    }
    let sim_time = n_blocks as f64 * block_duration;
    report.skr_bps = if sim_time > 0.0 {
        report.key_volume_bits as f64 / sim_time
    } else {
        0.0
    };
    report.qber = (n_total > 0).then(|| m_total as f64 / n_total as f64);
    Ok(LinkOutcome {
        report,
        keys,
        warnings: Vec::new(),
    })
}

fn simulate_hd_link(
    link: &LinkDef,
    def: &HdDef,
    duration: f64,
    rng: StreamRng,
) -> Result<LinkOutcome, ScenarioError> {
    let channel = build_link(&link.id, &link.segments)?;
    let fraction = hd_secret_fraction(def.dimension, def.qber_z, def.qber_x)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let n_blocks = (duration / def.block_duration_s).floor() as u64;
    let duty = ((def.block_duration_s - def.lock_in_dead_s) / def.block_duration_s).clamp(0.0, 1.0);

    let mut report = base_report(link, channel.mean_transmission());
    report.secret_fraction_bits_per_symbol = Some(fraction);
    report.qber_z = Some(def.qber_z);
    report.qber_x = Some(def.qber_x);
    let mut keys = Vec::new();
    for block in 0..n_blocks {
        let sifted = def.sifted_rate_bps * def.block_duration_s * duty;
        let bits = (fraction * sifted).floor() as u64;
        report.blocks += 1;
        if bits == 0 {
            report.aborted_blocks += 1;
        }
        report.key_volume_bits += bits;
        emit_key(
            &mut keys,
            &mut rng.derive_u64(block).derive("key"),
            bits,
            (block + 1) as f64 * def.block_duration_s,
        );
    }
    let sim_time = n_blocks as f64 * def.block_duration_s;
    report.skr_bps = if sim_time > 0.0 {
        report.key_volume_bits as f64 / sim_time
    } else {
        0.0
    };
    Ok(LinkOutcome {
        report,
        keys,
        warnings: Vec::new(),
    })
}

fn cv_config(def: &CvDef) -> CvConfig {
    CvConfig {
        modulation: match def.modulation {
            ModulationDef::Gaussian => CvModulation::Gaussian,
            ModulationDef::Qpsk => CvModulation::Qpsk,
        },
        v_a: def.v_a,
        xi: def.xi,
        det_efficiency: def.detector_efficiency,
        v_el: def.v_el,
        symbol_rate: def.symbol_rate_hz,
    }
}

fn cv_rate_params(def: &CvDef) -> CvRateParams {
    CvRateParams {
        // the rate formula takes the per-quadrature modulation variance
        v_a: def.v_a / 2.0,
        eta: def.detector_efficiency,
        v_el: def.v_el,
        beta: def.beta,
        detection: Detection::Heterodyne,
    }
}

fn simulate_cv_link(
    link: &LinkDef,
    def: &CvDef,
    fading: Option<(f64, u32)>,
    duration: f64,
    rng: StreamRng,
) -> Result<LinkOutcome, ScenarioError> {
    let channel = build_link(&link.id, &link.segments)?;
    let cfg = cv_config(def);
    let rate_params = cv_rate_params(def);
    let mut report = base_report(link, channel.mean_transmission());
    report.security_model = Some("gaussian-equivalent asymptotic".into());
    let mut warnings = Vec::new();

    if duration <= 0.0 {
        return Ok(LinkOutcome {
            report,
            keys: Vec::new(),
            warnings,
        });
    }

    let mut rng = rng;
    let batch = simulate_cv_batch(&cfg, &channel, def.batch_symbols as usize, &mut rng)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let pooled = estimate_t_xi(&batch, &cfg).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let pooled_t = pooled.t_hat.min(1.0);
    if pooled_t <= 0.0 {
        return Err(ScenarioError::Runtime("estimated zero transmission".into()));
    }
    let pooled_fraction = gaussian_key_fraction(pooled_t, pooled.xi_clamped(), &rate_params)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    report.transmission_estimate = Some(pooled.t_hat);
    report.pooled_key_fraction = Some(pooled_fraction);
    report.blocks = 1;

    let fraction = match fading {
        None => {
            report.excess_noise_snu = Some(pooled.xi_hat);
            report.secret_fraction_bits_per_symbol = Some(pooled_fraction);
            pooled_fraction
        }
        Some((bin_width, top_bins)) => {
            let (weighted_xi, sub_binned) = analyze_fading_batch(
                &batch,
                &cfg,
                &rate_params,
                bin_width,
                top_bins as usize,
                &mut warnings,
            )?;
            report.excess_noise_snu = Some(weighted_xi);
            report.pooled_excess_noise_snu = Some(pooled.xi_hat);
            report.secret_fraction_bits_per_symbol = Some(sub_binned);
            sub_binned
        }
    };
    report.skr_bps = fraction * def.symbol_rate_hz;

    if let Ok(max_xi) = max_tolerable_xi(pooled_t, &rate_params) {
        report.max_tolerable_xi_snu = Some(max_xi);
    }
    if let Some([lo, hi]) = def.optimize_v_a {
        let (v_a, key_fraction) =
            maximize_over_va(pooled_t, pooled.xi_clamped(), &rate_params, lo, hi)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        report.optimized_v_a = Some(OptimizedVa { v_a, key_fraction });
    }
    Ok(LinkOutcome {
        report,
        keys: Vec::new(),
        warnings,
    })
}

/// Sub-bins a fading batch by the per-symbol transmission, estimates each
/// populated sub-channel independently, and aggregates.
fn analyze_fading_batch(
    batch: &CvBatch,
    cfg: &CvConfig,
    rate_params: &CvRateParams,
    bin_width: f64,
    top_bins: usize,
    warnings: &mut Vec<String>,
) -> Result<(f64, f64), ScenarioError> {
    let hist = bin_transmissions(&batch.transmission_used, bin_width)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let max_index = (1.0 / bin_width).ceil() as usize - 1;
    let lo_edge = hist.bins.first().map(|(e, _)| *e).unwrap_or(0.0);

    let mut per_bin_symbols: std::collections::BTreeMap<usize, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, t) in batch.transmission_used.iter().enumerate() {
        let idx = ((t / bin_width) as usize).min(max_index) - (lo_edge / bin_width).round() as usize;
        per_bin_symbols.entry(idx).or_default().push(i);
    }

    // Estimate every sub-channel with enough statistics. Bins below the
    // estimator minimum are a thin tail by construction, so the estimable
    // set coincides with the most-populated bins.
    let mut estimates = Vec::new();
    let mut skipped = 0usize;
    for bin_index in hist.populated() {
        let symbols = per_bin_symbols
            .get(&bin_index)
            .ok_or_else(|| ScenarioError::Runtime("histogram/bin mismatch".into()))?;
        if symbols.len() < MIN_ESTIMATION_SYMBOLS {
            skipped += 1;
            continue;
        }
        let sub = CvBatch {
            alice_symbols: symbols.iter().map(|&i| batch.alice_symbols[i]).collect(),
            bob_quadratures: symbols.iter().map(|&i| batch.bob_quadratures[i]).collect(),
            transmission_used: symbols.iter().map(|&i| batch.transmission_used[i]).collect(),
        };
        let estimate = estimate_t_xi(&sub, cfg).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        estimates.push(BinEstimate {
            bin_index,
            estimate,
        });
    }
    if estimates.len() < top_bins {
        warnings.push(format!(
            "only {} sub-channels reach the estimation minimum ({} skipped); increase batch_symbols",
            estimates.len(),
            skipped
        ));
    }

    // The headline excess noise follows the deployed analysis: weighted
    // mean over the `top_bins` most populated sub-channels. The key
    // fraction aggregates over every estimable sub-channel.
    let weighted_xi = weighted_excess_noise(&hist, &estimates, top_bins)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let fraction = fading_key_fraction(&hist, &estimates, rate_params, estimates.len())
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    Ok((weighted_xi, fraction))
}

/// Coarse log grid plus golden-section refinement of the rate over the
/// per-quadrature modulation variance.
fn maximize_over_va(
    t: f64,
    xi: f64,
    base: &CvRateParams,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64), qkdsim_core::keyrate::KeyRateError> {
    let eval = |v_a: f64| {
        let params = CvRateParams { v_a, ..*base };
        gaussian_key_fraction(t, xi, &params)
    };
    let steps = 96;
    let ratio = (hi / lo).powf(1.0 / steps as f64);
    let mut best = (lo, eval(lo)?);
    let mut v = lo;
    for _ in 0..=steps {
        let k = eval(v)?;
        if k > best.1 {
            best = (v, k);
        }
        v *= ratio;
    }
    // golden-section refinement around the best grid point
    let mut a = (best.0 / ratio).max(lo);
    let mut b = (best.0 * ratio).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if eval(x1)? >= eval(x2)? {
            b = x2;
        } else {
            a = x1;
        }
    }
    let v_star = 0.5 * (a + b);
    Ok((v_star, eval(v_star)?))
}

// ---- gateway demo -----------------------------------------------------------

fn run_gateway(
    def: &GatewayDef,
    net: &SharedNetwork,
    duration: f64,
    rng: StreamRng,
    options: &RunOptions,
) -> Result<GatewayReport, ScenarioError> {
    let qos = Qos {
        key_chunk_size: def.key_chunk_bits / 8,
        max_bps: 0,
        min_bps: 0,
        ttl: duration,
    };
    let node_a = NodeId::from(def.a.as_str());
    let node_b = NodeId::from(def.b.as_str());
    let ksid = {
        let mut client = KmsClient::local(Arc::clone(net), node_a.clone());
        client
            .open_connect(&node_a, &node_b, qos)
            .map_err(|e| ScenarioError::Runtime(format!("gateway {}: {e}", def.id)))?
    };
    let config = TunnelConfig {
        ksid,
        rekey_interval: def.rekey_interval_s,
        ..TunnelConfig::new(ksid)
    };
    let (mut tun_a, mut tun_b) = establish_pair(
        KmsClient::local(Arc::clone(net), node_a.clone()),
        KmsClient::local(Arc::clone(net), node_b.clone()),
        config,
    )
    .map_err(|e| ScenarioError::Runtime(format!("gateway {}: {e}", def.id)))?;

    // File-server stand-in round trip: A pushes the payload to B, B serves
    // it back; both halves must survive byte-identically.
    let mut demo_rng = rng.derive("demo");
    let mut payload = vec![0u8; def.demo_payload_bytes as usize];
    demo_rng.fill(&mut payload);
    let mut demo_ok = true;
    if options.real_sockets {
        demo_ok &= socket_roundtrip(&payload, &mut tun_a, &mut tun_b)
            .map_err(|e| ScenarioError::Runtime(format!("gateway {}: {e}", def.id)))?;
    } else {
        demo_ok &= in_process_roundtrip(&payload, &mut tun_a, &mut tun_b)
            .map_err(|e| ScenarioError::Runtime(format!("gateway {}: {e}", def.id)))?;
    }

    // Epoch soak: a few frames either way per interval, then rekey both
    // sides. Starvation keeps the old epoch and raises the alarm counter.
    let epochs = (duration / def.rekey_interval_s).floor() as u64;
    let mut soak_rng = rng.derive("soak");
    for epoch in 0..epochs {
        for frame_idx in 0..def.frames_per_epoch {
            let mut message = vec![0u8; 256];
            soak_rng.fill(&mut message);
            let frame = tun_a
                .seal(&message)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            demo_ok &= frame.starts_with(&MAGIC);
            let opened = tun_b
                .open(&frame)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            demo_ok &= opened == message;
            let reply = tun_b
                .seal(&opened)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            demo_ok &= tun_a
                .open(&reply)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?
                == message;
            let _ = frame_idx;
        }
        match tun_a.rekey() {
            Ok(_) => {}
            Err(TunnelError::KeyStarvation { .. }) => {
                let _ = epoch;
                continue;
            }
            Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
        }
        match tun_b.rekey() {
            Ok(_) => {}
            Err(TunnelError::KeyStarvation { .. }) => continue,
            Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
        }
    }

    let ca = tun_a.counters();
    let cb = tun_b.counters();
    Ok(GatewayReport {
        id: def.id.clone(),
        ksid: ksid.to_string(),
        epochs_consumed: ca.epochs_consumed,
        frames_forwarded: ca.frames_sealed + cb.frames_sealed,
        plaintext_bytes: ca.plaintext_bytes_sealed + cb.plaintext_bytes_sealed,
        decrypt_failures: ca.decrypt_failures + cb.decrypt_failures,
        replays_rejected: ca.replays_rejected + cb.replays_rejected,
        rekey_alarms: ca.rekey_alarms + cb.rekey_alarms,
        demo_roundtrip_ok: demo_ok,
        state: match (tun_a.state(), tun_b.state()) {
            (TunnelState::Active, TunnelState::Active) => "active".into(),
            (TunnelState::HardStopped, _) | (_, TunnelState::HardStopped) => "hard-stopped".into(),
            _ => "degraded-no-rekey".into(),
        },
    })
}

/// Chunked transfer through the tunnel without sockets; asserts the taint
/// rule (only magic-prefixed frames cross the "wire").
fn in_process_roundtrip(
    payload: &[u8],
    tun_a: &mut qkdsim_gateway::Tunnel,
    tun_b: &mut qkdsim_gateway::Tunnel,
) -> Result<bool, TunnelError> {
    const CHUNK: usize = 16 * 1024;
    let mut received = Vec::with_capacity(payload.len());
    for chunk in payload.chunks(CHUNK) {
        let frame = tun_a.seal(chunk)?;
        if !frame.starts_with(&MAGIC) {
            return Ok(false);
        }
        received.extend_from_slice(&tun_b.open(&frame)?);
    }
    let mut echoed = Vec::with_capacity(payload.len());
    for chunk in received.chunks(CHUNK) {
        let frame = tun_b.seal(chunk)?;
        if !frame.starts_with(&MAGIC) {
            return Ok(false);
        }
        echoed.extend_from_slice(&tun_a.open(&frame)?);
    }
    Ok(echoed == payload)
}

/// The same round trip through real loopback sockets and the proxy pumps.
fn socket_roundtrip(
    payload: &[u8],
    tun_a: &mut qkdsim_gateway::Tunnel,
    tun_b: &mut qkdsim_gateway::Tunnel,
) -> Result<bool, ScenarioError> {
    use std::io::{Read, Write};
    use std::net::{Shutdown, TcpListener, TcpStream};

    // swap the tunnels out so the pumps can own them, then swap back
    let placeholder = |role: qkdsim_gateway::Direction| {
        qkdsim_gateway::Tunnel::from_key_bytes(
            &[0u8; 32],
            TunnelConfig::new(qkdsim_kms::Ksid([0; 16])),
            role,
        )
        .expect("placeholder tunnel")
    };
    let role_a = tun_a.role();
    let role_b = tun_b.role();
    let a = Arc::new(Mutex::new(std::mem::replace(tun_a, placeholder(role_a))));
    let b = Arc::new(Mutex::new(std::mem::replace(tun_b, placeholder(role_b))));

    let echo_listener = TcpListener::bind("127.0.0.1:0")?;
    let echo_addr = echo_listener.local_addr()?;
    std::thread::spawn(move || {
        if let Ok((mut s, _)) = echo_listener.accept() {
            let mut buf = Vec::new();
            if s.read_to_end(&mut buf).is_ok() {
                let _ = s.write_all(&buf);
                let _ = s.shutdown(Shutdown::Write);
            }
        }
    });

    let frame_listener = TcpListener::bind("127.0.0.1:0")?;
    let frame_addr = frame_listener.local_addr()?;
    let b_for_exit = Arc::clone(&b);
    let exit = std::thread::spawn(move || -> Result<(), TunnelError> {
        let (peer, _) = frame_listener.accept()?;
        let target = TcpStream::connect(echo_addr)?;
        qkdsim_gateway::pump_duplex(target, peer, b_for_exit)?;
        Ok(())
    });

    let app_listener = TcpListener::bind("127.0.0.1:0")?;
    let app_addr = app_listener.local_addr()?;
    let a_for_entry = Arc::clone(&a);
    let entry = std::thread::spawn(move || -> Result<(), TunnelError> {
        let (app, _) = app_listener.accept()?;
        let peer = TcpStream::connect(frame_addr)?;
        qkdsim_gateway::pump_duplex(app, peer, a_for_entry)?;
        Ok(())
    });

    let mut client = TcpStream::connect(app_addr)?;
    client.write_all(payload)?;
    client.shutdown(Shutdown::Write)?;
    let mut back = Vec::new();
    client.read_to_end(&mut back)?;
    entry
        .join()
        .expect("entry pump")
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    exit.join()
        .expect("exit pump")
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;

    *tun_a = Arc::try_unwrap(a)
        .map_err(|_| ScenarioError::Runtime("tunnel still shared".into()))?
        .into_inner()
        .expect("tunnel lock");
    *tun_b = Arc::try_unwrap(b)
        .map_err(|_| ScenarioError::Runtime("tunnel still shared".into()))?
        .into_inner()
        .expect("tunnel lock");
    Ok(back == payload)
}
