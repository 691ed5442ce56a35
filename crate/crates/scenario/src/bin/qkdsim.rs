//! Command-line entry point for the QKD network emulator.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand, ValueEnum};

use qkdsim_gateway::{Direction, Tunnel, TunnelConfig, TunnelFrame};
use qkdsim_kms::{KmsClient, Ksid, NodeId};
use qkdsim_scenario::{
    parse_scenario, presets, render_report, run_with_network, ReportFormat, RunOptions, Scenario,
    ScenarioError,
};

#[derive(Parser)]
#[command(name = "qkdsim", about = "Desk-scale emulation of a hybrid metropolitan QKD network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (a JSON file path or a preset name) and print the report.
    Run {
        scenario: String,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "json")]
        format: FormatArg,
        /// Route the gateway demo through real loopback sockets.
        #[arg(long)]
        real_sockets: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a scenario file (or preset) without running it.
    Validate { scenario: String },
    /// List the built-in presets.
    ListPresets,
    /// Run a scenario, then keep serving one node's key-delivery endpoint
    /// over TCP so external gateway processes can pull keys.
    Serve {
        scenario: String,
        /// Node whose endpoint to expose.
        #[arg(long)]
        node: String,
        /// Listen address, e.g. 127.0.0.1:7000.
        #[arg(long)]
        listen: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one gateway endpoint against a TCP key-delivery service,
    /// proxying a single connection through the tunnel.
    Gateway {
        /// entry: listen for the application, forward frames to --peer.
        /// exit: listen for frames, forward plaintext to --target.
        #[arg(long)]
        mode: GatewayMode,
        /// Listen address (application side for entry, frame side for exit).
        #[arg(long)]
        listen: String,
        /// Peer gateway frame address (entry mode).
        #[arg(long)]
        peer: Option<String>,
        /// Target service address (exit mode).
        #[arg(long)]
        target: Option<String>,
        /// Key-delivery service address of the local node.
        #[arg(long)]
        kms: String,
        /// Session id (32 hex chars) agreed with the peer gateway.
        #[arg(long)]
        ksid: String,
        /// Wall-clock seconds between rekeys.
        #[arg(long, default_value_t = 120.0)]
        rekey_interval: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatewayMode {
    Entry,
    Exit,
}

fn load(arg: &str) -> Result<Scenario, ScenarioError> {
    let path = std::path::Path::new(arg);
    if path.exists() {
        let bytes = std::fs::read(path)?;
        return parse_scenario(&bytes);
    }
    if let Some(json) = presets::preset(arg) {
        return parse_scenario(json.as_bytes());
    }
    Err(ScenarioError::Schema(format!(
        "{arg}: no such file and no such preset (see list-presets)"
    )))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ScenarioError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            format,
            real_sockets,
            output,
        } => {
            let mut scenario = load(&scenario)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let options = RunOptions { real_sockets };
            let (report, _net) = run_with_network(&scenario, &options)?;
            let format = match format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Text => ReportFormat::Text,
            };
            let rendered = render_report(&report, format)?;
            match output {
                Some(path) => std::fs::write(path, rendered)?,
                None => std::io::stdout().write_all(&rendered)?,
            }
            Ok(())
        }
        Command::Validate { scenario } => {
            let parsed = load(&scenario)?;
            println!(
                "ok: {} ({} nodes, {} links, {} gateways)",
                parsed.name,
                parsed.nodes.len(),
                parsed.links.len(),
                parsed.gateways.len()
            );
            Ok(())
        }
        Command::ListPresets => {
            for name in presets::names() {
                println!("{name}");
            }
            Ok(())
        }
        Command::Serve {
            scenario,
            node,
            listen,
            seed,
        } => {
            let mut scenario = load(&scenario)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let (report, net) = run_with_network(&scenario, &RunOptions::default())?;
            eprintln!(
                "scenario {} complete ({} key blocks used); serving node {} on {}",
                report.scenario, report.kms.ledger.used_blocks, node, listen
            );
            let listener = TcpListener::bind(&listen).map_err(ScenarioError::Io)?;
            let handle =
                qkdsim_kms::spawn_tcp_server(net, NodeId::from(node.as_str()), listener);
            handle.join().expect("server thread");
            Ok(())
        }
        Command::Gateway {
            mode,
            listen,
            peer,
            target,
            kms,
            ksid,
            rekey_interval,
        } => run_gateway_cli(mode, &listen, peer, target, &kms, &ksid, rekey_interval),
    }
}

fn run_gateway_cli(
    mode: GatewayMode,
    listen: &str,
    peer: Option<String>,
    target: Option<String>,
    kms: &str,
    ksid_hex: &str,
    rekey_interval: f64,
) -> Result<(), ScenarioError> {
    let ksid = Ksid::from_hex(ksid_hex).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let client =
        KmsClient::connect_tcp(kms).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let config = TunnelConfig {
        rekey_interval,
        ..TunnelConfig::new(ksid)
    };
    let listener = TcpListener::bind(listen).map_err(ScenarioError::Io)?;

    let (role, app, peer_stream) = match mode {
        GatewayMode::Entry => {
            let peer_addr = peer.ok_or_else(|| {
                ScenarioError::Runtime("entry mode requires --peer".into())
            })?;
            let (app, _) = listener.accept().map_err(ScenarioError::Io)?;
            let peer = TcpStream::connect(&peer_addr).map_err(ScenarioError::Io)?;
            (Direction::AtoB, app, peer)
        }
        GatewayMode::Exit => {
            let target_addr = target.ok_or_else(|| {
                ScenarioError::Runtime("exit mode requires --target".into())
            })?;
            let (peer, _) = listener.accept().map_err(ScenarioError::Io)?;
            let app = TcpStream::connect(&target_addr).map_err(ScenarioError::Io)?;
            (Direction::BtoA, app, peer)
        }
    };

    let mut tunnel = Tunnel::establish(client, config, role)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    handshake_over_socket(&mut tunnel, &peer_stream, mode)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    eprintln!("tunnel established (epoch 0), proxying");

    let shared = Arc::new(Mutex::new(tunnel));
    let rekey_handle = {
        let shared = Arc::clone(&shared);
        std::thread::spawn(move || loop {
            std::thread::sleep(std::time::Duration::from_secs_f64(rekey_interval));
            match shared.lock().expect("tunnel lock").rekey() {
                Ok(epoch) => eprintln!("rekeyed to epoch {epoch}"),
                Err(e) => eprintln!("rekey failed: {e}"),
            }
        })
    };
    let counters = qkdsim_gateway::pump_duplex(app, peer_stream, shared)
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    eprintln!(
        "connection closed: {} frames sealed, {} bytes, {} decrypt failures",
        counters.frames_sealed, counters.plaintext_bytes_sealed, counters.decrypt_failures
    );
    drop(rekey_handle);
    Ok(())
}

/// Encrypted ping/pong over the frame socket: the entry side sends first.
fn handshake_over_socket(
    tunnel: &mut Tunnel,
    peer: &TcpStream,
    mode: GatewayMode,
) -> Result<(), qkdsim_gateway::TunnelError> {
    let mut writer = peer.try_clone()?;
    let mut reader = peer.try_clone()?;
    match mode {
        GatewayMode::Entry => {
            let ping = tunnel.seal(qkdsim_gateway::HANDSHAKE_PING)?;
            writer.write_all(&ping)?;
            let frame = TunnelFrame::read_from(&mut reader)?;
            let pong = tunnel.open(&frame.encode())?;
            if pong != qkdsim_gateway::HANDSHAKE_PONG {
                return Err(qkdsim_gateway::TunnelError::HandshakeAuth);
            }
        }
        GatewayMode::Exit => {
            let frame = TunnelFrame::read_from(&mut reader)?;
            let ping = tunnel.open(&frame.encode())?;
            if ping != qkdsim_gateway::HANDSHAKE_PING {
                return Err(qkdsim_gateway::TunnelError::HandshakeAuth);
            }
            let pong = tunnel.seal(qkdsim_gateway::HANDSHAKE_PONG)?;
            writer.write_all(&pong)?;
        }
    }
    Ok(())
}
