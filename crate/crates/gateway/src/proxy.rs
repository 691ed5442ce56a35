//! TCP proxy demo: application bytes on one side, tunnel frames on the
//! other. Reproduces the secure-file-server use case with a generic
//! stand-in: the entry side accepts an application connection and seals
//! everything towards the peer gateway; the exit side opens frames and
//! forwards plaintext to the target service.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::{Arc, Mutex};

use crate::error::TunnelError;
use crate::frame::TunnelFrame;
use crate::tunnel::{Tunnel, TunnelCounters};

pub type SharedTunnel = Arc<Mutex<Tunnel>>;

const READ_BUF: usize = 16 * 1024;

/// Pumps one duplex connection through the tunnel until both directions
/// hit EOF. `app` carries plaintext, `peer` carries frames. The shared
/// handle lets a scheduler thread rekey concurrently.
pub fn pump_duplex(
    app: TcpStream,
    peer: TcpStream,
    tunnel: SharedTunnel,
) -> Result<TunnelCounters, TunnelError> {
    let app_reader = app.try_clone()?;
    let peer_reader = peer.try_clone()?;

    let seal_tunnel = Arc::clone(&tunnel);
    let sealer = std::thread::spawn(move || -> Result<(), TunnelError> {
        let mut app = app_reader;
        let mut peer = peer;
        let mut buf = vec![0u8; READ_BUF];
        loop {
            let n = app.read(&mut buf)?;
            if n == 0 {
                let _ = peer.shutdown(Shutdown::Write);
                return Ok(());
            }
            let frame = seal_tunnel
                .lock()
                .expect("tunnel lock")
                .seal(&buf[..n])?;
            peer.write_all(&frame)?;
        }
    });

    let open_tunnel = Arc::clone(&tunnel);
    let opener = std::thread::spawn(move || -> Result<(), TunnelError> {
        let mut peer = peer_reader;
        let mut app = app;
        loop {
            let frame = match TunnelFrame::read_from(&mut peer) {
                Ok(f) => f,
                Err(TunnelError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                    let _ = app.shutdown(Shutdown::Write);
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let bytes = frame.encode();
            let plaintext = {
                let mut t = open_tunnel.lock().expect("tunnel lock");
                match t.open(&bytes) {
                    Ok(p) => p,
                    // the peer rekeyed first; catch up and retry once
                    Err(TunnelError::FutureEpoch { .. }) => {
                        t.rekey()?;
                        t.open(&bytes)?
                    }
                    Err(e) => return Err(e),
                }
            };
            app.write_all(&plaintext)?;
        }
    });

    sealer.join().expect("sealer thread")?;
    opener.join().expect("opener thread")?;
    let counters = tunnel.lock().expect("tunnel lock").counters();
    Ok(counters)
}
