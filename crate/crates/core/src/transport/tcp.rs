//! Length-prefixed frames over TCP, and a throughput probe between two endpoints.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use crate::fault::WorkerId;
use crate::transport::{Message, Payload};
use crate::wire::Reader;

/// Frames larger than this are treated as corrupt.
pub const MAX_FRAME: usize = 256 << 20;

pub fn write_frame(stream: &mut impl Write, msg: &Message) -> io::Result<()> {
    stream.write_all(&msg.encode())?;
    stream.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(stream: &mut impl Read) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes"),
        ));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    let mut r = Reader::new(&body);
    let msg =
        Message::decode_body(&mut r).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    r.finish()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    Ok(Some(msg))
}

/// Reads frames until the peer closes, answering bandwidth probes in place and
/// handing every other message to `deliver`.
pub fn serve_connection(mut stream: TcpStream, mut deliver: impl FnMut(Message)) -> io::Result<()> {
    stream.set_nodelay(true)?;
    while let Some(msg) = read_frame(&mut stream)? {
        match msg.payload {
            Payload::BandwidthProbe { reply: false, .. } => {
                let ack = Message::new(
                    msg.receiver,
                    msg.sender,
                    None,
                    Payload::BandwidthProbe {
                        reply: true,
                        data: Vec::new(),
                    },
                );
                write_frame(&mut stream, &ack)?;
            }
            _ => deliver(msg),
        }
    }
    Ok(())
}

/// Sends `bytes` of probe payload to `addr` and returns bytes per second until
/// the reply arrives.
pub fn measure_bandwidth(
    addr: SocketAddr,
    from: WorkerId,
    to: WorkerId,
    bytes: usize,
) -> io::Result<f64> {
    let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let probe = Message::new(
        from,
        to,
        None,
        Payload::BandwidthProbe {
            reply: false,
            data: vec![0xa5; bytes],
        },
    );
    let frame = probe.encode();
    let t0 = Instant::now();
    stream.write_all(&frame)?;
    stream.flush()?;
    match read_frame(&mut stream)? {
        Some(Message {
            payload: Payload::BandwidthProbe { reply: true, .. },
            ..
        }) => {}
        _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "no probe reply")),
    }
    let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
    Ok(frame.len() as f64 / elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::sync::mpsc;

    #[test]
    fn frames_survive_a_socket_and_probes_are_answered() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        let server = std::thread::spawn(move || {
            for _ in 0..2 {
                let (s, _) = listener.accept().unwrap();
                let tx = tx.clone();
                serve_connection(s, move |m| tx.send(m).unwrap()).unwrap();
            }
        });
        let bw = measure_bandwidth(addr, 0, 1, 1 << 20).unwrap();
        assert!(bw.is_finite() && bw > 0.0);
        let mut s = TcpStream::connect(addr).unwrap();
        let m = Message::new(
            0,
            1,
            Some(3),
            Payload::Commit {
                generation: 2,
                layout: 1,
                resume_from: 3,
                reset: true,
                recovery: false,
            },
        );
        write_frame(&mut s, &m).unwrap();
        drop(s);
        assert_eq!(rx.recv().unwrap(), m);
        server.join().unwrap();
    }

    #[test]
    fn oversized_frame_rejected() {
        let bytes = (u32::MAX).to_be_bytes();
        assert!(read_frame(&mut &bytes[..]).is_err());
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }
}
