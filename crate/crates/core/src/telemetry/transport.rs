use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};

use serde::{Deserialize, Serialize};

/// How uplink bytes travel from the headstage thread to the server.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Ordered in-memory channel.
    #[default]
    InProcess,
    /// Loopback TCP socket.
    Tcp,
}

/// Writing end of an in-process link; dropping it closes the stream.
pub struct ChannelWriter(Sender<Vec<u8>>);

/// Reading end of an in-process link.
pub struct ChannelReader {
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
}

impl Write for ChannelWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "reader dropped"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for ChannelReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.pending.len() - self.pos);
        out[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub fn in_process_link() -> (ChannelWriter, ChannelReader) {
    let (tx, rx) = mpsc::channel();
    (
        ChannelWriter(tx),
        ChannelReader {
            rx,
            pending: Vec::new(),
            pos: 0,
        },
    )
}

/// Connected loopback socket pair: `(client, server)`.
pub fn tcp_link() -> io::Result<(TcpStream, TcpStream)> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let client = TcpStream::connect(listener.local_addr()?)?;
    let (server, _) = listener.accept()?;
    client.set_nodelay(true)?;
    Ok((client, server))
}

pub type LinkPair = (Box<dyn Write + Send>, Box<dyn Read + Send>);

pub fn open_link(kind: Transport) -> io::Result<LinkPair> {
    Ok(match kind {
        Transport::InProcess => {
            let (w, r) = in_process_link();
            (Box::new(w), Box::new(r))
        }
        Transport::Tcp => {
            let (w, r) = tcp_link()?;
            (Box::new(w), Box::new(r))
        }
    })
}
