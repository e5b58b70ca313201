//! Length-prefixed JSON frames between the authority, the server and the
//! clients.
//!
//! A frame is a 4-byte big-endian length followed by a UTF-8 JSON object
//! `{type, run_digest, payload}`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use nn_emd_core::feip::{MiFunctionalKey, SiFunctionalKey};
use nn_emd_core::trainer::{ClientKeys, LabelBlock, PreprocessedSource, SourceMeta, TrainingPlan};
use serde::{Deserialize, Serialize};

use crate::config::Role;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetaPayload {
    /// Client to server.
    Source {
        meta: SourceMeta,
        id_hashes: Option<Vec<String>>,
    },
    /// Server to client.
    Plan {
        plan: TrainingPlan,
        alignment: Option<Vec<usize>>,
    },
    /// Server to authority: key sizes and how many sources will register.
    Authority {
        si_eta: usize,
        etas: Vec<usize>,
        tau: usize,
        weight_limit: u64,
        clients: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum Message {
    Hello { role: Role, source_id: Option<usize> },
    RegisterSource { source_id: usize, slot: Option<usize> },
    PublicKeyDelivery(ClientKeys),
    MetaInfo(MetaPayload),
    CiphertextBatch(PreprocessedSource),
    SiKeyRequest { y: Vec<i64> },
    SiKeyResponse(SiFunctionalKey),
    MiKeyRequest { y: Vec<i64> },
    MiKeyResponse(MiFunctionalKey),
    LabelBlock { source_id: usize, round: usize, labels: Vec<LabelBlock> },
    Reject { reason: String },
    Abort { reason: String },
    Done,
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::RegisterSource { .. } => "RegisterSource",
            Message::PublicKeyDelivery(_) => "PublicKeyDelivery",
            Message::MetaInfo(_) => "MetaInfo",
            Message::CiphertextBatch(_) => "CiphertextBatch",
            Message::SiKeyRequest { .. } => "SiKeyRequest",
            Message::SiKeyResponse(_) => "SiKeyResponse",
            Message::MiKeyRequest { .. } => "MiKeyRequest",
            Message::MiKeyResponse(_) => "MiKeyResponse",
            Message::LabelBlock { .. } => "LabelBlock",
            Message::Reject { .. } => "Reject",
            Message::Abort { .. } => "Abort",
            Message::Done => "Done",
        }
    }
}

pub fn encode_frame(msg: &Message, run_digest: &str) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(msg)?;
    value
        .as_object_mut()
        .expect("messages serialize as objects")
        .insert("run_digest".into(), run_digest.into());
    let body = serde_json::to_vec(&value)?;
    let len = u32::try_from(body.len()).context("frame larger than 4 GiB")?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend(len.to_be_bytes());
    frame.extend(body);
    Ok(frame)
}

/// Parses a frame body; returns the digest it carries and the message.
pub fn decode_body(body: &[u8]) -> Result<(String, Message)> {
    let mut value: serde_json::Value = serde_json::from_slice(body).context("frame is not JSON")?;
    let obj = value.as_object_mut().context("frame is not a JSON object")?;
    let digest = match obj.remove("run_digest") {
        Some(serde_json::Value::String(s)) => s,
        _ => bail!("frame carries no run digest"),
    };
    let kind = obj.get("type").and_then(|t| t.as_str()).unwrap_or("<missing>").to_owned();
    let msg = serde_json::from_value(value).with_context(|| format!("unknown or malformed message type `{kind}`"))?;
    Ok((digest, msg))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message, run_digest: &str, max: usize) -> Result<()> {
    let frame = encode_frame(msg, run_digest)?;
    if frame.len() - 4 > max {
        bail!("{} frame of {} bytes exceeds the limit of {max}", msg.type_name(), frame.len() - 4);
    }
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<(String, Message)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).context("connection closed")?;
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        bail!("incoming frame of {len} bytes exceeds the limit of {max}");
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).context("truncated frame")?;
    decode_body(&body)
}

/// One framed connection bound to a run digest.
pub struct Channel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    digest: String,
    max: usize,
}

impl Channel {
    pub fn new(stream: TcpStream, digest: &str, max: usize) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Channel {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            digest: digest.to_owned(),
            max,
        })
    }

    /// Connects, retrying until `timeout` passes.
    pub fn connect(addr: &str, digest: &str, max: usize, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        loop {
            let attempt = addr
                .to_socket_addrs()
                .with_context(|| format!("resolving {addr}"))?
                .next()
                .ok_or_else(|| anyhow!("no address for {addr}"))
                .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_millis(500)).map_err(Into::into));
            match attempt {
                Ok(stream) => return Self::new(stream, digest, max),
                Err(e) if Instant::now() >= deadline => return Err(e.context(format!("{addr} unreachable"))),
                Err(_) => std::thread::sleep(Duration::from_millis(100)),
            }
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut self.writer, msg, &self.digest, self.max)
    }

    pub fn abort(&mut self, reason: &str) {
        let _ = self.send(&Message::Abort { reason: reason.into() });
    }

    /// Next message; a digest mismatch or an undecodable frame answers with
    /// Abort, and an Abort from the peer becomes an error.
    pub fn recv(&mut self) -> Result<Message> {
        let (digest, msg) = match read_frame(&mut self.reader, self.max) {
            Ok(v) => v,
            Err(e) => {
                self.abort(&format!("{e:#}"));
                return Err(e);
            }
        };
        if digest != self.digest {
            self.abort("run digest mismatch");
            bail!("run digest mismatch: peer runs a different configuration");
        }
        if let Message::Abort { reason } = &msg {
            bail!("peer aborted: {reason}");
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let frame = encode_frame(&Message::Done, "abc").unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&frame[4..]).unwrap();
        assert_eq!(v["type"], "Done");
        assert_eq!(v["run_digest"], "abc");
        let (d, m) = read_frame(&mut frame.as_slice(), 1 << 20).unwrap();
        assert_eq!(d, "abc");
        assert!(matches!(m, Message::Done));
    }

    #[test]
    fn rejects_bad_frames() {
        let frame = encode_frame(&Message::Reject { reason: "x".into() }, "d").unwrap();
        assert!(read_frame(&mut frame.as_slice(), 4).is_err());
        assert!(read_frame(&mut &frame[..frame.len() - 1], 1 << 20).is_err());
        let unknown = br#"{"type":"Teleport","run_digest":"d","payload":{}}"#;
        let err = decode_body(unknown).unwrap_err();
        assert!(format!("{err:#}").contains("Teleport"));
        assert!(decode_body(br#"{"type":"Done"}"#).is_err());
        let mut big = Vec::new();
        assert!(write_frame(&mut big, &Message::Reject { reason: "y".repeat(64) }, "d", 16).is_err());
    }
}
