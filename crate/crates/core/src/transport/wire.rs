//! Frame codec for the socket transport.
//!
//! Every frame is a little-endian `u32` length `L` followed by `L` bytes:
//!
//! | offset | size  | field                                             |
//! |-------:|------:|---------------------------------------------------|
//! | 0      | 1     | format version (`1`)                              |
//! | 1      | 1     | message kind (`MessageKind` discriminant)         |
//! | 2      | 1     | cause (`Cause` discriminant)                      |
//! | 3      | 1     | scalar width in bytes (8 or 4; 0 without payload) |
//! | 4      | 4     | sender node (`u32`)                               |
//! | 8      | 4     | receiver node (`u32`)                             |
//! | 12     | 4     | origin node (`u32`)                               |
//! | 16     | 8     | request id (`u64`)                                |
//! | 24     | 8     | aux word (`u64`)                                  |
//! | 32     | 4     | key count `n` (`u32`)                             |
//! | 36     | 4     | payload row width `d` (`u32`; 0 without payload)  |
//! | 40     | 8·n   | keys (`u64` each)                                 |
//! | 40+8n  | w·n·d | payload, row-major IEEE-754 scalars               |
//!
//! All integers and floats are little-endian.

use super::{Cause, Message, MessageKind};
use crate::error::{Error, Result};
use crate::model::{Key, Scalar};

pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 40;
const SCALAR_WIDTH: usize = std::mem::size_of::<Scalar>();

/// Appends the length-prefixed frame for `msg` to `out`.
pub fn encode(msg: &Message, out: &mut Vec<u8>) -> Result<()> {
    let n = msg.keys.len();
    let (width, dim) = match &msg.payload {
        Some(p) => {
            if n == 0 {
                if !p.is_empty() {
                    return Err(Error::Wire("payload without keys".into()));
                }
                (SCALAR_WIDTH, 0)
            } else {
                if p.len() % n != 0 {
                    return Err(Error::Wire("payload is not a whole number of rows".into()));
                }
                (SCALAR_WIDTH, p.len() / n)
            }
        }
        None => (0, 0),
    };
    let body = HEADER_LEN + 8 * n + width * n * dim;
    out.reserve(4 + body);
    out.extend_from_slice(&(body as u32).to_le_bytes());
    out.push(FORMAT_VERSION);
    out.push(msg.kind as u8);
    out.push(msg.cause as u8);
    out.push(width as u8);
    out.extend_from_slice(&(msg.sender as u32).to_le_bytes());
    out.extend_from_slice(&(msg.receiver as u32).to_le_bytes());
    out.extend_from_slice(&(msg.origin as u32).to_le_bytes());
    out.extend_from_slice(&msg.request_id.to_le_bytes());
    out.extend_from_slice(&msg.aux.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for k in &msg.keys {
        out.extend_from_slice(&k.0.to_le_bytes());
    }
    if let Some(p) = &msg.payload {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Decodes one frame body (the bytes after the length prefix).
pub fn decode(body: &[u8]) -> Result<Message> {
    if body.len() < HEADER_LEN {
        return Err(Error::Wire(format!("short header: {} bytes", body.len())));
    }
    if body[0] != FORMAT_VERSION {
        return Err(Error::Wire(format!("unsupported format version {}", body[0])));
    }
    let kind = MessageKind::from_u8(body[1])
        .ok_or_else(|| Error::Wire(format!("unknown message kind {}", body[1])))?;
    let cause =
        Cause::from_u8(body[2]).ok_or_else(|| Error::Wire(format!("unknown cause {}", body[2])))?;
    let width = body[3] as usize;
    if width != 0 && width != SCALAR_WIDTH {
        return Err(Error::Wire(format!(
            "scalar width {width} does not match this build ({SCALAR_WIDTH})"
        )));
    }
    let n = u32_at(body, 32) as usize;
    let dim = u32_at(body, 36) as usize;
    let expected = HEADER_LEN + 8 * n + width * n * dim;
    if body.len() != expected {
        return Err(Error::Wire(format!(
            "frame length {} does not match header ({expected})",
            body.len()
        )));
    }
    let keys = (0..n).map(|i| Key(u64_at(body, HEADER_LEN + 8 * i))).collect();
    let payload = (width != 0).then(|| {
        body[HEADER_LEN + 8 * n..]
            .chunks_exact(SCALAR_WIDTH)
            .map(|c| Scalar::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Ok(Message {
        kind,
        cause,
        sender: u32_at(body, 4) as usize,
        receiver: u32_at(body, 8) as usize,
        origin: u32_at(body, 12) as usize,
        request_id: u64_at(body, 16),
        aux: u64_at(body, 24),
        keys,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_message() -> impl Strategy<Value = Message> {
        (
            0u8..8,
            0u8..4,
            (0usize..64, 0usize..64, 0usize..64),
            any::<u64>(),
            any::<u64>(),
            prop::collection::vec(any::<u64>(), 0..8),
            prop::option::of(1usize..5),
        )
            .prop_flat_map(|(kind, cause, nodes, rid, aux, keys, dim)| {
                let n = keys.len();
                let payload = match dim {
                    Some(d) => prop::option::of(prop::collection::vec(-1e6f64..1e6, n * d)).boxed(),
                    None => Just(None).boxed(),
                };
                payload.prop_map(move |payload| Message {
                    kind: MessageKind::from_u8(kind).unwrap(),
                    cause: Cause::from_u8(cause).unwrap(),
                    sender: nodes.0,
                    receiver: nodes.1,
                    origin: nodes.2,
                    request_id: rid,
                    aux,
                    keys: keys.iter().map(|&k| Key(k)).collect(),
                    payload: payload.map(|p| p.into_iter().map(|x| x as Scalar).collect()),
                })
            })
    }

    proptest! {
        #[test]
        fn frames_round_trip(msg in arb_message()) {
            let mut buf = Vec::new();
            encode(&msg, &mut buf).unwrap();
            let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
            prop_assert_eq!(len, buf.len() - 4);
            prop_assert_eq!(decode(&buf[4..]).unwrap(), msg);
        }
    }

    #[test]
    fn documented_byte_layout() {
        let msg = Message {
            kind: MessageKind::LocalizeGrant,
            cause: Cause::Sampling,
            sender: 1,
            receiver: 2,
            origin: 3,
            request_id: 0x0102,
            aux: 9,
            keys: vec![Key(5)],
            payload: Some(vec![1.5]),
        };
        let mut buf = Vec::new();
        encode(&msg, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + HEADER_LEN + 8 + SCALAR_WIDTH);
        assert_eq!(&buf[..4], &((HEADER_LEN + 8 + SCALAR_WIDTH) as u32).to_le_bytes());
        assert_eq!(&buf[4..8], &[1, 6, 1, SCALAR_WIDTH as u8]);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[20..28], &0x0102u64.to_le_bytes());
        assert_eq!(&buf[44..52], &5u64.to_le_bytes());
        assert_eq!(&buf[52..], &(1.5 as Scalar).to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(&[0u8; 10]).is_err());
        let mut buf = Vec::new();
        encode(&Message::new(MessageKind::PullReq, Cause::Direct, 0, 1), &mut buf).unwrap();
        buf[5] = 99;
        assert!(decode(&buf[4..]).is_err());
        buf[5] = 0;
        buf.push(0);
        assert!(decode(&buf[4..]).is_err());
    }
}
