//! Stream-transport wire framing, little-endian.
//!
//! Header layout: magic "DPL1" (4 B), opcode u8, flags u8, reserved u16,
//! remote_addr u64, rkey u32, imm u32, length u32, then `length` payload
//! bytes. Control frames (opcode 4) use `flags` as a subtype: 0 carries an
//! MR advertisement (base u64, length u64, rkey u32), 1 carries a
//! completion acknowledgement (status u8), 2 carries a receive-window
//! credit return (count u32).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DPL1";
pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 8 + 4 + 4 + 4;

/// Sanity cap on payload length for a single frame.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum WireOp {
    Send = 1,
    Write = 2,
    WriteImm = 3,
    Ctrl = 4,
}

impl WireOp {
    pub fn from_u8(v: u8) -> Option<WireOp> {
        match v {
            1 => Some(WireOp::Send),
            2 => Some(WireOp::Write),
            3 => Some(WireOp::WriteImm),
            4 => Some(WireOp::Ctrl),
            _ => None,
        }
    }
}

pub const CTRL_MR_ADVERT: u8 = 0;
pub const CTRL_ACK: u8 = 1;
pub const CTRL_CREDIT: u8 = 2;

/// Ack status codes carried in CTRL_ACK payloads.
pub const ACK_OK: u8 = 0;
pub const ACK_REMOTE_PROTECTION: u8 = 1;
pub const ACK_RECEIVER_NOT_READY: u8 = 2;
pub const ACK_RETRY_EXCEEDED: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: WireOp,
    pub flags: u8,
    pub remote_addr: u64,
    pub rkey: u32,
    pub imm: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn ctrl_mr_advert(base: u64, length: u64, rkey: u32) -> Frame {
        let mut payload = Vec::with_capacity(20);
        payload.extend_from_slice(&base.to_le_bytes());
        payload.extend_from_slice(&length.to_le_bytes());
        payload.extend_from_slice(&rkey.to_le_bytes());
        Frame {
            opcode: WireOp::Ctrl,
            flags: CTRL_MR_ADVERT,
            remote_addr: 0,
            rkey: 0,
            imm: 0,
            payload,
        }
    }

    pub fn ctrl_ack(status: u8) -> Frame {
        Frame {
            opcode: WireOp::Ctrl,
            flags: CTRL_ACK,
            remote_addr: 0,
            rkey: 0,
            imm: 0,
            payload: vec![status],
        }
    }

    pub fn ctrl_credit(count: u32) -> Frame {
        Frame {
            opcode: WireOp::Ctrl,
            flags: CTRL_CREDIT,
            remote_addr: 0,
            rkey: 0,
            imm: 0,
            payload: count.to_le_bytes().to_vec(),
        }
    }

    pub fn parse_mr_advert(&self) -> Result<(u64, u64, u32)> {
        if self.payload.len() != 20 {
            return Err(Error::Protocol(format!(
                "mr advert payload length {}",
                self.payload.len()
            )));
        }
        let base = u64::from_le_bytes(self.payload[0..8].try_into().unwrap());
        let length = u64::from_le_bytes(self.payload[8..16].try_into().unwrap());
        let rkey = u32::from_le_bytes(self.payload[16..20].try_into().unwrap());
        Ok((base, length, rkey))
    }

    pub fn parse_ack(&self) -> Result<u8> {
        if self.payload.len() != 1 {
            return Err(Error::Protocol(format!(
                "ack payload length {}",
                self.payload.len()
            )));
        }
        Ok(self.payload[0])
    }

    pub fn parse_credit(&self) -> Result<u32> {
        if self.payload.len() != 4 {
            return Err(Error::Protocol(format!(
                "credit payload length {}",
                self.payload.len()
            )));
        }
        Ok(u32::from_le_bytes(self.payload[..].try_into().unwrap()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.payload.len());
        buf.extend_from_slice(&MAGIC);
        buf.push(self.opcode as u8);
        buf.push(self.flags);
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&self.remote_addr.to_le_bytes());
        buf.extend_from_slice(&self.rkey.to_le_bytes());
        buf.extend_from_slice(&self.imm.to_le_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    /// Reads one frame; `Ok(None)` on a clean EOF at a frame boundary.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) => {
                    if filled == 0 {
                        return Ok(None);
                    }
                    return Err(Error::Protocol("truncated frame header".into()));
                }
                Ok(n) => filled += n,
                Err(e) => return Err(e.into()),
            }
        }
        if header[0..4] != MAGIC {
            return Err(Error::Protocol("bad frame magic".into()));
        }
        let opcode = WireOp::from_u8(header[4])
            .ok_or_else(|| Error::Protocol(format!("unknown opcode {}", header[4])))?;
        let flags = header[5];
        let remote_addr = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let rkey = u32::from_le_bytes(header[16..20].try_into().unwrap());
        let imm = u32::from_le_bytes(header[20..24].try_into().unwrap());
        let length = u32::from_le_bytes(header[24..28].try_into().unwrap());
        if length > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload length {length} too large")));
        }
        let mut payload = vec![0u8; length as usize];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame {
            opcode,
            flags,
            remote_addr,
            rkey,
            imm,
            payload,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_data_frame() {
        let f = Frame {
            opcode: WireOp::WriteImm,
            flags: 0,
            remote_addr: 0xDEAD_BEEF_0000_1000,
            rkey: 0x1234_5678,
            imm: 0x0001_0002,
            payload: vec![1, 2, 3, 4, 5],
        };
        let mut cursor = std::io::Cursor::new(f.encode());
        let g = Frame::read_from(&mut cursor).unwrap().unwrap();
        assert_eq!(f, g);
        assert_eq!(Frame::read_from(&mut cursor).unwrap(), None);
    }

    #[test]
    fn header_is_little_endian_fixed_layout() {
        let f = Frame {
            opcode: WireOp::Write,
            flags: 0,
            remote_addr: 0x0102_0304_0506_0708,
            rkey: 0x0A0B_0C0D,
            imm: 0,
            payload: vec![],
        };
        let bytes = f.encode();
        assert_eq!(&bytes[0..4], b"DPL1");
        assert_eq!(bytes[4], 2); // write opcode
        assert_eq!(&bytes[8..16], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &0x0A0B_0C0Du32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN);
    }

    #[test]
    fn ctrl_frames_round_trip() {
        let adv = Frame::ctrl_mr_advert(0x1000, 4096, 77);
        assert_eq!(adv.parse_mr_advert().unwrap(), (0x1000, 4096, 77));
        assert_eq!(Frame::ctrl_ack(ACK_OK).parse_ack().unwrap(), ACK_OK);
        assert_eq!(Frame::ctrl_credit(8).parse_credit().unwrap(), 8);
    }

    #[test]
    fn bad_magic_is_protocol_error() {
        let mut bytes = Frame::ctrl_ack(0).encode();
        bytes[0] = b'X';
        let mut cursor = std::io::Cursor::new(bytes);
        assert!(matches!(
            Frame::read_from(&mut cursor),
            Err(Error::Protocol(_))
        ));
    }
}
