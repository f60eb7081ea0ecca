//! Messages exchanged between the frame server and a viewer.
//!
//! Control messages are JSON text. Frames are binary: a 10-byte header
//! `{u32 frame_id, u8 eye_count, u16 width, u16 height, u8 encoding}`
//! followed by one `u32` length-prefixed payload per eye. Integers are
//! little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_png_rgb8, encode_png_rgb8, RgbImage};
use crate::metrics::TimingBreakdown;

pub const PROTOCOL_VERSION: u32 = 1;
pub const FRAME_HEADER_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
    },
    Pose {
        pos: [f64; 3],
        /// `[w, x, y, z]`, head frame to world.
        quat: [f64; 4],
        /// Display coordinates in `[0, 1]²`, origin top left.
        gaze: [f64; 2],
        #[serde(default = "stereo_default")]
        stereo: bool,
        t_ms: f64,
    },
    Config,
}

fn stereo_default() -> bool {
    true
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self> {
        let msg: ClientMessage = serde_json::from_str(text).map_err(|e| Error::Protocol(e.to_string()))?;
        if let ClientMessage::Pose {
            pos, quat, gaze, t_ms, ..
        } = &msg
        {
            let finite = pos.iter().chain(quat).chain(gaze).all(|v| v.is_finite()) && t_ms.is_finite();
            if !finite {
                return Err(Error::Protocol("pose contains non-finite values".into()));
            }
            if quat.iter().all(|&v| v == 0.0) {
                return Err(Error::Protocol("pose quaternion is zero".into()));
            }
        }
        Ok(msg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Hello {
        version: u32,
        server: String,
    },
    /// Sent before closing a connection whose handshake failed.
    Reject {
        version: u32,
        reason: String,
    },
    Error {
        kind: String,
        message: String,
    },
    Config {
        config: serde_json::Value,
    },
    Stats {
        frame_id: u32,
        /// Client timestamp of the pose used for the frame.
        pose_t_ms: f64,
        evaluations: u64,
        #[serde(flatten)]
        timing: TimingBreakdown,
    },
}

impl ServerMessage {
    pub fn error(e: &Error) -> Self {
        ServerMessage::Error {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Protocol(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum FrameEncoding {
    Png = 0,
    Raw = 1,
}

impl FrameEncoding {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(FrameEncoding::Png),
            1 => Some(FrameEncoding::Raw),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub frame_id: u32,
    pub eye_count: u8,
    pub width: u16,
    pub height: u16,
    pub encoding: FrameEncoding,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        b[0..4].copy_from_slice(&self.frame_id.to_le_bytes());
        b[4] = self.eye_count;
        b[5..7].copy_from_slice(&self.width.to_le_bytes());
        b[7..9].copy_from_slice(&self.height.to_le_bytes());
        b[9] = self.encoding as u8;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < FRAME_HEADER_LEN {
            return Err(Error::Protocol(format!(
                "frame header needs {FRAME_HEADER_LEN} bytes, got {}",
                b.len()
            )));
        }
        let encoding = FrameEncoding::from_byte(b[9])
            .ok_or_else(|| Error::Protocol(format!("unknown frame encoding {}", b[9])))?;
        Ok(Self {
            frame_id: u32::from_le_bytes(b[0..4].try_into().expect("4 bytes")),
            eye_count: b[4],
            width: u16::from_le_bytes([b[5], b[6]]),
            height: u16::from_le_bytes([b[7], b[8]]),
            encoding,
        })
    }
}

/// Packs one image per eye into a binary frame message.
pub fn encode_frame(frame_id: u32, eyes: &[&RgbImage], encoding: FrameEncoding) -> Result<Vec<u8>> {
    let first = eyes.first().ok_or(Error::EmptyBatch)?;
    let (w, h) = first.dims();
    for im in eyes {
        if im.dims() != (w, h) {
            return Err(Error::DimensionMismatch((w, h), im.dims()));
        }
    }
    let (Ok(w16), Ok(h16), Ok(count)) = (u16::try_from(w), u16::try_from(h), u8::try_from(eyes.len())) else {
        return Err(Error::Protocol(format!(
            "frame {w}x{h} with {} eyes does not fit the header",
            eyes.len()
        )));
    };
    let header = FrameHeader {
        frame_id,
        eye_count: count,
        width: w16,
        height: h16,
        encoding,
    };
    let mut out = header.to_bytes().to_vec();
    for im in eyes {
        let rgb = im.to_srgb8();
        let payload = match encoding {
            FrameEncoding::Png => encode_png_rgb8(w, h, &rgb)?,
            FrameEncoding::Raw => rgb,
        };
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

/// Splits a binary frame into its header and per-eye RGB8 pixels.
pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, Vec<Vec<u8>>)> {
    let header = FrameHeader::from_bytes(bytes)?;
    let (w, h) = (header.width as usize, header.height as usize);
    let mut pos = FRAME_HEADER_LEN;
    let mut eyes = Vec::with_capacity(header.eye_count as usize);
    for i in 0..header.eye_count {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Protocol(format!("eye {i}: missing length prefix")))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        pos += 4;
        let payload = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Protocol(format!("eye {i}: payload truncated")))?;
        pos += len;
        let rgb = match header.encoding {
            FrameEncoding::Raw => payload.to_vec(),
            FrameEncoding::Png => {
                let (pw, ph, rgb) = decode_png_rgb8(payload)?;
                if (pw, ph) != (w, h) {
                    return Err(Error::DimensionMismatch((w, h), (pw, ph)));
                }
                rgb
            }
        };
        if rgb.len() != w * h * 3 {
            return Err(Error::Protocol(format!(
                "eye {i}: {} bytes for a {w}x{h} image",
                rgb.len()
            )));
        }
        eyes.push(rgb);
    }
    if pos != bytes.len() {
        return Err(Error::Protocol(format!(
            "{} trailing bytes after frame",
            bytes.len() - pos
        )));
    }
    Ok((header, eyes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foveation::StereoMode;
    use crate::metrics::Stat;
    use proptest::prelude::*;

    fn image(w: usize, h: usize, seed: u32) -> RgbImage {
        let mut im = RgbImage::new(w, h);
        for (i, v) in im.data.iter_mut().enumerate() {
            *v = ((i as u32 * 37 + seed * 11) % 256) as f32 / 255.0;
        }
        im
    }

    #[test]
    fn pose_message_parses() {
        let text = r#"{"type":"pose","pos":[0,0.1,0],"quat":[1,0,0,0],"gaze":[0.5,0.5],"stereo":true,"t_ms":12.5}"#;
        match ClientMessage::parse(text).unwrap() {
            ClientMessage::Pose {
                pos,
                gaze,
                stereo,
                t_ms,
                ..
            } => {
                assert_eq!(pos, [0.0, 0.1, 0.0]);
                assert_eq!(gaze, [0.5, 0.5]);
                assert!(stereo);
                assert_eq!(t_ms, 12.5);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            ClientMessage::parse(r#"{"type":"config"}"#).unwrap(),
            ClientMessage::Config
        );
        for bad in [
            "not json",
            r#"{"type":"warp"}"#,
            r#"{"type":"pose","pos":[0,0,0],"quat":[0,0,0,0],"gaze":[0.5,0.5],"t_ms":1}"#,
            r#"{"type":"pose","pos":[0,0],"quat":[1,0,0,0],"gaze":[0.5,0.5],"t_ms":1}"#,
            r#"{"type":"hello","version":1,"extra":2}"#,
        ] {
            assert!(matches!(ClientMessage::parse(bad), Err(Error::Protocol(_))), "{bad}");
        }
    }

    #[test]
    fn stats_carry_breakdown_fields() {
        let t = TimingBreakdown {
            mode: StereoMode::Adaptive,
            frames: 3,
            fovea_ms: Stat { mean: 1.0, p95: 2.0 },
            periphery_ms: Stat::default(),
            blend_ms: Stat::default(),
            total_ms: Stat { mean: 4.0, p95: 5.0 },
        };
        let msg = ServerMessage::Stats {
            frame_id: 7,
            pose_t_ms: 3.0,
            evaluations: 10,
            timing: t,
        };
        let v: serde_json::Value = serde_json::from_str(&msg.to_json()).unwrap();
        assert_eq!(v["type"], "stats");
        assert_eq!(v["fovea_ms"]["p95"], 2.0);
        assert_eq!(v["mode"], "adaptive");
        assert_eq!(ServerMessage::parse(&msg.to_json()).unwrap(), msg);
    }

    #[test]
    fn header_layout() {
        let h = FrameHeader {
            frame_id: 0x0403_0201,
            eye_count: 2,
            width: 0x0605,
            height: 0x0807,
            encoding: FrameEncoding::Raw,
        };
        assert_eq!(h.to_bytes(), [1, 2, 3, 4, 2, 5, 6, 7, 8, 1]);
        assert_eq!(FrameHeader::from_bytes(&h.to_bytes()).unwrap(), h);
        let mut bad = h.to_bytes();
        bad[9] = 9;
        assert!(FrameHeader::from_bytes(&bad).is_err());
    }

    #[test]
    fn frame_round_trip_both_encodings() {
        let (l, r) = (image(13, 7, 1), image(13, 7, 2));
        for enc in [FrameEncoding::Png, FrameEncoding::Raw] {
            let bytes = encode_frame(42, &[&l, &r], enc).unwrap();
            let (h, eyes) = decode_frame(&bytes).unwrap();
            assert_eq!(
                (h.frame_id, h.eye_count, h.width, h.height, h.encoding),
                (42, 2, 13, 7, enc)
            );
            assert_eq!(eyes[0], l.to_srgb8());
            assert_eq!(eyes[1], r.to_srgb8());
            assert!(decode_frame(&bytes[..bytes.len() - 1]).is_err());
        }
        assert!(encode_frame(0, &[&l, &image(5, 5, 0)], FrameEncoding::Raw).is_err());
    }

    proptest! {
        #[test]
        fn raw_frames_round_trip(w in 1usize..20, h in 1usize..20, id: u32, eyes in 1usize..3) {
            let ims: Vec<RgbImage> = (0..eyes).map(|i| image(w, h, i as u32)).collect();
            let refs: Vec<&RgbImage> = ims.iter().collect();
            let bytes = encode_frame(id, &refs, FrameEncoding::Raw).unwrap();
            prop_assert_eq!(bytes.len(), FRAME_HEADER_LEN + eyes * (4 + w * h * 3));
            let (hd, out) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(hd.frame_id, id);
            prop_assert_eq!(out.len(), eyes);
        }
    }
}
