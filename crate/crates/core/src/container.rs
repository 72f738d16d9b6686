//! Binary scene container plus a key-value text manifest.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "BRDGSCN\0"
//! version   u32      1
//! count     u64      number of records
//! record*   see below
//! checksum  u64      FNV-1a over every preceding byte
//!
//! record:
//!   content_seed u64
//!   domain       u8   0 = S, 1 = F, 2 = T
//!   flags        u8   bit0 quality present, bit1 weight present, bit2 8-bit pixels
//!   quality      f64
//!   weight       f64
//!   height       u16
//!   width        u16
//!   n_boxes      u32
//!   boxes        n_boxes x (x_min f64, y_min f64, x_max f64, y_max f64, class u8)
//!   pixels       3*h*w x u8 (k/255) when bit2 is set, else 3*h*w x f64
//! ```
//!
//! 8-bit storage is used only when every pixel is exactly `k / 255`, so a
//! write/read round trip is bit-exact either way.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{fnv1a, Reader, Writer};
use crate::synth::{BBox, Domain, Image, Scene, CHANNELS};
use crate::CoreError;

const MAGIC: &[u8; 8] = b"BRDGSCN\0";
const VERSION: u32 = 1;
const FLAG_QUALITY: u8 = 1;
const FLAG_WEIGHT: u8 = 2;
const FLAG_U8_PIXELS: u8 = 4;

pub fn encode_scenes(scenes: &[Scene]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(scenes.len() as u64);
    for s in scenes {
        w.u64(s.content_seed);
        w.u8(s.domain.code());
        let quantized = s.image.is_quantized();
        let flags = (s.quality.is_some() as u8 * FLAG_QUALITY)
            | (s.weight.is_some() as u8 * FLAG_WEIGHT)
            | (quantized as u8 * FLAG_U8_PIXELS);
        w.u8(flags);
        w.f64(s.quality.unwrap_or(0.0));
        w.f64(s.weight.unwrap_or(0.0));
        w.u16(s.image.height as u16);
        w.u16(s.image.width as u16);
        w.u32(s.boxes.len() as u32);
        for b in &s.boxes {
            for v in [b.x_min, b.y_min, b.x_max, b.y_max] {
                w.f64(v);
            }
            w.u8(b.class as u8);
        }
        if quantized {
            w.buf.extend(s.image.data.iter().map(|v| (v * 255.0).round() as u8));
        } else {
            s.image.data.iter().for_each(|v| w.f64(*v));
        }
    }
    w.finish()
}

pub fn decode_scenes(buf: &[u8]) -> Result<Vec<Scene>, CoreError> {
    let mut r = Reader::raw(buf);
    if r.take(8)? != MAGIC {
        return Err(r.invalid(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.invalid(8, format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut scenes = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let content_seed = r.u64()?;
        let at = r.pos;
        let domain = Domain::from_code(r.u8()?).ok_or_else(|| r.invalid(at, "unknown domain code"))?;
        let flags = r.u8()?;
        let quality = r.f64()?;
        let weight = r.f64()?;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let n_boxes = r.u32()? as usize;
        let mut boxes = Vec::with_capacity(n_boxes.min(1024));
        for _ in 0..n_boxes {
            let (x_min, y_min, x_max, y_max) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let class = r.u8()? as usize;
            boxes.push(BBox::new(x_min, y_min, x_max, y_max, class));
        }
        let n = CHANNELS * height * width;
        let data = if flags & FLAG_U8_PIXELS != 0 {
            r.take(n)?.iter().map(|&b| b as f64 / 255.0).collect()
        } else {
            let raw = r.take(n * 8)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        scenes.push(Scene {
            image: Image { height, width, data },
            boxes,
            domain,
            content_seed,
            quality: (flags & FLAG_QUALITY != 0).then_some(quality),
            weight: (flags & FLAG_WEIGHT != 0).then_some(weight),
        });
    }
    let body_end = r.pos;
    let stored = r.u64()?;
    if stored != fnv1a(&buf[..body_end]) {
        return Err(r.invalid(body_end, "checksum mismatch"));
    }
    if !r.at_end() {
        return Err(r.invalid(r.pos, "trailing bytes after checksum"));
    }
    Ok(scenes)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), CoreError> {
    std::fs::write(path, encode_scenes(scenes)).map_err(|e| CoreError::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, CoreError> {
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_scenes(&buf)
}

/// Human-readable `key = value` summary of one or more named splits.
pub fn manifest(header: &[(&str, String)], splits: &[(&str, &[Scene])]) -> String {
    let mut m = String::new();
    for (k, v) in header {
        let _ = writeln!(m, "{k} = {v}");
    }
    for (name, scenes) in splits {
        let _ = writeln!(m, "{name}.count = {}", scenes.len());
        let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
        let _ = writeln!(m, "{name}.boxes = {boxes}");
        for (i, s) in scenes.iter().enumerate() {
            let mut line = format!("seed={} domain={} boxes={}", s.content_seed, s.domain.tag(), s.boxes.len());
            if let Some(q) = s.quality {
                let _ = write!(line, " quality={q}");
            }
            if let Some(w) = s.weight {
                let _ = write!(line, " weight={w}");
            }
            let _ = writeln!(m, "{name}.{i} = {line}");
        }
    }
    m
}

/// Parse a manifest back into ordered key-value pairs.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>, CoreError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let (k, v) = t.split_once(" = ").ok_or(CoreError::Parse {
                offset,
                message: format!("manifest line without ` = `: {t:?}"),
            })?;
            out.push((k.to_string(), v.to_string()));
        }
        offset += line.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, AppearanceParams};

    fn sample(n: u64) -> Vec<Scene> {
        (0..n)
            .map(|i| {
                let mut s = gen_scene(i, &AppearanceParams::IDENTITY, Domain::Source).unwrap();
                if i % 2 == 1 {
                    s.domain = Domain::Synthetic;
                    s.quality = Some(0.25 * i as f64);
                    s.weight = Some(0.5);
                }
                s
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let scenes = sample(10);
        let back = decode_scenes(&encode_scenes(&scenes)).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn unquantized_pixels_survive() {
        let mut scenes = sample(2);
        scenes[0].image.data[5] = 0.123456789;
        let back = decode_scenes(&encode_scenes(&scenes)).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_scenes(&[]);
        assert!(decode_scenes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_scenes(&sample(10));
        let half = &bytes[..bytes.len() / 2];
        match decode_scenes(half) {
            Err(CoreError::Parse { offset, .. }) => assert!(offset <= half.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode_scenes(&sample(3));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        assert!(matches!(decode_scenes(&bytes), Err(CoreError::Parse { .. })));
        let mut bytes = encode_scenes(&sample(1));
        bytes[0] = b'X';
        assert!(matches!(decode_scenes(&bytes), Err(CoreError::Parse { offset: 0, .. })));
    }

    #[test]
    fn manifest_parses_back() {
        let scenes = sample(3);
        let text = manifest(&[("format", "test".into())], &[("train_S", &scenes)]);
        let kv = parse_manifest(&text).unwrap();
        assert_eq!(kv[0], ("format".to_string(), "test".to_string()));
        assert!(kv.iter().any(|(k, v)| k == "train_S.count" && v == "3"));
        assert!(kv.iter().any(|(k, v)| k == "train_S.1" && v.contains("weight=0.5")));
        assert!(parse_manifest("no separator here").is_err());
    }
}
