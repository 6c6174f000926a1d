//! On-disk clip format (VVCL) and dataset manifest (VVMF).
//!
//! Clip file, little-endian:
//! `"VVCL" | version u32 | T u16 | H u16 | W u16 | C u16 | attr_count u16 |
//! attr values u16 x count (0xFFFF = unlabeled) | zero pad to 24 + 4*count |
//! frames u8, t-major then C,H,W row-major`.
//!
//! Manifest: UTF-8 lines, header `#VVMF1 attr=<name:K,...>`, then one
//! record per clip: `path<TAB>split<TAB>labeled(0/1)<TAB>labels-or-"-"`.

use std::fs;
use std::path::Path;

use super::{AttributeSet, AttributeSpec, DatasetManifest, ManifestEntry, Split, VideoClip};
use crate::{Result, VvError};

const CLIP_MAGIC: &[u8; 4] = b"VVCL";
const CLIP_VERSION: u32 = 1;
const UNLABELED: u16 = 0xFFFF;

fn format_err(offset: u64, msg: impl Into<String>) -> VvError {
    VvError::Format {
        offset,
        msg: msg.into(),
    }
}

/// Quantize [0,1] to a byte; values cross the wire as v/255.
fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_clip(clip: &VideoClip, attr_count: usize, path: &Path) -> Result<()> {
    clip.validate()?;
    if let Some(labels) = &clip.labels {
        if labels.indices().len() != attr_count {
            return Err(VvError::Contract(format!(
                "clip {} has {} labels but the dataset declares {attr_count} attributes",
                clip.clip_id,
                labels.indices().len()
            )));
        }
    }
    let header_len = 24 + 4 * attr_count;
    let mut buf = Vec::with_capacity(header_len + clip.frames.len());
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for dim in [clip.t, clip.h, clip.w, clip.c, attr_count] {
        let v = u16::try_from(dim).map_err(|_| {
            VvError::Parameter(format!("dimension {dim} exceeds the u16 clip header"))
        })?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..attr_count {
        let v = match &clip.labels {
            Some(labels) => labels.get(i) as u16,
            None => UNLABELED,
        };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.resize(header_len, 0);
    buf.extend(clip.frames.iter().map(|&v| quantize(v)));
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let buf = fs::read(path)?;
    if buf.len() < 18 {
        return Err(format_err(buf.len() as u64, "clip header truncated"));
    }
    if &buf[0..4] != CLIP_MAGIC {
        return Err(format_err(0, "bad magic, expected \"VVCL\""));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(format_err(4, format!("unsupported clip version {version}")));
    }
    let read_u16 = |off: usize| u16::from_le_bytes(buf[off..off + 2].try_into().unwrap());
    let t = read_u16(8) as usize;
    let h = read_u16(10) as usize;
    let w = read_u16(12) as usize;
    let c = read_u16(14) as usize;
    let attr_count = read_u16(16) as usize;
    let header_len = 24 + 4 * attr_count;
    if buf.len() < header_len {
        return Err(format_err(buf.len() as u64, "clip header truncated"));
    }
    let mut values = Vec::with_capacity(attr_count);
    for i in 0..attr_count {
        values.push(read_u16(18 + 2 * i));
    }
    let labels = if values.iter().any(|&v| v == UNLABELED) {
        None
    } else {
        Some(AttributeSet::new(values.iter().map(|&v| v as usize).collect()))
    };

    let n_pixels = t * c * h * w;
    if buf.len() != header_len + n_pixels {
        return Err(format_err(
            buf.len() as u64,
            format!(
                "payload truncated: expected {} bytes, file has {}",
                header_len + n_pixels,
                buf.len()
            ),
        ));
    }
    let frames: Vec<f32> = buf[header_len..]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clip = VideoClip {
        t,
        h,
        w,
        c,
        frames,
        labels,
        clip_id,
    };
    clip.validate().map_err(|e| format_err(header_len as u64, e.to_string()))?;
    Ok(clip)
}

/// Parse one binary PGM (P5) or PPM (P6) image into `[C,H,W]` values.
fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    fn next_token(buf: &[u8], pos: &mut usize) -> Result<String> {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format_err(start as u64, "truncated image header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
    }

    let buf = fs::read(path)?;
    let text_err = |msg: &str| format_err(0, format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let magic = next_token(&buf, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(text_err("expected P5 or P6 image")),
    };
    let w: usize = next_token(&buf, &mut pos)?.parse().map_err(|_| text_err("bad width"))?;
    let h: usize = next_token(&buf, &mut pos)?.parse().map_err(|_| text_err("bad height"))?;
    let maxval: usize = next_token(&buf, &mut pos)?.parse().map_err(|_| text_err("bad maxval"))?;
    if maxval != 255 {
        return Err(text_err("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    let expected = w * h * channels;
    if buf.len() < pos + expected {
        return Err(format_err(buf.len() as u64, "image payload truncated"));
    }
    // interleaved on disk, planar in memory
    let mut values = vec![0.0f32; expected];
    for px in 0..w * h {
        for ch in 0..channels {
            values[ch * w * h + px] = f32::from(buf[pos + px * channels + ch]) / 255.0;
        }
    }
    Ok((channels, h, w, values))
}

/// Generic raw-clip ingestion: read every `frame_*.pgm` / `frame_*.ppm`
/// under `dir` (sorted by name) as the frames of one clip.
pub fn ingest_frame_dir(dir: &Path) -> Result<VideoClip> {
    let mut paths: Vec<std::path::PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            let ext = p.extension().map(|e| e.to_string_lossy().into_owned());
            name.is_some_and(|n| n.starts_with("frame_"))
                && matches!(ext.as_deref(), Some("pgm") | Some("ppm"))
        })
        .collect();
    if paths.is_empty() {
        return Err(VvError::Data(format!(
            "no frame_*.pgm or frame_*.ppm files under {}",
            dir.display()
        )));
    }
    paths.sort();
    let mut frames = Vec::new();
    let mut geom: Option<(usize, usize, usize)> = None;
    for p in &paths {
        let (c, h, w, values) = read_pnm(p)?;
        match geom {
            None => geom = Some((c, h, w)),
            Some(g) if g != (c, h, w) => {
                return Err(VvError::Data(format!(
                    "frame {} geometry differs from the first frame",
                    p.display()
                )))
            }
            _ => {}
        }
        frames.extend(values);
    }
    let (c, h, w) = geom.unwrap();
    let clip = VideoClip {
        t: paths.len(),
        h,
        w,
        c,
        frames,
        labels: None,
        clip_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    clip.validate()?;
    Ok(clip)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("#VVMF1 attr=");
    let attrs: Vec<String> = manifest
        .spec
        .iter()
        .map(|(name, k)| format!("{name}:{k}"))
        .collect();
    out.push_str(&attrs.join(","));
    out.push('\n');
    for e in &manifest.entries {
        let labels = match &e.labels {
            Some(l) => l
                .indices()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.path,
            e.split.as_str(),
            u8::from(e.labeled),
            labels
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(0, "empty manifest"))?;
    let spec_str = header
        .strip_prefix("#VVMF1 attr=")
        .ok_or_else(|| format_err(0, "manifest header must start with \"#VVMF1 attr=\""))?;
    let mut attrs = Vec::new();
    for part in spec_str.split(',') {
        let (name, k) = part
            .split_once(':')
            .ok_or_else(|| format_err(0, format!("bad attribute declaration {part:?}")))?;
        let k: usize = k
            .parse()
            .map_err(|_| format_err(0, format!("bad category count in {part:?}")))?;
        attrs.push((name.to_string(), k));
    }
    let spec = AttributeSpec::new(attrs)
        .map_err(|e| format_err(0, e.to_string()))?;
    offset += header.len() as u64 + 1;

    let mut entries = Vec::new();
    for line in lines {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(format_err(
                line_offset,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let split = match fields[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(format_err(line_offset, format!("unknown split {other:?}")));
            }
        };
        let labeled = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(format_err(
                    line_offset,
                    format!("labeled flag must be 0 or 1, got {other:?}"),
                ));
            }
        };
        let labels = if fields[3] == "-" {
            None
        } else {
            let mut indices = Vec::new();
            for piece in fields[3].split(',') {
                indices.push(piece.parse::<usize>().map_err(|_| {
                    format_err(line_offset, format!("bad label index {piece:?}"))
                })?);
            }
            let set = AttributeSet::new(indices);
            spec.validate(&set)
                .map_err(|e| format_err(line_offset, e.to_string()))?;
            Some(set)
        };
        entries.push(ManifestEntry {
            path: fields[0].to_string(),
            split,
            labeled,
            labels,
        });
    }
    Ok(DatasetManifest { spec, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::{generate_clip, FrameGeometry};
    use proptest::prelude::*;

    fn sample_clip(labeled: bool) -> VideoClip {
        let spec = AttributeSpec::sprites(4, 4).unwrap();
        let attrs = AttributeSet::new(vec![2, 3]);
        let geom = FrameGeometry { h: 32, w: 32, c: 1 };
        let mut clip = generate_clip(&spec, &attrs, 8, geom, 5, "sample").unwrap();
        if !labeled {
            clip.labels = None;
        }
        clip
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vvcl");
        let p2 = dir.path().join("b.vvcl");
        save_clip(&sample_clip(true), 2, &p1).unwrap();
        let loaded = load_clip(&p1).unwrap();
        save_clip(&loaded, 2, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn header_is_24_bytes_without_attributes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.vvcl");
        let mut clip = sample_clip(false);
        clip.labels = None;
        save_clip(&clip, 0, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 24 + 8 * 32 * 32);
        assert_eq!(&bytes[0..4], b"VVCL");
    }

    #[test]
    fn unlabeled_clip_carries_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.vvcl");
        save_clip(&sample_clip(false), 2, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[18..22], &[0xFF, 0xFF, 0xFF, 0xFF]);
        assert!(load_clip(&p).unwrap().labels.is_none());
    }

    #[test]
    fn full_value_round_trips_exactly() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(f32::from(255u8) / 255.0, 1.0);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn bad_magic_is_format_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vvcl");
        fs::write(&p, b"NOPExxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        match load_clip(&p) {
            Err(VvError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vvcl");
        save_clip(&sample_clip(true), 2, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 100);
        fs::write(&p, &bytes).unwrap();
        match load_clip(&p) {
            Err(VvError::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvmf");
        let manifest = DatasetManifest {
            spec: AttributeSpec::sprites(4, 4).unwrap(),
            entries: vec![
                ManifestEntry {
                    path: "clips/a.vvcl".into(),
                    split: Split::Train,
                    labeled: true,
                    labels: Some(AttributeSet::new(vec![1, 2])),
                },
                ManifestEntry {
                    path: "clips/b.vvcl".into(),
                    split: Split::Test,
                    labeled: false,
                    labels: None,
                },
            ],
        };
        save_manifest(&manifest, &p).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.spec, manifest.spec);
        assert_eq!(loaded.entries.len(), 2);
        assert_eq!(loaded.entries[0].labels, manifest.entries[0].labels);
        assert_eq!(loaded.entries[1].split, Split::Test);
    }

    proptest! {
        #[test]
        fn quantization_is_idempotent(v in 0.0f32..=1.0) {
            let q1 = quantize(v);
            let back = f32::from(q1) / 255.0;
            prop_assert_eq!(quantize(back), q1);
        }

        #[test]
        fn clip_round_trip_preserves_quantized_frames(seed in 0u64..500) {
            let dir = tempfile::tempdir().unwrap();
            let spec = AttributeSpec::sprites(4, 4).unwrap();
            let attrs = spec.from_joint_index((seed % 16) as usize).unwrap();
            let geom = FrameGeometry { h: 16, w: 16, c: 1 };
            let clip = generate_clip(&spec, &attrs, 3, geom, seed, "p").unwrap();
            let p = dir.path().join("p.vvcl");
            save_clip(&clip, 2, &p).unwrap();
            let loaded = load_clip(&p).unwrap();
            prop_assert_eq!(loaded.labels, clip.labels);
            let requantized: Vec<u8> = clip.frames.iter().map(|&v| quantize(v)).collect();
            let loaded_q: Vec<u8> = loaded.frames.iter().map(|&v| quantize(v)).collect();
            prop_assert_eq!(requantized, loaded_q);
        }
    }
}
