//! Dataset file: header (magic "SMND", version, config digest), then one
//! image payload + annotation block per record. Annotations are also
//! exportable as JSON lines.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::scene::{Instance, SceneConfig, SceneRecord};
use crate::digest;
use smn_tensor::io as tio;

pub const MAGIC: &[u8; 4] = b"SMND";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    let mut b = [0u8; 4];
    LittleEndian::write_u32(&mut b, v);
    out.extend_from_slice(&b);
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    let mut b = [0u8; 8];
    LittleEndian::write_u64(&mut b, v);
    out.extend_from_slice(&b);
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    let mut b = [0u8; 8];
    LittleEndian::write_f64(&mut b, v);
    out.extend_from_slice(&b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Dataset {
                index: self.record,
                msg: format!("truncated: wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }
}

pub fn encode_dataset(cfg: &SceneConfig, records: &[SceneRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&digest::config_digest(cfg));
    put_u64(&mut out, records.len() as u64);
    for rec in records {
        put_u64(&mut out, rec.seed);
        put_u32(&mut out, rec.instances.len() as u32);
        for inst in &rec.instances {
            put_u32(&mut out, inst.class_id as u32);
            for v in [inst.bbox.x1, inst.bbox.y1, inst.bbox.x2, inst.bbox.y2] {
                put_f64(&mut out, v);
            }
        }
        let img = tio::encode_tensor(&rec.image, tio::Dtype::F32);
        put_u64(&mut out, img.len() as u64);
        out.extend_from_slice(&img);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<SceneRecord>, [u8; 32])> {
    let mut r = Reader { buf: bytes, pos: 0, record: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Dataset { index: 0, msg: "bad magic, expected SMND".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Dataset { index: 0, msg: format!("unsupported version {version}") });
    }
    let mut cfg_digest = [0u8; 32];
    cfg_digest.copy_from_slice(r.take(32)?);
    let count = r.u64()? as usize;
    if count > 10_000_000 {
        return Err(Error::Dataset { index: 0, msg: format!("unreasonable record count {count}") });
    }
    let mut records = Vec::with_capacity(count.min(65536));
    for i in 0..count {
        r.record = i;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        if n > 1_000_000 {
            return Err(Error::Dataset { index: i, msg: format!("unreasonable instance count {n}") });
        }
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let class_id = r.u32()? as usize;
            let x1 = r.f64()?;
            let y1 = r.f64()?;
            let x2 = r.f64()?;
            let y2 = r.f64()?;
            instances.push(Instance { class_id, bbox: BBox::new(x1, y1, x2, y2) });
        }
        let img_len = r.u64()? as usize;
        let img_bytes = r.take(img_len)?;
        let image = tio::decode_tensor(img_bytes)
            .map_err(|e| Error::Dataset { index: i, msg: format!("image: {e}") })?;
        records.push(SceneRecord { image, instances, seed });
    }
    Ok((records, cfg_digest))
}

pub fn write_dataset(path: &Path, cfg: &SceneConfig, records: &[SceneRecord]) -> Result<()> {
    std::fs::write(path, encode_dataset(cfg, records))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SceneRecord>, [u8; 32])> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("dataset file {}", path.display())));
    }
    let bytes = std::fs::read(path)?;
    decode_dataset(&bytes)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    seed: u64,
    boxes: Vec<[f64; 4]>,
    class_ids: Vec<usize>,
}

/// Detections file: one JSON array per line, one line per image, in dataset
/// order. Missing trailing lines mean empty detection lists.
pub fn write_detections_jsonl(path: &Path, dets: &[Vec<crate::detector::Detection>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for row in dets {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl(path: &Path, n_images: usize) -> Result<Vec<Vec<crate::detector::Detection>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("detections file {}", path.display())));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<Vec<crate::detector::Detection>> = Vec::with_capacity(n_images);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            out.push(Vec::new());
            continue;
        }
        let row: Vec<crate::detector::Detection> = serde_json::from_str(line)
            .map_err(|e| Error::Dataset { index: i, msg: format!("detections: {e}") })?;
        out.push(row);
    }
    out.resize_with(n_images.max(out.len()), Vec::new);
    Ok(out)
}

/// Annotation export: one JSON object per line.
pub fn write_annotations_jsonl(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for rec in records {
        let row = JsonRecord {
            seed: rec.seed,
            boxes: rec
                .instances
                .iter()
                .map(|i| [i.bbox.x1, i.bbox.y1, i.bbox.x2, i.bbox.y2])
                .collect(),
            class_ids: rec.instances.iter().map(|i| i.class_id).collect(),
        };
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
