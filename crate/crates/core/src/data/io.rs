//! On-disk dataset layout: `manifest.jsonl` plus `frames/*.bin`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{FrameImage, CHANNELS};
use super::taxonomy::{Category, Taxonomy};
use super::{Corpus, Frame, Split, VqaSample};
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"PVQF";
pub const MANIFEST: &str = "manifest.jsonl";
pub const FRAMES_DIR: &str = "frames";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub frame_path: String,
    pub question: String,
    pub answer_idx: usize,
    pub category: String,
    pub split: String,
    pub procedure_id: u32,
}

pub fn frame_path(procedure_id: u32, frame_index: u32) -> String {
    format!("{FRAMES_DIR}/p{procedure_id:03}_f{frame_index:05}.bin")
}

pub fn encode_frame(img: &FrameImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * img.pixels.len());
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&(img.width as u16).to_le_bytes());
    buf.extend_from_slice(&(img.height as u16).to_le_bytes());
    for v in &img.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_frame(path: &Path, img: &FrameImage) -> Result<()> {
    fs::write(path, encode_frame(img)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<FrameImage> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad frame magic",
            path.display()
        )));
    }
    let width = usize::from(u16::from_le_bytes([header[4], header[5]]));
    let height = usize::from(u16::from_le_bytes([header[6], header[7]]));
    let n = CHANNELS * width * height;
    let mut body = Vec::with_capacity(4 * n);
    f.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 4 * n {
        let kind = if body.len() < 4 * n {
            ErrorKind::UnexpectedEof
        } else {
            ErrorKind::InvalidData
        };
        let msg = format!("expected {} pixel bytes, found {}", 4 * n, body.len());
        return Err(Error::io(path, std::io::Error::new(kind, msg)));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FrameImage {
        width,
        height,
        pixels,
    })
}

impl VqaSample {
    pub fn to_record(&self, frame_path: &str) -> Record {
        Record {
            frame_path: frame_path.to_string(),
            question: self.question.clone(),
            answer_idx: self.answer,
            category: self.category.to_string(),
            split: self.split.to_string(),
            procedure_id: self.procedure_id,
        }
    }
}

pub fn write_manifest(dir: &Path, records: &[Record]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Parses and validates manifest lines (1-based line numbers in errors).
pub fn read_manifest(dir: &Path) -> Result<Vec<Record>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let tax = Taxonomy::build();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |detail: String| Error::Parse {
            line: i + 1,
            detail,
        };
        let r: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let cat: Category = r
            .category
            .parse()
            .map_err(|e: Error| parse(e.to_string()))?;
        let _: Split = r.split.parse().map_err(|e: Error| parse(e.to_string()))?;
        match tax.category_of(r.answer_idx) {
            Ok(c) if c == cat => {}
            Ok(c) => {
                return Err(parse(format!(
                    "answer {} belongs to {c}, record says {cat}",
                    r.answer_idx
                )))
            }
            Err(e) => return Err(parse(e.to_string())),
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    let frames = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for f in &corpus.frames {
        write_frame(&dir.join(&f.path), &f.image)?;
    }
    let records: Vec<Record> = corpus
        .samples
        .iter()
        .map(|s| s.to_record(&corpus.frames[s.frame].path))
        .collect();
    write_manifest(dir, &records)
}

/// Loads a dataset; frames are ordered by first reference in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let records = read_manifest(dir)?;
    let mut frames: Vec<Frame> = Vec::new();
    let mut by_path: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let frame = match by_path.get(&r.frame_path) {
            Some(&i) => i,
            None => {
                let image = read_frame(&dir.join(&r.frame_path))?;
                frames.push(Frame {
                    path: r.frame_path.clone(),
                    procedure_id: r.procedure_id,
                    image,
                });
                by_path.insert(r.frame_path.clone(), frames.len() - 1);
                frames.len() - 1
            }
        };
        samples.push(VqaSample {
            frame,
            question: r.question,
            answer: r.answer_idx,
            category: r.category.parse()?,
            split: r.split.parse()?,
            procedure_id: r.procedure_id,
        });
    }
    Ok(Corpus { frames, samples })
}
