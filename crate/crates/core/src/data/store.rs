//! On-disk dataset: `index.csv` plus one binary file per clip.
//!
//! Clip file layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `DNCL` |
//! | 4 | format version (u32) |
//! | 16 | dims `C, T, H, W` (u32 each) |
//! | 4 | action label (i32, −1 when absent) |
//! | 1 | domain label |
//! | 3 | zero padding |
//! | 4·CTHW | f32 payload, row-major |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{Clip, DatasetSplit, Domain};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_INDEX: &str = "index.csv";
const CLIP_DIR: &str = "clips";
const MAGIC: &[u8; 4] = b"DNCL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const INDEX_HEADER: &str = "id,action,domain,split";

fn clip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(CLIP_DIR).join(format!("{id}.bin"))
}

fn encode(clip: &Clip) -> Result<Vec<u8>> {
    let shape = clip.video.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("clip {} has shape {shape:?}, expected 4 axes", clip.id)));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.video.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let action = clip.action.map_or(-1, |a| a as i32);
    out.extend_from_slice(&action.to_le_bytes());
    out.push(clip.domain.index());
    out.extend_from_slice(&[0; 3]);
    for v in clip.video.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(path: &Path, id: &str, bytes: &[u8]) -> Result<Clip> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing clip header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dims: Vec<usize> = (0..4).map(|k| word(8 + 4 * k) as usize).collect();
    let action = i32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let domain = Domain::from_index(bytes[28]).ok_or_else(|| Error::corrupt(path, "bad domain label"))?;
    let numel: usize = dims.iter().product();
    if bytes.len() != HEADER_LEN + 4 * numel {
        return Err(Error::corrupt(
            path,
            format!("payload holds {} bytes, dims {dims:?} need {}", bytes.len() - HEADER_LEN, 4 * numel),
        ));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::corrupt(path, "voxel outside [0, 1]"));
    }
    Ok(Clip {
        id: id.to_string(),
        video: Tensor::new(&dims, data).map_err(|e| Error::corrupt(path, e.to_string()))?,
        action: (action >= 0).then_some(action as usize),
        domain,
    })
}

pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(CLIP_DIR))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (split_name, clips) in split.parts() {
        for clip in clips {
            if clip.id.is_empty() || clip.id.contains([',', '/', '\\']) {
                return Err(Error::invalid(format!("clip id {:?} is not a valid file stem", clip.id)));
            }
            fs::write(clip_path(dir, &clip.id), encode(clip)?)?;
            let action = clip.action.map_or(String::new(), |a| a.to_string());
            index.push_str(&format!("{},{action},{},{split_name}\n", clip.id, clip.domain.index()));
        }
    }
    let mut f = fs::File::create(dir.join(DATASET_INDEX))?;
    f.write_all(index.as_bytes())?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let index_path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::Path {
        path: index_path.clone(),
        reason: e.to_string(),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::corrupt(&index_path, "unexpected index header"));
    }
    let mut split = DatasetSplit::default();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::corrupt(&index_path, format!("row {}: {what}", n + 1));
        let [id, action, domain, part] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let path = clip_path(dir, id);
        let clip = decode(&path, id, &fs::read(&path)?)?;
        let action: Option<usize> = if action.is_empty() {
            None
        } else {
            Some(action.parse().map_err(|_| bad("action is not an integer"))?)
        };
        let domain = domain
            .parse::<u8>()
            .ok()
            .and_then(Domain::from_index)
            .ok_or_else(|| bad("domain must be 0 or 1"))?;
        if clip.action != action || clip.domain != domain {
            return Err(bad("labels disagree with the clip header"));
        }
        let dest = match (domain, part) {
            (Domain::Source, "train") => &mut split.train_source,
            (Domain::Target, "train") => &mut split.train_target,
            (Domain::Source, "test") => &mut split.test_source,
            (Domain::Target, "test") => &mut split.test_target,
            _ => return Err(bad("split must be train or test")),
        };
        dest.push(clip);
    }
    Ok(split)
}
