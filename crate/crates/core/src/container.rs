//! Binary files for sequences and banks.
//!
//! | field      | type            |
//! |------------|-----------------|
//! | magic      | `b"TMRF"`       |
//! | version    | `u16` LE        |
//! | kind       | `u16` LE: 0 sequence, 1 bank |
//! | rows       | `u64` LE        |
//! | width      | `u64` LE        |
//! | classes    | `u64` LE (0 for banks) |
//! | seed       | `u64` LE        |
//! | features   | `rows * width` `f64` LE, row-major |
//! | labels     | `rows` `u32` LE (sequences only) |

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::synth::{Dataset, LabeledSequence};
use crate::tensor::Tensor;
use crate::train::Banks;

const MAGIC: &[u8; 4] = b"TMRF";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Kind {
    Sequence = 0,
    Bank = 1,
}

struct Header {
    kind: Kind,
    rows: usize,
    width: usize,
    classes: usize,
    seed: u64,
}

fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(h.kind as u16).to_le_bytes())?;
    for v in [h.rows as u64, h.width as u64, h.classes as u64, h.seed] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_header(r: &mut impl Read, expect: Kind) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a sequence/bank container".into()));
    }
    let version = read_u16(r)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let kind = match read_u16(r)? {
        0 => Kind::Sequence,
        1 => Kind::Bank,
        k => return Err(Error::Format(format!("unknown container kind {k}"))),
    };
    if kind != expect {
        return Err(Error::Format(format!("expected a {expect:?} container, found {kind:?}")));
    }
    let rows = read_u64(r)? as usize;
    let width = read_u64(r)? as usize;
    let classes = read_u64(r)? as usize;
    let seed = read_u64(r)?;
    if width == 0 {
        return Err(Error::Format("container width is zero".into()));
    }
    Ok(Header {
        kind,
        rows,
        width,
        classes,
        seed,
    })
}

fn write_values(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_values(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_sequence(w: &mut impl Write, seq: &LabeledSequence) -> Result<()> {
    write_header(
        w,
        &Header {
            kind: Kind::Sequence,
            rows: seq.len(),
            width: seq.d_raw(),
            classes: seq.num_phases,
            seed: seq.seed,
        },
    )?;
    write_values(w, seq.features.data())?;
    for &l in &seq.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads features and labels. Generation metadata (segments, action runs) is
/// rebuilt from the labels where possible and otherwise left empty.
pub fn read_sequence(r: &mut impl Read) -> Result<LabeledSequence> {
    let h = read_header(r, Kind::Sequence)?;
    let features = read_values(r, h.rows * h.width)?;
    let mut buf = vec![0u8; h.rows * 4];
    r.read_exact(&mut buf)?;
    let labels = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    LabeledSequence::from_parts(
        Tensor::matrix(h.rows, h.width, features)?,
        labels,
        h.classes,
        h.seed,
    )
}

pub fn write_bank(w: &mut impl Write, bank: &MemoryBank) -> Result<()> {
    write_header(
        w,
        &Header {
            kind: Kind::Bank,
            rows: bank.len(),
            width: bank.width(),
            classes: 0,
            seed: 0,
        },
    )?;
    write_values(w, bank.values())
}

/// Banks are always read back frozen.
pub fn read_bank(r: &mut impl Read) -> Result<MemoryBank> {
    let h = read_header(r, Kind::Bank)?;
    let values = read_values(r, h.rows * h.width)?;
    if h.rows == 0 {
        let mut b = MemoryBank::new(h.width);
        b.freeze();
        return Ok(b);
    }
    MemoryBank::from_features(&Tensor::matrix(h.rows, h.width, values)?, true)
}

pub fn save_sequence(path: &Path, seq: &LabeledSequence) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_sequence(&mut w, seq)?;
    w.flush()?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<LabeledSequence> {
    read_sequence(&mut BufReader::new(std::fs::File::open(path)?))
}

pub fn save_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_bank(&mut w, bank)?;
    w.flush()?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    read_bank(&mut BufReader::new(std::fs::File::open(path)?))
}

/// Lists the files of a saved dataset or bank set, relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u16,
    pub kind: String,
    pub splits: Vec<(String, Vec<String>)>,
}

const MANIFEST: &str = "manifest.json";

fn save_split<T>(
    dir: &Path,
    kind: &str,
    splits: &[(&str, &[T])],
    save: fn(&Path, &T) -> Result<()>,
) -> Result<()> {
    let mut listed = Vec::new();
    for (name, items) in splits {
        std::fs::create_dir_all(dir.join(name))?;
        let mut files = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let rel = format!("{name}/{i:03}.tmrf");
            save(&dir.join(&rel), item)?;
            files.push(rel);
        }
        listed.push((name.to_string(), files));
    }
    let manifest = Manifest {
        version: CONTAINER_VERSION,
        kind: kind.into(),
        splits: listed,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn load_split<T>(
    dir: &Path,
    kind: &str,
    load: fn(&Path) -> Result<T>,
) -> Result<Vec<(String, Vec<T>)>> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
    if manifest.kind != kind || manifest.version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "{} is a {} manifest (version {}), expected {kind}",
            dir.display(),
            manifest.kind,
            manifest.version
        )));
    }
    manifest
        .splits
        .into_iter()
        .map(|(name, files)| {
            let items = files.iter().map(|f| load(&dir.join(f))).collect::<Result<_>>()?;
            Ok((name, items))
        })
        .collect()
}

fn take_split<T>(splits: &mut Vec<(String, Vec<T>)>, name: &str) -> Result<Vec<T>> {
    let i = splits
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("manifest has no {name} split")))?;
    Ok(splits.remove(i).1)
}

/// Writes `train/`, `val/`, `test/` sequence files and a manifest under `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    save_split(
        dir,
        "dataset",
        &[("train", &data.train), ("val", &data.val), ("test", &data.test)],
        save_sequence,
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut splits = load_split(dir, "dataset", load_sequence)?;
    Ok(Dataset {
        train: take_split(&mut splits, "train")?,
        val: take_split(&mut splits, "val")?,
        test: take_split(&mut splits, "test")?,
    })
}

pub fn save_banks(dir: &Path, banks: &Banks) -> Result<()> {
    save_split(
        dir,
        "banks",
        &[("train", &banks.train), ("val", &banks.val)],
        save_bank,
    )
}

pub fn load_banks(dir: &Path) -> Result<Banks> {
    let mut splits = load_split(dir, "banks", load_bank)?;
    Ok(Banks {
        train: take_split(&mut splits, "train")?,
        val: take_split(&mut splits, "val")?,
    })
}
