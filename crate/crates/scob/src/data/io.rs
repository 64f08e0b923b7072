//! Dataset file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic   4  b"SCOB"
//! version u16 (currently 1)
//! L       u16   classes
//! S       u16   image side
//! lo, hi  u16 u16  positives range
//! noise   f64   background noise sigma
//! seed    u64   generation seed
//! n_train u32
//! n_val   u32
//! then n_train + n_val samples:
//!   id      u32
//!   pixels  3*S*S * f32
//!   y       L * u8
//!   z       L * u8
//!   masks   per class: n_runs u32, then n_runs * (start u32, len u32)
//!           runs of foreground pixels in row-major order; absent classes
//!           have zero runs
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, ScobError};

use super::{Dataset, DatasetSpec, ImageSample};

pub const MAGIC: [u8; 4] = *b"SCOB";
pub const VERSION: u16 = 1;

fn w_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Run-length encode a binary grid: (start, len) pairs over foreground.
fn rle_encode(mask: &[u8]) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] == 1 {
            let start = i;
            while i < mask.len() && mask[i] == 1 {
                i += 1;
            }
            runs.push((start as u32, (i - start) as u32));
        } else {
            i += 1;
        }
    }
    runs
}

fn rle_decode(runs: &[(u32, u32)], len: usize) -> Result<Vec<u8>> {
    let mut mask = vec![0u8; len];
    for &(start, n) in runs {
        let (s, n) = (start as usize, n as usize);
        if s + n > len {
            return Err(ScobError::Format("mask run exceeds grid".into()));
        }
        mask[s..s + n].iter_mut().for_each(|v| *v = 1);
    }
    Ok(mask)
}

fn write_sample(w: &mut impl Write, s: &ImageSample, l: usize) -> Result<()> {
    w_u32(w, s.id)?;
    for &p in &s.pixels {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    w.write_all(&s.y)?;
    w.write_all(&s.z)?;
    for c in 0..l {
        let runs = rle_encode(&s.gt_masks[c]);
        w_u32(w, runs.len() as u32)?;
        for (start, n) in runs {
            w_u32(w, start)?;
            w_u32(w, n)?;
        }
    }
    Ok(())
}

fn read_sample(r: &mut impl Read, l: usize, size: usize) -> Result<ImageSample> {
    let id = r_u32(r)?;
    let n_px = 3 * size * size;
    let mut pixels = Vec::with_capacity(n_px);
    let mut buf = vec![0u8; n_px * 4];
    r.read_exact(&mut buf)?;
    for chunk in buf.chunks_exact(4) {
        pixels.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let mut y = vec![0u8; l];
    r.read_exact(&mut y)?;
    let mut z = vec![0u8; l];
    r.read_exact(&mut z)?;
    let mut gt_masks = Vec::with_capacity(l);
    for _ in 0..l {
        let n_runs = r_u32(r)? as usize;
        if n_runs == 0 {
            gt_masks.push(Vec::new());
            continue;
        }
        let mut runs = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            runs.push((r_u32(r)?, r_u32(r)?));
        }
        gt_masks.push(rle_decode(&runs, size * size)?);
    }
    Ok(ImageSample {
        id,
        pixels,
        y,
        z,
        gt_masks,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w_u16(&mut w, VERSION)?;
    let spec = &dataset.spec;
    w_u16(&mut w, spec.num_classes as u16)?;
    w_u16(&mut w, spec.image_size as u16)?;
    w_u16(&mut w, spec.positives_range.0 as u16)?;
    w_u16(&mut w, spec.positives_range.1 as u16)?;
    w_f64(&mut w, spec.noise_sigma)?;
    w_u64(&mut w, spec.seed)?;
    w_u32(&mut w, dataset.train.len() as u32)?;
    w_u32(&mut w, dataset.val.len() as u32)?;
    for s in dataset.train.iter().chain(dataset.val.iter()) {
        write_sample(&mut w, s, spec.num_classes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(ScobError::Format(format!(
            "bad magic bytes {magic:?}, not a dataset file"
        )));
    }
    let version = r_u16(&mut r)?;
    if version != VERSION {
        return Err(ScobError::Format(format!(
            "dataset version {version} unsupported (expected {VERSION})"
        )));
    }
    let num_classes = r_u16(&mut r)? as usize;
    let image_size = r_u16(&mut r)? as usize;
    let lo = r_u16(&mut r)? as usize;
    let hi = r_u16(&mut r)? as usize;
    let noise_sigma = r_f64(&mut r)?;
    let seed = r_u64(&mut r)?;
    let n_train = r_u32(&mut r)? as usize;
    let n_val = r_u32(&mut r)? as usize;
    let spec = DatasetSpec {
        num_classes,
        image_size,
        num_train: n_train,
        num_val: n_val,
        positives_range: (lo, hi),
        noise_sigma,
        seed,
    };
    spec.validate()?;
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        train.push(read_sample(&mut r, num_classes, image_size)?);
    }
    let mut val = Vec::with_capacity(n_val);
    for _ in 0..n_val {
        val.push(read_sample(&mut r, num_classes, image_size)?);
    }
    Ok(Dataset { spec, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{drop_to_single_positive, generate_dataset};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = DatasetSpec {
            num_train: 12,
            num_val: 4,
            ..DatasetSpec::default()
        };
        let mut ds = generate_dataset(&spec).unwrap();
        drop_to_single_positive(&mut ds, 5).unwrap();
        let dir = std::env::temp_dir().join("scob-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.scob");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("scob-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.scob");
        std::fs::write(&path, b"NOPEnonsense").unwrap();
        assert!(matches!(load_dataset(&path), Err(ScobError::Format(_))));
    }

    #[test]
    fn rle_round_trip() {
        let mask = vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1];
        let runs = rle_encode(&mask);
        assert_eq!(runs, vec![(1, 2), (4, 1), (7, 3)]);
        assert_eq!(rle_decode(&runs, mask.len()).unwrap(), mask);
    }
}
