//! Loading and writing channel files: one file per channel holding
//! little-endian IEEE-754 float64 samples, optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;

use crate::{Error, Recording, Result, Stage};

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Loads one channel per path, in order. Files are read concurrently.
pub fn load_recording<P: AsRef<Path> + Sync>(paths: &[P], rate_hz: f64) -> Result<Recording> {
    if paths.is_empty() {
        return Err(Error::param("at least one channel file is required"));
    }
    let channels = paths
        .par_iter()
        .map(|p| load_channel(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Recording::new(channels, rate_hz, Stage::Raw)
}

/// Reads a single channel file, transparently decompressing gzip.
pub fn load_channel(path: &Path) -> Result<Vec<f64>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        out
    } else {
        raw
    };
    decode_samples(&bytes).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: format!("{} bytes is not a multiple of 8", bytes.len()),
    })
}

fn decode_samples(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

pub fn encode_samples(samples: &[f64]) -> Vec<u8> {
    samples.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes one channel, gzip-compressed when `gzip` is set.
pub fn channel_bytes(samples: &[f64], gzip: bool) -> Vec<u8> {
    let plain = encode_samples(samples);
    if !gzip {
        return plain;
    }
    let mut enc = GzEncoder::new(Vec::with_capacity(plain.len() / 2), Compression::default());
    enc.write_all(&plain).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn write_channel(path: &Path, samples: &[f64], gzip: bool) -> Result<()> {
    crate::fsutil::write_atomic(path, &channel_bytes(samples, gzip))
}

/// File names used for a recording written to a directory: `ch0.dat.gz`, ...
pub fn channel_file_names(channels: usize, gzip: bool) -> Vec<String> {
    let ext = if gzip { "dat.gz" } else { "dat" };
    (0..channels).map(|c| format!("ch{c}.{ext}")).collect()
}

/// Writes every channel of `rec` into `dir`, returning the paths in channel order.
pub fn write_recording(rec: &Recording, dir: &Path, gzip: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = channel_file_names(rec.channels(), gzip)
        .into_iter()
        .map(|n| dir.join(n))
        .collect();
    for (c, path) in paths.iter().enumerate() {
        write_channel(path, rec.channel(c), gzip)?;
    }
    Ok(paths)
}
