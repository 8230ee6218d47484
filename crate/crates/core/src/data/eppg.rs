//! EPPG binary dataset format.
//!
//! Layout, all integers little-endian:
//!   magic            6 bytes  "EPPG1\n"
//!   header           6 x u32  samples, k, t, h, w, c
//!   target_index     u32
//!   predictor names  c entries of (u16 length, UTF-8 bytes)
//!   time_index       samples x i64
//!   forecasts        f32 row-major [samples, k, t, h, w, c]
//!   observations     f32 row-major [samples, t, h, w]
//!
//! Files must round-trip bit-exactly. NaN payloads are rejected at load
//! time; missing values are not representable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ForecastDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"EPPG1\n";

pub fn save_eppg(ds: &ForecastDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let shape = ds.forecasts.shape();
    for &dim in shape {
        out.write_all(
            &u32::try_from(dim)
                .map_err(|_| dim_overflow(dim))?
                .to_le_bytes(),
        )?;
    }
    out.write_all(&(ds.target_index as u32).to_le_bytes())?;
    for name in &ds.predictor_names {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("predictor name '{name}' exceeds 65535 bytes")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
    }
    for &ti in &ds.time_index {
        out.write_all(&ti.to_le_bytes())?;
    }
    write_f32s(&mut out, ds.forecasts.data())?;
    write_f32s(&mut out, ds.observations.data())?;
    out.flush()?;
    Ok(())
}

pub fn load_eppg(path: impl AsRef<Path>) -> Result<ForecastDataset> {
    let path = path.as_ref();
    let file_len = std::fs::metadata(path)?.len();
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 6];
    read_exact(&mut reader, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an EPPG file".into()));
    }

    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = read_u32(&mut reader)? as usize;
    }
    let [samples, _k, t, h, w, c] = dims;
    let target_index = read_u32(&mut reader)? as usize;

    let mut consumed = 6u64 + 24 + 4;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = read_u16(&mut reader)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut reader, &mut buf)?;
        consumed += 2 + len as u64;
        names.push(
            String::from_utf8(buf)
                .map_err(|_| Error::Format("predictor name is not valid UTF-8".into()))?,
        );
    }

    let forecast_count = checked_product(&dims)?;
    let obs_count = checked_product(&[samples, t, h, w])?;
    let expected_payload = (samples as u64)
        .checked_mul(8)
        .and_then(|v| v.checked_add(forecast_count as u64 * 4))
        .and_then(|v| v.checked_add(obs_count as u64 * 4))
        .ok_or_else(|| dim_overflow(samples))?;
    let actual_payload = file_len.saturating_sub(consumed);
    if actual_payload != expected_payload {
        return Err(Error::Format(format!(
            "EPPG payload size mismatch: expected {expected_payload} bytes after the name table, found {actual_payload}"
        )));
    }

    let mut time_index = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut buf = [0u8; 8];
        read_exact(&mut reader, &mut buf)?;
        time_index.push(i64::from_le_bytes(buf));
    }
    let forecasts = read_f32s(&mut reader, forecast_count)?;
    let observations = read_f32s(&mut reader, obs_count)?;

    ForecastDataset::new(
        Tensor::new(dims.to_vec(), forecasts)?,
        Tensor::new(vec![samples, t, h, w], observations)?,
        names,
        target_index,
        time_index,
    )
}

fn dim_overflow(dim: usize) -> Error {
    Error::Format(format!("dimension {dim} overflows the EPPG header"))
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    let mut acc = 1usize;
    for &d in dims {
        acc = acc
            .checked_mul(d)
            .ok_or_else(|| Error::Format("EPPG dimensions overflow".into()))?;
    }
    Ok(acc)
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("EPPG file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(reader: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(reader, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn write_f32s(out: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 * 1024);
    for chunk in values.chunks(4 * 1024) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_f32s(reader: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut values = Vec::with_capacity(count);
    let mut buf = vec![0u8; 16 * 1024];
    let mut remaining = count * 4;
    while remaining > 0 {
        let take = remaining.min(buf.len());
        read_exact(reader, &mut buf[..take])?;
        for chunk in buf[..take].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        remaining -= take;
    }
    Ok(values)
}
