//! EPPT parameter checkpoint format.
//!
//! Layout, integers little-endian:
//!   magic       6 bytes "EPPT1\n"
//!   config      13 x u32: k, t, h, w, c, c_tilde, n_blocks, h_n, m_n,
//!               variable_kind (0 gaussian, 1 non-negative), target_index,
//!               seed_lo, seed_hi
//!   tensors     for each parameter, in `TransformerParams::iter_named`
//!               order followed by `norm.predictor_mean` and
//!               `norm.predictor_std`: u16 name length, UTF-8 name,
//!               u8 rank, u32 extents[rank], f32 values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{init_params, Model, ModelConfig};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::VariableKind;

const MAGIC: &[u8; 6] = b"EPPT1\n";

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let cfg = &model.config;
    let fields = [
        cfg.k,
        cfg.t,
        cfg.h,
        cfg.w,
        cfg.c,
        cfg.c_tilde,
        cfg.n_blocks,
        cfg.h_n,
        cfg.m_n,
        cfg.variable_kind.as_u32() as usize,
        model.target_index,
        (cfg.seed & 0xffff_ffff) as usize,
        (cfg.seed >> 32) as usize,
    ];
    for f in fields {
        let v =
            u32::try_from(f).map_err(|_| Error::Format(format!("config field {f} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for (name, tensor) in model.params.iter_named() {
        write_tensor(&mut out, &name, tensor)?;
    }
    let mean = Tensor::new(
        vec![cfg.c],
        model.norm.mean.iter().map(|&v| v as f32).collect(),
    )?;
    let std = Tensor::new(
        vec![cfg.c],
        model.norm.std.iter().map(|&v| v as f32).collect(),
    )?;
    write_tensor(&mut out, "norm.predictor_mean", &mean)?;
    write_tensor(&mut out, "norm.predictor_std", &std)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut reader, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an EPPT checkpoint".into()));
    }
    let mut fields = [0u32; 13];
    for f in fields.iter_mut() {
        *f = read_u32(&mut reader)?;
    }
    let config = ModelConfig {
        k: fields[0] as usize,
        t: fields[1] as usize,
        h: fields[2] as usize,
        w: fields[3] as usize,
        c: fields[4] as usize,
        c_tilde: fields[5] as usize,
        n_blocks: fields[6] as usize,
        h_n: fields[7] as usize,
        m_n: fields[8] as usize,
        variable_kind: VariableKind::from_u32(fields[9])?,
        seed: fields[11] as u64 | ((fields[12] as u64) << 32),
    };
    config.validate()?;
    let target_index = fields[10] as usize;
    if target_index >= config.c {
        return Err(Error::Format(format!(
            "checkpoint target index {target_index} out of range for {} predictors",
            config.c
        )));
    }

    // Template gives the expected name/shape sequence; values are replaced.
    let mut params = init_params::<f32>(&config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .iter_named()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .chain([
            ("norm.predictor_mean".to_string(), vec![config.c]),
            ("norm.predictor_std".to_string(), vec![config.c]),
        ])
        .collect();

    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let (got_name, tensor) = read_tensor(&mut reader)?;
        if &got_name != name {
            return Err(Error::Format(format!(
                "checkpoint tensor '{got_name}' where '{name}' was expected"
            )));
        }
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                shape
            )));
        }
        loaded.push(tensor);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "checkpoint has trailing bytes after the last tensor".into(),
        ));
    }

    let std_tensor = loaded.pop().expect("expected list is non-empty");
    let mean_tensor = loaded.pop().expect("expected list is non-empty");
    let norm = NormStats {
        mean: mean_tensor.data().iter().map(|&v| v as f64).collect(),
        std: std_tensor.data().iter().map(|&v| v as f64).collect(),
    };
    if norm.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Format(
            "checkpoint normalization has non-positive standard deviations".into(),
        ));
    }

    let mut it = loaded.into_iter();
    params.for_each_mut(|tensor| {
        *tensor = it.next().expect("counted above");
    });

    Ok(Model {
        config,
        params,
        norm,
        target_index,
    })
}

fn write_tensor(out: &mut impl Write, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    let bytes = name.as_bytes();
    out.write_all(
        &u16::try_from(bytes.len())
            .expect("short names")
            .to_le_bytes(),
    )?;
    out.write_all(bytes)?;
    out.write_all(&[u8::try_from(tensor.rank()).expect("small ranks")])?;
    for &e in tensor.shape() {
        let v = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(reader: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut len_buf = [0u8; 2];
    read_exact(reader, &mut len_buf)?;
    let name_len = u16::from_le_bytes(len_buf) as usize;
    let mut name_buf = vec![0u8; name_len];
    read_exact(reader, &mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
    let mut rank_buf = [0u8; 1];
    read_exact(reader, &mut rank_buf)?;
    let mut shape = Vec::with_capacity(rank_buf[0] as usize);
    for _ in 0..rank_buf[0] {
        shape.push(read_u32(reader)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        read_exact(reader, &mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("checkpoint truncated".into())
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
