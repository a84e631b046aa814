//! Binary checkpoint format with a plain-text configuration sidecar.
//!
//! Layout: the magic bytes `AMCRN1`, then per entry the name length (u16
//! LE), the UTF-8 name, the rank (u8), each dimension (u32 LE) and the
//! values as little-endian f32; finally the entry count as u32 LE. Entries
//! are the parameters in creation order followed by the running batch-norm
//! statistics (`<layer>.running_mean`, `<layer>.running_var`).

use std::path::{Path, PathBuf};

use super::{Amcrn, AmcrnConfig};
use crate::dsp::FrameSpec;
use crate::fsutil::write_atomic;
use crate::runconfig::parse_pairs;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"AMCRN1";

/// Path of the configuration sidecar written next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn put_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn sidecar_text(model: &Amcrn) -> String {
    let f = model.frontend();
    let mut s = String::from("# network configuration\n");
    for (k, v) in model.config().to_pairs() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str(&format!(
        "frame_len = {}\nframe_shift = {}\nn_fft = {}\nf_min = {}\nf_max = {}\n",
        f.frame_len, f.frame_shift, f.n_fft, f.f_min, f.f_max
    ));
    s
}

/// Writes the checkpoint and its sidecar atomically.
pub fn save_checkpoint(model: &Amcrn, path: &Path) -> Result<()> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    let mut count = 0u32;
    for (_, p) in model.params().iter() {
        put_entry(&mut buf, &p.name, p.value.shape(), p.value.data())?;
        count += 1;
    }
    for (name, s) in model.bn_stats() {
        put_entry(&mut buf, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean)?;
        put_entry(&mut buf, &format!("{name}.running_var"), &[s.var.len()], &s.var)?;
        count += 2;
    }
    buf.extend_from_slice(&count.to_le_bytes());
    write_atomic(&config_path(path), sidecar_text(model).as_bytes())?;
    write_atomic(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_sidecar(path: &Path) -> Result<(AmcrnConfig, FrameSpec)> {
    let cpath = config_path(path);
    let text = std::fs::read_to_string(&cpath)?;
    let mut config = AmcrnConfig::default();
    let mut frontend = FrameSpec::default();
    for (line, k, v) in parse_pairs(&text, &cpath)? {
        let bad = |msg: String| Error::Parse {
            path: cpath.clone(),
            line,
            msg,
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("invalid number `{v}`")));
        match k.as_str() {
            "frame_len" => frontend.frame_len = num(&v)?,
            "frame_shift" => frontend.frame_shift = num(&v)?,
            "f_min" => frontend.f_min = num(&v)?,
            "f_max" => frontend.f_max = num(&v)?,
            "n_fft" => frontend.n_fft = num(&v)? as usize,
            _ => {
                if !config.set(&k, &v)? {
                    return Err(bad(format!("unknown key `{k}`")));
                }
            }
        }
    }
    frontend.n_mels = config.n_mels;
    Ok((config, frontend))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Amcrn> {
    let (config, frontend) = read_sidecar(path)?;
    let mut model = Amcrn::with_frontend(config, frontend, 0)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let declared = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut r = Reader {
        buf: &bytes[..bytes.len() - 4],
        pos: 6,
    };
    let mut seen = std::collections::HashSet::new();
    while r.pos < r.buf.len() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let dest: &mut [f64] = if let Some(layer) = name.strip_suffix(".running_mean") {
            &mut model
                .bn_stats_mut()
                .get_mut(layer)
                .ok_or_else(|| Error::Format(format!("unexpected entry `{name}`")))?
                .mean
        } else if let Some(layer) = name.strip_suffix(".running_var") {
            &mut model
                .bn_stats_mut()
                .get_mut(layer)
                .ok_or_else(|| Error::Format(format!("unexpected entry `{name}`")))?
                .var
        } else {
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected entry `{name}`")))?;
            let p = model.params_mut().get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{name}` has shape {shape:?}, expected {:?}",
                    p.value.shape()
                )));
            }
            p.value.data_mut()
        };
        if dest.len() != n {
            return Err(Error::Format(format!("`{name}` has {n} values, expected {}", dest.len())));
        }
        dest.copy_from_slice(&values);
        seen.insert(name);
    }
    let expected = model.params().len() + 2 * model.bn_stats().len();
    if seen.len() != expected || declared as usize != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} entries (declares {declared}), model needs {expected}",
            seen.len()
        )));
    }
    Ok(model)
}
