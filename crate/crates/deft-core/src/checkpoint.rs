//! Model persistence. A checkpoint is a self-describing binary file: the
//! model config rides along as a TOML blob, so loading needs no out-of-band
//! information and always rebuilds the exact registry that was saved.
//!
//! Layout (all integers little-endian):
//!   magic  b"DEFT"
//!   version u16                  (currently 1)
//!   config_len u32, config TOML  (canonical `ModelConfig` serialization)
//!   records until EOF, each:
//!     name_len u16, name utf-8
//!     dtype tag u8, rank u8, dims u32 * rank
//!     values, raw little-endian scalars
//!
//! Records are written params-first then buffers, in registry order. The
//! loader matches records by name, so order is not load-bearing, but keeping
//! it fixed makes save → save byte-identical for equal models.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::model::{DefTModel, ModelConfig, NamedTensor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DEFT";
const VERSION: u16 = 1;

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &DefTModel<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| with_path(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = model.config.to_toml();
    let blob = config.as_bytes();
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(blob)?;
    for nt in model.params().iter().chain(model.buffers()) {
        write_record(&mut w, nt)?;
    }
    w.flush()?;
    Ok(())
}

fn write_record<T: Element, W: Write>(w: &mut W, nt: &NamedTensor<T>) -> Result<()> {
    let name = nt.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::format(format!("tensor name too long: {}", nt.name)));
    }
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[T::DTYPE.tag(), nt.tensor.shape().len() as u8])?;
    for &d in nt.tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in nt.tensor.data() {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

/// Rebuilds the model from `path`. The stored config decides the
/// architecture; stored values overwrite the fresh initialization. Values
/// saved in the other precision are converted through f64, which is exact
/// for f32 → f64 and rounds once for f64 → f32.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<DefTModel<T>> {
    let file = File::open(path).map_err(|e| with_path(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let mut v = [0u8; 2];
    read_exact(&mut r, &mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact(&mut r, &mut len4, "config length")?;
    let mut blob = vec![0u8; u32::from_le_bytes(len4) as usize];
    read_exact(&mut r, &mut blob, "config blob")?;
    let toml = String::from_utf8(blob)
        .map_err(|_| Error::format("config blob is not valid utf-8"))?;
    let config = ModelConfig::from_toml(&toml)?;

    let mut state: Vec<(String, Tensor<T>)> = Vec::new();
    loop {
        let mut nl = [0u8; 2];
        match r.read(&mut nl)? {
            0 => break,
            1 => read_exact(&mut r, &mut nl[1..], "record header")?,
            _ => {}
        }
        let name_len = u16::from_le_bytes(nl) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor name is not valid utf-8"))?;
        let mut meta = [0u8; 2];
        read_exact(&mut r, &mut meta, "record metadata")?;
        let dtype = Dtype::from_tag(meta[0])
            .ok_or_else(|| Error::format(format!("unknown dtype tag {}", meta[0])))?;
        let rank = meta[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            read_exact(&mut r, &mut d, "dimension")?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = shape.iter().product();
        let width = dtype.byte_width();
        let mut raw = vec![0u8; count * width];
        read_exact(&mut r, &mut raw, "tensor values")?;
        let data: Vec<T> = if dtype == T::DTYPE {
            raw.chunks_exact(width).map(T::from_le_slice).collect()
        } else {
            match dtype {
                Dtype::F32 => raw
                    .chunks_exact(width)
                    .map(|c| T::from_f64(f32::from_le_slice(c) as f64))
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(width)
                    .map(|c| T::from_f64(f64::from_le_slice(c)))
                    .collect(),
            }
        };
        state.push((name, Tensor::new(&shape, data)?));
    }

    let mut model = DefTModel::new(config, 0)?;
    model.load_state(state)?;
    Ok(model)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated checkpoint while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Element>() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: DefTModel<T> = DefTModel::new(ModelConfig::reduced(), 42).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let back: DefTModel<T> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            // Bit-exact: compare the persisted byte patterns, not floats.
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_le_bytes_vec(), y.to_le_bytes_vec(), "{}", a.name);
            }
        }
        for (a, b) in model.buffers().iter().zip(back.buffers()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        roundtrip::<f32>();
    }

    #[test]
    fn roundtrip_is_bit_exact_f64() {
        roundtrip::<f64>();
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model: DefTModel<f32> = DefTModel::new(ModelConfig::reduced(), 7).unwrap();
        save_checkpoint(&a, &model).unwrap();
        save_checkpoint(&b, &model).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn config_and_toggles_survive_the_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = ModelConfig::reduced();
        cfg.toggles.use_lpb = false;
        cfg.toggles.use_cffn = false;
        let model: DefTModel<f32> = DefTModel::new(cfg.clone(), 3).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let back: DefTModel<f32> = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.param_count(), model.param_count());
    }

    #[test]
    fn cross_precision_load_converts_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: DefTModel<f32> = DefTModel::new(ModelConfig::reduced(), 42).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let wide: DefTModel<f64> = load_checkpoint(&path).unwrap();
        for (a, b) in model.params().iter().zip(wide.params()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(*x as f64, *y, "{}", a.name);
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        let err = load_checkpoint::<f32>(&path).err().unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DEFT");
        bytes.extend_from_slice(&9u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).err().unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.ckpt");
        let cut = dir.path().join("cut.ckpt");
        let model: DefTModel<f32> = DefTModel::new(ModelConfig::reduced(), 1).unwrap();
        save_checkpoint(&full, &model).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint::<f32>(&cut).err().unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }
}
