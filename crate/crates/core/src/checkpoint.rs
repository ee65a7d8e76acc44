//! Versioned binary checkpoint container: model config plus named parameter
//! arrays. Float64 payloads round-trip bit-exactly.
//!
//! Layout (little-endian):
//!   magic "DTCKPT01" | u32 version | u32 config-JSON length | config JSON
//!   | u32 param count | per param: u16 name length, name bytes,
//!     u8 ndim, ndim × u64 dims, numel × f64

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::num::Scalar;

const MAGIC: &[u8; 8] = b"DTCKPT01";
const VERSION: u32 = 1;

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn write_model<T: Scalar, W: Write>(model: &Model<T>, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(&model.config).expect("config serializes");
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    let params = model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    read_model(&mut r, &path.display().to_string())
}

fn read_model<T: Scalar, R: Read>(r: &mut R, path: &str) -> Result<Model<T>> {
    let io_err = |e: std::io::Error| CoreError::io(path.to_string(), e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CoreError::CheckpointFormat(format!(
            "bad magic in {path}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CoreError::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json).map_err(io_err)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| CoreError::CheckpointFormat(format!("config JSON: {e}")))?;

    let mut model = Model::<T>::build(config)?;

    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n_params = u32::from_le_bytes(u32buf) as usize;
    let expected = model.named_params().len();
    if n_params != expected {
        return Err(CoreError::CheckpointFormat(format!(
            "expected {expected} parameters, file has {n_params}"
        )));
    }
    for (name, tensor) in model.named_params_mut() {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(io_err)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let file_name = String::from_utf8(name_bytes)
            .map_err(|_| CoreError::CheckpointFormat("non-utf8 parameter name".into()))?;
        if file_name != name {
            return Err(CoreError::CheckpointFormat(format!(
                "parameter order mismatch: expected {name}, found {file_name}"
            )));
        }
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io_err)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut u64buf = [0u8; 8];
            r.read_exact(&mut u64buf).map_err(io_err)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        if dims != tensor.shape() {
            return Err(CoreError::CheckpointFormat(format!(
                "shape mismatch for {name}: file {dims:?} vs model {:?}",
                tensor.shape()
            )));
        }
        for v in tensor.data_mut().iter_mut() {
            let mut f64buf = [0u8; 8];
            r.read_exact(&mut f64buf).map_err(io_err)?;
            *v = T::of(f64::from_le_bytes(f64buf));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_on_f64() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 16,
            seed: 31,
        };
        let model = Model::<f64>::build(cfg).unwrap();
        let dir = std::env::temp_dir().join("maskdistill_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save(&model, &path).unwrap();
        let loaded: Model<f64> = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((na, ta), (nb, tb)) in model
            .named_params()
            .iter()
            .zip(loaded.named_params().iter())
        {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {na} not bit-exact");
        }
        // saving again produces byte-identical files
        let path2 = dir.join("model2.ckpt");
        save(&loaded, &path2).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("maskdistill_ckpt_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(matches!(err, CoreError::CheckpointFormat(_)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
