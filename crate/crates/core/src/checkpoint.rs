//! Checkpoint files: a UTF-8 manifest followed by raw little-endian tensor payloads.
//!
//! ```text
//! unimamba-checkpoint 1
//! config <key> = <value>
//! ...
//! tensor <name> <d0>x<d1>x... <f64|f32> <offset> <nbytes>
//! ...
//! end
//! <payload bytes; offsets are relative to the first byte after "end\n">
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Precision, RunConfig};
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::model::UniMamba;
use crate::tensor::Tensor;

const MAGIC: &str = "unimamba-checkpoint 1";
const SCALER_MEAN: &str = "scaler.mean";
const SCALER_STD: &str = "scaler.std";

/// Everything needed to rebuild a trained forecaster.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: UniMamba,
    pub scaler: Scaler,
}

fn encode(tensors: &[(&str, &Tensor, Precision)], config: &RunConfig) -> Vec<u8> {
    let mut head = format!("{MAGIC}\n");
    for (k, v) in config.entries() {
        head.push_str(&format!("config {k} = {v}\n"));
    }
    let mut payload = Vec::new();
    for &(name, t, dtype) in tensors {
        let width = match dtype {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!(
            "tensor {name} {} {dtype} {} {}\n",
            shape.join("x"),
            payload.len(),
            t.numel() * width
        ));
        for &x in t.data() {
            match dtype {
                Precision::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    bytes.extend(payload);
    bytes
}

pub fn to_bytes(model: &UniMamba, config: &RunConfig, scaler: &Scaler) -> Vec<u8> {
    // parameters in the model's precision; scaler statistics always at full width
    let mut tensors: Vec<(&str, &Tensor, Precision)> =
        model.store.iter().map(|(n, t)| (n, t, model.cfg.precision)).collect();
    tensors.push((SCALER_MEAN, &scaler.mean, Precision::F64));
    tensors.push((SCALER_STD, &scaler.std, Precision::F64));
    encode(&tensors, config)
}

pub fn save(path: &Path, model: &UniMamba, config: &RunConfig, scaler: &Scaler) -> Result<String> {
    let bytes = to_bytes(model, config, scaler);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        msg,
    };
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("manifest has no end line".into()))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let payload = &bytes[end + 5..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint (bad first line)".into()));
    }
    let mut config = RunConfig::default();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for line in lines {
        if let Some(kv) = line.strip_prefix("config ") {
            config.apply_override(kv).map_err(|e| bad(e.to_string()))?;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 5 {
                return Err(bad(format!("malformed tensor line {line:?}")));
            }
            let shape = f[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape in {line:?}")))?;
            let width = match f[2] {
                "f64" => 8,
                "f32" => 4,
                other => return Err(bad(format!("unknown dtype {other:?}"))),
            };
            let (off, len): (usize, usize) = match (f[3].parse(), f[4].parse()) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return Err(bad(format!("bad offsets in {line:?}"))),
            };
            let n: usize = shape.iter().product();
            if len != n * width || off + len > payload.len() {
                return Err(bad(format!("tensor {} does not fit the payload", f[0])));
            }
            let raw = &payload[off..off + len];
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            tensors.push((f[0].to_string(), Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?));
        } else {
            return Err(bad(format!("unrecognized manifest line {line:?}")));
        }
    }
    let mut model = UniMamba::new(config.model.clone()).map_err(|e| bad(e.to_string()))?;
    let mut mean = None;
    let mut std = None;
    let mut seen = 0;
    for (name, t) in tensors {
        match name.as_str() {
            SCALER_MEAN => mean = Some(t),
            SCALER_STD => std = Some(t),
            _ => {
                let id = model
                    .store
                    .id(&name)
                    .ok_or_else(|| bad(format!("parameter {name} is not part of the configured model")))?;
                model.store.set(id, t).map_err(|e| bad(format!("{name}: {e}")))?;
                seen += 1;
            }
        }
    }
    if seen != model.store.len() {
        return Err(bad(format!("checkpoint holds {seen} of {} parameters", model.store.len())));
    }
    let scaler = match (mean, std) {
        (Some(mean), Some(std)) => Scaler { mean, std },
        _ => return Err(bad("scaler statistics missing".into())),
    };
    Ok(Checkpoint { config, model, scaler })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn setup(precision: Precision) -> (UniMamba, RunConfig, Scaler) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            lookback: 10,
            horizon: 4,
            variates: 2,
            d_model: 8,
            encoder_layers: 1,
            precision,
            ..ModelConfig::default()
        };
        cfg.data.data = "some dir/with space.csv".into();
        let model = UniMamba::new(cfg.model.clone()).unwrap();
        let scaler = Scaler {
            mean: Tensor::new(&[2], vec![1.5, -2.0]).unwrap(),
            std: Tensor::new(&[2], vec![0.5, 3.0]).unwrap(),
        };
        (model, cfg, scaler)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, cfg, scaler) = setup(Precision::F64);
        let bytes = to_bytes(&model, &cfg, &scaler);
        let ck = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.scaler, scaler);
        assert_eq!(ck.model.store.values(), model.store.values());
        assert_eq!(to_bytes(&ck.model, &ck.config, &ck.scaler), bytes);
    }

    #[test]
    fn f32_payload_halves_width() {
        let (model, cfg, scaler) = setup(Precision::F32);
        let bytes = to_bytes(&model, &cfg, &scaler);
        let ck = from_bytes(&bytes, Path::new("mem")).unwrap();
        for (a, b) in ck.model.store.values().iter().zip(model.store.values()) {
            assert_eq!(a, &b.round_to_f32());
        }
        assert_eq!(ck.scaler, scaler);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains(" f32 "));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, cfg, scaler) = setup(Precision::F64);
        let bytes = to_bytes(&model, &cfg, &scaler);
        assert!(from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(from_bytes(b"hello\nend\n", Path::new("x")).is_err());
        let pat = b"config d_model = 8";
        let at = bytes.windows(pat.len()).position(|w| w == pat).unwrap();
        let mut edited = bytes.clone();
        edited[at + pat.len() - 1] = b'9';
        let e = from_bytes(&edited, Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("layer0") || e.contains("embed"), "{e}");
    }

    #[test]
    fn saved_hash_matches_file() {
        let (model, cfg, scaler) = setup(Precision::F64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let h = save(&p, &model, &cfg, &scaler).unwrap();
        assert_eq!(file_hash(&p).unwrap(), h);
        assert_eq!(load(&p).unwrap().model.store.values(), model.store.values());
    }
}
