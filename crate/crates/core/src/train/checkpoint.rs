//! Binary checkpoint: `UBCTCKPT`, a version, named f64 tensor records (network
//! weights and optimizer moments), the step sizes and the run configuration.
//!
//! ```text
//! "UBCTCKPT" | u32 version | u32 n_records
//! n_records × ( u32 name_len | name | u32 ndim | ndim × u64 extent | f64 data… )
//! u32 K | K × f64 m_k | f64 L
//! u32 config_len | config (UTF-8)
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ModelParams, PomNet};
use crate::tensor::{AdamWConfig, AdamWState, Tensor};

pub const MAGIC: &[u8; 8] = b"UBCTCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub optimizer_config: AdamWConfig,
    /// Free-form echo of the configuration that produced the run.
    pub config: String,
}

impl Checkpoint {
    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let named = self.params.named();
        for (name, t) in &named {
            if name != "mu" {
                records.push((name.clone(), t.shape().to_vec(), t.data()));
            }
        }
        for (i, (name, t)) in named.iter().enumerate() {
            records.push((format!("adamw.m.{name}"), t.shape().to_vec(), &self.optimizer.m[i]));
            records.push((format!("adamw.v.{name}"), t.shape().to_vec(), &self.optimizer.v[i]));
        }
        let c = &self.optimizer_config;
        let hyper = [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay];
        let step = [self.optimizer.step as f64];
        records.push(("adamw.config".into(), vec![5], &hyper));
        records.push(("adamw.step".into(), vec![], &step));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, data) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&(self.params.k() as u32).to_le_bytes());
        self.params.mu.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(&self.params.lipschitz.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("missing UBCTCKPT magic".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let n_records = r.u32().map_err(&fail)? as usize;
        let mut records: HashMap<String, Tensor> = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..n_records {
            let len = r.u32().map_err(&fail)? as usize;
            let name = String::from_utf8(r.take(len).map_err(&fail)?.to_vec())
                .map_err(|_| fail("record name is not UTF-8".into()))?;
            let ndim = r.u32().map_err(&fail)? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(&fail)?;
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel).map_err(&fail)?;
            let t = Tensor::new(&shape, data).map_err(|e| fail(e.to_string()))?;
            order.push(name.clone());
            records.insert(name, t);
        }
        let k = r.u32().map_err(&fail)? as usize;
        let mu = Tensor::new(&[k], r.f64s(k).map_err(&fail)?).map_err(|e| fail(e.to_string()))?;
        let lipschitz = r.f64s(1).map_err(&fail)?[0];
        let len = r.u32().map_err(&fail)? as usize;
        let config = String::from_utf8(r.take(len).map_err(&fail)?.to_vec())
            .map_err(|_| fail("config echo is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut copies = 0;
        while order.iter().any(|n| n.starts_with(&format!("pom{copies}."))) {
            copies += 1;
        }
        let mut pom = Vec::with_capacity(copies);
        for i in 0..copies {
            let prefix = format!("pom{i}.");
            let params = order
                .iter()
                .filter_map(|n| n.strip_prefix(&prefix).map(|s| (s.to_string(), records[n].clone())))
                .collect();
            pom.push(PomNet::from_params(params).map_err(|e| fail(e.to_string()))?);
        }
        if copies == 0 {
            return Err(fail("no network weights".into()));
        }
        let params = ModelParams { pom, mu, lipschitz };

        let get = |name: &str| records.get(name).ok_or_else(|| fail(format!("missing record {name}")));
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.named() {
            let (mm, vv) = (get(&format!("adamw.m.{name}"))?, get(&format!("adamw.v.{name}"))?);
            if mm.numel() != t.numel() || vv.numel() != t.numel() {
                return Err(fail(format!("optimizer moments for {name} have the wrong size")));
            }
            m.push(mm.data().to_vec());
            v.push(vv.data().to_vec());
        }
        let hyper = get("adamw.config")?.data();
        if hyper.len() != 5 {
            return Err(fail("adamw.config must hold 5 values".into()));
        }
        let optimizer_config = AdamWConfig {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            weight_decay: hyper[4],
        };
        let step = get("adamw.step")?.item().map_err(|e| fail(e.to_string()))? as u64;
        Ok(Checkpoint { params, optimizer: AdamWState { m, v, step }, optimizer_config, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamW;

    fn sample(per_layer: bool) -> Checkpoint {
        let mut params = ModelParams::init(3, 123.5, per_layer, 8).unwrap();
        params.mu.data_mut()[1] = 0.75;
        let mut opt = AdamW::new(AdamWConfig::default(), params.named().into_iter().map(|(_, t)| t));
        opt.state.m[0][3] = 0.125;
        opt.state.v[2][0] = 9.0;
        opt.state.step = 17;
        Checkpoint {
            params,
            optimizer: opt.state,
            optimizer_config: AdamWConfig { lr: 3e-4, ..AdamWConfig::default() },
            config: "k = 3\nseed = 8\n".into(),
        }
    }

    #[test]
    fn round_trip() {
        for per_layer in [false, true] {
            let c = sample(per_layer);
            let bytes = c.to_bytes();
            assert_eq!(&bytes[..8], MAGIC);
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.step(), 17);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample(false).to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, p), Err(Error::Format { .. })));
    }
}
