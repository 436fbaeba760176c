//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DFLW" | version u32 | config_len u64 | config JSON bytes
//! iteration u64 | adam: step u64, lr f64, beta1 f64, beta2 f64, eps f64
//! record_count u64
//! per record: name_len u64 | name UTF-8 | rank u32 | dims u32 x rank | payload f64 x numel
//! ```
//!
//! Records hold every parameter value (`param.<name>`), the optimizer
//! moments (`adam_m.<name>`, `adam_v.<name>`), and the spectral state
//! (`spectral_u.<weight>`, `spectral_sigma.<weight>`). Payloads are raw f64
//! bits, so a load reproduces forward outputs bit-identically.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use denseflow::flow::{build_model, FlowModel};
use denseflow::optim::AdamState;
use denseflow::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DFLW";
const VERSION: u32 = 1;

/// A fully restored training state.
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub model: FlowModel,
    pub adam: AdamState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn record(&mut self, name: &str, shape: &[usize], payload: &[f64]) {
        self.u64(name.len() as u64);
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for &v in payload {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated at offset {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize the full training state.
pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &FlowModel,
    adam: &AdamState,
    iteration: u64,
) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let config_json = config.to_json()?;
    w.u64(config_json.len() as u64);
    w.bytes(config_json.as_bytes());
    w.u64(iteration);
    w.u64(adam.step);
    w.f64(adam.lr);
    w.f64(adam.beta1);
    w.f64(adam.beta2);
    w.f64(adam.eps);

    let n_params = model.params.len();
    let mut spectral = Vec::new();
    model.for_each_spectral(|name, sw| {
        spectral.push((name.to_string(), sw.u.clone(), sw.sigma_hat));
    });
    w.u64((3 * n_params + 2 * spectral.len()) as u64);
    for (id, p) in model.params.iter() {
        w.record(&format!("param.{}", p.name), p.value.shape(), p.value.data());
        w.record(
            &format!("adam_m.{}", p.name),
            adam.m[id.index()].shape(),
            adam.m[id.index()].data(),
        );
        w.record(
            &format!("adam_v.{}", p.name),
            adam.v[id.index()].shape(),
            adam.v[id.index()].data(),
        );
    }
    for (name, u, sigma) in &spectral {
        w.record(&format!("spectral_u.{name}"), &[u.len()], u);
        w.record(&format!("spectral_sigma.{name}"), &[], &[*sigma]);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, &w.buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Restore a checkpoint; the model skeleton is rebuilt from the embedded
/// config and every tensor is overwritten from the records.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let config_len = r.u64()? as usize;
    let config_json = std::str::from_utf8(r.take(config_len)?)?.to_string();
    let config = RunConfig::from_json(&config_json)?;
    let iteration = r.u64()?;
    let adam_step = r.u64()?;
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;

    let record_count = r.u64()? as usize;
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..record_count {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = Vec::with_capacity(numel);
        for _ in 0..numel {
            payload.push(r.f64()?);
        }
        records.insert(name, Tensor::new(shape, payload)?);
    }
    if !r.done() {
        bail!("trailing bytes after checkpoint records");
    }

    let mut model = build_model(&config.model_config()?, config.seed)?;
    let mut adam = AdamState::new(&model.params, lr);
    adam.step = adam_step;
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.eps = eps;

    let take = |records: &BTreeMap<String, Tensor>, key: &str, shape: &[usize]| -> Result<Tensor> {
        let t = records
            .get(key)
            .with_context(|| format!("checkpoint missing record {key}"))?;
        if t.shape() != shape {
            bail!(
                "record {key} has shape {:?}, model wants {:?}",
                t.shape(),
                shape
            );
        }
        Ok(t.clone())
    };

    let names: Vec<(denseflow::ParamId, String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in &names {
        let value = take(&records, &format!("param.{name}"), shape)?;
        let m = take(&records, &format!("adam_m.{name}"), shape)?;
        let v = take(&records, &format!("adam_v.{name}"), shape)?;
        model.params.get_mut(*id).value = value;
        adam.m[id.index()] = m;
        adam.v[id.index()] = v;
    }

    let mut spectral_err = None;
    model.for_each_spectral_mut(|name, sw| {
        if spectral_err.is_some() {
            return;
        }
        let u_len = sw.u.len();
        match (
            take(&records, &format!("spectral_u.{name}"), &[u_len]),
            take(&records, &format!("spectral_sigma.{name}"), &[]),
        ) {
            (Ok(u), Ok(sigma)) => {
                sw.u = u.into_data();
                sw.sigma_hat = sigma.data()[0];
            }
            (Err(e), _) | (_, Err(e)) => spectral_err = Some(e),
        }
    });
    if let Some(e) = spectral_err {
        return Err(e);
    }

    Ok(Checkpoint {
        config,
        iteration,
        model,
        adam,
    })
}
