//! Checkpoint container: magic, version, the run config as text, the step
//! counter, and named f32 tensors (parameters plus `opt.m.*` / `opt.v.*`
//! moments). Parameters are kept on the f32 grid during training, so a save
//! and reload is bitwise invisible.

use crate::autodiff::Arr;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::AdamW;
use ndarray::IxDyn;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EVDC";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    entries: HashMap<String, Arr>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, value: &Arr) {
    put_str(out, name);
    put_u32(out, value.ndim() as u32);
    for &d in value.shape() {
        put_u32(out, d as u32);
    }
    for &v in value.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes config, step, parameters, and (when given) optimizer moments.
pub fn save(
    path: &Path,
    config: &RunConfig,
    params: &ParamSet,
    opt: Option<&AdamW>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &config.serialize());
    let step = opt.map_or(0, |o| o.state().2);
    out.extend_from_slice(&(step as u64).to_le_bytes());
    let n = params.len() + opt.map_or(0, |_| 2 * params.len());
    put_u32(&mut out, n as u32);
    for (name, value) in params.iter() {
        put_tensor(&mut out, name, value);
    }
    if let Some(opt) = opt {
        let (m, v, _) = opt.state();
        for (i, (name, _)) in params.iter().enumerate() {
            put_tensor(&mut out, &format!("opt.m.{name}"), &m[i]);
            put_tensor(&mut out, &format!("opt.v.{name}"), &v[i]);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::data(format!("checkpoint {}: bad utf8", self.path.display())))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint {}: unsupported version {version}",
            path.display()
        )));
    }
    let config = RunConfig::parse(&r.string()?)?;
    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let n = r.u32()? as usize;
    let mut entries = HashMap::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(4 * count)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| Error::data(format!("checkpoint {}: bad shape for {name}", path.display())))?;
        if entries.insert(name.clone(), arr).is_some() {
            return Err(Error::data(format!(
                "checkpoint {}: duplicate entry {name}",
                path.display()
            )));
        }
    }
    Ok(Checkpoint {
        config,
        step,
        entries,
    })
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&Arr> {
        self.entries.get(name)
    }

    /// Copies stored parameter tensors into `params`; every parameter must be
    /// present with a matching shape.
    pub fn apply(&self, params: &mut ParamSet) -> Result<()> {
        let mut missing = Vec::new();
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            match self.entries.get(&name) {
                Some(v) if v.shape() == params.value(id).shape() => {
                    params.value_mut(id).assign(v);
                }
                Some(v) => {
                    return Err(Error::data(format!(
                        "checkpoint entry {name}: shape {:?} does not match model {:?}",
                        v.shape(),
                        params.value(id).shape()
                    )))
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "checkpoint lacks parameters: {missing:?}"
            )));
        }
        Ok(())
    }

    /// True when optimizer moments were saved alongside the parameters.
    pub fn has_optimizer_state(&self) -> bool {
        self.entries.keys().any(|k| k.starts_with("opt.m."))
    }

    /// Restores `opt` from the stored moments (training resume).
    pub fn restore_optimizer(&self, params: &ParamSet, opt: &mut AdamW) -> Result<()> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            for (prefix, slot) in [("opt.m.", &mut m), ("opt.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let found = self.entries.get(&key).ok_or_else(|| {
                    Error::data(format!("checkpoint lacks optimizer entry {key}"))
                })?;
                if found.shape() != value.shape() {
                    return Err(Error::data(format!(
                        "optimizer entry {key}: shape {:?} does not match {:?}",
                        found.shape(),
                        value.shape()
                    )));
                }
                slot.push(found.clone());
            }
        }
        opt.restore(m, v, self.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DepthModel, ModelConfig};

    fn micro_run_config() -> RunConfig {
        let m = ModelConfig::micro();
        let mut cfg = RunConfig::default();
        cfg.bins = m.bins;
        cfg.widths = m.widths;
        cfg.cf = m.cf;
        cfg.c = m.c;
        cfg.n_tokens = m.n_tokens;
        cfg.ch = m.ch;
        cfg.g1 = m.g1;
        cfg.g2 = m.g2;
        cfg
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = micro_run_config();
        let model = DepthModel::new(cfg.model_config(), 11);
        let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");

        let mut trained = DepthModel::new(cfg.model_config(), 11);
        let grads: Vec<Option<Arr>> = trained
            .params
            .iter()
            .map(|(_, v)| Some(Arr::from_elem(v.raw_dim(), 1e-3)))
            .collect();
        opt.step(&mut trained.params, &grads);
        save(&path, &cfg, &trained.params, Some(&opt)).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.step, 1);
        let mut restored = DepthModel::new(ck.config.model_config(), 0);
        ck.apply(&mut restored.params).unwrap();
        for ((_, a), (_, b)) in restored.params.iter().zip(trained.params.iter()) {
            assert_eq!(a, b);
        }
        let mut opt2 = AdamW::new(&restored.params, cfg.lr, cfg.weight_decay, 10);
        ck.restore_optimizer(&restored.params, &mut opt2).unwrap();
        let (m1, v1, s1) = opt.state();
        let (m2, v2, s2) = opt2.state();
        assert_eq!(s1, s2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn fresh_model_saves_losslessly() {
        let cfg = micro_run_config();
        let model = DepthModel::new(cfg.model_config(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &cfg, &model.params, None).unwrap();
        let ck = load(&path).unwrap();
        assert!(!ck.has_optimizer_state());
        let mut other = DepthModel::new(cfg.model_config(), 999);
        ck.apply(&mut other.params).unwrap();
        for ((_, a), (_, b)) in other.params.iter().zip(model.params.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = micro_run_config();
        let model = DepthModel::new(cfg.model_config(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &cfg, &model.params, None).unwrap();
        let ck = load(&path).unwrap();
        let mut wide = cfg.clone();
        wide.cf += 2;
        let mut other = DepthModel::new(wide.model_config(), 3);
        assert!(ck.apply(&mut other.params).is_err());
    }

    #[test]
    fn junk_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"EVDCxx").unwrap();
        assert!(load(&path).is_err());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
    }
}
