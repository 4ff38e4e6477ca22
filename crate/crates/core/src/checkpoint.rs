//! Single-file checkpoints: `CVIOCKPT\n`, a little-endian u64 header length,
//! a JSON header, then every tensor as raw little-endian f64 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use criticvio_tensor::nn::{Param, ParamStore};
use criticvio_tensor::optim::{AdamW, Moments};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::training::{RngStreams, TrainConfig, Trainer};

pub const MAGIC: &[u8; 9] = b"CVIOCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// `None` before the first observation.
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub variant: Variant,
    pub epoch: usize,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub norm: NormStats,
    pub rngs: RngStreams,
    pub opt_g: OptimizerState,
    pub opt_c: OptimizerState,
    pub scheduler: SchedulerState,
    pub tensors: Vec<TensorEntry>,
}

// Payload sections: parameters, then first and second moments, for the
// generator and then the critic.
fn sections<'a>(t: &'a Trainer) -> Vec<(&'static str, &'a AdamW)> {
    vec![("g", &t.opt_g), ("c", &t.opt_c)]
}

fn push(entries: &mut Vec<TensorEntry>, data: &mut Vec<ArrayD<f64>>, name: String, a: ArrayD<f64>) {
    entries.push(TensorEntry {
        name,
        shape: a.shape().to_vec(),
    });
    data.push(a);
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (tag, opt) in sections(trainer) {
        for (p, m) in opt.params().iter().zip(opt.moments()) {
            push(&mut entries, &mut data, format!("{tag}/{}", p.name()), p.value().to_owned());
            push(&mut entries, &mut data, format!("{tag}.m/{}", p.name()), m.m.clone());
            push(&mut entries, &mut data, format!("{tag}.v/{}", p.name()), m.v.clone());
        }
    }
    let opt_state = |o: &AdamW| OptimizerState {
        lr: o.config.lr,
        steps: o.step_count(),
    };
    let sched = &trainer.scheduler;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        variant: trainer.model.cfg.variant,
        epoch: trainer.epoch,
        step: trainer.step,
        model: trainer.model.cfg.clone(),
        train: trainer.cfg.clone(),
        norm: trainer.norm.clone(),
        rngs: trainer.rngs.clone(),
        opt_g: opt_state(&trainer.opt_g),
        opt_c: opt_state(&trainer.opt_c),
        scheduler: SchedulerState {
            best: sched.best.is_finite().then_some(sched.best),
            bad_epochs: sched.bad_epochs,
        },
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;

    // Write beside the target and rename, so an interrupted save never
    // leaves a truncated checkpoint under the final name.
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for a in &data {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Header and named tensors of a checkpoint file.
pub struct Loaded {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

pub fn read(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Version(format!("{}: not a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Version(format!("{}: not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    // Check the version before the full schema so old files report clearly.
    let probe: serde_json::Value = serde_json::from_slice(&json)?;
    let version = probe.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version(format!(
            "{}: checkpoint format {:?}, expected {}",
            path.display(),
            version,
            FORMAT_VERSION
        )));
    }
    let header: CheckpointHeader = serde_json::from_value(probe)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            v.push(f64::from_le_bytes(buf));
        }
        let a = ArrayD::from_shape_vec(IxDyn(&e.shape), v).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        tensors.push((e.name.clone(), a));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    Ok(Loaded { header, tensors })
}

fn take(map: &mut std::collections::HashMap<String, ArrayD<f64>>, name: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
    let a = map
        .remove(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks {name}")))?;
    if a.shape() != shape {
        return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", a.shape(), shape)));
    }
    Ok(a)
}

fn restore_store(
    map: &mut std::collections::HashMap<String, ArrayD<f64>>,
    tag: &str,
    store: &ParamStore,
) -> Result<Vec<Moments>> {
    let params: Vec<Param> = store.params();
    let mut moments = Vec::with_capacity(params.len());
    for p in &params {
        let shape = p.shape();
        p.set(take(map, &format!("{tag}/{}", p.name()), &shape)?);
        moments.push(Moments {
            m: take(map, &format!("{tag}.m/{}", p.name()), &shape)?,
            v: take(map, &format!("{tag}.v/{}", p.name()), &shape)?,
        });
    }
    Ok(moments)
}

/// Rebuilds the full training state.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let Loaded { header, tensors } = read(path)?;
    let mut map: std::collections::HashMap<String, ArrayD<f64>> = tensors.into_iter().collect();
    let model = Model::new(&header.model, 0)?;
    let mut t = Trainer::new(model, header.train.clone(), header.norm.clone())?;
    let mg = restore_store(&mut map, "g", &t.model.generator.store)?;
    let mc = restore_store(&mut map, "c", &t.model.critic.store)?;
    if let Some(extra) = map.keys().next() {
        return Err(Error::ShapeMismatch(format!("unexpected tensor {extra} in checkpoint")));
    }
    t.opt_g.restore(header.opt_g.steps, mg);
    t.opt_c.restore(header.opt_c.steps, mc);
    t.opt_g.config.lr = header.opt_g.lr;
    t.opt_c.config.lr = header.opt_c.lr;
    t.scheduler.best = header.scheduler.best.unwrap_or(f64::INFINITY);
    t.scheduler.bad_epochs = header.scheduler.bad_epochs;
    t.rngs = header.rngs;
    t.epoch = header.epoch;
    t.step = header.step;
    Ok(t)
}

/// Model, normalization statistics and header, for evaluation and inference.
pub fn load_model(path: &Path) -> Result<(Model, NormStats, CheckpointHeader)> {
    let t = load_trainer(path)?;
    let header = read_header(path)?;
    Ok((t.model, t.norm, header))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read(path)?.header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer() -> Trainer {
        let m = Model::new(&ModelConfig::default(), 3).unwrap();
        Trainer::new(m, TrainConfig::default(), NormStats::default()).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut t = trainer();
        t.epoch = 3;
        t.step = 17;
        t.scheduler.observe(0.25);
        save(&p, &t).unwrap();
        let u = load_trainer(&p).unwrap();
        for (a, b) in t.model.generator.store.params().iter().zip(u.model.generator.store.params()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value(), b.value());
        }
        for (a, b) in t.model.critic.store.params().iter().zip(u.model.critic.store.params()) {
            assert_eq!(a.value(), b.value());
        }
        assert_eq!((u.epoch, u.step), (3, 17));
        assert_eq!(u.scheduler.best, 0.25);
        assert_eq!(u.rngs, t.rngs);
        assert_eq!(u.model.cfg, t.model.cfg);
        // Saving the reloaded state gives the same bytes.
        let q = dir.path().join("b.ckpt");
        save(&q, &u).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &trainer()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let needle = b"\"format_version\":1";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + needle.len() - 1] = b'9';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read(&p), Err(Error::Version(_))));
        std::fs::write(&p, b"hello").unwrap();
        assert!(matches!(read(&p), Err(Error::Version(_))));
    }
}
