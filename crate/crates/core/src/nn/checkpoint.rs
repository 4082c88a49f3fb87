use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, ModelParams, Param};
use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "s3d-checkpoint";
const MANIFEST: &str = "checkpoint.json";

/// AdamW moments per parameter name plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arch: Arch,
    step: u64,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    t: u64,
    names: Vec<String>,
}

fn param_file(name: &str) -> String {
    format!("param.{name}.bin")
}

/// Writes into a sibling staging directory and swaps it in, so an
/// interrupted save never clobbers the previous checkpoint.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let mut entries = Vec::new();
    for (name, p) in &ck.params.params {
        let file = param_file(name);
        blob::write_f64(&staging.join(&file), p.value.data())?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            file,
        });
    }
    if let Some(opt) = &ck.optimizer {
        if opt.m.keys().ne(opt.v.keys()) {
            return Err(Error::Inconsistency("optimizer moments cover different parameters".into()));
        }
        for (name, m) in &opt.m {
            blob::write_f64(&staging.join(format!("adam_m.{name}.bin")), m)?;
        }
        for (name, v) in &opt.v {
            blob::write_f64(&staging.join(format!("adam_v.{name}.bin")), v)?;
        }
    }
    blob::write_manifest(
        &staging.join(MANIFEST),
        &Manifest {
            format: FORMAT.into(),
            version: blob::VERSION,
            arch: ck.params.arch.clone(),
            step: ck.step,
            params: entries,
            optimizer: ck.optimizer.as_ref().map(|o| OptimizerEntry {
                t: o.t,
                names: o.m.keys().cloned().collect(),
            }),
        },
    )?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let m: Manifest = blob::read_manifest(&mpath)?;
    if m.format != FORMAT || m.version != blob::VERSION {
        return Err(Error::MalformedHeader {
            path: mpath,
            reason: format!("unsupported format {} v{}", m.format, m.version),
        });
    }
    m.arch.validate()?;
    let expected: BTreeMap<String, Vec<usize>> = m.arch.layout().into_iter().collect();

    let mut params = BTreeMap::new();
    for e in &m.params {
        match expected.get(&e.name) {
            Some(shape) if *shape == e.shape => {}
            Some(shape) => {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {} has shape {:?}, architecture expects {shape:?}",
                    e.name, e.shape
                )))
            }
            None => {
                return Err(Error::MalformedHeader {
                    path: mpath,
                    reason: format!("unknown parameter {}", e.name),
                })
            }
        }
        let n = e.shape.iter().product();
        let value = Tensor::new(e.shape.clone(), blob::read_f64(&dir.join(&e.file), n)?)?;
        params.insert(
            e.name.clone(),
            Param {
                value,
                frozen: e.frozen,
            },
        );
    }
    if let Some(name) = expected.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::MissingParam(name.clone()));
    }

    let optimizer = match &m.optimizer {
        None => None,
        Some(o) => {
            let mut st = OptimizerState {
                t: o.t,
                ..Default::default()
            };
            for name in &o.names {
                let n = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?.value.len();
                st.m.insert(name.clone(), blob::read_f64(&dir.join(format!("adam_m.{name}.bin")), n)?);
                st.v.insert(name.clone(), blob::read_f64(&dir.join(format!("adam_v.{name}.bin")), n)?);
            }
            Some(st)
        }
    };

    Ok(Checkpoint {
        params: ModelParams { arch: m.arch, params },
        step: m.step,
        optimizer,
    })
}
