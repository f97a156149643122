use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::numeric::{AdamState, ModelParams, Tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const PARAMS_DIR: &str = "params";

/// Where the training data came from, so a checkpoint can be evaluated on
/// its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub dir: PathBuf,
    /// Preparation settings (filtering, split) as recorded by the caller.
    pub preparation: serde_json::Value,
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_precision: Option<f64>,
    pub bad_epochs: usize,
    pub config: TrainConfig,
    pub source: Option<DataSource>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    epoch: usize,
    best_val_precision: Option<f64>,
    bad_epochs: usize,
    config_hash: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    source: Option<DataSource>,
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(shape.to_vec(), data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Load {
                path: self.path.to_path_buf(),
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            })
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn param_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(PARAMS_DIR).join(format!("{name}.bin"))
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    /// Writes `params/*.bin`, `optimizer.bin` and `manifest.json` under `dir`.
    /// Values are stored as little-endian `f64`, so a reload is bit-exact.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join(PARAMS_DIR);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            write(&param_file(dir, name), &le_bytes(t.data()))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
        }

        let opt = &self.optimizer;
        let mut buf = Vec::new();
        buf.extend(opt.step_count().to_le_bytes());
        buf.extend(le_bytes(&[opt.lr, opt.beta1, opt.beta2, opt.eps]));
        let (m, v) = opt.moments();
        for t in m.iter().chain(v) {
            buf.extend(le_bytes(t.data()));
        }
        write(&dir.join(OPTIMIZER_FILE), &buf)?;

        let manifest = Manifest {
            kind: self.kind,
            epoch: self.epoch,
            best_val_precision: self.best_val_precision,
            bad_epochs: self.bad_epochs,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            tensors,
            source: self.source.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write(&dir.join(CHECKPOINT_MANIFEST), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::Load {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        if config_hash(&manifest.config) != manifest.config_hash {
            return Err(Error::Load {
                path: mpath,
                reason: "config hash does not match the stored config".into(),
            });
        }

        let mut params = ModelParams::new();
        for entry in &manifest.tensors {
            let path = param_file(dir, &entry.name);
            let bytes = read(&path)?;
            let mut r = Reader { path: &path, bytes: &bytes, pos: 0 };
            let t = r.tensor(&entry.shape)?;
            r.finish()?;
            params.insert(entry.name.clone(), t);
        }

        let path = dir.join(OPTIMIZER_FILE);
        let bytes = read(&path)?;
        let mut r = Reader { path: &path, bytes: &bytes, pos: 0 };
        let step = r.u64()?;
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let m = shapes.iter().map(|s| r.tensor(s)).collect::<Result<_>>()?;
        let v = shapes.iter().map(|s| r.tensor(s)).collect::<Result<_>>()?;
        r.finish()?;

        Ok(Self {
            kind: manifest.kind,
            params,
            optimizer: AdamState::from_parts(lr, beta1, beta2, eps, step, m, v),
            epoch: manifest.epoch,
            best_val_precision: manifest.best_val_precision,
            bad_epochs: manifest.bad_epochs,
            config: manifest.config,
            source: manifest.source,
        })
    }
}
