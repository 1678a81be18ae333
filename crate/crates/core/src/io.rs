//! Pool files: a JSON manifest plus an adjacent little-endian `f64` blob.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::nn::Network;
use crate::params::{LayoutEntry, ParamLayout, ParamVector};
use crate::pool::PoolState;
use crate::task_vector::{TaskVector, Variant};

pub const FORMAT: &str = "taskvec-pool";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

impl TensorInfo {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorInfo {
    pub task: usize,
    pub variant: Variant,
    /// Number of leading layout entries the vector was built on.
    pub layout_len: usize,
    pub scope: Vec<String>,
    pub tensor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherInfo {
    pub sample_count: u64,
    /// Number of leading layout entries covered by the estimate.
    pub layout_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub network: Network,
    pub layout: Vec<LayoutEntry>,
    pub tensors: Vec<TensorInfo>,
    pub weights: Option<Vec<f64>>,
    pub vectors: Vec<VectorInfo>,
    pub fisher: Option<FisherInfo>,
}

/// Everything stored in a pool file.
#[derive(Clone, Debug)]
pub struct PoolFile {
    pub network: Network,
    pub pool: PoolState,
    pub fisher: Option<FisherDiagonal>,
}

/// Blob path next to a manifest: `pool.json` → `pool.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

struct BlobWriter {
    bytes: Vec<u8>,
    tensors: Vec<TensorInfo>,
}

impl BlobWriter {
    fn add(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.tensors.push(TensorInfo {
            name,
            shape,
            dtype: "f64".into(),
            byte_offset: self.bytes.len() as u64,
        });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn prefix_layout(layout: &ParamLayout, len: usize) -> Result<Arc<ParamLayout>> {
    if len > layout.len() {
        return Err(Error::layout("stored prefix is longer than the layout"));
    }
    Ok(Arc::new(ParamLayout::new(layout.entries()[..len].to_vec())?))
}

fn prefix_len(inner: &ParamLayout, outer: &ParamLayout) -> Result<usize> {
    if !inner.is_prefix_of(outer) {
        return Err(Error::layout("layout is not a prefix of the pool layout"));
    }
    Ok(inner.len())
}

pub fn save_pool(path: &Path, network: &Network, pool: &PoolState, fisher: Option<&FisherDiagonal>) -> Result<()> {
    let theta0 = pool.theta0();
    let layout = theta0.layout();
    let mut w = BlobWriter {
        bytes: Vec::new(),
        tensors: Vec::new(),
    };
    for (i, e) in layout.entries().iter().enumerate() {
        w.add(format!("theta0/{}", e.name), e.shape.clone(), &theta0.values()[layout.range(i)]);
    }
    let fisher_info = match fisher {
        Some(f) => {
            let fl = f.layout();
            let len = prefix_len(fl, layout)?;
            for (i, e) in fl.entries().iter().enumerate() {
                w.add(format!("fisher/{}", e.name), e.shape.clone(), &f.values()[fl.range(i)]);
            }
            Some(FisherInfo {
                sample_count: f.sample_count(),
                layout_len: len,
            })
        }
        None => None,
    };
    let mut vectors = Vec::with_capacity(pool.count());
    for (i, tv) in pool.vectors().iter().enumerate() {
        let name = format!("tau/{}", i + 1);
        w.add(name.clone(), vec![tv.num_params()], tv.params());
        vectors.push(VectorInfo {
            task: i + 1,
            variant: tv.variant(),
            layout_len: prefix_len(tv.layout(), layout)?,
            scope: tv.scope().into_iter().map(String::from).collect(),
            tensor: name,
        });
    }
    let blob = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::validation("pool path has no file name"))?
            .to_string(),
        network: *network,
        layout: layout.entries().to_vec(),
        tensors: w.tensors,
        weights: pool.stored_weights().map(<[f64]>::to_vec),
        vectors,
        fisher: fisher_info,
    };
    std::fs::write(&blob, &w.bytes)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

struct Blob<'a> {
    bytes: &'a [u8],
    tensors: &'a [TensorInfo],
}

impl Blob<'_> {
    fn read(&self, name: &str, shape: Option<&[usize]>) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format_at(format!("tensor {name} missing from manifest"), 0))?;
        if t.dtype != "f64" {
            return Err(Error::format_at(format!("tensor {name} has dtype {}", t.dtype), t.byte_offset));
        }
        if let Some(s) = shape {
            if t.shape != s {
                return Err(Error::format_at(format!("tensor {name} has shape {:?}, expected {s:?}", t.shape), t.byte_offset));
            }
        }
        let start = t.byte_offset as usize;
        let end = start + 8 * t.numel();
        if end > self.bytes.len() {
            return Err(Error::format_at(format!("tensor {name} runs past the end of the blob"), self.bytes.len() as u64));
        }
        Ok(self.bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn load_pool(path: &Path) -> Result<PoolFile> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::format_at(format!("unsupported pool format {} v{}", m.format, m.version), 0));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let bytes = std::fs::read(&blob_file)?;
    let blob = Blob {
        bytes: &bytes,
        tensors: &m.tensors,
    };
    let layout = Arc::new(ParamLayout::new(m.layout.clone())?);
    m.network.arch(&layout)?;
    let mut values = Vec::with_capacity(layout.total_len());
    for e in layout.entries() {
        values.extend(blob.read(&format!("theta0/{}", e.name), Some(&e.shape))?);
    }
    let theta0 = ParamVector::new(layout.clone(), values)?;
    let fisher = match &m.fisher {
        Some(fi) => {
            let fl = prefix_layout(&layout, fi.layout_len)?;
            let mut v = Vec::with_capacity(fl.total_len());
            for e in fl.entries() {
                v.extend(blob.read(&format!("fisher/{}", e.name), Some(&e.shape))?);
            }
            Some(FisherDiagonal::new(fl, v, fi.sample_count)?)
        }
        None => None,
    };
    let mut vectors = Vec::with_capacity(m.vectors.len());
    for (i, vi) in m.vectors.iter().enumerate() {
        if vi.task != i + 1 {
            return Err(Error::format_at(format!("vector {} listed out of order", vi.task), 0));
        }
        let vl = prefix_layout(&layout, vi.layout_len)?;
        let params = blob.read(&vi.tensor, None)?;
        vectors.push(TaskVector::from_params(vi.variant, vl, params)?);
    }
    Ok(PoolFile {
        network: m.network,
        pool: PoolState::from_parts(theta0, vectors, m.weights.clone())?,
        fisher,
    })
}

/// Writes a single parameter vector (a pool without task vectors).
pub fn save_params(path: &Path, network: &Network, theta: &ParamVector) -> Result<()> {
    save_pool(path, network, &PoolState::new(theta.clone()), None)
}

pub fn load_params(path: &Path) -> Result<(Network, ParamVector)> {
    let f = load_pool(path)?;
    Ok((f.network, f.pool.theta0().clone()))
}
