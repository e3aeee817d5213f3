//! Checkpoint files.
//!
//! The layout is the safetensors container: an 8-byte little-endian header
//! length, a JSON header, then raw little-endian tensor data. The header maps
//! each tensor name to `{dtype, shape, data_offsets}` and carries a
//! `__metadata__` object of strings. Keys are written in sorted order and the
//! data follows the same order, so saving the same state always produces the
//! same bytes.
//!
//! Tensor names are prefixed by their role: `online.`, `target.`,
//! `online_stats.`, `target_stats.` and `momentum.`, followed by the
//! torchvision-style parameter name (`layer1.0.conv1.weight`). Metadata keys:
//! `format` (`maskco-checkpoint`), `version` (`1`), `step` and `config` (the
//! resolved run configuration as TOML).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskco_core::model::{MaskCoNet, ModelState};
use maskco_core::nn::ParamSet;
use maskco_core::trainer::{stream_rng, Stream};
use maskco_core::{Real, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "maskco-checkpoint";
pub const VERSION: &str = "1";

const ROLES: [&str; 5] = ["online", "target", "online_stats", "target_stats", "momentum"];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub state: ModelState<F>,
    /// SGD momentum buffers, laid out like `state.online`.
    pub momentum: ParamSet<F>,
}

/// Raw contents of a safetensors file.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

fn encode<F: Real>(metadata: &BTreeMap<String, String>, tensors: &[(String, &Tensor<F>)]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    header.insert("__metadata__".into(), serde_json::to_value(metadata).expect("string map"));
    let mut sorted: Vec<&(String, &Tensor<F>)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut data = Vec::new();
    for (name, t) in sorted {
        let start = data.len();
        for &v in t.data() {
            v.write_le(&mut data);
        }
        let info = TensorInfo { dtype: F::DTYPE.into(), shape: t.shape().to_vec(), data_offsets: [start, data.len()] };
        header.insert(name.clone(), serde_json::to_value(info).expect("plain struct"));
    }
    let mut json = serde_json::to_vec(&Value::Object(header)).expect("json");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn read_scalar(dtype: &str, bytes: &[u8]) -> Option<f64> {
    Some(match dtype {
        "F32" => f32::from_le_bytes(bytes.try_into().ok()?) as f64,
        "F64" => f64::from_le_bytes(bytes.try_into().ok()?),
        _ => return None,
    })
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "F32" => Some(4),
        "F64" => Some(8),
        _ => None,
    }
}

impl TensorFile {
    /// Parses a safetensors file. Only `F32` and `F64` tensors are decoded;
    /// names listed in `skip` or of other dtypes are ignored.
    pub fn read(path: &Path, skip: impl Fn(&str) -> bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::parse(&bytes, skip).map_err(|msg| Error::checkpoint(path, msg))
    }

    fn parse(bytes: &[u8], skip: impl Fn(&str) -> bool) -> std::result::Result<Self, String> {
        let len = bytes.get(..8).ok_or("file shorter than its header length")?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let header = bytes.get(8..8usize.saturating_add(len)).ok_or("truncated header")?;
        let data = &bytes[8 + len..];
        let header: serde_json::Map<String, Value> = serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
        let mut metadata = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            if name == "__metadata__" {
                metadata = serde_json::from_value(value).map_err(|e| format!("bad metadata: {e}"))?;
                continue;
            }
            let info: TensorInfo = serde_json::from_value(value).map_err(|e| format!("`{name}`: {e}"))?;
            let Some(size) = dtype_size(&info.dtype) else { continue };
            if skip(&name) {
                continue;
            }
            let [a, b] = info.data_offsets;
            let count: usize = info.shape.iter().product();
            if b < a || b - a != count * size {
                return Err(format!("`{name}`: offsets {a}..{b} do not match shape {:?}", info.shape));
            }
            let raw = data.get(a..b).ok_or_else(|| format!("`{name}`: data out of bounds"))?;
            let values = raw.chunks_exact(size).map(|c| read_scalar(&info.dtype, c).unwrap()).collect();
            tensors.insert(name, Tensor::from_vec(&info.shape, values).map_err(|e| e.to_string())?);
        }
        Ok(TensorFile { metadata, tensors })
    }

    /// Moves tensors named `prefix + name` into `set`, which fixes the
    /// expected names and shapes. Every entry of `set` must be present.
    pub fn fill<F: Real>(&mut self, prefix: &str, set: &mut ParamSet<F>) -> std::result::Result<(), String> {
        for i in 0..set.len() {
            let name = &set.names()[i];
            let key = format!("{prefix}{name}");
            let t = self.tensors.remove(&key).ok_or_else(|| format!("missing tensor `{key}`"))?;
            if t.shape() != set.tensors()[i].shape() {
                return Err(format!("`{key}`: expected shape {:?}, found {:?}", set.tensors()[i].shape(), t.shape()));
            }
            set.tensors_mut()[i] = t.cast();
        }
        Ok(())
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(Error::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::io(path))
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), FORMAT.to_string());
        metadata.insert("version".to_string(), VERSION.to_string());
        metadata.insert("step".to_string(), self.state.step.to_string());
        metadata.insert("config".to_string(), self.config.to_toml());
        let s = &self.state;
        let sets = [&s.online, &s.target, &s.online_stats, &s.target_stats, &self.momentum];
        let tensors: Vec<(String, &Tensor<F>)> = ROLES
            .iter()
            .zip(sets)
            .flat_map(|(role, set)| set.iter().map(move |(name, t)| (format!("{role}.{name}"), t)))
            .collect();
        encode(&metadata, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = TensorFile::read(path, |_| false)?;
        let bad = |msg: String| Error::checkpoint(path, msg);
        let meta = |k: &str| file.metadata.get(k).cloned().ok_or_else(|| bad(format!("metadata has no `{k}`")));
        if meta("format")? != FORMAT {
            return Err(bad("not a MaskCo checkpoint".into()));
        }
        if meta("version")? != VERSION {
            return Err(bad(format!("unsupported version {}", meta("version")?)));
        }
        let step: u64 = meta("step")?.parse().map_err(|_| bad("step is not an integer".into()))?;
        let config = RunConfig::parse(&meta("config")?).map_err(|e| bad(e.to_string()))?;
        let (_, params, stats) = build_model::<F>(&config)?;
        let mut state = ModelState::new(params.clone(), stats);
        state.step = step;
        let mut momentum = params.zeros_like();
        let s = &mut state;
        for (role, set) in ROLES.iter().zip([&mut s.online, &mut s.target, &mut s.online_stats, &mut s.target_stats, &mut momentum]) {
            file.fill(&format!("{role}."), set).map_err(bad)?;
        }
        if let Some(extra) = file.tensors.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(Checkpoint { config, state, momentum })
    }
}

/// Architecture plus freshly initialized weights for `config`.
pub fn build_model<F: Real>(config: &RunConfig) -> Result<(MaskCoNet, ParamSet<F>, ParamSet<F>)> {
    let mut rng = stream_rng(config.train.seed, Stream::Init, 0);
    Ok(MaskCoNet::build(&config.model_config(), &mut rng)?)
}

/// Loads backbone weights and running statistics from a plain safetensors
/// file with torchvision ResNet names (`conv1.weight`, `bn1.running_mean`,
/// `layer1.0.conv1.weight`, ...). Classifier weights are ignored.
pub fn load_backbone_weights<F: Real>(path: &Path, params: &mut ParamSet<F>, stats: &mut ParamSet<F>) -> Result<()> {
    let mut file = TensorFile::read(path, |n| n.starts_with("fc.") || n.ends_with("num_batches_tracked"))?;
    let bad = |msg: String| Error::checkpoint(path, msg);
    let backbone = |n: &str| n.starts_with("conv1.") || n.starts_with("bn1.") || n.starts_with("layer");
    for set in [params, stats] {
        for i in 0..set.len() {
            let name = set.names()[i].clone();
            if !backbone(&name) {
                continue;
            }
            let t = file.tensors.remove(&name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            set.assign(&name, t.cast()).map_err(|e| bad(e.to_string()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_safetensors() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&BTreeMap::new(), &[("b".into(), &t), ("a".into(), &t)]);
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(len % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(header["a"]["data_offsets"], serde_json::json!([0, 8]));
        assert_eq!(header["b"]["data_offsets"], serde_json::json!([8, 16]));
        assert_eq!(header["a"]["dtype"], "F32");
        assert_eq!(&bytes[8 + len..8 + len + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_files_are_rejected() {
        let t = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let bytes = encode(&BTreeMap::new(), &[("x".into(), &t)]);
        assert!(TensorFile::parse(&bytes, |_| false).is_ok());
        assert!(TensorFile::parse(&bytes[..bytes.len() - 1], |_| false).is_err());
        assert!(TensorFile::parse(&bytes[..5], |_| false).is_err());
    }
}
