//! Checkpoint files.
//!
//! ```text
//! "RMCK"  u32 version  u32 header_len  header (key=value text)
//! repeated: u16 name_len  name  u8 dtype (0 = f32)  u8 rank  u32 dims[rank]  f32 payload
//! ```
//!
//! All integers and reals are little-endian. Parameters come first in store
//! order, followed by optimizer moments named `optim.m/<param>` and
//! `optim.v/<param>` when a training state is saved.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::TrainState;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::kv::{parse_kv, parse_value, to_kv_text};
use crate::unet::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"RMCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub state: Option<TrainState>,
    /// Header keys that are neither model nor optimizer fields.
    pub extra: BTreeMap<String, String>,
}

fn header(
    model: &Model<f32>,
    state: Option<&TrainState>,
    extra: &BTreeMap<String, String>,
) -> String {
    let mut pairs: Vec<(&str, String)> = model.config.to_kv();
    if let Some(s) = state {
        pairs.extend([
            ("train.step", s.step.to_string()),
            ("train.total_steps", s.total_steps.to_string()),
            ("train.lr_max", s.lr_max.to_string()),
            ("train.lr_min", s.lr_min.to_string()),
            ("train.weight_decay", s.weight_decay.to_string()),
            ("train.seed", s.seed.to_string()),
        ]);
    }
    let mut text = to_kv_text(pairs);
    text += &to_kv_text(extra.iter().map(|(k, v)| (k.as_str(), v.clone())));
    text
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
    out.extend(len.to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(
        u8::try_from(shape.len())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?,
    );
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(
    model: &Model<f32>,
    state: Option<&TrainState>,
    extra: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let text = header(model, state, extra);
    let mut out = Vec::with_capacity(16 + text.len() + 4 * model.count_parameters() * 3);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
    for p in model.params.iter() {
        put_record(&mut out, &p.name, p.tensor.shape(), p.tensor.data())?;
    }
    if let Some(s) = state {
        s.check_shapes(&model.params)?;
        for (tag, moments) in [("m", &s.m), ("v", &s.v)] {
            for (p, mom) in model.params.iter().zip(moments) {
                put_record(
                    &mut out,
                    &format!("optim.{tag}/{}", p.name),
                    p.tensor.shape(),
                    mom,
                )?;
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    state: Option<&TrainState>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, state, extra)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c
        .take(4)
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {:?}",
            MAGIC
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let hlen = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(hlen)?)
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut kv = parse_kv(text, "checkpoint header")?;
    let mut config = ModelConfig::default();
    let mut train = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (k, v) in std::mem::take(&mut kv) {
        if let Some(t) = k.strip_prefix("train.") {
            train.insert(t.to_string(), v);
        } else if !config.set(&k, &v)? {
            extra.insert(k, v);
        }
    }
    let mut params = ParamStore::new();
    let mut moments: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    while !c.done() {
        let nlen = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "record {name}: unsupported dtype tag {dtype}"
            )));
        }
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if name.starts_with("optim.") {
            moments.insert(name, data);
        } else {
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
    }
    let state = if train.is_empty() {
        None
    } else {
        let get = |k: &str| {
            train
                .get(k)
                .ok_or_else(|| Error::Format(format!("header lacks train.{k}")))
        };
        let mut take_moments = |tag: &str| -> Result<Vec<Vec<f32>>> {
            params
                .iter()
                .map(|p| {
                    moments
                        .remove(&format!("optim.{tag}/{}", p.name))
                        .ok_or_else(|| {
                            Error::Format(format!(
                                "missing optimizer record optim.{tag}/{}",
                                p.name
                            ))
                        })
                })
                .collect()
        };
        let (m, v) = (take_moments("m")?, take_moments("v")?);
        Some(TrainState {
            step: parse_value("train.step", get("step")?)?,
            total_steps: parse_value("train.total_steps", get("total_steps")?)?,
            lr_max: parse_value("train.lr_max", get("lr_max")?)?,
            lr_min: parse_value("train.lr_min", get("lr_min")?)?,
            weight_decay: parse_value("train.weight_decay", get("weight_decay")?)?,
            seed: parse_value("train.seed", get("seed")?)?,
            m,
            v,
        })
    };
    if let Some(name) = moments.keys().next() {
        return Err(Error::Format(format!(
            "optimizer record {name} has no parameter"
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        state,
        extra,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(d) => Error::Format(format!("{}: {d}", path.display())),
        other => other,
    })
}

/// Lists `key: expected X, found Y` for every differing model field.
pub fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Option<String> {
    let diffs: Vec<String> = expected
        .to_kv()
        .into_iter()
        .zip(found.to_kv())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((k, a), (_, b))| format!("{k}: expected {a}, found {b}"))
        .collect();
    (!diffs.is_empty()).then(|| diffs.join("; "))
}

impl Checkpoint {
    /// Rebuilds the model, checking the parameter layout against the config.
    pub fn into_model(
        self,
        expected: Option<&ModelConfig>,
    ) -> Result<(Model<f32>, Option<TrainState>)> {
        if let Some(diff) = expected.and_then(|e| config_mismatch(e, &self.config)) {
            return Err(Error::Config(format!(
                "checkpoint does not match the model config: {diff}"
            )));
        }
        let mut model = build_model::<f32>(&self.config, 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, config implies {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (dst, src) in model.params.iter_mut().zip(self.params.iter()) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} where {} {:?} was expected",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        if let Some(s) = &self.state {
            s.check_shapes(&model.params)?;
        }
        Ok((model, self.state))
    }
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Model<f32>, Option<TrainState>)> {
    read_checkpoint(path)?.into_model(expected)
}
