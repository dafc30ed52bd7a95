//! Self-describing checkpoint files.
//!
//! Layout: a UTF-8 header of one record per line, then `data <nbytes>`, the
//! raw little-endian f32 parameter blob, and a trailing `sha256 <hex>` line
//! covering every byte before it.
//!
//! ```text
//! FPRUNE-CHECKPOINT 1
//! input 1 28 28
//! layer conv 1 20 5 1 0
//! layer maxpool2
//! ...
//! mask 0 1101...
//! meta seed 7
//! tensor 0 weight 20,1,5,5 0 500
//! data 1724320
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, MaskableModel, Params};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "FPRUNE-CHECKPOINT";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MaskableModel<f32>,
    /// Free-form provenance (step, seed, config hash, ...). Keys and values
    /// must not contain newlines; keys must not contain spaces.
    pub meta: BTreeMap<String, String>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::format("checkpoint", message)
}

fn layer_line(l: &LayerSpec) -> String {
    match *l {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
            format!("layer conv {in_channels} {out_channels} {kernel} {stride} {pad}")
        }
        LayerSpec::MaxPool2 => "layer maxpool2".into(),
        LayerSpec::Relu => "layer relu".into(),
        LayerSpec::Flatten => "layer flatten".into(),
        LayerSpec::Linear { in_features, out_features } => format!("layer linear {in_features} {out_features}"),
    }
}

fn parse_layer(fields: &[&str]) -> Result<LayerSpec> {
    let nums = |n: usize| -> Result<Vec<usize>> {
        if fields.len() != n + 1 {
            return Err(bad(format!("layer `{}` needs {n} numbers", fields[0])));
        }
        fields[1..].iter().map(|s| s.parse().map_err(|_| bad(format!("bad number `{s}`")))).collect()
    };
    Ok(match fields.first().copied() {
        Some("conv") => {
            let v = nums(5)?;
            LayerSpec::Conv { in_channels: v[0], out_channels: v[1], kernel: v[2], stride: v[3], pad: v[4] }
        }
        Some("maxpool2") => LayerSpec::MaxPool2,
        Some("relu") => LayerSpec::Relu,
        Some("flatten") => LayerSpec::Flatten,
        Some("linear") => {
            let v = nums(2)?;
            LayerSpec::Linear { in_features: v[0], out_features: v[1] }
        }
        other => return Err(bad(format!("unknown layer kind {other:?}"))),
    })
}

impl Checkpoint {
    pub fn new(model: MaskableModel<f32>) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("artifact_version".to_string(), ARTIFACT_VERSION.to_string());
        Checkpoint { model, meta }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\n");
        let [c, h, w] = m.input_shape();
        header += &format!("input {c} {h} {w}\n");
        for l in m.layers() {
            header += &layer_line(l);
            header.push('\n');
        }
        for (i, mask) in m.masks().iter().enumerate() {
            if let Some(mask) = mask {
                let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
                header += &format!("mask {i} {bits}\n");
            }
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Input(format!("meta entry `{k}` cannot be stored")));
            }
            header += &format!("meta {k} {v}\n");
        }
        let mut blob = Vec::new();
        for (i, p) in m.params().iter().enumerate() {
            let Some(p) = p else { continue };
            for (name, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                header += &format!("tensor {i} {name} {} {} {}\n", dims.join(","), blob.len() / 4, t.len());
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = header.into_bytes();
        out.extend_from_slice(format!("data {}\n", blob.len()).as_bytes());
        out.extend_from_slice(&blob);
        let digest = hex::encode(Sha256::digest(&out));
        out.extend_from_slice(format!("sha256 {digest}\n").as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let first_end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated: no header line"))?;
        let first = std::str::from_utf8(&bytes[..first_end]).map_err(|_| bad("header is not UTF-8"))?;
        let version = match first.split_once(' ') {
            Some((MAGIC, v)) => v.parse::<u32>().map_err(|_| bad(format!("bad version `{v}`")))?,
            _ => return Err(bad("not a checkpoint file (missing magic line)")),
        };
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version} is not supported; this build reads version {FORMAT_VERSION}"
            )));
        }

        // header lines up to and including `data <n>`
        let mut pos = first_end + 1;
        let mut lines = Vec::new();
        let data_len = loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?
                + pos;
            let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header is not UTF-8"))?;
            pos = end + 1;
            if let Some(n) = line.strip_prefix("data ") {
                break n.parse::<usize>().map_err(|_| bad(format!("bad data length `{n}`")))?;
            }
            lines.push(line.to_string());
        };
        let body_end = pos.checked_add(data_len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            bad(format!("truncated: expected {data_len} data bytes, found {}", bytes.len() - pos))
        })?;
        let trailer = std::str::from_utf8(&bytes[body_end..]).map_err(|_| bad("corrupt digest line"))?;
        let digest = trailer
            .strip_prefix("sha256 ")
            .and_then(|t| t.strip_suffix('\n'))
            .ok_or_else(|| bad("truncated: missing digest line"))?;
        let actual = hex::encode(Sha256::digest(&bytes[..body_end]));
        if digest != actual {
            return Err(bad(format!("digest mismatch: file says {digest}, content hashes to {actual}")));
        }
        let blob = &bytes[pos..body_end];

        let mut input = None;
        let mut layers = Vec::new();
        let mut masks: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut tensors: BTreeMap<(usize, String), Tensor<f32>> = BTreeMap::new();
        for line in &lines {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields[0] {
                "input" if fields.len() == 4 => {
                    let v: Vec<usize> = fields[1..]
                        .iter()
                        .map(|s| s.parse().map_err(|_| bad(format!("bad input shape `{line}`"))))
                        .collect::<Result<_>>()?;
                    input = Some([v[0], v[1], v[2]]);
                }
                "layer" => layers.push(parse_layer(&fields[1..])?),
                "mask" if fields.len() == 3 => {
                    let i = fields[1].parse().map_err(|_| bad(format!("bad mask line `{line}`")))?;
                    let bits = fields[2]
                        .chars()
                        .map(|c| match c {
                            '1' => Ok(true),
                            '0' => Ok(false),
                            _ => Err(bad(format!("bad mask bit `{c}`"))),
                        })
                        .collect::<Result<_>>()?;
                    masks.insert(i, bits);
                }
                "meta" => {
                    let (k, v) = line["meta ".len()..].split_once(' ').unwrap_or((&line["meta ".len()..], ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" if fields.len() == 6 => {
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad tensor line `{line}`")));
                    let layer = parse(fields[1])?;
                    let shape: Vec<usize> = fields[3].split(',').map(parse).collect::<Result<_>>()?;
                    let (offset, len) = (parse(fields[4])?, parse(fields[5])?);
                    let bytes = offset
                        .checked_add(len)
                        .and_then(|e| e.checked_mul(4))
                        .and_then(|e| blob.get(offset * 4..e))
                        .ok_or_else(|| bad(format!("tensor `{line}` lies outside the data block")))?;
                    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    tensors.insert((layer, fields[2].to_string()), Tensor::new(&shape, data)?);
                }
                _ => return Err(bad(format!("unrecognized header line `{line}`"))),
            }
        }
        let input = input.ok_or_else(|| bad("missing input shape"))?;
        let mut params = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            params.push(if l.has_params() {
                let mut take = |name: &str| tensors.remove(&(i, name.to_string())).ok_or_else(|| bad(format!("layer {i} has no {name}")));
                Some(Params { weight: take("weight")?, bias: take("bias")? })
            } else {
                None
            });
        }
        let mask_vec = (0..layers.len()).map(|i| masks.remove(&i)).collect();
        if !tensors.is_empty() || !masks.is_empty() {
            return Err(bad("entries refer to layers that do not exist"));
        }
        let model = MaskableModel::from_parts(input, layers, params, mask_vec)?;
        Ok(Checkpoint { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(format!("checkpoint {}", path.display()), message),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lenet5, FeatureId};

    fn sample() -> Checkpoint {
        let mut m = build_lenet5(9);
        m.prune(FeatureId::new(0, 3)).unwrap();
        m.prune(FeatureId::new(2, 100)).unwrap();
        Checkpoint::new(m).with_meta("step", 1200).with_meta("config_hash", "abc123").with_meta("note", "two words")
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta["note"], "two words");
        assert_eq!(back.meta["artifact_version"], ARTIFACT_VERSION);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn compacted_model_round_trips() {
        let c = Checkpoint::new(sample().model.compact().unwrap());
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        let err = Checkpoint::load(dir.path().join("missing.ckpt")).unwrap_err();
        assert!(err.to_string().contains("missing.ckpt"));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        let line = format!("{MAGIC} {FORMAT_VERSION}");
        bytes.splice(0..line.len(), format!("{MAGIC} 7").into_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 7") && err.contains(&format!("version {FORMAT_VERSION}")), "{err}");
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [10, 300, bytes.len() / 2, bytes.len() - 80, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let at = bytes.len() - 200;
        flipped[at] ^= 0x40;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("digest mismatch"), "{err}");
        assert!(Checkpoint::from_bytes(b"hello\n").is_err());
    }

    #[test]
    fn meta_must_be_single_line() {
        let c = Checkpoint::new(build_lenet5(0)).with_meta("bad", "a\nb");
        assert!(matches!(c.to_bytes(), Err(Error::Input(_))));
    }
}
