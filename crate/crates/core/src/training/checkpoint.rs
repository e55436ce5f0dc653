//! Checkpoint files: a plain-text manifest ending in an `END` line, followed
//! by the raw little-endian `f32` payload the manifest describes.
//!
//! ```text
//! tubemae-checkpoint 1
//! kind=mae
//! step=300
//! rng.seed=7
//! rng.counter=300
//! config.model.d_enc=64
//! tensor role=param name=encoder.embed.weight shape=1536x64 offset=0 dtype=f32 decay=1 sha256=...
//! tensor role=adam.m name=encoder.embed.weight shape=1536x64 offset=393216 dtype=f32 decay=1 sha256=...
//! payload.bytes=...
//! payload.sha256=...
//! END
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::OptimState;
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &str = "tubemae-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Encoder and decoder from pre-training.
    Mae,
    /// Encoder and classification head.
    Classifier,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Mae => "mae",
            CheckpointKind::Classifier => "classifier",
        })
    }
}

impl FromStr for CheckpointKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "mae" => Ok(CheckpointKind::Mae),
            "classifier" => Ok(CheckpointKind::Classifier),
            _ => Err(()),
        }
    }
}

/// Everything needed to continue a run: parameters, optimizer moments, the
/// step counter, the resolved configuration, and the random state. All
/// randomness is derived from `(seed, step)`, so those two numbers are the
/// whole generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    pub config: ConfigMap,
    pub params: ParamStore<f32>,
    pub optim: OptimState<f32>,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{MAGIC}\nkind={}\nstep={}\nrng.seed={}\nrng.counter={}\n",
            self.kind, self.step, self.seed, self.step
        );
        for (k, v) in self.config.iter() {
            head.push_str(&format!("config.{k}={v}\n"));
        }
        let mut payload = Vec::new();
        for (id, p) in self.params.iter() {
            let parts = [
                ("param", &p.value),
                ("adam.m", &self.optim.m[id.0]),
                ("adam.v", &self.optim.v[id.0]),
            ];
            for (role, t) in parts {
                let offset = payload.len();
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                head.push_str(&format!(
                    "tensor role={role} name={} shape={} offset={offset} dtype=f32 decay={} sha256={}\n",
                    p.name,
                    shape_str(t.shape()),
                    u8::from(p.decay),
                    sha(&bytes)
                ));
                payload.extend_from_slice(&bytes);
            }
        }
        head.push_str(&format!(
            "adam.step={}\npayload.bytes={}\npayload.sha256={}\nEND\n",
            self.optim.step,
            payload.len(),
            sha(&payload)
        ));
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nEND\n")
            .ok_or_else(|| Error::checkpoint("manifest", "no END line"))?;
        let head = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::checkpoint("manifest", "not UTF-8"))?;
        let payload = &bytes[end + 5..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::checkpoint("header", format!("expected `{MAGIC}`")));
        }

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut config = ConfigMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                tensors.push(TensorEntry::parse(rest)?);
            } else if let Some(rest) = line.strip_prefix("config.") {
                config
                    .set_pair(rest)
                    .map_err(|e| Error::checkpoint("config", e.to_string()))?;
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::checkpoint("manifest", format!("bad line `{line}`")))?;
                fields.insert(k, v);
            }
        }
        fn field<T: FromStr>(fields: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::checkpoint(key, "missing"))?;
            raw.parse()
                .map_err(|_| Error::checkpoint(key, format!("cannot parse `{raw}`")))
        }

        let kind: String = field(&fields, "kind")?;
        let kind = kind
            .parse()
            .map_err(|_| Error::checkpoint("kind", format!("unknown kind `{kind}`")))?;
        let step: u64 = field(&fields, "step")?;
        let seed: u64 = field(&fields, "rng.seed")?;
        let counter: u64 = field(&fields, "rng.counter")?;
        if counter != step {
            return Err(Error::checkpoint("rng.counter", "disagrees with step"));
        }
        let adam_step: u64 = field(&fields, "adam.step")?;
        let declared: usize = field(&fields, "payload.bytes")?;
        if payload.len() != declared {
            return Err(Error::checkpoint(
                "payload.bytes",
                format!("manifest declares {declared} bytes, file holds {}", payload.len()),
            ));
        }
        let digest: String = field(&fields, "payload.sha256")?;
        if sha(payload) != digest {
            return Err(Error::checkpoint("payload.sha256", "hash mismatch"));
        }

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for chunk in tensors.chunks(3) {
            let [p, mm, vv] = chunk else {
                return Err(Error::checkpoint("tensor", "expected param, adam.m, adam.v triples"));
            };
            for (e, role) in [(p, "param"), (mm, "adam.m"), (vv, "adam.v")] {
                if e.role != role || e.name != p.name {
                    return Err(Error::checkpoint(
                        format!("tensor {}", e.name),
                        format!("expected {role} of `{}`, found {}", p.name, e.role),
                    ));
                }
            }
            if params.find(&p.name).is_some() {
                return Err(Error::checkpoint(format!("tensor {}", p.name), "duplicate"));
            }
            params.add(p.name.clone(), p.read(payload)?, p.decay);
            m.push(mm.read(payload)?);
            v.push(vv.read(payload)?);
        }
        Ok(Checkpoint {
            kind,
            step,
            seed,
            config,
            params,
            optim: OptimState {
                m,
                v,
                step: adam_step,
            },
        })
    }
}

struct TensorEntry {
    role: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    decay: bool,
    sha256: String,
}

impl TensorEntry {
    fn parse(line: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = line.split(' ').filter_map(|p| p.split_once('=')).collect();
        let name = kv.get("name").copied().unwrap_or("?").to_string();
        let field = |key: &str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| Error::checkpoint(format!("tensor {name} {key}"), "missing"))
        };
        let bad = |key: &str| Error::checkpoint(format!("tensor {name} {key}"), "malformed");
        if field("dtype")? != "f32" {
            return Err(Error::checkpoint(format!("tensor {name} dtype"), "only f32 is supported"));
        }
        Ok(TensorEntry {
            role: field("role")?.to_string(),
            shape: parse_shape(field("shape")?).ok_or_else(|| bad("shape"))?,
            offset: field("offset")?.parse().map_err(|_| bad("offset"))?,
            decay: match field("decay")? {
                "1" => true,
                "0" => false,
                _ => return Err(bad("decay")),
            },
            sha256: field("sha256")?.to_string(),
            name,
        })
    }

    fn read(&self, payload: &[u8]) -> Result<Tensor<f32>> {
        let label = format!("tensor {} ({})", self.name, self.role);
        let len: usize = self.shape.iter().product();
        let bytes = payload
            .get(self.offset..self.offset + 4 * len)
            .ok_or_else(|| Error::checkpoint(format!("{label} offset"), "outside the payload"))?;
        if sha(bytes) != self.sha256 {
            return Err(Error::checkpoint(format!("{label} sha256"), "hash mismatch"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&self.shape, data).map_err(|e| Error::checkpoint(label, e.to_string()))
    }
}

/// Writes to a temporary file in the target directory, then renames it into
/// place, so readers never observe a partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-9, -0.0]).unwrap(), true);
        params.add("a.bias", Tensor::new(&[3], vec![0.1, 0.2, f32::MIN_POSITIVE]).unwrap(), false);
        params.add("s", Tensor::scalar(7.0), false);
        let mut optim = OptimState::new(&params);
        optim.m[0].data_mut()[1] = 0.25;
        optim.v[1].data_mut()[2] = 1e-12;
        optim.step = 12;
        let mut config = ConfigMap::new();
        config.set("model.d_enc", 64);
        config.set("pretrain.mask_strategy", "tube");
        Checkpoint {
            kind: CheckpointKind::Mae,
            step: 12,
            seed: 99,
            config,
            params,
            optim,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.params.value(crate::tensor::ParamId(0)).data()[5].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.optim, c.optim);
        assert_eq!(back.config, c.config);
        assert_eq!(back.seed, 99);
        assert!(back.params.get(crate::tensor::ParamId(0)).decay);
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload.bytes"), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..40]).unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");
    }

    #[test]
    fn corrupted_payload_names_hash() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload.sha256"), "{err}");
    }

    #[test]
    fn corrupted_manifest_names_field() {
        let text = String::from_utf8_lossy(&sample().to_bytes()).into_owned();
        let bad = text.replacen("step=12", "step=twelve", 1);
        let err = Checkpoint::from_bytes(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
        let bad = text.replacen("dtype=f32", "dtype=f16", 1);
        let err = Checkpoint::from_bytes(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("a.weight dtype"), "{err}");
    }
}
