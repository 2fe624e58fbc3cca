//! Versioned binary checkpoint.
//!
//! Layout, little endian:
//!
//! ```text
//! magic    8 bytes  "SCDACKPT"
//! version  u32
//! body     fields below, each length-prefixed with a u64
//! digest   32 bytes SHA-256 of magic..body
//! ```
//!
//! Body: phase, seed, config hash, config TOML, policy spec, policy net
//! params, log_std, critic spec, reward critic params, cost critic params,
//! optional Fisher, optional snapshot.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{GaussianPolicy, Mlp, MlpSpec, ParamVector};
use crate::rollout::Critics;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `pretrain`, or `adapt` with strategy and target.
    pub phase: String,
    pub seed: u64,
    pub config_hash: String,
    /// The experiment config the checkpoint was produced with.
    pub config_toml: String,
    pub policy: GaussianPolicy,
    pub critics: Critics,
    /// Diagonal Fisher in the flat policy layout.
    pub fisher: Option<ParamVector>,
    /// Anchor parameters for EWC in the flat policy layout.
    pub snapshot: Option<ParamVector>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.phase);
        w.u64(self.seed);
        w.str(&self.config_hash);
        w.str(&self.config_toml);
        w.spec(self.policy.spec());
        w.f64s(self.policy.net().params().values());
        w.f64s(self.policy.log_std());
        w.spec(self.critics.reward.spec());
        w.f64s(self.critics.reward.params().values());
        w.f64s(self.critics.cost.params().values());
        for opt in [&self.fisher, &self.snapshot] {
            match opt {
                Some(p) => {
                    w.0.push(1);
                    w.f64s(p.values());
                }
                None => w.0.push(0),
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader {
            buf: payload,
            pos: 12,
        };
        let phase = r.str()?;
        let seed = r.u64()?;
        let config_hash = r.str()?;
        let config_toml = r.str()?;
        let policy_spec = r.spec()?;
        let net = r.f64s()?;
        let log_std = r.f64s()?;
        let critic_spec = r.spec()?;
        let reward = r.f64s()?;
        let cost = r.f64s()?;
        let fisher = r.optional_f64s()?;
        let snapshot = r.optional_f64s()?;
        if r.pos != payload.len() {
            return Err(corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("digest mismatch".into()));
        }

        let mlp = |spec: &MlpSpec, values: Vec<f64>, what: &str| -> Result<Mlp> {
            if values.len() != spec.param_count() {
                return Err(corrupt(format!(
                    "{what}: {} values for a spec with {}",
                    values.len(),
                    spec.param_count()
                )));
            }
            Mlp::new(spec.clone(), ParamVector::new(values, spec.layout())?)
        };
        let policy = GaussianPolicy::new(mlp(&policy_spec, net, "policy")?, log_std)
            .map_err(|e| corrupt(format!("policy: {e}")))?;
        let critics = Critics {
            reward: mlp(&critic_spec, reward, "reward critic")?,
            cost: mlp(&critic_spec, cost, "cost critic")?,
        };
        let layout = GaussianPolicy::param_layout(&policy_spec);
        let flat = |values: Option<Vec<f64>>, what: &str| -> Result<Option<ParamVector>> {
            values
                .map(|v| {
                    ParamVector::new(v, layout.clone()).map_err(|e| corrupt(format!("{what}: {e}")))
                })
                .transpose()
        };
        Ok(Self {
            phase,
            seed,
            config_hash,
            config_toml,
            policy,
            critics,
            fisher: flat(fisher, "fisher")?,
            snapshot: flat(snapshot, "snapshot")?,
        })
    }
}

fn corrupt(msg: String) -> Error {
    Error::CorruptedCheckpoint(msg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn spec(&mut self, spec: &MlpSpec) {
        self.u64(spec.input_dim as u64);
        self.u64(spec.hidden_dims.len() as u64);
        for &h in &spec.hidden_dims {
            self.u64(h as u64);
        }
        self.u64(spec.output_dim as u64);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(corrupt(format!(
                "length {n} at offset {} exceeds remaining {remaining} bytes",
                self.pos - 8
            )));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn optional_f64s(&mut self) -> Result<Option<Vec<f64>>> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(self.f64s()?)),
            tag => Err(corrupt(format!("bad option tag {tag}"))),
        }
    }

    fn spec(&mut self) -> Result<MlpSpec> {
        let input = self.u64()? as usize;
        let depth = self.len(8)?;
        let hidden = (0..depth)
            .map(|_| self.u64().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let output = self.u64()? as usize;
        let spec = MlpSpec::new(input, hidden, output);
        spec.validate().map_err(|e| corrupt(format!("spec: {e}")))?;
        Ok(spec)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
