//! Flow stages (k-rectified flows and their one-step students) and the
//! checkpoint file format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"RFCK" | u32 version | u32 header_len | header JSON | f64 x P (raw params) | f64 x P (EMA shadow)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{euler_simulate, guided_velocity, Trajectory, VelocityField};
use crate::nn::{MlpVelocityNet, NetConfig, ParamBlock, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageRole {
    /// A continuous flow integrated with Euler steps.
    Flow,
    /// A one-step model distilled from the `teacher_k`-rectified flow.
    OneStep { teacher_k: u32 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub train_steps: u64,
    /// Fingerprint of the stage this one was trained from.
    pub teacher: Option<String>,
    /// Fingerprint of the pair dataset it was trained on.
    pub pairs: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStage {
    pub id: String,
    pub k: u32,
    pub role: StageRole,
    /// Guidance scale used when sampling this stage.
    pub alpha: f64,
    /// Raw training weights live in `net.params`; inference uses `ema`.
    pub net: MlpVelocityNet,
    pub ema: ParamStore,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct StageHeader {
    id: String,
    k: u32,
    role: StageRole,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    layout: Vec<ParamBlock>,
    param_count: usize,
    stage: StageHeader,
    provenance: Provenance,
}

impl FlowStage {
    pub fn new_flow(id: impl Into<String>, k: u32, alpha: f64, net: MlpVelocityNet, provenance: Provenance) -> Result<Self> {
        let ema = net.params.clone();
        Self::from_parts(id.into(), k, StageRole::Flow, alpha, net, ema, provenance)
    }

    pub fn from_parts(
        id: String,
        k: u32,
        role: StageRole,
        alpha: f64,
        net: MlpVelocityNet,
        ema: ParamStore,
        provenance: Provenance,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::input("reflow index k must be >= 1"));
        }
        if let StageRole::OneStep { teacher_k } = role {
            if teacher_k != k {
                return Err(Error::input("a distilled stage carries the k of its teacher"));
            }
        }
        if !ema.same_layout(&net.params) {
            return Err(Error::input("EMA shadow layout differs from the network"));
        }
        Ok(Self {
            id,
            k,
            role,
            alpha,
            net,
            ema,
            provenance,
        })
    }

    pub fn is_one_step(&self) -> bool {
        matches!(self.role, StageRole::OneStep { .. })
    }

    pub fn require_flow(&self, what: &str) -> Result<()> {
        if self.is_one_step() {
            Err(Error::usage(format!(
                "{what} needs a continuous flow, but stage '{}' is a distilled one-step model",
                self.id
            )))
        } else {
            Ok(())
        }
    }

    pub fn require_one_step(&self, what: &str) -> Result<()> {
        if self.is_one_step() {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "{what} needs a distilled one-step model, but stage '{}' is a continuous flow",
                self.id
            )))
        }
    }

    /// Conditional velocity from the EMA weights.
    pub fn forward(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.net.forward_with(&self.ema, x, t, c)
    }

    pub fn guided_velocity(&self, x: &[f64], t: &[f64], c: &[usize], alpha: f64) -> Result<Vec<f64>> {
        guided_velocity(self, x, t, c, alpha)
    }

    pub fn simulate(&self, z0: &[f64], c: usize, steps: usize, alpha: f64) -> Result<Trajectory> {
        euler_simulate(self, z0, c, steps, alpha)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            net: self.net.config.clone(),
            layout: self.net.params.layout().to_vec(),
            param_count: self.net.params.len(),
            stage: StageHeader {
                id: self.id.clone(),
                k: self.k,
                role: self.role,
                alpha: self.alpha,
            },
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 16 * self.net.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.net.params.data().iter().chain(self.ema.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let p = header.param_count;
        let floats = &bytes[12 + hlen..];
        if floats.len() != 16 * p {
            return Err(bad(&format!(
                "expected {} parameter bytes, found {}",
                16 * p,
                floats.len()
            )));
        }
        let mut values = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let raw: Vec<f64> = values.by_ref().take(p).collect();
        let shadow: Vec<f64> = values.collect();
        if header.layout != header.net.layout() {
            return Err(bad("layout does not match network config"));
        }
        let params = ParamStore::from_parts(header.layout.clone(), raw)?;
        let ema = ParamStore::from_parts(header.layout, shadow)?;
        let net = MlpVelocityNet::from_params(header.net, params)?;
        let s = header.stage;
        Self::from_parts(s.id, s.k, s.role, s.alpha, net, ema, header.provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// SHA-256 of the checkpoint encoding; identifies this exact stage.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

impl VelocityField for FlowStage {
    fn dim(&self) -> usize {
        self.net.state_dim()
    }

    fn velocity(&self, x: &[f64], t: &[f64], c: &[usize]) -> Result<Vec<f64>> {
        self.forward(x, t, c)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage() -> FlowStage {
        let cfg = NetConfig {
            state_dim: 2,
            hidden: vec![4],
            vocab: 2,
            cond_dim: 2,
            time_freqs: 2,
        };
        let net = MlpVelocityNet::init_dense(cfg, 3).unwrap();
        let mut s = FlowStage::new_flow("v1", 1, 2.0, net, Provenance::default()).unwrap();
        s.ema.data_mut()[0] = 42.0;
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = stage();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"RFCK");
        let back = FlowStage::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint().unwrap(), s.fingerprint().unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let bytes = stage().to_bytes().unwrap();
        let err = FlowStage::from_bytes(&bytes[..bytes.len() - 8], "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(FlowStage::from_bytes(b"nope", "mem").is_err());
    }

    #[test]
    fn one_step_stage_must_carry_teacher_k() {
        let s = stage();
        let r = FlowStage::from_parts(
            "d".into(),
            2,
            StageRole::OneStep { teacher_k: 1 },
            1.0,
            s.net.clone(),
            s.ema.clone(),
            Provenance::default(),
        );
        assert!(r.is_err());
        assert!(FlowStage::from_parts("x".into(), 0, StageRole::Flow, 1.0, s.net, s.ema, Provenance::default()).is_err());
    }
}
