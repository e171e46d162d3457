//! Binary agent checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PPODYNCK"
//! version      u32       CHECKPOINT_VERSION
//! header_len   u32
//! header       JSON      {"actor": MlpSpec, "critic": MlpSpec, "shared_trunk": bool, "param_count": n}
//! params       n x f64   Agent::flat() order: per layer weight (row-major) then bias,
//!                        actor hidden, actor head, critic hidden (absent when shared), critic head
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_mlp, Agent, MlpSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPODYNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    actor: MlpSpec,
    critic: MlpSpec,
    shared_trunk: bool,
    param_count: usize,
}

pub fn write_checkpoint<W: Write>(mut w: W, agent: &Agent) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        actor: agent.actor.spec.clone(),
        critic: agent.critic.spec.clone(),
        shared_trunk: agent.shared_trunk,
        param_count: agent.param_count(),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for x in agent.flat() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Agent> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut agent = Agent {
        actor: init_mlp(&header.actor, 0)?,
        critic: init_mlp(&header.critic, 0)?,
        shared_trunk: header.shared_trunk,
    };
    if agent.shared_trunk {
        agent.critic.hidden.clear();
    }
    if agent.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters, specs imply {}",
            header.param_count,
            agent.param_count()
        )));
    }
    let mut flat = Vec::with_capacity(header.param_count);
    let mut buf = [0u8; 8];
    for _ in 0..header.param_count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
        flat.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    agent.set_flat(&flat)?;
    Ok(agent)
}

pub fn save_checkpoint(path: &Path, agent: &Agent) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), agent)
}

pub fn load_checkpoint(path: &Path) -> Result<Agent> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::networks::HeadKind;

    fn agent(shared: bool, head: HeadKind) -> Agent {
        let a = MlpSpec {
            input_dim: 3,
            hidden_widths: vec![4, 5],
            activation: Activation::Tanh,
            head,
        };
        let c = MlpSpec { head: HeadKind::Value, ..a.clone() };
        Agent::new(&a, &c, shared, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for shared in [false, true] {
            for head in [HeadKind::Categorical { n_actions: 4 }, HeadKind::TanhNormal { action_dim: 2 }] {
                let mut a = agent(shared, head);
                let mut flat = a.flat();
                flat[0] = f64::MIN_POSITIVE / 3.0;
                flat[1] = -0.0;
                a.set_flat(&flat).unwrap();
                let mut bytes = Vec::new();
                write_checkpoint(&mut bytes, &a).unwrap();
                let b = read_checkpoint(bytes.as_slice()).unwrap();
                assert_eq!(a.shared_trunk, b.shared_trunk);
                let (fa, fb) = (a.flat(), b.flat());
                assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let a = agent(false, HeadKind::Categorical { n_actions: 2 });
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &a).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
