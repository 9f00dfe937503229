//! Checkpoint persistence.
//!
//! The file starts with a text header (magic line, version, completed
//! stage, the configuration, then one `tensor` line per parameter blob)
//! terminated by an `end` line, followed by the blobs as little-endian
//! `f32` in header order.

use std::fs;
use std::path::Path;

use rcad_tensor::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::crd::CrdModel;
use crate::dpn::DpnModel;
use crate::error::{Error, Result};
use crate::rcae::RcaeModel;

const MAGIC: &str = "RCAD-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Rng streams derived from the seed.
pub(crate) mod streams {
    pub const INIT_RCAE: u64 = 1;
    pub const INIT_DPN: u64 = 2;
    pub const INIT_CRD: u64 = 3;
    pub const BASELINE: u64 = 4;
    pub const STAGE: [u64; 3] = [11, 12, 13];
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    /// 0 before training, 3 when the pipeline is complete.
    pub stage_completed: u8,
    pub rcae: RcaeModel,
    pub dpn: DpnModel,
    pub crd: CrdModel,
}

/// SHA-256 of a store's parameter values, hex encoded.
pub fn store_hash(store: &ParamStore) -> String {
    Sha256::digest(store.value_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    /// Freshly initialized models for `config`.
    pub fn initialize(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let rcae = RcaeModel::new(config.rcae_config(), &mut config.rng(streams::INIT_RCAE))?;
        let dpn = DpnModel::new(3, config.hidden_width, &mut config.rng(streams::INIT_DPN))?;
        let crd = CrdModel::new(config.crd_config(), &mut config.rng(streams::INIT_CRD))?;
        Ok(Checkpoint {
            config,
            stage_completed: 0,
            rcae,
            dpn,
            crd,
        })
    }

    pub fn rcae_hash(&self) -> String {
        store_hash(&self.rcae.store)
    }

    pub fn dpn_hash(&self) -> String {
        store_hash(&self.dpn.store)
    }

    pub fn crd_hash(&self) -> String {
        store_hash(&self.crd.store)
    }

    /// Copy rolled back to the end of stage 2 with a fresh detector that
    /// reads the given recursion depths.
    pub fn with_crd_steps(&self, steps: Vec<usize>) -> Result<Checkpoint> {
        if self.stage_completed < 2 {
            return Err(Error::Usage("a CRD variant needs a checkpoint past stage 2".into()));
        }
        let mut config = self.config.clone();
        config.crd_steps = Some(steps);
        config.validate()?;
        let crd = CrdModel::new(config.crd_config(), &mut config.rng(streams::INIT_CRD))?;
        Ok(Checkpoint {
            config,
            stage_completed: 2,
            rcae: self.rcae.clone(),
            dpn: self.dpn.clone(),
            crd,
        })
    }

    fn stores(&self) -> [(&str, &ParamStore); 3] {
        [("rcae", &self.rcae.store), ("dpn", &self.dpn.store), ("crd", &self.crd.store)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "{MAGIC}\nversion {FORMAT_VERSION}\nstage_completed {}\n",
            self.stage_completed
        );
        for line in self.config.to_text().lines() {
            header.push_str("config ");
            header.push_str(line);
            header.push('\n');
        }
        for (group, store) in self.stores() {
            for p in store.iter() {
                let dims: Vec<String> = p.value().shape().iter().map(|d| d.to_string()).collect();
                header.push_str(&format!("tensor {group}/{} {}\n", p.name(), dims.join("x")));
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, store) in self.stores() {
            out.extend_from_slice(&store.value_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let end = find_header_end(bytes).ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut version = None;
        let mut stage = None;
        let mut config_text = String::new();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "version" => version = rest.parse::<u32>().ok(),
                "stage_completed" => stage = rest.parse::<u8>().ok().filter(|&s| s <= 3),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "tensor" => {
                    let (name, dims) = rest
                        .rsplit_once(' ')
                        .ok_or_else(|| bad(format!("malformed tensor line {line:?}")))?;
                    let dims = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("malformed shape in {line:?}")))?;
                    tensors.push((name.to_string(), dims));
                }
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        }
        if version != Some(FORMAT_VERSION) {
            return Err(bad(format!("unsupported format version {version:?}")));
        }
        let stage = stage.ok_or_else(|| bad("missing or invalid stage_completed".into()))?;
        let config = PipelineConfig::parse(&config_text).map_err(|e| bad(format!("config: {e}")))?;
        let mut ckpt = Checkpoint::initialize(config)?;
        ckpt.stage_completed = stage;

        let expected: usize = ckpt.stores().iter().map(|(_, s)| s.len()).sum();
        if tensors.len() != expected {
            return Err(bad(format!("{} tensors listed, model has {expected}", tensors.len())));
        }
        let mut blob = &bytes[end + "end\n".len()..];
        let mut listed = tensors.into_iter();
        for (group, store) in [
            ("rcae", &mut ckpt.rcae.store),
            ("dpn", &mut ckpt.dpn.store),
            ("crd", &mut ckpt.crd.store),
        ] {
            for p in store.iter_mut() {
                let (name, dims) = listed.next().expect("count checked");
                let want = format!("{group}/{}", p.name());
                if name != want || dims != p.value().shape() {
                    return Err(bad(format!(
                        "tensor {name} {dims:?} does not match {want} {:?}",
                        p.value().shape()
                    )));
                }
                let n = p.value().len() * 4;
                if blob.len() < n {
                    return Err(bad(format!("data truncated in {name}")));
                }
                let values = blob[..n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                *p.value_mut() = Tensor::new(&dims, values)?;
                blob = &blob[n..];
            }
        }
        if !blob.is_empty() {
            return Err(bad(format!("{} trailing bytes", blob.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"\nend\n";
    bytes.windows(needle.len()).position(|w| w == needle).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Preset;

    fn small() -> Checkpoint {
        let mut c = PipelineConfig::preset(Preset::Desk);
        c.hidden_width = 4;
        c.crd_width = 2;
        Checkpoint::initialize(c).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut ck = small();
        ck.stage_completed = 2;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.stage_completed, 2);
        assert_eq!(back.rcae_hash(), ck.rcae_hash());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
    }

    #[test]
    fn crd_variant_resets_stage_three() {
        let mut ck = small();
        assert!(ck.with_crd_steps(vec![3]).is_err());
        ck.stage_completed = 3;
        let v = ck.with_crd_steps(vec![1, 3]).unwrap();
        assert_eq!(v.stage_completed, 2);
        assert_eq!(v.crd.config.volume_depth(), 3);
        assert_eq!(v.rcae_hash(), ck.rcae_hash());
    }
}
