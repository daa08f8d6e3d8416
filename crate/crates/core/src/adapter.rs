//! The trainable adapter (structural encoder, fusion block, optional task
//! head) and its `GADP` checkpoint.
//!
//! Checkpoint layout: magic `GADP`, version, d_model, gnn layers, hidden
//! width, layer kind, structure mode, control MLP widths, class count (0
//! without a task head), config hash, parameter count, then per parameter
//! its id, rank, shape and data; a trailing digest covers every prior byte.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fusion::{Fusion, TaskHead};
use crate::gnn::{prepare_adjacency, GnnAdapter, GnnConfig, LayerKind, StructureMode};
use crate::tensor::{Csr, ParamSet, Tape, Tensor, Var};
use crate::util::{put_f64s, put_str, put_u64, write_atomic, Digest, Reader};

const MAGIC: &[u8; 4] = b"GADP";
const VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModel {
    pub gnn: GnnAdapter,
    pub fusion: Fusion,
    pub task: Option<TaskHead>,
    pub params: ParamSet,
}

impl AdapterModel {
    /// Freshly initialized structural encoder and fusion block.
    pub fn new(gnn_config: GnnConfig, d_model: usize, seed: u64) -> Result<Self> {
        let gnn = GnnAdapter::new(gnn_config, d_model)?;
        let fusion = Fusion::new(d_model, gnn.config.hidden_dim);
        let mut params = ParamSet::new();
        gnn.init_params(&mut params, seed)?;
        fusion.init_params(&mut params, seed)?;
        Ok(AdapterModel {
            gnn,
            fusion,
            task: None,
            params,
        })
    }

    pub fn d_model(&self) -> usize {
        self.fusion.d_model
    }

    pub fn add_task_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if self.task.is_some() {
            return Err(Error::contract("task head already present"));
        }
        let head = TaskHead::new(self.d_model(), n_classes)?;
        head.init_params(&mut self.params, seed)?;
        self.task = Some(head);
        Ok(())
    }

    fn replace_block(&mut self, prefix: &str, seed: u64) -> Result<()> {
        let mut fresh = ParamSet::new();
        match prefix {
            "gnn." => self.gnn.init_params(&mut fresh, seed)?,
            "fuse." => self.fusion.init_params(&mut fresh, seed)?,
            _ => return Err(Error::contract(format!("unknown block {prefix}"))),
        }
        self.params.overwrite(&fresh);
        Ok(())
    }

    /// Seeded re-initialization of the structural encoder only.
    pub fn reinit_gnn(&mut self, seed: u64) -> Result<()> {
        self.replace_block("gnn.", seed)
    }

    /// Seeded re-initialization of the fusion block only.
    pub fn reinit_fusion(&mut self, seed: u64) -> Result<()> {
        self.replace_block("fuse.", seed)
    }

    pub fn adjacency(&self, graph_adj: &Csr) -> Arc<Csr> {
        prepare_adjacency(graph_adj, &self.gnn.config)
    }

    /// Structural representations for all nodes, recorded on `tape`.
    pub fn z_on(&self, tape: &mut Tape, x0: Var, adj: &Arc<Csr>) -> Result<Var> {
        self.gnn.forward_on(tape, &self.params, x0, adj)
    }

    pub fn z(&self, x0: &Tensor, graph_adj: &Csr) -> Result<Tensor> {
        self.gnn.forward(&self.params, x0, graph_adj)
    }

    pub fn content_hash(&self) -> Digest {
        self.params.content_hash()
    }

    pub fn save(&self, path: &Path, config_hash: &Digest) -> Result<()> {
        write_atomic(path, &self.encode(config_hash))
    }

    fn encode(&self, config_hash: &Digest) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, VERSION);
        put_u64(&mut out, self.d_model() as u64);
        let c = &self.gnn.config;
        put_u64(&mut out, c.n_layers as u64);
        put_u64(&mut out, c.hidden_dim as u64);
        put_u64(&mut out, c.kind as u64);
        put_u64(&mut out, c.structure_mode as u64);
        put_u64(&mut out, self.gnn.mlp_widths.len() as u64);
        for &w in &self.gnn.mlp_widths {
            put_u64(&mut out, w as u64);
        }
        put_u64(&mut out, self.task.map_or(0, |t| t.n_classes) as u64);
        out.extend_from_slice(&config_hash.0);
        put_u64(&mut out, self.params.len() as u64);
        for p in self.params.iter() {
            put_str(&mut out, &p.id);
            put_u64(&mut out, p.tensor.ndim() as u64);
            for &s in p.tensor.shape() {
                put_u64(&mut out, s as u64);
            }
            put_f64s(&mut out, p.tensor.data());
        }
        let digest = Digest::of(&out);
        out.extend_from_slice(&digest.0);
        out
    }

    /// Loads a checkpoint, returning the model and its recorded config hash.
    pub fn load(path: &Path) -> Result<(Self, Digest)> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|msg| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        })
    }

    fn decode(bytes: &[u8]) -> std::result::Result<(Self, Digest), String> {
        let short = || "truncated".to_string();
        if bytes.len() < 36 {
            return Err(short());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        if Digest::of(body).0 != tail {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader::new(body);
        if r.take(4).ok_or_else(short)? != MAGIC {
            return Err("bad magic".into());
        }
        if r.u64().ok_or_else(short)? != VERSION {
            return Err("unsupported version".into());
        }
        let mut u = || r.u64().map(|v| v as usize).ok_or_else(short);
        let d_model = u()?;
        let n_layers = u()?;
        let hidden_dim = u()?;
        let kind = match u()? {
            0 => LayerKind::Sage,
            1 => LayerKind::GatStar,
            2 => LayerKind::MlpControl,
            k => return Err(format!("unknown layer kind {k}")),
        };
        let structure_mode = match u()? {
            0 => StructureMode::Full,
            1 => StructureMode::SelfLoopsOnly,
            k => return Err(format!("unknown structure mode {k}")),
        };
        let n_widths = u()?;
        if n_widths > 64 {
            return Err("implausible width count".into());
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(u()?);
        }
        let n_classes = u()?;
        let config_hash = r.digest().ok_or_else(short)?;
        let n_params = r.u64().ok_or_else(short)? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let id = r.string().ok_or_else(short)?;
            let ndim = r.u64().ok_or_else(short)? as usize;
            if ndim > 8 {
                return Err("implausible rank".into());
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(short)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or("shape overflow")?;
            let data = r.f64s(n).ok_or_else(short)?;
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.insert(id, t).map_err(|e| e.to_string())?;
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        let config = GnnConfig {
            n_layers,
            hidden_dim,
            kind,
            structure_mode,
        };
        let gnn = if kind == LayerKind::MlpControl {
            GnnAdapter::mlp_with_widths(config, d_model, widths)
        } else {
            GnnAdapter::new(config, d_model)
        }
        .map_err(|e| e.to_string())?;
        let fusion = Fusion::new(d_model, hidden_dim);
        let task = if n_classes == 0 {
            None
        } else {
            Some(TaskHead::new(d_model, n_classes).map_err(|e| e.to_string())?)
        };
        let model = AdapterModel {
            gnn,
            fusion,
            task,
            params,
        };
        model.check_layout().map_err(|e| e.to_string())?;
        Ok((model, config_hash))
    }

    fn check_layout(&self) -> Result<()> {
        let mut want = ParamSet::new();
        self.gnn.init_params(&mut want, 0)?;
        self.fusion.init_params(&mut want, 0)?;
        if let Some(t) = self.task {
            t.init_params(&mut want, 0)?;
        }
        let a: Vec<_> = want.iter().map(|p| (&p.id, p.tensor.shape())).collect();
        let b: Vec<_> = self.params.iter().map(|p| (&p.id, p.tensor.shape())).collect();
        if a != b {
            return Err(Error::contract("checkpoint parameters do not match its configuration"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AdapterModel {
        let cfg = GnnConfig {
            hidden_dim: 4,
            ..Default::default()
        };
        AdapterModel::new(cfg, 8, 3).unwrap()
    }

    #[test]
    fn reinit_both_blocks_equals_fresh_init() {
        let fresh = model();
        let mut m = fresh.clone();
        for p in m.params.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let mut only_gnn = m.clone();
        only_gnn.reinit_gnn(3).unwrap();
        assert_eq!(only_gnn.params.subset("gnn."), fresh.params.subset("gnn."));
        assert_eq!(only_gnn.params.subset("fuse."), m.params.subset("fuse."));
        m.reinit_gnn(3).unwrap();
        m.reinit_fusion(3).unwrap();
        assert_eq!(m.content_hash(), fresh.content_hash());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gadp");
        let mut m = model();
        m.add_task_head(3, 1).unwrap();
        let h = Digest::of(b"cfg");
        m.save(&path, &h).unwrap();
        let (back, hh) = AdapterModel::load(&path).unwrap();
        assert_eq!(hh, h);
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(back.task, m.task);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(AdapterModel::load(&path), Err(Error::Corrupt { .. })));
    }
}
