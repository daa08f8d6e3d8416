use std::path::Path;

use super::model::{LanguageModel, LmConfig, LmMode};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use crate::util::{put_f64s, put_str, put_u64, write_atomic, Digest, Reader};

const MAGIC: &[u8; 4] = b"GALM";
const VERSION: u64 = 1;

fn encode(lm: &LanguageModel) -> Vec<u8> {
    let c = lm.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, VERSION);
    for v in [
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.max_seq_len,
        c.vocab_size,
    ] {
        put_u64(&mut out, v as u64);
    }
    put_u64(&mut out, c.seed);
    put_u64(&mut out, c.mode as u64);
    put_u64(&mut out, lm.is_frozen() as u64);
    put_u64(&mut out, lm.vocab().len() as u64);
    for t in lm.vocab().tokens() {
        put_str(&mut out, t);
    }
    put_u64(&mut out, lm.params().len() as u64);
    for p in lm.params().iter() {
        put_str(&mut out, &p.id);
        put_u64(&mut out, p.tensor.ndim() as u64);
        for &s in p.tensor.shape() {
            put_u64(&mut out, s as u64);
        }
        put_f64s(&mut out, p.tensor.data());
    }
    out.extend_from_slice(&lm.content_hash().0);
    out
}

/// Writes the model atomically.
pub fn save_lm(lm: &LanguageModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(lm))
}

pub fn load_lm(path: &Path) -> Result<LanguageModel> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    })
}

fn decode(bytes: &[u8]) -> std::result::Result<LanguageModel, String> {
    let short = || "truncated".to_string();
    let mut r = Reader::new(bytes);
    if r.take(4).ok_or_else(short)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u64().ok_or_else(short)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut u = || r.u64().map(|v| v as usize).ok_or_else(short);
    let (n_layers, d_model, n_heads, d_ff, max_seq_len, vocab_size) = (u()?, u()?, u()?, u()?, u()?, u()?);
    let seed = r.u64().ok_or_else(short)?;
    let mode = match r.u64().ok_or_else(short)? {
        0 => LmMode::Autoregressive,
        1 => LmMode::Masked,
        m => return Err(format!("unknown mode {m}")),
    };
    let frozen = r.u64().ok_or_else(short)? != 0;
    let config = LmConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff,
        max_seq_len,
        vocab_size,
        seed,
        mode,
    };
    let n_tokens = r.u64().ok_or_else(short)? as usize;
    if n_tokens != vocab_size {
        return Err("vocabulary size mismatch".into());
    }
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 16));
    for _ in 0..n_tokens {
        tokens.push(r.string().ok_or_else(short)?);
    }
    let vocab = Vocab::from_tokens(tokens);
    let n_params = r.u64().ok_or_else(short)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let id = r.string().ok_or_else(short)?;
        let ndim = r.u64().ok_or_else(short)? as usize;
        if ndim > 8 {
            return Err(format!("implausible rank {ndim} for {id}"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(short)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or("shape overflow")?;
        let data = r.f64s(n).ok_or_else(short)?;
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(id, t).map_err(|e| e.to_string())?;
    }
    let stored = r.digest().ok_or_else(short)?;
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    let lm = LanguageModel::from_parts(config, vocab, params, frozen).map_err(|e| e.to_string())?;
    if lm.content_hash() != stored {
        return Err(format!(
            "content hash mismatch: stored {}, computed {}",
            stored.short(),
            lm.content_hash().short()
        ));
    }
    Ok(lm)
}

/// Reads only the trailing content hash.
pub fn peek_lm_hash(path: &Path) -> Result<Digest> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 36 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: "not a language model checkpoint".into(),
        });
    }
    Ok(Digest(bytes[bytes.len() - 32..].try_into().unwrap()))
}
