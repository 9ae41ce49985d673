//! Checkpoint files.
//!
//! The parameter file is the magic `TVPR1` followed by one record per
//! parameter: `u32` name length, name bytes, `u32` rank, `u64` extents and
//! the `f32` values, all little-endian. Three sidecars sit next to it:
//! `<path>.index` (one `name shape offset` line per record), `<path>.toml`
//! (the training config) and `<path>.vocab` (the vocabulary).

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::binio::Cursor;
use crate::caption::Vocabulary;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::TvprModel;
use crate::tensor::{DenseArray, ParamStore};

const MAGIC: &[u8; 5] = b"TVPR1";

pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn encode_params(store: &ParamStore<f32>) -> (Vec<u8>, String) {
    let mut buf = MAGIC.to_vec();
    let mut index = String::new();
    for (_, p) in store.iter() {
        let offset = buf.len();
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!("{} {} {offset}\n", p.name, dims.join("x")));
    }
    (buf, index)
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, DenseArray<f32>)>> {
    let bad = |reason: &str| Error::format("checkpoint", reason.to_string());
    let mut cur = Cursor::new(bytes);
    if cur.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let mut out = Vec::new();
    while !cur.done() {
        let len = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let name = cur.take(len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape"))?;
        let numel = shape.iter().product::<usize>();
        let data = (0..numel)
            .map(|_| cur.f32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated values"))?;
        out.push((name, DenseArray::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, model: &TvprModel<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (bytes, index) = encode_params(&model.store);
    let write = |p: PathBuf, data: &[u8]| std::fs::write(&p, data).map_err(|e| Error::io(&p, e));
    write(path.to_path_buf(), &bytes)?;
    write(sidecar(path, "index"), index.as_bytes())?;
    write(sidecar(path, "toml"), cfg.to_toml_string().as_bytes())?;
    model.vocab.save(&sidecar(path, "vocab"))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TvprModel<f32>)> {
    let cfg = TrainConfig::from_toml_str(&crate::config::read(&sidecar(path, "toml"))?)?;
    let vocab = Vocabulary::load(&sidecar(path, "vocab"))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut model = TvprModel::<f32>::new(&cfg.model, vocab, 0)?;
    let records = decode_params(&bytes)?;
    let mut seen = HashSet::new();
    for (name, value) in records {
        if !seen.insert(name.clone()) {
            return Err(Error::format("checkpoint", format!("parameter `{name}` appears twice")));
        }
        model.store.set_value(&name, value)?;
    }
    if seen.len() != model.store.len() {
        let missing: Vec<&str> = model
            .store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| !seen.contains(*n))
            .collect();
        return Err(Error::format("checkpoint", format!("missing parameters: {}", missing.join(", "))));
    }
    Ok((cfg, model))
}
