//! Checkpoints: a text manifest plus a little-endian `f32` blob.
//!
//! ```text
//! csou-checkpoint 1
//! blob = final.f32
//! stages = 6
//! ...
//! param stage1.rho 1 0
//! param stage1.c1.static 16,1,3,3 3
//! ```
//!
//! Each `param` line gives the name, shape and offset (in values) into the
//! blob. Parameters are kept `f32`-representable, so a save/load round trip
//! reproduces them bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{NetConfig, Network};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "csou-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointFiles {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

fn config_lines(c: &NetConfig) -> Vec<(&'static str, String)> {
    vec![
        ("rows", c.rows.to_string()),
        ("cols", c.cols.to_string()),
        ("ratio", c.ratio.to_string()),
        ("sigma_psf", c.sigma_psf.to_string()),
        ("stages", c.stages.to_string()),
        ("history", c.history.to_string()),
        ("dir_pos", c.dir_pos.to_string()),
        ("dyn_weight", c.dyn_weight.to_string()),
        ("features", c.features.to_string()),
        ("bases", c.bases.to_string()),
        ("attn_hidden", c.attn_hidden.to_string()),
        ("aux_features", c.aux_features.to_string()),
        ("use_dynamic", c.use_dynamic.to_string()),
        ("use_dtg", c.use_dtg.to_string()),
        ("use_dir", c.use_dir.to_string()),
        ("intensity_scale", c.intensity_scale.to_string()),
    ]
}

/// Writes `manifest` and a blob next to it with extension `f32`.
pub fn save_checkpoint(net: &Network, manifest: &Path) -> Result<CheckpointFiles> {
    let blob = manifest.with_extension("f32");
    let blob_name = blob
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut text = format!("{HEADER}\nblob = {blob_name}\n");
    for (k, v) in config_lines(&net.cfg) {
        writeln!(text, "{k} = {v}").unwrap();
    }
    let mut bytes = Vec::with_capacity(net.params.numel() * 4);
    let mut offset = 0;
    for (name, t) in net.params.names.iter().zip(&net.params.tensors) {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(text, "param {name} {} {offset}", shape.join(",")).unwrap();
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    Ok(CheckpointFiles {
        manifest: manifest.into(),
        blob,
    })
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value {v:?} for {key}")))
}

pub fn load_checkpoint(manifest: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint manifest",
            manifest.display()
        )));
    }
    let mut cfg = NetConfig::default();
    let mut blob_name = None;
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [name, shape, offset] = f[..] else {
                return Err(Error::Checkpoint(format!("malformed line {line:?}")));
            };
            let shape = shape
                .split(',')
                .map(|d| parse::<usize>(name, d))
                .collect::<Result<Vec<_>>>()?;
            entries.push((name.to_string(), shape, parse::<usize>(name, offset)?));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Checkpoint(format!("malformed line {line:?}")))?;
        match k {
            "blob" => blob_name = Some(v.to_string()),
            "rows" => cfg.rows = parse(k, v)?,
            "cols" => cfg.cols = parse(k, v)?,
            "ratio" => cfg.ratio = parse(k, v)?,
            "sigma_psf" => cfg.sigma_psf = parse(k, v)?,
            "stages" => cfg.stages = parse(k, v)?,
            "history" => cfg.history = parse(k, v)?,
            "dir_pos" => cfg.dir_pos = parse(k, v)?,
            "dyn_weight" => cfg.dyn_weight = parse(k, v)?,
            "features" => cfg.features = parse(k, v)?,
            "bases" => cfg.bases = parse(k, v)?,
            "attn_hidden" => cfg.attn_hidden = parse(k, v)?,
            "aux_features" => cfg.aux_features = parse(k, v)?,
            "use_dynamic" => cfg.use_dynamic = parse(k, v)?,
            "use_dtg" => cfg.use_dtg = parse(k, v)?,
            "use_dir" => cfg.use_dir = parse(k, v)?,
            "intensity_scale" => cfg.intensity_scale = parse(k, v)?,
            _ => return Err(Error::Checkpoint(format!("unknown key {k:?}"))),
        }
    }
    let blob_name = blob_name.ok_or_else(|| Error::Checkpoint("manifest names no blob".into()))?;
    let blob = manifest.with_file_name(blob_name);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut net = Network::zeroed(cfg)?;
    if entries.len() != net.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, configuration needs {}",
            entries.len(),
            net.params.len()
        )));
    }
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(offset * 4..(offset + n) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("blob too short for {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        net.params
            .set(&name, Tensor::from_vec(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(net)
}
