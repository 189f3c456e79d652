//! Plain-text model checkpoints.
//!
//! ```text
//! foa-ckpt v1
//! meta scheme cl_sc
//! meta obs_dim 64
//! ...
//! param fe1.0.weight 64x64 <values>
//! ```
//!
//! Values are written with 17 significant digits, so a save/load/save
//! cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::channel::ChannelKind;
use crate::error::{Error, Result};
use crate::model::{Architecture, ClScModel};
use crate::tensor::Tensor;
use crate::training::Scheme;

const MAGIC: &str = "foa-ckpt v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub scheme: Scheme,
    /// Extra `meta` entries (seed, SNR, ...), kept in key order.
    pub meta: BTreeMap<String, String>,
    pub model: ClScModel,
}

fn arch_meta(a: &Architecture) -> [(&'static str, String); 8] {
    [
        ("obs_dim", a.obs_dim.to_string()),
        ("feature_dim", a.feature_dim.to_string()),
        ("bandwidth", a.bandwidth.to_string()),
        ("z_dim", a.z_dim.to_string()),
        ("proj_dim", a.proj_dim.to_string()),
        ("hidden", a.hidden.to_string()),
        ("num_classes", a.num_classes.to_string()),
        ("channel", a.channel.to_string()),
    ]
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let mut out = format!("{MAGIC}\nmeta scheme {}\n", ckpt.scheme);
    for (k, v) in arch_meta(&ckpt.model.arch) {
        let _ = writeln!(out, "meta {k} {v}");
    }
    for (k, v) in &ckpt.meta {
        let _ = writeln!(out, "meta {k} {v}");
    }
    let store = &ckpt.model.store;
    for id in store.ids() {
        let t = store.get(id);
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = write!(out, "param {} {}", store.name(id), shape.join("x"));
        for v in t.data() {
            let _ = write!(out, " {v:.16e}");
        }
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        what: "checkpoint",
        line,
        reason: reason.into(),
    }
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(parse_err(1, format!("expected header `{MAGIC}`"))),
    }
    let mut meta = BTreeMap::new();
    let mut params = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("meta") => {
                let key = fields.next().ok_or_else(|| parse_err(n, "meta line without key"))?;
                let value: Vec<&str> = fields.collect();
                meta.insert(key.to_string(), value.join(" "));
            }
            Some("param") => {
                let name = fields.next().ok_or_else(|| parse_err(n, "param line without name"))?;
                let shape = fields
                    .next()
                    .ok_or_else(|| parse_err(n, "param line without shape"))?
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|e| parse_err(n, format!("bad shape: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let data = fields
                    .map(|v| v.parse::<f64>().map_err(|e| parse_err(n, format!("bad value `{v}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let t = Tensor::new(shape, data).map_err(|e| parse_err(n, e.to_string()))?;
                params.push((n, name.to_string(), t));
            }
            Some(other) => return Err(parse_err(n, format!("unknown record `{other}`"))),
            None => {}
        }
    }

    let mut take = |key: &str| meta.remove(key).ok_or_else(|| parse_err(0, format!("missing meta `{key}`")));
    let num = |key: &str, v: String| {
        v.parse::<usize>()
            .map_err(|e| parse_err(0, format!("meta `{key}`: {e}")))
    };
    let scheme: Scheme = take("scheme")?.parse()?;
    let arch = Architecture {
        obs_dim: num("obs_dim", take("obs_dim")?)?,
        feature_dim: num("feature_dim", take("feature_dim")?)?,
        bandwidth: num("bandwidth", take("bandwidth")?)?,
        z_dim: num("z_dim", take("z_dim")?)?,
        proj_dim: num("proj_dim", take("proj_dim")?)?,
        hidden: num("hidden", take("hidden")?)?,
        num_classes: num("num_classes", take("num_classes")?)?,
        channel: take("channel")?.parse::<ChannelKind>()?,
    };
    let mut model = ClScModel::new(arch, 0)?;
    if params.len() != model.store.len() {
        return Err(parse_err(
            0,
            format!("{} parameters, architecture has {}", params.len(), model.store.len()),
        ));
    }
    for (n, name, t) in params {
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| parse_err(n, format!("unknown parameter `{name}`")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(parse_err(
                n,
                format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    Ok(Checkpoint { scheme, meta, model })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClScModel {
        let arch = Architecture {
            obs_dim: 5,
            feature_dim: 4,
            bandwidth: 2,
            z_dim: 3,
            proj_dim: 2,
            hidden: 6,
            num_classes: 3,
            channel: ChannelKind::Rayleigh,
        };
        ClScModel::new(arch, 9).unwrap()
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "9".to_string());
        let ckpt = Checkpoint {
            scheme: Scheme::NomaJscc,
            meta,
            model: tiny(),
        };
        let text = to_text(&ckpt);
        let back = from_text(&text).unwrap();
        assert_eq!(back.scheme, Scheme::NomaJscc);
        assert_eq!(back.meta.get("seed").map(String::as_str), Some("9"));
        assert_eq!(back.model.arch, ckpt.model.arch);
        for id in ckpt.model.store.ids() {
            assert_eq!(ckpt.model.store.get(id), back.model.store.get(id));
        }
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ckpt = Checkpoint {
            scheme: Scheme::ClSc,
            meta: BTreeMap::new(),
            model: tiny(),
        };
        let text = to_text(&ckpt);
        assert!(from_text("nope").is_err());
        assert!(from_text(&text.replace("meta hidden 6", "meta hidden 7")).is_err());
        assert!(from_text(&text.replace("param fe1.0.bias", "param fe9.0.bias")).is_err());
        let truncated: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(from_text(&truncated).is_err());
    }
}
