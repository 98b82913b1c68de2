//! Text checkpoints: a JSON header line with the model configuration, then one
//! line per parameter `name rows cols trainable v0 v1 ...`.
//!
//! Values are written with the shortest representation that parses back to
//! the same bits, so a save/load cycle is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use autodiff::Array;

use crate::error::{Error, Result};
use crate::model::{LatentSde, ModelConfig};

const MAGIC: &str = "sdematch-checkpoint v1";

pub fn to_string(model: &LatentSde) -> Result<String> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&serde_json::to_string(&model.config)?);
    out.push('\n');
    let store = &model.store;
    for (i, (name, value)) in store.names().iter().zip(store.values()).enumerate() {
        let trainable = store.is_trainable(autodiff::nn::ParamId(i)) as u8;
        out.push_str(&format!("{name} {} {} {trainable}", value.rows(), value.cols()));
        for v in value.data() {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn from_str(text: &str) -> Result<LatentSde> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(parse_err(0, "missing checkpoint header")),
    }
    let (n, header) = lines.next().ok_or_else(|| parse_err(1, "missing configuration"))?;
    let config: ModelConfig = serde_json::from_str(header).map_err(|e| parse_err(n, &e.to_string()))?;
    let mut model = LatentSde::new(config)?;
    let mut seen = vec![false; model.store.len()];
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let name = fields.next().ok_or_else(|| parse_err(n, "empty record"))?;
        let mut dim = || -> Result<usize> {
            fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(n, "bad shape"))
        };
        let (rows, cols, trainable) = (dim()?, dim()?, dim()?);
        let data = fields
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(n, &e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| parse_err(n, &format!("unknown parameter {name}")))?;
        if model.store.get(id).shape() != (rows, cols) {
            return Err(parse_err(n, &format!("shape mismatch for {name}")));
        }
        let value = Array::from_vec(rows, cols, data).map_err(|e| parse_err(n, &e.to_string()))?;
        model.store.set(id, value);
        model.store.set_trainable(id, trainable != 0);
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("missing parameter {}", model.store.names()[i]),
        });
    }
    Ok(model)
}

pub fn save(model: &LatentSde, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_string(model)?.as_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LatentSde> {
    from_str(&fs::read_to_string(path)?)
}
