//! Model checkpoints: a plain-text manifest followed by binary tensor records.
//!
//! ```text
//! auvit-checkpoint 1
//! <run configuration, one `key = value` per line>
//! params <count>
//! <name> <d0>x<d1>x... <trainable|frozen>
//! end
//! <tensor record per parameter, in manifest order>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::AuModel;
use crate::tensor::{Element, Tensor};

const HEADER: &str = "auvit-checkpoint 1";

pub fn save_checkpoint<F: Element>(path: &Path, model: &AuModel<F>, cfg: &RunConfig) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = format!("{HEADER}\n{}params {}\n", cfg.to_text(), model.params.len());
    for p in model.params.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        let state = if p.frozen() { "frozen" } else { "trainable" };
        manifest.push_str(&format!("{} {} {state}\n", p.name, shape.join("x")));
    }
    manifest.push_str("end\n");
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(manifest.as_bytes())?;
        for p in model.params.iter() {
            p.tensor.write_to(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model recorded in a checkpoint, with its values and freeze flags.
pub fn load_checkpoint<F: Element>(path: &Path) -> Result<(AuModel<F>, RunConfig)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut row = 0;
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<(usize, String)> {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        row += 1;
        if n == 0 {
            return Err(Error::parse(path, row, "unexpected end of manifest"));
        }
        Ok((row, line.trim_end_matches('\n').to_string()))
    };
    let (_, first) = next_line(&mut r)?;
    if first != HEADER {
        return Err(Error::parse(path, 1, format!("not a checkpoint (header {first:?})")));
    }
    let mut config_text = String::new();
    let (count_row, count) = loop {
        let (row, line) = next_line(&mut r)?;
        if let Some(rest) = line.strip_prefix("params ") {
            let n: usize = rest.parse().map_err(|e| Error::parse(path, row, format!("parameter count: {e}")))?;
            break (row, n);
        }
        config_text.push_str(&line);
        config_text.push('\n');
    };
    let cfg = RunConfig::parse(&config_text, path).map_err(|e| match e {
        Error::Parse { row, msg, .. } => Error::parse(path, row + 1, msg),
        other => other,
    })?;
    let mut model = AuModel::<F>::new(cfg.model_config(), 0)?;
    if count != model.params.len() {
        return Err(Error::parse(path, count_row, format!("{count} parameters, architecture has {}", model.params.len())));
    }
    let mut frozen = Vec::with_capacity(count);
    for p in model.params.iter() {
        let (row, line) = next_line(&mut r)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        if fields.len() != 3 || fields[0] != p.name || fields[1] != shape.join("x") {
            return Err(Error::parse(path, row, format!("expected {} {}, found {line:?}", p.name, shape.join("x"))));
        }
        frozen.push(match fields[2] {
            "frozen" => true,
            "trainable" => false,
            other => return Err(Error::parse(path, row, format!("unknown parameter state {other:?}"))),
        });
    }
    let (row, end) = next_line(&mut r)?;
    if end != "end" {
        return Err(Error::parse(path, row, format!("expected `end`, found {end:?}")));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, is_frozen) in ids.into_iter().zip(frozen) {
        let t: Tensor<F> = Tensor::read_from(&mut r).map_err(|e| Error::parse(path, row, format!("tensor data: {e}")))?;
        let name = model.params.get(id).name.clone();
        let dst = model.params.tensor_mut(id);
        if t.shape() != dst.shape() {
            return Err(Error::parse(path, row, format!("record for {name} has shape {:?}", t.shape())));
        }
        dst.data_mut().copy_from_slice(t.data());
        model.params.set_trainable(id, !is_frozen);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::parse(path, row, format!("{} trailing bytes after the last record", rest.len())));
    }
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.seq_len = 4;
        cfg
    }

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let cfg = small_cfg();
        let mut model = AuModel::<f32>::new(cfg.model_config(), 7).unwrap();
        let last = model.params.ids().last().unwrap();
        model.params.set_trainable(last, false);
        save_checkpoint(&path, &model, &cfg).unwrap();
        let (back, back_cfg) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
            assert_eq!(a.frozen(), b.frozen());
        }
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"auvit-checkpoint 1\nbackbone.stem_width = 16\n"));
        // Widening to f64 reproduces the same values.
        let (wide, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(wide.params.iter().next().unwrap().tensor.data()[0], model.params.iter().next().unwrap().tensor.data()[0] as f64);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = small_cfg();
        let model = AuModel::<f32>::new(cfg.model_config(), 7).unwrap();
        save_checkpoint(&path, &model, &cfg).unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Parse { .. })));

        let mut extra = good.clone();
        extra.push(0);
        fs::write(&path, extra).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Parse { .. })));

        fs::write(&path, b"hello\n").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Parse { row: 1, .. })));

        let text = String::from_utf8_lossy(&good).replace("trainable", "maybe");
        fs::write(&path, text.as_bytes()).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        assert!(matches!(load_checkpoint::<f32>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
