//! Binary model files: a text header followed by raw little-endian `f64`s.
//! The byte layout is documented in `docs/model-format.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{LayerWeights, Model, ModelConfig};

const MAGIC: &str = "SPECKV-MODEL 1";

pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(model.config())?)?;
    for buf in model.buffers() {
        for v in buf {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<Model> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    read_header_line(&mut r, &mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::Format(format!("bad magic line {:?}", line.trim_end())));
    }
    line.clear();
    read_header_line(&mut r, &mut line)?;
    let config: ModelConfig =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("config header: {e}")))?;
    let mut model = zeros(config)?;
    let mut bytes = [0u8; 8];
    for buf in model.buffers_mut() {
        for v in buf.iter_mut() {
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Format(format!("truncated weights: {e}")))?;
            *v = f64::from_le_bytes(bytes);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after weights", rest.len())));
    }
    // re-run shape and finiteness validation on the loaded values
    let Model {
        config,
        embed,
        pos_embed,
        layers,
        final_norm,
        unembed,
    } = model;
    Model::from_parts(config, embed, pos_embed, layers, final_norm, unembed)
}

/// Non-UTF-8 header bytes mean a corrupt file, not an I/O failure.
fn read_header_line<R: BufRead>(r: &mut R, line: &mut String) -> Result<()> {
    r.read_line(line).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => Error::Format("header is not UTF-8".into()),
        _ => Error::Io(e),
    })?;
    Ok(())
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(File::open(path)?)
}

fn zeros(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![0.0; d],
            wq: Tensor::zeros(&[d, config.q_width()]),
            wk: Tensor::zeros(&[d, config.kv_width()]),
            wv: Tensor::zeros(&[d, config.kv_width()]),
            wo: Tensor::zeros(&[config.q_width(), d]),
            mlp_norm: vec![0.0; d],
            w_gate: Tensor::zeros(&[d, config.d_mlp]),
            w_up: Tensor::zeros(&[d, config.d_mlp]),
            w_down: Tensor::zeros(&[config.d_mlp, d]),
        })
        .collect();
    let embed = Tensor::zeros(&[config.vocab_size, d]);
    let pos_embed = config
        .abs_positions
        .then(|| Tensor::zeros(&[config.max_positions, d]));
    let unembed = Tensor::zeros(&[d, config.vocab_size]);
    Model::from_parts(config, embed, pos_embed, layers, vec![0.0; d], unembed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let m = Model::init_random(ModelConfig::new(2, 2, 1, 3, 5, 7, 9, 4)).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap(), m);
        assert!(matches!(read_model(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_model(&extra[..]).is_err());
        assert!(read_model(&b"NOPE\n{}\n"[..]).is_err());
    }
}
