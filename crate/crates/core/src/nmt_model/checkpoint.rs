//! Binary checkpoint: `u32` config length, config JSON, `u32` tensor count,
//! then per tensor (sorted by name) `u32` name length, name bytes, `u32` rows,
//! `u32` cols and `rows × cols` little-endian `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, TranslationModel};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub fn save_checkpoint(model: &TranslationModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let cfg = serde_json::to_vec(&model.cfg)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let mut tensors: Vec<(&str, &Matrix)> = model.params.iter().map(|(_, n, m)| (n, m)).collect();
    tensors.sort_by(|a, b| a.0.cmp(b.0));
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::TruncatedFile {
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TranslationModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut model = TranslationModel::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} tensors, configuration expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Shape(format!("tensor name: {e}")))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Shape(format!("unexpected tensor {name}")))?;
        let expected = model.params.value(id).shape();
        if expected != (rows, cols) {
            return Err(Error::ShapeMismatch {
                name,
                expected,
                found: (rows, cols),
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        *model.params.value_mut(id) = Matrix::from_vec(rows, cols, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Shape(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}
