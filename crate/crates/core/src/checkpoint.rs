//! Binary files for frozen models (optionally with trained adapters) and
//! for mask sets. Both start with `PLRA`, a format version and a kind tag;
//! integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::adapters::{AdapterSet, ElementMask, LayerAdapter, LoraAdapter, MaskPair, Masking};
use crate::error::{Error, Result};
use crate::model::{Activation, BaseModel, FrozenLayer, TaskSpec};
use crate::tensor::{read_exact, read_f64, read_u32, read_u64, read_u8, Matrix, MAGIC};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND_MODEL: u8 = 1;
const KIND_MASKS: u8 = 2;

const MASKING_DENSE: u8 = 0;
const MASKING_ROW_COL: u8 = 1;
const MASKING_ELEMENT: u8 = 2;

fn header(out: &mut Vec<u8>, kind: u8) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind);
}

fn check_header(r: &mut &[u8], kind: u8) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a PLRA file".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported file version {version}")));
    }
    let found = read_u8(r)?;
    if found != kind {
        return Err(Error::Format(format!("expected file kind {kind}, found {found}")));
    }
    Ok(())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    m.write_to(out).expect("writing to a Vec cannot fail");
}

/// Bits packed least-significant first, `ceil(len / 8)` bytes.
fn put_bits(out: &mut Vec<u8>, bits: &[bool]) {
    for chunk in bits.chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
        out.push(byte);
    }
}

fn read_bits(r: &mut &[u8], len: usize) -> Result<Vec<bool>> {
    let mut bytes = vec![0u8; len.div_ceil(8)];
    read_exact(r, &mut bytes)?;
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn read_len(r: &mut &[u8], what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > (1 << 32) {
        return Err(Error::Format(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

fn write_mask_pair(out: &mut Vec<u8>, m: &MaskPair) {
    put_u64(out, m.row.len() as u64);
    put_u64(out, m.col.len() as u64);
    put_f64(out, m.p_row);
    put_f64(out, m.p_col);
    put_u64(out, m.seed);
    put_bits(out, &m.row);
    put_bits(out, &m.col);
}

fn read_mask_pair(r: &mut &[u8]) -> Result<MaskPair> {
    let m = read_len(r, "row count")?;
    let n = read_len(r, "column count")?;
    let p_row = read_f64(r)?;
    let p_col = read_f64(r)?;
    let seed = read_u64(r)?;
    let row = read_bits(r, m)?;
    let col = read_bits(r, n)?;
    Ok(MaskPair {
        row,
        col,
        p_row,
        p_col,
        seed,
    })
}

/// Model checkpoint: layers (activation tag, weight, bias), provenance seed,
/// task JSON, then an optional adapter section.
pub fn checkpoint_to_bytes(model: &BaseModel, adapters: Option<&AdapterSet>) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, KIND_MODEL);
    put_u64(&mut out, model.depth() as u64);
    for layer in model.layers() {
        out.push(layer.activation.tag());
        put_matrix(&mut out, &layer.weight);
        put_matrix(&mut out, &layer.bias);
    }
    put_u64(&mut out, model.seed);
    let task = serde_json::to_vec(&model.task).expect("task spec serializes");
    put_u64(&mut out, task.len() as u64);
    out.extend_from_slice(&task);
    match adapters {
        None => out.push(0),
        Some(set) => {
            out.push(1);
            put_u64(&mut out, set.layers.len() as u64);
            for slot in &set.layers {
                let Some(a) = slot else {
                    out.push(0);
                    continue;
                };
                out.push(1);
                put_f64(&mut out, a.lora.alpha);
                put_matrix(&mut out, &a.lora.b);
                put_matrix(&mut out, &a.lora.a);
                match &a.masking {
                    Masking::Dense => out.push(MASKING_DENSE),
                    Masking::RowCol(m) => {
                        out.push(MASKING_ROW_COL);
                        write_mask_pair(&mut out, m);
                    }
                    Masking::Element(e) => {
                        out.push(MASKING_ELEMENT);
                        put_f64(&mut out, e.p);
                        put_matrix(&mut out, &e.mask);
                    }
                }
            }
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(BaseModel, Option<AdapterSet>)> {
    let r = &mut &bytes[..];
    check_header(r, KIND_MODEL)?;
    let depth = read_len(r, "layer count")?;
    let mut layers = Vec::with_capacity(depth.min(1024));
    for _ in 0..depth {
        let activation = Activation::from_tag(read_u8(r)?)?;
        let weight = Matrix::read_from(r)?;
        let bias = Matrix::read_from(r)?;
        layers.push(FrozenLayer {
            weight,
            bias,
            activation,
        });
    }
    let seed = read_u64(r)?;
    let len = read_len(r, "task length")?;
    let mut task = vec![0u8; len];
    read_exact(r, &mut task)?;
    let task: TaskSpec = serde_json::from_slice(&task).map_err(|e| Error::Format(format!("task spec: {e}")))?;
    let model = BaseModel::new(layers, task, seed).map_err(|e| Error::Format(e.to_string()))?;

    let adapters = match read_u8(r)? {
        0 => None,
        1 => {
            let count = read_len(r, "adapter count")?;
            let mut slots = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                if read_u8(r)? == 0 {
                    slots.push(None);
                    continue;
                }
                let alpha = read_f64(r)?;
                let b = Matrix::read_from(r)?;
                let a = Matrix::read_from(r)?;
                let lora = LoraAdapter::new(b, a, alpha).map_err(|e| Error::Format(e.to_string()))?;
                let masking = match read_u8(r)? {
                    MASKING_DENSE => Masking::Dense,
                    MASKING_ROW_COL => Masking::RowCol(read_mask_pair(r)?),
                    MASKING_ELEMENT => {
                        let p = read_f64(r)?;
                        let mask = Matrix::read_from(r)?;
                        Masking::Element(ElementMask::new(mask, p).map_err(|e| Error::Format(e.to_string()))?)
                    }
                    t => return Err(Error::Format(format!("unknown masking tag {t}"))),
                };
                slots.push(Some(LayerAdapter { lora, masking }));
            }
            let set = AdapterSet { layers: slots };
            set.check_fits(&model).map_err(|e| Error::Format(e.to_string()))?;
            Some(set)
        }
        t => return Err(Error::Format(format!("bad adapter flag {t}"))),
    };
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
    }
    Ok((model, adapters))
}

/// Mask file: per layer `m, n, p_row, p_col, seed` and the bit-packed masks.
pub fn masks_to_bytes(masks: &[MaskPair]) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, KIND_MASKS);
    put_u64(&mut out, masks.len() as u64);
    for m in masks {
        write_mask_pair(&mut out, m);
    }
    out
}

pub fn masks_from_bytes(bytes: &[u8]) -> Result<Vec<MaskPair>> {
    let r = &mut &bytes[..];
    check_header(r, KIND_MASKS)?;
    let count = read_len(r, "mask count")?;
    let masks = (0..count).map(|_| read_mask_pair(r)).collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in mask file", r.len())));
    }
    Ok(masks)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &BaseModel, adapters: Option<&AdapterSet>) -> Result<()> {
    write_file(path, &checkpoint_to_bytes(model, adapters))
}

pub fn load_checkpoint(path: &Path) -> Result<(BaseModel, Option<AdapterSet>)> {
    checkpoint_from_bytes(&read_file(path)?)
}
