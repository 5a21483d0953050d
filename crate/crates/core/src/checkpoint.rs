//! Checkpoint archive: model config, named tensors and training state.
//!
//! Layout, little-endian:
//!
//! | field | bytes |
//! |---|---|
//! | magic `HPCK` | 4 |
//! | version | 2 |
//! | step, epoch | 8 + 4 |
//! | learning rate (f64) | 8 |
//! | config JSON (u32 length, bytes) | ... |
//! | tensor count | 4 |
//! | per tensor: name (u16 length, bytes), dtype, 4 × u32 shape, data | ... |
//! | optimizer flag; if set: Adam step, then first and second moments in tensor order | ... |

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
}

pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub state: TrainState,
    pub optimizer: Option<Adam<T>>,
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, state: &TrainState, optimizer: Option<&Adam<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.lr.to_le_bytes());
    let json = model.config.to_json();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let store = &model.store;
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, store.value(id));
    }
    match optimizer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.step_count().to_le_bytes());
            let (m, v) = adam.moments();
            for t in m.iter().chain(v) {
                write_tensor(&mut out, t);
            }
        }
    }
    out
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.tag());
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.to_le_bytes_into(out);
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let epoch = r.u32()?;
    let lr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let json_len = r.u32()? as usize;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|_| Error::format("config is not UTF-8"))?;
    let config = ModelConfig::from_json(json)?;
    let mut model = Model::<T>::new(config)?;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, the model has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::format(format!("unknown tensor {name}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
        let t = r.tensor()?;
        model.store.set(id, t).map_err(|e| Error::format(e.to_string()))?;
    }

    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let adam_step = r.u64()?;
            let mut moments = Vec::with_capacity(2 * count);
            for i in 0..2 * count {
                let t: Tensor<T> = r.tensor()?;
                let want = model.store.value(crate::nn::ParamId::from_index(i % count)).shape();
                if t.shape() != want {
                    return Err(Error::format(format!("optimizer moment {i} has shape {:?}", t.shape())));
                }
                moments.push(t);
            }
            let v = moments.split_off(count);
            Some(Adam::from_state(AdamConfig::default(), adam_step, moments, v))
        }
        f => return Err(Error::format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        model,
        state: TrainState { step, epoch, lr },
        optimizer,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    state: &TrainState,
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, state, optimizer))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(format!("unknown dtype tag {tag}")))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u32()? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("tensor shape overflows"))?;
        let raw = self.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    #[test]
    fn round_trip_with_optimizer() {
        let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
        let mut adam = Adam::new(&model.store, AdamConfig::default());
        let mut store = model.store.cast::<f32>();
        let grads: Vec<_> = store.ids().map(|id| Some(Tensor::full(store.value(id).shape(), 0.5))).collect();
        adam.step(&mut store, &grads, 1e-3).unwrap();
        let model = Model {
            store,
            ..model
        };
        let state = TrainState {
            step: 7,
            epoch: 2,
            lr: 1.5e-4,
        };
        let bytes = encode_checkpoint(&model, &state, Some(&adam));
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(ck.state, state);
        assert_eq!(ck.model.hash(), model.hash());
        let loaded = ck.optimizer.unwrap();
        assert_eq!(loaded.step_count(), 1);
        assert_eq!(loaded.moments().0, adam.moments().0);
        assert_eq!(loaded.moments().1, adam.moments().1);

        // widening on load keeps the values and therefore the hash
        let wide = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(wide.model.hash(), model.hash());
        assert_eq!(
            wide.model.store.value(ParamId::from_index(3)).cast::<f32>(),
            *model.store.value(ParamId::from_index(3))
        );
    }

    #[test]
    fn rejects_damage() {
        let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
        let bytes = encode_checkpoint(&model, &TrainState::default(), None);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint::<f32>(&long).is_err());
    }
}
