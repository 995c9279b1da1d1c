//! Checkpoints on top of the tensor container: every parameter and buffer
//! by name, AdamW moments as `adam.m.<name>` / `adam.v.<name>`, the update
//! counters and the RNG state.

use pmt_tensor::{Float, ParamStore};
use rand_chacha::ChaCha8Rng;

use super::container::TensorContainer;
use crate::error::{PmtError, Result};
use crate::optim::{AdamW, Moments};

pub const STEP: &str = "train.step";
pub const ADAM_T: &str = "adam.t";
pub const RNG: &str = "train.rng";

pub fn push_u64(c: &mut TensorContainer, name: &str, v: u64) -> Result<()> {
    c.push_u32(name, vec![v as u32, (v >> 32) as u32])?;
    Ok(())
}

pub fn read_u64(c: &TensorContainer, name: &str) -> Result<u64> {
    match c.u32s(name)? {
        [lo, hi] => Ok(*lo as u64 | (*hi as u64) << 32),
        other => Err(PmtError::Checkpoint(format!("{name} holds {} words, expected 2", other.len()))),
    }
}

/// Appends every store entry whose name passes `filter`.
pub fn push_params<T: Float>(c: &mut TensorContainer, store: &ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<()> {
    for (_, p) in store.iter().filter(|(_, p)| filter(&p.name)) {
        c.push_tensor(p.name.clone(), &p.value)?;
    }
    Ok(())
}

/// Overwrites every store entry whose name passes `filter` with the stored
/// value; each must exist with the same shape. Returns the count loaded.
pub fn load_params<T: Float>(c: &TensorContainer, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
    let ids: Vec<_> = store.iter().filter(|(_, p)| filter(&p.name)).map(|(id, _)| id).collect();
    for &id in &ids {
        let (name, shape) = {
            let p = store.get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        *store.value_mut(id) = c.tensor(&name, &shape)?;
    }
    Ok(ids.len())
}

pub fn push_adam<T: Float>(c: &mut TensorContainer, store: &ParamStore<T>, opt: &AdamW<T>) -> Result<()> {
    push_u64(c, ADAM_T, opt.t)?;
    for (id, m) in &opt.state {
        let name = &store.get(*id).name;
        c.push_tensor(format!("adam.m.{name}"), &m.m)?;
        c.push_tensor(format!("adam.v.{name}"), &m.v)?;
    }
    Ok(())
}

/// Restores optimizer state for the trainable entries of `store`. Moments
/// absent from the container stay absent (never-updated parameters).
pub fn load_adam<T: Float>(c: &TensorContainer, store: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<()> {
    opt.t = read_u64(c, ADAM_T)?;
    opt.state.clear();
    for id in store.trainable() {
        let p = store.get(id);
        let (mn, vn) = (format!("adam.m.{}", p.name), format!("adam.v.{}", p.name));
        if c.get(&mn).is_none() {
            continue;
        }
        opt.state.insert(
            id,
            Moments {
                m: c.tensor(&mn, p.value.shape())?,
                v: c.tensor(&vn, p.value.shape())?,
            },
        );
    }
    let expected = c.entries.iter().filter(|e| e.name.starts_with("adam.m.")).count();
    if expected != opt.state.len() {
        return Err(PmtError::Checkpoint(format!(
            "checkpoint holds {expected} moment pairs but only {} match trainable parameters",
            opt.state.len()
        )));
    }
    Ok(())
}

/// Seed (8 words), stream (2 words), word position (4 words).
pub fn rng_words(rng: &ChaCha8Rng) -> Vec<u32> {
    let mut w: Vec<u32> = rng
        .get_seed()
        .chunks(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let stream = rng.get_stream();
    w.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    w.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    w
}

pub fn rng_from_words(w: &[u32]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if w.len() != 14 {
        return Err(PmtError::Checkpoint(format!("rng state has {} words, expected 14", w.len())));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[8] as u64 | (w[9] as u64) << 32);
    rng.set_word_pos(w[10..].iter().enumerate().fold(0u128, |acc, (i, &x)| acc | (x as u128) << (32 * i)));
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::container::ContainerError;
    use pmt_tensor::Tensor;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(7);
        for _ in 0..13 {
            rng.gen::<u32>();
        }
        let mut back = rng_from_words(&rng_words(&rng)).unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| back.gen()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn params_round_trip_and_shape_check() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::from_fn(&[2, 3], |i| i as f32));
        s.add_buffer("b", Tensor::full(&[4], 0.5));
        let mut c = TensorContainer::new();
        push_params(&mut c, &s, |_| true).unwrap();
        let mut t = ParamStore::<f32>::new();
        t.add("a", Tensor::zeros(&[2, 3]));
        t.add_buffer("b", Tensor::zeros(&[4]));
        assert_eq!(load_params(&c, &mut t, |_| true).unwrap(), 2);
        assert_eq!(t.value(pmt_tensor::ParamId(0)), s.value(pmt_tensor::ParamId(0)));
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros(&[3, 2]));
        assert!(matches!(
            load_params(&c, &mut wrong, |_| true),
            Err(PmtError::Container(ContainerError::ShapeMismatch { .. }))
        ));
    }
}
