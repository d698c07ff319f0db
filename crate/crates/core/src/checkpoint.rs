//! Binary checkpoints: `NLFP`, a u32 version, a u64 header length, a JSON
//! header, then little-endian f32 arrays in manifest order.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grids::AdamState;
use crate::probe_field::{position_of, FieldConfig, ProbeField};
use crate::real::Real;
use crate::scenekit::Intrinsics;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"NLFP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the array section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; the word position does not fit JSON numbers.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHeader {
    pub config: TrainConfig,
    pub iteration: usize,
    pub adam_step: u64,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub field: FieldConfig,
    pub intrinsics: Option<Intrinsics>,
    pub train: Option<TrainHeader>,
    pub arrays: Vec<ArrayEntry>,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub field: ProbeField<T>,
    pub intrinsics: Option<Intrinsics>,
    pub train: Option<(TrainConfig, TrainState<T>)>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = s.seed.as_slice().try_into().map_err(|_| Error::checkpoint("header", "rng seed must be 32 bytes"))?;
    let pos: u128 = s.word_pos.parse().map_err(|_| Error::checkpoint("header", "rng word position is not an integer"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serializes a field and, optionally, the optimizer state to bytes.
pub fn encode<T: Real>(field: &ProbeField<T>, intrinsics: Option<&Intrinsics>, train: Option<(&TrainConfig, &TrainState<T>)>) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f32>| {
        arrays.push(ArrayEntry { name, shape, offset: data.len() as u64 });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    let flat = |p: &[[f32; 3]]| p.iter().flatten().copied().collect::<Vec<f32>>();
    push("positions.basis".into(), vec![field.probes.basis_positions.len(), 3], &mut flat(&field.probes.basis_positions).into_iter());
    push("positions.core".into(), vec![field.probes.core_positions.len(), 3], &mut flat(&field.probes.core_positions).into_iter());
    let f32_of = |v: &T| v.to_f64_lossless() as f32;
    field.visit_params(&mut |name, shape, values| push(name.to_string(), shape, &mut values.iter().map(f32_of)));
    let train_header = match train {
        Some((cfg, state)) => {
            for (name, adam) in &state.adam {
                let shape = vec![adam.m.len()];
                push(format!("adam.m.{name}"), shape.clone(), &mut adam.m.iter().map(f32_of));
                push(format!("adam.v.{name}"), shape, &mut adam.v.iter().map(f32_of));
            }
            Some(TrainHeader {
                config: cfg.clone(),
                iteration: state.iteration,
                adam_step: state.adam.first().map_or(0, |(_, a)| a.t),
                rng: rng_state(&state.rng),
            })
        }
        None => None,
    };
    let header = Header { field: field.config.clone(), intrinsics: intrinsics.copied(), train: train_header, arrays };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    field: &ProbeField<T>,
    intrinsics: Option<&Intrinsics>,
    train: Option<(&TrainConfig, &TrainState<T>)>,
) -> Result<()> {
    let bytes = encode(field, intrinsics, train)?;
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parses a checkpoint from bytes; errors name the offending section.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::checkpoint("magic", "bad magic"));
    }
    if bytes.len() < 16 {
        return Err(Error::checkpoint("preamble", "truncated before header length"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64.checked_add(header_len).filter(|&e| e <= bytes.len() as u64);
    let Some(header_end) = header_end else {
        return Err(Error::checkpoint("header", format!("truncated: declares {header_len} bytes")));
    };
    let header_end = header_end as usize;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let data = &bytes[header_end..];

    let mut arrays: HashMap<&str, (&ArrayEntry, Vec<f32>)> = HashMap::new();
    for entry in &header.arrays {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start.checked_add(len * 4).filter(|&e| e <= data.len());
        let Some(end) = end else {
            return Err(Error::checkpoint(format!("array {}", entry.name), "truncated"));
        };
        let values = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        arrays.insert(entry.name.as_str(), (entry, values));
    }
    let mut take = |name: &str, len: usize| -> Result<Vec<f32>> {
        let (_, values) = arrays.remove(name).ok_or_else(|| Error::checkpoint(format!("array {name}"), "missing"))?;
        if values.len() != len {
            return Err(Error::checkpoint(format!("array {name}"), format!("has {} values, expected {len}", values.len())));
        }
        Ok(values)
    };
    let positions = |v: Vec<f32>| v.chunks_exact(3).map(|c| position_of(&[c[0], c[1], c[2]])).collect::<Vec<Vec3>>();
    let basis = positions(take("positions.basis", 3 * header.field.num_basis)?);
    let cores = positions(take("positions.core", 3 * header.field.num_cores)?);
    let mut field = ProbeField::<T>::with_positions(header.field.clone(), &basis, &cores)
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let mut failure = None;
    field.visit_params_mut(&mut |name, _, values, _| {
        if failure.is_some() {
            return;
        }
        match take(name, values.len()) {
            Ok(v) => {
                for (dst, src) in values.iter_mut().zip(v) {
                    *dst = T::of(src as f64);
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let train = match &header.train {
        Some(th) => {
            let mut adam = Vec::new();
            let mut failure = None;
            field.visit_params_mut(&mut |name, _, values, _| {
                if failure.is_some() {
                    return;
                }
                let state = (|| -> Result<AdamState<T>> {
                    let mut s = AdamState::new(values.len(), th.config.adam_beta1, th.config.adam_beta2, th.config.adam_eps)?;
                    let conv = |v: Vec<f32>| v.into_iter().map(|x| T::of(x as f64)).collect();
                    s.m = conv(take(&format!("adam.m.{name}"), values.len())?);
                    s.v = conv(take(&format!("adam.v.{name}"), values.len())?);
                    s.t = th.adam_step;
                    Ok(s)
                })();
                match state {
                    Ok(s) => adam.push((name.to_string(), s)),
                    Err(e) => failure = Some(e),
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let state = TrainState { iteration: th.iteration, adam, rng: restore_rng(&th.rng)?, last_loss: None };
            Some((th.config.clone(), state))
        }
        None => None,
    };
    Ok(Checkpoint { field, intrinsics: header.intrinsics, train })
}
