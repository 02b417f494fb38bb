//! Named parameter collections shared by every network in the crate.
//!
//! A [`ParamSet`] owns the persistent tensors of one network. For a training
//! update the set is bound onto a fresh tape as gradient-tracked leaves,
//! gradients are harvested back after the backward pass, and Adam mutates
//! the owned data in place. Target networks are deep clones blended with
//! [`ParamSet::polyak_from`]. Checkpoints use a versioned text layout
//! (`name`, `shape`, row-major values) that round-trips bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter sets differ: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(String),
}

/// How a fresh parameter tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// N(0, 1/fan_in) — the default for projection matrices.
    ScaledGaussian { fan_in: usize },
    /// N(0, std²).
    Gaussian { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

pub const CHECKPOINT_HEADER: &str = "reacritic-params v1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut Stream) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::ScaledGaussian { fan_in } => {
                let std = 1.0 / (fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Gaussian { std } => {
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let tensor = Tensor::new(shape, data).expect("init shape").with_grad();
        self.entries.push(Param {
            name: name.to_string(),
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Inserts every parameter as a gradient-tracked leaf; the returned ids
    /// align with entry order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect()
    }

    /// Copies gradients from the tape back into the owned tensors. Parameters
    /// the loss never reached get a zero gradient.
    pub fn harvest_grads(&mut self, tape: &Tape, ids: &[TensorId]) {
        debug_assert_eq!(ids.len(), self.entries.len());
        for (p, &id) in self.entries.iter_mut().zip(ids) {
            p.tensor.grad = Some(match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.numel()],
            });
        }
    }

    pub fn iter_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|p| &mut p.tensor)
    }

    /// `self ← τ·online + (1−τ)·self`, elementwise over all parameters.
    pub fn polyak_from(&mut self, online: &ParamSet, tau: f64) -> Result<(), ParamError> {
        if self.entries.len() != online.entries.len() {
            return Err(ParamError::ArchitectureMismatch(format!(
                "{} vs {} parameters",
                self.entries.len(),
                online.entries.len()
            )));
        }
        for (t, o) in self.entries.iter_mut().zip(&online.entries) {
            if t.tensor.shape != o.tensor.shape {
                return Err(ParamError::ArchitectureMismatch(format!(
                    "{}: {:?} vs {:?}",
                    t.name, t.tensor.shape, o.tensor.shape
                )));
            }
            for (tv, ov) in t.tensor.data.iter_mut().zip(&o.tensor.data) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.tensor.data.iter().zip(&b.tensor.data))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes to the versioned text layout. `{}`-formatted f64 values
    /// round-trip bit-exactly through `parse`.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "tensors {}", self.entries.len());
        for p in &self.entries {
            let dims: Vec<String> = p.tensor.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {} {}", p.name, dims.join(" "));
            let vals: Vec<String> = p.tensor.data.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn from_checkpoint_string(text: &str) -> Result<Self, ParamError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| ParamError::Parse("empty checkpoint".into()))?;
        if header != CHECKPOINT_HEADER {
            return Err(ParamError::Parse(format!(
                "unsupported header {header:?}, expected {CHECKPOINT_HEADER:?}"
            )));
        }
        let count_line = lines
            .next()
            .ok_or_else(|| ParamError::Parse("missing tensor count".into()))?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ParamError::Parse(format!("bad count line {count_line:?}")))?;

        let mut set = ParamSet::new();
        for _ in 0..count {
            let head = lines
                .next()
                .ok_or_else(|| ParamError::Parse("truncated tensor header".into()))?;
            let mut parts = head.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(ParamError::Parse(format!("bad tensor line {head:?}")));
            }
            let name = parts
                .next()
                .ok_or_else(|| ParamError::Parse("tensor missing name".into()))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|d| {
                    d.parse()
                        .map_err(|_| ParamError::Parse(format!("bad dim {d:?} in {name}")))
                })
                .collect::<Result<_, _>>()?;
            let data_line = lines
                .next()
                .ok_or_else(|| ParamError::Parse(format!("{name}: missing data line")))?;
            let data: Vec<f64> = data_line
                .split_whitespace()
                .map(|v| {
                    v.parse()
                        .map_err(|_| ParamError::Parse(format!("bad value {v:?} in {name}")))
                })
                .collect::<Result<_, _>>()?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| ParamError::Parse(format!("{name}: {e}")))?
                .with_grad();
            set.entries.push(Param { name, tensor });
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_string(&text)
    }
}

/// Uniform draw helper used by a few init paths and tests.
pub fn uniform_vec(rng: &mut Stream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_set(seed: u64) -> ParamSet {
        let mut rng = stream(seed, "params-test");
        let mut set = ParamSet::new();
        set.add("w", vec![3, 4], Init::ScaledGaussian { fan_in: 3 }, &mut rng);
        set.add("b", vec![4], Init::Zeros, &mut rng);
        set.add("g", vec![4], Init::Ones, &mut rng);
        set
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let set = sample_set(9);
        let text = set.to_checkpoint_string();
        let back = ParamSet::from_checkpoint_string(&text).unwrap();
        assert_eq!(set.len(), back.len());
        for (a, b) in set.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            assert_eq!(a.tensor.data, b.tensor.data);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        assert!(ParamSet::from_checkpoint_string("wrong v9\ntensors 0\n").is_err());
    }

    #[test]
    fn polyak_tau_one_copies() {
        let online = sample_set(1);
        let mut target = sample_set(2);
        target.polyak_from(&online, 1.0).unwrap();
        assert_eq!(target.max_abs_diff(&online), 0.0);
    }

    #[test]
    fn polyak_tau_zero_is_noop() {
        let online = sample_set(1);
        let mut target = sample_set(2);
        let before = target.clone();
        target.polyak_from(&online, 0.0).unwrap();
        assert_eq!(target.max_abs_diff(&before), 0.0);
    }

    #[test]
    fn polyak_converges_geometrically() {
        let online = sample_set(1);
        let mut target = sample_set(2);
        let tau = 0.25;
        let mut prev = target.max_abs_diff(&online);
        for _ in 0..8 {
            target.polyak_from(&online, tau).unwrap();
            let d = target.max_abs_diff(&online);
            assert!(d <= prev * (1.0 - tau) + 1e-12, "{d} vs {prev}");
            prev = d;
        }
    }

    #[test]
    fn polyak_rejects_mismatched_architectures() {
        let online = sample_set(1);
        let mut rng = stream(5, "other");
        let mut target = ParamSet::new();
        target.add("w", vec![2, 2], Init::Zeros, &mut rng);
        assert!(target.polyak_from(&online, 0.5).is_err());
    }
}
