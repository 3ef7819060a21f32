//! Flat binary checkpoints of layer weights, BN parameters and optimizer
//! velocities.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! "DSGC" version layer_count
//! per weighted layer: kind_tag(u8: 0 conv, 1 fc, 2 output)
//!     rank dims... f32 weights...
//!     has_bn(u8) [scale shift running_mean running_var]   (n_K f32 each)
//! velocity_count, per velocity: len f32...
//! ```
//!
//! Projection matrices are not stored: they are derived from the model
//! seed, and projected weights are refreshed after loading.

use std::fs;
use std::path::Path;

use crate::error::{DsgError, Result};
use crate::layers::DsgKind;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::Velocities;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSGC";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.b.len() {
            return Err(DsgError::Corrupt(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.at
            )));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn checkpoint_bytes(model: &Model, velocities: &Velocities) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(VERSION as usize);
    let dsg = model.dsg_layers();
    w.u32(dsg.len() + 1);
    for l in &dsg {
        w.0.push(match l.kind() {
            DsgKind::Conv(_) => 0,
            DsgKind::Fc { .. } => 1,
        });
        let shape = l.weights().shape();
        w.u32(shape.len());
        shape.iter().for_each(|&d| w.u32(d));
        w.f32s(l.weights().data());
        match l.bn() {
            Some(bn) => {
                w.0.push(1);
                w.f32s(&bn.scale);
                w.f32s(&bn.shift);
                w.f32s(&bn.running_mean);
                w.f32s(&bn.running_var);
            }
            None => w.0.push(0),
        }
    }
    let out = model.output_layer().weights();
    w.0.push(2);
    w.u32(2);
    out.shape().iter().for_each(|&d| w.u32(d));
    w.f32s(out.data());
    w.0.push(0);
    w.u32(velocities.0.len());
    for v in &velocities.0 {
        w.u32(v.len());
        w.f32s(v);
    }
    w.0
}

pub fn save_checkpoint(model: &Model, velocities: &Velocities, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, velocities))?;
    Ok(())
}

/// Loads parameters into an already-built model of the same architecture
/// and returns the stored optimizer velocities.
pub fn restore_checkpoint(model: &mut Model, bytes: &[u8]) -> Result<Velocities> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(DsgError::Corrupt("missing DSGC header".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(DsgError::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let n_dsg = model.dsg_layers().len();
    if count != n_dsg + 1 {
        return Err(DsgError::Corrupt(format!(
            "checkpoint has {count} layers, model has {}",
            n_dsg + 1
        )));
    }
    let read_weights = |r: &mut Reader<'_>, expect_tag: u8, expect: &[usize]| -> Result<Vec<f32>> {
        let tag = r.u8()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if tag != expect_tag || dims != expect {
            return Err(DsgError::Corrupt(format!(
                "layer kind {tag} shape {dims:?} does not match model ({expect_tag}, {expect:?})"
            )));
        }
        r.f32s(dims.iter().product())
    };
    for l in model.dsg_layers_mut() {
        let tag = match l.kind() {
            DsgKind::Conv(_) => 0,
            DsgKind::Fc { .. } => 1,
        };
        let shape = l.weights().shape().to_vec();
        let w = read_weights(&mut r, tag, &shape)?;
        l.set_weights(Tensor::from_bits_unchecked(shape, w)?)?;
        let has_bn = r.u8()? == 1;
        match (has_bn, l.bn_mut()) {
            (true, Some(bn)) => {
                let c = bn.channels();
                bn.scale = r.f32s(c)?;
                bn.shift = r.f32s(c)?;
                bn.running_mean = r.f32s(c)?;
                bn.running_var = r.f32s(c)?;
            }
            (false, None) => {}
            _ => return Err(DsgError::Corrupt(format!("BN presence differs for {}", l.name))),
        }
        l.refresh_projected_weights();
    }
    let out_shape = model.output_layer().weights().shape().to_vec();
    let w = read_weights(&mut r, 2, &out_shape)?;
    if r.u8()? != 0 {
        return Err(DsgError::Corrupt("output layer cannot carry BN".into()));
    }
    if let Some(crate::model::Layer::Output(o)) = model.layers.last_mut() {
        o.weights_mut().data_mut().copy_from_slice(&w);
    }
    let nv = r.u32()?;
    let mut vel = Vec::with_capacity(nv);
    for _ in 0..nv {
        let len = r.u32()?;
        vel.push(r.f32s(len)?);
    }
    Ok(Velocities(vel))
}

pub fn load_checkpoint(model: &mut Model, path: impl AsRef<Path>) -> Result<Velocities> {
    restore_checkpoint(model, &fs::read(path)?)
}
