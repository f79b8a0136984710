//! Checkpoints, parameter transplantation and prefix freezing.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "GRAFTCKP"            8 bytes
//! version               u32 (= 1)
//! tensor count          u32
//! per tensor:
//!   name length         u16
//!   name                UTF-8 bytes
//!   rank                u8
//!   extents             rank x u64
//!   payload             product(extents) x f32
//! provenance length     u32
//! provenance            UTF-8 JSON
//! crc32                 u32 over every preceding byte
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{RUNNING_MEAN, RUNNING_VAR};
use crate::model::{build_model, Model, NamedTensors};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::zoo::{block_boundaries, ModelSpec};

pub const MAGIC: &[u8; 8] = b"GRAFTCKP";
pub const VERSION: u32 = 1;

/// Training provenance stored alongside the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Trailer {
    architecture_fingerprint: String,
    spec: ModelSpec,
    provenance: Provenance,
}

/// A decoded checkpoint: every parameter and running statistic by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture_fingerprint: String,
    pub spec: ModelSpec,
    pub provenance: Provenance,
    pub tensors: NamedTensors<f32>,
}

fn is_buffer(key: &str) -> bool {
    key.ends_with(RUNNING_MEAN) || key.ends_with(RUNNING_VAR)
}

impl Checkpoint {
    pub fn from_model(model: &Model, provenance: Provenance) -> Self {
        let tensors = model
            .params
            .iter()
            .chain(&model.bn_running_stats)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            architecture_fingerprint: model.spec.fingerprint(),
            spec: model.spec.clone(),
            provenance,
            tensors,
        }
    }

    /// Restores a model, refusing specs whose fingerprint differs.
    pub fn to_model(&self, spec: &ModelSpec) -> Result<Model> {
        let expected = spec.fingerprint();
        if expected != self.architecture_fingerprint {
            return Err(Error::Fingerprint {
                expected,
                found: self.architecture_fingerprint.clone(),
            });
        }
        let mut model: Model = build_model(spec, 0)?;
        let keys: BTreeSet<&String> = model.params.keys().chain(model.bn_running_stats.keys()).collect();
        if keys.len() != self.tensors.len() || self.tensors.keys().any(|k| !keys.contains(k)) {
            return Err(Error::LengthMismatch("tensor names do not match the architecture".into()));
        }
        for (k, t) in &self.tensors {
            let slot = if is_buffer(k) {
                model.bn_running_stats.get_mut(k)
            } else {
                model.params.get_mut(k)
            }
            .expect("checked above");
            if slot.shape() != t.shape() {
                return Err(Error::LengthMismatch(format!("{k}: shape {:?}, architecture expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn model(&self) -> Result<Model> {
        self.to_model(&self.spec)
    }
}

pub fn save_checkpoint(model: &Model, provenance: &Provenance) -> Result<Vec<u8>> {
    encode(&Checkpoint::from_model(model, provenance.clone()))
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::LengthMismatch(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::LengthMismatch(format!("rank too large: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(&Trailer {
        architecture_fingerprint: ckpt.architecture_fingerprint.clone(),
        spec: ckpt.spec.clone(),
        provenance: ckpt.provenance.clone(),
    })?;
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}

/// Whether the trailing CRC matches the preceding bytes.
pub fn crc_ok(bytes: &[u8]) -> bool {
    if bytes.len() < 4 {
        return false;
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    crc32fast::hash(body) == u32::from_le_bytes(tail.try_into().unwrap())
}

/// Decodes and verifies a checkpoint. Structure is walked first so truncated
/// input reports where it ran out; the CRC then covers every byte.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::BadMagic(bytes[..bytes.len().min(8)].to_vec()))?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.to_vec()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::LengthMismatch(format!("tensor name at byte {name_at} is not UTF-8")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()?);
        }
        let elems = shape
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::LengthMismatch(format!("{name}: shape {shape:?} overflows")))?;
        let payload = r.take(elems)?;
        raw.push((name, shape, payload));
    }
    let trailer_len = r.u32()? as usize;
    let trailer_bytes = r.take(trailer_len)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::LengthMismatch(format!("{} trailing bytes after CRC", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }

    let mut tensors = NamedTensors::new();
    for (name, shape, payload) in raw {
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let shape: Vec<usize> = shape.into_iter().map(|e| e as usize).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::LengthMismatch(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::LengthMismatch(format!("duplicate tensor {name}")));
        }
    }
    let trailer: Trailer = serde_json::from_slice(trailer_bytes)?;
    if trailer.spec.fingerprint() != trailer.architecture_fingerprint {
        return Err(Error::Fingerprint {
            expected: trailer.spec.fingerprint(),
            found: trailer.architecture_fingerprint,
        });
    }
    Ok(Checkpoint {
        architecture_fingerprint: trailer.architecture_fingerprint,
        spec: trailer.spec,
        provenance: trailer.provenance,
        tensors,
    })
}

/// Copies every non-output parameter and running statistic of `src` into a
/// model shaped by `dst_spec`, whose output layer is freshly initialized from
/// a stream derived from `seed`.
pub fn transplant(src: &Checkpoint, dst_spec: &ModelSpec, seed: u64) -> Result<Model> {
    let s = &src.spec;
    if s.input_shape != dst_spec.input_shape {
        return Err(Error::Transplant {
            layer: "input".into(),
            detail: format!("input shape {:?} vs {:?}", s.input_shape, dst_spec.input_shape),
        });
    }
    if s.layers.len() != dst_spec.layers.len() {
        return Err(Error::Transplant {
            layer: dst_spec.layers.get(s.layers.len().min(dst_spec.layers.len())).map_or("<end>".into(), |l| l.id.clone()),
            detail: format!("{} layers vs {}", s.layers.len(), dst_spec.layers.len()),
        });
    }
    let out = dst_spec.output_index();
    for (a, b) in s.layers.iter().zip(&dst_spec.layers).take(out) {
        if a != b {
            return Err(Error::Transplant {
                layer: b.id.clone(),
                detail: format!("{:?} vs {:?}", a.kind, b.kind),
            });
        }
    }
    let mut model: Model = build_model(dst_spec, 0)?;
    let out_prefix = format!("{}.", dst_spec.layers[out].id);
    let targets = model.params.iter_mut().chain(model.bn_running_stats.iter_mut());
    for (k, slot) in targets {
        if k.starts_with(&out_prefix) {
            continue;
        }
        let layer = k.rsplit_once('.').map_or(k.as_str(), |(id, _)| id);
        let t = src.tensors.get(k).ok_or_else(|| Error::Transplant {
            layer: layer.to_string(),
            detail: format!("checkpoint lacks {k}"),
        })?;
        if t.shape() != slot.shape() {
            return Err(Error::Transplant {
                layer: layer.to_string(),
                detail: format!("{k}: shape {:?} vs {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t.clone();
    }
    model.reinit_output(output_head_seed(seed))?;
    Ok(model)
}

/// Seed stream for a transplanted output layer; depends only on `seed`, so
/// every `l_c` of one sweep starts from the same head.
pub fn output_head_seed(seed: u64) -> u64 {
    derive_seed(seed, "output-head")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeSelector {
    /// Hold the first `l_c` hidden stages constant.
    Stages(usize),
    /// Hold everything through the named block group constant.
    Group(String),
}

/// The resolved set of layers held constant during fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub l_c: usize,
    pub label: String,
    /// Layer indices, always a prefix of the layer list.
    pub frozen_layers: BTreeSet<usize>,
    pub frozen_layer_ids: Vec<String>,
}

impl FreezePlan {
    pub fn none() -> Self {
        Self {
            l_c: 0,
            label: "none".into(),
            frozen_layers: BTreeSet::new(),
            frozen_layer_ids: Vec::new(),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.frozen_layers.contains(&layer)
    }

    /// First layer index not held constant.
    pub fn first_trainable(&self) -> usize {
        self.frozen_layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen_layers.is_empty()
    }
}

pub fn freeze_prefix(spec: &ModelSpec, selector: &FreezeSelector) -> Result<FreezePlan> {
    let max = spec.hidden_stages();
    let (l_c, label) = match selector {
        FreezeSelector::Stages(l_c) => {
            if *l_c > max {
                return Err(Error::FreezeRange { l_c: *l_c, max });
            }
            let label = block_boundaries(spec)
                .into_iter()
                .find(|c| c.l_c == *l_c)
                .map(|c| c.label)
                .unwrap_or_else(|| format!("stage {l_c}"));
            (*l_c, label)
        }
        FreezeSelector::Group(name) => {
            let cut = block_boundaries(spec)
                .into_iter()
                .find(|c| &c.label == name)
                .ok_or_else(|| Error::UnknownGroup(name.clone()))?;
            (cut.l_c, cut.label)
        }
    };
    let frozen: Vec<(usize, String)> = spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.stage < l_c)
        .map(|(i, l)| (i, l.id.clone()))
        .collect();
    debug_assert!(frozen.iter().enumerate().all(|(n, (i, _))| n == *i), "frozen set must be a prefix");
    Ok(FreezePlan {
        l_c,
        label,
        frozen_layers: frozen.iter().map(|(i, _)| *i).collect(),
        frozen_layer_ids: frozen.into_iter().map(|(_, id)| id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::zoo::{convnet_a_spec_with, densenet_spec_with, SpeechWidths};

    fn micro_a(classes: usize) -> ModelSpec {
        convnet_a_spec_with(
            classes,
            vec![1, 8, 8],
            &SpeechWidths {
                conv: vec![2, 3],
                fc: 5,
            },
        )
    }

    fn prov() -> Provenance {
        Provenance {
            task_id: "t".into(),
            seed: 4,
            epochs: 2,
            metrics: [("test_accuracy".to_string(), 0.5)].into(),
            notes: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model: Model = build_model(&densenet_spec_with(2, 2, 3, vec![3, 8, 8]), 8).unwrap();
        let bytes = save_checkpoint(&model, &prov()).unwrap();
        let ck = load_checkpoint(&bytes).unwrap();
        assert_eq!(ck.provenance, prov());
        let back = ck.model().unwrap();
        for (k, t) in model.params.iter().chain(&model.bn_running_stats) {
            let other = back.params.get(k).or(back.bn_running_stats.get(k)).unwrap();
            assert!(t.bit_eq(other), "{k}");
        }
        assert_eq!(encode(&ck).unwrap(), bytes);
    }

    #[test]
    fn forced_errors() {
        let model: Model = build_model(&micro_a(3), 1).unwrap();
        let bytes = save_checkpoint(&model, &prov()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(load_checkpoint(&bad), Err(Error::UnsupportedVersion(2))));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(load_checkpoint(short), Err(Error::Truncated { .. })));
        let short = &bytes[..40];
        assert!(matches!(load_checkpoint(short), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x10;
        assert!(load_checkpoint(&bad).is_err());
        assert!(!crc_ok(&bad));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(load_checkpoint(&long), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let model: Model = build_model(&micro_a(3), 1).unwrap();
        let ck = load_checkpoint(&save_checkpoint(&model, &prov()).unwrap()).unwrap();
        let err = ck.to_model(&micro_a(4)).unwrap_err();
        assert!(matches!(err, Error::Fingerprint { .. }));
    }

    #[test]
    fn transplant_copies_hidden_and_reinitializes_output() {
        let src: Model = build_model(&micro_a(10), 1).unwrap();
        let ck = Checkpoint::from_model(&src, prov());
        let dst = transplant(&ck, &micro_a(100), 77).unwrap();
        let out = dst.spec.output_index();
        let out_w = format!("{}.weight", dst.spec.layers[out].id);
        assert_eq!(dst.params[&out_w].shape()[0], 100);
        for (k, t) in src.params.iter().chain(&src.bn_running_stats) {
            if dst.layer_of_key(k) == Some(out) {
                continue;
            }
            let d = dst.params.get(k).or(dst.bn_running_stats.get(k)).unwrap();
            assert!(t.bit_eq(d), "{k}");
        }
        let again = transplant(&ck, &micro_a(100), 77).unwrap();
        assert_eq!(again, dst);
        let other = transplant(&ck, &micro_a(100), 78).unwrap();
        assert_ne!(other.params[&out_w], dst.params[&out_w]);
    }

    #[test]
    fn transplant_names_first_incompatible_layer() {
        let src: Model = build_model(&micro_a(10), 1).unwrap();
        let ck = Checkpoint::from_model(&src, prov());
        let mut other = micro_a(10);
        if let crate::layers::LayerKind::FullyConnected { out_units, .. } = &mut other.layers[8].kind {
            *out_units = 7;
        }
        match transplant(&ck, &other, 1) {
            Err(Error::Transplant { layer, .. }) => assert_eq!(layer, other.layers[8].id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn freeze_plan_special_cases() {
        let spec = micro_a(4);
        let none = freeze_prefix(&spec, &FreezeSelector::Stages(0)).unwrap();
        assert!(none.is_empty());
        let all = freeze_prefix(&spec, &FreezeSelector::Stages(spec.hidden_stages())).unwrap();
        assert_eq!(all.frozen_layers.len(), spec.layers.len() - 1);
        assert!(!all.contains(spec.output_index()));
        assert!(matches!(
            freeze_prefix(&spec, &FreezeSelector::Stages(6)),
            Err(Error::FreezeRange { l_c: 6, max: 5 })
        ));
    }

    #[test]
    fn densenet_group_freeze() {
        let spec = densenet_spec_with(2, 2, 3, vec![3, 8, 8]);
        let plan = freeze_prefix(&spec, &FreezeSelector::Group("Blocks 2 and 3".into())).unwrap();
        let blocks: BTreeSet<usize> = plan.frozen_layers.iter().map(|&i| spec.layers[i].block).collect();
        assert_eq!(blocks, [1, 2, 3].into());
        let expected: BTreeSet<usize> = (0..spec.layers.len()).filter(|&i| spec.layers[i].block <= 3).collect();
        assert_eq!(plan.frozen_layers, expected);
        assert!(freeze_prefix(&spec, &FreezeSelector::Group("Block 9".into())).is_err());
    }

    #[test]
    fn tensors_keep_names_and_shapes() {
        let mut tensors = NamedTensors::new();
        tensors.insert("a".into(), Tensor::from_vec(vec![2], vec![1.0f32, -0.0]).unwrap());
        let ck = Checkpoint {
            architecture_fingerprint: micro_a(3).fingerprint(),
            spec: micro_a(3),
            provenance: prov(),
            tensors,
        };
        let back = load_checkpoint(&encode(&ck).unwrap()).unwrap();
        assert!(back.tensors["a"].bit_eq(&ck.tensors["a"]));
    }
}
