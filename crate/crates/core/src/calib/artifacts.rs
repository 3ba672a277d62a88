//! Conversions between calibration state and the on-disk quantized model and
//! candidate sidecar.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::VqLayer;
use crate::dit::DitModel;
use crate::error::{Error, Result};
use crate::modelio::{FormatError, QuantizedLayer, QuantizedModel, TensorContainer};
use crate::tensor::Tensor;
use crate::vq::{Assignments, CandidateSet};

const SIDECAR_KEY: &str = "candidate_sets";

#[derive(Serialize, Deserialize)]
struct SidecarMeta {
    n: usize,
    layers: Vec<String>,
}

/// Quantized model holding each layer's current hard assignments. Every
/// non-quantized parameter of `model` is carried through, with entries of
/// `biases` replacing the originals.
pub fn to_quantized_model(
    model: &DitModel,
    layers: &[VqLayer],
    biases: &BTreeMap<String, Tensor>,
) -> Result<QuantizedModel> {
    let qlayers = layers
        .iter()
        .map(|l| QuantizedLayer::new(&l.name, l.shape, l.codebook.clone(), &l.current_assignments()))
        .collect::<Result<Vec<_>>>()?;
    let passthrough = model
        .params
        .iter()
        .filter(|(name, _)| !layers.iter().any(|l| &l.name == *name))
        .map(|(name, t)| (name.clone(), biases.get(name).unwrap_or(t).clone()))
        .collect();
    Ok(QuantizedModel { config: model.config.clone(), layers: qlayers, passthrough })
}

/// Candidate indices (stored as exact `f64`) and logits of every layer.
pub fn candidate_sidecar(layers: &[VqLayer]) -> Result<TensorContainer> {
    let n = layers.first().map_or(1, |l| l.candidates.n());
    if layers.iter().any(|l| l.candidates.n() != n) {
        return Err(Error::Config("layers disagree on candidate length".into()));
    }
    let mut c = TensorContainer::new();
    let meta = SidecarMeta { n, layers: layers.iter().map(|l| l.name.clone()).collect() };
    c.metadata.insert(SIDECAR_KEY.into(), serde_json::to_string(&meta).expect("serializable"));
    for l in layers {
        let shape = [l.candidates.count(), n];
        let idx: Vec<f64> = l.candidates.candidates().iter().map(|&v| v as f64).collect();
        c.insert_f64(&format!("{}.candidates", l.name), &shape, &idx)?;
        c.insert_f32(&format!("{}.logits", l.name), &Tensor::new(shape.to_vec(), l.candidates.logits.clone())?)?;
    }
    Ok(c)
}

/// Unfrozen calibration layers rebuilt from a quantized model and its sidecar.
pub fn layers_from_artifacts(q: &QuantizedModel, sidecar: &TensorContainer) -> Result<Vec<VqLayer>> {
    let raw = sidecar
        .metadata
        .get(SIDECAR_KEY)
        .ok_or_else(|| FormatError::MalformedHeader(format!("missing {SIDECAR_KEY} metadata")))?;
    let meta: SidecarMeta =
        serde_json::from_str(raw).map_err(|e| FormatError::MalformedHeader(format!("{SIDECAR_KEY}: {e}")))?;
    let names: Vec<&str> = q.layers.iter().map(|l| l.name.as_str()).collect();
    if meta.layers != names {
        return Err(Error::Config("candidate sidecar lists different layers than the quantized model".into()));
    }
    q.layers
        .iter()
        .map(|l| {
            let idx = sidecar.get(&format!("{}.candidates", l.name))?;
            let logits = sidecar.get(&format!("{}.logits", l.name))?;
            let count = l.shape.subvector_count();
            if idx.shape() != [count, meta.n] || logits.shape() != [count, meta.n] {
                return Err(Error::Config(format!("candidate sets of {} do not match its shape", l.name)));
            }
            let cand: Vec<u32> = idx.data().iter().map(|&v| v as u32).collect();
            if cand.iter().any(|&c| c as usize >= l.shape.k) {
                return Err(Error::Config(format!("candidate index out of range in {}", l.name)));
            }
            Ok(VqLayer {
                name: l.name.clone(),
                shape: l.shape,
                codebook: l.codebook.clone(),
                candidates: CandidateSet::new(meta.n, cand, logits.into_data())?,
                assignments: None,
            })
        })
        .collect()
}

/// Frozen layers holding a quantized model's stored assignments as single-candidate sets.
pub fn layers_from_quantized(q: &QuantizedModel) -> Result<Vec<VqLayer>> {
    q.layers
        .iter()
        .map(|l| {
            let a: Assignments = l.assignments()?;
            let len = a.len();
            let mut candidates = CandidateSet::new(1, a.0.clone(), vec![0.0; len])?;
            candidates.frozen = true;
            Ok(VqLayer {
                name: l.name.clone(),
                shape: l.shape,
                codebook: l.codebook.clone(),
                candidates,
                assignments: Some(a),
            })
        })
        .collect()
}
