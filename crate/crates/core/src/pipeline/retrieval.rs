use std::str::FromStr;

use super::engine::Model;
use super::eval::argmax;
use super::nofe::NofENetwork;
use super::PipelineError;
use crate::netspec::LayerSpec;
use crate::tensor::Tensor;

/// Which activation to read features from.
///
/// Branch-scoped tags read from the branch owning each image's predicted class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTag {
    /// Trunk output.
    Trunk,
    /// Output of trunk layer `n` (0-based, after its relu).
    TrunkLayer(usize),
    /// Output of branch layer `n` (0-based, after its relu).
    BranchLayer(usize),
    /// Last conv of the branch.
    BranchConv,
    /// Last hidden FC of the branch, else its classifier FC.
    BranchFc,
}

impl FromStr for FeatureTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let index = |rest: &str| rest.parse::<usize>().map_err(|_| format!("bad layer index in tag '{s}'"));
        match s {
            "trunk" => Ok(FeatureTag::Trunk),
            "branch-conv" => Ok(FeatureTag::BranchConv),
            "branch-fc" => Ok(FeatureTag::BranchFc),
            _ => {
                if let Some(rest) = s.strip_prefix("trunk:") {
                    Ok(FeatureTag::TrunkLayer(index(rest)?))
                } else if let Some(rest) = s.strip_prefix("branch:") {
                    Ok(FeatureTag::BranchLayer(index(rest)?))
                } else {
                    Err(format!(
                        "unknown feature tag '{s}' (trunk, trunk:N, branch:N, branch-conv, branch-fc)"
                    ))
                }
            }
        }
    }
}

impl std::fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureTag::Trunk => f.write_str("trunk"),
            FeatureTag::TrunkLayer(n) => write!(f, "trunk:{n}"),
            FeatureTag::BranchLayer(n) => write!(f, "branch:{n}"),
            FeatureTag::BranchConv => f.write_str("branch-conv"),
            FeatureTag::BranchFc => f.write_str("branch-fc"),
        }
    }
}

/// Engine-layer index holding the output of each spec layer (after its relu).
fn output_positions(layers: &[LayerSpec], classifier: Option<usize>) -> Vec<usize> {
    let mut at = 0;
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            at += 1;
            if l.is_parametric() && classifier != Some(i) {
                at += 1;
            }
            at - 1
        })
        .collect()
}

fn unknown(tag: FeatureTag, why: &str) -> PipelineError {
    PipelineError::Config(format!("feature tag {tag:?}: {why}"))
}

/// Flattened activations at `tag` for every image of a preprocessed batch.
pub fn extract_features(net: &NofENetwork, tag: FeatureTag, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>, PipelineError> {
    let trunk_acts = net.trunk.activations(images)?;
    let features = trunk_acts
        .last()
        .cloned()
        .ok_or_else(|| unknown(tag, "empty trunk"))?;
    let rows = |t: &Tensor<f32>| (0..t.batch()).map(|s| t.sample(s).to_vec()).collect::<Vec<_>>();
    let branch_layer = match tag {
        FeatureTag::Trunk => return Ok(rows(&features)),
        FeatureTag::TrunkLayer(n) => {
            let pos = output_positions(net.spec.trunk(), None);
            let at = *pos.get(n).ok_or_else(|| unknown(tag, "no such trunk layer"))?;
            return Ok(rows(&trunk_acts[at]));
        }
        FeatureTag::BranchLayer(n) => n,
        FeatureTag::BranchConv => {
            let layers = net.spec.branches()[0].layers();
            layers
                .iter()
                .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
                .ok_or_else(|| unknown(tag, "branch has no conv"))?
        }
        FeatureTag::BranchFc => {
            let layers = net.spec.branches()[0].layers();
            let fcs: Vec<usize> = (0..layers.len())
                .filter(|&i| matches!(layers[i], LayerSpec::Fc { .. }))
                .collect();
            match fcs.as_slice() {
                [] => return Err(unknown(tag, "branch has no FC")),
                [only] => *only,
                [.., hidden, _] => *hidden,
            }
        }
    };
    let bound = &net.spec.branches()[0];
    if branch_layer >= bound.layers().len() {
        return Err(unknown(tag, "no such branch layer"));
    }
    let classifier = bound.layers().iter().rposition(LayerSpec::is_parametric);
    let at = output_positions(bound.layers(), classifier)[branch_layer];
    let predicted: Vec<usize> = {
        let logits = net.logits(images)?;
        (0..logits.batch()).map(|s| argmax(logits.sample(s))).collect()
    };
    let mut out = vec![Vec::new(); images.batch()];
    for (b, branch) in net.branches.iter().enumerate() {
        let mine: Vec<usize> = (0..images.batch())
            .filter(|&s| net.class_slots[predicted[s]].0 == b)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let acts = branch.activations(&features)?;
        for s in mine {
            out[s] = acts[at].sample(s).to_vec();
        }
    }
    Ok(out)
}

/// For each query, the `k` nearest gallery rows by Euclidean distance; ties
/// go to the lower index.
pub fn nn_retrieve(query: &[Vec<f32>], gallery: &[Vec<f32>], k: usize) -> Result<Vec<Vec<usize>>, PipelineError> {
    if k > gallery.len() {
        return Err(PipelineError::Config(format!(
            "k = {k} exceeds gallery size {}",
            gallery.len()
        )));
    }
    let dim = gallery.first().map(Vec::len);
    if let Some(bad) = query.iter().chain(gallery).find(|v| Some(v.len()) != dim) {
        return Err(PipelineError::Config(format!(
            "feature length {} differs from {}",
            bad.len(),
            dim.unwrap_or(0)
        )));
    }
    Ok(query
        .iter()
        .map(|q| {
            let mut ranked: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let d: f64 = q.iter().zip(g).map(|(a, b)| f64::from(a - b).powi(2)).sum();
                    (d, i)
                })
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect())
}
