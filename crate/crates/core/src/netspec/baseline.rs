//! Deeper or wider variants of a base network with a prescribed parameter budget.

use super::spec::{LayerSpec, NetSpec, Width};
use super::transform::{count_params, trunk_len};
use super::NetSpecError;

const TOLERANCE: f64 = 0.05;
const MAX_EXTRA_LAYERS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    /// Insert extra conv layers where the branches would attach.
    AddDepth,
    /// Insert one extra conv layer, then scale every hidden conv's filter count.
    Widen,
}

impl BaselineMode {
    fn as_str(self) -> &'static str {
        match self {
            BaselineMode::AddDepth => "add-depth",
            BaselineMode::Widen => "widen",
        }
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add-depth" | "depth" => Ok(BaselineMode::AddDepth),
            "widen" | "width" => Ok(BaselineMode::Widen),
            other => Err(format!("unknown baseline mode '{other}'")),
        }
    }
}

fn within(count: u64, target: u64) -> bool {
    (count as f64 - target as f64).abs() <= TOLERANCE * target as f64
}

fn rebuild(base: &NetSpec, layers: Vec<LayerSpec>) -> Option<NetSpec> {
    NetSpec::new(
        base.name(),
        base.input_shape(),
        layers,
        base.blocks().to_vec(),
        base.policy().clone(),
    )
    .ok()
}

/// Resizes the conv at `idx` to the width whose count is closest to `target`.
fn tune_width(
    base: &NetSpec,
    layers: &[LayerSpec],
    idx: usize,
    target: u64,
    cap: usize,
) -> Option<(u64, NetSpec)> {
    let with_width = |w: usize| {
        let mut cand = layers.to_vec();
        cand[idx] = LayerSpec::conv(w, match cand[idx] {
            LayerSpec::Conv { kernel, .. } => kernel,
            _ => return None,
        });
        rebuild(base, cand)
    };
    let (mut lo, mut up) = (1usize, cap);
    while lo < up {
        let mid = (lo + up) / 2;
        match with_width(mid) {
            Some(s) if count_params(&s) < target => lo = mid + 1,
            _ => up = mid,
        }
    }
    [lo.saturating_sub(1).max(1), lo]
        .into_iter()
        .filter_map(with_width)
        .map(|s| (count_params(&s), s))
        .min_by_key(|(c, _)| c.abs_diff(target))
}

/// Returns a variant of `base` whose parameter count is within 5% of `target`.
///
/// The extra layers copy the last conv before the cut point (same kernel,
/// stride 1, size-preserving pad). A base already within 5% is returned as is.
pub fn emit_param_matched_baseline(
    base: &NetSpec,
    target: u64,
    mode: BaselineMode,
) -> Result<NetSpec, NetSpecError> {
    let base_count = count_params(base);
    if within(base_count, target) {
        return Ok(base.clone());
    }
    if target < base_count {
        return Err(NetSpecError::TargetBelowBase {
            target,
            base: base_count,
        });
    }
    if !base.blocks().is_empty() {
        return Err(NetSpecError::NotInstantiable {
            name: base.name().to_string(),
            reason: "baselines are not emitted for residual networks".into(),
        });
    }
    let at = trunk_len(base);
    let template = match base.layers()[..at]
        .iter()
        .rev()
        .find(|l| matches!(l, LayerSpec::Conv { .. }))
    {
        Some(LayerSpec::Conv {
            filters, kernel, ..
        }) => (*filters, *kernel),
        _ => return Err(NetSpecError::NoConvPrefix),
    };
    let Width::Fixed(filters) = template.0 else {
        return Err(NetSpecError::NoConvPrefix);
    };
    let kernel = template.1;
    let fail = |closest: u64| NetSpecError::UnreachableTarget {
        mode: mode.as_str(),
        target,
        closest,
    };
    let hi = (target as f64 * (1.0 + TOLERANCE)) as u64;

    match mode {
        BaselineMode::AddDepth => {
            let mut layers = base.layers().to_vec();
            let mut best = base_count;
            for n in 0..MAX_EXTRA_LAYERS {
                let mut cand = layers.clone();
                cand.insert(at + n, LayerSpec::conv(filters, kernel));
                let Some(spec) = rebuild(base, cand.clone()) else {
                    break;
                };
                let c = count_params(&spec);
                if c > hi {
                    break;
                }
                layers = cand;
                best = c;
                if within(c, target) {
                    return Ok(spec);
                }
            }
            // Close the remaining gap with one more layer of tuned width.
            let n = layers.len() - base.layers().len();
            layers.insert(at + n, LayerSpec::conv(filters, kernel));
            match tune_width(base, &layers, at + n, target, filters.max(1) * 64) {
                Some((c, s)) if within(c, target) => Ok(s),
                Some((c, _)) if c.abs_diff(target) < best.abs_diff(target) => Err(fail(c)),
                _ => Err(fail(best)),
            }
        }
        BaselineMode::Widen => {
            let mut layers = base.layers().to_vec();
            layers.insert(at, LayerSpec::conv(filters, kernel));
            let keep = base.classifier_index() + 1;
            let scaled = |alpha: f64| {
                let cand: Vec<LayerSpec> = layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| match l {
                        LayerSpec::Conv {
                            filters: Width::Fixed(f),
                            groups,
                            ..
                        } if i != keep => {
                            let units = ((*f as f64 * alpha) / *groups as f64).round().max(1.0);
                            l.with_width(Width::Fixed(units as usize * groups))
                        }
                        _ => l.clone(),
                    })
                    .collect();
                rebuild(base, cand)
            };
            let (mut lo, mut up) = (1.0f64 / 64.0, 64.0f64);
            let mut best: Option<(u64, NetSpec)> = None;
            for _ in 0..60 {
                let mid = (lo * up).sqrt();
                let Some(s) = scaled(mid) else {
                    up = mid;
                    continue;
                };
                let c = count_params(&s);
                if best.as_ref().is_none_or(|(b, _)| c.abs_diff(target) < b.abs_diff(target)) {
                    best = Some((c, s));
                }
                if c < target {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            let Some((c, s)) = best else {
                return Err(fail(base_count));
            };
            if within(c, target) {
                return Ok(s);
            }
            // Integer filter counts can step over the window; finish on the inserted layer.
            let cap = filters.max(1) * 64;
            match tune_width(base, s.layers(), at, target, cap) {
                Some((c, s)) if within(c, target) => Ok(s),
                _ => Err(fail(c)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_netspec;

    fn tiny() -> NetSpec {
        parse_netspec("INPUT:1x8x8\nCONV:1x4x3 / POOL:2,2,MAX / CONV:1x8x3 / FC:10")
            .unwrap()
            .into_net()
            .unwrap()
    }

    #[test]
    fn matched_base_is_unchanged() {
        let b = tiny();
        let n = count_params(&b);
        for mode in [BaselineMode::AddDepth, BaselineMode::Widen] {
            assert_eq!(emit_param_matched_baseline(&b, n, mode).unwrap(), b);
        }
    }

    #[test]
    fn target_below_base_is_rejected() {
        let b = tiny();
        let n = count_params(&b);
        assert!(matches!(
            emit_param_matched_baseline(&b, n / 2, BaselineMode::Widen),
            Err(NetSpecError::TargetBelowBase { .. })
        ));
    }

    #[test]
    fn doubling_lands_within_five_percent() {
        let b = tiny();
        let target = 2 * count_params(&b);
        for mode in [BaselineMode::AddDepth, BaselineMode::Widen] {
            let s = emit_param_matched_baseline(&b, target, mode).unwrap();
            let c = count_params(&s) as f64;
            assert!((c - target as f64).abs() <= 0.05 * target as f64, "{mode:?}: {c}");
            assert!(s.layers().len() > b.layers().len());
            assert_eq!(s.output_width(), 10);
        }
    }
}
