use super::spec::{stack_params, LayerSpec, NetSpec, NofESpec, ResidualBlock, Width};
use super::{BranchSpec, NetSpecError};

/// Parameter (weight + bias element) count.
pub trait CountParams {
    fn count_params(&self) -> u64;
}

impl CountParams for NetSpec {
    fn count_params(&self) -> u64 {
        stack_params(self.layers(), self.input_shape(), self.shapes())
    }
}

impl CountParams for NofESpec {
    fn count_params(&self) -> u64 {
        self.trunk_param_count() + self.branches.iter().map(|b| b.param_count()).sum::<u64>()
    }
}

pub fn count_params<S: CountParams + ?Sized>(spec: &S) -> u64 {
    spec.count_params()
}

/// The base network with its classifier resized to `k` outputs.
pub fn make_generalist(base: &NetSpec, k: usize) -> Result<NetSpec, NetSpecError> {
    if k < 2 {
        return Err(NetSpecError::InvalidK(k));
    }
    let ci = base.classifier_index();
    let mut layers = base.layers().to_vec();
    layers[ci] = layers[ci].with_width(Width::Fixed(k));
    let name = if base.name().is_empty() {
        String::new()
    } else {
        format!("{}-generalist", base.name())
    };
    NetSpec::new(
        name,
        base.input_shape(),
        layers,
        base.blocks().to_vec(),
        base.policy().clone(),
    )
}

/// Number of leading layers shared as the trunk.
///
/// The cut falls just before the first FC layer, or before the classifier
/// conv when the network has no FC. A pool right before the cut that
/// collapses the map to 1x1 is a global-pooling head and stays with the
/// branches.
pub fn trunk_len(net: &NetSpec) -> usize {
    let layers = net.layers();
    let mut cut = layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Fc { .. }))
        .unwrap_or_else(|| net.classifier_index());
    if cut >= 2 {
        let before = net.shape_before(cut - 1);
        let after = net.shapes()[cut - 1];
        let collapses = after[1] == 1 && after[2] == 1 && (before[1] > 1 || before[2] > 1);
        if matches!(layers[cut - 1], LayerSpec::Pool { .. }) && collapses {
            cut -= 1;
        }
    }
    cut
}

/// Trunk of `generalist` plus one bound copy of `branch` per specialty.
pub fn make_nofe(
    generalist: &NetSpec,
    branch: &BranchSpec,
    specialty_sizes: &[usize],
) -> Result<NofESpec, NetSpecError> {
    if specialty_sizes.is_empty() || specialty_sizes.contains(&0) {
        return Err(NetSpecError::InvalidSpecialtySizes(specialty_sizes.to_vec()));
    }
    let cut = trunk_len(generalist);
    let trunk = generalist.layers()[..cut].to_vec();
    if !trunk.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
        return Err(NetSpecError::NoConvPrefix);
    }
    let trunk_blocks: Vec<ResidualBlock> = generalist
        .blocks()
        .iter()
        .copied()
        .filter(|b| b.start + b.len <= cut)
        .collect();
    let trunk_shapes = generalist.shapes()[..cut].to_vec();
    let trunk_out = trunk_shapes[cut - 1];
    let branches = specialty_sizes
        .iter()
        .map(|&size| branch.bind(size, trunk_out))
        .collect::<Result<Vec<_>, _>>()?;
    let base_name = generalist
        .name()
        .strip_suffix("-generalist")
        .unwrap_or(generalist.name());
    Ok(NofESpec {
        name: format!("{base_name}-nofe"),
        input_shape: generalist.input_shape(),
        trunk,
        trunk_blocks,
        trunk_shapes,
        branches,
        specialty_sizes: specialty_sizes.to_vec(),
        policy: branch
            .policy
            .clone()
            .unwrap_or_else(|| generalist.policy().clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{parse_netspec, TrainPolicy};

    fn net(text: &str) -> NetSpec {
        parse_netspec(text).unwrap().into_net().unwrap()
    }

    fn branch(text: &str) -> BranchSpec {
        parse_netspec(text).unwrap().into_branch().unwrap()
    }

    #[test]
    fn fc_ten_to_five() {
        let n = net("INPUT:10\nFC:5");
        assert_eq!(count_params(&n), 55);
    }

    #[test]
    fn generalist_resizes_classifier_only() {
        let base = net("INPUT:3x32x32\nCONV:1x32x5 / POOL:3,2,MAX / FC:64 / FC:100");
        for k in [2, 10, 100] {
            let g = make_generalist(&base, k).unwrap();
            let diffs: Vec<usize> = (0..base.layers().len())
                .filter(|&i| base.layers()[i] != g.layers()[i])
                .collect();
            if k == 100 {
                assert!(diffs.is_empty());
            } else {
                assert_eq!(diffs, vec![3]);
            }
            assert_eq!(g.output_width(), k);
        }
        assert_eq!(make_generalist(&base, 1), Err(NetSpecError::InvalidK(1)));
    }

    #[test]
    fn nofe_binds_sizes_and_counts_add_up() {
        let g = net("INPUT:1x12x12\nCONV:1x8x3 / POOL:2,2,MAX / FC:4");
        let b = branch("CONV:1x16x3 / FC:c");
        let nofe = make_nofe(&g, &b, &[3, 7]).unwrap();
        assert_eq!(nofe.trunk().len(), 2);
        let widths: Vec<usize> = nofe.branches().iter().map(|b| b.width()).collect();
        assert_eq!(widths, vec![3, 7]);
        // trunk conv 8*9+8, branch conv 16*8*9+16, FC 16*36*c + c
        let trunk = 8 * 9 + 8;
        let conv = 16 * 8 * 9 + 16;
        let expected = trunk + 2 * conv + (576 * 3 + 3) + (576 * 7 + 7);
        assert_eq!(count_params(&nofe), expected);
        assert_eq!(nofe.policy(), &TrainPolicy::default());
    }

    #[test]
    fn nofe_rejects_bad_inputs() {
        let g = net("INPUT:1x12x12\nCONV:1x8x3 / FC:4");
        let b = branch("FC:c");
        assert!(matches!(
            make_nofe(&g, &b, &[]),
            Err(NetSpecError::InvalidSpecialtySizes(_))
        ));
        assert!(matches!(
            make_nofe(&g, &b, &[2, 0]),
            Err(NetSpecError::InvalidSpecialtySizes(_))
        ));
        let flat = net("INPUT:10\nFC:8 / FC:4");
        assert_eq!(make_nofe(&flat, &b, &[4]), Err(NetSpecError::NoConvPrefix));
    }

    #[test]
    fn single_branch_matches_base_arity() {
        let g = net("INPUT:1x8x8\nCONV:1x4x3 / FC:10");
        let nofe = make_nofe(&g, &branch("FC:c"), &[10]).unwrap();
        assert_eq!(nofe.branches().len(), 1);
        assert_eq!(nofe.branches()[0].width(), 10);
        assert_eq!(count_params(&nofe), count_params(&g));
    }

    #[test]
    fn global_pool_head_moves_to_branch() {
        let g = net("INPUT:1x8x8\nCONV:1x4x3 / POOL:8,1,AVE / FC:10");
        assert_eq!(trunk_len(&g), 1);
        let g = net("INPUT:1x8x8\nCONV:1x4x3 / POOL:2,2,AVE / FC:10");
        assert_eq!(trunk_len(&g), 2);
    }

    #[test]
    fn conv_classifier_cut() {
        let g = net("INPUT:3x8x8\nCONV:1x6x3 / CONV:1x4x1 / POOL:8,1,AVE");
        assert_eq!(trunk_len(&g), 1);
        let nofe = make_nofe(&g, &branch("CONV:1xcx1 / POOL:8,1,AVE"), &[2, 2]).unwrap();
        assert_eq!(nofe.branches()[1].shapes().last(), Some(&[2, 1, 1]));
    }
}
