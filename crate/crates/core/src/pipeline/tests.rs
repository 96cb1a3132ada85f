use super::engine::{batch_loss_and_grads, optimizer, train_step};
use super::*;
use crate::dataio::{synth_hierarchy, Dataset, Split, SynthParams};
use crate::netspec::{parse_netspec, BranchSpec, NetSpec};
use crate::specialty::LabelMapping;
use crate::tensor::{batch_softmax_cross_entropy, Layer, Network, Tensor};

const BASE: &str = "INPUT:1x8x8 / CONV:1x4x3 / POOL:2,2,MAX / FC:4
POLICY { lr=0.05:3; momentum=0.9; decay=0.0005; init=xavier; batch=8 }";
const BRANCH: &str = "CONV:1x4x3 / FC:c
POLICY { lr=0.05:2; momentum=0.9; decay=0.0005; init=xavier; batch=8 }";

fn base() -> NetSpec {
    parse_netspec(BASE).unwrap().into_net().unwrap()
}

fn base_with(classes: usize) -> NetSpec {
    let text = BASE.replace("FC:4", &format!("FC:{classes}"));
    parse_netspec(&text).unwrap().into_net().unwrap()
}

fn branch() -> BranchSpec {
    parse_netspec(BRANCH).unwrap().into_branch().unwrap()
}

fn data(classes: usize, k: usize, per_class: usize) -> (Dataset, Dataset) {
    synth_hierarchy(&SynthParams::new(classes, k, per_class, 8, 10.0, 1)).unwrap()
}

fn generalist(train: &Dataset, k: usize, method: Method, seed: u64) -> GeneralistResult {
    let spec = base_with(train.classes);
    train_generalist(train, &spec, &GeneralistConfig::new(k, method), seed, &mut discard_metrics).unwrap()
}

fn random_batch(n: usize, seed: u64) -> Tensor<f32> {
    let values = (0..n * 64)
        .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0)
        .collect();
    Tensor::new(vec![n, 1, 8, 8], values).unwrap()
}

fn fc_net(weights: Vec<f32>, bias: Vec<f32>, inputs: usize) -> Network<f32> {
    let outputs = bias.len();
    Network::new(vec![Layer::fully_connected(inputs, outputs).with_params(weights, bias).unwrap()])
}

#[test]
fn uniform_logits_give_ln2() {
    let net = fc_net(vec![0.0; 6], vec![0.0; 2], 3);
    let x = Tensor::new(vec![4, 3], vec![0.3; 12]).unwrap();
    for assignments in [vec![0, 1, 1], vec![1, 1, 0]] {
        let m = LabelMapping::new(assignments, 2).unwrap();
        let loss = generalist_loss(&net, &x, &[0, 1, 2, 0], &m).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }
}

#[test]
fn saturated_specialty_predictor_has_tiny_loss() {
    // input one-hot over 2 classes; class i goes to specialty 1 - i
    let net = fc_net(vec![-20.0, 20.0, 20.0, -20.0], vec![0.0; 2], 2);
    let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = LabelMapping::new(vec![1, 0], 2).unwrap();
    assert!(generalist_loss(&net, &x, &[0, 1], &m).unwrap() < 1e-6);
    let wrong = LabelMapping::new(vec![0, 3], 4).unwrap();
    assert!(generalist_loss(&net, &x, &[0, 1], &wrong).is_err());
}

#[test]
fn relabeling_specialties_with_the_outputs_keeps_the_loss() {
    let w = vec![0.1, -0.4, 0.7, 0.2, 0.5, -0.3, -0.6, 0.9, 0.05];
    let b = vec![0.1, 0.0, -0.2];
    let x = Tensor::new(vec![3, 3], vec![0.2, -0.5, 1.0, 0.4, 0.4, -0.1, -1.0, 0.3, 0.8]).unwrap();
    let labels = [0, 3, 2];
    let m = LabelMapping::new(vec![0, 1, 2, 2], 3).unwrap();
    let perm = [2, 0, 1];
    let permuted = m.permuted(&perm).unwrap();
    // output row j of the original net becomes row perm[j]
    let mut pw = vec![0.0; 9];
    let mut pb = vec![0.0; 3];
    for j in 0..3 {
        pw[perm[j] * 3..perm[j] * 3 + 3].copy_from_slice(&w[j * 3..j * 3 + 3]);
        pb[perm[j]] = b[j];
    }
    let a = generalist_loss(&fc_net(w, b, 3), &x, &labels, &m).unwrap();
    let c = generalist_loss(&fc_net(pw, pb, 3), &x, &labels, &permuted).unwrap();
    assert!((a - c).abs() < 1e-6);
}

#[test]
fn stratified_subset_is_balanced_and_seeded() {
    let (train, _) = data(4, 2, 10);
    let s = stratified_subset(&train, 20, 3).unwrap();
    assert_eq!(train.subset(&s).class_counts(), vec![5; 4]);
    assert_eq!(s, stratified_subset(&train, 20, 3).unwrap());
    assert_eq!(stratified_subset(&train, 1000, 0).unwrap().len(), 40);
    assert!(stratified_subset(&train, 3, 0).is_err());
}

#[test]
fn single_specialty_is_trivially_right() {
    let (train, test) = data(4, 2, 6);
    let g = generalist(&train, 1, Method::FullyBalanced, 0);
    assert_eq!(g.mapping.sizes(), vec![4]);
    let pre = g.net.preprocessor(g.net.spec.policy()).unwrap();
    assert_eq!(specialty_accuracy(&g.net.network, &pre, &test, &g.mapping).unwrap(), 1.0);
}

#[test]
fn fixed_method_snapshots_once() {
    let (train, _) = data(4, 2, 6);
    let g = generalist(&train, 2, Method::RandomFixed, 5);
    assert_eq!(g.snapshots.len(), 1);
    assert_eq!(g.history.len(), 3);
    assert!(g.history.windows(2).all(|w| w[0].epoch < w[1].epoch));
    let dynamic = generalist(&train, 2, Method::FullyBalanced, 5);
    assert_eq!(dynamic.snapshots.len(), 4);
}

#[test]
fn divisibility_and_method_conflicts_are_rejected() {
    let (train, _) = data(4, 2, 4);
    let spec = base();
    for method in [Method::FullyBalanced, Method::RandomFixed] {
        let cfg = GeneralistConfig::new(3, method);
        assert!(matches!(
            train_generalist(&train, &spec, &cfg, 0, &mut discard_metrics),
            Err(PipelineError::Config(_))
        ));
    }
    let cfg = GeneralistConfig::new(3, Method::Elasso);
    let g = train_generalist(&train, &spec, &cfg, 0, &mut discard_metrics).unwrap();
    assert_eq!(g.mapping.classes(), 4);
    assert_eq!("spectral-fixed".parse::<Method>().unwrap(), Method::SpectralFixed);
    assert!("kmeans".parse::<Method>().is_err());
}

#[test]
fn generalist_training_is_reproducible() {
    let (train, _) = data(4, 2, 8);
    let run = |seed| {
        let mut lines = Vec::new();
        let g = train_generalist(
            &train,
            &base(),
            &GeneralistConfig::new(2, Method::FullyBalanced),
            seed,
            &mut |r: &MetricRecord| lines.push(serde_json::to_string(r).unwrap()),
        )
        .unwrap();
        (g.history, g.snapshots, g.step_losses, lines)
    };
    assert_eq!(run(7), run(7));
}

#[test]
fn spectral_fixed_trains_its_own_confusion() {
    let (train, _) = data(4, 2, 6);
    let g = generalist(&train, 2, Method::SpectralFixed, 2);
    assert_eq!(g.snapshots.len(), 1);
    assert_eq!(g.mapping.specialties(), 2);
}

#[test]
fn build_copies_the_trunk_bit_for_bit() {
    let (train, _) = data(4, 2, 6);
    let g = generalist(&train, 2, Method::FullyBalanced, 1);
    let net = build_nofe(&g, &branch(), 9).unwrap();
    let source: Vec<&Tensor<f32>> = g.net.network.params().collect();
    let trunk: Vec<&Tensor<f32>> = net.trunk.params().collect();
    assert_eq!(trunk.len(), 2);
    for (a, b) in trunk.iter().zip(&source) {
        let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a.shape(), b.shape());
    }
    let again = build_nofe(&g, &branch(), 9).unwrap();
    assert_eq!(net.branches, again.branches);
    let other = build_nofe(&g, &branch(), 10).unwrap();
    assert_ne!(net.branches, other.branches);
}

fn hand_built(assignments: Vec<usize>, k: usize) -> NofENetwork {
    let c = assignments.len();
    let mapping = LabelMapping::new(assignments, k).unwrap();
    let gen = generalist_spec(&base_with(c), k.max(2)).unwrap();
    NofENetwork::init(&gen, &branch(), &mapping, vec![0.0; 64], [1, 8, 8], 4).unwrap()
}

#[test]
fn unequal_sizes_bind_branch_widths() {
    let assignments = vec![1, 0, 1, 1, 0, 1, 1, 0, 1, 1];
    let net = hand_built(assignments.clone(), 2);
    let widths: Vec<usize> = net.spec.branches().iter().map(|b| b.width()).collect();
    assert_eq!(widths, vec![3, 7]);
    let mut seen = std::collections::HashSet::new();
    for (class, &(b, slot)) in net.class_slots.iter().enumerate() {
        assert_eq!(b, assignments[class]);
        assert!(slot < widths[b]);
        assert!(seen.insert((b, slot)));
    }
    assert_eq!(seen.len(), 10);
    assert_eq!(net.class_slots[0], (1, 0));
    assert_eq!(net.class_slots[9], (1, 6));
}

#[test]
fn empty_specialties_are_dropped() {
    let net = hand_built(vec![0, 2, 2, 0], 3);
    assert_eq!(net.branches.len(), 2);
    assert_eq!(net.mapping.sizes(), vec![2, 2]);
}

#[test]
fn forward_is_a_distribution() {
    let net = hand_built(vec![0, 1, 1, 0, 1, 0], 2);
    let x = random_batch(5, 1);
    let p = nofe_forward(&net, &x).unwrap();
    assert_eq!(p.shape(), &[5, 6]);
    for s in 0..5 {
        assert!((p.sample(s).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let logits = net.logits(&x).unwrap();
        assert_eq!(eval::argmax(p.sample(s)), eval::argmax(logits.sample(s)));
    }
}

#[test]
fn zero_weights_give_uniform_output() {
    let mut net = hand_built(vec![0, 1, 1, 0, 1, 0], 2);
    for p in net.params_mut() {
        p.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let p = nofe_forward(&net, &random_batch(3, 2)).unwrap();
    assert!(p.values().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));
}

#[test]
fn shifting_every_logit_changes_nothing() {
    let net = hand_built(vec![0, 1, 1, 0, 1, 0], 2);
    let mut shifted = net.clone();
    for b in &mut shifted.branches {
        let last = b.layers_mut().last_mut().unwrap();
        last.bias.as_mut().unwrap().values_mut().iter_mut().for_each(|v| *v += 3.5);
    }
    let x = random_batch(4, 3);
    let (a, b) = (nofe_forward(&net, &x).unwrap(), nofe_forward(&shifted, &x).unwrap());
    for (u, v) in a.values().iter().zip(b.values()) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn permuting_specialties_and_branches_together_is_invisible() {
    let net = hand_built(vec![0, 1, 2, 0, 1, 2], 3);
    let perm = [2, 0, 1];
    let mut moved = net.clone();
    moved.mapping = net.mapping.permuted(&perm).unwrap();
    moved.class_slots = class_slots(&moved.mapping);
    for (j, b) in net.branches.iter().enumerate() {
        moved.branches[perm[j]] = b.clone();
    }
    let x = random_batch(3, 4);
    assert_eq!(nofe_forward(&net, &x).unwrap(), nofe_forward(&moved, &x).unwrap());
}

#[test]
fn trunk_gradient_is_the_sum_of_branch_contributions() {
    let net = hand_built(vec![0, 1, 1, 0, 1, 0], 2).cast::<f64>();
    let x = random_batch(3, 5).cast::<f64>();
    let labels = [1, 4, 5];
    let (_, full) = net.loss_and_grads(&x, &labels).unwrap();

    // each branch alone: its slice of the global softmax gradient, through
    // the branch and then the trunk
    let (features, trunk_caches) = net.trunk.forward(&x).unwrap();
    let outs: Vec<_> = net.branches.iter().map(|b| b.forward(&features).unwrap()).collect();
    let mut logits = vec![0.0; 3 * 6];
    for s in 0..3 {
        for (class, &(b, slot)) in net.class_slots.iter().enumerate() {
            logits[s * 6 + class] = outs[b].0.sample(s)[slot];
        }
    }
    let (_, g) = batch_softmax_cross_entropy(&Tensor::new(vec![3, 6], logits).unwrap(), &labels).unwrap();
    let mut summed = vec![0.0; full.trunk.flatten().len()];
    for (b, branch) in net.branches.iter().enumerate() {
        let width = outs[b].0.sample_len();
        let mut gb = vec![0.0; 3 * width];
        for s in 0..3 {
            for (class, &(owner, slot)) in net.class_slots.iter().enumerate() {
                if owner == b {
                    gb[s * width + slot] = g.values()[s * 6 + class];
                }
            }
        }
        let mut bg = branch.zero_grads();
        let dx = branch.backward(&outs[b].1, &Tensor::new(outs[b].0.shape().to_vec(), gb).unwrap(), &mut bg);
        assert_eq!(bg, full.branches[b]);
        let mut tg = net.trunk.zero_grads();
        net.trunk.backward(&trunk_caches, &dx, &mut tg);
        for (acc, v) in summed.iter_mut().zip(tg.flatten()) {
            *acc += v;
        }
    }
    for (a, b) in full.trunk.flatten().iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let mut net = hand_built(vec![0, 1, 1, 0], 2);
    let before = net.clone();
    let mut opt = optimizer(&net, 0.9, 0.0005).unwrap();
    train_step(&mut net, &mut opt, &random_batch(4, 6), &[0, 1, 2, 3], true, "t", 0).unwrap();
    for (a, b) in net.params().iter().zip(before.params()) {
        assert_eq!(a.values(), b.values());
    }
}

#[test]
fn a_single_sample_is_memorized() {
    let mut net = hand_built(vec![0, 1, 1, 0], 2);
    let mut opt = optimizer(&net, 0.9, 0.0).unwrap();
    opt.learning_rate = 0.05;
    let x = random_batch(1, 7);
    let mut loss = f64::INFINITY;
    for step in 0..300 {
        loss = train_step(&mut net, &mut opt, &x, &[2], true, "t", step).unwrap();
    }
    assert!(loss < 0.01, "loss {loss}");
    let ds = Dataset::new([1, 8, 8], x.values().to_vec(), vec![2], 4, Split::Train).unwrap();
    let pre = net.preprocessor(net.spec.policy()).unwrap();
    assert_eq!(evaluate_top1(&net, &pre, &ds, CropMode::Center).unwrap(), 1.0);
}

#[test]
fn chunked_gradients_match_one_pass() {
    let net = hand_built(vec![0, 1, 1, 0], 2).cast::<f64>();
    let x = random_batch(40, 8).cast::<f64>();
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let (l1, g1) = net.loss_and_grads(&x, &labels).unwrap();
    for deterministic in [true, false] {
        let (l2, g2) = batch_loss_and_grads(&net, &x, &labels, deterministic).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
        for (a, b) in g1.trunk.flatten().iter().zip(g2.trunk.flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn non_finite_loss_stops_training_with_a_checkpoint() {
    let mut net = hand_built(vec![0, 1, 1, 0], 2);
    let mut opt = optimizer(&net, 0.9, 0.0).unwrap();
    let mut x = random_batch(2, 9);
    x.values_mut()[0] = f32::NAN;
    match train_step(&mut net, &mut opt, &x, &[0, 1], true, "finetune", 12) {
        Err(PipelineError::NonFinite { step, last_finite: Some(records), .. }) => {
            assert_eq!(step, 12);
            assert_eq!(records.len(), net.params().len());
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn finetuning_lowers_the_loss() {
    let (train, _) = data(4, 2, 12);
    let g = generalist(&train, 2, Method::FullyBalanced, 3);
    let mut net = build_nofe(&g, &branch(), 3).unwrap();
    let policy = net.spec.policy().clone();
    let r = finetune_nofe(&mut net, &train, &policy, 3, true, &mut discard_metrics).unwrap();
    assert_eq!(r.epoch_losses.len(), 2);
    assert!(r.epoch_losses[1] < r.epoch_losses[0]);
}

#[test]
fn untrained_tree_is_near_chance() {
    let (_, test) = synth_hierarchy(&SynthParams {
        test_per_class: 100,
        ..SynthParams::new(4, 2, 1, 8, 10.0, 2)
    })
    .unwrap();
    let mut net = hand_built(vec![0, 1, 1, 0], 2);
    for p in net.params_mut() {
        p.values_mut().iter_mut().for_each(|v| *v *= 1e-3);
    }
    let pre = net.preprocessor(net.spec.policy()).unwrap();
    let acc = evaluate_top1(&net, &pre, &test, CropMode::Center).unwrap();
    // 400 samples at p = 1/4: five standard deviations is about 0.108
    assert!((acc - 0.25).abs() < 0.11, "accuracy {acc}");
}

#[test]
fn ten_crop_equals_center_when_crops_cover_the_image() {
    let (_, test) = data(4, 2, 5);
    let net = hand_built(vec![0, 1, 1, 0], 2);
    let pre = net.preprocessor(net.spec.policy()).unwrap();
    let center = probabilities(&net, &pre, &test, CropMode::Center);
    let ten = probabilities(&net, &pre, &test, CropMode::TenCrop);
    assert_eq!(
        evaluate_top1(&net, &pre, &test, CropMode::Center).unwrap(),
        evaluate_top1(&net, &pre, &test, CropMode::TenCrop).unwrap()
    );
    for (a, b) in center.unwrap().iter().flatten().zip(ten.unwrap().iter().flatten()) {
        assert!((a - b).abs() < 1e-6);
    }
}

use super::eval::probabilities;

#[test]
fn feature_shapes_follow_the_tag() {
    let net = hand_built(vec![0, 1, 1, 0], 2);
    let x = random_batch(3, 10);
    let trunk = extract_features(&net, FeatureTag::Trunk, &x).unwrap();
    assert_eq!(trunk[0].len(), net.spec.trunk_output_shape().iter().product::<usize>());
    assert_eq!(trunk[0].len(), 4 * 4 * 4);
    let fc = extract_features(&net, FeatureTag::BranchFc, &x).unwrap();
    assert!(fc.iter().all(|v| v.len() == 2));
    let conv = extract_features(&net, FeatureTag::BranchConv, &x).unwrap();
    assert!(conv.iter().all(|v| v.len() == 4 * 4 * 4));
    let first = extract_features(&net, "trunk:0".parse().unwrap(), &x).unwrap();
    assert_eq!(first[0].len(), 4 * 8 * 8);
    assert!(extract_features(&net, FeatureTag::BranchLayer(7), &x).is_err());
    assert!("head".parse::<FeatureTag>().is_err());

    let mut twice = x.values()[..64].to_vec();
    twice.extend_from_slice(&x.values()[..64]);
    let pair = Tensor::new(vec![2, 1, 8, 8], twice).unwrap();
    let f = extract_features(&net, FeatureTag::BranchConv, &pair).unwrap();
    assert_eq!(f[0], f[1]);
}

#[test]
fn retrieval_orders_by_distance() {
    let gallery = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 2.0]];
    assert_eq!(nn_retrieve(&[vec![0.0, 0.0]], &gallery, 2).unwrap(), vec![vec![0, 2]]);
    assert_eq!(nn_retrieve(&[gallery[1].clone()], &gallery, 1).unwrap(), vec![vec![1]]);
    assert_eq!(nn_retrieve(&[vec![5.0, 5.0]], &gallery[..1], 1).unwrap(), vec![vec![0]]);
    let ties = vec![vec![1.0], vec![-1.0]];
    assert_eq!(nn_retrieve(&[vec![0.0]], &ties, 2).unwrap(), vec![vec![0, 1]]);
    assert!(nn_retrieve(&[vec![0.0, 0.0]], &gallery, 4).is_err());
    assert!(nn_retrieve(&[vec![0.0]], &gallery, 1).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = data(4, 2, 4);
    let g = generalist(&train, 2, Method::FullyBalanced, 0);
    let gp = dir.path().join("g.nofe");
    g.net.save(&gp).unwrap();
    let loaded = load_trained_net(&gp, &g.net.spec, [1, 8, 8]).unwrap();
    assert_eq!(loaded.network, g.net.network);
    assert_eq!(loaded.mean, g.net.mean);

    let net = build_nofe(&g, &branch(), 1).unwrap();
    let np = dir.path().join("n.nofe");
    net.save(&np).unwrap();
    let back = load_nofe(&np, &g.net.spec, &branch(), [1, 8, 8]).unwrap();
    assert_eq!(back.trunk, net.trunk);
    assert_eq!(back.branches, net.branches);
    assert_eq!(back.mapping, net.mapping);

    let wider = generalist_spec(&base_with(4), 3).unwrap();
    assert!(matches!(
        load_trained_net(&gp, &wider, [1, 8, 8]),
        Err(PipelineError::Data(crate::dataio::DataError::ShapeMismatch { .. }))
    ));
}
