use proptest::prelude::*;

use super::*;
use crate::tensor::{InitScheme, LrnParams, PoolKind};

fn net(text: &str) -> NetSpec {
    parse_netspec(text).unwrap().into_net().unwrap()
}

#[test]
fn conv_pool_fc_infers_fan_in() {
    let n = parse_netspec_with_input("CONV:1x32x5 / POOL:3,2,MAX / FC:100", [3, 32, 32])
        .unwrap()
        .into_net()
        .unwrap();
    assert_eq!(n.layers().len(), 3);
    // 5x5 conv with pad 2 keeps 32x32; ceil-mode 3/2 pool gives 16x16
    assert_eq!(n.shapes(), &[[32, 32, 32], [32, 16, 16], [100, 1, 1]]);
    assert_eq!(count_params(&n), (32 * 3 * 25 + 32) + (32 * 16 * 16 * 100 + 100));
}

#[test]
fn minimal_program() {
    let n = parse_netspec_with_input("FC:10", [10, 1, 1]).unwrap().into_net().unwrap();
    assert_eq!(n.layers(), &[LayerSpec::fc(10)]);
}

#[test]
fn two_part_triple_is_malformed() {
    let err = parse_netspec("INPUT:3x8x8\n\nCONV:1x32\nFC:2").unwrap_err();
    match &err {
        NetSpecError::MalformedTriple { pos, .. } => assert_eq!(pos.line, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("malformed layer triple"));
}

#[test]
fn errors_are_distinct_and_located() {
    let unknown = parse_netspec("INPUT:3x8x8\nDROPOUT:0.5\nFC:2").unwrap_err();
    assert!(matches!(unknown, NetSpecError::UnknownLayer { pos: SourcePos { line: 2, column: 1 }, .. }));

    let chain = parse_netspec("INPUT:1x4x4\nPOOL:2,2,MAX\nCONV:1x4x5,p=0\nFC:2").unwrap_err();
    assert!(matches!(chain, NetSpecError::ShapeChain { index: 1, pos: Some(SourcePos { line: 3, .. }), .. }));

    let missing = parse_netspec("INPUT:1x4x4\nCONV:1x4x3\nPOOL:2,2,MAX").unwrap_err();
    assert!(matches!(missing, NetSpecError::MissingTerminalFc { .. }));

    assert_eq!(parse_netspec("FC:2").unwrap_err(), NetSpecError::MissingInput);
    assert!(matches!(
        parse_netspec("INPUT:4\nPOOL:2,2,MIN\nFC:2").unwrap_err(),
        NetSpecError::Malformed { what: "pool", .. }
    ));
}

#[test]
fn conv_options_and_repetition() {
    let n = net("INPUT:4x9x9\nCONV:3x8x3,s=1,p=0,g=2\nFC:2");
    assert_eq!(n.layers().len(), 4);
    assert_eq!(n.shapes()[2], [8, 3, 3]);
    assert_eq!(
        n.layers()[0],
        LayerSpec::Conv { filters: Width::Fixed(8), kernel: 3, stride: 1, pad: 0, groups: 2 }
    );
}

#[test]
fn lrn_defaults_and_explicit_constants() {
    let n = net("INPUT:2x3x3\nLRN\nLRN:3,0.5,1,2\nFC:1");
    assert_eq!(n.layers()[0], LayerSpec::Lrn(LrnParams::default()));
    assert_eq!(n.layers()[1], LayerSpec::Lrn(LrnParams { size: 3, alpha: 0.5, beta: 1.0, k: 2.0 }));
}

#[test]
fn policy_block_spans_lines() {
    let n = net(
        "INPUT:10\nFC:2\nPOLICY {\n  lr=0.1:3; lr=0.01:2\n  momentum=0.5; decay=0\n  init=msra; batch=7; mirror=1; crop=8; pad=2\n}",
    );
    let p = n.policy();
    assert_eq!(p.schedule, vec![(0.1, 3), (0.01, 2)]);
    assert_eq!((p.momentum, p.weight_decay, p.batch_size), (0.5, 0.0, 7));
    assert_eq!(p.init, InitScheme::Msra);
    assert!(p.mirror);
    assert_eq!((p.crop, p.pad), (Some(8), 2));
    assert_eq!(p.total_epochs(), 5);
    assert_eq!(p.learning_rate_at(2), 0.1);
    assert_eq!(p.learning_rate_at(3), 0.01);
    assert!(parse_netspec("INPUT:10\nFC:2\nPOLICY { lr=0.1:0 }").is_err());
    assert!(parse_netspec("INPUT:10\nFC:2\nPOLICY { speed=3 }").is_err());
}

#[test]
fn symbolic_width_makes_a_branch() {
    let b = parse_netspec("# expert\nCONV:1x16x3 / FC:c").unwrap().into_branch().unwrap();
    assert_eq!(b.layers[1], LayerSpec::Fc { width: Width::Classes });
    let bound = b.bind(5, [8, 4, 4]).unwrap();
    assert_eq!(bound.shapes().last(), Some(&[5, 1, 1]));
    assert!(b.bind(5, [8, 2, 2]).is_ok());
    assert!(parse_netspec("INPUT:10\nFC:c").unwrap().into_net().is_err());
}

#[test]
fn blocks_expand_and_refuse_instantiation() {
    let n = net("INPUT:4x6x6\nBLOCK{ CONV:1x4x3 / CONV:1x4x3 }x3\nPOOL:6,1,AVE\nFC:2");
    assert_eq!(n.layers().len(), 8);
    assert_eq!(n.blocks().len(), 3);
    assert_eq!(n.blocks()[2], ResidualBlock { start: 4, len: 2 });
    assert!(matches!(n.instantiate::<f32>(), Err(NetSpecError::NotInstantiable { .. })));
    assert!(parse_netspec("INPUT:4\nBLOCK{ BLOCK{ FC:2 }x1 }x1").is_err());
    assert!(parse_netspec("INPUT:4\nBLOCK{ FC:2 }").is_err());
}

#[test]
fn instantiate_inserts_hidden_relus() {
    let n = net("INPUT:1x6x6\nCONV:1x2x3 / POOL:2,2,MAX / FC:5 / FC:3");
    let layers = n.instantiate::<f64>().unwrap();
    let kinds: Vec<&str> = layers.iter().map(|l| l.kind.name()).collect();
    assert_eq!(kinds, vec!["conv", "relu", "max-pool", "fully-connected", "relu", "fully-connected"]);
}

fn shipped_pair(name: &str) -> (NetSpec, BranchSpec) {
    let (base, branch) = shipped(name).unwrap();
    let base = parse_netspec(base).unwrap().into_net().unwrap();
    let branch = parse_netspec(branch).unwrap().into_branch().unwrap();
    (base, branch)
}

#[test]
fn every_shipped_architecture_infers_and_builds_a_tree() {
    for &(name, _, _) in shipped::ARCHITECTURES {
        let (base, branch) = shipped_pair(name);
        assert_eq!(base.name(), name);
        let g = make_generalist(&base, 10).unwrap();
        let nofe = make_nofe(&g, &branch, &[10; 10]).unwrap();
        assert!(nofe.trunk().iter().all(|l| !matches!(l, LayerSpec::Fc { .. })), "{name}");
        let counts: Vec<u64> = nofe.branches().iter().map(|b| b.param_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{name}");
        assert_eq!(
            count_params(&nofe),
            nofe.trunk_param_count() + counts.iter().sum::<u64>(),
            "{name}"
        );
    }
}

#[test]
fn alexnet_caffe_counts() {
    let (base, branch) = shipped_pair("alexnet-caffe");
    assert_eq!(count_params(&base), 60_965_224);
    assert_eq!(base.shapes()[base.classifier_index() - 3], [256, 6, 6]);
    let g10 = make_generalist(&base, 10).unwrap();
    assert_eq!(count_params(&make_nofe(&g10, &branch, &[100; 10]).unwrap()), 40_409_960);
    let g40 = make_generalist(&base, 40).unwrap();
    assert_eq!(count_params(&make_nofe(&g40, &branch, &[25; 40]).unwrap()), 151_562_600);
}

#[test]
fn nin_and_resnet_trunks() {
    let (nin, _) = shipped_pair("nin-c100");
    assert_eq!(trunk_len(&nin), nin.layers().len() - 2);
    let (res, _) = shipped_pair("resnet56-c100");
    // conv + 27 two-conv blocks, pooling head dropped from the trunk
    assert_eq!(trunk_len(&res), 1 + 54);
    assert_eq!(res.shapes()[54], [256, 7, 7]);
}

#[test]
fn shipped_files_round_trip() {
    for &(name, base, branch) in shipped::ARCHITECTURES {
        let b = parse_netspec(base).unwrap();
        let again = match &b {
            ParsedSpec::Net(n) => parse_netspec(&n.to_string()).unwrap(),
            ParsedSpec::Branch(_) => unreachable!(),
        };
        assert_eq!(b, again, "{name}");
        let br = parse_netspec(branch).unwrap().into_branch().unwrap();
        let again = parse_netspec(&br.to_string()).unwrap().into_branch().unwrap();
        assert_eq!(br, again, "{name}");
    }
}

fn layer_strategy() -> impl Strategy<Value = LayerSpec> {
    prop_oneof![
        (1usize..6, 1usize..4, 1usize..3, 0usize..2, 1usize..3).prop_map(|(f, k, s, p, g)| {
            LayerSpec::Conv { filters: Width::Fixed(f * g), kernel: k, stride: s, pad: p, groups: g }
        }),
        (1usize..3, 1usize..3, any::<bool>()).prop_map(|(w, s, max)| LayerSpec::Pool {
            window: w,
            stride: s,
            kind: if max { PoolKind::Max } else { PoolKind::Average },
        }),
        (1usize..6, 0.0f64..1.0, 0.5f64..1.0).prop_map(|(n, a, b)| {
            LayerSpec::Lrn(LrnParams { size: n, alpha: a, beta: b, k: 1.0 })
        }),
        (1usize..20).prop_map(LayerSpec::fc),
    ]
}

proptest! {
    #[test]
    fn print_then_parse_is_identity(
        hidden in prop::collection::vec(layer_strategy(), 0..6),
        classes in 1usize..12,
        lr in 0.0001f64..1.0,
        epochs in 1usize..50,
        channels in prop::sample::select(vec![2usize, 4]),
    ) {
        let mut layers = hidden;
        layers.push(LayerSpec::fc(classes));
        let policy = TrainPolicy { schedule: vec![(lr, epochs)], ..TrainPolicy::default() };
        let spec = NetSpec::new("rt", [channels, 8, 8], layers, vec![], policy);
        prop_assume!(spec.is_ok());
        let spec = spec.unwrap();
        let again = parse_netspec(&spec.to_string()).unwrap().into_net().unwrap();
        prop_assert_eq!(spec, again);
    }

    #[test]
    fn generalist_touches_one_layer(k in 2usize..50, hidden in 1usize..30) {
        let base = net(&format!("INPUT:1x6x6\nCONV:1x3x3 / FC:{hidden} / FC:7"));
        let g = make_generalist(&base, k).unwrap();
        let changed = base.layers().iter().zip(g.layers()).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, usize::from(k != 7));
        prop_assert_eq!(base.input_shape(), g.input_shape());
    }
}
