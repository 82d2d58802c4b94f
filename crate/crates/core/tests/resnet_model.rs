use voxcam::resnet::{ForwardOptions, FreezePolicy, Mode, Model, ModelError, ModelSpec, Stage};
use voxcam::tensor::{conv_output_extent, BnMode, ConvParams, PoolParams, Tape, Tensor};
use voxcam::train::{build_model, train_fold, Fold, InMemorySource, Subject, TrainConfig};
use voxcam::Volume;

fn input(n: usize, extent: [usize; 3], seed: u64) -> Tensor<f32> {
    let len = n * extent.iter().product::<usize>();
    let data = (0..len)
        .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 500.0 - 1.0)
        .collect();
    Tensor::from_vec(&[n, 1, extent[0], extent[1], extent[2]], data).unwrap()
}

/// Closed-form parameter count of a basic-block network.
fn basic_param_count(base: usize, blocks: [usize; 4]) -> usize {
    let mut total = base * 343 + 2 * base;
    let mut in_ch = base;
    for (s, &count) in blocks.iter().enumerate() {
        let planes = base << s;
        for i in 0..count {
            total += 27 * in_ch * planes + 2 * planes + 27 * planes * planes + 2 * planes;
            if in_ch != planes || (s > 0 && i == 0) {
                total += in_ch * planes + 2 * planes;
            }
            in_ch = planes;
        }
    }
    total + 2 * in_ch + 2
}

#[test]
fn depth18_names_enumerate_stem_blocks_and_head() {
    let m = Model::new(ModelSpec::resnet(18, 64).unwrap(), 0).unwrap();
    let names: Vec<&str> = m.params().keys().map(String::as_str).collect();
    // 3 stem + 8 blocks × 6 + 3 projection shortcuts × 3 + 2 head.
    assert_eq!(names.len(), 3 + 48 + 9 + 2);
    assert_eq!(&names[..3], &["stem.conv.weight", "stem.bn.weight", "stem.bn.bias"]);
    assert_eq!(&names[names.len() - 2..], &["head.weight", "head.bias"]);
    for s in 1..=4 {
        for b in 1..=2 {
            for part in ["conv1.weight", "bn1.weight", "bn1.bias", "conv2.weight", "bn2.weight", "bn2.bias"] {
                assert!(m.param(&format!("stage{s}.block{b}.{part}")).is_some());
            }
        }
        assert_eq!(m.param(&format!("stage{s}.block1.down.conv.weight")).is_some(), s > 1);
    }
    assert_eq!(m.trainable_names().len(), names.len());
    assert_eq!(m.num_parameters(), basic_param_count(64, [2, 2, 2, 2]));
}

#[test]
fn depth34_parameter_count() {
    let m = Model::new(ModelSpec::resnet(34, 8).unwrap(), 0).unwrap();
    assert_eq!(m.num_parameters(), basic_param_count(8, [3, 4, 6, 3]));
}

#[test]
fn depth50_head_has_2048_features() {
    let spec = ModelSpec::resnet(50, 64).unwrap();
    assert_eq!(spec.head_features(), 2048);
    let m = Model::new(ModelSpec::resnet(50, 2).unwrap(), 0).unwrap();
    assert_eq!(m.param("head.weight").unwrap().shape(), &[2, 64]);
    assert!(m.param("stage1.block1.conv3.weight").is_some());
    assert!(m.param("stage1.block1.down.conv.weight").is_some());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(ModelSpec::resnet(20, 8), Err(ModelError::InvalidSpec(_))));
    assert!(matches!(ModelSpec::resnet(18, 0), Err(ModelError::InvalidSpec(_))));
    let mut spec = ModelSpec::resnet(18, 8).unwrap();
    spec.stage_blocks = [3, 4, 6, 3];
    assert!(matches!(Model::new(spec, 0), Err(ModelError::InvalidSpec(_))));
}

#[test]
fn same_seed_same_parameters() {
    let spec = ModelSpec::resnet(18, 4).unwrap();
    let a = Model::new(spec.clone(), 5).unwrap();
    let b = Model::new(spec.clone(), 5).unwrap();
    let c = Model::new(spec, 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn logits_shape_and_eval_purity() {
    let mut m = Model::new(ModelSpec::resnet(18, 8).unwrap(), 1).unwrap();
    m.set_mode(Mode::Eval);
    let x = input(1, [32; 3], 3);
    let a = m.forward_logits(&x).unwrap();
    assert_eq!(a.shape(), &[1, 2]);
    assert_eq!(a, m.forward_logits(&x).unwrap());
    assert!(m.forward_logits(&Tensor::zeros(&[1, 2, 32, 32, 32])).is_err());
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut m = Model::new(ModelSpec::resnet(18, 4).unwrap(), 2).unwrap();
    m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
    m.param_mut("head.bias").unwrap().data_mut().fill(0.0);
    for mode in [Mode::Eval, Mode::Train] {
        m.set_mode(mode);
        assert_eq!(m.forward_logits(&input(2, [16; 3], 1)).unwrap().data(), &[0.0; 4]);
    }
}

/// Extents after the stem, the pool and the stride-2 stages.
fn stage_extent(len: usize, stem_stride: usize, stage: usize) -> usize {
    let mut e = conv_output_extent(len, 7, stem_stride, 3).unwrap();
    e = conv_output_extent(e, 3, 2, 1).unwrap();
    for _ in 0..stage {
        e = conv_output_extent(e, 3, 2, 1).unwrap();
    }
    e
}

#[test]
fn stage_activation_shapes() {
    let mut m = Model::new(ModelSpec::resnet(18, 8).unwrap(), 4).unwrap();
    m.set_mode(Mode::Eval);
    let x = input(1, [32, 32, 32], 0);
    let logits = m.forward_logits(&x).unwrap();
    for (s, stage) in [Stage::Stage1, Stage::Stage2, Stage::Stage3, Stage::Stage4].into_iter().enumerate() {
        let (l, act) = m.forward_with_activations(&x, stage).unwrap();
        assert_eq!(l, logits);
        assert!(act.requires_grad);
        let expect = [1, 8 << s, stage_extent(32, 1, s), stage_extent(32, 2, s), stage_extent(32, 2, s)];
        assert_eq!(act.shape(), &expect);
    }
    let (_, act) = m.forward_with_activations(&x, Stage::Stage4).unwrap();
    assert_eq!(act.shape(), &[1, 64, 2, 1, 1]);
    assert!(matches!("stage5".parse::<Stage>(), Err(ModelError::UnknownLayer(_))));
}

#[test]
fn freeze_policy_trainable_sets() {
    let mut m = Model::new(ModelSpec::resnet(18, 4).unwrap(), 0).unwrap();
    m.apply_freeze_policy(FreezePolicy::FinalStageAndHead);
    let trainable = m.trainable_names();
    assert!(trainable.iter().all(|n| n.starts_with("stage4.") || n.starts_with("head.")));
    let expected = m.params().keys().filter(|n| n.starts_with("stage4.") || n.starts_with("head.")).count();
    assert_eq!(trainable.len(), expected);
    m.apply_freeze_policy(FreezePolicy::None);
    assert_eq!(m.trainable_names().len(), m.params().len());
}

#[test]
fn frozen_batch_norm_keeps_running_stats() {
    let mut m = Model::new(ModelSpec::resnet(18, 4).unwrap(), 0).unwrap();
    m.apply_freeze_policy(FreezePolicy::FinalStageAndHead);
    let before = m.running_stats().clone();
    m.forward_logits(&input(2, [16; 3], 9)).unwrap();
    for (layer, rs) in m.running_stats() {
        if layer.starts_with("stage4.") {
            assert_ne!(rs, &before[layer], "{layer}");
        } else {
            assert_eq!(rs, &before[layer], "{layer}");
        }
    }
}

#[test]
fn zero_residual_branch_passes_input_through() {
    let mut m = Model::new(ModelSpec::resnet(18, 4).unwrap(), 3).unwrap();
    m.set_mode(Mode::Eval);
    for b in 1..=2 {
        for c in ["conv1", "conv2"] {
            m.param_mut(&format!("stage1.block{b}.{c}.weight")).unwrap().data_mut().fill(0.0);
        }
    }
    let x = input(1, [16; 3], 5);
    let (_, act) = m.forward_with_activations(&x, Stage::Stage1).unwrap();

    // The stem alone, recorded independently.
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x);
    let w = tape.constant(m.param("stem.conv.weight").unwrap().clone());
    let p = ConvParams { in_channels: 1, out_channels: 4, kernel: [7; 3], stride: [1, 2, 2], padding: [3; 3] };
    let h = tape.conv3d(xv, w, None, p).unwrap();
    let g = tape.constant(m.param("stem.bn.weight").unwrap().clone());
    let bt = tape.constant(m.param("stem.bn.bias").unwrap().clone());
    let rs = &m.running_stats()["stem.bn"];
    let mode = BnMode::Eval {
        mean: rs.mean.iter().map(|&v| v as f64).collect(),
        var: rs.var.iter().map(|&v| v as f64).collect(),
    };
    let (h, _) = tape.batch_norm(h, g, bt, mode).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.max_pool3d(h, PoolParams::cubic(3, 2, 1)).unwrap();
    assert_eq!(act.data(), tape.value(h).data());
}

#[test]
fn constant_parameters_record_no_weight_gradients() {
    let m = Model::new(ModelSpec::resnet(18, 2).unwrap(), 0).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(input(1, [16; 3], 2));
    let opts = ForwardOptions { capture: Some(Stage::Stage3), params_as_constants: true, ..Default::default() };
    let pass = m.record(&mut tape, xv, opts).unwrap();
    let y = tape.pick(pass.logits, 1).unwrap();
    let grads = tape.gradients(y).unwrap();
    assert!(grads.wrt(pass.captured.unwrap()).is_ok());
    assert!(pass.params.iter().all(|(_, v)| grads.wrt(*v).is_err()));
}

fn tiny_cohort() -> InMemorySource {
    let mut src = InMemorySource::default();
    for i in 0..8 {
        let label = (i % 2) as u8;
        let data = (0..16 * 16 * 16)
            .map(|k| ((k * (i + 3)) % 17) as f32 / 17.0 + label as f32 * ((k % 16 > 7) as u8 as f32))
            .collect();
        let image = Volume::from_data([16; 3], data).unwrap();
        src.subjects.insert(format!("s{i}"), Subject { label, image, mask: None });
    }
    src
}

#[test]
fn freeze_survives_training_steps() {
    let data = tiny_cohort();
    let fold = Fold {
        index: 0,
        train: (0..6).map(|i| format!("s{i}")).collect(),
        val: vec!["s6".into()],
        test: vec!["s7".into()],
    };
    let cfg = TrainConfig {
        base_width: 4,
        max_epochs: 1,
        freeze: FreezePolicy::FinalStageAndHead,
        ..Default::default()
    };
    let before = build_model(&cfg).unwrap();
    let out = train_fold(&fold, &cfg, &data).unwrap();
    for (name, t) in before.params() {
        let after = out.model.param(name).unwrap();
        if !name.starts_with("stage4.") && !name.starts_with("head.") {
            assert_eq!(after.data(), t.data(), "{name}");
        }
    }
    assert!(before.params().iter().any(|(n, t)| n.starts_with("stage4.") && out.model.param(n).unwrap().data() != t.data()));
}
