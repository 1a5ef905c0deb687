use super::*;
use crate::cfe::one_hot_embedding;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

pub(crate) fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        height: 8,
        width: 8,
        classes: 2,
        encoder_widths: vec![4, 6],
        adapter_bottleneck: 2,
        cfe_stage: 2,
        clients: 3,
        evidence_activation: EvidenceActivation::Softplus,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &NetworkConfig, b: usize) -> Tensor {
    let n = b * cfg.in_channels * cfg.height * cfg.width;
    Tensor::from_vec(
        &[b, cfg.in_channels, cfg.height, cfg.width],
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn same_seed_builds_bit_identical_sets() {
    let cfg = tiny_config();
    let a = build_network(&cfg, 42).unwrap();
    let b = build_network(&cfg, 42).unwrap();
    assert_eq!(a.params().len(), b.params().len());
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.group, pb.group);
        assert_eq!(pa.shape, pb.shape);
        assert_eq!(pa.data, pb.data, "{}", pa.name);
    }
    let c = build_network(&cfg, 43).unwrap();
    assert_ne!(
        a.get("enc1.weight").unwrap().data,
        c.get("enc1.weight").unwrap().data,
        "different seeds differ"
    );
}

#[test]
fn adapters_start_as_identity_residuals() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 7).unwrap();
    for stage in 1..=cfg.stages() {
        let up_w = net.get(&format!("adapter{stage}.up.weight")).unwrap();
        let up_b = net.get(&format!("adapter{stage}.up.bias")).unwrap();
        assert!(up_w.data.iter().all(|&v| v == 0.0));
        assert!(up_b.data.iter().all(|&v| v == 0.0));
    }
    // functional identity on a random feature map
    let w = cfg.encoder_widths[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_vec(
        &[1, w, 4, 4],
        (0..w * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let dw = net.get("adapter1.down.weight").unwrap();
    let down_w = Tensor::from_vec(&dw.shape, dw.data.clone()).unwrap();
    let db = net.get("adapter1.down.bias").unwrap();
    let down_b = Tensor::from_vec(&[1, db.data.len(), 1, 1], db.data.clone()).unwrap();
    let uw = net.get("adapter1.up.weight").unwrap();
    let up_w = Tensor::from_vec(&uw.shape, uw.data.clone()).unwrap();
    let hidden = x.conv2d(&down_w, 1, 0).unwrap().add(&down_b).unwrap().relu().unwrap();
    let up = hidden.conv2d(&up_w, 1, 0).unwrap();
    let out = x.add(&up).unwrap();
    assert_eq!(out.data(), x.data(), "zero up-projection keeps the residual");
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 0).unwrap();

    let mut expect = 0usize;
    let mut prev = cfg.in_channels;
    for &w in &cfg.encoder_widths {
        expect += w * prev * 9 + w; // encoder conv
        expect += cfg.adapter_bottleneck * w + cfg.adapter_bottleneck; // down
        expect += w * cfg.adapter_bottleneck + w; // up
        prev = w;
    }
    let gw = cfg.gate_width();
    expect += cfg.clients * gw + gw; // embed fc1
    expect += 3 * (gw * gw + gw); // embed fc2 + two gates
    let dws = cfg.decoder_widths();
    let mut dprev = *cfg.encoder_widths.last().unwrap();
    for (j, &w) in dws.iter().enumerate() {
        expect += w * dprev * 9 + w;
        if j < cfg.stages() - 1 {
            let skip_c = cfg.encoder_widths[cfg.stages() - 2 - j];
            expect += w * skip_c + w;
        } else {
            expect += w * cfg.in_channels * 9 + w;
        }
        dprev = w;
    }
    expect += 2 * (cfg.classes * dprev + cfg.classes); // heads

    assert_eq!(net.total_elements(), expect);
}

#[test]
fn forward_shapes_and_evidence_range() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, &cfg, 2);
    let emb = one_hot_embedding(1, cfg.clients).unwrap();
    let out = net.forward(&batch, &emb).unwrap();
    assert_eq!(out.seg_logits.shape(), &[2, cfg.classes, cfg.height, cfg.width]);
    assert_eq!(out.evidence.shape(), &[2, cfg.classes, cfg.height, cfg.width]);
    assert!(out.evidence.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn forward_is_pure() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&mut rng, &cfg, 2);
    let emb = one_hot_embedding(0, cfg.clients).unwrap();
    let a = net.forward(&batch, &emb).unwrap();
    let b = net.forward(&batch, &emb).unwrap();
    assert_eq!(a.seg_logits.data(), b.seg_logits.data());
    assert_eq!(a.evidence.data(), b.evidence.data());
}

#[test]
fn zeroed_gate_matches_disabled_cfe() {
    // forcing the attention to zero must reduce the network to its gate-free
    // counterpart bit-for-bit
    let cfg = tiny_config();
    let mut net = build_network(&cfg, 9).unwrap();
    for name in ["cfe.gate.desc.weight", "cfe.gate.desc.bias"] {
        let p = net.get_mut(name).unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let batch = random_batch(&mut rng, &cfg, 2);
    let emb = one_hot_embedding(2, cfg.clients).unwrap();
    let gated = net.forward(&batch, &emb).unwrap();
    let off = net
        .forward_with(
            &batch,
            &emb,
            &ForwardOpts {
                tape: None,
                trainable: Trainability::None,
                disable_cfe: true,
            },
        )
        .unwrap();
    assert_eq!(gated.seg_logits.data(), off.seg_logits.data());
    assert_eq!(gated.evidence.data(), off.evidence.data());
}

#[test]
fn trainable_subsets_partition_the_parameters() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 1).unwrap();
    let seg = net.trainable_subset(LossKind::Seg);
    let eu = net.trainable_subset(LossKind::Eu);

    for name in &seg {
        assert_ne!(net.get(name).unwrap().group, ParamGroup::EuHead);
        assert_ne!(net.get(name).unwrap().group, ParamGroup::Frozen);
    }
    for name in &eu {
        assert_ne!(net.get(name).unwrap().group, ParamGroup::SegHead);
        assert_ne!(net.get(name).unwrap().group, ParamGroup::Frozen);
    }

    let mut union: std::collections::HashSet<String> = seg.into_iter().collect();
    union.extend(eu);
    union.extend(net.names_in_group(ParamGroup::Frozen));
    assert_eq!(union.len(), net.params().len(), "partition covers everything");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny_config();
    cfg.classes = 1;
    assert!(matches!(build_network(&cfg, 0), Err(Error::Config(_))));

    let mut cfg = tiny_config();
    cfg.height = 10; // not divisible by 4
    assert!(matches!(build_network(&cfg, 0), Err(Error::Config(_))));

    let mut cfg = tiny_config();
    cfg.cfe_stage = 3;
    assert!(matches!(build_network(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn batch_and_embedding_shapes_are_validated() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 0).unwrap();
    let bad_batch = Tensor::zeros(&[1, 1, 4, 4]);
    let emb = one_hot_embedding(0, cfg.clients).unwrap();
    assert!(matches!(net.forward(&bad_batch, &emb), Err(Error::Shape(_))));

    let batch = Tensor::zeros(&[1, 1, 8, 8]);
    let bad_emb = Tensor::zeros(&[cfg.clients + 1]);
    assert!(matches!(net.forward(&batch, &bad_emb), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    let loaded = ParameterSet::load(cfg, &path).unwrap();
    assert_eq!(net.params().len(), loaded.params().len());
    for (a, b) in net.params().iter().zip(loaded.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        assert_eq!(a.shape, b.shape);
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");

    std::fs::write(&path, b"NOT-MAGIC-AT-ALL").unwrap();
    match read_checkpoint(&path) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected format error, got {other:?}"),
    }

    let cfg = tiny_config();
    let net = build_network(&cfg, 1).unwrap();
    let full = dir.path().join("full.ckpt");
    net.save(&full).unwrap();
    let bytes = std::fs::read(&full).unwrap();
    let cut = bytes.len() - 7;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    match read_checkpoint(&path) {
        Err(Error::Format { offset, msg }) => {
            assert!(offset > 0, "offset {offset} should point at the failure: {msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn group_snapshots_install_and_validate() {
    let cfg = tiny_config();
    let mut net = build_network(&cfg, 5).unwrap();
    let other = build_network(&cfg, 6).unwrap();
    let snap = other.snapshot_group(ParamGroup::Cfe);
    net.install_group(ParamGroup::Cfe, &snap).unwrap();
    for (name, data) in &snap.entries {
        assert_eq!(&net.get(name).unwrap().data, data);
    }
    // installing into the wrong group is a protocol error
    let seg_snap = other.snapshot_group(ParamGroup::SegHead);
    assert!(net.install_group(ParamGroup::Cfe, &seg_snap).is_err());
}
