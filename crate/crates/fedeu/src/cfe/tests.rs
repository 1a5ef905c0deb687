use super::*;
use crate::model::{build_network, EvidenceActivation, NetworkConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn gate_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        height: 8,
        width: 8,
        classes: 2,
        encoder_widths: vec![4, 4],
        adapter_bottleneck: 2,
        cfe_stage: 2,
        clients: 3,
        evidence_activation: EvidenceActivation::Softplus,
    }
}

fn cfe_tensors(net: &ParameterSet) -> CfeTensors {
    let t = |name: &str| {
        let p = net.get(name).unwrap();
        Tensor::from_vec(&p.shape, p.data.clone()).unwrap()
    };
    CfeTensors {
        embed_fc1_w: t("cfe.embed.fc1.weight"),
        embed_fc1_b: t("cfe.embed.fc1.bias"),
        embed_fc2_w: t("cfe.embed.fc2.weight"),
        embed_fc2_b: t("cfe.embed.fc2.bias"),
        gate_embed_w: t("cfe.gate.embed.weight"),
        gate_embed_b: t("cfe.gate.embed.bias"),
        gate_desc_w: t("cfe.gate.desc.weight"),
        gate_desc_b: t("cfe.gate.desc.bias"),
    }
}

#[test]
fn one_hot_embedding_is_valid() {
    let e = one_hot_embedding(1, 3).unwrap();
    assert_eq!(e.data(), &[0.0, 1.0, 0.0]);
    assert!(one_hot_embedding(3, 3).is_err());
}

#[test]
fn expansion_distinguishes_clients_and_is_deterministic() {
    let net = build_network(&gate_config(), 12).unwrap();
    let p = cfe_tensors(&net);
    let mut outputs = Vec::new();
    for k in 0..3 {
        let delta = one_hot_embedding(k, 3).unwrap().reshape(&[1, 3]).unwrap();
        let a = expand_embedding(&delta, &p).unwrap();
        let b = expand_embedding(&delta, &p).unwrap();
        assert_eq!(a.data(), b.data(), "pure function of (k, params)");
        assert_eq!(a.shape(), &[1, 4], "expansion width equals gate width");
        outputs.push(a.data().to_vec());
    }
    assert_ne!(outputs[0], outputs[1]);
    assert_ne!(outputs[1], outputs[2]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn expansion_rejects_non_one_hot() {
    let net = build_network(&gate_config(), 12).unwrap();
    let p = cfe_tensors(&net);
    let bad = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap();
    assert!(expand_embedding(&bad, &p).is_err());
    let two = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
    assert!(expand_embedding(&two, &p).is_err());
}

#[test]
fn attention_zero_branch_range_and_sign() {
    let net = build_network(&gate_config(), 4).unwrap();
    let mut p = cfe_tensors(&net);
    let delta = one_hot_embedding(0, 3).unwrap().reshape(&[1, 3]).unwrap();
    let dstar = expand_embedding(&delta, &p).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let desc =
        Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();

    // zero descriptor branch -> tanh(0) = 0 -> attention 0
    p.gate_desc_w = Tensor::zeros(&[4, 4]);
    p.gate_desc_b = Tensor::zeros(&[4]);
    let a = channel_attention(&dstar, &desc, &p).unwrap();
    assert!(a.data().iter().all(|&v| v == 0.0));

    // generic params: |a| < 1 and sign follows the tanh branch
    let p = cfe_tensors(&net);
    let a = channel_attention(&dstar, &desc, &p).unwrap();
    assert!(a.data().iter().all(|&v| v.abs() < 1.0));
    let ctx = desc
        .matmul(&p.gate_desc_w)
        .unwrap()
        .add(&p.gate_desc_b.reshape(&[1, 4]).unwrap())
        .unwrap()
        .tanh()
        .unwrap();
    for (&av, &tv) in a.data().iter().zip(ctx.data()) {
        assert_eq!(av == 0.0, tv == 0.0);
        if tv != 0.0 {
            assert_eq!(av.signum(), tv.signum(), "sigmoid branch is positive");
        }
    }
}

#[test]
fn apply_cfe_examples() {
    let f = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

    let zero = Tensor::zeros(&[1, 2]);
    assert_eq!(apply_cfe(&f, &zero).unwrap().data(), f.data());

    let half = Tensor::from_vec(&[1, 2], vec![-0.5, 0.0]).unwrap();
    let out = apply_cfe(&f, &half).unwrap();
    assert_eq!(out.data(), &[0.5, 1.0, 3.0, 4.0], "gated channel halved");

    let zf = Tensor::zeros(&[1, 2, 1, 2]);
    let any = Tensor::from_vec(&[1, 2], vec![0.9, -0.9]).unwrap();
    assert!(apply_cfe(&zf, &any).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn calibrate_endpoints() {
    let net_a = build_network(&gate_config(), 1).unwrap();
    let net_b = build_network(&gate_config(), 2).unwrap();
    let local = net_a.snapshot_group(ParamGroup::Cfe);
    let global = net_b.snapshot_group(ParamGroup::Cfe);

    let ones = PsiMatrix::ones_like(&local);
    let blended = psi_calibrate(&local, &global, &ones).unwrap();
    assert_eq!(blended, global, "psi = 1 adopts the global parameters");

    let zeros = PsiMatrix::from_entries(
        local
            .entries
            .iter()
            .map(|(n, d)| (n.clone(), vec![0.0; d.len()]))
            .collect(),
    );
    let blended = psi_calibrate(&local, &global, &zeros).unwrap();
    assert_eq!(blended, local, "psi = 0 keeps the local parameters");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn calibrate_stays_between_endpoints(psi_val in 0.0f32..=1.0) {
        let net_a = build_network(&gate_config(), 1).unwrap();
        let net_b = build_network(&gate_config(), 2).unwrap();
        let local = net_a.snapshot_group(ParamGroup::Cfe);
        let global = net_b.snapshot_group(ParamGroup::Cfe);
        let psi = PsiMatrix::from_entries(
            local.entries.iter().map(|(n, d)| (n.clone(), vec![psi_val; d.len()])).collect(),
        );
        let blended = psi_calibrate(&local, &global, &psi).unwrap();
        for ((_, b), ((_, l), (_, g))) in blended
            .entries
            .iter()
            .zip(local.entries.iter().zip(global.entries.iter()))
        {
            for ((&bv, &lv), &gv) in b.iter().zip(l).zip(g) {
                let (lo, hi) = if lv <= gv { (lv, gv) } else { (gv, lv) };
                prop_assert!(bv >= lo - 1e-6 && bv <= hi + 1e-6);
            }
        }
    }
}

#[test]
fn from_entries_clips_into_unit_interval() {
    let psi = PsiMatrix::from_entries(vec![("x".into(), vec![-0.5, 0.3, 1.7])]);
    assert!(psi.in_unit_interval());
    assert_eq!(psi.entries()[0].1, vec![0.0, 0.3, 1.0]);
}

fn psi_fixture() -> (
    ParameterSet,
    GroupSnapshot,
    GroupSnapshot,
    Tensor,
    Tensor,
    Tensor,
) {
    let cfg = gate_config();
    let net = build_network(&cfg, 21).unwrap();
    let other = build_network(&cfg, 22).unwrap();
    let local = other.snapshot_group(ParamGroup::Cfe);
    let global = net.snapshot_group(ParamGroup::Cfe);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Tensor::from_vec(
        &[2, 1, 8, 8],
        (0..128).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mut labels = vec![0.0f32; 2 * 2 * 64];
    for b in 0..2 {
        for p in 0..64 {
            let class = usize::from(rng.random_range(0.0..1.0) > 0.5);
            labels[(b * 2 + class) * 64 + p] = 1.0;
        }
    }
    let y = Tensor::from_vec(&[2, 2, 8, 8], labels).unwrap();
    let emb = one_hot_embedding(1, cfg.clients).unwrap();
    (net, local, global, batch, y, emb)
}

#[test]
fn psi_update_is_identity_when_local_equals_global() {
    let (net, _, global, batch, y, emb) = psi_fixture();
    let mut psi = PsiMatrix::from_entries(
        global
            .entries
            .iter()
            .map(|(n, d)| (n.clone(), vec![0.4; d.len()]))
            .collect(),
    );
    let before = psi.clone();
    let cfg = LossConfig::default();
    psi_update(
        &mut psi, &global, &global, &net, &batch, &y, &emb, 1, &cfg, 0.05, 2,
    )
    .unwrap();
    assert_eq!(psi, before, "zero difference means zero psi gradient");
}

#[test]
fn psi_update_clips_and_stays_in_unit_interval() {
    let (net, local, global, batch, y, emb) = psi_fixture();
    let mut psi = PsiMatrix::ones_like(&local);
    let cfg = LossConfig::default();
    // huge step rate forces clipping on both ends
    psi_update(
        &mut psi, &local, &global, &net, &batch, &y, &emb, 1, &cfg, 1e4, 3,
    )
    .unwrap();
    assert!(psi.in_unit_interval(), "min {} max {}", psi.min_value(), psi.max_value());
}

#[test]
fn psi_gradient_matches_finite_differences() {
    let (net, local, global, batch, y, emb) = psi_fixture();
    let loss_cfg = LossConfig::default();
    let psi = PsiMatrix::from_entries(
        local
            .entries
            .iter()
            .map(|(n, d)| (n.clone(), vec![0.5; d.len()]))
            .collect(),
    );

    let analytic = psi_gradient(&psi, &local, &global, &net, &batch, &y, &emb, 2, &loss_cfg)
        .unwrap();

    let loss_of = |psi: &PsiMatrix| -> f64 {
        let blended = psi_calibrate(&local, &global, psi).unwrap();
        let mut candidate = net.clone();
        candidate.install_group(ParamGroup::Cfe, &blended).unwrap();
        let out = candidate.forward(&batch, &emb).unwrap();
        let d = DirichletOutput::from_evidence(&out.evidence).unwrap();
        combined_loss(&out.seg_logits, &d, &y, 2, &loss_cfg)
            .unwrap()
            .total
            .item()
            .unwrap() as f64
    };

    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for (ei, (name, grads)) in analytic.iter().enumerate() {
        // probe a few elements of each block to keep the test quick
        for i in (0..grads.len()).step_by(grads.len().div_ceil(4).max(1)) {
            let mut plus = psi.clone();
            let mut minus = psi.clone();
            let mut pe: Vec<(String, Vec<f32>)> = plus.entries().to_vec();
            let mut me: Vec<(String, Vec<f32>)> = minus.entries().to_vec();
            pe[ei].1[i] += h;
            me[ei].1[i] -= h;
            plus = PsiMatrix::from_entries(pe);
            minus = PsiMatrix::from_entries(me);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let ad = grads[i] as f64;
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-2);
            if rel > worst {
                worst = rel;
            }
            assert!(rel < 2e-2, "{name}[{i}]: analytic {ad} vs fd {fd} (rel {rel})");
        }
    }
    assert!(worst.is_finite());
}
