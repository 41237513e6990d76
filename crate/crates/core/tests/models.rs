mod common;

use common::*;
use ecg_icd::models::{
    loss, ops, s4_kernel, Architecture, Batch, DiagonalSsm, Family, ForwardMode, ModelCheckpoint, ModelConfig, Network, Parameters, Preset,
    S4Config, Tensor,
};
use ecg_icd::trainer::AdamState;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_s4(h: usize, n: usize, layers: usize, labels: usize, bidirectional: bool) -> ModelConfig {
    ModelConfig {
        in_leads: 3,
        n_labels: labels,
        input_len: 16,
        dropout: 0.0,
        seed: 5,
        arch: Architecture::S4(S4Config { n_layers: layers, d_model: h, d_state: n, bidirectional, dt_min: 1e-3, dt_max: 1e-1 }),
    }
}

fn random_ssm(n: usize, rng: &mut ChaCha8Rng) -> DiagonalSsm {
    DiagonalSsm {
        lambda: (0..n).map(|k| Complex64::new(-rng.gen_range(0.05..1.0), std::f64::consts::PI * k as f64 + rng.gen_range(-0.5..0.5))).collect(),
        b: (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        c: (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        dt: rng.gen_range(0.01..0.5),
    }
}

#[test]
fn kernel_convolution_matches_state_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &len in &[1usize, 16, 64, 256] {
        for _ in 0..5 {
            let ssm = random_ssm(4, &mut rng);
            let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = s4_kernel(&ssm, len);
            let conv: Vec<f64> = (0..len).map(|t| (0..=t).map(|j| k[j] * u[t - j]).sum()).collect();
            let rec = ssm_recurrence(&ssm.lambda, &ssm.b, &ssm.c, ssm.dt, &u);
            for (a, b) in conv.iter().zip(&rec) {
                assert!((a - b).abs() < 1e-10, "L={len}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn s4_forward_matches_reference_implementation() {
    for &bidir in &[true, false] {
        let cfg = tiny_s4(4, 2, 2, 3, bidir);
        let net = Network::new(&cfg).unwrap();
        let mut params = net.init();
        jitter(&mut params, 0.3, 17);
        let batch = random_batch(3, 3, 16, 8);
        let logits = net.forward(&params, &batch, ForwardMode::Eval).unwrap();
        for i in 0..3 {
            let u: Vec<Vec<f64>> = (0..3).map(|l| batch.sample(i)[l * 16..(l + 1) * 16].to_vec()).collect();
            let r = s4_reference_logits(&params, 2, 4, 2, bidir, &u);
            for j in 0..3 {
                assert!((logits[i * 3 + j] - r[j]).abs() < 1e-10, "{} vs {}", logits[i * 3 + j], r[j]);
            }
        }
    }
}

#[test]
fn s4_gradient_matches_finite_differences() {
    let cfg = tiny_s4(4, 2, 2, 3, true);
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    jitter(&mut params, 0.3, 21);
    let batch = random_batch(2, 3, 16, 4);
    let targets = random_targets(6, 5);
    for c in fd_check(&net, &params, &batch, &targets, ForwardMode::Eval, 8, 1e-5, 1e-6) {
        assert!(c.max_rel < 1e-4, "{}: {:e}", c.name, c.max_rel);
        assert_eq!(c.kinks, 0, "S4 is smooth: {}", c.name);
    }
}

#[test]
fn xresnet_gradient_matches_finite_differences() {
    let mut cfg = ModelConfig::preset(Family::XResNet1d, Preset::Tiny, 2, 3);
    cfg.dropout = 0.0;
    cfg.input_len = 64;
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    jitter(&mut params, 0.1, 2);
    let batch = random_batch(3, 2, 64, 6);
    let targets = random_targets(9, 7);
    let mode = ForwardMode::Train { dropout_seed: 0 };
    let checks = fd_check(&net, &params, &batch, &targets, mode, 3, 1e-5, 1e-6);
    let worst = checks.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    assert!(worst.max_rel < 1e-4, "{}: {:e}", worst.name, worst.max_rel);
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    let kinks: usize = checks.iter().map(|c| c.kinks).sum();
    assert!(kinks * 20 <= checked, "{kinks} of {checked} entries at kinks");
}

#[test]
fn zero_head_bias_gradient_is_sigmoid_minus_mean_target() {
    let cfg = tiny_s4(4, 2, 1, 1, true);
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    params.get_mut("head.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    params.get_mut("head.bias").unwrap().data[0] = 0.3;
    let batch = random_batch(4, 3, 16, 1);
    let targets = [1.0, 0.0, 1.0, 0.0];
    let out = net.loss_and_gradient(&params, &batch, &targets, ForwardMode::Eval).unwrap();
    let expected = ops::sigmoid(0.3) - 0.5;
    assert!((out.grads.get("head.bias").unwrap().data[0] - expected).abs() < 1e-15);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let cfg = tiny_s4(4, 2, 1, 2, false);
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    params.insert("unused", Tensor::filled(&[3], 1.0));
    let g = net.loss_and_gradient(&params, &random_batch(2, 3, 16, 2), &[1.0, 0.0, 0.0, 1.0], ForwardMode::Eval).unwrap();
    assert_eq!(g.grads.get("unused").unwrap().data, vec![0.0; 3]);
}

#[test]
fn zero_input_zero_head_gives_bias() {
    for family in [Family::S4, Family::XResNet1d] {
        let mut cfg = ModelConfig::preset(family, Preset::Tiny, 2, 3);
        cfg.input_len = 32;
        let net = Network::new(&cfg).unwrap();
        let mut params = net.init();
        params.get_mut("head.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        params.get_mut("head.bias").unwrap().data = vec![0.5, -1.0, 2.0];
        let batch = Batch { n: 2, leads: 2, len: 32, data: vec![0.0; 128] };
        let z = net.forward(&params, &batch, ForwardMode::Eval).unwrap();
        assert_eq!(z, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }
}

#[test]
fn eval_forward_is_batch_independent() {
    for family in [Family::S4, Family::XResNet1d] {
        let mut cfg = ModelConfig::preset(family, Preset::Tiny, 2, 2);
        cfg.input_len = 32;
        let net = Network::new(&cfg).unwrap();
        let params = net.init();
        let batch = random_batch(8, 2, 32, 9);
        let all = net.forward(&params, &batch, ForwardMode::Eval).unwrap();
        let one = net.forward(&params, &batch.select(&[5]), ForwardMode::Eval).unwrap();
        assert_eq!(&all[10..12], one.as_slice());
    }
}

#[test]
fn loss_examples() {
    assert!((loss(&[0.0; 6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    let v = loss(&[20.0], &[1.0]);
    assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-24);
    let z = [0.3, -2.0, 5.0, 1.5];
    let y = [1.0, 0.0, 0.0, 1.0];
    let zp = [5.0, 1.5, 0.3, -2.0];
    let yp = [0.0, 1.0, 1.0, 0.0];
    assert!((loss(&z, &y) - loss(&zp, &yp)).abs() < 1e-15);
}

#[test]
fn init_is_deterministic() {
    for family in [Family::S4, Family::XResNet1d] {
        let cfg = ModelConfig::preset(family, Preset::Tiny, 12, 8);
        let a = Network::new(&cfg).unwrap().init();
        let b = Network::new(&cfg).unwrap().init();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}

#[test]
fn presets_keep_topology() {
    // Layer indices collapsed, presets share one tensor-name pattern.
    let pattern = |p: &Parameters| -> std::collections::BTreeSet<String> {
        p.names().iter().map(|n| n.split('.').map(|s| if s.parse::<usize>().is_ok() { "#" } else { s }).collect::<Vec<_>>().join(".")).collect()
    };
    for family in [Family::S4, Family::XResNet1d] {
        let tiny = Network::new(&ModelConfig::preset(family, Preset::Tiny, 12, 4)).unwrap().init();
        let desk = Network::new(&ModelConfig::preset(family, Preset::Desk, 12, 4)).unwrap().init();
        assert_eq!(pattern(&tiny), pattern(&desk));
        assert!(tiny.n_params() < desk.n_params());
    }
    let paper = ModelConfig::preset(Family::S4, Preset::Paper, 12, 1076);
    match &paper.arch {
        Architecture::S4(c) => assert_eq!((c.n_layers, c.d_model, c.d_state, c.bidirectional), (4, 512, 8, true)),
        _ => unreachable!(),
    }
    paper.validate().unwrap();
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::preset(Family::XResNet1d, Preset::Tiny, 2, 3);
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    jitter(&mut params, 1e-3, 4);
    let mut opt = AdamState::new(&params);
    opt.t = 7;
    jitter(&mut opt.m, 0.5, 1);
    let ck = ModelCheckpoint {
        config: cfg,
        params,
        optimizer: Some(opt),
        epoch: 3,
        val_macro_auroc: Some(0.123_456_789_012_345_6),
        label_codes: vec!["I48".into(), "I481".into(), "R07".into()],
        label_fingerprint: "abc".into(),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    assert!(ModelCheckpoint::from_bytes(&corrupt).is_err());
    assert!(ModelCheckpoint::from_bytes(b"NOTACKPT........").is_err());
    assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
}

#[test]
fn config_serializes_with_family_tag() {
    let cfg = ModelConfig::preset(Family::S4, Preset::Tiny, 12, 8);
    let json = serde_json::to_string(&cfg).unwrap();
    assert!(json.contains("\"family\":\"S4\""));
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
}
