mod common;

use common::random_batch;
use ecg_icd::dataset::ScenarioSpec;
use ecg_icd::models::{Architecture, Family, ForwardMode, ModelConfig, Network, Preset, S4Config};
use ecg_icd::synth::{planted_dataset, PlantedConfig, PLANTED_CODES};
use ecg_icd::trainer::{adamw_step, crop_start, train, AdamState, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_model(n_labels: usize, input_len: usize) -> ModelConfig {
    ModelConfig {
        in_leads: 12,
        n_labels,
        input_len,
        dropout: 0.1,
        seed: 3,
        arch: Architecture::S4(S4Config { n_layers: 1, d_model: 8, d_state: 4, bidirectional: true, dt_min: 1e-3, dt_max: 1e-1 }),
    }
}

fn small_data() -> ecg_icd::dataset::LabeledDataset {
    planted_dataset(&PlantedConfig { n_records: 60, len: 400, ..Default::default() }).unwrap()
}

fn all2all() -> ScenarioSpec {
    "T(ALL2ALL)-E(ALL2ALL)".parse().unwrap()
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let ds = small_data();
    let model = small_model(PLANTED_CODES.len(), 100);
    let cfg = TrainConfig { lr: 0.0, epochs: 3, batch_size: 8, crop_len: 100, ..Default::default() };
    let out = train(&model, &cfg, &ds, &all2all(), |_| {}).unwrap();
    let init = Network::new(&model).unwrap().init();
    assert_eq!(out.checkpoint.params, init);
    // Every epoch scores the same, so the first one is selected.
    assert_eq!(out.checkpoint.epoch, 1);
    let scores: Vec<_> = out.log.iter().map(|e| e.val_macro_auroc).collect();
    assert!(scores.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_only_the_head_lowers_a_fixed_batch_loss() {
    let mut cfg = ModelConfig::preset(Family::S4, Preset::Tiny, 3, 4);
    cfg.input_len = 32;
    cfg.dropout = 0.0;
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init();
    let batch = random_batch(6, 3, 32, 2);
    let targets = common::random_targets(24, 4);
    let trunk: Vec<String> = params.names().iter().filter(|n| !n.starts_with("head.")).map(|n| n.to_string()).collect();
    let tc = TrainConfig { lr: 1e-3, frozen: trunk.clone(), ..Default::default() };
    let mut opt = AdamState::new(&params);
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        let out = net.loss_and_gradient(&params, &batch, &targets, ForwardMode::Eval).unwrap();
        assert!(out.loss <= last, "{} > {last}", out.loss);
        last = out.loss;
        let before = params.clone();
        adamw_step(&mut params, &out.grads, &mut opt, &tc).unwrap();
        for n in &trunk {
            assert_eq!(params.get(n).unwrap(), before.get(n).unwrap());
        }
    }
}

#[test]
fn crop_starts_are_uniform() {
    // 751 admissible offsets for 250 of 1000 samples.
    let (len, crop, draws) = (1000, 250, 751 * 200);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut hist = vec![0f64; len - crop + 1];
    for _ in 0..draws {
        hist[crop_start(len, crop, &mut rng).unwrap()] += 1.0;
    }
    let expected = draws as f64 / hist.len() as f64;
    let chi2: f64 = hist.iter().map(|o| (o - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((hist.len() - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn reruns_are_bit_identical_across_thread_counts() {
    let ds = small_data();
    let model = small_model(PLANTED_CODES.len(), 100);
    let cfg = TrainConfig { lr: 5e-3, epochs: 2, batch_size: 8, crop_len: 100, seed: 9, ..Default::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&model, &cfg, &ds, &all2all(), |_| {}).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let losses = |o: &ecg_icd::trainer::TrainOutcome| o.log.iter().map(|e| (e.train_loss, e.val_macro_auroc)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    let c = train(&model, &TrainConfig { seed: 10, ..cfg.clone() }, &ds, &all2all(), |_| {}).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn configuration_mismatches_are_rejected() {
    let ds = small_data();
    let cfg = TrainConfig { epochs: 1, crop_len: 100, ..Default::default() };
    assert!(matches!(train(&small_model(3, 100), &cfg, &ds, &all2all(), |_| {}), Err(TrainError::Model(_))));
    assert!(matches!(train(&small_model(8, 50), &cfg, &ds, &all2all(), |_| {}), Err(TrainError::InvalidConfig(_))));
    let too_long = TrainConfig { crop_len: 500, ..cfg.clone() };
    assert!(train(&small_model(8, 500), &too_long, &ds, &all2all(), |_| {}).is_err());
    // Planted records are ED-only, so a hospital scenario has no training rows.
    let hosp: ScenarioSpec = "T(HOSP2ALL)-E(HOSP2ALL)".parse().unwrap();
    assert!(matches!(train(&small_model(8, 100), &cfg, &ds, &hosp, |_| {}), Err(TrainError::EmptySplit(_))));
    assert!(matches!(TrainConfig { batch_size: 0, ..cfg }.validate(), Err(TrainError::InvalidConfig(_))));
}
