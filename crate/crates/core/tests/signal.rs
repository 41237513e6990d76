use std::f64::consts::PI;

use ecg_icd::signal::{
    clip, fill_missing, preprocess, read_binary, read_csv_payload, resample, write_binary, write_csv_payload, FillReport, RawEcg,
    CLIP_MV, TARGET_FS,
};
use proptest::prelude::*;

fn one_lead(x: Vec<f64>, fs: f64) -> RawEcg {
    RawEcg::new(vec!["I".into()], vec![x], fs).unwrap()
}

fn sinusoid(freq: f64, fs: f64, seconds: f64) -> Vec<f64> {
    let n = (fs * seconds).round() as usize;
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

fn max_error_after_resample(fs_in: f64) -> f64 {
    let sig = one_lead(sinusoid(5.0, fs_in, 10.0), fs_in);
    let out = resample(&sig, TARGET_FS).unwrap();
    assert_eq!(out.len(), 1000);
    out.samples[0]
        .iter()
        .enumerate()
        .map(|(k, v)| (v - (2.0 * PI * 5.0 * k as f64 / TARGET_FS).sin()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn sinusoid_survives_downsampling() {
    // 500 Hz lands on the output grid; 360 Hz exercises interpolation, whose
    // worst case for a unit 5 Hz tone is (2π·5/360)²/8 ≈ 3.8e-3.
    assert!(max_error_after_resample(500.0) < 1e-12);
    let e = max_error_after_resample(360.0);
    assert!(e < 0.01 && e < (2.0 * PI * 5.0 / 360.0).powi(2) / 8.0 + 1e-12, "{e}");
}

#[test]
fn fill_hand_cases() {
    let nan = f64::NAN;
    let (out, rep) = fill_missing(&one_lead(vec![nan, 1.0, nan, nan, 4.0, nan], 100.0));
    assert_eq!(out.samples[0], vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0]);
    assert_eq!(rep, FillReport { interpolated: 2, zero_filled: 2, all_missing_leads: 0 });

    let (out, rep) = fill_missing(&one_lead(vec![-1.0, nan, 0.5], 100.0));
    assert_eq!(out.samples[0], vec![-1.0, -0.25, 0.5]);
    assert_eq!(rep.interpolated, 1);

    let (out, rep) = fill_missing(&one_lead(vec![nan; 4], 100.0));
    assert_eq!(out.samples[0], vec![0.0; 4]);
    assert_eq!(rep, FillReport { interpolated: 0, zero_filled: 4, all_missing_leads: 1 });
}

#[test]
fn clip_hand_cases() {
    let out = clip(&one_lead(vec![-5.0, -3.0, 2.9, 3.0, 3.1, 0.0], 100.0), CLIP_MV);
    assert_eq!(out.samples[0], vec![-3.0, -3.0, 2.9, 3.0, 3.0, 0.0]);
}

#[test]
fn preprocess_orders_fill_resample_clip() {
    // 200 Hz, one gap at t=1 interpolated to 2.0 before decimation keeps
    // every second sample; 10.0 is clipped afterwards.
    let raw = one_lead(vec![1.0, f64::NAN, 3.0, 10.0, -0.5, 0.25], 200.0);
    let (clean, rep) = preprocess(&raw).unwrap();
    assert_eq!(clean.samples[0], vec![1.0, 3.0, -0.5]);
    assert_eq!(rep.interpolated, 1);
    let raw = one_lead(vec![1.0, f64::NAN, 3.0, 10.0, -0.5, 0.25], 100.0);
    let (clean, _) = preprocess(&raw).unwrap();
    assert_eq!(clean.samples[0], vec![1.0, 2.0, 3.0, 3.0, -0.5, 0.25]);
}

fn clean_signal() -> impl Strategy<Value = RawEcg> {
    (1usize..4, 1usize..60).prop_flat_map(|(leads, len)| {
        proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, len), leads)
            .prop_map(|s| RawEcg::new(vec![], s, TARGET_FS).unwrap())
    })
}

proptest! {
    #[test]
    fn preprocess_is_idempotent(sig in clean_signal()) {
        let (once, _) = preprocess(&sig).unwrap();
        let (twice, rep) = preprocess(&once.clone().into_raw()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(rep, FillReport::default());
        prop_assert!(once.samples.iter().flatten().all(|v| v.abs() <= CLIP_MV));
    }

    #[test]
    fn resample_keeps_length_and_range(sig in clean_signal(), fs_in in prop::sample::select(vec![250.0, 360.0, 500.0, 1000.0])) {
        let raw = RawEcg::new(vec![], sig.samples.clone(), fs_in).unwrap();
        let out = resample(&raw, TARGET_FS).unwrap();
        prop_assert_eq!(out.len(), (raw.len() as f64 * TARGET_FS / fs_in).round() as usize);
        for (a, b) in raw.samples.iter().zip(&out.samples) {
            let (lo, hi) = a.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
            prop_assert!(b.iter().all(|v| *v >= lo && *v <= hi));
        }
    }

    #[test]
    fn binary_round_trip_is_f32_exact(sig in clean_signal()) {
        let f32_sig = RawEcg::new(vec![], sig.samples.iter().map(|l| l.iter().map(|v| *v as f32 as f64).collect()).collect(), TARGET_FS).unwrap();
        let mut buf = Vec::new();
        write_binary(&mut buf, &f32_sig).unwrap();
        prop_assert_eq!(buf.len(), 16 + 4 * sig.n_leads() * sig.len());
        let back = read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(back.samples, f32_sig.samples);
        prop_assert_eq!(back.fs, TARGET_FS);
    }

    #[test]
    fn csv_round_trip(sig in clean_signal()) {
        let mut buf = Vec::new();
        write_csv_payload(&mut buf, &sig).unwrap();
        let back = read_csv_payload(buf.as_slice(), TARGET_FS).unwrap();
        prop_assert_eq!(back, sig);
    }
}
