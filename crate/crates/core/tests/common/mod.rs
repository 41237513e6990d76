//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ecg_icd::models::{Batch, ForwardMode, Network, Parameters};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(n²) pair counting with half credit for ties.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut num, mut np, mut nn) = (0.0, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            nn += 1;
            continue;
        }
        np += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (np > 0 && nn > 0).then(|| num / (np as f64 * nn as f64))
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    /// Worst relative error over the smooth entries checked.
    pub max_rel: f64,
    pub checked: usize,
    /// Entries skipped because the loss is not differentiable there.
    pub kinks: usize,
}

fn bce(z: &[f64], y: &[f64]) -> f64 {
    // Plain-form BCE, written independently of the library's stable form.
    let s: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / z.len() as f64
}

/// Relative error `|a−n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central finite differences on up to `per_tensor` randomly chosen entries
/// of every parameter tensor. An entry whose central difference at `eps`
/// disagrees with the one at `eps/10` sits within `eps` of a ReLU or
/// max-pool switch; such entries are counted as kinks, not compared.
pub fn fd_check(
    net: &Network,
    params: &Parameters,
    batch: &Batch,
    targets: &[f64],
    mode: ForwardMode,
    per_tensor: usize,
    eps: f64,
    floor: f64,
) -> Vec<TensorCheck> {
    let analytic = net.loss_and_gradient(params, batch, targets, mode).expect("gradient");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = Vec::new();
    let names: Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let picks: Vec<usize> = if len <= per_tensor { (0..len).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..len)).collect() };
        let mut max_rel: f64 = 0.0;
        let mut kinks = 0;
        for &i in &picks {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data[i] += delta;
                bce(&net.forward(&p, batch, mode).unwrap(), targets)
            };
            let central = |e: f64| (eval(e) - eval(-e)) / (2.0 * e);
            let numeric = central(eps);
            let a = analytic.grads.get(&name).unwrap().data[i];
            let r = rel_err(a, numeric, floor);
            if r >= 1e-4 && rel_err(numeric, central(eps / 10.0), floor) >= 1e-4 {
                kinks += 1;
                continue;
            }
            max_rel = max_rel.max(r);
        }
        out.push(TensorCheck { name, max_rel, checked: picks.len(), kinks });
    }
    out
}

/// Randomizes every tensor by adding N(0, scale²)-ish uniform noise.
pub fn jitter(params: &mut Parameters, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_batch(n: usize, leads: usize, len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch { n, leads, len, data: (0..n * leads * len).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

pub fn random_targets(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..2) as f64).collect()
}

/// Explicit diagonal state recursion `x_t = Λ̄ x_{t−1} + B̄ u_t`,
/// `y_t = Re(C x_t)`.
pub fn ssm_recurrence(lambda: &[Complex64], b: &[Complex64], c: &[Complex64], dt: f64, u: &[f64]) -> Vec<f64> {
    let n = lambda.len();
    let lb: Vec<Complex64> = lambda.iter().map(|&l| (l * dt).exp()).collect();
    let bb: Vec<Complex64> = (0..n).map(|k| (lb[k] - 1.0) / lambda[k] * b[k]).collect();
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    u.iter()
        .map(|&ut| {
            let mut y = 0.0;
            for k in 0..n {
                x[k] = lb[k] * x[k] + bb[k] * ut;
                y += (c[k] * x[k]).re;
            }
            y
        })
        .collect()
}

fn p<'a>(params: &'a Parameters, name: &str) -> &'a [f64] {
    &params.get(name).unwrap_or_else(|_| panic!("missing {name}")).data
}

fn ln_channels(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let h = x.len();
    let len = x[0].len();
    let mut y = vec![vec![0.0; len]; h];
    for t in 0..len {
        let mean: f64 = (0..h).map(|c| x[c][t]).sum::<f64>() / h as f64;
        let var: f64 = (0..h).map(|c| (x[c][t] - mean).powi(2)).sum::<f64>() / h as f64;
        for c in 0..h {
            y[c][t] = g[c] * (x[c][t] - mean) / (var + 1e-5).sqrt() + b[c];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line S4 network forward in eval mode using the state recursion
/// instead of the convolution kernel. `u` is `[leads][len]`.
pub fn s4_reference_logits(params: &Parameters, n_layers: usize, h: usize, n: usize, bidirectional: bool, u: &[Vec<f64>]) -> Vec<f64> {
    let len = u[0].len();
    let leads = u.len();
    let we = p(params, "encoder.weight");
    let be = p(params, "encoder.bias");
    let mut x: Vec<Vec<f64>> = (0..h)
        .map(|c| (0..len).map(|t| be[c] + (0..leads).map(|i| we[c * leads + i] * u[i][t]).sum::<f64>()).collect())
        .collect();
    let dirs: &[&str] = if bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
    for l in 0..n_layers {
        let z = ln_channels(&x, p(params, &format!("layers.{l}.norm.weight")), p(params, &format!("layers.{l}.norm.bias")));
        let mut cat: Vec<Vec<f64>> = Vec::new();
        for d in dirs {
            let g = |s: &str| p(params, &format!("layers.{l}.{d}.{s}"));
            for c in 0..h {
                let lam: Vec<Complex64> = (0..n).map(|k| Complex64::new(-g("log_neg_lambda_re")[c * n + k].exp(), g("lambda_im")[c * n + k])).collect();
                let bv: Vec<Complex64> = (0..n).map(|k| Complex64::new(g("b_re")[c * n + k], g("b_im")[c * n + k])).collect();
                let cv: Vec<Complex64> = (0..n).map(|k| Complex64::new(g("c_re")[c * n + k], g("c_im")[c * n + k])).collect();
                let dt = g("log_dt")[c].exp();
                let input: Vec<f64> = if *d == "fwd" { z[c].clone() } else { z[c].iter().rev().copied().collect() };
                let mut y = ssm_recurrence(&lam, &bv, &cv, dt, &input);
                if *d == "bwd" {
                    y.reverse();
                }
                for t in 0..len {
                    y[t] += g("d")[c] * z[c][t];
                }
                cat.push(y);
            }
        }
        let w = p(params, &format!("layers.{l}.proj.weight"));
        let b = p(params, &format!("layers.{l}.proj.bias"));
        let width = cat.len();
        for c in 0..h {
            for t in 0..len {
                x[c][t] += b[c] + (0..width).map(|j| w[c * width + j] * gelu(cat[j][t])).sum::<f64>();
            }
        }
    }
    let zf = ln_channels(&x, p(params, "norm.weight"), p(params, "norm.bias"));
    let pooled: Vec<f64> = zf.iter().map(|row| row.iter().sum::<f64>() / len as f64).collect();
    let wh = p(params, "head.weight");
    let bh = p(params, "head.bias");
    (0..bh.len()).map(|o| bh[o] + (0..h).map(|c| wh[o * h + c] * pooled[c]).sum::<f64>()).collect()
}

/// Raw ICD-10 strings as they appear in source tables: optional dot after
/// the category, mixed case, padding blanks and `X` placeholders.
pub fn raw_icd10() -> impl proptest::strategy::Strategy<Value = String> {
    use proptest::prelude::*;
    ("[A-Z][0-9][0-9A-Z]", "[0-9A-Z]{0,3}", "X{0,3}", any::<bool>(), any::<bool>(), " {0,1}").prop_map(
        |(cat, tail, xs, dot, lower, pad)| {
            let body = format!("{cat}{}{tail}{xs}", if dot { "." } else { "" });
            let body = if lower { body.to_lowercase() } else { body };
            format!("{pad}{body}{pad}")
        },
    )
}

/// Independent restatement of the normalization rule: drop dots and blanks,
/// uppercase, keep five characters, drop trailing `X`.
pub fn oracle_normalize(raw: &str) -> Option<String> {
    let mut s: String = raw.chars().filter(|c| *c != '.' && !c.is_whitespace()).collect::<String>().to_uppercase();
    s.truncate(5);
    let s = s.trim_end_matches('X').to_string();
    (s.len() >= 3).then_some(s)
}

/// Every letter-digit-alnum category `A00`–`Z9Z`.
pub fn all_categories() -> Vec<String> {
    let alnum: Vec<char> = ('0'..='9').chain('A'..='Z').collect();
    let mut out = Vec::new();
    for a in 'A'..='Z' {
        for b in '0'..='9' {
            for &c in &alnum {
                out.push(format!("{a}{b}{c}"));
            }
        }
    }
    out
}

/// Binormal scores: negatives N(0,1), positives N(mu,1). The analytic
/// AUROC is Φ(mu/√2).
pub fn binormal(n: usize, prevalence: f64, mu: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    use rand_distr::{Distribution, StandardNormal};
    let n_pos = (n as f64 * prevalence).round() as usize;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    let scores = labels
        .iter()
        .map(|&y| {
            let z: f64 = StandardNormal.sample(rng);
            z + if y == 1 { mu } else { 0.0 }
        })
        .collect();
    (scores, labels)
}

/// Random scores on a coarse grid so that ties are frequent, and labels
/// with both classes present.
pub fn tied_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=200);
    let levels = rng.gen_range(1..=12);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

pub mod icd_props {
    //! Properties of the ICD engine, shared by the property tests and the
    //! acceptance run.

    use std::collections::BTreeSet;

    use ecg_icd::icd::{
        chapter_of, expand_all, expand_ancestors, normalize, select_label_set, IcdCode, IcdError, IcdVersion, MappingTable, CHAPTER_RANGES,
    };
    use proptest::prelude::*;
    use proptest::test_runner::TestCaseError;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    pub fn norm10(raw: &str) -> Result<Vec<IcdCode>, IcdError> {
        normalize(raw, IcdVersion::Icd10, &MappingTable::default())
    }

    pub fn normalization(raw: &str) -> Result<(), TestCaseError> {
        let expected = super::oracle_normalize(raw);
        match norm10(raw) {
            Ok(v) => {
                prop_assert_eq!(v.len(), 1);
                let c = &v[0];
                prop_assert_eq!(Some(c.as_str().to_string()), expected);
                prop_assert!((3..=5).contains(&c.len()));
                prop_assert_eq!(norm10(c.as_str()).unwrap(), vec![c.clone()]);
            }
            Err(_) => prop_assert!(expected.is_none()),
        }
        Ok(())
    }

    pub fn ancestor_closure(raws: &[String]) -> Result<(), TestCaseError> {
        let codes: Vec<IcdCode> = raws.iter().filter_map(|r| norm10(r).ok()).flatten().collect();
        let closed = expand_all(&codes);
        prop_assert_eq!(expand_all(&closed), closed.clone());
        for c in &codes {
            let anc = expand_ancestors(c);
            prop_assert!(anc.contains(c));
            prop_assert!(anc.contains(&c.category()));
            prop_assert_eq!(anc.len(), c.len() - 2);
            for a in &anc {
                prop_assert!(c.as_str().starts_with(a.as_str()));
                prop_assert!(expand_ancestors(a).is_subset(&anc));
                prop_assert_eq!(chapter_of(a).unwrap(), chapter_of(c).unwrap());
            }
        }
        Ok(())
    }

    pub fn label_set_order(raws: &[String], threshold: usize, seed: u64) -> Result<(), TestCaseError> {
        let mut stream: Vec<IcdCode> = raws.iter().filter_map(|r| norm10(r).ok()).flatten().collect();
        let a = select_label_set(&stream, threshold);
        stream.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = select_label_set(&stream, threshold);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.codes(), b.codes());
                for c in a.codes() {
                    prop_assert!(stream.iter().filter(|s| *s == c).count() >= threshold);
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "order changed the outcome"),
        }
        Ok(())
    }

    /// Every `A00`–`Z9Z` category lies in exactly one chapter range.
    pub fn chapter_partition() -> Result<usize, String> {
        let mut chapters = BTreeSet::new();
        for c in super::all_categories() {
            let hits: Vec<_> = CHAPTER_RANGES.iter().filter(|r| r.first <= c.as_str() && c.as_str() <= r.last).collect();
            if hits.len() != 1 {
                return Err(format!("{c} matched {} ranges", hits.len()));
            }
            // Categories ending in the placeholder letter are not codes.
            if !c.ends_with('X') {
                let code = IcdCode::icd10(&c).map_err(|e| e.to_string())?;
                if chapter_of(&code).map_err(|e| e.to_string())? != hits[0].chapter {
                    return Err(format!("{c}: lookup disagrees with range table"));
                }
            }
            chapters.insert(hits[0].chapter);
        }
        Ok(chapters.len())
    }
}
