#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqfusion::data::{synth_generate, Corpus, SynthConfig, SynthMode, NUM_CLASSES};

/// Headline and per-class metrics computed by direct TP/FP/FN counting.
#[derive(Debug)]
pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(precision, recall, f1)` per class.
    pub per_class: Vec<(f64, f64, f64)>,
}

pub fn brute_force_metrics(preds: &[usize], labels: &[usize]) -> BruteMetrics {
    let n = preds.len();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut per_class = Vec::new();
    let (mut p_sum, mut p_n, mut r_sum, mut f_sum, mut r_n) = (0.0, 0, 0.0, 0.0, 0);
    for c in 0..NUM_CLASSES {
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for i in 0..n {
            match (preds[i] == c, labels[i] == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        per_class.push((p, r, f));
        if tp + fp + fneg > 0 {
            p_sum += p;
            p_n += 1;
        }
        if tp + fneg > 0 {
            r_sum += r;
            f_sum += f;
            r_n += 1;
        }
    }
    let avg = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    BruteMetrics {
        accuracy: correct as f64 / n as f64,
        precision: avg(p_sum, p_n),
        recall: avg(r_sum, r_n),
        f1: avg(f_sum, r_n),
        per_class,
    }
}

/// Random `(preds, labels)` of length 1..=200, sometimes over a class subset.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.random_range(1..=200);
    let k = rng.random_range(1..=NUM_CLASSES);
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let preds = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    (preds, labels)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn synth(mode: SynthMode, videos: usize, utterances: usize, dim: usize, noise: f64, seed: u64) -> Corpus {
    synth_generate(&SynthConfig {
        mode,
        n_videos: videos,
        utterances_per_video: utterances,
        feature_dim: dim,
        noise_sigma: noise,
        seed,
    })
    .unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
