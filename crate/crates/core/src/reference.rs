//! Straight-line forward pass of the fusion model, generic over [`Real`].
//!
//! This path shares no code with the tape: it exists so the gradient checker
//! can evaluate the loss in double-double precision, and so the tape forward
//! can be cross-checked against an independent formulation.

use crate::data::{Modality, SequenceSample};
use crate::error::{Error, Result};
use crate::fusion::{AttentionPlacement, FusionMode, ModelParams};
use crate::graph::LOG_FLOOR;
use crate::precision::Real;

struct Mat<R> {
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Mat<R> {
    fn matvec(&self, x: &[R]) -> Vec<R> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |s, (&x, &y)| s + x * y)
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn softmax<R: Real>(v: &[R]) -> Vec<R> {
    let max = v.iter().copied().fold(v[0], R::max);
    let e: Vec<R> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = e.iter().fold(R::zero(), |s, &x| s + x);
    e.into_iter().map(|x| x / total).collect()
}

/// Parameter tensors in `named_tensors` order, one entry optionally shifted.
fn load<R: Real>(model: &ModelParams, shift: Option<(usize, usize, R)>) -> Vec<Mat<R>> {
    model
        .named_tensors()
        .into_iter()
        .enumerate()
        .map(|(i, (_, t))| {
            let mut data: Vec<R> = t.data().iter().map(|&v| R::from_f64(v)).collect();
            if let Some((ti, j, delta)) = shift {
                if ti == i {
                    data[j] = data[j] + delta;
                }
            }
            let cols = if t.rank() == 2 { t.shape()[1] } else { t.len() };
            Mat { cols, data }
        })
        .collect()
}

fn lstm<R: Real>(p: &[Mat<R>], xs: &[Vec<R>]) -> Vec<Vec<R>> {
    let (w, u, b) = (&p[0], &p[1], &p[2]);
    let hd = u.cols;
    let mut h = vec![R::zero(); hd];
    let mut c = vec![R::zero(); hd];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let z = add(&add(&w.matvec(x), &u.matvec(&h)), &b.data);
        for k in 0..hd {
            let i = z[k].sigmoid();
            let f = z[hd + k].sigmoid();
            let o = z[2 * hd + k].sigmoid();
            let g = z[3 * hd + k].tanh();
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
        Modality::Visual => 2,
    }
}

/// Per-utterance class probabilities with parameter `(tensor, index)`
/// shifted by `delta`.
pub fn probabilities<R: Real>(
    model: &ModelParams,
    sample: &SequenceSample,
    shift: Option<(usize, usize, R)>,
) -> Result<Vec<Vec<R>>> {
    model.check()?;
    let cfg = &model.config;
    if sample.is_empty() {
        return Err(Error::contract("forward on an empty sequence"));
    }
    if let Some(bad) = sample
        .utterances
        .iter()
        .flat_map(|u| Modality::ALL.map(|m| u.features(m).len()))
        .find(|&n| n != cfg.input_dim)
    {
        return Err(Error::dim("reference features", &[cfg.input_dim], &[bad]));
    }
    let p = load(model, shift);
    let heads = cfg.heads;

    let hidden: Vec<Vec<Vec<R>>> = cfg
        .order
        .iter()
        .map(|&m| {
            let xs: Vec<Vec<R>> = sample
                .utterances
                .iter()
                .map(|u| u.features(m).iter().map(|&v| R::from_f64(v)).collect())
                .collect();
            let k = modality_slot(m);
            lstm(&p[3 * k..3 * k + 3], &xs)
        })
        .collect();

    let fused: Vec<Vec<R>> = (0..sample.len())
        .map(|t| {
            let (a, b, c) = (&hidden[0][t], &hidden[1][t], &hidden[2][t]);
            match cfg.mode {
                FusionMode::ScalarGate => {
                    let s = dot(a, b);
                    c.iter().map(|&x| s * x).collect()
                }
                FusionMode::Hadamard => a
                    .iter()
                    .zip(b)
                    .zip(c)
                    .map(|((&x, &y), &z)| x * y * z)
                    .collect(),
                FusionMode::Concat => a.iter().chain(b).chain(c).copied().collect(),
            }
        })
        .collect();
    let second = lstm(&p[9..12], &fused);

    let features = match cfg.attention {
        AttentionPlacement::None => second,
        AttentionPlacement::AfterFused => {
            let d_k = cfg.d_model / heads;
            let scale = R::one() / R::from_f64(d_k as f64).sqrt();
            let mut concat = vec![Vec::with_capacity(cfg.d_model); second.len()];
            for h in 0..heads {
                let (wq, wk, wv) = (&p[12 + 3 * h], &p[13 + 3 * h], &p[14 + 3 * h]);
                let q: Vec<Vec<R>> = second.iter().map(|x| wq.matvec(x)).collect();
                let k: Vec<Vec<R>> = second.iter().map(|x| wk.matvec(x)).collect();
                let v: Vec<Vec<R>> = second.iter().map(|x| wv.matvec(x)).collect();
                for (t, qt) in q.iter().enumerate() {
                    let scores: Vec<R> = k.iter().map(|ks| dot(qt, ks) * scale).collect();
                    let a = softmax(&scores);
                    for j in 0..d_k {
                        let acc = a.iter().zip(&v).fold(R::zero(), |acc, (&w, vs)| acc + w * vs[j]);
                        concat[t].push(acc);
                    }
                }
            }
            let wo = &p[12 + 3 * heads];
            concat.iter().map(|x| wo.matvec(x)).collect()
        }
    };

    let (hw, hb) = (&p[13 + 3 * heads], &p[14 + 3 * heads]);
    Ok(features
        .iter()
        .map(|f| softmax(&add(&hw.matvec(f), &hb.data)))
        .collect())
}

/// Mean per-utterance cross-entropy, computed entirely in `R`.
pub fn loss<R: Real>(
    model: &ModelParams,
    sample: &SequenceSample,
    shift: Option<(usize, usize, R)>,
) -> Result<R> {
    let labels = sample.classes()?;
    let probs = probabilities(model, sample, shift)?;
    let floor = R::from_f64(LOG_FLOOR);
    let total = probs
        .iter()
        .zip(&labels)
        .fold(R::zero(), |s, (p, &l)| s - p[l].max(floor).ln());
    Ok(total / R::from_f64(labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig, SynthMode};
    use crate::fusion::FusionConfig;
    use crate::precision::DoubleDouble;

    #[test]
    fn matches_tape_forward() {
        let corpus = synth_generate(&SynthConfig {
            mode: SynthMode::Easy,
            n_videos: 1,
            utterances_per_video: 4,
            feature_dim: 5,
            noise_sigma: 0.3,
            seed: 2,
        })
        .unwrap();
        let sample = &corpus.sequences[0];
        for mode in FusionMode::ALL {
            for attention in [AttentionPlacement::AfterFused, AttentionPlacement::None] {
                let cfg = FusionConfig {
                    mode,
                    attention,
                    d_model: 6,
                    heads: 3,
                    input_dim: 5,
                    ..FusionConfig::default()
                };
                let m = ModelParams::init_probe(cfg, 8, 1.0).unwrap();
                let tape = m.forward(sample).unwrap();
                let r64 = probabilities::<f64>(&m, sample, None).unwrap();
                let rdd = probabilities::<DoubleDouble>(&m, sample, None).unwrap();
                for ((a, b), c) in tape.iter().flatten().zip(r64.iter().flatten()).zip(rdd.iter().flatten()) {
                    assert!((a - b).abs() < 1e-13, "{mode} {a} {b}");
                    assert!((a - c.to_f64()).abs() < 1e-13, "{mode} {a}");
                }
            }
        }
    }
}
