mod common;

use std::collections::BTreeSet;
use std::io::Cursor;

use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use seqfusion::data::{
    bin_label, read_corpus, split, write_corpus, Corpus, Modality, Provenance, SequenceSample, SynthMode,
    UtteranceRecord,
};
use seqfusion::Error;

use common::synth;

fn fixed(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0xda7a),
        ..ProptestConfig::default()
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    (1usize..5, 1usize..6).prop_flat_map(|(dim, videos)| {
        let sequence = (1usize..5).prop_flat_map(move |t| {
            prop::collection::vec(
                (
                    -3.0..3.0f64,
                    prop::collection::vec(finite(), dim),
                    prop::collection::vec(finite(), dim),
                    prop::collection::vec(finite(), dim),
                ),
                t,
            )
        });
        prop::collection::vec(sequence, videos).prop_map(move |seqs| Corpus {
            feature_dim: dim,
            sequences: seqs
                .into_iter()
                .enumerate()
                .map(|(v, utts)| {
                    let video_id = format!("vid \"{v}\" é");
                    SequenceSample {
                        utterances: utts
                            .into_iter()
                            .enumerate()
                            .map(|(i, (label, text, audio, visual))| UtteranceRecord {
                                video_id: video_id.clone(),
                                utterance_index: i,
                                label,
                                text,
                                audio,
                                visual,
                            })
                            .collect(),
                        video_id,
                    }
                })
                .collect(),
            provenance: Provenance::Loaded,
        })
    })
}

fn write(c: &Corpus) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus(c, &mut buf).unwrap();
    buf
}

fn read(text: &str) -> seqfusion::Result<Corpus> {
    read_corpus(Cursor::new(text.as_bytes()))
}

fn bits(c: &Corpus) -> Vec<u64> {
    c.records()
        .flat_map(|r| {
            std::iter::once(r.label)
                .chain(r.text.iter().copied())
                .chain(r.audio.iter().copied())
                .chain(r.visual.iter().copied())
        })
        .map(f64::to_bits)
        .collect()
}

proptest! {
    #![proptest_config(fixed(128))]

    #[test]
    fn write_then_load_is_identity(c in corpus_strategy()) {
        let back = read_corpus(Cursor::new(write(&c))).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn bin_label_is_monotone(a in -10.0..10.0f64, b in -10.0..10.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bin_label(lo).unwrap() <= bin_label(hi).unwrap());
    }
}

#[test]
fn loading_reorders_and_groups_records() {
    let line = |v: &str, i: usize, l: f64| {
        format!(r#"{{"video_id":"{v}","utterance_index":{i},"label":{l},"text":[1.0],"audio":[2.0],"visual":[3.0]}}"#)
    };
    let text = [line("b", 1, 0.0), line("a", 0, 9.0), line("b", 0, -1.2), String::new()].join("\n");
    let c = read(&text).unwrap();
    assert_eq!(c.feature_dim, 1);
    assert_eq!(c.sequences.iter().map(|s| s.video_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    assert_eq!(c.sequences[0].utterances[0].label, -1.2);
    assert_eq!(c.sequences[1].utterances[0].label, 3.0);
}

#[test]
fn loader_errors_name_the_problem() {
    let ok = r#"{"video_id":"v","utterance_index":0,"label":0.5,"text":[1,2],"audio":[1,2],"visual":[1,2]}"#;
    assert_eq!(read("").unwrap().len(), 0);

    let short = r#"{"video_id":"v","utterance_index":1,"label":0.5,"text":[1],"audio":[1,2],"visual":[1,2]}"#;
    match read(&format!("{ok}\n{short}")) {
        Err(Error::RecordDimension { line: 2, field: "text", expected: 2, found: 1 }) => {}
        other => panic!("{other:?}"),
    }

    match read(&format!("{ok}\n{{not json")) {
        Err(Error::Parse { line: 2, .. }) => {}
        other => panic!("{other:?}"),
    }

    let extra = r#"{"video_id":"v","utterance_index":0,"label":0.5,"text":[1],"audio":[1],"visual":[1],"x":1}"#;
    assert!(matches!(read(extra), Err(Error::Parse { line: 1, .. })));

    assert!(matches!(read(&format!("{ok}\n{ok}")), Err(Error::Integrity { line: 2, .. })));

    let gap = ok.replace("\"utterance_index\":0", "\"utterance_index\":2");
    assert!(matches!(read(&gap), Err(Error::Integrity { .. })));
}

#[test]
fn split_is_a_seeded_partition_on_random_corpora() {
    for k in 0..100u64 {
        let videos = 2 + (k as usize * 7) % 40;
        let c = synth(SynthMode::Easy, videos, 1 + (k as usize % 3), 3, 0.1, k);
        let (tr, te) = split(&c, 0.8, k).unwrap();
        let ids = |c: &Corpus| c.sequences.iter().map(|s| s.video_id.clone()).collect::<BTreeSet<_>>();
        let (a, b, all) = (ids(&tr), ids(&te), ids(&c));
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), all);
        assert_eq!(tr.len(), ((0.8 * videos as f64).round() as usize).clamp(1, videos - 1));
        assert_eq!(split(&c, 0.8, k).unwrap(), (tr, te));
    }
    let c = synth(SynthMode::Easy, 10, 1, 3, 0.1, 0);
    let (tr, te) = split(&c, 0.8, 1).unwrap();
    assert_eq!((tr.len(), te.len()), (8, 2));
    assert_ne!(split(&c, 0.8, 1).unwrap().0, split(&c, 0.8, 2).unwrap().0);
    assert!(split(&synth(SynthMode::Easy, 1, 1, 3, 0.1, 0), 0.8, 0).is_err());
}

fn next(m: Modality) -> Modality {
    match m {
        Modality::Text => Modality::Audio,
        Modality::Audio => Modality::Visual,
        Modality::Visual => Modality::Text,
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn parity_features_are_uncorrelated_with_the_label() {
    let c = synth(SynthMode::Parity, 2500, 4, 6, 0.1, 3);
    assert_eq!(c.utterance_count(), 10_000);
    let labels: Vec<f64> = c.records().map(|r| r.label).collect();
    assert!(labels.iter().all(|&l| l == 3.0 || l == -3.0));
    for m in Modality::ALL {
        for j in 0..6 {
            let f: Vec<f64> = c.records().map(|r| r.features(m)[j]).collect();
            let r = pearson(&f, &labels);
            assert!(r.abs() < 0.1, "{m}[{j}]: {r}");
        }
        // Pairwise products carry no signal either.
        let f: Vec<f64> = c.records().map(|r| r.features(m)[0] * r.features(next(m))[0]).collect();
        assert!(pearson(&f, &labels).abs() < 0.1);
    }
}

#[test]
fn parity_sign_triple_recovers_the_label_when_noiseless() {
    // Features are ±anchor; signs relative to the first record give the label.
    let c = synth(SynthMode::Parity, 50, 4, 5, 0.0, 8);
    let first = c.records().next().unwrap().clone();
    for r in c.records() {
        let relative: f64 = Modality::ALL
            .iter()
            .map(|&m| {
                let dot: f64 = r.features(m).iter().zip(first.features(m)).map(|(x, y)| x * y).sum();
                assert!((dot.abs() - 1.0).abs() < 1e-12);
                dot.signum()
            })
            .product();
        assert_eq!(r.label, first.label * relative);
    }
}

#[test]
fn noiseless_easy_corpus_is_solved_by_nearest_anchor() {
    let c = synth(SynthMode::Easy, 60, 5, 8, 0.0, 4);
    let mut anchors: Vec<Option<Vec<f64>>> = vec![None; 7];
    for r in c.records() {
        let k = r.class().unwrap();
        match &anchors[k] {
            Some(a) => assert_eq!(a, &r.text),
            None => anchors[k] = Some(r.text.clone()),
        }
        let norm: f64 = r.text.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    for r in c.records() {
        let nearest = (0..7)
            .filter_map(|k| anchors[k].as_ref().map(|a| (k, common::max_abs_diff(a, &r.text))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(nearest, r.class().unwrap());
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = write(&synth(SynthMode::Parity, 30, 3, 4, 0.1, 1));
    let b = write(&synth(SynthMode::Parity, 30, 3, 4, 0.1, 1));
    let c = write(&synth(SynthMode::Parity, 30, 3, 4, 0.1, 2));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
