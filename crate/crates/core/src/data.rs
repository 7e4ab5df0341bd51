//! Multi-modal utterance corpora: line-delimited I/O, label binning,
//! train/test splitting and seeded synthetic generation.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sentiment classes (integer scores −3..=+3).
pub const NUM_CLASSES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "text" => Ok(Modality::Text),
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// One utterance: aligned features for the three modalities plus a
/// continuous sentiment score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub video_id: String,
    pub utterance_index: usize,
    pub label: f64,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

impl UtteranceRecord {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    pub fn features_mut(&mut self, m: Modality) -> &mut Vec<f64> {
        match m {
            Modality::Text => &mut self.text,
            Modality::Audio => &mut self.audio,
            Modality::Visual => &mut self.visual,
        }
    }

    /// Class index of this utterance's label.
    pub fn class(&self) -> Result<usize> {
        bin_label(self.label)
    }
}

/// Utterances of one video, ordered by `utterance_index` from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub video_id: String,
    pub utterances: Vec<UtteranceRecord>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn classes(&self) -> Result<Vec<usize>> {
        self.utterances.iter().map(UtteranceRecord::class).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Loaded,
    SyntheticEasy,
    SyntheticParity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub sequences: Vec<SequenceSample>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn empty(provenance: Provenance) -> Self {
        Self {
            feature_dim: 0,
            sequences: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn utterance_count(&self) -> usize {
        self.sequences.iter().map(SequenceSample::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.sequences.iter().flat_map(|s| s.utterances.iter())
    }

    /// Copy with every modality except `keep` replaced by zeros.
    pub fn keep_only(&self, keep: Modality) -> Corpus {
        let mut out = self.clone();
        for rec in out.sequences.iter_mut().flat_map(|s| s.utterances.iter_mut()) {
            for m in Modality::ALL {
                if m != keep {
                    rec.features_mut(m).fill(0.0);
                }
            }
        }
        out
    }
}

/// Maps a sentiment score to a class: clamp to [−3, 3], round half away
/// from zero, shift by 3.
pub fn bin_label(score: f64) -> Result<usize> {
    if score.is_nan() {
        return Err(Error::contract("cannot bin a NaN sentiment score"));
    }
    Ok((score.clamp(-3.0, 3.0).round() + 3.0) as usize)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_corpus(BufReader::new(file))
}

/// Parses line-delimited records, grouping them by video.
///
/// Sequences keep the order in which their video first appears.
pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut dim: Option<usize> = None;
    let mut groups: Vec<(String, Vec<(usize, UtteranceRecord)>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(rec.text.len());
        for m in Modality::ALL {
            let found = rec.features(m).len();
            if found != expected || found == 0 {
                return Err(Error::RecordDimension {
                    line: line_no,
                    field: m.name(),
                    expected,
                    found,
                });
            }
        }
        if !rec.label.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                detail: "label is not finite".into(),
            });
        }
        rec.label = rec.label.clamp(-3.0, 3.0);
        let g = *slot.entry(rec.video_id.clone()).or_insert_with(|| {
            groups.push((rec.video_id.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push((line_no, rec));
    }

    let mut sequences = Vec::with_capacity(groups.len());
    for (video_id, mut recs) in groups {
        recs.sort_by_key(|(_, r)| r.utterance_index);
        for (pos, (line, r)) in recs.iter().enumerate() {
            if r.utterance_index != pos {
                let detail = if pos > 0 && recs[pos - 1].1.utterance_index == r.utterance_index {
                    format!(
                        "duplicate utterance ({video_id}, {})",
                        r.utterance_index
                    )
                } else {
                    format!(
                        "video {video_id}: expected utterance_index {pos}, found {}",
                        r.utterance_index
                    )
                };
                return Err(Error::Integrity { line: *line, detail });
            }
        }
        sequences.push(SequenceSample {
            video_id,
            utterances: recs.into_iter().map(|(_, r)| r).collect(),
        });
    }
    Ok(Corpus {
        feature_dim: dim.unwrap_or(0),
        sequences,
        provenance: Provenance::Loaded,
    })
}

/// Writes one JSON object per utterance, sequences in order.
pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    for rec in corpus.records() {
        serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_corpus(corpus, std::io::BufWriter::new(file))
}

/// Seeded split at sequence granularity.
///
/// The training half receives `round(train_fraction · n)` sequences, kept
/// within `1..n` so neither half is empty.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::contract(format!("cannot split a corpus of {n} sequences")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, test_idx) = order.split_at(n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            feature_dim: corpus.feature_dim,
            sequences: idx.iter().map(|&i| corpus.sequences[i].clone()).collect(),
            provenance: corpus.provenance,
        }
    };
    Ok((take(train_idx), take(test_idx)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Every modality alone identifies the class.
    Easy,
    /// Label is the product of three per-modality signs.
    Parity,
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(SynthMode::Easy),
            "parity" => Ok(SynthMode::Parity),
            other => Err(Error::Config(format!("unknown synth mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub n_videos: usize,
    pub utterances_per_video: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy(anchor: &[f64], scale: f64, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    anchor
        .iter()
        .map(|a| {
            let z: f64 = StandardNormal.sample(rng);
            scale * a + sigma * z
        })
        .collect()
}

/// Generates a seeded synthetic corpus.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.n_videos == 0 || cfg.utterances_per_video == 0 || cfg.feature_dim == 0 {
        return Err(Error::contract("synthetic corpus sizes must be positive"));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::contract(format!(
            "noise_sigma must be finite and non-negative, got {}",
            cfg.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.feature_dim;
    let width = cfg.n_videos.to_string().len().max(4);

    let (anchors, provenance) = match cfg.mode {
        SynthMode::Easy => {
            let a: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|_| (0..NUM_CLASSES).map(|_| unit_vector(dim, &mut rng)).collect())
                .collect();
            (a, Provenance::SyntheticEasy)
        }
        SynthMode::Parity => {
            let a: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vec![unit_vector(dim, &mut rng)]).collect();
            (a, Provenance::SyntheticParity)
        }
    };

    let mut sequences = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let video_id = format!("synth-{v:0width$}");
        let mut utterances = Vec::with_capacity(cfg.utterances_per_video);
        for u in 0..cfg.utterances_per_video {
            let (label, feats) = match cfg.mode {
                SynthMode::Easy => {
                    let k = rng.random_range(0..NUM_CLASSES);
                    let feats: Vec<Vec<f64>> = anchors
                        .iter()
                        .map(|per_class| noisy(&per_class[k], 1.0, cfg.noise_sigma, &mut rng))
                        .collect();
                    (k as f64 - 3.0, feats)
                }
                SynthMode::Parity => {
                    let signs: Vec<f64> = (0..3)
                        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                        .collect();
                    let feats: Vec<Vec<f64>> = anchors
                        .iter()
                        .zip(&signs)
                        .map(|(a, &s)| noisy(&a[0], s, cfg.noise_sigma, &mut rng))
                        .collect();
                    let product: f64 = signs.iter().product();
                    (3.0 * product, feats)
                }
            };
            let mut feats = feats.into_iter();
            utterances.push(UtteranceRecord {
                video_id: video_id.clone(),
                utterance_index: u,
                label,
                text: feats.next().expect("three modalities"),
                audio: feats.next().expect("three modalities"),
                visual: feats.next().expect("three modalities"),
            });
        }
        sequences.push(SequenceSample {
            video_id,
            utterances,
        });
    }
    Ok(Corpus {
        feature_dim: dim,
        sequences,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(video: &str, idx: usize, label: f64, dim: usize) -> String {
        let v: Vec<f64> = (0..dim).map(|i| i as f64 * 0.25).collect();
        serde_json::to_string(&UtteranceRecord {
            video_id: video.into(),
            utterance_index: idx,
            label,
            text: v.clone(),
            audio: v.clone(),
            visual: v,
        })
        .unwrap()
    }

    #[test]
    fn bin_label_examples() {
        assert_eq!(bin_label(-3.0).unwrap(), 0);
        assert_eq!(bin_label(0.0).unwrap(), 3);
        assert_eq!(bin_label(3.0).unwrap(), 6);
        assert_eq!(bin_label(0.5).unwrap(), 4);
        assert_eq!(bin_label(-0.5).unwrap(), 2);
        assert_eq!(bin_label(3.7).unwrap(), 6);
        assert_eq!(bin_label(-1e9).unwrap(), 0);
        assert!(matches!(bin_label(f64::NAN), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = read_corpus("".as_bytes()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn single_record() {
        let text = record("v", 0, 2.4, 300);
        let c = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sequences[0].len(), 1);
        assert_eq!(c.feature_dim, 300);
        assert_eq!(c.sequences[0].utterances[0].class().unwrap(), 5);
    }

    #[test]
    fn short_vector_names_line() {
        let mut bad: UtteranceRecord =
            serde_json::from_str(&record("b", 0, 0.0, 300)).unwrap();
        bad.text.pop();
        let text = format!(
            "{}\n{}\n",
            record("a", 0, 0.0, 300),
            serde_json::to_string(&bad).unwrap()
        );
        match read_corpus(text.as_bytes()) {
            Err(Error::RecordDimension {
                line: 2,
                field: "text",
                expected: 300,
                found: 299,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_fields() {
        let text = format!("{}\nnot json\n", record("a", 0, 0.0, 2));
        assert!(matches!(read_corpus(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let extra = record("a", 0, 0.0, 2).replace("{", "{\"speaker\":1,");
        assert!(matches!(read_corpus(extra.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicates_and_gaps_rejected() {
        let text = format!("{}\n{}\n", record("a", 0, 0.0, 2), record("a", 0, 1.0, 2));
        assert!(matches!(read_corpus(text.as_bytes()), Err(Error::Integrity { .. })));
        let text = format!("{}\n{}\n", record("a", 0, 0.0, 2), record("a", 2, 1.0, 2));
        assert!(matches!(read_corpus(text.as_bytes()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn grouping_sorts_and_clamps() {
        let text = [
            record("b", 1, 0.0, 2),
            record("a", 0, 9.0, 2),
            record("b", 0, -1.0, 2),
        ]
        .join("\n");
        let c = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sequences[0].video_id, "b");
        assert_eq!(c.sequences[0].utterances[0].label, -1.0);
        assert_eq!(c.sequences[1].utterances[0].label, 3.0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = synth_generate(&SynthConfig {
            mode: SynthMode::Easy,
            n_videos: 10,
            utterances_per_video: 2,
            feature_dim: 3,
            noise_sigma: 0.1,
            seed: 1,
        })
        .unwrap();
        let (tr, te) = split(&corpus, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split(&corpus, 0.8, 3).unwrap(), (tr.clone(), te.clone()));
        let differs = (0..10).any(|s| split(&corpus, 0.8, 100 + s).unwrap().0 != tr);
        assert!(differs);
        assert!(split(&corpus, 1.0, 0).is_err());
        assert!(split(&corpus, 0.0, 0).is_err());
        let mut one = corpus.clone();
        one.sequences.truncate(1);
        assert!(matches!(split(&one, 0.8, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn noiseless_easy_is_nearest_anchor_separable() {
        let cfg = SynthConfig {
            mode: SynthMode::Easy,
            n_videos: 20,
            utterances_per_video: 5,
            feature_dim: 8,
            noise_sigma: 0.0,
            seed: 9,
        };
        let c = synth_generate(&cfg).unwrap();
        // Recover the anchors from the data itself: every utterance of class k
        // must carry exactly the same feature vector.
        let mut anchors: HashMap<usize, Vec<f64>> = HashMap::new();
        for r in c.records() {
            let k = r.class().unwrap();
            let a = anchors.entry(k).or_insert_with(|| r.text.clone());
            assert_eq!(a, &r.text);
        }
        // Nearest anchor classifies perfectly.
        for r in c.records() {
            let best = anchors
                .iter()
                .map(|(k, a)| {
                    let d: f64 = a.iter().zip(&r.text).map(|(x, y)| (x - y).powi(2)).sum();
                    (d, *k)
                })
                .min_by(|x, y| x.partial_cmp(y).unwrap())
                .unwrap()
                .1;
            assert_eq!(best, r.class().unwrap());
        }
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        let mut cfg = SynthConfig {
            mode: SynthMode::Parity,
            n_videos: 1,
            utterances_per_video: 1,
            feature_dim: 1,
            noise_sigma: -0.1,
            seed: 0,
        };
        assert!(synth_generate(&cfg).is_err());
        cfg.noise_sigma = 0.0;
        cfg.n_videos = 0;
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn keep_only_zeroes_other_streams() {
        let c = synth_generate(&SynthConfig {
            mode: SynthMode::Parity,
            n_videos: 2,
            utterances_per_video: 2,
            feature_dim: 3,
            noise_sigma: 0.1,
            seed: 4,
        })
        .unwrap();
        let k = c.keep_only(Modality::Audio);
        for (a, b) in c.records().zip(k.records()) {
            assert_eq!(a.audio, b.audio);
            assert!(b.text.iter().chain(&b.visual).all(|&v| v == 0.0));
            assert_eq!(a.label, b.label);
        }
    }
}
