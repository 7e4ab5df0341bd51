//! The sequential late-fusion MHA-LSTM.
//!
//! Three first-layer LSTMs (one per modality) run over the utterance
//! sequence. At every timestep their hidden states are fused in two steps:
//! the first two modalities in `order` are combined, then the result is
//! combined with the third. The fused sequence feeds a second LSTM, whose
//! outputs pass through multi-head self-attention and a dense softmax head
//! that scores the 7 sentiment classes per utterance.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, SequenceSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::layers::{
    dense, head_dim, lstm_sequence, multi_head_attention, xavier_uniform, LstmParams, LstmVars,
    MhaParams, MhaVars,
};
use crate::tensor::Tensor;

/// How the three per-modality hidden states are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `⟨h_a, h_b⟩ · h_c`
    ScalarGate,
    /// `(h_a ⊙ h_b) ⊙ h_c`
    Hadamard,
    /// `[h_a; h_b; h_c]`
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::ScalarGate, FusionMode::Hadamard, FusionMode::Concat];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::ScalarGate => "scalar_gate",
            FusionMode::Hadamard => "hadamard",
            FusionMode::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar_gate" | "scalar-gate" => Ok(FusionMode::ScalarGate),
            "hadamard" => Ok(FusionMode::Hadamard),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Where multi-head attention sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlacement {
    /// Once, over the outputs of the second-layer LSTM.
    AfterFused,
    /// Disabled; the softmax head reads the second LSTM directly.
    None,
}

impl FromStr for AttentionPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_fused" => Ok(AttentionPlacement::AfterFused),
            "none" => Ok(AttentionPlacement::None),
            other => Err(Error::Config(format!("unknown attention placement `{other}`"))),
        }
    }
}

/// Parses a comma-separated modality order such as `text,audio,visual`.
pub fn parse_order(s: &str) -> Result<[Modality; 3]> {
    let parts = s
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<Modality>>>()?;
    let order: [Modality; 3] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("order `{s}` must name exactly three modalities")))?;
    check_order(&order)?;
    Ok(order)
}

fn check_order(order: &[Modality; 3]) -> Result<()> {
    for m in Modality::ALL {
        if !order.contains(&m) {
            return Err(Error::Config(format!(
                "order {order:?} is not a permutation of text, audio, visual"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub order: [Modality; 3],
    pub d_model: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub attention: AttentionPlacement,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::ScalarGate,
            order: [Modality::Text, Modality::Audio, Modality::Visual],
            d_model: 64,
            heads: 4,
            num_classes: NUM_CLASSES,
            input_dim: 300,
            attention: AttentionPlacement::AfterFused,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_order(&self.order)?;
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        head_dim(self.d_model, self.heads)?;
        Ok(())
    }

    /// Input width of the second-layer LSTM.
    pub fn fused_dim(&self) -> usize {
        match self.mode {
            FusionMode::Concat => 3 * self.d_model,
            FusionMode::ScalarGate | FusionMode::Hadamard => self.d_model,
        }
    }
}

/// All parameters of the network plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: FusionConfig,
    pub lstm_text: LstmParams,
    pub lstm_audio: LstmParams,
    pub lstm_visual: LstmParams,
    pub lstm_fused: LstmParams,
    pub mha: MhaParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Handles of a model registered on a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub text: LstmVars,
    pub audio: LstmVars,
    pub visual: LstmVars,
    pub fused: LstmVars,
    pub mha: MhaVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    fn lstm(&self, m: Modality) -> &LstmVars {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    /// Parameter handles in [`ModelParams::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in [&self.text, &self.audio, &self.visual, &self.fused] {
            out.extend([l.w, l.u, l.b]);
        }
        for &(q, k, v) in &self.mha.heads {
            out.extend([q, k, v]);
        }
        out.extend([self.mha.w_o, self.head_w, self.head_b]);
        out
    }
}

/// Per-utterance feature streams, one vector per timestep and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

impl Streams {
    pub fn get(&self, m: Modality) -> &[Vec<f64>] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    fn from_sample(sample: &SequenceSample) -> Result<Self> {
        for (pos, u) in sample.utterances.iter().enumerate() {
            if u.utterance_index != pos || u.video_id != sample.video_id {
                return Err(Error::Alignment {
                    video_id: sample.video_id.clone(),
                    detail: format!(
                        "utterance at position {pos} is ({}, {})",
                        u.video_id, u.utterance_index
                    ),
                });
            }
        }
        let collect = |m| sample.utterances.iter().map(|u| u.features(m).to_vec()).collect();
        Ok(Self {
            text: collect(Modality::Text),
            audio: collect(Modality::Audio),
            visual: collect(Modality::Visual),
        })
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub vars: ModelVars,
    pub fused: Vec<Var>,
    pub probs: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Fuses three ordered hidden states on the tape.
pub fn fuse_states(tape: &mut Tape, a: Var, b: Var, c: Var, mode: FusionMode) -> Result<Var> {
    let (sa, sb, sc) = (tape.shape(a), tape.shape(b), tape.shape(c));
    if sa != sb || sa != sc || sa.len() != 1 {
        return Err(Error::dim("fuse_states", sa, if sa != sb { sb } else { sc }));
    }
    match mode {
        FusionMode::ScalarGate => {
            let s = tape.dot(a, b)?;
            tape.scale_by(s, c)
        }
        FusionMode::Hadamard => {
            let ab = tape.mul(a, b)?;
            tape.mul(ab, c)
        }
        FusionMode::Concat => tape.concat(&[a, b, c]),
    }
}

/// [`fuse_states`] on plain tensors.
pub fn fuse_values(a: &Tensor, b: &Tensor, c: &Tensor, mode: FusionMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b, c) = (
        tape.constant(a.clone()),
        tape.constant(b.clone()),
        tape.constant(c.clone()),
    );
    let f = fuse_states(&mut tape, a, b, c, mode)?;
    Ok(tape.value(f).clone())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ModelParams {
    /// Freshly initialized model drawn from a generator seeded with `seed`.
    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.input_dim, config.d_model);
        let lstm_text = LstmParams::init(d, h, &mut rng);
        let lstm_audio = LstmParams::init(d, h, &mut rng);
        let lstm_visual = LstmParams::init(d, h, &mut rng);
        let lstm_fused = LstmParams::init(config.fused_dim(), h, &mut rng);
        let mha = MhaParams::init(h, config.heads, &mut rng)?;
        let head_w = xavier_uniform(config.num_classes, h, &mut rng);
        let head_b = Tensor::zeros(&[config.num_classes]);
        Ok(Self {
            config,
            lstm_text,
            lstm_audio,
            lstm_visual,
            lstm_fused,
            mha,
            head_w,
            head_b,
        })
    }

    /// Every parameter, biases included, drawn from `Uniform(-scale, scale)`.
    ///
    /// Glorot initialization leaves the multiplicative fusion paths nearly
    /// silent, so many gradients sit below finite-difference resolution; this
    /// gives a generic point where every parameter is exercised.
    pub fn init_probe(config: FusionConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Uniform::new_inclusive(-scale, scale)
            .map_err(|e| Error::Config(format!("probe scale {scale}: {e}")))?;
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rand_distr::Distribution::sample(&dist, &mut rng);
            }
        }
        Ok(p)
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.d_model);
        let d_k = h / config.heads;
        let head = crate::layers::HeadParams {
            w_q: Tensor::zeros(&[d_k, h]),
            w_k: Tensor::zeros(&[d_k, h]),
            w_v: Tensor::zeros(&[d_k, h]),
        };
        Ok(Self {
            lstm_text: LstmParams::zeros(d, h),
            lstm_audio: LstmParams::zeros(d, h),
            lstm_visual: LstmParams::zeros(d, h),
            lstm_fused: LstmParams::zeros(config.fused_dim(), h),
            mha: MhaParams {
                heads: vec![head; config.heads],
                w_o: Tensor::zeros(&[h, h]),
            },
            head_w: Tensor::zeros(&[config.num_classes, h]),
            head_b: Tensor::zeros(&[config.num_classes]),
            config,
        })
    }

    pub fn lstm(&self, m: Modality) -> &LstmParams {
        match m {
            Modality::Text => &self.lstm_text,
            Modality::Audio => &self.lstm_audio,
            Modality::Visual => &self.lstm_visual,
        }
    }

    pub fn lstm_mut(&mut self, m: Modality) -> &mut LstmParams {
        match m {
            Modality::Text => &mut self.lstm_text,
            Modality::Audio => &mut self.lstm_audio,
            Modality::Visual => &mut self.lstm_visual,
        }
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, l) in [
            ("lstm_text", &self.lstm_text),
            ("lstm_audio", &self.lstm_audio),
            ("lstm_visual", &self.lstm_visual),
            ("lstm_fused", &self.lstm_fused),
        ] {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.u"), &l.u));
            out.push((format!("{name}.b"), &l.b));
        }
        for (i, h) in self.mha.heads.iter().enumerate() {
            out.push((format!("mha.head{i}.w_q"), &h.w_q));
            out.push((format!("mha.head{i}.w_k"), &h.w_k));
            out.push((format!("mha.head{i}.w_v"), &h.w_v));
        }
        out.push(("mha.w_o".into(), &self.mha.w_o));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable view of the tensors in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in [
            &mut self.lstm_text,
            &mut self.lstm_audio,
            &mut self.lstm_visual,
            &mut self.lstm_fused,
        ] {
            out.extend([&mut l.w, &mut l.u, &mut l.b]);
        }
        for h in &mut self.mha.heads {
            out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v]);
        }
        out.extend([&mut self.mha.w_o, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against the config and that all values are finite.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(self.config.clone())?;
        for ((name, got), (_, want)) in self.named_tensors().into_iter().zip(expected.named_tensors())
        {
            if got.shape() != want.shape() {
                return Err(Error::format(name, format!(
                    "shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            if !got.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        if self.mha.heads.len() != self.config.heads {
            return Err(Error::format("mha", "head count differs from config"));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            text: self.lstm_text.register(tape, trainable),
            audio: self.lstm_audio.register(tape, trainable),
            visual: self.lstm_visual.register(tape, trainable),
            fused: self.lstm_fused.register(tape, trainable),
            mha: self.mha.register(tape, trainable),
            head_w: if trainable {
                tape.leaf(self.head_w.clone())
            } else {
                tape.constant(self.head_w.clone())
            },
            head_b: if trainable {
                tape.leaf(self.head_b.clone())
            } else {
                tape.constant(self.head_b.clone())
            },
        }
    }

    /// Builds the full forward pass for `streams` on `tape`.
    pub fn build_streams(
        &self,
        tape: &mut Tape,
        streams: &Streams,
        trainable: bool,
    ) -> Result<ForwardGraph> {
        let cfg = &self.config;
        let t_len = streams.text.len();
        if t_len == 0 {
            return Err(Error::contract("forward on an empty sequence"));
        }
        for m in Modality::ALL {
            let s = streams.get(m);
            if s.len() != t_len {
                return Err(Error::Alignment {
                    video_id: String::new(),
                    detail: format!("{m} has {} utterances, text has {t_len}", s.len()),
                });
            }
            if let Some(bad) = s.iter().find(|v| v.len() != cfg.input_dim) {
                return Err(Error::dim(
                    "forward features",
                    &[cfg.input_dim],
                    &[bad.len()],
                ));
            }
        }

        let vars = self.register(tape, trainable);
        let mut hidden: Vec<Vec<Var>> = Vec::with_capacity(3);
        for m in cfg.order {
            let xs: Vec<Var> = streams
                .get(m)
                .iter()
                .map(|x| tape.constant(Tensor::vector(x)))
                .collect();
            hidden.push(lstm_sequence(tape, &xs, vars.lstm(m))?);
        }
        let fused = (0..t_len)
            .map(|t| fuse_states(tape, hidden[0][t], hidden[1][t], hidden[2][t], cfg.mode))
            .collect::<Result<Vec<_>>>()?;
        let second = lstm_sequence(tape, &fused, &vars.fused)?;
        let (features, attention) = match cfg.attention {
            AttentionPlacement::AfterFused => {
                let a = multi_head_attention(tape, &second, &vars.mha)?;
                (a.outputs, a.weights)
            }
            AttentionPlacement::None => (second, Vec::new()),
        };
        let probs = features
            .iter()
            .map(|&f| {
                let logits = dense(tape, f, vars.head_w, vars.head_b)?;
                tape.softmax(logits)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardGraph {
            vars,
            fused,
            probs,
            attention,
        })
    }

    /// Builds the forward pass for a sample on `tape`.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        sample: &SequenceSample,
        trainable: bool,
    ) -> Result<ForwardGraph> {
        let streams = Streams::from_sample(sample)?;
        self.build_streams(tape, &streams, trainable).map_err(|e| match e {
            Error::Alignment { detail, .. } => Error::Alignment {
                video_id: sample.video_id.clone(),
                detail,
            },
            other => other,
        })
    }

    /// One 7-class probability vector per utterance.
    pub fn forward(&self, sample: &SequenceSample) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let g = self.build_forward(&mut tape, sample, false)?;
        Ok(g.probs.iter().map(|&p| tape.value(p).data().to_vec()).collect())
    }

    /// [`Self::forward`] over raw feature streams.
    pub fn forward_streams(&self, streams: &Streams) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let g = self.build_streams(&mut tape, streams, false)?;
        Ok(g.probs.iter().map(|&p| tape.value(p).data().to_vec()).collect())
    }

    /// Most probable class per utterance.
    pub fn predict(&self, sample: &SequenceSample) -> Result<Vec<usize>> {
        Ok(self.forward(sample)?.iter().map(|p| argmax(p)).collect())
    }
}
