//! Adam training of mean per-utterance cross-entropy, plus central-difference
//! gradient checking.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, SequenceSample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{argmax, ModelParams};
use crate::graph::{OpKind, Tape, Var};
use crate::precision::{DoubleDouble, Real};
use crate::reference;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                self.adam_beta1, self.adam_beta2
            )));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Writes `epoch,mean_loss,train_accuracy,seconds` rows after a header.
    ///
    /// Wall-clock time is machine dependent; with `timings == false` the
    /// `seconds` column is written as 0 so identical runs give identical files.
    pub fn write(&self, mut w: impl Write, timings: bool) -> std::io::Result<()> {
        writeln!(w, "epoch,mean_loss,train_accuracy,seconds")?;
        for e in &self.epochs {
            let secs = if timings { e.seconds } else { 0.0 };
            writeln!(w, "{},{:?},{:?},{:?}", e.epoch, e.mean_loss, e.train_accuracy, secs)?;
        }
        w.flush()
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(p: &ModelParams) -> Self {
        Self::new(p.named_tensors().into_iter().map(|(_, t)| t))
    }
}

/// One bias-corrected Adam update.
///
/// Every gradient is checked before any parameter moves; a non-finite entry
/// aborts with the offending tensor's name.
pub fn adam_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Mean cross-entropy over the timesteps of a sequence.
pub fn sequence_loss(tape: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} probability vectors for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::contract("sequence_loss over zero timesteps"));
    }
    let terms = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| tape.cross_entropy(p, l))
        .collect::<Result<Vec<_>>>()?;
    tape.mean(&terms)
}

/// Output of one forward/backward pass over a sequence.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub predictions: Vec<usize>,
    /// One gradient per tensor, in [`ModelParams::named_tensors`] order.
    pub grads: Vec<Vec<f64>>,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    model: &ModelParams,
    sample: &SequenceSample,
    fault: Option<(OpKind, f64)>,
) -> Result<SampleGrad> {
    let labels = sample.classes()?;
    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_backward_fault(kind, factor);
    }
    let g = model.build_forward(&mut tape, sample, true)?;
    let predictions = g.probs.iter().map(|&p| argmax(tape.value(p).data())).collect();
    let loss = sequence_loss(&mut tape, &g.probs, &labels)?;
    let loss_value = tape.value(loss).item();
    let vars = g.vars.all();
    let mut grads = tape.backward(loss)?;
    let grads = vars
        .into_iter()
        .map(|v| grads.take(v).expect("parameters are leaves"))
        .collect();
    Ok(SampleGrad {
        loss: loss_value,
        predictions,
        grads,
    })
}

/// Mean cross-entropy of a sample without building gradients.
pub fn sample_loss(model: &ModelParams, sample: &SequenceSample) -> Result<f64> {
    let labels = sample.classes()?;
    let mut tape = Tape::new();
    let g = model.build_forward(&mut tape, sample, false)?;
    let loss = sequence_loss(&mut tape, &g.probs, &labels)?;
    Ok(tape.value(loss).item())
}

/// Per-sequence Adam training. Deterministic for a fixed `cfg.seed`.
pub fn train(
    corpus: &Corpus,
    model: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train_with(corpus, model, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    corpus: &Corpus,
    model: &ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    model.check()?;
    let mut params = model.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    if corpus.is_empty() {
        return Err(Error::contract("training on an empty corpus"));
    }
    if corpus.feature_dim != params.config.input_dim {
        return Err(Error::Dimension {
            op: "model input_dim vs corpus feature_dim",
            lhs: vec![params.config.input_dim],
            rhs: vec![corpus.feature_dim],
        });
    }

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut state = AdamState::for_model(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
        for &idx in &order {
            let sample = &corpus.sequences[idx];
            let sg = sample_gradients(&params, sample, None)?;
            if !sg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, sequence {} ({})",
                    idx, sample.video_id
                )));
            }
            let labels = sample.classes()?;
            loss_sum += sg.loss * labels.len() as f64;
            hits += sg.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            count += labels.len();
            adam_step(&mut params.tensors_mut(), &names, &sg.grads, &mut state, cfg)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / count as f64,
            train_accuracy: hits as f64 / count as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((params, history))
}

/// Arithmetic used to evaluate the loss at the finite-difference probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbePrecision {
    /// The model's own `f64` tape forward. Loss resolution limits the
    /// numeric derivative to roughly `ulp(L) / 2ε` absolute accuracy.
    Double,
    /// The straight-line reference forward in double-double arithmetic.
    #[default]
    DoubleDouble,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub exec: Execution,
    pub precision: ProbePrecision,
    /// Scale one op kind's backward pass; for mutation testing only.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            exec: Execution::Parallel,
            precision: ProbePrecision::default(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i][j]` against `(L(+ε) − L(−ε)) / 2ε` where
/// `loss_at(i, j, δ)` evaluates the loss with entry `j` of tensor `i`
/// shifted by `δ`.
pub fn finite_difference_check<R, F>(
    names: &[String],
    analytic: &[Vec<f64>],
    epsilon: f64,
    exec: Execution,
    loss_at: F,
) -> Result<GradCheckReport>
where
    R: Real,
    F: Fn(usize, usize, R) -> Result<R> + Sync + Send,
{
    let probes: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(i, g)| (0..g.len()).map(move |j| (i, j)))
        .collect();
    if probes.is_empty() {
        return Err(Error::contract("gradient check over zero parameters"));
    }
    let eps = R::from_f64(epsilon);
    let numeric = exec
        .map(&probes, |&(i, j)| -> Result<f64> {
            let plus = loss_at(i, j, eps)?;
            let minus = loss_at(i, j, -eps)?;
            Ok(((plus - minus) / (eps + eps)).to_f64())
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;

    let mut worst = GradCheckReport {
        max_rel_error: -1.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: probes.len(),
    };
    for (&(i, j), &f) in probes.iter().zip(&numeric) {
        let a = analytic[i][j];
        let e = relative_error(a, f);
        if e > worst.max_rel_error || e.is_nan() {
            worst.max_rel_error = e;
            worst.worst_param = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            worst.worst_index = j;
            worst.analytic = a;
            worst.numeric = f;
            if e.is_nan() {
                break;
            }
        }
    }
    Ok(worst)
}

/// Compares backprop gradients of the sample loss with central differences
/// for every parameter scalar.
pub fn grad_check(
    model: &ModelParams,
    sample: &SequenceSample,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = sample_gradients(model, sample, opts.fault)?.grads;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    match opts.precision {
        ProbePrecision::Double => {
            finite_difference_check(&names, &analytic, opts.epsilon, opts.exec, |i, j, d: f64| {
                let mut probe = model.clone();
                probe.tensors_mut()[i].data_mut()[j] += d;
                sample_loss(&probe, sample)
            })
        }
        ProbePrecision::DoubleDouble => finite_difference_check(
            &names,
            &analytic,
            opts.epsilon,
            opts.exec,
            |i, j, d: DoubleDouble| reference::loss(model, sample, Some((i, j, d))),
        ),
    }
}
