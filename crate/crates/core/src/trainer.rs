//! Training loop: token-count batches, Adam with an inverse-square-root
//! schedule, whole-row context dropout, early stopping on validation loss
//! and fine-tuning from a non-contextual checkpoint.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradBuffer, Graph, ParamStore};
use crate::context_encoder::ContextSet;
use crate::error::{Error, Result};
use crate::nmt_model::{Example, ModelConfig, TranslationModel};
use crate::tensor::Matrix;

fn d_lr() -> f64 {
    3e-4
}
fn d_batch_tokens() -> usize {
    4000
}
fn d_patience() -> usize {
    5
}
fn d_dropout() -> f64 {
    0.1
}
fn d_max_epochs() -> usize {
    100
}
fn d_warmup() -> usize {
    4000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Target tokens accumulated per optimizer step.
    #[serde(default = "d_batch_tokens")]
    pub batch_tokens: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_dropout")]
    pub context_dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub fine_tune_from: Option<PathBuf>,
    #[serde(default)]
    pub freeze_src_encoder: bool,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            batch_tokens: d_batch_tokens(),
            patience: d_patience(),
            context_dropout_p: d_dropout(),
            seed: 0,
            max_epochs: d_max_epochs(),
            fine_tune_from: None,
            freeze_src_encoder: false,
            warmup_steps: d_warmup(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.context_dropout_p) {
            return Err(Error::Config(format!(
                "context_dropout_p must lie in [0, 1), got {}",
                self.context_dropout_p
            )));
        }
        if self.batch_tokens == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_tokens and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to `learning_rate`, then decay with `1/sqrt(step)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.learning_rate * (step / warm).min((warm / step).sqrt())
    }
}

/// RNG wrapper that counts how many values were drawn.
#[derive(Clone, Debug)]
pub struct CountingRng {
    inner: ChaCha8Rng,
    calls: u64,
}

impl CountingRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            calls: 0,
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl RngCore for CountingRng {
    fn next_u32(&mut self) -> u32 {
        self.calls += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.calls += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.calls += 1;
        self.inner.fill_bytes(dst)
    }
}

/// Drops each context row independently with probability `p`.
pub fn apply_context_dropout(cs: &ContextSet, p: f64, rng: &mut impl Rng) -> ContextSet {
    if p <= 0.0 || cs.is_empty() {
        return cs.clone();
    }
    ContextSet {
        doc: cs.doc.iter().filter(|_| !rng.random_bool(p)).cloned().collect(),
        meta: cs.meta.iter().filter(|_| !rng.random_bool(p)).cloned().collect(),
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let shapes: Vec<Matrix> = params.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..params.len() {
            if params.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let w = params.value_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the loss of `epoch`; returns `true` when it improves on the best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// `epoch,train_loss,valid_loss,seconds`; the seconds column stays empty
    /// unless `wall_time` is set, so logs of identical runs are identical.
    pub fn metrics_csv(&self, wall_time: bool) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss,seconds\n");
        for e in &self.log {
            let secs = if wall_time { format!("{:.3}", e.seconds) } else { String::new() };
            writeln!(s, "{},{:.6},{:.6},{}", e.epoch, e.train_loss, e.valid_loss, secs).expect("string write");
        }
        s
    }
}

/// Summed loss and target-token count of `examples` without dropout.
fn corpus_loss(model: &TranslationModel, examples: &[Example]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut g = Graph::new(&model.params);
        let l = model.loss(&mut g, ex)?;
        total += g.value(l).get(0, 0);
        tokens += ex.target_tokens();
    }
    Ok((total, tokens))
}

/// Mean validation cross-entropy in nats per target token.
pub fn evaluate_loss(model: &TranslationModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (total, tokens) = corpus_loss(model, examples)?;
    Ok(total / tokens.max(1) as f64)
}

/// Owns the optimizer and RNG streams of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: Adam,
    order_rng: ChaCha8Rng,
    dropout_rng: CountingRng,
    grads: GradBuffer,
}

impl Trainer {
    pub fn new(model: &TranslationModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(&model.params),
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dropout_rng: CountingRng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            grads: GradBuffer::new(&model.params),
            cfg,
        })
    }

    pub fn dropout_draws(&self) -> u64 {
        self.dropout_rng.calls()
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// One optimizer step on `batch`; returns the summed loss and token count.
    pub fn step(&mut self, model: &mut TranslationModel, batch: &[&Example], epoch: usize) -> Result<(f64, usize)> {
        self.grads.clear();
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let cs = apply_context_dropout(&ex.context, self.cfg.context_dropout_p, &mut self.dropout_rng);
            let dropped;
            let ex: &Example = if cs == ex.context {
                ex
            } else {
                dropped = Example {
                    context: cs,
                    ..(*ex).clone()
                };
                &dropped
            };
            let mut g = Graph::new(&model.params);
            let l = model.loss(&mut g, ex)?;
            let v = g.value(l).get(0, 0);
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: self.adam.steps() as usize + 1,
                });
            }
            g.backward(l, &mut self.grads);
            total += v;
            tokens += ex.target_tokens();
        }
        self.grads.scale(1.0 / tokens.max(1) as f64);
        if !self.grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.adam.steps() as usize + 1,
            });
        }
        let lr = self.cfg.learning_rate_at(self.adam.steps() as usize + 1);
        self.adam.step(&mut model.params, &self.grads, lr);
        Ok((total, tokens))
    }

    /// One pass over `data` in a seeded shuffled order; returns nats per token.
    pub fn epoch(&mut self, model: &mut TranslationModel, data: &[Example], epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut total = 0.0;
        let mut tokens = 0;
        let mut batch: Vec<&Example> = Vec::new();
        let mut batch_tokens = 0;
        for i in order {
            batch.push(&data[i]);
            batch_tokens += data[i].target_tokens();
            if batch_tokens >= self.cfg.batch_tokens {
                let (l, n) = self.step(model, &batch, epoch)?;
                total += l;
                tokens += n;
                batch.clear();
                batch_tokens = 0;
            }
        }
        if !batch.is_empty() {
            let (l, n) = self.step(model, &batch, epoch)?;
            total += l;
            tokens += n;
        }
        Ok(total / tokens.max(1) as f64)
    }
}

/// Trains with early stopping; the model ends holding its best weights.
pub fn train(model: &mut TranslationModel, train: &[Example], valid: &[Example], tc: &TrainConfig) -> Result<TrainReport> {
    train_with_hook(model, train, valid, tc, |_, _| Ok(()))
}

/// As [`train`], calling `hook` after every epoch with the current weights.
pub fn train_with_hook(
    model: &mut TranslationModel,
    train: &[Example],
    valid: &[Example],
    tc: &TrainConfig,
    mut hook: impl FnMut(&TranslationModel, &EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.freeze_source_encoder(tc.freeze_src_encoder);
    let mut trainer = Trainer::new(model, tc.clone())?;
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best: ParamStore = model.params.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let train_loss = trainer.epoch(model, train, epoch)?;
        let valid_loss = evaluate_loss(model, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: trainer.steps() as usize,
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            valid_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        hook(model, &entry)?;
        log.push(entry);
        if stopper.observe(epoch, valid_loss) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    model.params = best;
    let (best_epoch, best_valid_loss) = stopper.best();
    Ok(TrainReport {
        log,
        best_epoch,
        best_valid_loss,
        steps: trainer.steps(),
        stopped_early,
    })
}

/// Parameter names carried over from a non-contextual checkpoint.
pub fn is_shared_with_base(name: &str) -> bool {
    name.starts_with("src.") || name.starts_with("tgt.") || (name.starts_with("dec.") && !name.contains(".cxt_attn."))
}

/// Builds `cfg` with source-encoder and decoder weights copied from `base`;
/// context-specific tensors keep their fresh initialization.
pub fn init_from_base(base: &TranslationModel, cfg: ModelConfig) -> Result<TranslationModel> {
    let mut model = TranslationModel::new(cfg)?;
    model.load_shared_from(&base.params, is_shared_with_base)?;
    Ok(model)
}

/// Fine-tunes a contextual model initialized from `base`.
pub fn fine_tune(
    base: &TranslationModel,
    cfg: ModelConfig,
    train_data: &[Example],
    valid: &[Example],
    tc: &TrainConfig,
) -> Result<(TranslationModel, TrainReport)> {
    let mut model = init_from_base(base, cfg)?;
    let report = train(&mut model, train_data, valid, tc)?;
    Ok((model, report))
}
