//! Teacher-forced training with the class-rate-weighted NLL.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Example;
use crate::decoder::{ModelConfig, SeqAttrModel, VisualInput};
use crate::encoders::augment;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};
use crate::vocab::{check_labels, labels_to_sequence, make_order, AttributeOrder, AttributeVocabulary, OrderKind};

/// Positive rate per vocabulary entry. Specials are fixed at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRates(Vec<f64>);

impl ClassRates {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Invalid(format!("class rate {r} outside [0, 1]")));
        }
        Ok(Self(rates))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn compute_class_rates<'a>(
    labels: impl IntoIterator<Item = &'a [u8]>,
    vocab: &AttributeVocabulary,
) -> Result<ClassRates> {
    let m = vocab.len();
    let mut counts = vec![0usize; m];
    let mut n = 0usize;
    for l in labels {
        check_labels(l, m)?;
        for (c, &b) in counts.iter_mut().zip(l) {
            *c += b as usize;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("class rates of an empty dataset".into()));
    }
    let mut rates: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    rates.resize(vocab.total_size(), 1.0);
    ClassRates::new(rates)
}

/// `exp(|1 - r_j|)` for attributes, 1 for EOS, 0 for PAD and BOS.
pub fn loss_weight(target: usize, rates: &ClassRates, vocab: &AttributeVocabulary) -> Result<f64> {
    if vocab.is_attribute(target) {
        let r = rates
            .0
            .get(target)
            .ok_or_else(|| Error::Invalid(format!("no class rate for attribute {target}")))?;
        Ok((1.0 - r).abs().exp())
    } else if target == vocab.eos() {
        Ok(1.0)
    } else if target == vocab.pad() || target == vocab.bos() {
        Ok(0.0)
    } else {
        Err(Error::Invalid(format!("target {target} outside vocabulary")))
    }
}

/// Flat `(index, weight)` picks into an `L × V` log-prob matrix, plus the
/// number of scored (non-PAD) positions.
pub fn target_picks(
    targets: &[usize],
    rates: &ClassRates,
    vocab: &AttributeVocabulary,
) -> Result<(Vec<(usize, f64)>, usize)> {
    let v = vocab.total_size();
    let mut picks = Vec::with_capacity(targets.len());
    let mut scored = 0;
    for (t, &c) in targets.iter().enumerate() {
        let w = loss_weight(c, rates, vocab)?;
        if c != vocab.pad() {
            scored += 1;
        }
        if w != 0.0 {
            picks.push((t * v + c, w));
        }
    }
    Ok((picks, scored))
}

/// `-(1/N) Σ w_c(t) · log_probs[t][c(t)]` over non-PAD targets of every
/// sequence in the batch, `N` counting those targets.
pub fn weighted_nll(
    batch: &[(&Tensor, &[usize])],
    rates: &ClassRates,
    vocab: &AttributeVocabulary,
) -> Result<f64> {
    let mut total = 0.0;
    let mut scored = 0;
    for (lp, targets) in batch {
        let (rows, cols) = lp.dims2()?;
        if rows != targets.len() || cols != vocab.total_size() {
            return Err(Error::shape("weighted_nll", &[rows, cols], &[targets.len(), vocab.total_size()]));
        }
        let (picks, n) = target_picks(targets, rates, vocab)?;
        scored += n;
        total -= picks.iter().map(|&(i, w)| w * lp.data()[i]).sum::<f64>();
    }
    if scored == 0 {
        return Err(Error::Invalid("no scored target positions".into()));
    }
    Ok(total / scored as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub min_scale: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            min_scale: 0.8,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub order: OrderKind,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Global gradient-norm clip. Off unless set.
    #[serde(default)]
    pub clip_grad: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            order: OrderKind::Canonical,
            augment: AugmentConfig::default(),
            clip_grad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::Config(format!("bad gradient clip {c}")));
            }
        }
        if !(self.augment.min_scale > 0.0 && self.augment.min_scale <= 1.0) {
            return Err(Error::Config(format!("bad augmentation scale {}", self.augment.min_scale)));
        }
        Ok(())
    }
}

/// One line of epoch telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
    pub lr: f64,
}

/// Model, optimizer and bookkeeping for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SeqAttrModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub rates: ClassRates,
    /// Completed epochs.
    pub epoch: usize,
    order: AttributeOrder,
}

impl Trainer {
    pub fn new(model: SeqAttrModel, config: TrainConfig, rates: ClassRates) -> Result<Self> {
        config.validate()?;
        let vocab = model.vocab();
        if rates.0.len() != vocab.total_size() {
            return Err(Error::Config(format!(
                "class rates cover {} entries, vocabulary has {}",
                rates.0.len(),
                vocab.total_size()
            )));
        }
        let order = make_order(config.order, vocab.len())?;
        let optimizer = AdamState::new(AdamConfig::with_lr(config.learning_rate), model.params().tensors());
        Ok(Self {
            model,
            optimizer,
            config,
            rates,
            epoch: 0,
            order,
        })
    }

    /// Builds a fresh model and computes class rates from `data`.
    pub fn from_data(model_config: ModelConfig, config: TrainConfig, data: &[Example]) -> Result<Self> {
        let rates = compute_class_rates(data.iter().map(|e| e.labels.as_slice()), &model_config.vocab)?;
        Self::new(SeqAttrModel::new(model_config)?, config, rates)
    }

    pub fn order(&self) -> &AttributeOrder {
        &self.order
    }

    /// Loss of one batch without updating anything.
    pub fn batch_loss(&self, batch: &[&Example]) -> Result<f64> {
        let vocab = self.model.vocab();
        let mut outs = Vec::with_capacity(batch.len());
        for ex in batch {
            let seq = labels_to_sequence(&ex.labels, vocab, &self.order)?;
            let visual = self.model.encode_visual_value(&ex.visual)?;
            outs.push(self.model.teacher_forced_logits(&seq, &visual)?);
        }
        let refs: Vec<(&Tensor, &[usize])> = outs.iter().map(|(o, t)| (&o.log_probs, t.as_slice())).collect();
        weighted_nll(&refs, &self.rates, vocab)
    }

    /// Accumulates gradients of the batch loss into the parameters and
    /// returns the loss. Gradients are cleared first.
    pub fn accumulate_batch(&mut self, batch: &[(&Example, VisualInput)]) -> Result<f64> {
        let vocab = self.model.vocab().clone();
        let mut seqs = Vec::with_capacity(batch.len());
        let mut scored = 0usize;
        for (ex, _) in batch {
            let seq = labels_to_sequence(&ex.labels, &vocab, &self.order)?;
            let (_, targets) = self.model.shift(&seq)?;
            scored += target_picks(&targets, &self.rates, &vocab)?.1;
            seqs.push(seq);
        }
        if scored == 0 {
            return Err(Error::Invalid("batch has no scored targets".into()));
        }
        let norm = 1.0 / scored as f64;
        self.model.params_mut().zero_grads();
        let mut loss = 0.0;
        for ((_, visual), seq) in batch.iter().zip(&seqs) {
            let mut tape = Tape::new();
            let v = self.model.encode_visual(&mut tape, visual)?;
            let (out, targets) = self.model.teacher_forced(&mut tape, seq, v)?;
            let (picks, _) = target_picks(&targets, &self.rates, &vocab)?;
            let picks = picks.into_iter().map(|(i, w)| (i, -w * norm)).collect();
            let l = tape.weighted_pick(out.log_probs, picks)?;
            loss += tape.value(l).data()[0];
            tape.backward(l)?;
            self.model.params_mut().accumulate_grads(&tape);
        }
        Ok(loss)
    }

    fn visual_for(&self, ex: &Example, epoch: usize, index: usize) -> Result<VisualInput> {
        match (&ex.visual, self.config.augment.enabled) {
            (VisualInput::Image(img), true) => {
                let mut rng = rng_for(self.config.seed, &format!("augment/{epoch}/{index}"));
                let a = &self.config.augment;
                let out = augment(img, a.min_scale, a.flip, &mut rng);
                Ok(VisualInput::Image(out))
            }
            _ => Ok(ex.visual.clone()),
        }
    }

    /// Seeded shuffle, then one Adam step per batch.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut rng_for(self.config.seed, &format!("shuffle/{epoch}")));
        let mut losses = Vec::new();
        for (b, chunk) in perm.chunks(self.config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| Ok((&data[i], self.visual_for(&data[i], epoch, i)?)))
                .collect::<Result<Vec<_>>>()?;
            let loss = self.accumulate_batch(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {loss} in epoch {epoch}, batch {b}")));
            }
            if let Some(c) = self.config.clip_grad {
                self.model.params_mut().clip_grads(c);
            }
            let mut opt = std::mem::replace(&mut self.optimizer, AdamState::new(AdamConfig::default(), &[]));
            let res = self.model.params_mut().adam_step(&mut opt);
            self.optimizer = opt;
            res.map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} in epoch {epoch}, batch {b}")),
                other => other,
            })?;
            losses.push(loss);
        }
        self.model.params_mut().zero_grads();
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_ms: start.elapsed().as_millis() as u64,
            lr: self.optimizer.config.learning_rate,
        })
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, data: &[Example], mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.train_epoch(data)?;
            log::info!("epoch {} loss {:.6}", s.epoch, s.mean_loss);
            on_epoch(&s);
            all.push(s);
        }
        Ok(all)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainState {
            train: self.config.clone(),
            epoch: self.epoch,
            adam: self.optimizer.config,
            adam_step: self.optimizer.step,
        };
        let mut ck = model_checkpoint(&self.model, Some(&state))?;
        ck.tensors.push(("train.rates".into(), Tensor::new(vec![self.rates.0.len()], self.rates.0.clone())?));
        let store = self.model.params();
        for (prefix, moments) in [("adam.m", &self.optimizer.first_moment), ("adam.v", &self.optimizer.second_moment)] {
            for ((name, p), m) in store.iter().zip(moments) {
                ck.tensors.push((format!("{prefix}/{name}"), Tensor::new(p.shape().to_vec(), m.clone())?));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let state = header
            .training
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
        let model = model_from_checkpoint(ck, None)?;
        let rates = ck
            .tensor("train.rates")
            .ok_or_else(|| Error::Config("checkpoint lacks class rates".into()))?;
        let rates = ClassRates::new(rates.data().to_vec())?;
        let mut trainer = Trainer::new(model, state.train, rates)?;
        trainer.epoch = state.epoch;
        trainer.optimizer.config = state.adam;
        trainer.optimizer.step = state.adam_step;
        let names: Vec<String> = trainer.model.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [
                ("adam.m", &mut trainer.optimizer.first_moment[i]),
                ("adam.v", &mut trainer.optimizer.second_moment[i]),
            ] {
                let key = format!("{prefix}/{name}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor {key}")))?;
                if t.numel() != slot.len() {
                    return Err(Error::Config(format!("optimizer tensor {key} has the wrong size")));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub train: TrainConfig,
    pub epoch: usize,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    #[serde(default)]
    training: Option<TrainState>,
}

/// Model parameters in declaration order under a JSON header.
pub fn model_checkpoint(model: &SeqAttrModel, training: Option<&TrainState>) -> Result<Checkpoint> {
    let header = CheckpointHeader {
        model: model.config().clone(),
        training: training.cloned(),
    };
    let tensors = model
        .params()
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            t.grad = None;
            (n.to_string(), t)
        })
        .collect();
    Ok(Checkpoint {
        config: serde_json::to_value(header)?,
        tensors,
    })
}

/// Rebuilds a model. With `expected` set, the stored vocabulary must match it.
pub fn model_from_checkpoint(ck: &Checkpoint, expected: Option<&AttributeVocabulary>) -> Result<SeqAttrModel> {
    let header: CheckpointHeader = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    if let Some(v) = expected {
        if v.total_size() != header.model.vocab.total_size() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary has {} entries, expected {}",
                header.model.vocab.total_size(),
                v.total_size()
            )));
        }
        if v.attributes() != header.model.vocab.attributes() {
            return Err(Error::Config("checkpoint vocabulary differs from the given one".into()));
        }
    }
    let mut model = SeqAttrModel::new(header.model)?;
    let n = model.params().len();
    let values = ck.tensors.iter().take(n).cloned().collect();
    model.params_mut().replace_values(values)?;
    Ok(model)
}

pub fn save_model(model: &SeqAttrModel, path: &Path) -> Result<()> {
    model_checkpoint(model, None)?.save(path)
}

pub fn load_model(path: &Path, expected: Option<&AttributeVocabulary>) -> Result<SeqAttrModel> {
    model_from_checkpoint(&Checkpoint::load(path)?, expected)
}
