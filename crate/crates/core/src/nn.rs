//! Parameter storage and the transformer building blocks shared by the
//! visual encoder and the sequence decoder.

use rand::Rng;

use crate::decoder::MaskMatrix;
use crate::error::{Error, Result};
use crate::tensor::{attend, Adam, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform weight, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(&[fan_in, fan_out], bound, rng))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn load(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.tensors[id.0])
    }

    /// Adds the tape's parameter gradients into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (key, g) in tape.param_grads() {
            self.tensors[key].accumulate_grad(g);
        }
    }

    /// Applies one Adam update from the accumulated gradients.
    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        Adam::step(&mut self.tensors, &self.names, state)
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every gradient so the global norm is at most `max_norm`.
    pub fn clip_grads(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replaces every value, keeping names and shapes.
    pub fn replace_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for ((name, t), (have_name, have)) in values.into_iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if &name != have_name || t.shape() != have.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {have_name} {:?}",
                    t.shape(),
                    have.shape()
                )));
            }
            *have = t.with_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_weight(&format!("{name}.weight"), d_in, d_out, rng),
            bias: store.add_zeros(&format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.load(tape, self.weight);
        let b = store.load(tape, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(&format!("{name}.gain"), &[d]),
            bias: store.add_zeros(&format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = store.load(tape, self.gain);
        let b = store.load(tape, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        })
    }

    /// Queries from `x`, keys and values from `context`. Returns the output
    /// and each head's attention probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Var,
        mask: Option<&MaskMatrix>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, context)?;
        let v = self.value.forward(tape, store, context)?;
        let d = tape.value(q).dims2()?.1;
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let (o, p) = attend(tape, qh, kh, vh, mask)?;
            outs.push(o);
            probs.push(p);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.out.forward(tape, store, joined)?, probs))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Post-norm bidirectional block: self-attention, add & norm, FFN, add & norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (a, _) = self.attn.forward(tape, store, x, x, None)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, store, x)
    }
}
