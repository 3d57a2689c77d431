use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::{build_mask, MaskStrategy};
use crate::encoders::{RawImage, VisualEncoder, VisualEncoderConfig, WordIndex};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{AttributeSequence, AttributeVocabulary, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub mask: MaskStrategy,
    pub vocab_size: usize,
}

impl DecoderConfig {
    /// Desk-scale sizing: 2 layers, 4 heads, width 64, FFN 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            mask: MaskStrategy::Causal,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("decoder FFN width must be positive".into()));
        }
        if let MaskStrategy::Sparse { k: 0 } = self.mask {
            return Err(Error::Config("sparse mask needs K >= 1".into()));
        }
        Ok(())
    }
}

/// Where visual tokens come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VisualSource {
    /// Precomputed feature blobs with `width` columns.
    Features { width: usize },
    /// Raw images through the built-in encoder.
    Image(VisualEncoderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: AttributeVocabulary,
    pub prompt: PromptTemplate,
    pub visual: VisualSource,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    Features(Tensor),
    Image(RawImage),
}

/// Values of one decoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `L × vocab_size` log-probabilities.
    pub log_probs: Tensor,
    /// `[layer][head]`, each `L × L`.
    pub self_attention: Vec<Vec<Tensor>>,
    /// `[layer][head]`, each `L × visual tokens`.
    pub cross_attention: Vec<Vec<Tensor>>,
}

/// Tape handles of one decoder pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub log_probs: Var,
    pub self_attention: Vec<Vec<Var>>,
    pub cross_attention: Vec<Vec<Var>>,
}

impl ForwardVars {
    pub fn values(&self, tape: &Tape) -> DecoderOutput {
        let grab = |maps: &Vec<Vec<Var>>| {
            maps.iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
                .collect()
        };
        DecoderOutput {
            log_probs: tape.value(self.log_probs).clone(),
            self_attention: grab(&self.self_attention),
            cross_attention: grab(&self.cross_attention),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
        })
    }
}

/// Masked transformer decoder over the closed attribute vocabulary,
/// conditioned on visual tokens through cross-attention.
#[derive(Debug, Clone)]
pub struct SeqAttrModel {
    config: ModelConfig,
    store: ParamStore,
    words: WordIndex,
    pooling: Tensor,
    word_embeddings: ParamId,
    special_embeddings: ParamId,
    positions: ParamId,
    visual_encoder: Option<VisualEncoder>,
    visual_proj: Option<Linear>,
    layers: Vec<DecoderLayer>,
    output: Linear,
}

impl SeqAttrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.decoder.validate()?;
        let vocab = &config.vocab;
        if config.decoder.vocab_size != vocab.total_size() {
            return Err(Error::Config(format!(
                "decoder vocab_size {} does not match vocabulary size {}",
                config.decoder.vocab_size,
                vocab.total_size()
            )));
        }
        let sentences = vocab
            .attributes()
            .iter()
            .map(|a| config.prompt.expand(a))
            .collect::<Result<Vec<_>>>()?;
        let words = WordIndex::from_sentences(sentences.iter().map(String::as_str));
        let pooling = words.pooling_matrix(&sentences)?;

        let d = config.decoder.d_model;
        let mut rng = rng_for(config.seed, "init");
        let mut store = ParamStore::new();
        let word_embeddings = store.add("text.words", Tensor::uniform(&[words.len(), d], 1.0, &mut rng));
        let special_embeddings = store.add("text.specials", Tensor::uniform(&[3, d], 1.0, &mut rng));
        let positions = store.add("decoder.positions", Tensor::uniform(&[vocab.seq_len(), d], 1.0, &mut rng));

        let (visual_encoder, visual_width) = match &config.visual {
            VisualSource::Features { width } => {
                if *width == 0 {
                    return Err(Error::Config("feature width must be positive".into()));
                }
                (None, *width)
            }
            VisualSource::Image(enc) => {
                let e = VisualEncoder::new(&mut store, enc.clone(), &mut rng)?;
                (Some(e), enc.d_model)
            }
        };
        let visual_proj =
            (visual_width != d).then(|| Linear::new(&mut store, "visual.proj", visual_width, d, &mut rng));
        let layers = (0..config.decoder.layers)
            .map(|l| DecoderLayer::new(&mut store, &format!("decoder.layer{l}"), &config.decoder, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(&mut store, "decoder.output", d, vocab.total_size(), &mut rng);

        Ok(Self {
            config,
            store,
            words,
            pooling,
            word_embeddings,
            special_embeddings,
            positions,
            visual_encoder,
            visual_proj,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &AttributeVocabulary {
        &self.config.vocab
    }

    pub fn mask(&self) -> &MaskStrategy {
        &self.config.decoder.mask
    }

    /// Swaps the self-attention mask. Parameters are unaffected.
    pub fn set_mask(&mut self, mask: MaskStrategy) {
        self.config.decoder.mask = mask;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.store.names().iter().position(|n| n == name)?;
        self.store.tensors_mut().get_mut(i)
    }

    pub fn words(&self) -> &WordIndex {
        &self.words
    }

    pub fn max_len(&self) -> usize {
        self.config.vocab.seq_len()
    }

    /// `total_size × d` embedding table: prompt-derived rows for attributes,
    /// learned rows for BOS, EOS and PAD.
    pub fn query_table(&self, tape: &mut Tape) -> Result<Var> {
        let words = self.store.load(tape, self.word_embeddings);
        let pooling = tape.constant(self.pooling.clone());
        let attrs = tape.matmul(pooling, words)?;
        let specials = self.store.load(tape, self.special_embeddings);
        tape.concat_rows(&[attrs, specials])
    }

    /// Attribute query embeddings, `M × d`.
    pub fn query_embeddings(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let words = self.store.load(&mut tape, self.word_embeddings);
        let pooling = tape.constant(self.pooling.clone());
        let attrs = tape.matmul(pooling, words)?;
        Ok(tape.value(attrs).clone())
    }

    /// Visual tokens projected to the decoder width.
    pub fn encode_visual(&self, tape: &mut Tape, input: &VisualInput) -> Result<Var> {
        let tokens = match (input, &self.config.visual, &self.visual_encoder) {
            (VisualInput::Features(t), VisualSource::Features { width }, _) => {
                let (rows, cols) = t.dims2()?;
                if cols != *width {
                    return Err(Error::shape("visual features", &[rows, cols], &[rows, *width]));
                }
                tape.constant(t.clone())
            }
            (VisualInput::Image(img), VisualSource::Image(_), Some(enc)) => enc.forward(tape, &self.store, img)?,
            _ => {
                return Err(Error::Config(
                    "visual input kind does not match the model's visual source".into(),
                ))
            }
        };
        match &self.visual_proj {
            Some(p) => p.forward(tape, &self.store, tokens),
            None => Ok(tokens),
        }
    }

    pub fn encode_visual_value(&self, input: &VisualInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.encode_visual(&mut tape, input)?;
        Ok(tape.value(v).clone())
    }

    /// Decoder pass over `inputs` (token indices) attending to `visual`.
    pub fn forward(&self, tape: &mut Tape, inputs: &[usize], visual: Var) -> Result<ForwardVars> {
        let vocab = &self.config.vocab;
        let len = inputs.len();
        if len == 0 || len > self.max_len() {
            return Err(Error::Invalid(format!(
                "decoder input length {len} outside 1..={}",
                self.max_len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab.total_size()) {
            return Err(Error::Invalid(format!("token {bad} outside vocabulary")));
        }
        let d = self.config.decoder.d_model;
        let (_, vw) = tape.value(visual).dims2()?;
        if vw != d {
            return Err(Error::shape("cross attention", tape.shape(visual), &[0, d]));
        }

        let table = self.query_table(tape)?;
        let emb = tape.gather_rows(table, inputs)?;
        let pos_table = self.store.load(tape, self.positions);
        let idx: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos_table, &idx)?;
        let mut x = tape.add(emb, pos)?;

        let mask = build_mask(&self.config.decoder.mask, len, Some((inputs, vocab.len())))?;
        let mut self_maps = Vec::with_capacity(self.layers.len());
        let mut cross_maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, sp) = layer.self_attn.forward(tape, &self.store, x, x, Some(&mask))?;
            let h = tape.add(x, a)?;
            let h = layer.norm1.forward(tape, &self.store, h)?;
            let (c, cp) = layer.cross_attn.forward(tape, &self.store, h, visual, None)?;
            let h2 = tape.add(h, c)?;
            let h2 = layer.norm2.forward(tape, &self.store, h2)?;
            let f = layer.ffn.forward(tape, &self.store, h2)?;
            let h3 = tape.add(h2, f)?;
            x = layer.norm3.forward(tape, &self.store, h3)?;
            self_maps.push(sp);
            cross_maps.push(cp);
        }
        let logits = self.output.forward(tape, &self.store, x)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(ForwardVars {
            log_probs,
            self_attention: self_maps,
            cross_attention: cross_maps,
        })
    }

    /// Forward pass on already-encoded visual tokens, returning values.
    pub fn decode_forward(&self, inputs: &[usize], visual: &Tensor) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let v = tape.constant(visual.clone());
        let out = self.forward(&mut tape, inputs, v)?;
        Ok(out.values(&tape))
    }

    /// Splits a complete sequence into shifted inputs and targets.
    pub fn shift(&self, gt: &AttributeSequence) -> Result<(Vec<usize>, Vec<usize>)> {
        let toks = gt.tokens();
        if toks.first() != Some(&self.config.vocab.bos()) {
            return Err(Error::Invalid("ground-truth sequence must start with BOS".into()));
        }
        if toks.len() < 2 {
            return Err(Error::Invalid("ground-truth sequence needs at least BOS and EOS".into()));
        }
        Ok((toks[..toks.len() - 1].to_vec(), toks[1..].to_vec()))
    }

    /// One parallel pass over `gt[..L-1]`; row `t` scores `gt[t + 1]`.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        gt: &AttributeSequence,
        visual: Var,
    ) -> Result<(ForwardVars, Vec<usize>)> {
        let (inputs, targets) = self.shift(gt)?;
        let out = self.forward(tape, &inputs, visual)?;
        Ok((out, targets))
    }

    pub fn teacher_forced_logits(&self, gt: &AttributeSequence, visual: &Tensor) -> Result<(DecoderOutput, Vec<usize>)> {
        let mut tape = Tape::new();
        let v = tape.constant(visual.clone());
        let (out, targets) = self.teacher_forced(&mut tape, gt, v)?;
        Ok((out.values(&tape), targets))
    }
}
