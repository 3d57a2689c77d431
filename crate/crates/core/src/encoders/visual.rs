use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::RawImage;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_side: 8,
            channels: 3,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
        }
    }
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Config(format!(
                "image side {} is not a multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.channels == 0 || self.d_model == 0 {
            return Err(Error::Config("encoder needs channels and width".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Visual token count including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// Flattens non-overlapping patches in row-major patch order. Each row holds
/// one patch as `(y, x, channel)` values scaled to `[0, 1]`.
pub fn patch_pixels(image: &RawImage, cfg: &VisualEncoderConfig) -> Result<Tensor> {
    if image.height != cfg.image_side || image.width != cfg.image_side || image.channels != cfg.channels {
        return Err(Error::shape(
            "patch_embed",
            &[image.height, image.width, image.channels],
            &[cfg.image_side, cfg.image_side, cfg.channels],
        ));
    }
    let (n, p, c) = (cfg.patches_per_side(), cfg.patch_side, cfg.channels);
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..n {
        for px in 0..n {
            for y in 0..p {
                for x in 0..p {
                    for &v in image.pixel(py * p + y, px * p + x).iter().take(c) {
                        data.push(v as f64 / 255.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Patch projection, class token, learned positions and bidirectional blocks.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
    pub patch: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl VisualEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: VisualEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let patch = Linear::new(store, "visual.patch", config.patch_dim(), d, rng);
        let class_token = store.add("visual.class_token", Tensor::uniform(&[1, d], 1.0, rng));
        let positions = store.add("visual.positions", Tensor::uniform(&[config.num_tokens(), d], 1.0, rng));
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(store, &format!("visual.layer{l}"), d, config.heads, config.d_ff, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            patch,
            class_token,
            positions,
            layers,
        })
    }

    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, image: &RawImage) -> Result<Var> {
        let pixels = tape.constant(patch_pixels(image, &self.config)?);
        self.patch.forward(tape, store, pixels)
    }

    /// Prepends the class token, adds positions and runs the blocks.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, patch_tokens: Var) -> Result<Var> {
        let (rows, cols) = tape.value(patch_tokens).dims2()?;
        if rows != self.config.num_patches() || cols != self.config.d_model {
            return Err(Error::shape(
                "visual_encode",
                &[rows, cols],
                &[self.config.num_patches(), self.config.d_model],
            ));
        }
        let cls = store.load(tape, self.class_token);
        let pos = store.load(tape, self.positions);
        let x = tape.concat_rows(&[cls, patch_tokens])?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &RawImage) -> Result<Var> {
        let tokens = self.patch_embed(tape, store, image)?;
        self.encode(tape, store, tokens)
    }
}
