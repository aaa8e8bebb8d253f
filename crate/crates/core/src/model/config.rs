use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::DEFAULT_CAPACITY;
use crate::tokenizer::VOCAB_SIZE;

/// Architecture hyper-parameters. Every field has a default so partial
/// config files work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// Longest assembled token sequence (soft prefix excluded).
    pub max_seq_len: usize,
    pub query_count: usize,
    pub qformer_width: usize,
    pub qformer_heads: usize,
    pub qformer_layers: usize,
    /// Width of memory entries.
    pub d_mem: usize,
    pub memory_capacity: usize,
    pub text_encoder_layers: usize,
    pub text_encoder_heads: usize,
    /// Width of a raw image patch feature.
    pub d_img: usize,
    pub image_encoder_width: usize,
    pub image_encoder_layers: usize,
    pub image_encoder_heads: usize,
    /// Number of vectors an image is compressed to.
    pub abstractor_queries: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Sinusoidal positions inside the two encoders.
    pub encoder_positions: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_lm: 128,
            lm_layers: 4,
            lm_heads: 4,
            max_seq_len: 512,
            query_count: 8,
            qformer_width: 64,
            qformer_heads: 4,
            qformer_layers: 1,
            d_mem: 64,
            memory_capacity: DEFAULT_CAPACITY,
            text_encoder_layers: 2,
            text_encoder_heads: 4,
            d_img: 32,
            image_encoder_width: 64,
            image_encoder_layers: 2,
            image_encoder_heads: 4,
            abstractor_queries: 8,
            lora_rank: 8,
            lora_alpha: 16.0,
            encoder_positions: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size != VOCAB_SIZE {
            return err(format!(
                "vocab_size must be {VOCAB_SIZE} for the byte tokenizer, got {}",
                self.vocab_size
            ));
        }
        let positive = [
            ("d_lm", self.d_lm),
            ("lm_layers", self.lm_layers),
            ("lm_heads", self.lm_heads),
            ("max_seq_len", self.max_seq_len),
            ("query_count", self.query_count),
            ("qformer_width", self.qformer_width),
            ("qformer_heads", self.qformer_heads),
            ("qformer_layers", self.qformer_layers),
            ("d_mem", self.d_mem),
            ("text_encoder_heads", self.text_encoder_heads),
            ("d_img", self.d_img),
            ("image_encoder_width", self.image_encoder_width),
            ("image_encoder_heads", self.image_encoder_heads),
            ("abstractor_queries", self.abstractor_queries),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, width, heads) in [
            ("d_lm", self.d_lm, self.lm_heads),
            ("qformer_width", self.qformer_width, self.qformer_heads),
            ("d_mem", self.d_mem, self.text_encoder_heads),
            (
                "image_encoder_width",
                self.image_encoder_width,
                self.image_encoder_heads,
            ),
        ] {
            if width % heads != 0 {
                return err(format!("{name}={width} is not divisible by {heads} heads"));
            }
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return err(format!(
                "lora_alpha must be positive, got {}",
                self.lora_alpha
            ));
        }
        // BOS + Human: + image + " " + AI: + one caption token + EOA
        let shortest = 6 + self.abstractor_queries;
        if self.max_seq_len < shortest {
            return err(format!(
                "max_seq_len {} cannot hold the shortest prompt ({shortest} tokens)",
                self.max_seq_len
            ));
        }
        Ok(())
    }

    /// A reduced architecture for quick experiments and tests.
    pub fn small() -> Self {
        Self {
            d_lm: 32,
            lm_layers: 2,
            lm_heads: 2,
            max_seq_len: 128,
            query_count: 4,
            qformer_width: 32,
            qformer_heads: 2,
            d_mem: 32,
            memory_capacity: 8,
            text_encoder_layers: 1,
            text_encoder_heads: 2,
            d_img: 8,
            image_encoder_width: 32,
            image_encoder_layers: 1,
            image_encoder_heads: 2,
            abstractor_queries: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            ..Self::default()
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}
