// Toy stand-ins for the sentence and image feature extractors. Both are
// small bidirectional transformer encoders that read out a [CLS] position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{add_positions, Builder, FeedForward, LayerNormParams, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::{CLS, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm: LayerNormParams,
    pub attn: AttentionParams,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm: s.layer_norm("norm", width),
            attn: AttentionParams::new(&mut s, "attn", width, width, heads)?,
            ffn: FeedForward::new(&mut s, "ffn", width, 2 * width),
        })
    }

    /// Bidirectional pre-norm block.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let a = multi_head_attention(s, h, h, &self.attn, None)?;
        let x = s.tape.add(x, a)?;
        self.ffn.forward(s, x)
    }
}

/// Sentence encoder: byte embeddings, `[CLS]` prepended, `[CLS]` output read out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNormParams,
    pub width: usize,
    pub positional: bool,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        width: usize,
        layers: usize,
        heads: usize,
        positional: bool,
    ) -> Result<Self> {
        let mut s = b.scope("text_encoder");
        let embedding = s.gaussian("embedding", &[VOCAB_SIZE, width], 1.0);
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("layer{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            layers,
            final_norm: s.layer_norm("final_norm", width),
            width,
            positional,
        })
    }

    /// `[1, width]` `[CLS]` representation of `ids`.
    pub fn forward_cls(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("turn text"));
        }
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(CLS);
        seq.extend_from_slice(ids);
        let table = s.param(self.embedding);
        let mut x = s.tape.embedding(table, &seq)?;
        if self.positional {
            x = add_positions(s, x, 0)?;
        }
        for layer in &self.layers {
            x = layer.forward(s, x)?;
        }
        let x = self.final_norm.forward(s, x)?;
        s.tape.slice_rows(x, 0, 1)
    }

    pub fn encode_turn_cls(&self, store: &ParamStore, ids: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(store);
        let v = self.forward_cls(&mut s, ids)?;
        Ok(s.tape.value(v).data().to_vec())
    }
}

/// Patch-feature encoder: projects `[p, d_img]` patches to the encoder
/// width, prepends a learned `[CLS]` row and runs bidirectional layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub input: Linear,
    pub cls: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNormParams,
    pub to_memory: Linear,
    pub d_img: usize,
    pub width: usize,
    pub positional: bool,
}

pub struct ImageEncoding {
    /// `[1, width]`
    pub cls: Var,
    /// `[p, width]`
    pub patches: Var,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        d_img: usize,
        width: usize,
        d_mem: usize,
        layers: usize,
        heads: usize,
        positional: bool,
    ) -> Result<Self> {
        let mut s = b.scope("image_encoder");
        let input = Linear::new(&mut s, "input", d_img, width, true);
        let cls = s.gaussian("cls", &[1, width], 1.0);
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("layer{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            cls,
            layers,
            final_norm: s.layer_norm("final_norm", width),
            to_memory: Linear::new(&mut s, "to_memory", width, d_mem, true),
            d_img,
            width,
            positional,
        })
    }

    pub fn forward(&self, s: &mut Session, patches: &Tensor) -> Result<ImageEncoding> {
        if patches.rank() != 2 || patches.cols() != self.d_img {
            return Err(Error::Config(format!(
                "image patches have shape {:?}, expected [p, {}]",
                patches.shape(),
                self.d_img
            )));
        }
        let p = patches.rows();
        let x = s.tape.constant(patches.clone());
        let mut x = self.input.forward(s, x)?;
        if self.positional {
            x = add_positions(s, x, 1)?;
        }
        let cls = s.param(self.cls);
        let mut x = s.tape.concat_rows(&[cls, x])?;
        for layer in &self.layers {
            x = layer.forward(s, x)?;
        }
        let x = self.final_norm.forward(s, x)?;
        Ok(ImageEncoding {
            cls: s.tape.slice_rows(x, 0, 1)?,
            patches: s.tape.slice_rows(x, 1, p + 1)?,
        })
    }

    pub fn encode_image_cls(&self, store: &ParamStore, patches: &Tensor) -> Result<Vec<f64>> {
        let mut s = Session::inference(store);
        let enc = self.forward(&mut s, patches)?;
        let v = self.to_memory.forward(&mut s, enc.cls)?;
        Ok(s.tape.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamGroup;
    use crate::tokenizer::encode;

    fn text(seed: u64, positional: bool) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::TextEncoder, "m");
        let enc = TextEncoder::new(&mut b, 16, 2, 2, positional).unwrap();
        (store, enc)
    }

    fn image(seed: u64, positional: bool) -> (ParamStore, ImageEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::ImageEncoder, "m");
        let enc = ImageEncoder::new(&mut b, 6, 16, 12, 1, 2, positional).unwrap();
        (store, enc)
    }

    #[test]
    fn text_cls_is_deterministic() {
        let (store, enc) = text(1, true);
        let a = enc.encode_turn_cls(&store, &encode("hello there")).unwrap();
        let b = enc.encode_turn_cls(&store, &encode("hello there")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn different_texts_give_different_embeddings() {
        for seed in 0..5 {
            let (store, enc) = text(seed, true);
            let a = enc
                .encode_turn_cls(&store, &encode("the box is RED."))
                .unwrap();
            let b = enc
                .encode_turn_cls(&store, &encode("the cup is BLUE."))
                .unwrap();
            let dist: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 1e-3, "seed {seed}: embeddings collapsed ({dist})");
        }
    }

    #[test]
    fn single_token_turn_is_finite() {
        let (store, enc) = text(2, true);
        let v = enc.encode_turn_cls(&store, &[b'x' as usize]).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn empty_turn_rejected() {
        let (store, enc) = text(2, true);
        assert!(matches!(
            enc.encode_turn_cls(&store, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn image_cls_contracts() {
        let (store, enc) = image(3, true);
        let one = Tensor::full(&[1, 6], 0.5);
        let a = enc.encode_image_cls(&store, &one).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, enc.encode_image_cls(&store, &one).unwrap());

        let bad = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            enc.encode_image_cls(&store, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patch_order_matters_with_positions() {
        let (store, enc) = image(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let mut swapped = patches.data().to_vec();
        swapped.rotate_left(6);
        let swapped = Tensor::new(vec![3, 6], swapped).unwrap();
        let a = enc.encode_image_cls(&store, &patches).unwrap();
        let b = enc.encode_image_cls(&store, &swapped).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));

        // without positions the encoder is a set function of the patches
        let (store, enc) = image(4, false);
        let a = enc.encode_image_cls(&store, &patches).unwrap();
        let b = enc.encode_image_cls(&store, &swapped).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    }
}
