use rand::RngCore;

use super::config::{CombineMode, ModelConfig};
use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::error::{Result, SmithError};

/// Standard deviation of the masked-block vector.
pub const MASKED_BLOCK_STD: f64 = 0.02;
/// Token embeddings start at `EMBED_SCALE / sqrt(H)`, so logits of the tied
/// word-prediction head start with standard deviation near `EMBED_SCALE`.
pub const EMBED_SCALE: f64 = 0.5;
/// Initial slope of the cosine-to-logit calibration of the matching head.
pub const MATCH_SCALE_INIT: f64 = 5.0;

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub attn_gamma: ParamId,
    pub attn_beta: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_gamma: ParamId,
    pub ffn_beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub sentence_layers: Vec<LayerIds>,
    pub block_proj: DenseIds,
    pub document_layers: Vec<LayerIds>,
    pub doc_proj: DenseIds,
    /// `(W [H, V], v [V])`, present only in attention combine mode.
    pub combine: Option<(ParamId, ParamId)>,
    /// Learnable vector substituted for masked sentence blocks.
    pub masked_block: ParamId,
    /// Output bias of the tied masked-word prediction head.
    pub word_bias: ParamId,
    pub match_scale: ParamId,
    pub match_bias: ParamId,
}

/// All learnable arrays of the model. Both towers of a document pair use
/// this one set.
#[derive(Debug, Clone, PartialEq)]
pub struct SmithParameters {
    pub store: ParamStore,
}

struct Builder<'r> {
    store: ParamStore,
    /// `None` builds an all-zero skeleton (shapes only).
    rng: Option<&'r mut dyn RngCore>,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::randn(shape, std, rng),
            None => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn dense(&mut self, prefix: &str, inp: usize, out: usize) -> Result<DenseIds> {
        Ok(DenseIds {
            w: self.normal(format!("{prefix}.weight"), &[inp, out], fan_in_std(inp))?,
            b: self.fill(format!("{prefix}.bias"), &[out], 0.0)?,
        })
    }

    fn layer(&mut self, prefix: &str, h: usize, ffn: usize) -> Result<LayerIds> {
        let q = self.dense(&format!("{prefix}.attn.query"), h, h)?;
        let k = self.dense(&format!("{prefix}.attn.key"), h, h)?;
        let v = self.dense(&format!("{prefix}.attn.value"), h, h)?;
        let out = self.dense(&format!("{prefix}.attn.output"), h, h)?;
        let attn_gamma = self.fill(format!("{prefix}.attn.norm.gamma"), &[h], 1.0)?;
        let attn_beta = self.fill(format!("{prefix}.attn.norm.beta"), &[h], 0.0)?;
        let ffn_in = self.dense(&format!("{prefix}.ffn.input"), h, ffn)?;
        let ffn_out = self.dense(&format!("{prefix}.ffn.output"), ffn, h)?;
        let ffn_gamma = self.fill(format!("{prefix}.ffn.norm.gamma"), &[h], 1.0)?;
        let ffn_beta = self.fill(format!("{prefix}.ffn.norm.beta"), &[h], 0.0)?;
        Ok(LayerIds {
            q_w: q.w,
            q_b: q.b,
            k_w: k.w,
            k_b: k.b,
            v_w: v.w,
            v_b: v.b,
            out_w: out.w,
            out_b: out.b,
            attn_gamma,
            attn_beta,
            ffn_in_w: ffn_in.w,
            ffn_in_b: ffn_in.b,
            ffn_out_w: ffn_out.w,
            ffn_out_b: ffn_out.b,
            ffn_gamma,
            ffn_beta,
        })
    }
}

fn layer_ids(store: &ParamStore, prefix: &str) -> Result<LayerIds> {
    let id = |suffix: &str| lookup(store, &format!("{prefix}.{suffix}"));
    Ok(LayerIds {
        q_w: id("attn.query.weight")?,
        q_b: id("attn.query.bias")?,
        k_w: id("attn.key.weight")?,
        k_b: id("attn.key.bias")?,
        v_w: id("attn.value.weight")?,
        v_b: id("attn.value.bias")?,
        out_w: id("attn.output.weight")?,
        out_b: id("attn.output.bias")?,
        attn_gamma: id("attn.norm.gamma")?,
        attn_beta: id("attn.norm.beta")?,
        ffn_in_w: id("ffn.input.weight")?,
        ffn_in_b: id("ffn.input.bias")?,
        ffn_out_w: id("ffn.output.weight")?,
        ffn_out_b: id("ffn.output.bias")?,
        ffn_gamma: id("ffn.norm.gamma")?,
        ffn_beta: id("ffn.norm.beta")?,
    })
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| SmithError::InvalidInput(format!("missing parameter `{name}`")))
}

impl SmithParameters {
    /// Dense weights `N(0, 1/fan_in)`, biases zero, layer-norm gains one,
    /// matching head at scale 5 and bias 0.
    pub fn init<R: RngCore>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    fn build(config: &ModelConfig, rng: Option<&mut dyn RngCore>) -> Result<Self> {
        config.validate()?;
        let (h, ffn) = (config.hidden, config.ffn_dim());
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        b.normal(
            "embeddings.token".into(),
            &[config.vocab_size, h],
            EMBED_SCALE / (h as f64).sqrt(),
        )?;
        for i in 0..config.l1 {
            b.layer(&format!("sentence.layer{i}"), h, ffn)?;
        }
        b.dense("sentence.projection", h, h)?;
        for i in 0..config.l2 {
            b.layer(&format!("document.layer{i}"), h, ffn)?;
        }
        b.dense("document.projection", h, h)?;
        if config.combine_mode == CombineMode::Attention {
            let v = config.attn_combine_dim;
            b.normal("combine.weight".into(), &[h, v], fan_in_std(h))?;
            b.normal("combine.vector".into(), &[v], fan_in_std(v))?;
        }
        b.normal("pretrain.masked_block".into(), &[h], MASKED_BLOCK_STD)?;
        b.fill("pretrain.word_bias".into(), &[config.vocab_size], 0.0)?;
        b.fill("match.scale".into(), &[1], MATCH_SCALE_INIT)?;
        b.fill("match.bias".into(), &[1], 0.0)?;
        Ok(Self { store: b.store })
    }

    /// Expected `(name, shape)` of every parameter for `config`, in storage
    /// order.
    pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let p = Self::build(config, None)?;
        Ok(p.store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect())
    }

    pub fn layout(&self, config: &ModelConfig) -> Result<Layout> {
        let s = &self.store;
        let dense = |prefix: &str| -> Result<DenseIds> {
            Ok(DenseIds {
                w: lookup(s, &format!("{prefix}.weight"))?,
                b: lookup(s, &format!("{prefix}.bias"))?,
            })
        };
        let combine = if config.combine_mode == CombineMode::Attention {
            Some((lookup(s, "combine.weight")?, lookup(s, "combine.vector")?))
        } else {
            None
        };
        Ok(Layout {
            token_embedding: lookup(s, "embeddings.token")?,
            sentence_layers: (0..config.l1)
                .map(|i| layer_ids(s, &format!("sentence.layer{i}")))
                .collect::<Result<_>>()?,
            block_proj: dense("sentence.projection")?,
            document_layers: (0..config.l2)
                .map(|i| layer_ids(s, &format!("document.layer{i}")))
                .collect::<Result<_>>()?,
            doc_proj: dense("document.projection")?,
            combine,
            masked_block: lookup(s, "pretrain.masked_block")?,
            word_bias: lookup(s, "pretrain.word_bias")?,
            match_scale: lookup(s, "match.scale")?,
            match_bias: lookup(s, "match.bias")?,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.store.id(name).map(|id| self.store.get(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.store.id(name).map(|id| self.store.get_mut(id))
    }
}
