//! A small pre-norm transformer with segment/position embeddings, prefix-LM
//! or bidirectional attention, and the task heads.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use crate::textproc::{AttentionSpec, SequenceInput};

const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub max_positions: usize,
    pub n_emotions: usize,
    pub init_std: f64,
    /// Token embeddings get their own scale so that never-trained tokens
    /// stay distinguishable next to the learned position embeddings.
    pub token_init_std: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_positions: usize, n_emotions: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            n_segments: 2,
            max_positions,
            n_emotions,
            init_std: 0.02,
            token_init_std: 0.02,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.n_segments,
            self.max_positions,
            self.n_emotions,
        ];
        if positive.contains(&0) {
            return Err(Error::Spec("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Spec(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSlots<T> {
    ln1_g: T,
    ln1_b: T,
    wq: T,
    bq: T,
    wk: T,
    bk: T,
    wv: T,
    bv: T,
    wo: T,
    bo: T,
    ln2_g: T,
    ln2_b: T,
    w1: T,
    b1: T,
    w2: T,
    b2: T,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots<T> {
    tok: T,
    seg: T,
    pos: T,
    layers: Vec<LayerSlots<T>>,
    lnf_g: T,
    lnf_b: T,
    lm_bias: T,
    rel_w: T,
    rel_b: T,
    emo_w: T,
    emo_b: T,
}

impl Slots<usize> {
    fn bind(&self, g: &mut Graph, params: &ParamSet) -> Slots<Var> {
        let mut p = |slot: usize| g.param(slot, params.get(slot));
        let tok = p(self.tok);
        let seg = p(self.seg);
        let pos = p(self.pos);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSlots {
                ln1_g: p(l.ln1_g),
                ln1_b: p(l.ln1_b),
                wq: p(l.wq),
                bq: p(l.bq),
                wk: p(l.wk),
                bk: p(l.bk),
                wv: p(l.wv),
                bv: p(l.bv),
                wo: p(l.wo),
                bo: p(l.bo),
                ln2_g: p(l.ln2_g),
                ln2_b: p(l.ln2_b),
                w1: p(l.w1),
                b1: p(l.b1),
                w2: p(l.w2),
                b2: p(l.b2),
            })
            .collect();
        Slots {
            tok,
            seg,
            pos,
            layers,
            lnf_g: p(self.lnf_g),
            lnf_b: p(self.lnf_b),
            lm_bias: p(self.lm_bias),
            rel_w: p(self.rel_w),
            rel_b: p(self.rel_b),
            emo_w: p(self.emo_w),
            emo_b: p(self.emo_b),
        }
    }
}

/// Model parameters plus the layout that names them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    slots: Slots<usize>,
}

/// Parameters placed on a graph, ready for forward passes.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Slots<Var>,
}

impl Model {
    /// Weights ~ N(0, init_std^2), biases 0, layer-norm gains 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let d = config.d_model;
        let mut params = ParamSet::new();
        let tok = params.push(
            "embed.token",
            Tensor::randn(&[config.vocab_size, d], config.token_init_std, &mut rng),
        );
        let mut randn = |params: &mut ParamSet, name: String, shape: &[usize]| {
            params.push(name, Tensor::randn(shape, std, &mut rng))
        };
        let zeros = |params: &mut ParamSet, name: String, shape: &[usize]| {
            params.push(name, Tensor::zeros(shape))
        };
        let ones = |params: &mut ParamSet, name: String, n: usize| {
            params.push(name, Tensor::new(vec![n], vec![1.0; n]).expect("finite"))
        };

        let seg = randn(&mut params, "embed.segment".into(), &[config.n_segments, d]);
        let pos = randn(
            &mut params,
            "embed.position".into(),
            &[config.max_positions, d],
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerSlots {
                ln1_g: ones(&mut params, n("ln1.gain"), d),
                ln1_b: zeros(&mut params, n("ln1.bias"), &[d]),
                wq: randn(&mut params, n("attn.wq"), &[d, d]),
                bq: zeros(&mut params, n("attn.bq"), &[d]),
                wk: randn(&mut params, n("attn.wk"), &[d, d]),
                bk: zeros(&mut params, n("attn.bk"), &[d]),
                wv: randn(&mut params, n("attn.wv"), &[d, d]),
                bv: zeros(&mut params, n("attn.bv"), &[d]),
                wo: randn(&mut params, n("attn.wo"), &[d, d]),
                bo: zeros(&mut params, n("attn.bo"), &[d]),
                ln2_g: ones(&mut params, n("ln2.gain"), d),
                ln2_b: zeros(&mut params, n("ln2.bias"), &[d]),
                w1: randn(&mut params, n("ffn.w1"), &[d, config.d_ff]),
                b1: zeros(&mut params, n("ffn.b1"), &[config.d_ff]),
                w2: randn(&mut params, n("ffn.w2"), &[config.d_ff, d]),
                b2: zeros(&mut params, n("ffn.b2"), &[d]),
            });
        }
        let slots = Slots {
            tok,
            seg,
            pos,
            layers,
            lnf_g: ones(&mut params, "final_ln.gain".into(), d),
            lnf_b: zeros(&mut params, "final_ln.bias".into(), &[d]),
            lm_bias: zeros(&mut params, "lm.bias".into(), &[config.vocab_size]),
            rel_w: randn(&mut params, "relevance.w".into(), &[d, 1]),
            rel_b: zeros(&mut params, "relevance.b".into(), &[1]),
            emo_w: randn(&mut params, "emotion.w".into(), &[d, config.n_emotions]),
            emo_b: zeros(&mut params, "emotion.b".into(), &[config.n_emotions]),
        };
        Ok(Model {
            config,
            params,
            slots,
        })
    }

    pub fn bind<'m>(&'m self, g: &mut Graph) -> Bound<'m> {
        Bound {
            model: self,
            vars: self.slots.bind(g, &self.params),
        }
    }

    /// Zeroes the relevance head (w = 0, b = 0).
    pub fn zero_relevance_head(&mut self) {
        for slot in [self.slots.rel_w, self.slots.rel_b] {
            self.params.get_mut(slot).data_mut().fill(0.0);
        }
    }

    pub fn zero_emotion_head(&mut self) {
        for slot in [self.slots.emo_w, self.slots.emo_b] {
            self.params.get_mut(slot).data_mut().fill(0.0);
        }
    }

    /// Zeroes the tied token embeddings and the LM bias, making every LM
    /// and MLM distribution uniform.
    pub fn zero_lm(&mut self) {
        for slot in [self.slots.tok, self.slots.lm_bias] {
            self.params.get_mut(slot).data_mut().fill(0.0);
        }
    }
}

impl Bound<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Hidden states `[len x d_model]` after the final layer norm.
    pub fn encode(&self, g: &mut Graph, input: &SequenceInput) -> Result<Var> {
        self.encode_traced(g, input, None)
    }

    /// Like [`Bound::encode`], also returning every attention probability
    /// matrix (per layer, per head).
    pub fn encode_traced(
        &self,
        g: &mut Graph,
        input: &SequenceInput,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let n = input.token_ids.len();
        if n == 0 {
            return Err(Error::Precondition("empty input sequence".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::Index {
                index: n - 1,
                len: cfg.max_positions,
            });
        }
        let v = &self.vars;
        let tok = g.embedding(v.tok, &input.token_ids)?;
        let seg_ids: Vec<u32> = input.segment_ids.iter().map(|&s| s as u32).collect();
        let seg = g.embedding(v.seg, &seg_ids)?;
        let pos_ids: Vec<u32> = input.position_ids.iter().map(|&p| p as u32).collect();
        let pos = g.embedding(v.pos, &pos_ids)?;
        let mut x = g.add(tok, seg)?;
        x = g.add(x, pos)?;

        let mask: Option<Rc<[bool]>> = match input.attention {
            AttentionSpec::FullBidirectional => None,
            spec => Some(
                (0..n * n)
                    .map(|k| !spec.allows(k / n, k % n))
                    .collect::<Vec<_>>()
                    .into(),
            ),
        };

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &v.layers {
            let h = g.layer_norm(x, layer.ln1_g, layer.ln1_b, cfg.ln_eps)?;
            let q = affine(g, h, layer.wq, layer.bq)?;
            let k = affine(g, h, layer.wk, layer.bk)?;
            let vv = affine(g, h, layer.wv, layer.bv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(vv, head * dh, dh)?;
                let mut scores = g.matmul_t(qh, kh)?;
                scores = g.scale(scores, scale)?;
                if let Some(m) = &mask {
                    scores = g.masked_fill(scores, m.clone(), MASKED_SCORE)?;
                }
                let probs = g.softmax_rows(scores)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(probs);
                }
                heads.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat_cols(&heads)?;
            let attn = affine(g, attn, layer.wo, layer.bo)?;
            x = g.add(x, attn)?;

            let h = g.layer_norm(x, layer.ln2_g, layer.ln2_b, cfg.ln_eps)?;
            let f = affine(g, h, layer.w1, layer.b1)?;
            let f = g.gelu(f)?;
            let f = affine(g, f, layer.w2, layer.b2)?;
            x = g.add(x, f)?;
        }
        g.layer_norm(x, v.lnf_g, v.lnf_b, cfg.ln_eps)
    }

    /// Tied-embedding vocabulary logits for the given rows of `hidden`.
    pub fn lm_logits_at(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let sel = g.select_rows(hidden, rows)?;
        let logits = g.matmul_t(sel, self.vars.tok)?;
        g.add_row(logits, self.vars.lm_bias)
    }

    /// Logits for every position: `[len x vocab]`.
    pub fn lm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let logits = g.matmul_t(hidden, self.vars.tok)?;
        g.add_row(logits, self.vars.lm_bias)
    }

    /// `sigmoid(w . h_CLS + b)` as a `1 x 1` node.
    pub fn relevance_prob(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let cls = g.select_rows(hidden, &[0])?;
        let z = affine(g, cls, self.vars.rel_w, self.vars.rel_b)?;
        g.sigmoid(z)
    }

    /// `W_E h_CLS + b_E` as a `1 x E` node.
    pub fn emotion_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let cls = g.select_rows(hidden, &[0])?;
        affine(g, cls, self.vars.emo_w, self.vars.emo_b)
    }

    /// Tied-projection logits at `positions`; `None` when there are none.
    pub fn mlm_logits(
        &self,
        g: &mut Graph,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Option<Var>> {
        if positions.is_empty() {
            return Ok(None);
        }
        let len = g.value(hidden).rows();
        if let Some(&p) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::Index { index: p, len });
        }
        self.lm_logits_at(g, hidden, positions).map(Some)
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}
