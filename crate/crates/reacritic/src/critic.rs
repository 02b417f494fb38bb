//! The reasoning critic.
//!
//! A state–action pair is embedded once, expanded into `horizontal_steps`
//! parallel tokens (each with its own learned positional encoding, plus
//! optional Gaussian noise during training), refined by `vertical_blocks`
//! pre-norm transformer blocks attending across the token axis, aggregated
//! by attention into a single vector, and mapped to a scalar Q-value.
//!
//! The `(H=1, V=1)` configuration is the plain transformer-critic baseline
//! and runs through exactly the same code path.

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::params::{Init, ParamSet};
use crate::rng::Stream;
use crate::tensor::{MacClass, Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("invalid critic config: {0}")]
    Config(String),
}

/// Architecture of one critic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    /// H — number of parallel reasoning tokens.
    pub horizontal_steps: usize,
    /// V — number of stacked transformer blocks.
    pub vertical_blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Std-dev of the Gaussian perturbation added to expanded tokens.
    pub noise_std: f64,
    /// Whether token noise is also applied outside training mode.
    pub noise_in_eval: bool,
}

impl CriticConfig {
    /// `ffn_dim` defaults to `4·hidden_dim`, heads to 4.
    pub fn new(state_dim: usize, action_dim: usize, hidden_dim: usize, h: usize, v: usize) -> Self {
        CriticConfig {
            state_dim,
            action_dim,
            hidden_dim,
            horizontal_steps: h,
            vertical_blocks: v,
            heads: 4,
            ffn_dim: 4 * hidden_dim,
            noise_std: 0.05,
            noise_in_eval: false,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn validate(&self) -> Result<(), CriticError> {
        if self.state_dim == 0 || self.action_dim == 0 || self.hidden_dim == 0 {
            return Err(CriticError::Config("dimensions must be positive".into()));
        }
        if self.horizontal_steps < 1 || self.vertical_blocks < 1 {
            return Err(CriticError::Config(
                "horizontal_steps and vertical_blocks must be >= 1".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(CriticError::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.noise_std < 0.0 {
            return Err(CriticError::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count. Only the positional table depends
    /// on `horizontal_steps`.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let embed = (self.state_dim + self.action_dim) * d + 2 * d;
        let pos = self.horizontal_steps * d;
        let per_block = 2 * (2 * d)                  // two layer norms
            + 4 * (d * d + d)                        // q/k/v/out projections
            + d * self.ffn_dim + self.ffn_dim        // ffn in
            + self.ffn_dim * d + d;                  // ffn out
        let head = d + 2 * d + d; // aggregation vector, final norm, q vector
        embed + pos + self.vertical_blocks * per_block + head
    }
}

/// Leading-term multiply-accumulate counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Attention-score and attention-apply MACs: `2·B·V·H²·d_h`.
    pub attention: u64,
    /// Feed-forward MACs: `2·B·V·H·d_h·ffn_dim`.
    pub ffn: u64,
}

/// Attention/FFN multiply-accumulate counts for a batch of size `batch`.
pub fn flop_count(config: &CriticConfig, batch: usize) -> FlopCount {
    let b = batch as u64;
    let h = config.horizontal_steps as u64;
    let v = config.vertical_blocks as u64;
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    FlopCount {
        attention: 2 * b * v * h * h * d,
        ffn: 2 * b * v * h * d * f,
    }
}

struct BlockLayout {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct Layout {
    w_embed: usize,
    embed_ln_gain: usize,
    embed_ln_bias: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    agg_w: usize,
    final_ln_gain: usize,
    final_ln_bias: usize,
    q_w: usize,
}

/// Everything interesting a traced forward pass produced, as tape ids.
pub struct ForwardTrace {
    /// Q-values, shape `[B]`.
    pub q: TensorId,
    /// Per-block multi-head attention weights, each `[B, heads, H, H]`.
    pub attention_weights: Vec<TensorId>,
    /// Aggregation weights over tokens, `[B, H]`.
    pub aggregation_weights: TensorId,
    /// Aggregated representation before the output head, `[B, d_h]`.
    pub aggregated: TensorId,
}

/// The reasoning critic network. Owns its parameters; forward passes are
/// recorded on a caller-supplied tape.
#[derive(Clone)]
pub struct ReaCritic {
    config: CriticConfig,
    params: ParamSet,
}

impl ReaCritic {
    pub fn new(config: CriticConfig, rng: &mut Stream) -> Result<Self, CriticError> {
        config.validate()?;
        let d = config.hidden_dim;
        let din = config.state_dim + config.action_dim;
        let mut p = ParamSet::new();
        p.add("w_embed", vec![din, d], Init::ScaledGaussian { fan_in: din }, rng);
        p.add("embed_ln_gain", vec![d], Init::Ones, rng);
        p.add("embed_ln_bias", vec![d], Init::Zeros, rng);
        p.add(
            "pos",
            vec![config.horizontal_steps, d],
            Init::Gaussian { std: 0.02 },
            rng,
        );
        for v in 0..config.vertical_blocks {
            let pre = format!("blk{v}");
            p.add(&format!("{pre}_ln1_gain"), vec![d], Init::Ones, rng);
            p.add(&format!("{pre}_ln1_bias"), vec![d], Init::Zeros, rng);
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(
                    &format!("{pre}_{w}"),
                    vec![d, d],
                    Init::ScaledGaussian { fan_in: d },
                    rng,
                );
                p.add(&format!("{pre}_{}", w.replace('w', "b")), vec![d], Init::Zeros, rng);
            }
            p.add(&format!("{pre}_ln2_gain"), vec![d], Init::Ones, rng);
            p.add(&format!("{pre}_ln2_bias"), vec![d], Init::Zeros, rng);
            p.add(
                &format!("{pre}_w1"),
                vec![d, config.ffn_dim],
                Init::ScaledGaussian { fan_in: d },
                rng,
            );
            p.add(&format!("{pre}_b1"), vec![config.ffn_dim], Init::Zeros, rng);
            p.add(
                &format!("{pre}_w2"),
                vec![config.ffn_dim, d],
                Init::ScaledGaussian { fan_in: config.ffn_dim },
                rng,
            );
            p.add(&format!("{pre}_b2"), vec![d], Init::Zeros, rng);
        }
        p.add("agg_w", vec![d, 1], Init::ScaledGaussian { fan_in: d }, rng);
        p.add("final_ln_gain", vec![d], Init::Ones, rng);
        p.add("final_ln_bias", vec![d], Init::Zeros, rng);
        p.add("q_w", vec![d, 1], Init::ScaledGaussian { fan_in: d }, rng);
        Ok(ReaCritic { config, params: p })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        // entry order mirrors `new`; 4 header entries, 16 per block
        let mut i = 0;
        let mut next = || {
            let v = i;
            i += 1;
            v
        };
        let w_embed = next();
        let embed_ln_gain = next();
        let embed_ln_bias = next();
        let pos = next();
        let mut blocks = Vec::new();
        for _ in 0..self.config.vertical_blocks {
            blocks.push(BlockLayout {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        Layout {
            w_embed,
            embed_ln_gain,
            embed_ln_bias,
            pos,
            blocks,
            agg_w: next(),
            final_ln_gain: next(),
            final_ln_bias: next(),
            q_w: next(),
        }
    }

    /// `LayerNorm(W_embed · [state ∥ action])`, shape `[B, d_h]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        states: TensorId,
        actions: TensorId,
    ) -> TensorId {
        let l = self.layout();
        assert_eq!(
            *tape.shape(states).last().unwrap(),
            self.config.state_dim,
            "state feature dim mismatch"
        );
        assert_eq!(
            *tape.shape(actions).last().unwrap(),
            self.config.action_dim,
            "action feature dim mismatch"
        );
        let joint = tape.concat_last(states, actions);
        let proj = tape.matmul(joint, bound[l.w_embed]);
        tape.layer_norm(proj, bound[l.embed_ln_gain], bound[l.embed_ln_bias], 1e-5)
    }

    /// Tiles the base embedding into `[B, H, d_h]` tokens, adds the
    /// positional table, and (in training mode) per-element Gaussian noise
    /// drawn from `rng`.
    pub fn horizontal_expand(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        z0: TensorId,
        training: bool,
        rng: &mut Stream,
    ) -> TensorId {
        let l = self.layout();
        let tokens = tape.expand_add_pos(z0, bound[l.pos]);
        let apply_noise =
            self.config.noise_std > 0.0 && (training || self.config.noise_in_eval);
        if !apply_noise {
            return tokens;
        }
        let n = tape.data(tokens).len();
        let dist = Normal::new(0.0, self.config.noise_std).unwrap();
        let noise: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let shape = tape.shape(tokens).to_vec();
        let noise_id = tape.constant(shape, noise);
        tape.add(tokens, noise_id)
    }

    /// One pre-norm block: `Z' = Z + MHSA(LN(Z))`, `out = Z' + FFN(LN(Z'))`.
    /// Returns `(out, attention_weights)`.
    pub fn transformer_block(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        block: usize,
        z: TensorId,
    ) -> (TensorId, TensorId) {
        let l = &self.layout().blocks[block];
        let (b, h, d) = {
            let s = tape.shape(z);
            (s[0], s[1], s[2])
        };
        let heads = self.config.heads;
        let dk = d / heads;

        let xn = tape.layer_norm(z, bound[l.ln1_gain], bound[l.ln1_bias], 1e-5);
        let project = |tape: &mut Tape, w: usize, bias: usize| {
            let p = tape.matmul(xn, bound[w]);
            tape.add_broadcast(p, bound[bias])
        };
        let q = project(tape, l.wq, l.bq);
        let k = project(tape, l.wk, l.bk);
        let v = project(tape, l.wv, l.bv);

        let split = |tape: &mut Tape, x: TensorId| {
            let r = tape.reshape(x, vec![b, h, heads, dk]);
            tape.permute(r, &[0, 2, 1, 3]) // [B, heads, H, dk]
        };
        let qh = split(tape, q);
        let kh = split(tape, k);
        let vh = split(tape, v);
        let kt = tape.permute(kh, &[0, 1, 3, 2]); // [B, heads, dk, H]

        tape.set_mac_class(MacClass::Attention);
        let scores_raw = tape.matmul(qh, kt); // [B, heads, H, H]
        tape.set_mac_class(MacClass::Other);
        let scores = tape.mul_scalar(scores_raw, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax(scores, 3);
        tape.set_mac_class(MacClass::Attention);
        let ctx = tape.matmul(attn, vh); // [B, heads, H, dk]
        tape.set_mac_class(MacClass::Other);
        let merged = tape.permute(ctx, &[0, 2, 1, 3]);
        let merged = tape.reshape(merged, vec![b, h, d]);
        let proj = tape.matmul(merged, bound[l.wo]);
        let attn_out = tape.add_broadcast(proj, bound[l.bo]);
        let z1 = tape.add(z, attn_out);

        let yn = tape.layer_norm(z1, bound[l.ln2_gain], bound[l.ln2_bias], 1e-5);
        tape.set_mac_class(MacClass::Ffn);
        let f1 = tape.matmul(yn, bound[l.w1]);
        tape.set_mac_class(MacClass::Other);
        let f1 = tape.add_broadcast(f1, bound[l.b1]);
        let f1 = tape.gelu(f1);
        tape.set_mac_class(MacClass::Ffn);
        let f2 = tape.matmul(f1, bound[l.w2]);
        tape.set_mac_class(MacClass::Other);
        let f2 = tape.add_broadcast(f2, bound[l.b2]);
        let out = tape.add(z1, f2);
        (out, attn)
    }

    /// Attention-weighted sum over the token axis. Returns
    /// `(weights [B, H], aggregated [B, d_h])`.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        tokens: TensorId,
    ) -> (TensorId, TensorId) {
        let l = self.layout();
        let (b, h, d) = {
            let s = tape.shape(tokens);
            (s[0], s[1], s[2])
        };
        let scores = tape.matmul(tokens, bound[l.agg_w]); // [B, H, 1]
        let scores = tape.reshape(scores, vec![b, h]);
        let weights = tape.softmax(scores, 1);
        let w_row = tape.reshape(weights, vec![b, 1, h]);
        let agg = tape.matmul(w_row, tokens); // [B, 1, d]
        let agg = tape.reshape(agg, vec![b, d]);
        (weights, agg)
    }

    /// Full pipeline with all intermediate attention tensors exposed.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        states: TensorId,
        actions: TensorId,
        training: bool,
        rng: &mut Stream,
    ) -> ForwardTrace {
        let l = self.layout();
        let z0 = self.embed(tape, bound, states, actions);
        let mut z = self.horizontal_expand(tape, bound, z0, training, rng);
        let mut attention_weights = Vec::with_capacity(self.config.vertical_blocks);
        for v in 0..self.config.vertical_blocks {
            let (out, attn) = self.transformer_block(tape, bound, v, z);
            attention_weights.push(attn);
            z = out;
        }
        let (agg_w, agg) = self.aggregate(tape, bound, z);
        let normed = tape.layer_norm(agg, bound[l.final_ln_gain], bound[l.final_ln_bias], 1e-5);
        let q = tape.matmul(normed, bound[l.q_w]); // [B, 1]
        let b = tape.shape(states)[0];
        let q = tape.reshape(q, vec![b]);
        ForwardTrace {
            q,
            attention_weights,
            aggregation_weights: agg_w,
            aggregated: agg,
        }
    }

    /// Q-values for a batch, shape `[B]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[TensorId],
        states: TensorId,
        actions: TensorId,
        training: bool,
        rng: &mut Stream,
    ) -> TensorId {
        self.forward_traced(tape, bound, states, actions, training, rng)
            .q
    }

    /// Evaluation-mode Q-values from raw slices; builds its own tape.
    pub fn q_eval(&self, states: &[f64], actions: &[f64], batch: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let s = tape.constant(vec![batch, self.config.state_dim], states.to_vec());
        let a = tape.constant(vec![batch, self.config.action_dim], actions.to_vec());
        // eval mode never touches the rng
        let mut rng = crate::rng::stream(0, "critic-eval-unused");
        let q = self.forward(&mut tape, &bound, s, a, false, &mut rng);
        tape.data(q).to_vec()
    }
}
