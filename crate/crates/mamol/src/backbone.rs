//! Per-modality encoders and the frozen transformer trunk blocks.
//!
//! Blocks are pre-norm: `x += Attn(LN1(x))`, then the feed-forward sublayer
//! reads `z = LN2(x)` and its output (optionally combined with an injected
//! expert residual) is added back onto the stream. Trunk parameters are
//! frozen; only encoders, experts, and the head train.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{gaussian, Binder, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Linear projection into model space plus a learned modality-type embedding
/// added to every token.
pub struct Encoder {
    pub w: ParamId,
    pub b: ParamId,
    pub emb: ParamId,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: usize,
        raw_dim: usize,
        d_model: usize,
    ) -> Encoder {
        let std = 1.0 / (raw_dim as f64).sqrt();
        Encoder {
            w: store.add(
                format!("enc.{modality}.w"),
                &[raw_dim, d_model],
                gaussian(rng, raw_dim * d_model, std),
                false,
            ),
            b: store.add(format!("enc.{modality}.b"), &[d_model], vec![0.0; d_model], false),
            emb: store.add(
                format!("enc.{modality}.emb"),
                &[d_model],
                gaussian(rng, d_model, 0.5),
                false,
            ),
        }
    }

    /// `x [rows × raw_dim] -> [rows × d_model]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = binder.bind(tape, store, self.w);
        let b = binder.bind(tape, store, self.b);
        let emb = binder.bind(tape, store, self.emb);
        let proj = tape.matmul(x, w)?;
        let proj = tape.add_row(proj, b)?;
        tape.add_row(proj, emb)
    }
}

/// One frozen transformer block.
pub struct Block {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub heads: usize,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
    ) -> Block {
        let std = 1.0 / (d_model as f64).sqrt();
        let std_ff = 1.0 / (d_ff as f64).sqrt();
        let mat = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize, s: f64| {
            store.add(name, &[rows, cols], gaussian(rng, rows * cols, s), true)
        };
        let vecp = |store: &mut ParamStore, name: String, n: usize, fill: f64| {
            store.add(name, &[n], vec![fill; n], true)
        };
        Block {
            wq: mat(store, rng, format!("{prefix}.wq"), d_model, d_model, std),
            bq: vecp(store, format!("{prefix}.bq"), d_model, 0.0),
            wk: mat(store, rng, format!("{prefix}.wk"), d_model, d_model, std),
            bk: vecp(store, format!("{prefix}.bk"), d_model, 0.0),
            wv: mat(store, rng, format!("{prefix}.wv"), d_model, d_model, std),
            bv: vecp(store, format!("{prefix}.bv"), d_model, 0.0),
            wo: mat(store, rng, format!("{prefix}.wo"), d_model, d_model, std),
            bo: vecp(store, format!("{prefix}.bo"), d_model, 0.0),
            ln1: (
                vecp(store, format!("{prefix}.ln1.g"), d_model, 1.0),
                vecp(store, format!("{prefix}.ln1.b"), d_model, 0.0),
            ),
            ln2: (
                vecp(store, format!("{prefix}.ln2.g"), d_model, 1.0),
                vecp(store, format!("{prefix}.ln2.b"), d_model, 0.0),
            ),
            w1: mat(store, rng, format!("{prefix}.ffn.w1"), d_model, d_ff, std),
            b1: vecp(store, format!("{prefix}.ffn.b1"), d_ff, 0.0),
            w2: mat(store, rng, format!("{prefix}.ffn.w2"), d_ff, d_model, std_ff),
            b2: vecp(store, format!("{prefix}.ffn.b2"), d_model, 0.0),
            heads,
        }
    }

    /// Multi-head self-attention sublayer with residual: returns
    /// `x + Wo·Attn(LN1(x))`. Attention runs independently per sample over
    /// its `rows_per_sample` contiguous token rows.
    pub fn attention(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        num_samples: usize,
        rows_per_sample: usize,
    ) -> Result<TensorId> {
        let (g1, b1) = (binder.bind(tape, store, self.ln1.0), binder.bind(tape, store, self.ln1.1));
        let a1 = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let wq = binder.bind(tape, store, self.wq);
        let bq = binder.bind(tape, store, self.bq);
        let wk = binder.bind(tape, store, self.wk);
        let bk = binder.bind(tape, store, self.bk);
        let wv = binder.bind(tape, store, self.wv);
        let bv = binder.bind(tape, store, self.bv);
        let q = tape.matmul(a1, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(a1, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(a1, wv)?;
        let v = tape.add_row(v, bv)?;

        let d_model = store.get(self.wq).shape[0];
        let dh = d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut sample_outs = Vec::with_capacity(num_samples);
        for s in 0..num_samples {
            let at = s * rows_per_sample;
            let qs = tape.narrow_rows(q, at, rows_per_sample)?;
            let ks = tape.narrow_rows(k, at, rows_per_sample)?;
            let vs = tape.narrow_rows(v, at, rows_per_sample)?;
            let mut merged: Option<TensorId> = None;
            for h in 0..self.heads {
                let qh = tape.narrow_cols(qs, h * dh, dh)?;
                let kh = tape.narrow_cols(ks, h * dh, dh)?;
                let vh = tape.narrow_cols(vs, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax(scores);
                let oh = tape.matmul(attn, vh)?;
                merged = Some(match merged {
                    None => oh,
                    Some(m) => tape.concat_last_axis(m, oh)?,
                });
            }
            sample_outs.push(merged.expect("at least one head"));
        }
        let cat = tape.concat_rows(&sample_outs)?;
        let wo = binder.bind(tape, store, self.wo);
        let bo = binder.bind(tape, store, self.bo);
        let proj = tape.matmul(cat, wo)?;
        let proj = tape.add_row(proj, bo)?;
        tape.add(x, proj)
    }

    /// Feed-forward input `z = LN2(x)`.
    pub fn ffn_input(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
    ) -> Result<TensorId> {
        let (g, b) = (binder.bind(tape, store, self.ln2.0), binder.bind(tape, store, self.ln2.1));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Frozen feed-forward output `h_frozen = W2·gelu(W1·z + b1) + b2`.
    pub fn ffn_frozen(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
    ) -> Result<TensorId> {
        let w1 = binder.bind(tape, store, self.w1);
        let b1 = binder.bind(tape, store, self.b1);
        let w2 = binder.bind(tape, store, self.w2);
        let b2 = binder.bind(tape, store, self.b2);
        let h = tape.matmul(z, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }
}
