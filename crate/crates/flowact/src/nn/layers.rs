//! Network layers as thin wrappers over named parameters in a [`ParamStore`].
//!
//! A layer struct only remembers its parameter names and dimensions; the
//! forward pass binds those names onto the current [`Tape`]. Transformer
//! blocks use the pre-norm arrangement.

use rand::Rng;

use super::optim::{Init, ParamStore};
use super::tape::{Tape, T};

/// Fully connected layer applied over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        store.add(
            &format!("{name}.w"),
            &[in_dim, out_dim],
            Init::Xavier { fan_in: in_dim, fan_out: out_dim },
            rng,
        );
        let b = if bias {
            store.add(&format!("{name}.b"), &[out_dim], Init::Zeros, rng);
            Some(format!("{name}.b"))
        } else {
            None
        };
        Self { w: format!("{name}.w"), b, in_dim, out_dim }
    }

    /// All-zero weights and bias: the output is identically zero until the
    /// optimizer moves it (used for condition projections so conditioning is
    /// inert at initialization).
    pub fn init_zeros<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        store.add(&format!("{name}.w"), &[in_dim, out_dim], Init::Zeros, rng);
        store.add(&format!("{name}.b"), &[out_dim], Init::Zeros, rng);
        Self { w: format!("{name}.w"), b: Some(format!("{name}.b")), in_dim, out_dim }
    }

    /// Apply to any tensor whose last dimension equals `in_dim`.
    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let shape = tape.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input dim");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, self.in_dim]);
        let w = tape.param(store, &self.w);
        let mut y = tape.matmul(flat, w);
        if let Some(bname) = &self.b {
            let b = tape.param(store, bname);
            y = tape.add_bcast_tail(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last dimension with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        store.add(&format!("{name}.g"), &[dim], Init::Const(1.0), rng);
        store.add(&format!("{name}.b"), &[dim], Init::Zeros, rng);
        Self { gamma: format!("{name}.g"), beta: format!("{name}.b") }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let g = tape.param(store, &self.gamma);
        let b = tape.param(store, &self.beta);
        tape.layernorm_last(x, g, b)
    }
}

/// Multi-head attention. Self-attention when `ctx == x`, cross-attention
/// otherwise.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            wq: Linear::init(store, rng, &format!("{name}.q"), dim, dim, true),
            wk: Linear::init(store, rng, &format!("{name}.k"), dim, dim, true),
            wv: Linear::init(store, rng, &format!("{name}.v"), dim, dim, true),
            wo: Linear::init(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// `x [B,Tq,d]`, `ctx [B,Tk,d]` -> `[B,Tq,d]`.
    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T, ctx: T) -> T {
        let (b, tq, d) = dims3(tape, x);
        let (_, tk, _) = dims3(tape, ctx);
        assert_eq!(d, self.dim);
        let dh = d / self.heads;
        let q = self.wq.fwd(tape, store, x);
        let k = self.wk.fwd(tape, store, ctx);
        let v = self.wv.fwd(tape, store, ctx);
        let qh = split_heads(tape, q, b, tq, self.heads, dh);
        let kh = split_heads(tape, k, b, tk, self.heads, dh);
        let vh = split_heads(tape, v, b, tk, self.heads, dh);
        let att = tape.bmm_nt(qh, kh);
        let att = tape.scale(att, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_last(att);
        let out = tape.bmm_nn(att, vh);
        let merged = merge_heads(tape, out, b, tq, self.heads, dh);
        self.wo.fwd(tape, store, merged)
    }
}

fn dims3(tape: &Tape, x: T) -> (usize, usize, usize) {
    let s = tape.shape(x);
    assert_eq!(s.len(), 3, "expected [B,T,d], got {s:?}");
    (s[0], s[1], s[2])
}

fn split_heads(tape: &mut Tape, x: T, b: usize, t: usize, h: usize, dh: usize) -> T {
    let r = tape.reshape(x, &[b, t, h, dh]);
    let p = tape.permute(r, &[0, 2, 1, 3]);
    tape.reshape(p, &[b * h, t, dh])
}

fn merge_heads(tape: &mut Tape, x: T, b: usize, t: usize, h: usize, dh: usize) -> T {
    let r = tape.reshape(x, &[b, h, t, dh]);
    let p = tape.permute(r, &[0, 2, 1, 3]);
    tape.reshape(p, &[b, t, h * dh])
}

/// Pre-norm transformer encoder block: self-attention then a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(store, rng, &format!("{name}.ln1"), dim),
            attn: Mha::init(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::init(store, rng, &format!("{name}.ln2"), dim),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), dim, dim * ff_mult, true),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), dim * ff_mult, dim, true),
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let n = self.ln1.fwd(tape, store, x);
        let a = self.attn.fwd(tape, store, n, n);
        let x = tape.add(x, a);
        let n = self.ln2.fwd(tape, store, x);
        let h = self.ff1.fwd(tape, store, n);
        let h = tape.gelu(h);
        let h = self.ff2.fwd(tape, store, h);
        tape.add(x, h)
    }
}

/// Pre-norm block with an extra cross-attention stage reading from a context
/// sequence.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln1: LayerNorm,
    pub self_attn: Mha,
    pub lnc: LayerNorm,
    pub cross_attn: Mha,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossBlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(store, rng, &format!("{name}.ln1"), dim),
            self_attn: Mha::init(store, rng, &format!("{name}.sattn"), dim, heads),
            lnc: LayerNorm::init(store, rng, &format!("{name}.lnc"), dim),
            cross_attn: Mha::init(store, rng, &format!("{name}.cattn"), dim, heads),
            ln2: LayerNorm::init(store, rng, &format!("{name}.ln2"), dim),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), dim, dim * ff_mult, true),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), dim * ff_mult, dim, true),
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T, ctx: T) -> T {
        let n = self.ln1.fwd(tape, store, x);
        let a = self.self_attn.fwd(tape, store, n, n);
        let x = tape.add(x, a);
        let n = self.lnc.fwd(tape, store, x);
        let a = self.cross_attn.fwd(tape, store, n, ctx);
        let x = tape.add(x, a);
        let n = self.ln2.fwd(tape, store, x);
        let h = self.ff1.fwd(tape, store, n);
        let h = tape.gelu(h);
        let h = self.ff2.fwd(tape, store, h);
        tape.add(x, h)
    }
}
