//! Transformer building blocks on the tape, plus their parameter initializers.

use super::params::{Binder, Init, ParamStore};
use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn p<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, name: &str) -> Result<Var> {
    b.get(tape, name)
}

pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
) {
    store.insert(format!("{name}.w"), init.normal(&[fan_in, fan_out], std));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_zero_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = p(tape, b, &format!("{name}.w"))?;
    let bias = p(tape, b, &format!("{name}.b"))?;
    Ok(tape.linear(x, w, Some(bias))?)
}

pub(crate) fn norm<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
    let g = p(tape, b, &format!("{name}.g"))?;
    let beta = p(tape, b, &format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, beta)?)
}

/// Rotary tables for one token layout: `rot(x) = x·cos + (x @ m)·sin`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Rope {
    pub cos: Var,
    pub sin: Var,
    pub m: Var,
}

/// 2D rotary tables for `specials` unrotated tokens followed by a `gh × gw` patch grid.
///
/// The first half of each head rotates with the row index, the second half
/// with the column index; within a half, channel `i` pairs with `i + half/2`.
pub(crate) fn rope_tables<T: Scalar>(
    specials: usize,
    gh: usize,
    gw: usize,
    head_dim: usize,
    base: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let half = head_dim / 2;
    let quarter = half / 2;
    let tokens = specials + gh * gw;
    let mut cos = vec![T::one(); tokens * head_dim];
    let mut sin = vec![T::zero(); tokens * head_dim];
    for i in 0..gh {
        for j in 0..gw {
            let row = (specials + i * gw + j) * head_dim;
            for (axis, pos) in [(0, i as f64), (1, j as f64)] {
                for f in 0..quarter {
                    let freq = base.powf(-(2.0 * f as f64) / half as f64);
                    let (s, c) = (pos * freq).sin_cos();
                    for k in [f, f + quarter] {
                        cos[row + axis * half + k] = T::lit(c);
                        sin[row + axis * half + k] = T::lit(s);
                    }
                }
            }
        }
    }
    let mut m = vec![T::zero(); head_dim * head_dim];
    for axis in 0..2 {
        let o = axis * half;
        for f in 0..quarter {
            m[(o + f + quarter) * head_dim + o + f] = -T::one();
            m[(o + f) * head_dim + o + f + quarter] = T::one();
        }
    }
    (
        Tensor::new(vec![tokens, head_dim], cos).expect("sized"),
        Tensor::new(vec![tokens, head_dim], sin).expect("sized"),
        Tensor::new(vec![head_dim, head_dim], m).expect("sized"),
    )
}

pub(crate) fn rope_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    specials: usize,
    gh: usize,
    gw: usize,
    head_dim: usize,
    base: f64,
) -> Rope {
    let (cos, sin, m) = rope_tables(specials, gh, gw, head_dim, base);
    Rope {
        cos: tape.constant(cos),
        sin: tape.constant(sin),
        m: tape.constant(m),
    }
}

fn apply_rope<T: Scalar>(tape: &mut Tape<T>, x: Var, rope: &Rope) -> Result<Var> {
    let rotated = tape.matmul(x, rope.m)?;
    let a = tape.mul(x, rope.cos)?;
    let b = tape.mul(rotated, rope.sin)?;
    Ok(tape.add(a, b)?)
}

pub(crate) fn init_attention<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, head_dim: usize, std: f64) {
    init_linear(store, init, &format!("{name}.qkv"), dim, 3 * dim, std);
    init_norm(store, &format!("{name}.q_norm"), head_dim);
    init_norm(store, &format!("{name}.k_norm"), head_dim);
    init_linear(store, init, &format!("{name}.proj"), dim, dim, std);
}

/// Multi-head self-attention over `x: [B, T, C]` with per-head q/k layer norm.
///
/// Returns the output and the attention probabilities `[B, heads, T, T]`.
pub(crate) fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    x: Var,
    name: &str,
    head_dim: usize,
    rope: Option<&Rope>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (bs, t, c) = (shape[0], shape[1], shape[2]);
    let heads = c / head_dim;
    let qkv = linear(tape, b, x, &format!("{name}.qkv"))?;
    let qkv = tape.reshape(qkv, &[bs, t, 3, heads, head_dim])?;
    let qkv = tape.transpose(qkv, &[2, 0, 3, 1, 4])?;
    let parts = tape.split(qkv, 0, &[1, 1, 1])?;
    let per_head = [bs, heads, t, head_dim];
    let q = tape.reshape(parts[0], &per_head)?;
    let k = tape.reshape(parts[1], &per_head)?;
    let v = tape.reshape(parts[2], &per_head)?;
    let mut q = norm(tape, b, q, &format!("{name}.q_norm"))?;
    let mut k = norm(tape, b, k, &format!("{name}.k_norm"))?;
    if let Some(rope) = rope {
        q = apply_rope(tape, q, rope)?;
        k = apply_rope(tape, k, rope)?;
    }
    let kt = tape.transpose(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.mul_scalar(scores, T::lit(1.0 / (head_dim as f64).sqrt()))?;
    let probs = tape.softmax(scores)?;
    let out = tape.matmul(probs, v)?;
    let out = tape.transpose(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bs, t, c])?;
    let out = linear(tape, b, out, &format!("{name}.proj"))?;
    Ok((out, probs))
}

pub(crate) fn init_mlp<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, hidden: usize, std: f64) {
    init_linear(store, init, &format!("{name}.fc1"), dim, hidden, std);
    init_linear(store, init, &format!("{name}.fc2"), hidden, dim, std);
}

pub(crate) fn mlp<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
    let h = linear(tape, b, x, &format!("{name}.fc1"))?;
    let h = tape.gelu(h)?;
    linear(tape, b, h, &format!("{name}.fc2"))
}

/// Pre-norm attention + MLP block parameters; `layer_scale` adds per-channel gains.
pub(crate) fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    dim: usize,
    head_dim: usize,
    mlp_ratio: usize,
    std: f64,
    layer_scale: Option<f64>,
) {
    init_norm(store, &format!("{name}.norm1"), dim);
    init_attention(store, init, &format!("{name}.attn"), dim, head_dim, std);
    init_norm(store, &format!("{name}.norm2"), dim);
    init_mlp(store, init, &format!("{name}.mlp"), dim, dim * mlp_ratio, std);
    if let Some(g) = layer_scale {
        store.insert(format!("{name}.ls1"), Tensor::full(&[dim], T::lit(g)));
        store.insert(format!("{name}.ls2"), Tensor::full(&[dim], T::lit(g)));
    }
}

/// Channel gates for one sub-block: scales on the attention branch, the MLP
/// branch and the block output.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Scales {
    pub attn: Option<Var>,
    pub mlp: Option<Var>,
    pub out: Option<Var>,
}

fn scale_branch<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    x: Var,
    ls: Option<String>,
    gate: Option<Var>,
) -> Result<Var> {
    let mut y = x;
    if let Some(ls) = ls {
        let g = p(tape, b, &ls)?;
        y = tape.mul(y, g)?;
    }
    if let Some(s) = gate {
        y = tape.mul(y, s)?;
    }
    Ok(y)
}

/// One pre-norm block on `x: [B, T, C]`:
/// `z' = z + s_attn·LS₁(Attn(LN₁ z))`, `z'' = z' + s_mlp·LS₂(MLP(LN₂ z'))`, `out = s_out·z''`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    x: Var,
    name: &str,
    head_dim: usize,
    rope: Option<&Rope>,
    layer_scale: bool,
    scales: Scales,
) -> Result<(Var, Var)> {
    let ls = |k: &str| layer_scale.then(|| format!("{name}.{k}"));
    let h = norm(tape, b, x, &format!("{name}.norm1"))?;
    let (a, probs) = attention(tape, b, h, &format!("{name}.attn"), head_dim, rope)?;
    let a = scale_branch(tape, b, a, ls("ls1"), scales.attn)?;
    let z1 = tape.add(x, a)?;
    let h = norm(tape, b, z1, &format!("{name}.norm2"))?;
    let m = mlp(tape, b, h, &format!("{name}.mlp"))?;
    let m = scale_branch(tape, b, m, ls("ls2"), scales.mlp)?;
    let mut z2 = tape.add(z1, m)?;
    if let Some(s) = scales.out {
        z2 = tape.mul(z2, s)?;
    }
    Ok((z2, probs))
}

/// `[V, gh·gw, P·P·ch] -> [V, gh·P, gw·P, ch]`: token `(i, j)` fills the tile at `(i·P, j·P)`.
pub fn pixel_shuffle<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gh: usize,
    gw: usize,
    patch: usize,
    ch: usize,
) -> Result<Var> {
    let v = tape.shape(x)[0];
    let y = tape.reshape(x, &[v, gh, gw, patch, patch, ch])?;
    let y = tape.transpose(y, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(y, &[v, gh * patch, gw * patch, ch])?)
}

/// Inverse of [`pixel_shuffle`] for `[V, H, W, ch]` maps.
pub(crate) fn patchify<T: Scalar>(tape: &mut Tape<T>, x: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (v, h, w, ch) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let y = tape.reshape(x, &[v, gh, patch, gw, patch, ch])?;
    let y = tape.transpose(y, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(y, &[v, gh * gw, patch * patch * ch])?)
}

/// Gather indices for a zero-padded 3×3 neighbourhood over `[V, H, W, ·]`
/// flattened to rows; out-of-range taps point at row `V·H·W` (a zero row).
pub(crate) fn conv3x3_indices(v: usize, h: usize, w: usize) -> Vec<usize> {
    let pad = v * h * w;
    let mut idx = Vec::with_capacity(pad * 9);
    for vi in 0..v {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let yy = y as isize + dy - 1;
                        let xx = x as isize + dx - 1;
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            idx.push(pad);
                        } else {
                            idx.push((vi * h + yy as usize) * w + xx as usize);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Same-padded 3×3 convolution over `[V, H, W, c_in]` via gathered patches.
pub(crate) fn conv3x3<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (v, h, w, c) = (s[0], s[1], s[2], s[3]);
    let rows = tape.reshape(x, &[v * h * w, c])?;
    let zero = tape.constant(Tensor::zeros(&[1, c]));
    let padded = tape.concat(&[rows, zero], 0)?;
    let cols = tape.gather(padded, &conv3x3_indices(v, h, w))?;
    let cols = tape.reshape(cols, &[v * h * w, 9 * c])?;
    let y = linear(tape, b, cols, name)?;
    let out = tape.shape(y)[1];
    Ok(tape.reshape(y, &[v, h, w, out])?)
}
