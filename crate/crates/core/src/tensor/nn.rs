use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Truncated normal (cut at two standard deviations).
pub(crate) fn trunc_normal<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break R::lit(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(&[input, output], 0.02, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), false);
        LinearParams { weight, bias }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], R::one()), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        LayerNormParams { gamma, beta }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-norm transformer block:
/// `x + MHSA(LN(x))`, then `h + MLP(LN(h))` with a GELU hidden layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNormParams,
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = dim * mlp_ratio;
        Ok(BlockParams {
            dim,
            heads,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim),
            qkv: LinearParams::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: LinearParams::new(store, &format!("{name}.proj"), dim, dim, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim),
            fc1: LinearParams::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: LinearParams::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        })
    }
}

fn self_attention<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    x: Var,
    p: &BlockParams,
    mut weights_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = p.dim;
    let head_dim = d / p.heads;
    let qkv = p.qkv.forward(tape, store, x)?;
    let scale = R::lit(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = tape.cols(qkv, h * head_dim, head_dim)?;
        let k = tape.cols(qkv, d + h * head_dim, head_dim)?;
        let v = tape.cols(qkv, 2 * d + h * head_dim, head_dim)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores);
        if let Some(out) = weights_out.as_deref_mut() {
            out.push(w);
        }
        heads.push(tape.matmul(w, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    p.proj.forward(tape, store, merged)
}

fn check_block(tape: &Tape<impl Real>, x: Var, p: &BlockParams) -> Result<()> {
    if p.heads == 0 || p.dim % p.heads != 0 {
        return Err(Error::config(format!(
            "width {} is not divisible by {} heads",
            p.dim, p.heads
        )));
    }
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != p.dim || s[0] == 0 {
        return Err(Error::dim(format!(
            "attention block of width {} applied to {s:?}",
            p.dim
        )));
    }
    Ok(())
}

/// One joint attention block over all `N` rows of `tokens` (`[N×D]`).
pub fn attention_block<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    tokens: Var,
    p: &BlockParams,
) -> Result<Var> {
    check_block(tape, tokens, p)?;
    let h = p.norm1.forward(tape, store, tokens)?;
    let a = self_attention(tape, store, h, p, None)?;
    let x = tape.add(tokens, a)?;
    let h = p.norm2.forward(tape, store, x)?;
    let h = p.fc1.forward(tape, store, h)?;
    let h = tape.gelu(h);
    let h = p.fc2.forward(tape, store, h)?;
    tape.add(x, h)
}

/// Per-head `[N×N]` attention weight matrices the block would use on `tokens`.
pub fn attention_weights<R: Real>(
    store: &ParamStore<R>,
    tokens: &Tensor<R>,
    p: &BlockParams,
) -> Result<Vec<Tensor<R>>> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    check_block(&tape, x, p)?;
    let h = p.norm1.forward(&mut tape, store, x)?;
    let mut ws = Vec::new();
    self_attention(&mut tape, store, h, p, Some(&mut ws))?;
    Ok(ws.into_iter().map(|w| tape.value(w).clone()).collect())
}
