//! Transformer building blocks shared by the image, text and cross encoders.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] and are
//! bound to a [`Graph`] on every forward pass. Parameter names follow
//! `<encoder>.<block_index>.<param_name>`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{lit, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Registers parameters under a common name prefix.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    /// Weight matrix `[fan_in, fan_out]` drawn from N(0, 1/fan_in).
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.store
            .insert(name, Tensor::randn(&[fan_in, fan_out], std, self.rng))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::randn(shape, std, self.rng))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, lit(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), fan_in, fan_out)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Projections of one multi-head attention layer. Projections carry no bias,
/// so a zero value projection yields an exactly zero output.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        model_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("model dimension {model_dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            w_q: init.weight(&format!("{name}.wq"), model_dim, model_dim)?,
            w_k: init.weight(&format!("{name}.wk"), model_dim, model_dim)?,
            w_v: init.weight(&format!("{name}.wv"), model_dim, model_dim)?,
            w_o: init.weight(&format!("{name}.wo"), model_dim, model_dim)?,
            heads,
            model_dim,
        })
    }

    /// Per-head dimension `d`, the denominator of the `√d` score scaling.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Multi-head scaled dot-product attention of `q_tokens` over `kv_tokens`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q_tokens: Var,
    kv_tokens: Var,
    p: &AttentionParams,
) -> Result<Var> {
    attention_impl(g, q_tokens, kv_tokens, p, None)
}

/// Like [`multi_head_attention`], also returning each head's attention
/// weights (`L_q × L_kv`, rows sum to one).
pub fn multi_head_attention_with_weights<T: Scalar>(
    g: &mut Graph<'_, T>,
    q_tokens: Var,
    kv_tokens: Var,
    p: &AttentionParams,
) -> Result<(Var, Vec<Var>)> {
    let mut weights = Vec::with_capacity(p.heads);
    let out = attention_impl(g, q_tokens, kv_tokens, p, Some(&mut weights))?;
    Ok((out, weights))
}

fn attention_impl<T: Scalar>(
    g: &mut Graph<'_, T>,
    q_tokens: Var,
    kv_tokens: Var,
    p: &AttentionParams,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let dq = g.shape(q_tokens).get(1).copied();
    let dkv = g.shape(kv_tokens).get(1).copied();
    if dq != Some(p.model_dim) || dkv != Some(p.model_dim) {
        return Err(Error::shape("multi_head_attention", g.shape(q_tokens), g.shape(kv_tokens)));
    }
    let (wq, wk, wv, wo) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v), g.param(p.w_o));
    let q = g.matmul(q_tokens, wq)?;
    let k = g.matmul(kv_tokens, wk)?;
    let v = g.matmul(kv_tokens, wv)?;
    let d = p.head_dim();
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        if let Some(w) = weights.as_deref_mut() {
            w.push(attn);
        }
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(merged, wo)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(init, &format!("{name}.ffn_up"), dim, hidden, true)?,
            down: Linear::new(init, &format!("{name}.ffn_down"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm encoder block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attention: AttentionParams,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim, eps)?,
            attention: AttentionParams::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim, eps)?,
            ffn: FeedForward::new(init, name, dim, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = multi_head_attention(g, h, h, &self.attention)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Cross-encoder block: self-attention over text, cross-attention from text
/// queries onto image keys/values, then feed-forward; all pre-norm residual.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_self: LayerNorm,
    pub self_attention: AttentionParams,
    pub ln_cross: LayerNorm,
    pub cross_attention: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(init, &format!("{name}.ln_self"), dim, eps)?,
            self_attention: AttentionParams::new(init, &format!("{name}.self_attn"), dim, heads)?,
            ln_cross: LayerNorm::new(init, &format!("{name}.ln_cross"), dim, eps)?,
            cross_attention: AttentionParams::new(init, &format!("{name}.cross_attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(init, &format!("{name}.ln_ffn"), dim, eps)?,
            ffn: FeedForward::new(init, name, dim, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, text: Var, image: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, text)?;
        let a = multi_head_attention(g, h, h, &self.self_attention)?;
        let x = g.add(text, a)?;
        let h = self.ln_cross.forward(g, x)?;
        let c = multi_head_attention(g, h, image, &self.cross_attention)?;
        let x = g.add(x, c)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// `LN → Linear → GELU → Linear` classification head.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub ln: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        out_dim: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(init, &format!("{name}.ln"), dim, eps)?,
            hidden: Linear::new(init, &format!("{name}.hidden"), dim, dim, true)?,
            out: Linear::new(init, &format!("{name}.out"), dim, out_dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.hidden.forward(g, h)?;
        let h = g.gelu(h)?;
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradient_check;

    fn attn_store(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::new(&mut Init { store: &mut store, rng: &mut rng }, "attn", dim, heads).unwrap();
        (store, p)
    }

    fn mat(store: &ParamStore<f64>, id: ParamId) -> Vec<Vec<f64>> {
        let t = store.get(id);
        (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
    }

    fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
        (0..w[0].len()).map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()
    }

    /// Explicit per-head loop written against plain vectors.
    fn attention_oracle(q: &[Vec<f64>], kv: &[Vec<f64>], store: &ParamStore<f64>, p: &AttentionParams) -> Vec<Vec<f64>> {
        let (wq, wk, wv, wo) = (mat(store, p.w_q), mat(store, p.w_k), mat(store, p.w_v), mat(store, p.w_o));
        let d = p.head_dim();
        let qs: Vec<_> = q.iter().map(|x| vec_mat(x, &wq)).collect();
        let ks: Vec<_> = kv.iter().map(|x| vec_mat(x, &wk)).collect();
        let vs: Vec<_> = kv.iter().map(|x| vec_mat(x, &wv)).collect();
        let mut out = Vec::new();
        for qi in &qs {
            let mut merged = vec![0.0; p.model_dim];
            for h in 0..p.heads {
                let r = h * d..(h + 1) * d;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| qi[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, v) in e.iter().zip(&vs) {
                    for c in r.clone() {
                        merged[c] += w / z * v[c];
                    }
                }
            }
            out.push(vec_mat(&merged, &wo));
        }
        out
    }

    #[test]
    fn attention_matches_per_head_loop() {
        let (store, p) = attn_store(8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let rows = |t: &Tensor<f64>| (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let expect = attention_oracle(&rows(&q), &rows(&kv), &store, &p);
        let mut g = Graph::with_params(&store);
        let (vq, vkv) = (g.constant(q).unwrap(), g.constant(kv).unwrap());
        let out = multi_head_attention(&mut g, vq, vkv, &p).unwrap();
        for (r, row) in expect.iter().enumerate() {
            for (a, b) in g.value(out).row(r).iter().zip(row) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let (store, p) = attn_store(4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let expect = vec_mat(&vec_mat(kv.row(0), &mat(&store, p.w_v)), &mat(&store, p.w_o));
        let mut g = Graph::with_params(&store);
        let (vq, vkv) = (g.constant(q).unwrap(), g.constant(kv).unwrap());
        let out = multi_head_attention(&mut g, vq, vkv, &p).unwrap();
        for r in 0..3 {
            for (a, b) in g.value(out).row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let (mut store, p) = attn_store(4, 2, 9);
        store.set(p.w_v, Tensor::zeros(&[4, 4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let out = multi_head_attention(&mut g, x, x, &p).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_and_bad_heads_error() {
        let (store, p) = attn_store(4, 2, 9);
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(multi_head_attention(&mut g, a, b, &p).is_err());

        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::new(&mut Init { store: &mut s, rng: &mut rng }, "x", 6, 4).is_err());
    }

    fn block_store(seed: u64) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = TransformerBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "enc.0", 8, 2, 16, 1e-5).unwrap();
        (store, b)
    }

    #[test]
    fn block_preserves_shape_and_zero_block_is_identity() {
        let (mut store, block) = block_store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for len in [1, 2, 7] {
            let x = Tensor::<f64>::randn(&[len, 8], 1.0, &mut rng);
            let mut g = Graph::with_params(&store);
            let vx = g.constant(x.clone()).unwrap();
            let y = block.forward(&mut g, vx).unwrap();
            assert_eq!(g.shape(y), &[len, 8]);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let mut g = Graph::with_params(&store);
        let vx = g.constant(x.clone()).unwrap();
        let y = block.forward(&mut g, vx).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn block_gradient_check() {
        let (mut store, block) = block_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = store.insert("x", Tensor::randn(&[2, 8], 1.0, &mut rng)).unwrap();
        let w = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let report = gradient_check(
            |g| {
                let vx = g.param(x);
                let y = block.forward(g, vx)?;
                let wv = g.constant(w.clone())?;
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_rows_sum_to_one_per_head() {
        let (store, p) = attn_store(8, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::randn(&[5, 8], 2.0, &mut rng)).unwrap();
        let kv = g.constant(Tensor::randn(&[7, 8], 2.0, &mut rng)).unwrap();
        let (_, weights) = multi_head_attention_with_weights(&mut g, q, kv, &p).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            for r in 0..5 {
                assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_attention_is_invariant_to_kv_permutation() {
        let (store, p) = attn_store(8, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let perm = [4, 2, 0, 5, 1, 3];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::with_params(&store);
        let (vq, a, b) = (g.constant(q).unwrap(), g.constant(kv).unwrap(), g.constant(permuted).unwrap());
        let o1 = multi_head_attention(&mut g, vq, a, &p).unwrap();
        let o2 = multi_head_attention(&mut g, vq, b, &p).unwrap();
        for (x, y) in g.value(o1).data().iter().zip(g.value(o2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
