//! Multi-head attention, the decoder-like local transformer, and the linear
//! forecast head.
//!
//! Attention here is never masked: local patches attend bidirectionally, and
//! cross-attention draws keys and values from the global context sequence.
//! Layers are pre-norm residual blocks.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{init_linear, ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Projection weights for one multi-head attention operation.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub num_heads: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        num_heads: usize,
    ) -> Self {
        assert!(d_model.is_multiple_of(num_heads), "d_model must divide evenly into heads");
        AttentionParams {
            d_model,
            num_heads,
            wq: store.add(format!("{prefix}.wq"), init_linear(rng, d_model, d_model, d_model)),
            wk: store.add(format!("{prefix}.wk"), init_linear(rng, d_model, d_model, d_model)),
            wv: store.add(format!("{prefix}.wv"), init_linear(rng, d_model, d_model, d_model)),
            wo: store.add(format!("{prefix}.wo"), init_linear(rng, d_model, d_model, d_model)),
        }
    }

    /// Queries from `target` (n, L_t, d_model), keys and values from `source`
    /// (n, L_s, d_model); softmax-normalized over the source axis per head.
    pub fn cross(&self, g: &mut Graph, store: &ParamStore, source: Var, target: Var) -> Var {
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(target, wq);
        let k = g.matmul(source, wk);
        let v = g.matmul(source, wv);
        let mixed = self.heads(g, q, k, v);
        let wo = g.param(store, self.wo);
        g.matmul(mixed, wo)
    }

    /// Self-attention: queries, keys, and values all from `target`.
    pub fn self_attn(&self, g: &mut Graph, store: &ParamStore, target: Var) -> Var {
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(target, wq);
        let k = g.matmul(target, wk);
        let v = g.matmul(target, wv);
        let mixed = self.heads(g, q, k, v);
        let wo = g.param(store, self.wo);
        g.matmul(mixed, wo)
    }

    fn heads(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
        let dh = self.d_model / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let probs = attention_probs(g, qh, kh, scale);
            outs.push(g.matmul(probs, vh));
        }
        g.concat_cols(&outs)
    }
}

/// Scaled dot-product scores with row softmax; scores have shape
/// (n, L_t, L_s).
pub fn attention_probs(g: &mut Graph, q: Var, k: Var, scale: f64) -> Var {
    let raw = g.matmul_t(q, false, k, true);
    let scaled = g.scale(raw, scale);
    g.softmax_rows(scaled)
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{prefix}.g"), Tensor::filled(1, 1, d, 1.0)),
            beta: store.add(format!("{prefix}.b"), Tensor::zeros(1, 1, d)),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// One local-transformer layer: self-attention over the variate's own patch
/// tokens, cross-attention into that variate's global context, and a
/// feed-forward block, each behind a pre-norm residual.
#[derive(Clone, Debug)]
pub struct LocalLayer {
    ln1: Norm,
    self_attn: AttentionParams,
    cross: Option<(Norm, AttentionParams)>,
    ln3: Norm,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl LocalLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        num_heads: usize,
        ffn_width: usize,
        with_cross: bool,
    ) -> Self {
        let ln1 = Norm::init(store, &format!("{prefix}.ln1"), d_model);
        let self_attn =
            AttentionParams::init(store, rng, &format!("{prefix}.self"), d_model, num_heads);
        let cross = with_cross.then(|| {
            (
                Norm::init(store, &format!("{prefix}.ln2"), d_model),
                AttentionParams::init(store, rng, &format!("{prefix}.cross"), d_model, num_heads),
            )
        });
        let ln3 = Norm::init(store, &format!("{prefix}.ln3"), d_model);
        LocalLayer {
            ln1,
            self_attn,
            cross,
            ln3,
            ffn_w1: store.add(format!("{prefix}.ffn.w1"), init_linear(rng, d_model, ffn_width, d_model)),
            ffn_b1: store.add(format!("{prefix}.ffn.b1"), init_linear(rng, 1, ffn_width, d_model)),
            ffn_w2: store.add(format!("{prefix}.ffn.w2"), init_linear(rng, ffn_width, d_model, ffn_width)),
            ffn_b2: store.add(format!("{prefix}.ffn.b2"), init_linear(rng, 1, d_model, ffn_width)),
        }
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// tokens (n, PN_l, d_model), context (n, PN_g, d_model) -> same token
    /// shape. `context` must be provided exactly when the layer was built
    /// with a cross-attention sublayer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        context: Option<Var>,
    ) -> Var {
        let mut x = tokens;
        let normed = self.ln1.apply(g, store, x);
        let sa = self.self_attn.self_attn(g, store, normed);
        x = g.add(x, sa);

        match (&self.cross, context) {
            (Some((ln2, cross_attn)), Some(ctx)) => {
                let normed = ln2.apply(g, store, x);
                let ca = cross_attn.cross(g, store, ctx, normed);
                x = g.add(x, ca);
            }
            (None, None) => {}
            _ => panic!("context must be supplied exactly when the layer has cross-attention"),
        }

        let normed = self.ln3.apply(g, store, x);
        let w1 = g.param(store, self.ffn_w1);
        let b1 = g.param(store, self.ffn_b1);
        let h = g.linear(normed, w1, Some(b1));
        let h = g.gelu(h);
        let w2 = g.param(store, self.ffn_w2);
        let b2 = g.param(store, self.ffn_b2);
        let f = g.linear(h, w2, Some(b2));
        g.add(x, f)
    }

    #[cfg(test)]
    pub(crate) fn zero_output_paths(&self, store: &mut ParamStore) {
        store.get_mut(self.self_attn.wo).data_mut().fill(0.0);
        if let Some((_, ca)) = &self.cross {
            store.get_mut(ca.wo).data_mut().fill(0.0);
        }
        store.get_mut(self.ffn_w2).data_mut().fill(0.0);
        store.get_mut(self.ffn_b2).data_mut().fill(0.0);
    }
}

/// Shared linear head mapping flattened per-variate features to the horizon.
#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub in_dim: usize,
    pub horizon: usize,
    w: ParamId,
    b: ParamId,
}

impl ForecastHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_dim: usize,
        horizon: usize,
    ) -> Self {
        ForecastHead {
            in_dim,
            horizon,
            w: store.add("head.w", init_linear(rng, in_dim, horizon, in_dim)),
            b: store.add("head.b", init_linear(rng, 1, horizon, in_dim)),
        }
    }

    /// features (n, 1, in_dim) -> (n, 1, horizon).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(features, w, Some(b))
    }

    /// Apply the head to per-variate local outputs (D, PN_l, d_model),
    /// flattening the last two axes, yielding a (1, D, horizon) forecast.
    pub fn eval(&self, store: &ParamStore, local_outputs: &Tensor) -> Tensor {
        let (d, pn, dm) = local_outputs.shape();
        assert_eq!(pn * dm, self.in_dim, "head input width mismatch");
        let flat = local_outputs.reshaped(d, 1, pn * dm);
        let mut g = Graph::new(false);
        let f = g.constant(flat);
        let out = self.forward(&mut g, store, f);
        g.value(out).reshaped(1, d, self.horizon)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }
}

/// Patch embedding, learned positional offsets, and the local layer stack.
#[derive(Clone, Debug)]
pub struct LocalModel {
    pub d_model: usize,
    pub patch_len: usize,
    pub token_count: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    pub layers: Vec<LocalLayer>,
}

impl LocalModel {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        patch_len: usize,
        token_count: usize,
        d_model: usize,
        num_heads: usize,
        ffn_width: usize,
        n_layers: usize,
        with_cross: bool,
    ) -> Self {
        let embed_w = store.add("local.embed.w", init_linear(rng, patch_len, d_model, patch_len));
        let embed_b = store.add("local.embed.b", init_linear(rng, 1, d_model, patch_len));
        let mut pos = Tensor::zeros(1, token_count, d_model);
        pos.randn_fill(rng, 0.02);
        let pos = store.add("local.pos", pos);
        let layers = (0..n_layers)
            .map(|i| {
                LocalLayer::init(
                    store,
                    rng,
                    &format!("local.l{i}"),
                    d_model,
                    num_heads,
                    ffn_width,
                    with_cross,
                )
            })
            .collect();
        LocalModel { d_model, patch_len, token_count, embed_w, embed_b, pos, layers }
    }

    /// patches (n, PN_l, PL_l) with optional per-block context
    /// (n, PN_g, d_model) -> (n, PN_l, d_model).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        context: Option<Var>,
    ) -> Var {
        let w = g.param(store, self.embed_w);
        let b = g.param(store, self.embed_b);
        let mut x = g.linear(patches, w, Some(b));
        let pos = g.param(store, self.pos);
        x = g.add(x, pos);
        for layer in &self.layers {
            x = layer.forward(g, store, x, context);
        }
        x
    }
}
