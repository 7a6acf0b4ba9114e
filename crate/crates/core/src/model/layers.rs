use rand::Rng;

use super::Dropout;
use crate::numerics::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub(super) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub(super) struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, x: Var, eps: f64) -> Var {
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

#[derive(Debug, Clone)]
pub(super) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    /// Multi-head scaled dot-product attention of `query` rows over `context` rows.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &'p ParamStore,
        query: Var,
        context: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let d = g.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul_nt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s, causal);
                g.matmul(a, vh)
            })
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, p, cat)
    }
}

#[derive(Debug, Clone)]
pub(super) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

/// Pre-norm transformer block. Decoder blocks carry a cross-attention sublayer.
#[derive(Debug, Clone)]
pub(super) struct Block {
    pub ln_self: LayerNormIds,
    pub self_attn: Attention,
    pub cross: Option<(LayerNormIds, Attention)>,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForward,
}

fn residual<'p>(g: &mut Graph<'p>, x: Var, branch: Var, dropout: Option<&mut Dropout<'_>>) -> Var {
    let branch = match dropout {
        Some(d) if d.rate > 0.0 => {
            let n = g.value(branch).len();
            let keep: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= d.rate).collect();
            g.dropout(branch, &keep, d.rate)
        }
        _ => branch,
    };
    g.add(x, branch)
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &'p ParamStore,
        x: Var,
        memory: Option<Var>,
        heads: usize,
        causal: bool,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Var {
        let eps = super::LN_EPS;
        let h = self.ln_self.forward(g, p, x, eps);
        let h = self.self_attn.forward(g, p, h, h, heads, causal);
        let mut x = residual(g, x, h, dropout.as_deref_mut());
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, p, x, eps);
            let h = attn.forward(g, p, h, mem, heads, false);
            x = residual(g, x, h, dropout.as_deref_mut());
        }
        let h = self.ln_ffn.forward(g, p, x, eps);
        let h = self.ffn.up.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ffn.down.forward(g, p, h);
        residual(g, x, h, dropout)
    }
}
