use super::params::{CrossAttnParams, EncoderLayerParams, EpsilonParams, FuserParams, GfpHeadParams, GpaParams};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Intermediate values of one forward pass, copied out of the graph.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Aggregated prompts `B × M × D`.
    pub gt_q: Option<Tensor>,
    /// Prompt-over-token attention `B × M × N`.
    pub cross_attention: Option<Tensor>,
    /// Group semantics `B × M × D`.
    pub grs: Option<Tensor>,
    /// Per-head token weights, each `B × N × D`.
    pub head_weights: Vec<Tensor>,
    /// Global semantics `B × M × D`.
    pub gos: Option<Tensor>,
    /// Fuser input `B × M × 2D` (or `× D` with one branch).
    pub gs: Tensor,
    /// Semantic groups `B × M × d_w`.
    pub s: Tensor,
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub s: Var,
    pub gt_q: Option<Var>,
    pub cross_attention: Option<Var>,
    pub grs: Option<Var>,
    pub head_weights: Vec<Var>,
    pub gos: Option<Var>,
    pub gs: Var,
}

impl ForwardOutput {
    pub fn trace(&self, g: &Graph) -> ForwardTrace {
        let val = |v: Option<Var>| v.map(|v| g.value(v).clone());
        ForwardTrace {
            gt_q: val(self.gt_q),
            cross_attention: val(self.cross_attention),
            grs: val(self.grs),
            head_weights: self.head_weights.iter().map(|&v| g.value(v).clone()).collect(),
            gos: val(self.gos),
            gs: g.value(self.gs).clone(),
            s: g.value(self.s).clone(),
        }
    }
}

fn check_features(g: &Graph, cfg: &ModelConfig, f: Var) -> Result<usize> {
    let s = g.shape(f);
    if s.len() != 3 || s[1] != cfg.num_tokens || s[2] != cfg.token_dim {
        return Err(Error::shape(format!(
            "features {:?} do not match B x {} x {}",
            s, cfg.num_tokens, cfg.token_dim
        )));
    }
    Ok(s[0])
}

fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let mean = g.mean(x, axis, true)?;
    let centered = g.sub(x, mean)?;
    let var = g.variance(x, axis, true)?;
    let var = g.add_scalar(var, LN_EPS);
    let std = g.sqrt(var);
    let normed = g.div(centered, std)?;
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
fn encoder_layer(g: &mut Graph, x: Var, p: &EncoderLayerParams<Var>, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;

    let xn = layer_norm(g, x, p.ln1_gain, p.ln1_bias)?;
    let mut split = |w: Var| -> Result<Var> {
        let y = g.matmul(xn, w)?;
        let y = g.reshape(y, &[b, l, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(p.w_q)?;
    let k = split(p.w_k)?;
    let v = split(p.w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let out = g.matmul(ctx, p.w_o)?;
    let x = g.add(x, out)?;

    let xn = layer_norm(g, x, p.ln2_gain, p.ln2_bias)?;
    let hidden = g.linear(xn, p.ff_w1, p.ff_b1)?;
    let hidden = g.relu(hidden);
    let out = g.linear(hidden, p.ff_w2, p.ff_b2)?;
    g.add(x, out)
}

/// Prepends the group prompts to the tokens, runs the encoder and returns
/// the first `M` output tokens (`B × M × D`).
pub fn gpa_aggregate(g: &mut Graph, cfg: &ModelConfig, f: Var, p: &GpaParams<Var>) -> Result<Var> {
    let b = check_features(g, cfg, f)?;
    let m = g.shape(p.prompts)[0];
    let prompts = g.expand(p.prompts, &[b, m, cfg.token_dim])?;
    let mut x = g.concat(&[prompts, f], 1)?;
    for layer in &p.encoder {
        x = encoder_layer(g, x, layer, cfg.encoder_heads)?;
    }
    g.narrow(x, 1, 0, m)
}

/// Scaled dot-product cross-attention of the aggregated prompts over the
/// tokens. Returns `(GrS, A_c)` with `A_c` of shape `B × M × N`.
pub fn gpa_refine(
    g: &mut Graph,
    cfg: &ModelConfig,
    gt_q: Var,
    f: Var,
    p: &CrossAttnParams<Var>,
) -> Result<(Var, Var)> {
    let b = check_features(g, cfg, f)?;
    let sq = g.shape(gt_q);
    if sq.len() != 3 || sq[0] != b || sq[2] != cfg.token_dim {
        return Err(Error::shape(format!(
            "prompt queries {:?} do not match features {:?}",
            sq,
            g.shape(f)
        )));
    }
    let q = g.matmul(gt_q, p.w_q)?;
    let k = match p.w_k {
        Some(w) => g.matmul(f, w)?,
        None => f,
    };
    let v = match p.w_v {
        Some(w) => g.matmul(f, w)?,
        None => f,
    };
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (cfg.token_dim as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let grs = g.matmul(attn, v)?;
    Ok((grs, attn))
}

/// One feature block per head: `FG^m = F · P_m`.
pub fn gfp_blocks(g: &mut Graph, cfg: &ModelConfig, f: Var, heads: &[GfpHeadParams<Var>]) -> Result<Vec<Var>> {
    check_features(g, cfg, f)?;
    heads.iter().map(|h| g.matmul(f, h.proj)).collect()
}

/// Pools one feature block: token weights are a softmax over the `N` axis
/// of a per-token MLP, independently per channel. Returns `(S^m, A^m)`
/// with `S^m` of shape `B × D`.
pub fn gfp_head(g: &mut Graph, fg: Var, p: &GfpHeadParams<Var>) -> Result<(Var, Var)> {
    if g.shape(fg).len() != 3 {
        return Err(Error::shape(format!("feature block must be B x N x D, got {:?}", g.shape(fg))));
    }
    let hidden = g.linear(fg, p.mlp_w1, p.mlp_b1)?;
    let hidden = g.relu(hidden);
    let logits = g.matmul(hidden, p.mlp_w2)?;
    let weights = g.softmax(logits, 1)?;
    let weighted = g.mul(fg, weights)?;
    let pooled = g.sum(weighted, 1, false)?;
    Ok((pooled, weights))
}

/// Concatenates `[GoS, GrS]` on the feature axis and applies the linear fuser.
/// Returns `(S, GS)`.
pub fn fuse(g: &mut Graph, gos: Option<Var>, grs: Option<Var>, p: &FuserParams<Var>) -> Result<(Var, Var)> {
    let gs = match (gos, grs) {
        (Some(a), Some(b)) => g.concat(&[a, b], 2)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::shape("fuse needs at least one branch")),
    };
    let s = g.linear(gs, p.w, p.b)?;
    Ok((s, gs))
}

/// Full forward map from features `B × N × D` to semantic groups `B × M × d_w`.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, f: Var, params: &EpsilonParams<Var>) -> Result<ForwardOutput> {
    let b = check_features(g, cfg, f)?;
    let (mut gt_q, mut grs, mut cross_attention) = (None, None, None);
    if let Some(gpa) = &params.gpa {
        let agg = gpa_aggregate(g, cfg, f, gpa)?;
        let (r, a) = gpa_refine(g, cfg, agg, f, &gpa.cross)?;
        gt_q = Some(agg);
        grs = Some(r);
        cross_attention = Some(a);
    }
    let mut gos = None;
    let mut head_weights = Vec::new();
    if !params.gfp.is_empty() {
        let blocks = gfp_blocks(g, cfg, f, &params.gfp)?;
        let mut pooled = Vec::with_capacity(blocks.len());
        for (fg, head) in blocks.into_iter().zip(&params.gfp) {
            let (s_m, a_m) = gfp_head(g, fg, head)?;
            pooled.push(g.reshape(s_m, &[b, 1, cfg.token_dim])?);
            head_weights.push(a_m);
        }
        gos = Some(g.concat(&pooled, 1)?);
    }
    let (s, gs) = fuse(g, gos, grs, &params.fuser)?;
    Ok(ForwardOutput {
        s,
        gt_q,
        cross_attention,
        grs,
        head_weights,
        gos,
        gs,
    })
}

/// Gradient-free forward on plain tensors.
pub fn infer(cfg: &ModelConfig, params: &EpsilonParams<Tensor>, features: &Tensor) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let f = g.constant(features.clone());
    let out = forward(&mut g, cfg, f, &vars)?;
    Ok(out.trace(&g))
}
