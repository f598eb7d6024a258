//! Parameter containers. Every container is generic over its leaf type so
//! the same structure holds values (`Tensor`), graph handles (`Var`),
//! gradients, or optimizer moments, with one canonical field order.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams<T> {
    pub w_q: T,
    pub w_k: Option<T>,
    pub w_v: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpaParams<T> {
    /// `M × D` learnable group prompts.
    pub prompts: T,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub cross: CrossAttnParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfpHeadParams<T> {
    /// `D × D` block projection.
    pub proj: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    /// Hidden-to-logit weights. No output bias: a per-channel constant
    /// cannot change a softmax taken over tokens.
    pub mlp_w2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuserParams<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonParams<T = Tensor> {
    pub gpa: Option<GpaParams<T>>,
    pub gfp: Vec<GfpHeadParams<T>>,
    pub fuser: FuserParams<T>,
}

impl<T> EpsilonParams<T> {
    /// Maps every leaf, in canonical order, through `f(name, leaf)`.
    pub fn try_map<'a, U, E>(
        &'a self,
        f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<EpsilonParams<U>, E> {
        let gpa = match &self.gpa {
            None => None,
            Some(p) => {
                let prompts = f("gpa.prompts", &p.prompts)?;
                let mut encoder = Vec::with_capacity(p.encoder.len());
                for (i, l) in p.encoder.iter().enumerate() {
                    let mut n = |field: &str, t: &'a T| f(&format!("gpa.encoder.{i}.{field}"), t);
                    encoder.push(EncoderLayerParams {
                        ln1_gain: n("ln1_gain", &l.ln1_gain)?,
                        ln1_bias: n("ln1_bias", &l.ln1_bias)?,
                        w_q: n("w_q", &l.w_q)?,
                        w_k: n("w_k", &l.w_k)?,
                        w_v: n("w_v", &l.w_v)?,
                        w_o: n("w_o", &l.w_o)?,
                        ln2_gain: n("ln2_gain", &l.ln2_gain)?,
                        ln2_bias: n("ln2_bias", &l.ln2_bias)?,
                        ff_w1: n("ff_w1", &l.ff_w1)?,
                        ff_b1: n("ff_b1", &l.ff_b1)?,
                        ff_w2: n("ff_w2", &l.ff_w2)?,
                        ff_b2: n("ff_b2", &l.ff_b2)?,
                    });
                }
                let cross = CrossAttnParams {
                    w_q: f("gpa.cross.w_q", &p.cross.w_q)?,
                    w_k: p.cross.w_k.as_ref().map(|t| f("gpa.cross.w_k", t)).transpose()?,
                    w_v: p.cross.w_v.as_ref().map(|t| f("gpa.cross.w_v", t)).transpose()?,
                };
                Some(GpaParams {
                    prompts,
                    encoder,
                    cross,
                })
            }
        };
        let mut gfp = Vec::with_capacity(self.gfp.len());
        for (m, h) in self.gfp.iter().enumerate() {
            let mut n = |field: &str, t: &'a T| f(&format!("gfp.{m}.{field}"), t);
            gfp.push(GfpHeadParams {
                proj: n("proj", &h.proj)?,
                mlp_w1: n("mlp_w1", &h.mlp_w1)?,
                mlp_b1: n("mlp_b1", &h.mlp_b1)?,
                mlp_w2: n("mlp_w2", &h.mlp_w2)?,
            });
        }
        let fuser = FuserParams {
            w: f("fuser.w", &self.fuser.w)?,
            b: f("fuser.b", &self.fuser.b)?,
        };
        Ok(EpsilonParams { gpa, gfp, fuser })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> EpsilonParams<U> {
        self.try_map(&mut |n, t| Ok::<_, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Leaves with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    /// Rebuilds a container with this structure from leaves in canonical order.
    pub fn with_leaves<U>(&self, leaves: Vec<U>) -> Result<EpsilonParams<U>> {
        let expected = self.named().len();
        if leaves.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} parameter tensors, got {}",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }
}

impl EpsilonParams<Tensor> {
    /// Freshly initialized parameters. Projections use Glorot-uniform,
    /// prompts `normal(0, 0.02)`, biases zero and norm gains one.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, &mut |kind, shape| match kind {
            Init::Glorot => {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-a, a)).collect())
                    .expect("valid shape")
            }
            Init::Prompt => {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 0.02)).collect())
                    .expect("valid shape")
            }
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::ones(shape),
        }))
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, &mut |_, shape| Tensor::zeros(shape)))
    }

    fn build(cfg: &ModelConfig, make: &mut impl FnMut(Init, &[usize]) -> Tensor) -> Self {
        let d = cfg.token_dim;
        let h = cfg.mlp_hidden;
        let gpa = cfg.branches.uses_gpa().then(|| {
            let prompts = make(Init::Prompt, &[cfg.groups, d]);
            let encoder = (0..cfg.encoder_layers)
                .map(|_| EncoderLayerParams {
                    ln1_gain: make(Init::One, &[d]),
                    ln1_bias: make(Init::Zero, &[d]),
                    w_q: make(Init::Glorot, &[d, d]),
                    w_k: make(Init::Glorot, &[d, d]),
                    w_v: make(Init::Glorot, &[d, d]),
                    w_o: make(Init::Glorot, &[d, d]),
                    ln2_gain: make(Init::One, &[d]),
                    ln2_bias: make(Init::Zero, &[d]),
                    ff_w1: make(Init::Glorot, &[d, h]),
                    ff_b1: make(Init::Zero, &[h]),
                    ff_w2: make(Init::Glorot, &[h, d]),
                    ff_b2: make(Init::Zero, &[d]),
                })
                .collect();
            let cross = CrossAttnParams {
                w_q: make(Init::Glorot, &[d, d]),
                w_k: cfg.project_kv.then(|| make(Init::Glorot, &[d, d])),
                w_v: cfg.project_kv.then(|| make(Init::Glorot, &[d, d])),
            };
            GpaParams {
                prompts,
                encoder,
                cross,
            }
        });
        let gfp = if cfg.branches.uses_gfp() {
            (0..cfg.groups)
                .map(|_| GfpHeadParams {
                    proj: make(Init::Glorot, &[d, d]),
                    mlp_w1: make(Init::Glorot, &[d, h]),
                    mlp_b1: make(Init::Zero, &[h]),
                    mlp_w2: make(Init::Glorot, &[h, d]),
                })
                .collect()
        } else {
            Vec::new()
        };
        let fuser = FuserParams {
            w: make(Init::Glorot, &[cfg.fused_dim(), cfg.embed_dim]),
            b: make(Init::Zero, &[cfg.embed_dim]),
        };
        Self { gpa, gfp, fuser }
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Records every tensor as a leaf of `g`.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> EpsilonParams<Var> {
        self.map(|_, t| g.leaf(t.clone(), requires_grad))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Prompt,
    Zero,
    One,
}
