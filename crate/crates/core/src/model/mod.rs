//! The network: group-prompt aggregation with cross-attention refinement,
//! multi-head global pooling, and the linear semantic fuser.

mod forward;
mod params;

pub use forward::{
    forward, fuse, gfp_blocks, gfp_head, gpa_aggregate, gpa_refine, infer, ForwardOutput,
    ForwardTrace,
};
pub use params::{CrossAttnParams, EncoderLayerParams, EpsilonParams, FuserParams, GfpHeadParams, GpaParams};

use crate::error::{Error, Result};

/// Which branches feed the semantic fuser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Global pooling heads and group prompts, concatenated.
    Full,
    /// Group prompts only.
    GpaOnly,
    /// Global pooling heads only.
    GfpOnly,
}

impl Branches {
    pub fn uses_gpa(self) -> bool {
        matches!(self, Branches::Full | Branches::GpaOnly)
    }

    pub fn uses_gfp(self) -> bool {
        matches!(self, Branches::Full | Branches::GfpOnly)
    }

    pub fn code(self) -> u32 {
        match self {
            Branches::Full => 0,
            Branches::GpaOnly => 1,
            Branches::GfpOnly => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Branches::Full),
            1 => Some(Branches::GpaOnly),
            2 => Some(Branches::GfpOnly),
            _ => None,
        }
    }
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Branches::Full),
            "gpa" | "gpa_only" => Ok(Branches::GpaOnly),
            "gfp" | "gfp_only" => Ok(Branches::GfpOnly),
            other => Err(Error::config(format!("unknown branch setting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of group prompts and of global pooling heads (`M`).
    pub groups: usize,
    /// Token feature width (`D`).
    pub token_dim: usize,
    /// Tokens per image (`N`).
    pub num_tokens: usize,
    /// Label embedding width (`d_w`).
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Hidden width of the feed-forward and pooling MLPs.
    pub mlp_hidden: usize,
    pub branches: Branches,
    /// Project keys and values of the prompt cross-attention; raw tokens otherwise.
    pub project_kv: bool,
}

impl ModelConfig {
    /// Defaults: `M = 8`, one encoder layer with four heads, hidden width `D`.
    pub fn new(token_dim: usize, num_tokens: usize, embed_dim: usize) -> Self {
        Self {
            groups: 8,
            token_dim,
            num_tokens,
            embed_dim,
            encoder_layers: 1,
            encoder_heads: 4,
            mlp_hidden: token_dim,
            branches: Branches::Full,
            project_kv: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("groups", self.groups),
            ("token_dim", self.token_dim),
            ("num_tokens", self.num_tokens),
            ("embed_dim", self.embed_dim),
            ("encoder_heads", self.encoder_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.branches.uses_gpa() && self.encoder_layers > 0 && self.token_dim % self.encoder_heads != 0 {
            return Err(Error::config(format!(
                "token_dim {} is not divisible by encoder_heads {}",
                self.token_dim, self.encoder_heads
            )));
        }
        Ok(())
    }

    /// Width of the fuser input: `2D` with both branches, `D` with one.
    pub fn fused_dim(&self) -> usize {
        match self.branches {
            Branches::Full => 2 * self.token_dim,
            _ => self.token_dim,
        }
    }

    /// Total learnable scalars implied by this configuration.
    pub fn num_parameters(&self) -> usize {
        let d = self.token_dim;
        let h = self.mlp_hidden;
        let mut total = self.fused_dim() * self.embed_dim + self.embed_dim;
        if self.branches.uses_gpa() {
            let layer = 4 * d * d + (d * h + h + h * d + d) + 4 * d;
            let cross = if self.project_kv { 3 * d * d } else { d * d };
            total += self.groups * d + self.encoder_layers * layer + cross;
        }
        if self.branches.uses_gfp() {
            total += self.groups * (d * d + d * h + h + h * d);
        }
        total
    }
}
