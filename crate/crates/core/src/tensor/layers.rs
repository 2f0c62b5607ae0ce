//! Parameterized layers expressed over a [`Ctx`].

use super::graph::{BnMode, Var};
use super::params::{Ctx, Mode};
use crate::error::{dim_err, Result};

/// Convolution with the weight stored at `{prefix}.weight` (no bias).
pub fn conv(ctx: &mut Ctx<'_>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    ctx.graph.conv2d(x, w, stride, pad)
}

/// Batch normalization; training mode records batch statistics for a later
/// running-statistic update.
pub fn batch_norm(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    match ctx.mode() {
        Mode::Train => {
            let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, BnMode::Train)?;
            if let Some(stats) = stats {
                ctx.record_bn(prefix, stats);
            }
            Ok(y)
        }
        Mode::Eval => {
            let params = ctx.params();
            let mean = params.value(&format!("{prefix}.running_mean"))?;
            let var = params.value(&format!("{prefix}.running_var"))?;
            let (y, _) = ctx.graph.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }
}

pub fn layer_norm(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    ctx.graph.layer_norm(x, gamma, beta)
}

/// `x·Wᵀ + b` over the last axis of a rank-2 or rank-3 input.
pub fn linear(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    let y = ctx.graph.matmul_nt(x, w)?;
    let b = ctx.p(&format!("{prefix}.bias"))?;
    let axis = ctx.graph.shape(y).len() - 1;
    ctx.graph.add_bias(y, b, axis)
}

/// Linear map without bias.
pub fn linear_nobias(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    ctx.graph.matmul_nt(x, w)
}

/// `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(dim_err!("global_avg_pool expects [N,C,H,W], got {s:?}"));
    }
    let flat = ctx.graph.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    ctx.graph.mean_axis(flat, 2)
}

/// `[N,C,H,W] → [N,HW,C]`, tokens in row-major (h, w) order.
pub fn to_tokens(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(dim_err!("to_tokens expects [N,C,H,W], got {s:?}"));
    }
    let flat = ctx.graph.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    ctx.graph.transpose_last2(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(ctx: &mut Ctx<'_>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = ctx.graph.shape(t).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(dim_err!("from_tokens: {s:?} is not [N,{},C]", h * w));
    }
    let chw = ctx.graph.transpose_last2(t)?;
    ctx.graph.reshape(chw, &[s[0], s[2], h, w])
}
