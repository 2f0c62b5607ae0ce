//! Bidirectional cross-attention between a support and a query feature map.
//!
//! Each branch's backbone map `[C,H,W]` is read as `HW` tokens of width `C`.
//! Token embeddings produce per-branch query (`E`), key (`K`) and value (`V`)
//! matrices. The relation mining step compares one branch's `E` against the
//! other branch's `K` and mixes the other branch's `V` into a cross-image
//! semantic relation map (CSRM) for the first branch. The representation
//! enhancement step uses that map as a soft mask over the branch's own
//! backbone features, then normalizes and runs a small feed-forward network.
//!
//! All functions work on pair batches: support maps `[Ns,C,H,W]`, query maps
//! `[Nq,C,H,W]`, and a list of `(support, query)` index pairs. Embeddings are
//! computed once per map and gathered per pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::layers::{self, from_tokens, to_tokens};
use crate::tensor::{Ctx, ParamSet, Var};

/// Which cross-attention layout a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Query-to-support: only support features are enhanced.
    QtoS,
    /// Support-to-query: only query features are enhanced.
    StoQ,
    /// S→Q followed by Q→S, each with its own parameters.
    AsymSQ,
    /// Q→S followed by S→Q.
    AsymQS,
    /// Both directions computed in parallel from the same inputs.
    Symmetric,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::QtoS,
        VariantKind::StoQ,
        VariantKind::AsymSQ,
        VariantKind::AsymQS,
        VariantKind::Symmetric,
    ];

    /// The passes run in order, each naming which branches it enhances.
    pub fn passes(self) -> &'static [Direction] {
        use Direction::*;
        match self {
            VariantKind::QtoS => &[EnhanceSupport],
            VariantKind::StoQ => &[EnhanceQuery],
            VariantKind::AsymSQ => &[EnhanceQuery, EnhanceSupport],
            VariantKind::AsymQS => &[EnhanceSupport, EnhanceQuery],
            VariantKind::Symmetric => &[Both],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::QtoS => "qs",
            VariantKind::StoQ => "sq",
            VariantKind::AsymSQ => "asym-sq",
            VariantKind::AsymQS => "asym-qs",
            VariantKind::Symmetric => "sym",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected qs, sq, asym-sq, asym-qs or sym)")))
    }
}

/// Branches enhanced by one attention pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    EnhanceSupport,
    EnhanceQuery,
    Both,
}

impl Direction {
    fn support(self) -> bool {
        matches!(self, Direction::EnhanceSupport | Direction::Both)
    }

    fn query(self) -> bool {
        matches!(self, Direction::EnhanceQuery | Direction::Both)
    }
}

/// How tokens are embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedMode {
    /// 3×3 stride-1 convolution plus batch norm.
    Conv,
    /// One shared `C×C` linear map per token, no normalization.
    Fc,
}

impl EmbedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMode::Conv => "conv",
            EmbedMode::Fc => "fc",
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(EmbedMode::Conv),
            "fc" => Ok(EmbedMode::Fc),
            _ => Err(Error::Config(format!("unknown embedding mode {s:?} (expected conv or fc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HelixConfig {
    pub variant: VariantKind,
    pub heads: usize,
    /// Number of stacked cross-attention layers; 0 disables them entirely.
    pub stack: usize,
    pub embed: EmbedMode,
    /// When off, the CSRMs themselves replace the features fed to the head.
    pub rep: bool,
}

impl Default for HelixConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Symmetric,
            heads: 2,
            stack: 1,
            embed: EmbedMode::Conv,
            rep: true,
        }
    }
}

impl HelixConfig {
    /// Plain relation-network baseline: no cross-attention layers.
    pub fn baseline() -> Self {
        Self {
            stack: 0,
            ..Self::default()
        }
    }

    /// Short label such as `sym/h2/conv/rep/n1`; the baseline is `rn`.
    pub fn label(&self) -> String {
        if self.stack == 0 {
            return "rn".into();
        }
        format!(
            "{}/h{}/{}/{}/n{}",
            self.variant,
            self.heads,
            self.embed,
            if self.rep { "rep" } else { "norep" },
            self.stack
        )
    }

    /// Inverse of [`label`](Self::label). Fields missing from `text` keep
    /// their value in `defaults`, so `sym/norep` or `qs/h4` are accepted.
    pub fn from_label(text: &str, defaults: HelixConfig) -> Result<Self> {
        let text = text.trim();
        if text == "rn" {
            return Ok(Self::baseline());
        }
        let mut parts = text.split('/');
        let mut cfg = defaults;
        cfg.variant = parts.next().unwrap_or_default().parse()?;
        if cfg.stack == 0 {
            cfg.stack = 1;
        }
        let number = |p: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad field {p:?} in cell {text:?}")))
        };
        for p in parts {
            match p {
                "rep" => cfg.rep = true,
                "norep" => cfg.rep = false,
                _ if p.starts_with('h') => cfg.heads = number(p, &p[1..])?,
                _ if p.starts_with('n') => cfg.stack = number(p, &p[1..])?,
                _ => cfg.embed = p.parse()?,
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by head count {}",
                self.heads
            )));
        }
        Ok(())
    }
}

fn embed_prefix(pass: &str, branch: char, role: char) -> String {
    format!("{pass}.embed.{branch}.{role}")
}

fn pass_prefix(layer: usize, pass: usize) -> String {
    format!("helix.{layer}.{pass}")
}

/// Registers the parameters of every stacked layer.
pub fn init_params<R: Rng + ?Sized>(
    params: &mut ParamSet,
    cfg: &HelixConfig,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate(channels)?;
    let c = channels;
    for layer in 0..cfg.stack {
        for (i, dir) in cfg.variant.passes().iter().enumerate() {
            let pass = pass_prefix(layer, i);
            let mut roles = vec![];
            if dir.support() {
                roles.extend([('s', 'e'), ('q', 'k'), ('q', 'v')]);
            }
            if dir.query() {
                roles.extend([('q', 'e'), ('s', 'k'), ('s', 'v')]);
            }
            roles.sort_unstable();
            for (branch, role) in roles {
                let p = embed_prefix(&pass, branch, role);
                match cfg.embed {
                    EmbedMode::Conv => {
                        params.add_conv(&format!("{p}.conv"), c, c, 3, rng)?;
                        params.add_batch_norm(&format!("{p}.bn"), c)?;
                    }
                    EmbedMode::Fc => {
                        let std = (2.0 / c as f64).sqrt();
                        params.insert(
                            format!("{p}.fc.weight"),
                            crate::tensor::Tensor::randn(&[c, c], std, rng),
                            true,
                        )?;
                    }
                }
            }
            if cfg.rep {
                for (branch, on) in [('s', dir.support()), ('q', dir.query())] {
                    if on {
                        let p = format!("{pass}.rep.{branch}");
                        params.add_layer_norm(&format!("{p}.norm"), c)?;
                        params.add_linear(&format!("{p}.mlp1"), c, c, rng)?;
                        params.add_linear(&format!("{p}.mlp2"), c, c, rng)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Embeds `f: [N,C,H,W]` into a token matrix `[N,HW,C]` with the stack at
/// `prefix`. No position embedding is added.
pub fn embed_tokens(ctx: &mut Ctx<'_>, prefix: &str, f: Var, mode: EmbedMode) -> Result<Var> {
    match mode {
        EmbedMode::Conv => {
            let y = layers::conv(ctx, &format!("{prefix}.conv"), f, 1, 1)?;
            let y = layers::batch_norm(ctx, &format!("{prefix}.bn"), y)?;
            to_tokens(ctx, y)
        }
        EmbedMode::Fc => {
            let t = to_tokens(ctx, f)?;
            layers::linear_nobias(ctx, &format!("{prefix}.fc"), t)
        }
    }
}

/// Scores `[P,T,T]` whose row `i` belongs to token `i` of the branch being
/// enhanced: `E_self · K_otherᵀ`.
pub fn attention_scores(ctx: &mut Ctx<'_>, k_other: Var, e_self: Var) -> Result<Var> {
    let (ks, es) = (ctx.graph.shape(k_other), ctx.graph.shape(e_self));
    if ks.last() != es.last() {
        return Err(dim_err!("attention channel mismatch: keys {ks:?}, queries {es:?}"));
    }
    ctx.graph.matmul_nt(e_self, k_other)
}

/// `softmax_rows(A / √d) · V_other`.
pub fn csrm(ctx: &mut Ctx<'_>, scores: Var, v_other: Var, d: usize) -> Result<Var> {
    let scaled = ctx.graph.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = ctx.graph.softmax_last(scaled)?;
    ctx.graph.matmul(attn, v_other)
}

/// Multi-head relation map: channels split into `heads` groups of width
/// `C/heads`, attention per group scaled by `√(C/heads)`, results
/// concatenated back along channels.
pub fn multi_head(ctx: &mut Ctx<'_>, e_self: Var, k_other: Var, v_other: Var, heads: usize) -> Result<Var> {
    let c = *ctx.graph.shape(e_self).last().unwrap();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("channel count {c} is not divisible by head count {heads}")));
    }
    if heads == 1 {
        let a = attention_scores(ctx, k_other, e_self)?;
        return csrm(ctx, a, v_other, c);
    }
    let d = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let e = ctx.graph.slice(e_self, 2, h * d, d)?;
        let k = ctx.graph.slice(k_other, 2, h * d, d)?;
        let v = ctx.graph.slice(v_other, 2, h * d, d)?;
        let a = attention_scores(ctx, k, e)?;
        outs.push(csrm(ctx, a, v, d)?);
    }
    ctx.graph.concat(&outs, 2)
}

/// Soft-mask enhancement: `MLP(LayerNorm(f ⊙ R))`, no residual.
/// `f` is `[P,C,H,W]`, `r` is the matching token matrix `[P,HW,C]`.
pub fn rep_enhance(ctx: &mut Ctx<'_>, prefix: &str, f: Var, r: Var) -> Result<Var> {
    let s = ctx.graph.shape(f).to_vec();
    let ft = to_tokens(ctx, f)?;
    let masked = ctx.graph.mul(ft, r)?;
    let normed = layers::layer_norm(ctx, &format!("{prefix}.norm"), masked)?;
    let h = layers::linear(ctx, &format!("{prefix}.mlp1"), normed)?;
    let h = ctx.graph.relu(h);
    let out = layers::linear(ctx, &format!("{prefix}.mlp2"), h)?;
    from_tokens(ctx, out, s[2], s[3])
}

/// Outputs of one attention pass, per pair.
#[derive(Clone, Debug)]
pub struct PassOutput {
    /// Support features fed onward `[P,C,H,W]`.
    pub support: Var,
    /// Query features fed onward `[P,C,H,W]`.
    pub query: Var,
    /// Relation map enhancing the support branch, `[P,HW,C]`.
    pub r_qs: Option<Var>,
    /// Relation map enhancing the query branch, `[P,HW,C]`.
    pub r_sq: Option<Var>,
}

fn check_pairs(ctx: &Ctx<'_>, fs: Var, fq: Var, pairs: &[(usize, usize)]) -> Result<()> {
    let (ss, qs) = (ctx.graph.shape(fs), ctx.graph.shape(fq));
    if ss.len() != 4 || ss[1..] != qs[1..] {
        return Err(dim_err!("feature pair shapes differ: {ss:?} vs {qs:?}"));
    }
    if pairs.is_empty() {
        return Err(Error::Precondition("no support/query pairs given".into()));
    }
    if pairs.iter().any(|&(s, q)| s >= ss[0] || q >= qs[0]) {
        return Err(dim_err!("pair index out of range for {} support and {} query maps", ss[0], qs[0]));
    }
    Ok(())
}

fn split_pairs(pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    pairs.iter().copied().unzip()
}

/// Relation mining in the directions named by `dir`. Both directions read
/// the same inputs and do not depend on each other.
pub fn rmp_forward(
    ctx: &mut Ctx<'_>,
    pass: &str,
    dir: Direction,
    cfg: &HelixConfig,
    fs: Var,
    fq: Var,
    pairs: &[(usize, usize)],
) -> Result<(Option<Var>, Option<Var>)> {
    check_pairs(ctx, fs, fq, pairs)?;
    let (s_idx, q_idx) = split_pairs(pairs);
    let embed = |ctx: &mut Ctx<'_>, branch: char, role: char, f: Var, idx: &[usize]| -> Result<Var> {
        let t = embed_tokens(ctx, &embed_prefix(pass, branch, role), f, cfg.embed)?;
        ctx.graph.index_select(t, idx)
    };
    let r_qs = if dir.support() {
        let e_s = embed(ctx, 's', 'e', fs, &s_idx)?;
        let k_q = embed(ctx, 'q', 'k', fq, &q_idx)?;
        let v_q = embed(ctx, 'q', 'v', fq, &q_idx)?;
        Some(multi_head(ctx, e_s, k_q, v_q, cfg.heads)?)
    } else {
        None
    };
    let r_sq = if dir.query() {
        let e_q = embed(ctx, 'q', 'e', fq, &q_idx)?;
        let k_s = embed(ctx, 's', 'k', fs, &s_idx)?;
        let v_s = embed(ctx, 's', 'v', fs, &s_idx)?;
        Some(multi_head(ctx, e_q, k_s, v_s, cfg.heads)?)
    } else {
        None
    };
    Ok((r_qs, r_sq))
}

/// One attention pass: relation mining then enhancement of the selected
/// branches. A branch that is not enhanced passes through unchanged.
pub fn pass_forward(
    ctx: &mut Ctx<'_>,
    pass: &str,
    dir: Direction,
    cfg: &HelixConfig,
    fs: Var,
    fq: Var,
    pairs: &[(usize, usize)],
) -> Result<PassOutput> {
    let (r_qs, r_sq) = rmp_forward(ctx, pass, dir, cfg, fs, fq, pairs)?;
    let (s_idx, q_idx) = split_pairs(pairs);
    let s = ctx.graph.shape(fs).to_vec();
    let (h, w) = (s[2], s[3]);
    let enhance = |ctx: &mut Ctx<'_>, branch: char, f: Var, idx: &[usize], r: Option<Var>| -> Result<Var> {
        let fp = ctx.graph.index_select(f, idx)?;
        match r {
            None => Ok(fp),
            Some(r) if cfg.rep => rep_enhance(ctx, &format!("{pass}.rep.{branch}"), fp, r),
            Some(r) => from_tokens(ctx, r, h, w),
        }
    };
    let support = enhance(ctx, 's', fs, &s_idx, r_qs)?;
    let query = enhance(ctx, 'q', fq, &q_idx, r_sq)?;
    Ok(PassOutput {
        support,
        query,
        r_qs,
        r_sq,
    })
}

/// One full layer of the configured variant (one or two passes).
pub fn helix_forward(
    ctx: &mut Ctx<'_>,
    cfg: &HelixConfig,
    layer: usize,
    fs: Var,
    fq: Var,
    pairs: &[(usize, usize)],
) -> Result<Vec<PassOutput>> {
    let mut outs: Vec<PassOutput> = Vec::new();
    let identity: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (i, i)).collect();
    for (i, &dir) in cfg.variant.passes().iter().enumerate() {
        let pass = pass_prefix(layer, i);
        let out = match outs.last() {
            None => pass_forward(ctx, &pass, dir, cfg, fs, fq, pairs)?,
            Some(prev) => pass_forward(ctx, &pass, dir, cfg, prev.support, prev.query, &identity)?,
        };
        outs.push(out);
    }
    Ok(outs)
}

/// Enhanced features for every pair after `cfg.stack` layers.
///
/// With `stack == 0` the inputs are only gathered per pair.
pub fn stack_forward(
    ctx: &mut Ctx<'_>,
    cfg: &HelixConfig,
    fs: Var,
    fq: Var,
    pairs: &[(usize, usize)],
) -> Result<StackOutput> {
    check_pairs(ctx, fs, fq, pairs)?;
    let (s_idx, q_idx) = split_pairs(pairs);
    let mut support = ctx.graph.index_select(fs, &s_idx)?;
    let mut query = ctx.graph.index_select(fq, &q_idx)?;
    let mut passes = vec![];
    let identity: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (i, i)).collect();
    for layer in 0..cfg.stack {
        let outs = if layer == 0 {
            helix_forward(ctx, cfg, layer, fs, fq, pairs)?
        } else {
            helix_forward(ctx, cfg, layer, support, query, &identity)?
        };
        let last = outs.last().expect("every variant has at least one pass");
        support = last.support;
        query = last.query;
        passes.extend(outs);
    }
    Ok(StackOutput {
        support,
        query,
        passes,
    })
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub support: Var,
    pub query: Var,
    /// Every pass in execution order.
    pub passes: Vec<PassOutput>,
}

/// Trainable scalar count of one layer, computed from the layer layout
/// rather than from a [`ParamSet`].
pub fn layer_param_count(cfg: &HelixConfig, c: usize) -> usize {
    let embed = match cfg.embed {
        EmbedMode::Conv => 9 * c * c + 2 * c,
        EmbedMode::Fc => c * c,
    };
    let rep = if cfg.rep { 2 * c + 2 * (c * c + c) } else { 0 };
    cfg.variant
        .passes()
        .iter()
        .map(|d| match d {
            Direction::Both => 6 * embed + 2 * rep,
            _ => 3 * embed + rep,
        })
        .sum()
}
