//! Conv-4 feature backbone, relation head, and the episode-level forward pass
//! that ties them to the cross-attention layers.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::helix::{self, HelixConfig, StackOutput};
use crate::tensor::layers;
use crate::tensor::{count_params, Ctx, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// Backbone width `C`.
    pub channels: usize,
    /// Expected input resolution (square).
    pub image_size: usize,
    /// Number of leading backbone blocks followed by 2×2 max pooling.
    pub pooled_blocks: usize,
    pub helix: HelixConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            image_size: 84,
            pooled_blocks: 4,
            helix: HelixConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config("model.channels must be at least 2".into()));
        }
        if self.pooled_blocks > 4 {
            return Err(Error::Config("model.pooled_blocks must be at most 4".into()));
        }
        let (h, _) = self.feature_hw();
        if h == 0 {
            return Err(Error::Config(format!(
                "image size {} is too small for {} pooled blocks",
                self.image_size, self.pooled_blocks
            )));
        }
        self.helix.validate(self.channels)
    }

    /// Spatial size of backbone features (floor at each pooling step).
    pub fn feature_hw(&self) -> (usize, usize) {
        let mut s = self.image_size;
        for _ in 0..self.pooled_blocks {
            s /= 2;
        }
        (s, s)
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let (h, w) = self.feature_hw();
        [self.channels, h, w]
    }

    fn head_hidden(&self) -> usize {
        (self.channels / 2).max(1)
    }
}

/// Builds backbone, cross-attention and head parameters (He-normal weights,
/// unit/zero norms, zero biases).
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    init_backbone(&mut ps, cfg, rng)?;
    helix::init_params(&mut ps, &cfg.helix, cfg.channels, rng)?;
    init_head(&mut ps, cfg, rng)?;
    Ok(ps)
}

pub fn init_backbone<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let c = cfg.channels;
    for b in 1..=4 {
        let cin = if b == 1 { 3 } else { c };
        ps.add_conv(&format!("backbone.block{b}.conv"), c, cin, 3, rng)?;
        ps.add_batch_norm(&format!("backbone.block{b}.bn"), c)?;
    }
    Ok(())
}

pub fn init_head<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let c = cfg.channels;
    ps.add_conv("head.block1.conv", c, 2 * c, 3, rng)?;
    ps.add_batch_norm("head.block1.bn", c)?;
    ps.add_conv("head.block2.conv", c, c, 3, rng)?;
    ps.add_batch_norm("head.block2.bn", c)?;
    ps.add_linear("head.fc1", cfg.head_hidden(), c, rng)?;
    ps.add_linear("head.fc2", 1, cfg.head_hidden(), rng)?;
    Ok(())
}

/// Trainable parameter count of a whole model.
pub fn model_param_count(ps: &ParamSet) -> usize {
    count_params(ps)
}

fn conv_block(ctx: &mut Ctx<'_>, prefix: &str, x: Var, pool: bool) -> Result<Var> {
    let y = layers::conv(ctx, &format!("{prefix}.conv"), x, 1, 1)?;
    let y = layers::batch_norm(ctx, &format!("{prefix}.bn"), y)?;
    let y = ctx.graph.relu(y);
    if pool {
        ctx.graph.max_pool2d(y, 2, 2)
    } else {
        Ok(y)
    }
}

/// Backbone over a batch of normalized images `[B,3,S,S]` → `[B,C,h,w]`.
pub fn backbone_forward(ctx: &mut Ctx<'_>, cfg: &ModelConfig, images: Var) -> Result<Var> {
    let s = ctx.graph.shape(images);
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(dim_err!(
            "backbone expects [B,3,{0},{0}] images, got {s:?}",
            cfg.image_size
        ));
    }
    let mut x = images;
    for b in 1..=4 {
        x = conv_block(ctx, &format!("backbone.block{b}"), x, b <= cfg.pooled_blocks)?;
    }
    Ok(x)
}

/// Relation scores `[P]` for pair-aligned features `[P,C,h,w]`; the head
/// sees the channel concatenation `[f̂_S, f̂_Q]`.
pub fn relation_scores(ctx: &mut Ctx<'_>, support: Var, query: Var) -> Result<Var> {
    let (ss, qs) = (ctx.graph.shape(support).to_vec(), ctx.graph.shape(query).to_vec());
    if ss != qs || ss.len() != 4 {
        return Err(dim_err!("relation head inputs differ: {ss:?} vs {qs:?}"));
    }
    let x = ctx.graph.concat(&[support, query], 1)?;
    let pool = ss[2] >= 2 && ss[3] >= 2;
    let x = conv_block(ctx, "head.block1", x, pool)?;
    let x = conv_block(ctx, "head.block2", x, false)?;
    let x = layers::global_avg_pool(ctx, x)?;
    let x = layers::linear(ctx, "head.fc1", x)?;
    let x = ctx.graph.relu(x);
    let x = layers::linear(ctx, "head.fc2", x)?;
    ctx.graph.reshape(x, &[ss[0]])
}

/// Class prototypes `[N,C,h,w]` from class-major support features `[N·K,C,h,w]`.
pub fn prototypes(ctx: &mut Ctx<'_>, support: Var, shots: usize) -> Result<Var> {
    let s = ctx.graph.shape(support).to_vec();
    if shots == 0 {
        return Err(Error::Precondition("prototype of zero support maps".into()));
    }
    if s.len() != 4 || !s[0].is_multiple_of(shots) {
        return Err(dim_err!("support batch {s:?} is not a multiple of {shots} shots"));
    }
    if shots == 1 {
        return Ok(support);
    }
    let n = s[0] / shots;
    let grouped = ctx.graph.reshape(support, &[n, shots, s[1] * s[2] * s[3]])?;
    let mean = ctx.graph.mean_axis(grouped, 1)?;
    ctx.graph.reshape(mean, &[n, s[1], s[2], s[3]])
}

/// Logits `[M,N]` for `M` query maps against `N` class prototypes. Row `m`
/// holds the relation score of query `m` with every class.
pub fn episode_logits(
    ctx: &mut Ctx<'_>,
    cfg: &ModelConfig,
    protos: Var,
    queries: Var,
) -> Result<(Var, StackOutput)> {
    let n = ctx.graph.shape(protos)[0];
    let m = ctx.graph.shape(queries)[0];
    if n < 2 {
        return Err(Error::Precondition(format!("episode needs at least 2 classes, got {n}")));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|q| (0..n).map(move |c| (c, q))).collect();
    let out = helix::stack_forward(ctx, &cfg.helix, protos, queries, &pairs)?;
    let scores = relation_scores(ctx, out.support, out.query)?;
    let logits = ctx.graph.reshape(scores, &[m, n])?;
    Ok((logits, out))
}

/// Full episode: images in, logits out. Supports are class-major
/// (`class·K + shot`).
pub fn episode_forward(
    ctx: &mut Ctx<'_>,
    cfg: &ModelConfig,
    support_images: &Tensor,
    shots: usize,
    query_images: &Tensor,
) -> Result<Var> {
    let ns = support_images.shape()[0];
    let images = concat_batches(support_images, query_images)?;
    let x = ctx.input(images);
    let feats = backbone_forward(ctx, cfg, x)?;
    let sf = ctx.graph.slice(feats, 0, 0, ns)?;
    let qf = ctx.graph.slice(feats, 0, ns, query_images.shape()[0])?;
    let protos = prototypes(ctx, sf, shots)?;
    let (logits, _) = episode_logits(ctx, cfg, protos, qf)?;
    Ok(logits)
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(dim_err!("image batches differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}
