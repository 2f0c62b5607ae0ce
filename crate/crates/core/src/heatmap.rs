//! Grayscale attention maps for one support/query pair.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::image::write_pgm;
use crate::data::load_image;
use crate::error::{Error, Result};
use crate::helix::stack_forward;
use crate::model::backbone_forward;
use crate::tensor::{Ctx, Mode, Tensor, Var};
use crate::trainer::Checkpoint;

/// Side length of written maps.
pub const HEATMAP_SIZE: usize = 84;

/// Max over channels of a `[C,H,W]` map, row-major `H·W`.
pub fn channel_max(t: &Tensor) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Dimension(format!("channel_max wants [C,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = t.data();
    Ok((0..plane)
        .map(|i| (0..s[0]).map(|c| d[c * plane + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn normalize_to_u8(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|&x| {
            if span > 0.0 {
                (255.0 * (x - lo) / span).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Nearest-neighbour resize: output pixel `i` reads source `⌊i·h/out⌋`.
pub fn upscale_nearest(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let si = i * h / out_h;
        for j in 0..out_w {
            out.push(src[si * w + j * w / out_w]);
        }
    }
    out
}

/// Tokens `[1,HW,C]` back to a `[C,H,W]` map.
fn tokens_to_map(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 || s[1] != h * w {
        return Err(Error::Dimension(format!("relation map {s:?} does not cover {h}x{w}")));
    }
    let c = s[2];
    Ok(Tensor::from_fn(&[c, h, w], |i| t.data()[(i % (h * w)) * c + i / (h * w)]))
}

fn first_sample(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    Tensor::new(&s[1..], t.data()[..s[1..].iter().product::<usize>()].to_vec())
}

fn read_input(path: &Path, size: usize) -> Result<Vec<f32>> {
    load_image(path, size)?.ok_or_else(|| {
        Error::Data(format!("{}: expected a .hxt or .ppm image", path.display()))
    })
}

/// Writes `{support,query}_{backbone,rmp,rep}.pgm` into `out_dir` and
/// returns their paths. Branches without a relation map (one-way
/// variants, or no attention layers) fall back to backbone features.
pub fn export_heatmaps(
    ckpt: &Checkpoint,
    support_image: &Path,
    query_image: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = ckpt.config.model;
    model.validate()?;
    let size = model.image_size;
    let s_img = ckpt.norm.image(&read_input(support_image, size)?, size)?;
    let q_img = ckpt.norm.image(&read_input(query_image, size)?, size)?;

    let params = ckpt.eval_params();
    let mut ctx = Ctx::new(params, Mode::Eval, false);
    let sx = ctx.input(s_img);
    let qx = ctx.input(q_img);
    let fs = backbone_forward(&mut ctx, &model, sx)?;
    let fq = backbone_forward(&mut ctx, &model, qx)?;
    let out = stack_forward(&mut ctx, &model.helix, fs, fq, &[(0, 0)])?;
    let r_qs = out.passes.iter().rev().find_map(|p| p.r_qs);
    let r_sq = out.passes.iter().rev().find_map(|p| p.r_sq);

    let (h, w) = model.feature_hw();
    let value = |v: Var| first_sample(ctx.graph.value(v));
    let relation = |r: Option<Var>, fallback: Var| -> Result<Tensor> {
        match r {
            Some(r) => tokens_to_map(ctx.graph.value(r), h, w),
            None => value(fallback),
        }
    };
    let maps = [
        ("support_backbone", value(fs)?),
        ("support_rmp", relation(r_qs, fs)?),
        ("support_rep", value(out.support)?),
        ("query_backbone", value(fq)?),
        ("query_rmp", relation(r_sq, fq)?),
        ("query_rep", value(out.query)?),
    ];

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![];
    for (name, map) in maps {
        let gray = normalize_to_u8(&channel_max(&map)?);
        let big = upscale_nearest(&gray, h, w, HEATMAP_SIZE, HEATMAP_SIZE);
        let path = out_dir.join(format!("{name}.pgm"));
        write_pgm(&path, &big, HEATMAP_SIZE, HEATMAP_SIZE)?;
        written.push(path);
    }
    Ok(written)
}
