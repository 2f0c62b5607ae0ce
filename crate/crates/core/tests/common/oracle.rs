//! Brute-force cross-attention oracle over nested `Vec`s.
//!
//! Maps are `[c][y][x]`; token matrices are `[token][channel]` with tokens in
//! row-major `(y, x)` order.

pub type Map = Vec<Vec<Vec<f64>>>;
pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-8;

/// Reads `[C,H,W]` from a flat row-major slice.
pub fn map_from(flat: &[f64], c: usize, h: usize, w: usize) -> Map {
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|y| (0..w).map(|x| flat[(ch * h + y) * w + x]).collect())
                .collect()
        })
        .collect()
}

pub fn flatten(m: &Map) -> Vec<f64> {
    m.iter().flatten().flatten().copied().collect()
}

/// 3×3, stride 1, zero padding 1; `w` is `[cout][cin][3][3]` flattened.
pub fn conv3x3(f: &Map, w: &[f64]) -> Map {
    let (cin, h, wd) = (f.len(), f[0].len(), f[0][0].len());
    let cout = w.len() / (cin * 9);
    let mut out = vec![vec![vec![0.0; wd]; h]; cout];
    for co in 0..cout {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = x as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += f[ci][iy as usize][ix as usize] * w[((co * cin + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[co][y][x] = acc;
            }
        }
    }
    out
}

/// Batch norm over a single map using its own per-channel statistics.
pub fn bn_single(f: &Map, gamma: &[f64], beta: &[f64]) -> Map {
    f.iter()
        .enumerate()
        .map(|(c, plane)| {
            let vals: Vec<f64> = plane.iter().flatten().copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            plane
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|v| gamma[c] * (v - mean) / (var + EPS).sqrt() + beta[c])
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn tokens(f: &Map) -> Mat {
    let (c, h, w) = (f.len(), f[0].len(), f[0][0].len());
    (0..h * w)
        .map(|t| (0..c).map(|ch| f[ch][t / w][t % w]).collect())
        .collect()
}

pub fn untokens(t: &Mat, h: usize, w: usize) -> Map {
    let c = t[0].len();
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t[y * w + x][ch]).collect()).collect())
        .collect()
}

/// Single-head attention with explicit loops: rows of `e` attend over rows
/// of `k`, mixing rows of `v`. Only channels `[lo, hi)` take part.
pub fn attend(e: &Mat, k: &Mat, v: &Mat, lo: usize, hi: usize) -> Mat {
    let d = (hi - lo) as f64;
    let mut out = vec![vec![0.0; hi - lo]; e.len()];
    for i in 0..e.len() {
        let mut scores = vec![0.0; k.len()];
        for j in 0..k.len() {
            let mut s = 0.0;
            for c in lo..hi {
                s += e[i][c] * k[j][c];
            }
            scores[j] = s / d.sqrt();
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..k.len() {
            for c in lo..hi {
                out[i][c - lo] += exps[j] / z * v[j][c];
            }
        }
    }
    out
}

pub fn multi_head(e: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let c = e[0].len();
    let d = c / heads;
    let parts: Vec<Mat> = (0..heads).map(|h| attend(e, k, v, h * d, (h + 1) * d)).collect();
    (0..e.len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

/// `x·Wᵀ + b` per row; `w` is `[out][in]` flattened.
pub fn linear_rows(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let n_in = x[0].len();
    let n_out = b.len();
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * row[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm_rows(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - m) / (var + EPS).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

/// Parameters of one embedding stack (conv weight plus batch-norm affine).
pub struct EmbedW {
    pub conv: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub struct RepW {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub fn embed(f: &Map, p: &EmbedW) -> Mat {
    tokens(&bn_single(&conv3x3(f, &p.conv), &p.gamma, &p.beta))
}

/// `MLP(LN(f ⊙ R))` on tokens, returned as a map.
pub fn rep(f: &Map, r: &Mat, p: &RepW) -> Map {
    let (h, w) = (f[0].len(), f[0][0].len());
    let ft = tokens(f);
    let masked: Mat = ft
        .iter()
        .zip(r)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    let n = layer_norm_rows(&masked, &p.ln_gamma, &p.ln_beta);
    let hdn: Mat = linear_rows(&n, &p.w1, &p.b1)
        .into_iter()
        .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    untokens(&linear_rows(&hdn, &p.w2, &p.b2), h, w)
}

pub struct SymW {
    pub s_e: EmbedW,
    pub s_k: EmbedW,
    pub s_v: EmbedW,
    pub q_e: EmbedW,
    pub q_k: EmbedW,
    pub q_v: EmbedW,
    pub rep_s: RepW,
    pub rep_q: RepW,
}

pub struct SymOut {
    pub r_qs: Mat,
    pub r_sq: Mat,
    pub fs_hat: Map,
    pub fq_hat: Map,
}

/// Symmetric relation mining plus enhancement for one pair.
pub fn symmetric(fs: &Map, fq: &Map, p: &SymW, heads: usize) -> SymOut {
    let r_qs = multi_head(&embed(fs, &p.s_e), &embed(fq, &p.q_k), &embed(fq, &p.q_v), heads);
    let r_sq = multi_head(&embed(fq, &p.q_e), &embed(fs, &p.s_k), &embed(fs, &p.s_v), heads);
    let fs_hat = rep(fs, &r_qs, &p.rep_s);
    let fq_hat = rep(fq, &r_sq, &p.rep_q);
    SymOut {
        r_qs,
        r_sq,
        fs_hat,
        fq_hat,
    }
}
