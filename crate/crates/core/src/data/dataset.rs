//! Class-split datasets held in memory, normalization statistics, and
//! episode sampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::{hxt, image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Base,
    Val,
    Novel,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Base, SplitKind::Val, SplitKind::Novel];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Base => "base",
            SplitKind::Val => "val",
            SplitKind::Novel => "novel",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitKind::Base),
            "val" => Ok(SplitKind::Val),
            "novel" => Ok(SplitKind::Novel),
            _ => Err(Error::Config(format!("unknown split {s:?} (base, val, novel)"))),
        }
    }
}

/// One class: raw `[3,S,S]` images in `[0,1]`, stored as f32 to halve
/// the footprint.
#[derive(Clone, Debug)]
pub struct ClassData {
    pub name: String,
    pub samples: Vec<Arc<[f32]>>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub kind: SplitKind,
    pub classes: Vec<ClassData>,
    pub image_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub class: usize,
    pub index: usize,
}

impl Split {
    pub fn from_classes(kind: SplitKind, image_size: usize, classes: Vec<ClassData>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data(format!("split {} has no classes", kind.dir_name())));
        }
        let len = 3 * image_size * image_size;
        for c in &classes {
            if c.samples.is_empty() {
                return Err(Error::Data(format!("class {} has no samples", c.name)));
            }
            if c.samples.iter().any(|s| s.len() != len) {
                return Err(Error::Data(format!("class {} has samples of the wrong size", c.name)));
            }
        }
        Ok(Self {
            kind,
            classes,
            image_size,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    /// Every sample in class-major order.
    pub fn all_refs(&self) -> Vec<SampleRef> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(class, c)| (0..c.samples.len()).map(move |index| SampleRef { class, index }))
            .collect()
    }

    /// Normalized batch `[B,3,S,S]`.
    pub fn batch(&self, refs: &[SampleRef], norm: &NormStats) -> Result<Tensor> {
        let plane = self.image_size * self.image_size;
        let mut data = Vec::with_capacity(refs.len() * 3 * plane);
        for r in refs {
            let img = self
                .classes
                .get(r.class)
                .and_then(|c| c.samples.get(r.index))
                .ok_or_else(|| Error::Data(format!("sample {r:?} out of range")))?;
            for c in 0..3 {
                let (m, s) = (norm.mean[c], norm.std[c]);
                data.extend(img[c * plane..(c + 1) * plane].iter().map(|&v| (v as f64 - m) / s));
            }
        }
        Tensor::new(&[refs.len(), 3, self.image_size, self.image_size], data)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub base: Split,
    pub val: Split,
    pub novel: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Base => &self.base,
            SplitKind::Val => &self.val,
            SplitKind::Novel => &self.novel,
        }
    }

    pub fn image_size(&self) -> usize {
        self.base.image_size
    }
}

/// Per-channel mean and standard deviation of raw pixel values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// One raw `[3,S,S]` image as a normalized `[1,3,S,S]` batch.
    pub fn image(&self, raw: &[f32], size: usize) -> Result<Tensor> {
        let plane = size * size;
        if raw.len() != 3 * plane {
            return Err(Error::Data(format!("image has {} values, expected 3x{size}x{size}", raw.len())));
        }
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v as f64 - self.mean[c]) / self.std[c]
            })
            .collect();
        Tensor::new(&[1, 3, size, size], data)
    }

    pub fn from_split(split: &Split) -> Self {
        let plane = split.image_size * split.image_size;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for c in &split.classes {
            for s in &c.samples {
                for ch in 0..3 {
                    for &v in &s[ch * plane..(ch + 1) * plane] {
                        sum[ch] += v as f64;
                        sq[ch] += (v as f64) * (v as f64);
                    }
                }
                n += plane;
            }
        }
        let mean = sum.map(|s| s / n as f64);
        let mut std = [1.0; 3];
        for ch in 0..3 {
            let var = sq[ch] / n as f64 - mean[ch] * mean[ch];
            std[ch] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in rd {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads one image file as a raw `[3,S,S]` array.
pub fn load_image(path: &Path, image_size: usize) -> Result<Option<Vec<f32>>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let t = match ext {
        "hxt" => hxt::read_raw_tensor(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        "ppm" => image::resize_bilinear(&image::read_ppm(path)?, image_size, image_size)?,
        _ => return Ok(None),
    };
    if t.shape() != [3, image_size, image_size] {
        return Err(Error::Data(format!(
            "{}: expected [3,{image_size},{image_size}], found {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(Some(t.data().iter().map(|&v| v as f32).collect()))
}

fn load_split(root: &Path, kind: SplitKind, image_size: usize) -> Result<Split> {
    let dir = root.join(kind.dir_name());
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing split directory {}", dir.display())));
    }
    let mut classes = Vec::new();
    for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut samples = Vec::new();
        for f in sorted_entries(&class_dir)? {
            if let Some(img) = load_image(&f, image_size)? {
                samples.push(Arc::from(img));
            }
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("class directory {} holds no images", class_dir.display())));
        }
        classes.push(ClassData { name, samples });
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("split directory {} has no classes", dir.display())));
    }
    Split::from_classes(kind, image_size, classes)
}

/// Reads `root/{base,val,novel}/<class>/*.{hxt,ppm}`. Class names must be
/// unique across splits.
pub fn load_dataset(root: impl AsRef<Path>, image_size: usize) -> Result<Dataset> {
    let root = root.as_ref();
    let base = load_split(root, SplitKind::Base, image_size)?;
    let val = load_split(root, SplitKind::Val, image_size)?;
    let novel = load_split(root, SplitKind::Novel, image_size)?;
    let mut seen = BTreeSet::new();
    for split in [&base, &val, &novel] {
        for c in &split.classes {
            if !seen.insert(c.name.clone()) {
                return Err(Error::Consistency(format!(
                    "class {} appears in more than one split",
                    c.name
                )));
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        base,
        val,
        novel,
    })
}

/// An `N`-way `K`-shot task. Supports and queries are class-major; labels
/// are episode-local.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Split-level class index of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<SampleRef>,
    pub query: Vec<SampleRef>,
    pub query_labels: Vec<usize>,
}

pub fn sample_episode<R: Rng + ?Sized>(
    split: &Split,
    way: usize,
    shot: usize,
    query_per_class: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || query_per_class == 0 {
        return Err(Error::Data("episode needs positive way, shot and query counts".into()));
    }
    if split.num_classes() < way {
        return Err(Error::Data(format!(
            "split {} has {} classes, episode needs {way}",
            split.kind.dir_name(),
            split.num_classes()
        )));
    }
    let need = shot + query_per_class;
    let classes: Vec<usize> = index::sample(rng, split.num_classes(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * query_per_class);
    let mut query_labels = Vec::with_capacity(way * query_per_class);
    for (label, &class) in classes.iter().enumerate() {
        let have = split.classes[class].samples.len();
        if have < need {
            return Err(Error::Data(format!(
                "class {} has {have} samples, episode needs {need}",
                split.classes[class].name
            )));
        }
        let picks = index::sample(rng, have, need).into_vec();
        support.extend(picks[..shot].iter().map(|&index| SampleRef { class, index }));
        query.extend(picks[shot..].iter().map(|&index| SampleRef { class, index }));
        query_labels.extend(std::iter::repeat_n(label, query_per_class));
    }
    Ok(Episode {
        way,
        shot,
        query_per_class,
        classes,
        support,
        query,
        query_labels,
    })
}
