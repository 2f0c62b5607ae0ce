mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::rng;
use helix_core::data::hxt::{self, Dtype};
use helix_core::data::image::{read_pgm, read_ppm, resize_bilinear, write_pgm, write_ppm};
use helix_core::data::synth::{self, Jitter};
use helix_core::data::{
    generate_synthetic, load_dataset, sample_episode, ClassData, NormStats, Split, SplitKind, SyntheticSpec,
};
use helix_core::tensor::Tensor;
use rand::Rng;

// ----------------------------------------------------------- raw tensors

#[test]
fn raw_tensor_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::randn(&[3, 84, 84], 1.0, &mut rng(1));
    let p = dir.path().join("a.hxt");
    hxt::write_raw_tensor(&p, &t).unwrap();
    assert!(hxt::read_raw_tensor(&p).unwrap().bit_eq(&t));
}

#[test]
fn raw_tensor_byte_layout() {
    let mut bytes = b"HXT1".to_vec();
    bytes.extend_from_slice(&[2, 2, 0, 0]);
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&3u32.to_le_bytes());
    let vals: [f64; 6] = [1.5, -2.0, 0.25, 1e-300, 7.0, -0.0];
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let t = hxt::decode(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    for (a, b) in t.data().iter().zip(vals) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(hxt::encode(&t, Dtype::F64), bytes);
}

#[test]
fn raw_tensor_f32_payload_widens() {
    let mut bytes = b"HXT1".to_vec();
    bytes.extend_from_slice(&[1, 1, 0, 0]);
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&0.5f32.to_le_bytes());
    bytes.extend_from_slice(&(-3.0f32).to_le_bytes());
    assert_eq!(hxt::decode(&bytes).unwrap().data(), &[0.5, -3.0]);
}

#[test]
fn raw_tensor_rejects_damage() {
    let good = hxt::encode(&Tensor::ones(&[2, 2]), Dtype::F64);
    let truncated = &good[..good.len() - 3];
    assert_eq!(hxt::decode(truncated).unwrap_err().category(), "format");
    let mut magic = good.clone();
    magic[0] = b'X';
    assert_eq!(hxt::decode(&magic).unwrap_err().category(), "format");
    let mut dtype = good.clone();
    dtype[4] = 9;
    assert_eq!(hxt::decode(&dtype).unwrap_err().category(), "format");
    assert_eq!(hxt::decode(&good[..10]).unwrap_err().category(), "format");
}

// ----------------------------------------------------------- images

#[test]
fn ppm_bytes_decode_to_expected_floats() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
    let px = [255u8, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204];
    bytes.extend_from_slice(&px);
    fs::write(&p, bytes).unwrap();
    let t = read_ppm(&p).unwrap();
    assert_eq!(t.shape(), &[3, 2, 2]);
    for i in 0..4 {
        for c in 0..3 {
            assert_eq!(t.at(&[c, i / 2, i % 2]), px[i * 3 + c] as f64 / 255.0);
        }
    }
}

#[test]
fn ppm_and_pgm_roundtrips_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
    let p = dir.path().join("a.ppm");
    write_ppm(&p, &t).unwrap();
    assert!(read_ppm(&p).unwrap().bit_eq(&t));
    let first = fs::read(&p).unwrap();
    write_ppm(&p, &read_ppm(&p).unwrap()).unwrap();
    assert_eq!(fs::read(&p).unwrap(), first);

    let g: Vec<u8> = (0..12).map(|i| (i * 21) as u8).collect();
    let q = dir.path().join("a.pgm");
    write_pgm(&q, &g, 4, 3).unwrap();
    assert_eq!(read_pgm(&q).unwrap(), (4, 3, g));
    assert!(fs::read(&q).unwrap().starts_with(b"P5"));
}

#[test]
fn bilinear_resize_uses_half_pixel_centers() {
    let t = Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
    let r = resize_bilinear(&t, 1, 4).unwrap();
    assert_eq!(r.data(), &[1.0, 1.5, 2.5, 3.0]);
    let c = Tensor::full(&[3, 5, 5], 0.4);
    assert!(resize_bilinear(&c, 84, 84).unwrap().data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng(2));
    assert!(resize_bilinear(&x, 4, 4).unwrap().bit_eq(&x));
}

// ----------------------------------------------------------- loading

fn write_class(root: &Path, split: &str, class: &str, n: usize, size: usize) {
    let dir = root.join(split).join(class);
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        let t = Tensor::full(&[3, size, size], (i as f64 + 1.0) / 10.0);
        hxt::write_raw_tensor(dir.join(format!("{i}.hxt")), &t).unwrap();
    }
}

#[test]
fn toy_tree_loads_with_expected_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "base", "a", 3, 4);
    write_class(dir.path(), "val", "b", 2, 4);
    write_class(dir.path(), "novel", "c", 2, 4);
    let ppm = dir.path().join("novel/c/extra.ppm");
    write_ppm(&ppm, &Tensor::full(&[3, 2, 2], 0.2)).unwrap();
    fs::write(dir.path().join("novel/c/notes.txt"), "ignored").unwrap();
    let ds = load_dataset(dir.path(), 4).unwrap();
    let sizes: Vec<usize> = SplitKind::ALL.iter().map(|&k| ds.split(k).num_classes()).collect();
    assert_eq!(sizes, [1, 1, 1]);
    assert_eq!(ds.novel.classes[0].samples.len(), 3);
    // extra.ppm sorts after the .hxt files and was resized from 2×2
    let s = &ds.novel.classes[0].samples[2];
    assert_eq!(s.len(), 48);
    assert!(s.iter().all(|&v| (v as f64 - 51.0 / 255.0).abs() < 1e-6));
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "base", "a", 2, 4);
    write_class(dir.path(), "val", "b", 2, 4);
    fs::create_dir_all(dir.path().join("novel")).unwrap();
    assert_eq!(load_dataset(dir.path(), 4).unwrap_err().category(), "data");
}

#[test]
fn overlapping_class_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "base", "a", 2, 4);
    write_class(dir.path(), "val", "b", 2, 4);
    write_class(dir.path(), "novel", "a", 2, 4);
    assert_eq!(load_dataset(dir.path(), 4).unwrap_err().category(), "consistency");
}

#[test]
fn malformed_files_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "base", "a", 2, 4);
    write_class(dir.path(), "val", "b", 2, 4);
    write_class(dir.path(), "novel", "c", 2, 4);
    fs::write(dir.path().join("novel/c/bad.hxt"), b"HXT1junk").unwrap();
    let err = load_dataset(dir.path(), 4).unwrap_err();
    assert_eq!(err.category(), "data");
    assert!(err.to_string().contains("bad.hxt"), "{err}");

    fs::remove_file(dir.path().join("novel/c/bad.hxt")).unwrap();
    write_class(dir.path(), "novel", "d", 1, 5);
    assert_eq!(load_dataset(dir.path(), 4).unwrap_err().category(), "data");
}

// ----------------------------------------------------------- episodes

fn toy_split(classes: usize, per: usize) -> Split {
    let cls = (0..classes)
        .map(|c| ClassData {
            name: format!("c{c}"),
            samples: (0..per).map(|i| vec![(c * 100 + i) as f32; 12].into()).collect(),
        })
        .collect();
    Split::from_classes(SplitKind::Novel, 2, cls).unwrap()
}

#[test]
fn episodes_are_disjoint_and_locally_labelled() {
    let split = toy_split(10, 20);
    let mut r = rng(3);
    for _ in 0..200 {
        let ep = sample_episode(&split, 5, 1, 15, &mut r).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let s: BTreeSet<_> = ep.support.iter().collect();
        let q: BTreeSet<_> = ep.query.iter().collect();
        assert_eq!(s.len(), 5);
        assert_eq!(q.len(), 75);
        assert!(s.is_disjoint(&q));
        let cls: BTreeSet<_> = ep.classes.iter().collect();
        assert_eq!(cls.len(), 5);
        for (i, r) in ep.query.iter().enumerate() {
            assert_eq!(ep.classes[ep.query_labels[i]], r.class);
        }
        for (i, r) in ep.support.iter().enumerate() {
            assert_eq!(ep.classes[i], r.class);
        }
    }
}

#[test]
fn episodes_are_deterministic_under_seed() {
    let split = toy_split(10, 20);
    let a = sample_episode(&split, 5, 2, 3, &mut rng(4)).unwrap();
    let b = sample_episode(&split, 5, 2, 3, &mut rng(4)).unwrap();
    assert_eq!(a, b);
    let c = sample_episode(&split, 5, 2, 3, &mut rng(5)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn episodes_check_capacity() {
    let split = toy_split(4, 20);
    assert_eq!(sample_episode(&split, 5, 1, 1, &mut rng(6)).unwrap_err().category(), "data");
    let split = toy_split(6, 5);
    assert_eq!(sample_episode(&split, 5, 1, 5, &mut rng(7)).unwrap_err().category(), "data");
}

#[test]
fn batches_apply_normalization() {
    let split = toy_split(3, 4);
    let norm = NormStats::from_split(&split);
    let b = split.batch(&split.all_refs(), &norm).unwrap();
    assert_eq!(b.shape(), &[12, 3, 2, 2]);
    assert!(b.data().iter().sum::<f64>().abs() < 1e-9);
    let var = b.data().iter().map(|v| v * v).sum::<f64>() / b.numel() as f64;
    assert!((var - 1.0).abs() < 1e-9);
}

// ----------------------------------------------------------- synthetic data

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        genera: 6,
        species_per_genus: 3,
        samples_per_species: 4,
        image_size: 32,
        part_size: 8,
        max_translation: 4.0,
        val_genera: 1,
        novel_genera: 2,
        seed,
        ..SyntheticSpec::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generator_is_deterministic_and_loadable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(9), a.path()).unwrap();
    generate_synthetic(&small_spec(9), b.path()).unwrap();
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 6 * 3 * 4);
    assert_eq!(ta, tree_bytes(b.path()));

    let ds = load_dataset(a.path(), 32).unwrap();
    assert_eq!(ds.base.num_classes(), 9);
    assert_eq!(ds.val.num_classes(), 3);
    assert_eq!(ds.novel.num_classes(), 6);
    for s in &ds.base.classes[0].samples {
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn species_differ_only_inside_the_part() {
    let spec = SyntheticSpec::default();
    let mut r = rng(10);
    for genus in 0..5 {
        let j = Jitter::draw(&spec, &mut r);
        let mask = synth::part_mask(&spec, genus, &j);
        assert!(mask.iter().any(|&m| m));
        let imgs: Vec<Tensor> = (0..spec.species_per_genus).map(|s| synth::render(&spec, genus, s, &j)).collect();
        let plane = 84 * 84;
        for a in 0..imgs.len() {
            for b in a + 1..imgs.len() {
                let mut inside_diff = false;
                for i in 0..plane {
                    for c in 0..3 {
                        let (x, y) = (imgs[a].data()[c * plane + i], imgs[b].data()[c * plane + i]);
                        if mask[i] {
                            inside_diff |= x != y;
                        } else {
                            assert_eq!(x.to_bits(), y.to_bits());
                        }
                    }
                }
                assert!(inside_diff);
            }
        }
    }
}

#[test]
fn species_are_closer_than_genera() {
    let spec = SyntheticSpec::default();
    let mut r = rng(11);
    let dist = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (mut intra, mut inter) = (0.0, 0.0);
    for _ in 0..100 {
        let g = r.random_range(0..spec.genera);
        let (s1, s2) = (r.random_range(0..4), r.random_range(0..4));
        let (j1, j2) = (Jitter::draw(&spec, &mut r), Jitter::draw(&spec, &mut r));
        intra += dist(&synth::render(&spec, g, s1, &j1), &synth::render(&spec, g, s2, &j2));
        let g2 = (g + 1 + r.random_range(0..spec.genera - 1)) % spec.genera;
        let (j3, j4) = (Jitter::draw(&spec, &mut r), Jitter::draw(&spec, &mut r));
        inter += dist(&synth::render(&spec, g, s1, &j3), &synth::render(&spec, g2, s2, &j4));
    }
    assert!(intra / 100.0 < inter / 100.0, "intra {intra} inter {inter}");
}

#[test]
fn genus_split_is_a_partition() {
    let spec = SyntheticSpec::default();
    let (b, v, n) = spec.genus_split();
    assert_eq!((b.len(), v.len(), n.len()), (12, 4, 4));
    let all: BTreeSet<usize> = b.iter().chain(&v).chain(&n).copied().collect();
    assert_eq!(all.len(), 20);
    assert!(SyntheticSpec { val_genera: 0, ..spec }.validate().is_err());
}

#[test]
fn identity_jitter_renders_clean_images() {
    let spec = SyntheticSpec {
        noise_std: 0.0,
        ..SyntheticSpec::default()
    };
    let a = synth::render(&spec, 0, 0, &Jitter::identity());
    let b = synth::render(&spec, 0, 0, &Jitter::identity());
    assert!(a.bit_eq(&b));
    assert_eq!(a.shape(), &[3, 84, 84]);
}
