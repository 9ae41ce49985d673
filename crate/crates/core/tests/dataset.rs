use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use tvpr_core::dataset::synthetic::{generate_corpus, parse_caption, write_corpus, GeneratorConfig};
use tvpr_core::dataset::{load_manifest, load_samples, split_manifest, split_with, ManifestEntry, SplitConfig};

fn entries(n: usize, sub: &str) -> Vec<ManifestEntry> {
    (0..n)
        .map(|i| ManifestEntry {
            clip_id: format!("{sub}_{i:05}"),
            frames_path: format!("frames/{sub}_{i:05}"),
            captions: vec!["a".into(), "b".into()],
            identity_id: format!("{sub}_person{}", i / 2),
            sub_dataset: sub.into(),
            fps: None,
        })
        .collect()
}

#[test]
fn ratio_split_sizes() {
    let s = split_manifest(&entries(20, "x"), (0.6, 0.05, 0.35), 0).unwrap();
    assert_eq!(s.sizes(), (12, 1, 7));
}

#[test]
fn fixed_counts_override_ratios() {
    let mut all = entries(1134, "prid");
    all.extend(entries(40, "other"));
    let cfg = SplitConfig {
        fixed_counts: BTreeMap::from([("prid".to_string(), (680, 57, 397))]),
        ..SplitConfig::default()
    };
    let s = split_with(&all, &cfg).unwrap();
    let count = |ids: &[String]| ids.iter().filter(|i| i.starts_with("prid")).count();
    assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (680, 57, 397));
    assert_eq!(s.sizes(), (680 + 24, 57 + 2, 397 + 14));

    let bad = SplitConfig {
        fixed_counts: BTreeMap::from([("prid".to_string(), (680, 57, 396))]),
        ..SplitConfig::default()
    };
    assert!(split_with(&all, &bad).is_err());
}

proptest! {
    #[test]
    fn splits_partition_and_track_ratios(n in 1usize..400, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..1000) {
        let (tr, va) = (a, (1.0 - a) * b);
        let ratios = (tr, va, 1.0 - tr - va);
        let list = entries(n, "s");
        let s = split_manifest(&list, ratios, seed).unwrap();
        let (x, y, z) = s.sizes();
        prop_assert_eq!(x + y + z, n);
        let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert!((x as f64 / n as f64 - ratios.0).abs() <= 1.0 / n as f64 + 1e-9);
        prop_assert!((y as f64 / n as f64 - ratios.1).abs() <= 1.0 / n as f64 + 1e-9);
        prop_assert_eq!(s.clone(), split_manifest(&list, ratios, seed).unwrap());
    }

    #[test]
    fn identity_disjoint_splits_never_share_people(n in 4usize..120, seed in 0u64..1000) {
        let list = entries(n, "s");
        let cfg = SplitConfig { identity_disjoint: true, seed, ..SplitConfig::default() };
        let s = split_with(&list, &cfg).unwrap();
        let person = |ids: &[String]| -> HashSet<String> {
            ids.iter().map(|i| list.iter().find(|e| &e.clip_id == i).unwrap().identity_id.clone()).collect()
        };
        let (a, b, c) = (person(&s.train), person(&s.val), person(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }
}

#[test]
fn generator_is_deterministic_and_captions_describe_the_identity() {
    let cfg = GeneratorConfig {
        num_videos: 12,
        seed: 9,
        ..GeneratorConfig::default()
    };
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.entry, y.entry);
        assert_eq!(x.frames.to_array(), y.frames.to_array());
        for c in &x.entry.captions {
            assert_eq!(parse_caption(c).as_ref(), Some(&x.identity));
        }
    }
    let other = generate_corpus(&GeneratorConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(a[0].frames.to_array(), other[0].frames.to_array());
    assert!(generate_corpus(&GeneratorConfig { num_videos: 400, ..cfg }).is_err());
}

#[test]
fn written_corpus_loads_back() {
    for png in [true, false] {
        let cfg = GeneratorConfig {
            num_videos: 3,
            png,
            ..GeneratorConfig::default()
        };
        let videos = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &videos, png).unwrap();
        let entries = load_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let samples = load_samples(&refs, dir.path(), cfg.frames).unwrap();
        for (s, v) in samples.iter().zip(&videos) {
            assert_eq!(s.clip.frames, v.clip().unwrap().frames);
            assert_eq!(s.captions.to_vec(), v.entry.captions);
        }
        let short = load_samples(&refs, dir.path(), 4).unwrap();
        assert_eq!(short[0].clip.num_frames(), 4);
        assert!(load_samples(&refs, dir.path(), cfg.frames + 1).is_err());
    }
}
