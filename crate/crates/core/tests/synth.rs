use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmm_core::data::{read_manifest, Dataset, Split};
use xmm_core::image::Image;
use xmm_core::synth::{
    assign_identities, attribute_space, caption, generate_dataset, grammar_vocabulary, render, Attributes, Bag,
    SynthConfig, BAGS, MANIFEST_FILE, PANTS_COLORS, SHIRT_COLORS,
};
use xmm_core::text::{split_words, tokenize_and_pad, Vocabulary, UNK};

fn small() -> SynthConfig {
    SynthConfig {
        train_ids: 10,
        test_ids: 4,
        images_per_id: 2,
        captions_per_image: 2,
        ..SynthConfig::default()
    }
}

/// Every file under `dir`, as sorted (relative path, bytes) pairs.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Reads the attributes back out of a caption, knowing only the word lists.
fn parse_caption(text: &str) -> Attributes {
    let words = split_words(text);
    let find = |names: &[&str]| -> usize {
        let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| words.contains(&n.to_string())).map(|(i, _)| i).collect();
        assert_eq!(hits.len(), 1, "caption `{text}` names {hits:?}");
        hits[0]
    };
    let shirt = find(&SHIRT_COLORS.map(|c| c.0));
    let pants = find(&PANTS_COLORS.map(|c| c.0));
    let has = |w: &str| words.iter().any(|x| x == w);
    let bag = match (has("backpack"), has("handbag"), has("suitcase")) {
        (true, false, false) => Bag::Backpack,
        (false, true, false) => Bag::Handbag,
        (false, false, true) => Bag::Suitcase,
        (false, false, false) => Bag::None,
        _ => panic!("caption `{text}` names two bags"),
    };
    Attributes { shirt, pants, bag }
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(), a.path()).unwrap();
    generate_dataset(&small(), b.path()).unwrap();
    let other = SynthConfig { seed: 1, ..small() };
    generate_dataset(&other, c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn counts_and_split_membership() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let ds = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(ds.identities.len(), 14);
    assert_eq!(ds.records.len(), 14 * 2 * 2);
    let images: BTreeSet<_> = ds.records.iter().map(|r| r.image.clone()).collect();
    assert_eq!(images.len(), 28);
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 28);
    assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), ds.records);
    for r in &ds.records {
        assert_eq!(r.split, ds.identities[r.identity as usize].split);
    }

    let loaded = Dataset::load(dir.path(), (96, 32)).unwrap();
    assert_eq!(loaded.train.num_identities(), 10);
    assert_eq!(loaded.test.num_identities(), 4);
    assert_eq!((loaded.train.images.len(), loaded.train.captions.len()), (20, 40));
    assert_eq!((loaded.test.images.len(), loaded.test.captions.len()), (8, 16));
    assert!(loaded.val.is_none());
    assert_eq!(loaded.validation(), &loaded.test);
    assert_eq!(loaded.stats, ds.stats);
    assert_eq!(loaded.vocab, Vocabulary::new(grammar_vocabulary()).unwrap());
    for c in loaded.train.captions.iter().chain(&loaded.test.captions) {
        let seq = tokenize_and_pad(&c.text, &loaded.vocab, 40).unwrap();
        assert!(!seq.ids().contains(&UNK), "caption `{}` has an unknown word", c.text);
        assert!(seq.true_length() < 40, "caption `{}` does not fit", c.text);
    }
}

#[test]
fn captions_parse_back_to_their_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(), dir.path()).unwrap();
    for r in &ds.records {
        assert_eq!(parse_caption(&r.caption), ds.identities[r.identity as usize].attributes);
    }
}

#[test]
fn default_splits_are_disjoint_separated_and_covering() {
    for seed in 0..10 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let ids = assign_identities(&cfg).unwrap();
        let train: Vec<Attributes> = ids.iter().filter(|s| s.split == Split::Train).map(|s| s.attributes).collect();
        let test: Vec<Attributes> = ids.iter().filter(|s| s.split == Split::Test).map(|s| s.attributes).collect();
        assert_eq!((train.len(), test.len()), (32, 16));
        let all: BTreeSet<_> = ids.iter().map(|s| s.attributes).collect();
        assert_eq!(all.len(), 48, "combinations repeat");
        for (i, a) in test.iter().enumerate() {
            for b in &test[i + 1..] {
                assert!(a.distance(b) >= 2);
            }
        }
        assert_eq!(train.iter().map(|a| a.shirt).collect::<BTreeSet<_>>().len(), SHIRT_COLORS.len());
        assert_eq!(train.iter().map(|a| a.pants).collect::<BTreeSet<_>>().len(), PANTS_COLORS.len());
        assert_eq!(train.iter().map(|a| a.bag).collect::<BTreeSet<_>>().len(), BAGS.len());
        let ids_order: Vec<u32> = ids.iter().map(|s| s.id).collect();
        assert_eq!(ids_order, (0..48).collect::<Vec<u32>>());
    }
}

#[test]
fn config_limits() {
    assert_eq!(attribute_space().len(), 120);
    for bad in [
        SynthConfig { train_ids: 0, ..small() },
        SynthConfig { test_ids: 21, ..small() },
        SynthConfig { train_ids: 110, test_ids: 11, test_separation: 1, ..small() },
        SynthConfig { test_separation: 3, ..small() },
        SynthConfig { images_per_id: 0, ..small() },
        SynthConfig { height: 10, ..small() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    SynthConfig { test_ids: 20, ..small() }.validate().unwrap();
    SynthConfig { train_ids: 100, test_ids: 20, ..small() }.validate().unwrap();
}

fn region_mean(img: &Image, rows: (f32, f32), cols: (f32, f32)) -> [f32; 3] {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let (r0, r1) = ((rows.0 * h) as usize, (rows.1 * h) as usize);
    let (c0, c1) = ((cols.0 * w) as usize, (cols.1 * w) as usize);
    let mut sum = [0.0f32; 3];
    for y in r0..r1 {
        for x in c0..c1 {
            let p = img.pixel(y, x);
            (0..3).for_each(|c| sum[c] += p[c]);
        }
    }
    let n = ((r1 - r0) * (c1 - c0)) as f32;
    sum.map(|s| s / n)
}

fn features(img: &Image) -> Vec<f32> {
    [
        ((0.27, 0.52), (0.42, 0.58)),
        ((0.6, 0.86), (0.29, 0.44)),
        ((0.22, 0.43), (0.29, 0.37)),
        ((0.52, 0.66), (0.15, 0.31)),
        ((0.69, 0.85), (0.66, 0.85)),
    ]
    .iter()
    .flat_map(|&(r, c)| region_mean(img, r, c))
    .collect()
}

/// A multiclass perceptron on region means reaches zero training errors
/// for every attribute over every unjittered render. The perceptron only
/// converges on linearly separable data, so each attribute is linearly
/// separable in pixel space.
#[test]
fn attributes_are_linearly_separable_in_region_means() {
    let cfg = SynthConfig { jitter: 0, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<(Attributes, Vec<f32>)> = attribute_space()
        .into_iter()
        .flat_map(|a| (0..2).map(move |_| a))
        .map(|a| {
            let mut f = features(&render(&a, &cfg, &mut rng));
            f.push(1.0);
            (a, f)
        })
        .collect();
    let check = |label: &dyn Fn(&Attributes) -> usize, classes: usize| {
        let dim = samples[0].1.len();
        let mut w = vec![vec![0.0f32; dim]; classes];
        let score = |w: &[f32], f: &[f32]| w.iter().zip(f).map(|(a, b)| a * b).sum::<f32>();
        for _ in 0..5000 {
            let mut errors = 0;
            for (a, f) in &samples {
                let best = (0..classes).max_by(|&i, &j| score(&w[i], f).total_cmp(&score(&w[j], f)).then(j.cmp(&i))).unwrap();
                let truth = label(a);
                if best != truth {
                    errors += 1;
                    w[truth].iter_mut().zip(f).for_each(|(x, y)| *x += y);
                    w[best].iter_mut().zip(f).for_each(|(x, y)| *x -= y);
                }
            }
            if errors == 0 {
                return;
            }
        }
        panic!("perceptron did not separate {classes} classes");
    };
    check(&|a| a.shirt, SHIRT_COLORS.len());
    check(&|a| a.pants, PANTS_COLORS.len());
    check(&|a| BAGS.iter().position(|b| *b == a.bag).unwrap(), BAGS.len());
}

proptest! {
    /// Any caption of any identity names exactly that identity's attributes.
    #[test]
    fn any_caption_parses_back(index in 0usize..120, seed in any::<u64>()) {
        let a = attribute_space()[index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = caption(&a, &mut rng);
        prop_assert_eq!(parse_caption(&text), a);
        let vocab: BTreeSet<String> = grammar_vocabulary().into_iter().collect();
        prop_assert!(split_words(&text).iter().all(|w| vocab.contains(w)));
    }

    /// Renders stay in range and keep the configured size.
    #[test]
    fn renders_are_valid_images(index in 0usize..120, seed in any::<u64>()) {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = render(&attribute_space()[index], &cfg, &mut rng);
        prop_assert_eq!((img.height(), img.width()), (96, 32));
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
