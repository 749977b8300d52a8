//! Procedural pedestrian-like images with matching captions.
//!
//! Every identity is a unique (shirt, pants, bag) combination. Images paint
//! those attributes as coloured regions; captions name them through a small
//! template grammar, so both modalities carry the same signal.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{write_manifest, Record, Split};
use crate::error::{Error, Result};
use crate::image::{ChannelStats, Image};
use crate::rng::substream;
use crate::text::Vocabulary;

pub const SHIRT_COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.12, 0.12]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.92, 0.85, 0.15]),
    ("purple", [0.55, 0.2, 0.7]),
    ("orange", [0.95, 0.55, 0.1]),
];

pub const PANTS_COLORS: [(&str, [f32; 3]); 5] = [
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.5, 0.5, 0.5]),
    ("brown", [0.45, 0.28, 0.12]),
    ("teal", [0.1, 0.5, 0.5]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bag {
    None,
    Backpack,
    Handbag,
    Suitcase,
}

pub const BAGS: [Bag; 4] = [Bag::None, Bag::Backpack, Bag::Handbag, Bag::Suitcase];

const BACKPACK_RGB: [f32; 3] = [0.3, 0.95, 1.0];
const HANDBAG_RGB: [f32; 3] = [1.0, 0.55, 0.85];
const SUITCASE_RGB: [f32; 3] = [0.65, 1.0, 0.35];
const SKIN_RGB: [f32; 3] = [0.9, 0.72, 0.58];
const BACKGROUND_RGB: [f32; 3] = [0.72, 0.76, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attributes {
    /// Index into [`SHIRT_COLORS`].
    pub shirt: usize,
    /// Index into [`PANTS_COLORS`].
    pub pants: usize,
    pub bag: Bag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentitySpec {
    pub id: u32,
    pub attributes: Attributes,
    pub split: Split,
}

pub fn attribute_space() -> Vec<Attributes> {
    let mut all = Vec::new();
    for shirt in 0..SHIRT_COLORS.len() {
        for pants in 0..PANTS_COLORS.len() {
            for bag in BAGS {
                all.push(Attributes { shirt, pants, bag });
            }
        }
    }
    all
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_ids: usize,
    pub test_ids: usize,
    pub images_per_id: usize,
    pub captions_per_image: usize,
    pub height: usize,
    pub width: usize,
    /// Uniform per-channel noise amplitude.
    pub noise: f32,
    /// Maximum shift of the figure in pixels, each axis.
    pub jitter: usize,
    /// Minimum number of attributes in which any two test identities
    /// differ. 1 only asks for distinct combinations.
    pub test_separation: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_ids: 32,
            test_ids: 16,
            images_per_id: 4,
            captions_per_image: 2,
            height: 96,
            width: 32,
            noise: 0.05,
            jitter: 2,
            test_separation: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let total = self.train_ids + self.test_ids;
        if total < 2 || self.train_ids == 0 || self.test_ids == 0 {
            return Err(Error::Config("need at least one train and one test identity".into()));
        }
        let space = attribute_space().len();
        if total > space {
            return Err(Error::Config(format!(
                "{total} identities exceed the {space} distinct attribute combinations"
            )));
        }
        if !(1..=2).contains(&self.test_separation) {
            return Err(Error::Config(format!(
                "test separation {} outside 1..=2 attributes",
                self.test_separation
            )));
        }
        if self.test_separation == 2 && self.test_ids > MAX_SEPARATED_TEST_IDS {
            return Err(Error::Config(format!(
                "at most {MAX_SEPARATED_TEST_IDS} test identities can differ pairwise in two attributes"
            )));
        }
        if self.images_per_id == 0 || self.captions_per_image == 0 {
            return Err(Error::Config("need at least one image and caption per identity".into()));
        }
        if self.height < 20 || self.width < 16 {
            return Err(Error::Config(format!(
                "image size {}×{} too small to draw a figure",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl Attributes {
    /// Number of attributes in which `self` and `other` differ.
    pub fn distance(&self, other: &Attributes) -> usize {
        usize::from(self.shirt != other.shirt) + usize::from(self.pants != other.pants) + usize::from(self.bag != other.bag)
    }
}

/// Combinations that pairwise share at most one attribute value, from the
/// Latin rectangle `shirt = (pants + bag) mod 6` under random relabelings
/// of each attribute, in random order.
fn separated_code<R: Rng>(rng: &mut R) -> Vec<Attributes> {
    let mut shirts: Vec<usize> = (0..SHIRT_COLORS.len()).collect();
    let mut pants: Vec<usize> = (0..PANTS_COLORS.len()).collect();
    let mut bags = BAGS;
    shirts.shuffle(rng);
    pants.shuffle(rng);
    bags.shuffle(rng);
    let mut code = Vec::new();
    for p in 0..PANTS_COLORS.len() {
        for (b, &bag) in bags.iter().enumerate() {
            code.push(Attributes {
                shirt: shirts[(p + b) % SHIRT_COLORS.len()],
                pants: pants[p],
                bag,
            });
        }
    }
    code.shuffle(rng);
    code
}

/// Most test identities that can pairwise differ in two attributes.
pub const MAX_SEPARATED_TEST_IDS: usize = PANTS_COLORS.len() * BAGS.len();

/// One combination per (shirt, pants) pair with `bag = (shirt + pants) mod 4`
/// under random relabelings, so every pair of values from any two
/// attributes occurs together at least once.
fn pair_cover<R: Rng>(rng: &mut R) -> Vec<Attributes> {
    let mut shirts: Vec<usize> = (0..SHIRT_COLORS.len()).collect();
    let mut pants: Vec<usize> = (0..PANTS_COLORS.len()).collect();
    let mut bags = BAGS;
    shirts.shuffle(rng);
    pants.shuffle(rng);
    bags.shuffle(rng);
    let mut cover = Vec::new();
    for (s, &shirt) in shirts.iter().enumerate() {
        for (p, &pants) in pants.iter().enumerate() {
            cover.push(Attributes {
                shirt,
                pants,
                bag: bags[(s + p) % BAGS.len()],
            });
        }
    }
    cover
}

/// Size of the pair-covering core of the training identities.
pub const PAIR_COVER_IDS: usize = SHIRT_COLORS.len() * PANTS_COLORS.len();

/// Assigns attribute combinations to identities. Test identities pairwise
/// differ in at least `test_separation` attributes. With at least
/// [`PAIR_COVER_IDS`] train identities, they contain every pair of values
/// from any two attributes, so each test identity only combines pairs seen
/// in training. Smaller train sets still cover every single value.
pub fn assign_identities(cfg: &SynthConfig) -> Result<Vec<IdentitySpec>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "synth", &[]);
    let mut space = attribute_space();
    for _ in 0..10_000 {
        space.shuffle(&mut rng);
        let test: Vec<Attributes> = if cfg.test_separation == 2 {
            separated_code(&mut rng)[..cfg.test_ids].to_vec()
        } else {
            space[..cfg.test_ids].to_vec()
        };
        let core = if cfg.train_ids >= PAIR_COVER_IDS {
            let cover = pair_cover(&mut rng);
            if cover.iter().any(|a| test.contains(a)) {
                continue;
            }
            cover
        } else {
            Vec::new()
        };
        let rest = space.iter().filter(|a| !test.contains(a) && !core.contains(a)).copied();
        let train: Vec<Attributes> = core.iter().copied().chain(rest).take(cfg.train_ids).collect();
        if train.len() < cfg.train_ids {
            continue;
        }
        let shirts: BTreeSet<_> = train.iter().map(|a| a.shirt).collect();
        let pants: BTreeSet<_> = train.iter().map(|a| a.pants).collect();
        let bags: BTreeSet<_> = train.iter().map(|a| a.bag).collect();
        let covered = shirts.len() == SHIRT_COLORS.len()
            && pants.len() == PANTS_COLORS.len()
            && bags.len() == BAGS.len();
        if covered || cfg.train_ids < SHIRT_COLORS.len() {
            return Ok(train
                .into_iter()
                .map(|a| (a, Split::Train))
                .chain(test.into_iter().map(|a| (a, Split::Test)))
                .enumerate()
                .map(|(i, (attributes, split))| IdentitySpec {
                    id: i as u32,
                    attributes,
                    split,
                })
                .collect());
        }
    }
    Err(Error::Config(format!(
        "could not place {} test identities {} attributes apart beside {} covering train identities",
        cfg.test_ids, cfg.test_separation, cfg.train_ids
    )))
}

/// Paints one image of an identity.
pub fn render<R: Rng>(attrs: &Attributes, cfg: &SynthConfig, rng: &mut R) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let j = cfg.jitter as isize;
    let dy = rng.gen_range(-j..=j);
    let dx = rng.gen_range(-j..=j);
    let mut img = Image::filled(h, w, BACKGROUND_RGB);
    let row = |f: f32| ((f * h as f32).round() as isize + dy).clamp(0, h as isize) as usize;
    let col = |f: f32| ((f * w as f32).round() as isize + dx).clamp(0, w as isize) as usize;
    let mut fill = |r0: usize, r1: usize, c0: usize, c1: usize, rgb: [f32; 3]| {
        for y in r0..r1 {
            for x in c0..c1 {
                img.set_pixel(y, x, rgb);
            }
        }
    };
    fill(row(0.03), row(0.2), col(0.34), col(0.66), SKIN_RGB);
    fill(row(0.2), row(0.55), col(0.2), col(0.8), SHIRT_COLORS[attrs.shirt].1);
    let pants = PANTS_COLORS[attrs.pants].1;
    fill(row(0.55), row(0.9), col(0.25), col(0.47), pants);
    fill(row(0.55), row(0.9), col(0.53), col(0.75), pants);
    match attrs.bag {
        Bag::None => {}
        Bag::Backpack => {
            fill(row(0.2), row(0.45), col(0.28), col(0.38), BACKPACK_RGB);
            fill(row(0.2), row(0.45), col(0.62), col(0.72), BACKPACK_RGB);
        }
        Bag::Handbag => fill(row(0.5), row(0.68), col(0.12), col(0.34), HANDBAG_RGB),
        Bag::Suitcase => fill(row(0.66), row(0.88), col(0.62), col(0.88), SUITCASE_RGB),
    }
    let data = img
        .data()
        .iter()
        .map(|&v| (v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, data).expect("same extent")
}

const PERSON: [&str; 4] = ["person", "man", "woman", "pedestrian"];
const TOP: [&str; 3] = ["shirt", "top", "jacket"];
const BOTTOM: [&str; 3] = ["pants", "trousers", "jeans"];

fn bag_phrase<R: Rng>(bag: Bag, rng: &mut R) -> &'static str {
    let options: &[&str] = match bag {
        Bag::None => &["and no bag", "without a bag", "carrying nothing"],
        Bag::Backpack => &["carrying a backpack", "with a backpack on the back"],
        Bag::Handbag => &["holding a handbag", "carrying a handbag in one hand"],
        Bag::Suitcase => &["pulling a suitcase", "with a suitcase"],
    };
    options[rng.gen_range(0..options.len())]
}

/// One caption naming exactly the identity's attribute words.
pub fn caption<R: Rng>(attrs: &Attributes, rng: &mut R) -> String {
    let shirt = SHIRT_COLORS[attrs.shirt].0;
    let pants = PANTS_COLORS[attrs.pants].0;
    let person = PERSON[rng.gen_range(0..PERSON.len())];
    let top = TOP[rng.gen_range(0..TOP.len())];
    let bottom = BOTTOM[rng.gen_range(0..BOTTOM.len())];
    let bag = bag_phrase(attrs.bag, rng);
    match rng.gen_range(0..3) {
        0 => format!("a {person} wearing a {shirt} {top} and {pants} {bottom} {bag}."),
        1 => format!("the {person} has a {shirt} {top}, {pants} {bottom} {bag}."),
        _ => format!("a {person} in {pants} {bottom} and a {shirt} {top}, {bag}."),
    }
}

/// Every word the grammar can emit, sorted.
pub fn grammar_vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let fixed = [
        "a", "the", "wearing", "and", "has", "in", ",", ".", "no", "bag", "without", "carrying",
        "nothing", "backpack", "with", "on", "back", "holding", "handbag", "one", "hand", "pulling",
        "suitcase",
    ];
    words.extend(fixed.iter().map(|s| s.to_string()));
    for list in [&PERSON[..], &TOP[..], &BOTTOM[..]] {
        words.extend(list.iter().map(|s| s.to_string()));
    }
    words.extend(SHIRT_COLORS.iter().map(|(n, _)| n.to_string()));
    words.extend(PANTS_COLORS.iter().map(|(n, _)| n.to_string()));
    words.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub identities: Vec<IdentitySpec>,
    pub records: Vec<Record>,
    pub stats: ChannelStats,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Generates images, manifest, vocabulary and train-split channel statistics
/// under `out_dir`. Output bytes depend only on `cfg`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SyntheticDataset> {
    let identities = assign_identities(cfg)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let rendered: Vec<Vec<(String, Image, Vec<String>)>> = identities
        .par_iter()
        .map(|spec| {
            let mut rng = substream(cfg.seed, "synth", &[1, spec.id as u64]);
            (0..cfg.images_per_id)
                .map(|k| {
                    let img = render(&spec.attributes, cfg, &mut rng);
                    let caps = (0..cfg.captions_per_image).map(|_| caption(&spec.attributes, &mut rng)).collect();
                    (format!("images/{:04}_{k}.ppm", spec.id), img, caps)
                })
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut train_images = Vec::new();
    for (spec, images) in identities.iter().zip(&rendered) {
        for (rel, img, caps) in images {
            let path = out_dir.join(rel);
            img.write_ppm(&path)?;
            if spec.split == Split::Train {
                // Statistics describe the pixels the network will see.
                train_images.push(Image::read_ppm(&path)?);
            }
            for c in caps {
                records.push(Record {
                    identity: spec.id,
                    image: rel.clone(),
                    caption: c.clone(),
                    split: spec.split,
                });
            }
        }
    }
    let stats = ChannelStats::compute(&train_images)?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(STATS_FILE, stats.to_text())?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Vocabulary::new(grammar_vocabulary())?.save(&out_dir.join(VOCAB_FILE))?;
    Ok(SyntheticDataset {
        root: out_dir.to_path_buf(),
        identities,
        records,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::split_words;

    #[test]
    fn attribute_space_is_large_enough_for_defaults() {
        assert_eq!(attribute_space().len(), 120);
        let ids = assign_identities(&SynthConfig::default()).unwrap();
        assert_eq!(ids.len(), 48);
        let combos: BTreeSet<_> = ids.iter().map(|s| s.attributes).collect();
        assert_eq!(combos.len(), 48);
    }

    #[test]
    fn too_many_identities_is_config_error() {
        let cfg = SynthConfig {
            train_ids: 110,
            test_ids: 11,
            ..Default::default()
        };
        assert!(matches!(assign_identities(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn test_identities_are_separated() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                test_ids: MAX_SEPARATED_TEST_IDS,
                seed,
                ..Default::default()
            };
            let test: Vec<_> = assign_identities(&cfg)
                .unwrap()
                .into_iter()
                .filter(|s| s.split == Split::Test)
                .map(|s| s.attributes)
                .collect();
            assert_eq!(test.len(), MAX_SEPARATED_TEST_IDS);
            for (i, a) in test.iter().enumerate() {
                for b in &test[..i] {
                    assert!(a.distance(b) >= 2, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn train_identities_cover_every_attribute_pair() {
        for seed in 0..10 {
            let cfg = SynthConfig { seed, ..Default::default() };
            let train: Vec<_> = assign_identities(&cfg)
                .unwrap()
                .into_iter()
                .filter(|s| s.split == Split::Train)
                .map(|s| s.attributes)
                .collect();
            let sp: BTreeSet<_> = train.iter().map(|a| (a.shirt, a.pants)).collect();
            let sb: BTreeSet<_> = train.iter().map(|a| (a.shirt, a.bag)).collect();
            let pb: BTreeSet<_> = train.iter().map(|a| (a.pants, a.bag)).collect();
            assert_eq!(sp.len(), SHIRT_COLORS.len() * PANTS_COLORS.len());
            assert_eq!(sb.len(), SHIRT_COLORS.len() * BAGS.len());
            assert_eq!(pb.len(), PANTS_COLORS.len() * BAGS.len());
        }
    }

    #[test]
    fn grammar_fits_small_vocabulary() {
        let vocab = grammar_vocabulary();
        assert!(vocab.len() + 4 <= 64, "{} tokens", vocab.len());
        let known: BTreeSet<_> = vocab.into_iter().collect();
        let mut rng = substream(1, "t", &[]);
        for a in attribute_space() {
            for _ in 0..10 {
                for w in split_words(&caption(&a, &mut rng)) {
                    assert!(known.contains(&w), "`{w}` missing from vocabulary");
                }
            }
        }
    }
}
