//! Dataset manifests and in-memory splits.
//!
//! A manifest is a tab-separated file with one line per caption:
//! `identity <TAB> image path <TAB> caption <TAB> split`. Paths are relative
//! to the manifest's directory. Blank lines and `#` comments are skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{resize, ChannelStats, Image};
use crate::synth::{MANIFEST_FILE, STATS_FILE, VOCAB_FILE};
use crate::text::{split_words, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub identity: u32,
    pub image: String,
    pub caption: String,
    pub split: Split,
}

pub fn format_manifest(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        if [&r.image, &r.caption].iter().any(|s| s.contains(['\t', '\n'])) {
            return Err(Error::Input("manifest fields cannot contain tabs or newlines".into()));
        }
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.identity, r.image, r.caption, r.split));
    }
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, caption, split] = fields[..] else {
            return Err(Error::Format(format!(
                "manifest line {} has {} fields, expected 4",
                n + 1,
                fields.len()
            )));
        };
        records.push(Record {
            identity: id
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad identity `{id}`", n + 1)))?,
            image: image.to_owned(),
            caption: caption.to_owned(),
            split: split.parse()?,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, format_manifest(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    /// Index into the split's image list.
    pub image: usize,
    pub text: String,
}

/// Distinct images of one split, plus every caption pointing at them.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub images: Vec<Image>,
    pub image_ids: Vec<u32>,
    pub captions: Vec<Caption>,
}

impl SplitData {
    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn caption_ids(&self) -> Vec<u32> {
        self.captions.iter().map(|c| self.image_ids[c.image]).collect()
    }

    pub fn num_identities(&self) -> usize {
        let mut ids = self.image_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub stats: ChannelStats,
    pub vocab: Vocabulary,
    pub train: SplitData,
    pub val: Option<SplitData>,
    pub test: SplitData,
}

impl Dataset {
    /// Loads `manifest.tsv` under `root`, resizing images to `size`.
    ///
    /// Channel statistics come from `stats.txt` when present, else from the
    /// training images; the vocabulary from `vocab.txt`, else from the
    /// training captions.
    pub fn load(root: &Path, size: (usize, usize)) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST_FILE))?;
        let mut splits: BTreeMap<Split, Vec<&Record>> = BTreeMap::new();
        for r in &records {
            splits.entry(r.split).or_default().push(r);
        }
        let mut build = |split: Split| -> Result<Option<SplitData>> {
            let Some(recs) = splits.remove(&split) else {
                return Ok(None);
            };
            let mut index: BTreeMap<&str, usize> = BTreeMap::new();
            let mut data = SplitData {
                images: Vec::new(),
                image_ids: Vec::new(),
                captions: Vec::new(),
            };
            for r in recs {
                let i = match index.get(r.image.as_str()) {
                    Some(&i) => {
                        if data.image_ids[i] != r.identity {
                            return Err(Error::Data(format!(
                                "image `{}` listed under two identities",
                                r.image
                            )));
                        }
                        i
                    }
                    None => {
                        let img = Image::read_ppm(&root.join(&r.image))?;
                        data.images.push(resize(&img, size)?);
                        data.image_ids.push(r.identity);
                        index.insert(&r.image, data.images.len() - 1);
                        data.images.len() - 1
                    }
                };
                data.captions.push(Caption {
                    image: i,
                    text: r.caption.clone(),
                });
            }
            Ok(Some(data))
        };
        let train = build(Split::Train)?.ok_or_else(|| Error::Data("manifest has no train split".into()))?;
        let val = build(Split::Val)?;
        let test = build(Split::Test)?.ok_or_else(|| Error::Data("manifest has no test split".into()))?;

        let stats_path = root.join(STATS_FILE);
        let stats = if stats_path.exists() {
            let text = std::fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
            ChannelStats::from_text(&text)?
        } else {
            ChannelStats::compute(&train.images)?
        };
        let vocab_path = root.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            let words: std::collections::BTreeSet<String> =
                train.captions.iter().flat_map(|c| split_words(&c.text)).collect();
            Vocabulary::new(words)?
        };
        Ok(Self {
            root: root.to_path_buf(),
            stats,
            vocab,
            train,
            val,
            test,
        })
    }

    /// Split used for per-epoch validation: `val` when present, else `test`.
    pub fn validation(&self) -> &SplitData {
        self.val.as_ref().unwrap_or(&self.test)
    }

    /// Training identities in ascending order; their position is the class
    /// index used by the shared classifier.
    pub fn train_classes(&self) -> Vec<u32> {
        let mut ids = self.train.image_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
