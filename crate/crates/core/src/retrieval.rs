//! Text-to-image retrieval: cosine ranking, rank-k accuracy and CMC curves.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// `q·g / (‖q‖‖g‖)`, accumulated at 64 bits and returned at 32.
pub fn cosine_similarity(q: &[f32], g: &[f32]) -> Result<f32> {
    if q.len() != g.len() {
        return Err(Error::Dimension(format!(
            "cannot compare descriptors of length {} and {}",
            q.len(),
            g.len()
        )));
    }
    let (mut dot, mut nq, mut ng) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in q.iter().zip(g) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nq += a * a;
        ng += b * b;
    }
    if !(nq > 0.0 && ng > 0.0) {
        return Err(Error::Normalization("cosine similarity of a zero-norm descriptor".into()));
    }
    Ok((dot / (nq.sqrt() * ng.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Labelled descriptor rows; used for both the gallery and the queries.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    ids: Vec<u32>,
    data: Vec<f32>,
}

pub type Gallery = DescriptorSet;
pub type QuerySet = DescriptorSet;

impl DescriptorSet {
    pub fn new(dim: usize, ids: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("descriptor dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Dimension(format!(
                "{} labels need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        for (r, row) in data.chunks(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("descriptor row {r} is not finite")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Normalization(format!("descriptor row {r} has zero norm")));
            }
        }
        Ok(Self { dim, ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    const MAGIC: &'static [u8; 4] = b"XMDV";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (4 + 4 * self.dim) + 4);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != Self::MAGIC {
            return Err(Error::Format("not a descriptor file".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported descriptor file version {version}")));
        }
        let (count, dim) = (word(8) as usize, word(12) as usize);
        let body = 16 + count * (4 + 4 * dim);
        if bytes.len() != body + 4 {
            return Err(Error::Corrupt(format!(
                "descriptor file should be {} bytes, is {}",
                body + 4,
                bytes.len()
            )));
        }
        if crc32fast::hash(&bytes[..body]) != word(body) {
            return Err(Error::Corrupt("descriptor file checksum mismatch".into()));
        }
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        let mut at = 16;
        for _ in 0..count {
            ids.push(word(at));
            at += 4;
            for _ in 0..dim {
                data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
                at += 4;
            }
        }
        Self::new(dim, ids, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_sets(queries: &QuerySet, gallery: &Gallery) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::Input("empty gallery".into()));
    }
    if queries.dim != gallery.dim {
        return Err(Error::Dimension(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.dim, gallery.dim
        )));
    }
    Ok(())
}

/// Accuracy at every `k` in `1..=len`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CmcCurve {
    accuracy: Vec<f64>,
}

impl CmcCurve {
    fn from_ranks(ranks: &[usize], max_k: usize) -> Self {
        let mut hits = vec![0usize; max_k];
        for &r in ranks {
            if r < max_k {
                hits[r] += 1;
            }
        }
        let n = ranks.len().max(1) as f64;
        let mut acc = Vec::with_capacity(max_k);
        let mut running = 0;
        for h in hits {
            running += h;
            acc.push(if ranks.is_empty() { 0.0 } else { running as f64 / n });
        }
        Self { accuracy: acc }
    }

    pub fn len(&self) -> usize {
        self.accuracy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accuracy.is_empty()
    }

    /// Accuracy at rank `k` (1-based); ranks past the gallery size saturate.
    pub fn at(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.accuracy[(k - 1).min(self.accuracy.len() - 1)]
    }

    pub fn values(&self) -> &[f64] {
        &self.accuracy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub cmc: CmcCurve,
    /// Zero-based position of the first correct match for each evaluated
    /// query, in query order.
    pub first_match: Vec<usize>,
    /// Queries skipped because their identity has no gallery entry.
    pub excluded: Vec<usize>,
}

impl Evaluation {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.at(k)
    }

    pub fn evaluated(&self) -> usize {
        self.first_match.len()
    }
}

/// Ranks the gallery for every query (descending similarity, ties by
/// ascending gallery index) and records the first correct position.
pub fn evaluate_rank_k(queries: &QuerySet, gallery: &Gallery) -> Result<Evaluation> {
    check_sets(queries, gallery)?;
    let results: Vec<Option<usize>> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let id = queries.ids[qi];
            let sims = (0..gallery.len())
                .map(|gi| cosine_similarity(q, gallery.row(gi)))
                .collect::<Result<Vec<f32>>>()?;
            // The first correct item's position is the number of items
            // ordered strictly before it.
            let Some(best) = (0..gallery.len())
                .filter(|&g| gallery.ids[g] == id)
                .min_by(|&a, &b| {
                    sims[b].partial_cmp(&sims[a]).expect("finite similarities").then(a.cmp(&b))
                })
            else {
                return Ok(None);
            };
            let ahead = (0..gallery.len())
                .filter(|&g| sims[g] > sims[best] || (sims[g] == sims[best] && g < best))
                .count();
            Ok(Some(ahead))
        })
        .collect::<Result<_>>()?;
    let mut first_match = Vec::new();
    let mut excluded = Vec::new();
    for (qi, r) in results.into_iter().enumerate() {
        match r {
            Some(r) => first_match.push(r),
            None => excluded.push(qi),
        }
    }
    Ok(Evaluation {
        cmc: CmcCurve::from_ranks(&first_match, gallery.len()),
        first_match,
        excluded,
    })
}

/// Reference implementation: fully sorts the gallery per query with a
/// plain insertion sort and scans for the first correct identity.
pub fn oracle_rank(queries: &QuerySet, gallery: &Gallery) -> Result<CmcCurve> {
    check_sets(queries, gallery)?;
    let g = gallery.len();
    let mut ranks = Vec::new();
    for qi in 0..queries.len() {
        let mut order: Vec<(f32, usize)> = Vec::with_capacity(g);
        for gi in 0..g {
            let s = cosine_similarity(queries.row(qi), gallery.row(gi))?;
            let mut pos = order.len();
            while pos > 0 {
                let (ps, pi) = order[pos - 1];
                let before = ps > s || (ps == s && pi < gi);
                if before {
                    break;
                }
                pos -= 1;
            }
            order.insert(pos, (s, gi));
        }
        if let Some(r) = order.iter().position(|&(_, gi)| gallery.ids[gi] == queries.ids[qi]) {
            ranks.push(r);
        }
    }
    Ok(CmcCurve::from_ranks(&ranks, g))
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub queries: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub gallery: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

impl Summary {
    pub fn new(eval: &Evaluation, queries: usize, gallery: usize) -> Self {
        Self {
            queries,
            evaluated: eval.evaluated(),
            excluded: eval.excluded.len(),
            gallery,
            rank1: eval.rank(1),
            rank5: eval.rank(5),
            rank10: eval.rank(10),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// `k,accuracy` rows for the whole curve.
pub fn cmc_csv(cmc: &CmcCurve) -> String {
    let mut out = String::from("k,accuracy\n");
    for (k, a) in cmc.values().iter().enumerate() {
        out.push_str(&format!("{},{a}\n", k + 1));
    }
    out
}
