//! Item embedding tables: skip-gram ID vectors, hashed text surrogates and
//! externally produced vectors, plus their on-disk format.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, SplitDataset};
use crate::error::{Error, Result};
use crate::numcore::{dot, DenseMatrix};

const TABLE_FORMAT: &str = "freqlab-embeddings/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Id,
    Text,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableHeader {
    format: String,
    n_items: usize,
    dim: usize,
    provenance: Provenance,
    items: Vec<String>,
    config_hash: Option<String>,
}

/// One row per item, in the vocabulary order of `items`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub items: Vec<String>,
    pub vectors: DenseMatrix,
    pub provenance: Provenance,
    pub config_hash: Option<String>,
}

impl EmbeddingTable {
    pub fn new(items: Vec<String>, vectors: DenseMatrix, provenance: Provenance) -> Result<Self> {
        if items.len() != vectors.rows() {
            return Err(Error::input(format!(
                "{} item tokens for {} embedding rows",
                items.len(),
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::numeric("embedding table contains non-finite values"));
        }
        Ok(Self {
            items,
            vectors,
            provenance,
            config_hash: None,
        })
    }

    pub fn n_items(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn norm_stats(&self) -> NormStats {
        let norms: Vec<f64> = (0..self.n_items())
            .map(|r| dot(self.vectors.row(r), self.vectors.row(r)).sqrt())
            .collect();
        if norms.is_empty() {
            return NormStats {
                mean: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        NormStats {
            mean: norms.iter().sum::<f64>() / norms.len() as f64,
            min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            max: norms.iter().copied().fold(0.0, f64::max),
        }
    }

    /// JSON header line, then `n_items × dim` little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TableHeader {
            format: TABLE_FORMAT.into(),
            n_items: self.n_items(),
            dim: self.dim(),
            provenance: self.provenance,
            items: self.items.clone(),
            config_hash: self.config_hash.clone(),
        };
        let mut out = serde_json::to_vec(&header).unwrap();
        out.push(b'\n');
        for v in self.vectors.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::input("embedding file has no header line"))?;
        let header: TableHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != TABLE_FORMAT {
            return Err(Error::input(format!("unsupported embedding format `{}`", header.format)));
        }
        if header.items.len() != header.n_items {
            return Err(Error::input("embedding header item list disagrees with n_items"));
        }
        let body = &bytes[nl + 1..];
        let expected = header.n_items * header.dim * 8;
        if body.len() != expected {
            return Err(Error::input(format!(
                "embedding body has {} bytes, header promises {expected} ({} × {})",
                body.len(),
                header.n_items,
                header.dim
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vectors = DenseMatrix::from_vec(header.n_items, header.dim, data)?;
        let mut table = Self::new(header.items, vectors, header.provenance)?;
        table.config_hash = header.config_hash;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub table: EmbeddingTable,
    /// Mean pair loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling over pairs within `window` positions of
/// each training prefix. Negatives follow the unigram distribution raised to
/// 0.75; the learning rate decays linearly to 1e-4 of its start. The exported
/// vector of an item is the sum of its input and output vectors.
pub fn pretrain_id_embeddings(split: &SplitDataset, config: &SkipGramConfig) -> Result<PretrainOutput> {
    if config.dim == 0 || config.window == 0 {
        return Err(Error::input("skip-gram needs dim ≥ 1 and window ≥ 1"));
    }
    let n = split.n_items();
    let mut pairs = Vec::new();
    for seq in &split.sequences {
        let s = seq.train();
        for i in 0..s.len() {
            let lo = i.saturating_sub(config.window);
            let hi = (i + config.window + 1).min(s.len());
            for j in lo..hi {
                if j != i && s[j] != s[i] {
                    pairs.push((s[i], s[j]));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::input("training split has no co-occurring pairs"));
    }
    let counts = split.train_item_counts();
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75) + 1e-12).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::input(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut input = DenseMatrix::from_fn(n, d, |_, _| (rng.random::<f64>() - 0.5) / d as f64);
    let mut output = DenseMatrix::zeros(n, d);
    let total_steps = (config.epochs * pairs.len()).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad_in = vec![0.0; d];

    for epoch in 0..config.epochs {
        // Fisher-Yates with the shared rng keeps the order seed-determined.
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for &(center, context) in &pairs {
            let lr = config.lr * (1.0 - step as f64 / total_steps as f64).max(1e-4);
            grad_in.iter_mut().for_each(|g| *g = 0.0);
            for k in 0..=config.negatives {
                let (target, label) = if k == 0 {
                    (context, 1.0)
                } else {
                    let t = sampler.sample(&mut rng);
                    if t == context {
                        continue;
                    }
                    (t, 0.0)
                };
                let score = dot(input.row(center), output.row(target));
                let p = sigmoid(score);
                loss_sum -= if label == 1.0 {
                    p.max(1e-300).ln()
                } else {
                    (1.0 - p).max(1e-300).ln()
                };
                let coeff = lr * (label - p);
                let in_row = input.row(center).to_vec();
                for (c, o) in output.row_mut(target).iter_mut().enumerate() {
                    grad_in[c] += coeff * *o;
                    *o += coeff * in_row[c];
                }
            }
            for (v, g) in input.row_mut(center).iter_mut().zip(&grad_in) {
                *v += g;
            }
            step += 1;
            if !loss_sum.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: "skip-gram loss diverged".into(),
                });
            }
        }
        let mean = loss_sum / pairs.len() as f64;
        log::info!("skip-gram epoch {} loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    let table = EmbeddingTable::new(split.items.clone(), input.add(&output), Provenance::Id)?;
    Ok(PretrainOutput { table, epoch_losses })
}

const HASH_BUCKETS: usize = 1 << 12;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature-hashed token counts of `text`, lowercased and split on
/// non-alphanumeric characters.
fn hashed_counts(text: &str) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = fnv1a(token.to_lowercase().as_bytes());
        let bucket = (h % HASH_BUCKETS as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        match out.iter_mut().find(|(b, _)| *b == bucket) {
            Some(slot) => slot.1 += sign,
            None => out.push((bucket, sign)),
        }
    }
    out
}

/// Hashed bag of words, projected by a seeded Gaussian matrix and scaled to
/// unit length. Items without text get the zero vector.
pub fn text_surrogate_embeddings(split: &SplitDataset, d_text: usize, seed: u64) -> Result<EmbeddingTable> {
    if d_text == 0 {
        return Err(Error::input("d_text must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = DenseMatrix::from_fn(HASH_BUCKETS, d_text, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut vectors = DenseMatrix::zeros(split.n_items(), d_text);
    for (i, text) in split.item_text.iter().enumerate() {
        let Some(text) = text else { continue };
        let row = vectors.row_mut(i);
        for (bucket, count) in hashed_counts(text) {
            for (v, p) in row.iter_mut().zip(projection.row(bucket)) {
                *v += count * p;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    EmbeddingTable::new(split.items.clone(), vectors, Provenance::Text)
}

/// Reads vectors produced elsewhere and aligns them to `items`. Accepts the
/// native table format or text lines `token<TAB>v1 v2 ...`; items absent from
/// the file get the zero vector.
pub fn load_external(path: &Path, items: &[String], expected_dim: usize) -> Result<EmbeddingTable> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut found: Vec<(String, Vec<f64>)> = Vec::new();
    if bytes.first() == Some(&b'{') {
        let t = EmbeddingTable::from_bytes(&bytes)?;
        for (r, tok) in t.items.iter().enumerate() {
            found.push((tok.clone(), t.vectors.row(r).to_vec()));
        }
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::input("external embeddings are not UTF-8"))?;
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: "expected `token<TAB>values`".into(),
            })?;
            let values = rest
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        line: k + 1,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            found.push((tok.to_string(), values));
        }
    }
    let mut vectors = DenseMatrix::zeros(items.len(), expected_dim);
    let index: std::collections::HashMap<&str, usize> =
        items.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    for (tok, values) in found {
        if values.len() != expected_dim {
            return Err(Error::input(format!(
                "external vector for `{tok}` has dimension {}, expected {expected_dim}",
                values.len()
            )));
        }
        if let Some(&i) = index.get(tok.as_str()) {
            vectors.row_mut(i).copy_from_slice(&values);
        }
    }
    EmbeddingTable::new(items.to_vec(), vectors, Provenance::External)
}

/// Cosine similarity, 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_split, Event, InteractionLog};
    use std::collections::BTreeMap;

    fn three_item_split() -> SplitDataset {
        let mut events = Vec::new();
        for u in 0..20 {
            let user = format!("u{u}");
            let items: &[&str] = if u % 2 == 0 { &["a", "b", "a", "b", "a", "b", "a"] } else { &["c"; 7] };
            for (t, it) in items.iter().enumerate() {
                events.push(Event {
                    user: user.clone(),
                    item: it.to_string(),
                    ts: t as u64,
                });
            }
        }
        let mut text = BTreeMap::new();
        text.insert("a".to_string(), "Red Guitar".to_string());
        text.insert("b".to_string(), "red guitar".to_string());
        build_split(&InteractionLog::new(events, text), 5, 50).unwrap()
    }

    #[test]
    fn skipgram_separates_co_consumed_items() {
        let split = three_item_split();
        let cfg = SkipGramConfig {
            dim: 8,
            epochs: 30,
            ..Default::default()
        };
        let out = pretrain_id_embeddings(&split, &cfg).unwrap();
        let v = &out.table.vectors;
        let (a, b, c) = (0, 1, 2);
        assert!(cosine(v.row(a), v.row(b)) > cosine(v.row(a), v.row(c)));
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
        let again = pretrain_id_embeddings(&split, &cfg).unwrap();
        assert_eq!(out.table.to_bytes(), again.table.to_bytes());
        let d50 = pretrain_id_embeddings(&split, &SkipGramConfig::default()).unwrap();
        assert_eq!(d50.table.dim(), 50);
    }

    #[test]
    fn text_surrogate_properties() {
        let split = three_item_split();
        let t = text_surrogate_embeddings(&split, 16, 3).unwrap();
        assert_eq!(t.vectors.row(0), t.vectors.row(1));
        assert!(t.vectors.row(2).iter().all(|v| *v == 0.0));
        assert!((dot(t.vectors.row(0), t.vectors.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(t, text_surrogate_embeddings(&split, 16, 3).unwrap());
        assert!(text_surrogate_embeddings(&split, 0, 3).is_err());
    }

    #[test]
    fn table_roundtrip_and_external() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let mut t = EmbeddingTable::new(
            items.clone(),
            DenseMatrix::from_fn(3, 2, |r, c| r as f64 * 0.1 - c as f64 / 3.0),
            Provenance::Id,
        )
        .unwrap();
        t.config_hash = Some("abc".into());
        let p = dir.path().join("t.emb");
        t.save(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);

        let ext = dir.path().join("ext.tsv");
        fs::write(&ext, "b\t1 2\nz\t3 4\n").unwrap();
        let e = load_external(&ext, &items, 2).unwrap();
        assert_eq!(e.vectors.row(1), &[1.0, 2.0]);
        assert_eq!(e.vectors.row(0), &[0.0, 0.0]);
        assert!(load_external(&ext, &items, 3).is_err());
        assert_eq!(load_external(&p, &items, 2).unwrap().vectors, t.vectors);

        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(EmbeddingTable::from_bytes(&bytes).is_err());
    }
}
