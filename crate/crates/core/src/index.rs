//! Encode-once index of latent encodings and the search operations over
//! it: image-query top-k, cross-collection search, and text-query search
//! through the known cluster geometry (no language model involved).
//!
//! Searching never runs the encoder over the database again: entries cache
//! their class-similarity vectors, ranking is plain arithmetic on them.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pairwise_similarity, rank_by_similarity, ClusterConfig};
use crate::model::SaeModel;
use crate::tensor::Tensor;
use crate::textures::{TextureClass, TextureSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEncoding {
    pub id: String,
    pub collection: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TextureClass>,
    pub z: Vec<f64>,
    /// Cached class similarity of `z`; recomputed and checked on load.
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingIndex {
    pub cfg: ClusterConfig,
    pub model_fingerprint: String,
    pub entries: Vec<LatentEncoding>,
}

/// One ranked search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedHit {
    pub id: String,
    pub score: f64,
    pub label: Option<TextureClass>,
}

const ENCODE_BATCH: usize = 64;

impl EncodingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: &str) -> Option<&LatentEncoding> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Encode every sample exactly once (eval mode) and cache its class
/// similarity vector.
pub fn build_index(
    model: &SaeModel,
    samples: &[TextureSample],
    cfg: &ClusterConfig,
    collection: &str,
    model_fingerprint: String,
) -> Result<EncodingIndex> {
    if model.config.latent_dims != cfg.latent_dims() {
        return Err(Error::config(format!(
            "model latent dimension {} does not match cluster config dimension {}",
            model.config.latent_dims,
            cfg.latent_dims()
        )));
    }
    let n_d = cfg.latent_dims();
    let mut entries = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_BATCH) {
        let hw = model.config.input_hw;
        let mut data = Vec::with_capacity(chunk.len() * hw * hw);
        for s in chunk {
            if s.hw != hw {
                return Err(Error::Dim {
                    op: "build_index",
                    detail: format!("sample {} is {}x{}, model wants {hw}x{hw}", s.id, s.hw, s.hw),
                });
            }
            data.extend_from_slice(&s.image);
        }
        let batch = Tensor::new(&[chunk.len(), 1, hw, hw], data)?;
        let z = model.encode_eval(&batch)?;
        for (i, s) in chunk.iter().enumerate() {
            let zi = z.data[i * n_d..(i + 1) * n_d].to_vec();
            let v = cfg.class_similarity(&zi);
            entries.push(LatentEncoding {
                id: s.id.clone(),
                collection: collection.to_string(),
                label: Some(s.label),
                z: zi,
                v,
            });
        }
    }
    Ok(EncodingIndex { cfg: cfg.clone(), model_fingerprint, entries })
}

fn rank_entries(index: &EncodingIndex, query_v: &[f64]) -> Vec<RankedHit> {
    let mut hits: Vec<RankedHit> = index
        .entries
        .iter()
        .map(|e| RankedHit {
            id: e.id.clone(),
            score: pairwise_similarity(query_v, &e.v),
            label: e.label,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).expect("scores are finite").then_with(|| a.id.cmp(&b.id))
    });
    hits
}

/// Encode the query image and rank every entry by latent similarity,
/// descending; equal scores order by id.
pub fn search_by_image(
    index: &EncodingIndex,
    model: &SaeModel,
    query_image: &Tensor,
) -> Result<Vec<RankedHit>> {
    if index.is_empty() {
        return Err(Error::contract("search_by_image requires a non-empty index"));
    }
    let z = model.encode_eval(query_image)?;
    let n_d = index.cfg.latent_dims();
    let v = index.cfg.class_similarity(&z.data[..n_d]);
    Ok(rank_entries(index, &v))
}

/// Rank `index_b` against the stored encoding of `query_id` in `index_a`;
/// nothing is re-encoded.
pub fn search_cross(
    index_a: &EncodingIndex,
    index_b: &EncodingIndex,
    query_id: &str,
) -> Result<Vec<RankedHit>> {
    if index_a.model_fingerprint != index_b.model_fingerprint {
        return Err(Error::IncompatibleIndex(format!(
            "model fingerprints differ ({}... vs {}...)",
            &index_a.model_fingerprint[..12.min(index_a.model_fingerprint.len())],
            &index_b.model_fingerprint[..12.min(index_b.model_fingerprint.len())],
        )));
    }
    if index_a.cfg != index_b.cfg {
        return Err(Error::IncompatibleIndex("cluster configs differ".to_string()));
    }
    let query = index_a
        .entry(query_id)
        .ok_or_else(|| Error::contract(format!("query id {query_id:?} is not in the index")))?;
    Ok(rank_entries(index_b, &query.v))
}

/// How a text term maps to a latent point within its cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Jitter {
    /// The cluster center itself.
    Center,
    /// A uniform random point inside the cluster disc, seeded.
    Random { seed: u64 },
}

/// A search request made of class-name terms with non-negative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextQuery {
    pub terms: Vec<(String, f64)>,
    pub jitter: Jitter,
}

impl TextQuery {
    pub fn single(name: &str) -> Self {
        TextQuery { terms: vec![(name.to_string(), 1.0)], jitter: Jitter::Center }
    }
}

/// Resolve a text query to a latent position: each term maps into its
/// class cluster, multiple terms blend as a weight-normalized convex
/// combination.
pub fn text_query_to_ls(query: &TextQuery, cfg: &ClusterConfig) -> Result<Vec<f64>> {
    if query.terms.is_empty() {
        return Err(Error::contract("text query needs at least one term"));
    }
    if query.terms.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
        return Err(Error::contract("text query weights must be finite and non-negative"));
    }
    let total: f64 = query.terms.iter().map(|(_, w)| w).sum();
    if total == 0.0 {
        return Err(Error::contract("text query weights must not all be zero"));
    }
    let n_d = cfg.latent_dims();
    let mut point = vec![0.0; n_d];
    for (term_idx, (name, weight)) in query.terms.iter().enumerate() {
        let class = TextureClass::from_name(name).ok_or_else(|| Error::Vocabulary {
            term: name.clone(),
            valid: TextureClass::vocabulary(),
        })?;
        if class.code() >= cfg.n_classes() {
            return Err(Error::config(format!(
                "class {} has no cluster in a {}-cluster config",
                class.name(),
                cfg.n_classes()
            )));
        }
        let center = cfg.center(class.code());
        let mut term_point = center.to_vec();
        if let Jitter::Random { seed } = query.jitter {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9 * term_idx as u64));
            let radius = cfg.radius(class.code()) * rng.gen_range(0.0f64..1.0).sqrt();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            term_point[0] += radius * angle.cos();
            term_point[1] += radius * angle.sin();
        }
        for (p, t) in point.iter_mut().zip(&term_point) {
            *p += weight / total * t;
        }
    }
    Ok(point)
}

/// Text-query search: resolve the query to a latent point, take its class
/// similarity, rank the index.
pub fn search_by_text(index: &EncodingIndex, query: &TextQuery) -> Result<Vec<RankedHit>> {
    if index.is_empty() {
        return Err(Error::contract("search_by_text requires a non-empty index"));
    }
    let point = text_query_to_ls(query, &index.cfg)?;
    let v = index.cfg.class_similarity(&point);
    let order = rank_by_similarity(&v, &index.entries.iter().map(|e| e.v.clone()).collect::<Vec<_>>())?;
    Ok(order
        .into_iter()
        .map(|i| {
            let e = &index.entries[i];
            RankedHit { id: e.id.clone(), score: pairwise_similarity(&v, &e.v), label: e.label }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    cfg: ClusterConfig,
    model_fingerprint: String,
    n_entries: usize,
    n_d: usize,
}

/// Write the index: one JSON header line, then one JSON line per entry.
pub fn save_index(index: &EncodingIndex, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let header = IndexHeader {
        cfg: index.cfg.clone(),
        model_fingerprint: index.model_fingerprint.clone(),
        n_entries: index.entries.len(),
        n_d: index.cfg.latent_dims(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for e in &index.entries {
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

/// Read an index back; every entry's cached similarity vector is
/// recomputed from its z and must match exactly.
pub fn load_index(path: &Path) -> Result<EncodingIndex> {
    let origin = path.display().to_string();
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Format {
        path: origin.clone(),
        detail: "empty index file".into(),
    })?;
    let header: IndexHeader = serde_json::from_str(&header_line)?;
    let mut entries = Vec::with_capacity(header.n_entries);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LatentEncoding = serde_json::from_str(&line)?;
        if entry.z.len() != header.n_d {
            return Err(Error::Format {
                path: origin.clone(),
                detail: format!("entry {} has {} latent dims, header says {}", entry.id, entry.z.len(), header.n_d),
            });
        }
        let recomputed = header.cfg.class_similarity(&entry.z);
        if recomputed != entry.v {
            return Err(Error::Format {
                path: origin.clone(),
                detail: format!("entry {}: cached similarity vector does not match its z", entry.id),
            });
        }
        entries.push(entry);
    }
    if entries.len() != header.n_entries {
        return Err(Error::Format {
            path: origin,
            detail: format!("header says {} entries, found {}", header.n_entries, entries.len()),
        });
    }
    Ok(EncodingIndex {
        cfg: header.cfg,
        model_fingerprint: header.model_fingerprint,
        entries,
    })
}
