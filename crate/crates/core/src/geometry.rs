//! The configured latent-space geometry and its similarity measure.
//!
//! Clusters live on a circle of radius `d_c`, one per class. Knowing where
//! each class must sit lets a plain vector of distances be turned into a
//! per-class similarity vector, and two such vectors be compared without a
//! classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster radius specification: one shared radius or one per class.
#[derive(Debug, Clone)]
pub enum RadiusSpec {
    Uniform(f64),
    PerCluster(Vec<f64>),
}

impl From<f64> for RadiusSpec {
    fn from(r: f64) -> Self {
        RadiusSpec::Uniform(r)
    }
}

/// Immutable cluster layout: centers, radii, and the derived constants the
/// similarity measure needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterConfigRepr", into = "ClusterConfigRepr")]
pub struct ClusterConfig {
    n_c: usize,
    n_d: usize,
    d_c: f64,
    phase0: f64,
    b_c: f64,
    radii: Vec<f64>,
    /// Row-major [n_c][n_d] center coordinates.
    centers: Vec<f64>,
    /// Distance between neighboring cluster centers.
    neighbor_distance: f64,
    /// Slope constant of the inside-cluster similarity falloff,
    /// (1 - b_c) / sin(1); pins similarity to b_c at the cluster boundary.
    k_b: f64,
    explicit_centers: bool,
}

impl ClusterConfig {
    /// Clusters equally spaced on the circle of radius `d_c` in 2-D, with
    /// cluster 0 at angle `phase0`.
    pub fn circular(
        n_c: usize,
        d_c: f64,
        r_c: impl Into<RadiusSpec>,
        b_c: f64,
        phase0: f64,
    ) -> Result<Self> {
        Self::circular_nd(n_c, d_c, r_c, b_c, phase0, 2)
    }

    /// Same circular layout embedded in `n_d` dimensions; the extra
    /// coordinates of every center are zero.
    pub fn circular_nd(
        n_c: usize,
        d_c: f64,
        r_c: impl Into<RadiusSpec>,
        b_c: f64,
        phase0: f64,
        n_d: usize,
    ) -> Result<Self> {
        if n_c < 2 {
            return Err(Error::config(format!("need at least 2 clusters, got {n_c}")));
        }
        if n_d < 2 {
            return Err(Error::config(format!("latent dimension must be >= 2, got {n_d}")));
        }
        if !(d_c > 0.0) {
            return Err(Error::config(format!("center distance d_c must be positive, got {d_c}")));
        }
        let mut centers = vec![0.0; n_c * n_d];
        for i in 0..n_c {
            let angle = phase0 + std::f64::consts::TAU * i as f64 / n_c as f64;
            centers[i * n_d] = d_c * angle.cos();
            centers[i * n_d + 1] = d_c * angle.sin();
        }
        // Equals d_c * sqrt(2 (1 - cos(2 pi / n_c))), but taken as the
        // realized minimum pairwise distance so that a point sitting on a
        // neighboring center compares >= R_d exactly and its similarity is
        // exactly zero.
        let neighbor_distance = min_pairwise_distance(&centers, n_c, n_d);
        Self::build(n_c, n_d, d_c, phase0, b_c, r_c.into(), centers, neighbor_distance, false)
    }

    /// Explicitly placed centers; the neighbor distance becomes the minimum
    /// pairwise center distance (which the circular layout's formula equals).
    pub fn from_centers(
        centers: Vec<Vec<f64>>,
        r_c: impl Into<RadiusSpec>,
        b_c: f64,
    ) -> Result<Self> {
        let n_c = centers.len();
        if n_c < 2 {
            return Err(Error::config(format!("need at least 2 clusters, got {n_c}")));
        }
        let n_d = centers[0].len();
        if centers.iter().any(|c| c.len() != n_d) {
            return Err(Error::config("explicit centers have inconsistent dimensions".to_string()));
        }
        let flat: Vec<f64> = centers.into_iter().flatten().collect();
        let min_dist = min_pairwise_distance(&flat, n_c, n_d);
        let d_c = flat[..n_d].iter().map(|x| x * x).sum::<f64>().sqrt();
        Self::build(n_c, n_d, d_c, 0.0, b_c, r_c.into(), flat, min_dist, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        n_c: usize,
        n_d: usize,
        d_c: f64,
        phase0: f64,
        b_c: f64,
        r_c: RadiusSpec,
        centers: Vec<f64>,
        neighbor_distance: f64,
        explicit_centers: bool,
    ) -> Result<Self> {
        if !(b_c > 0.0 && b_c < 1.0) {
            return Err(Error::config(format!(
                "boundary similarity b_c must lie in (0,1), got {b_c}"
            )));
        }
        let radii = match r_c {
            RadiusSpec::Uniform(r) => vec![r; n_c],
            RadiusSpec::PerCluster(v) => {
                if v.len() != n_c {
                    return Err(Error::config(format!(
                        "{} radii for {} clusters",
                        v.len(),
                        n_c
                    )));
                }
                v
            }
        };
        for (i, &r) in radii.iter().enumerate() {
            if !(r > 0.0) {
                return Err(Error::config(format!("cluster {i} radius must be positive, got {r}")));
            }
            if r >= neighbor_distance {
                return Err(Error::config(format!(
                    "cluster {i} radius {r} reaches the neighbor distance {neighbor_distance}; \
                     similarity support would overlap"
                )));
            }
        }
        let k_b = (1.0 - b_c) / 1f64.sin();
        // Monotonicity of the similarity profile: the inside branch must
        // meet the outside branch at exactly b_c.
        if (k_b * 1f64.sin() + b_c - 1.0).abs() > 1e-12 {
            return Err(Error::config("similarity falloff does not meet b_c at the boundary"));
        }
        Ok(ClusterConfig {
            n_c,
            n_d,
            d_c,
            phase0,
            b_c,
            radii,
            centers,
            neighbor_distance,
            k_b,
            explicit_centers,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_c
    }

    pub fn latent_dims(&self) -> usize {
        self.n_d
    }

    pub fn center_distance(&self) -> f64 {
        self.d_c
    }

    pub fn boundary_similarity(&self) -> f64 {
        self.b_c
    }

    pub fn phase0(&self) -> f64 {
        self.phase0
    }

    /// R_d, the distance between neighboring cluster centers.
    pub fn neighbor_distance(&self) -> f64 {
        self.neighbor_distance
    }

    /// k_b, the inside-branch falloff constant.
    pub fn falloff(&self) -> f64 {
        self.k_b
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn radius(&self, class: usize) -> f64 {
        self.radii[class]
    }

    /// Flat [n_c][n_d] center matrix.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.n_d..(class + 1) * self.n_d]
    }

    /// Euclidean distances from `z` to every cluster center.
    pub fn center_distances(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.n_d);
        (0..self.n_c).map(|i| euclidean(z, self.center(i))).collect()
    }

    /// Per-class similarity of a latent position: 1 at a center, b_c at the
    /// cluster boundary, 0 from the neighbor distance outward.
    pub fn class_similarity(&self, z: &[f64]) -> Vec<f64> {
        self.center_distances(z)
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let r = self.radii[i];
                if d <= r {
                    1.0 - self.k_b * (d / r).sin()
                } else {
                    (self.b_c * (self.neighbor_distance - d) / (self.neighbor_distance - r))
                        .max(0.0)
                }
            })
            .collect()
    }

    /// Index of the nearest cluster center (classifier-free label).
    pub fn nearest_center(&self, z: &[f64]) -> usize {
        let d = self.center_distances(z);
        let mut best = 0;
        for i in 1..self.n_c {
            if d[i] < d[best] {
                best = i;
            }
        }
        best
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn min_pairwise_distance(centers: &[f64], n_c: usize, n_d: usize) -> f64 {
    let mut min_dist = f64::INFINITY;
    for i in 0..n_c {
        for j in i + 1..n_c {
            let d =
                euclidean(&centers[i * n_d..(i + 1) * n_d], &centers[j * n_d..(j + 1) * n_d]);
            min_dist = min_dist.min(d);
        }
    }
    min_dist
}

/// Overlap ratio of two class similarity vectors. Two all-zero vectors
/// (both far from every cluster) compare as 0 rather than dividing by zero.
pub fn pairwise_similarity(v1: &[f64], v2: &[f64]) -> f64 {
    debug_assert_eq!(v1.len(), v2.len());
    let overlap: f64 = v1.iter().zip(v2).map(|(a, b)| a.min(*b)).sum();
    let denom = v1.iter().sum::<f64>().max(v2.iter().sum::<f64>());
    if denom == 0.0 {
        0.0
    } else {
        overlap / denom
    }
}

/// Candidate indices ordered by descending similarity to the query; equal
/// scores keep ascending index order.
pub fn rank_by_similarity(query: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::contract("rank_by_similarity requires a non-empty candidate list"));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| pairwise_similarity(query, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("similarities are finite"));
    Ok(order)
}

#[derive(Serialize, Deserialize, Clone)]
struct ClusterConfigRepr {
    n_c: usize,
    d_c: f64,
    r_c: Vec<f64>,
    b_c: f64,
    phase0: f64,
    #[serde(default = "default_n_d")]
    n_d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explicit_centers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_b: Option<f64>,
}

fn default_n_d() -> usize {
    2
}

impl From<ClusterConfig> for ClusterConfigRepr {
    fn from(cfg: ClusterConfig) -> Self {
        ClusterConfigRepr {
            n_c: cfg.n_c,
            d_c: cfg.d_c,
            r_c: cfg.radii.clone(),
            b_c: cfg.b_c,
            phase0: cfg.phase0,
            n_d: cfg.n_d,
            explicit_centers: cfg.explicit_centers.then(|| {
                cfg.centers.chunks(cfg.n_d).map(|c| c.to_vec()).collect()
            }),
            r_d: Some(cfg.neighbor_distance),
            k_b: Some(cfg.k_b),
        }
    }
}

impl TryFrom<ClusterConfigRepr> for ClusterConfig {
    type Error = Error;

    fn try_from(repr: ClusterConfigRepr) -> Result<Self> {
        let cfg = match repr.explicit_centers {
            Some(centers) => {
                ClusterConfig::from_centers(centers, RadiusSpec::PerCluster(repr.r_c), repr.b_c)?
            }
            None => ClusterConfig::circular_nd(
                repr.n_c,
                repr.d_c,
                RadiusSpec::PerCluster(repr.r_c),
                repr.b_c,
                repr.phase0,
                repr.n_d,
            )?,
        };
        // Stored derived fields must agree with what the layout implies.
        if let Some(r_d) = repr.r_d {
            if (r_d - cfg.neighbor_distance).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "stored neighbor distance {r_d} disagrees with derived {}",
                    cfg.neighbor_distance
                )));
            }
        }
        if let Some(k_b) = repr.k_b {
            if (k_b - cfg.k_b).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "stored falloff {k_b} disagrees with derived {}",
                    cfg.k_b
                )));
            }
        }
        Ok(cfg)
    }
}

/// The cluster layout used throughout the texture experiments: five
/// clusters at 0.85 from the origin, radius 0.34, boundary similarity 0.79.
pub fn texture_cluster_config() -> ClusterConfig {
    ClusterConfig::circular(5, 0.85, 0.34, 0.79, 0.0).expect("reference layout is valid")
}
