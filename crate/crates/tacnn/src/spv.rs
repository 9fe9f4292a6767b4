//! Structure projection vectors.
//!
//! Patches of the primary dataset are described by HOG, clustered into
//! two small hierarchical k-means trees (one over positives, one over
//! negatives), and every patch is then projected to its Euclidean
//! distances from all leaf means. The resulting vector feeds the top
//! hidden layer of the network; distances are optionally standardized
//! to zero mean and unit variance over the training set before fusion,
//! with the statistics stored alongside the trees.

use crate::error::Error;
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// HOG

/// Histogram-of-oriented-gradients parameters. Gradients are central
/// differences with replicated borders; orientations are unsigned
/// (folded into [0, 180)); votes split linearly between the two nearest
/// bin centers, which sit at i * (180/bins); blocks of `block` x `block`
/// cells slide one cell at a time and are L2-normalized with `epsilon`
/// under the square root.
#[derive(Debug, Clone, PartialEq)]
pub struct HogParams {
    pub cell: usize,
    pub bins: usize,
    pub block: usize,
    pub epsilon: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams {
            cell: 8,
            bins: 9,
            block: 2,
            epsilon: 1e-6,
        }
    }
}

impl HogParams {
    /// Descriptor length for a patch of the given extents.
    pub fn descriptor_len(&self, h: usize, w: usize) -> Result<usize> {
        let (cy, cx) = self.cell_grid(h, w)?;
        if cy < self.block || cx < self.block {
            return Err(Error::Dimension(format!(
                "cell grid {cy}x{cx} smaller than block {0}x{0}",
                self.block
            )));
        }
        let by = cy - self.block + 1;
        let bx = cx - self.block + 1;
        Ok(by * bx * self.block * self.block * self.bins)
    }

    fn cell_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.cell) {
            return Err(Error::Shape {
                axis: 1,
                expected: self.cell,
                got: h,
                context: "patch height must be a multiple of the HOG cell".into(),
            });
        }
        if !w.is_multiple_of(self.cell) {
            return Err(Error::Shape {
                axis: 2,
                expected: self.cell,
                got: w,
                context: "patch width must be a multiple of the HOG cell".into(),
            });
        }
        Ok((h / self.cell, w / self.cell))
    }
}

/// Extract a HOG descriptor. Multi-channel patches are averaged into a
/// single luminance plane first.
pub fn hog_extract(patch: &Tensor, params: &HogParams) -> Result<Vec<f64>> {
    let (c, h, w) = patch.dims3()?;
    let (cy, cx) = params.cell_grid(h, w)?;
    let _ = params.descriptor_len(h, w)?;

    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] += patch.at3(ch, i, j) / c as f64;
            }
        }
    }

    // per-cell orientation histograms
    let bin_width = std::f64::consts::PI / params.bins as f64;
    let mut hist = vec![0.0; cy * cx * params.bins];
    for i in 0..h {
        for j in 0..w {
            let up = plane[i.saturating_sub(1) * w + j];
            let down = plane[(i + 1).min(h - 1) * w + j];
            let left = plane[i * w + j.saturating_sub(1)];
            let right = plane[i * w + (j + 1).min(w - 1)];
            let gx = right - left;
            let gy = down - up;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta -= std::f64::consts::PI;
            }
            let coord = theta / bin_width;
            let lo = coord.floor() as usize % params.bins;
            let frac = coord - coord.floor();
            let hi = (lo + 1) % params.bins;
            let cell = (i / params.cell) * cx + j / params.cell;
            hist[cell * params.bins + lo] += mag * (1.0 - frac);
            hist[cell * params.bins + hi] += mag * frac;
        }
    }

    // overlapping blocks, each L2-normalized
    let by = cy - params.block + 1;
    let bx = cx - params.block + 1;
    let block_len = params.block * params.block * params.bins;
    let mut desc = Vec::with_capacity(by * bx * block_len);
    for bi in 0..by {
        for bj in 0..bx {
            let start = desc.len();
            for ci in 0..params.block {
                for cj in 0..params.block {
                    let cell = (bi + ci) * cx + (bj + cj);
                    desc.extend_from_slice(&hist[cell * params.bins..(cell + 1) * params.bins]);
                }
            }
            let norm: f64 = desc[start..].iter().map(|v| v * v).sum::<f64>();
            let denom = (norm + params.epsilon).sqrt();
            for v in &mut desc[start..] {
                *v /= denom;
            }
        }
    }
    Ok(desc)
}

// ---------------------------------------------------------------------------
// k-means

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd iterations from explicit initial centers until the assignment
/// reaches a fixpoint or the iteration cap. A cluster left empty by an
/// assignment step is re-seeded to the point currently farthest from
/// its own center (lowest index on ties).
pub fn kmeans_with_init(
    points: &[Vec<f64>],
    init: Vec<Vec<f64>>,
    max_iter: usize,
) -> Vec<Vec<f64>> {
    let k = init.len();
    let dim = init.first().map(|c| c.len()).unwrap_or(0);
    let mut centers = init;
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(&centers, p).0).collect();
        // revive empty clusters before the update step
        loop {
            let mut counts = vec![0usize; k];
            for &a in &next {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let mut far = (0usize, f64::NEG_INFINITY);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, &centers[next[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            centers[empty] = points[far.0].clone();
            next[far.0] = empty;
        }
        let fixpoint = next == assign;
        assign = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (sum, count)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            for (cv, sv) in c.iter_mut().zip(sum) {
                *cv = sv / *count as f64;
            }
        }
        if fixpoint {
            break;
        }
    }
    centers
}

const KMEANS_MAX_ITER: usize = 100;

/// k-means++ seeding followed by Lloyd iterations. Deterministic for a
/// given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InsufficientData("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(&centers, p).1).collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].clone());
    }
    Ok(kmeans_with_init(points, centers, KMEANS_MAX_ITER))
}

/// Sum of squared distances from each point to its nearest center.
pub fn kmeans_objective(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(centers, p).1).sum()
}

// ---------------------------------------------------------------------------
// Trees and the SPV model

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansTree {
    pub level1: Vec<Vec<f64>>,
    /// Leaf means in level-1-major order: all sub-cluster means of
    /// level-1 cluster 0 first, then cluster 1, and so on.
    pub leaves: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpvConfig {
    pub hog: HogParams,
    pub level1: usize,
    pub level2: usize,
    pub standardize: bool,
}

impl Default for SpvConfig {
    fn default() -> Self {
        SpvConfig {
            hog: HogParams::default(),
            level1: 5,
            level2: 10,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpvModel {
    pub hog: HogParams,
    pub pos: KMeansTree,
    pub neg: KMeansTree,
    /// Per-coordinate (mean, std) over the training set, present when
    /// the model was built with standardization on.
    pub stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn build_tree(descs: &[Vec<f64>], cfg: &SpvConfig, seed: u64) -> Result<KMeansTree> {
    let level1 = kmeans(descs, cfg.level1, seed)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.level1];
    for (i, d) in descs.iter().enumerate() {
        members[nearest(&level1, d).0].push(i);
    }
    let mut leaves = Vec::with_capacity(cfg.level1 * cfg.level2);
    for (c, idxs) in members.iter().enumerate() {
        let pts: Vec<Vec<f64>> = idxs.iter().map(|&i| descs[i].clone()).collect();
        let sub_seed = rng::derive2(seed, 0xC1, c as u64);
        if pts.len() >= cfg.level2 {
            leaves.extend(kmeans(&pts, cfg.level2, sub_seed)?);
        } else {
            // sparse cluster: keep what structure there is and pad the
            // remaining leaves with the level-1 mean so the projection
            // dimension never moves
            let mut subs = if pts.is_empty() {
                Vec::new()
            } else {
                kmeans(&pts, pts.len(), sub_seed)?
            };
            while subs.len() < cfg.level2 {
                subs.push(level1[c].clone());
            }
            leaves.extend(subs);
        }
    }
    Ok(KMeansTree { level1, leaves })
}

/// Build an SPV model from the primary dataset's positive and negative
/// patches. Requires at least level1 * level2 patches on each side so
/// both trees can fill their leaves with real structure.
pub fn build_spv_model(
    positives: &[Tensor],
    negatives: &[Tensor],
    cfg: &SpvConfig,
    seed: u64,
) -> Result<SpvModel> {
    let need = cfg.level1 * cfg.level2;
    if positives.len() < need || negatives.len() < need {
        return Err(Error::InsufficientData(format!(
            "spv build needs at least {need} positives and {need} negatives, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    let pos_descs: Vec<Vec<f64>> = positives
        .iter()
        .map(|p| hog_extract(p, &cfg.hog))
        .collect::<Result<_>>()?;
    let neg_descs: Vec<Vec<f64>> = negatives
        .iter()
        .map(|p| hog_extract(p, &cfg.hog))
        .collect::<Result<_>>()?;
    let pos = build_tree(&pos_descs, cfg, rng::derive(seed, stream::SPV_POS))?;
    let neg = build_tree(&neg_descs, cfg, rng::derive(seed, stream::SPV_NEG))?;
    let mut model = SpvModel {
        hog: cfg.hog.clone(),
        pos,
        neg,
        stats: None,
    };
    if cfg.standardize {
        let dim = model.dim();
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        let n = (pos_descs.len() + neg_descs.len()) as f64;
        for d in pos_descs.iter().chain(neg_descs.iter()) {
            let z = model.project_hog(d);
            for (i, v) in z.iter().enumerate() {
                mean[i] += v;
                m2[i] += v * v;
            }
        }
        let mut std = vec![0.0; dim];
        for i in 0..dim {
            mean[i] /= n;
            let var = (m2[i] / n - mean[i] * mean[i]).max(0.0);
            std[i] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        }
        model.stats = Some((mean, std));
    }
    Ok(model)
}

impl SpvModel {
    /// Projection dimension: leaves of both trees.
    pub fn dim(&self) -> usize {
        self.pos.leaves.len() + self.neg.leaves.len()
    }

    /// Raw projection of a HOG descriptor: Euclidean distance to every
    /// leaf mean, positive tree first in level-1-major order. All
    /// coordinates are non-negative; a descriptor equal to a leaf mean
    /// projects to exactly 0 at that coordinate.
    pub fn project_hog(&self, desc: &[f64]) -> Vec<f64> {
        self.pos
            .leaves
            .iter()
            .chain(self.neg.leaves.iter())
            .map(|leaf| sq_dist(leaf, desc).sqrt())
            .collect()
    }

    /// Raw projection of a patch.
    pub fn project(&self, patch: &Tensor) -> Result<Vec<f64>> {
        Ok(self.project_hog(&hog_extract(patch, &self.hog)?))
    }

    /// Projection as fed to the network: standardized when stats are
    /// present, raw otherwise.
    pub fn project_standardized(&self, patch: &Tensor) -> Result<Vec<f64>> {
        let mut z = self.project(patch)?;
        if let Some((mean, std)) = &self.stats {
            for (i, v) in z.iter_mut().enumerate() {
                *v = (*v - mean[i]) / std[i];
            }
        }
        Ok(z)
    }
}
