//! Restricted Boltzmann machine over (patch encoding, label bits).
//!
//! The energy couples a binary visible vector split into an image part x
//! and a label part y to one hidden layer:
//! E(x,y,h) = -x'Wxh h - x'bx - y'Wyh h - y'by - h'bh.
//! Hidden units integrate out in closed form, giving the unnormalized
//! log-likelihood (free energy) used to weight training samples: a
//! sample's weight is exp(F - max F), normalized to mean one over the
//! dataset. The partition constant cancels in that ratio, so it is never
//! computed.

use crate::error::Error;
use crate::nn::{sigmoid, softplus};
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Rbm {
    pub n_x: usize,
    pub n_y: usize,
    pub n_h: usize,
    /// Row-major [n_x, n_h].
    pub w_xh: Vec<f64>,
    /// Row-major [n_y, n_h].
    pub w_yh: Vec<f64>,
    pub b_x: Vec<f64>,
    pub b_y: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl Rbm {
    pub fn zeros(n_x: usize, n_y: usize, n_h: usize) -> Rbm {
        Rbm {
            n_x,
            n_y,
            n_h,
            w_xh: vec![0.0; n_x * n_h],
            w_yh: vec![0.0; n_y * n_h],
            b_x: vec![0.0; n_x],
            b_y: vec![0.0; n_y],
            b_h: vec![0.0; n_h],
        }
    }

    fn check_visible(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.n_x {
            return Err(Error::Shape {
                axis: 0,
                expected: self.n_x,
                got: x.len(),
                context: "rbm image part".into(),
            });
        }
        if y.len() != self.n_y {
            return Err(Error::Shape {
                axis: 0,
                expected: self.n_y,
                got: y.len(),
                context: "rbm label part".into(),
            });
        }
        Ok(())
    }

    /// Hidden pre-activation for unit i.
    fn hidden_input(&self, x: &[f64], y: &[f64], i: usize) -> f64 {
        let mut a = self.b_h[i];
        for (j, xv) in x.iter().enumerate() {
            a += xv * self.w_xh[j * self.n_h + i];
        }
        for (j, yv) in y.iter().enumerate() {
            a += yv * self.w_yh[j * self.n_h + i];
        }
        a
    }
}

/// Joint energy of a full configuration.
pub fn energy(rbm: &Rbm, x: &[f64], y: &[f64], h: &[f64]) -> Result<f64> {
    rbm.check_visible(x, y)?;
    if h.len() != rbm.n_h {
        return Err(Error::Shape {
            axis: 0,
            expected: rbm.n_h,
            got: h.len(),
            context: "rbm hidden vector".into(),
        });
    }
    let mut e = 0.0;
    for (j, xv) in x.iter().enumerate() {
        e -= xv * rbm.b_x[j];
        for (i, hv) in h.iter().enumerate() {
            e -= xv * rbm.w_xh[j * rbm.n_h + i] * hv;
        }
    }
    for (j, yv) in y.iter().enumerate() {
        e -= yv * rbm.b_y[j];
        for (i, hv) in h.iter().enumerate() {
            e -= yv * rbm.w_yh[j * rbm.n_h + i] * hv;
        }
    }
    for (i, hv) in h.iter().enumerate() {
        e -= hv * rbm.b_h[i];
    }
    Ok(e)
}

/// Unnormalized log-likelihood of a visible pair with hidden units
/// summed out:
/// F(x,y) = sum_i ln(1 + exp(bh_i + x'Wxh_i + y'Wyh_i)) + x'bx + y'by.
pub fn free_energy(rbm: &Rbm, x: &[f64], y: &[f64]) -> Result<f64> {
    rbm.check_visible(x, y)?;
    let mut f = 0.0;
    for i in 0..rbm.n_h {
        f += softplus(rbm.hidden_input(x, y, i));
    }
    for (xv, bv) in x.iter().zip(&rbm.b_x) {
        f += xv * bv;
    }
    for (yv, bv) in y.iter().zip(&rbm.b_y) {
        f += yv * bv;
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmConfig {
    pub n_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

impl Default for RbmConfig {
    fn default() -> Self {
        RbmConfig {
            n_hidden: 32,
            epochs: 30,
            learning_rate: 0.05,
            batch: 10,
        }
    }
}

/// One-step contrastive divergence over (x, y) pairs. Positive phase
/// hidden probabilities, one Gibbs step to a mean-field reconstruction,
/// gradient = positive minus negative visible-hidden correlations,
/// averaged per minibatch. Deterministic for a given seed.
pub fn cd_train(pairs: &[(Vec<f64>, Vec<f64>)], cfg: &RbmConfig, seed: u64) -> Result<Rbm> {
    let Some((x0, y0)) = pairs.first() else {
        return Err(Error::InsufficientData(
            "cd_train needs at least one sample".into(),
        ));
    };
    let (n_x, n_y, n_h) = (x0.len(), y0.len(), cfg.n_hidden);
    let mut rbm = Rbm::zeros(n_x, n_y, n_h);
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, rng::stream::RBM));
    for w in rbm.w_xh.iter_mut().chain(rbm.w_yh.iter_mut()) {
        *w = init_rng.gen_range(-0.01..=0.01);
    }
    for (x, y) in pairs {
        rbm.check_visible(x, y)?;
    }

    let lr = cfg.learning_rate;
    let batch = cfg.batch.max(1);
    let mut p_h = vec![0.0; n_h];
    let mut h_s = vec![0.0; n_h];
    let mut x_r = vec![0.0; n_x];
    let mut y_r = vec![0.0; n_y];
    let mut p_h2 = vec![0.0; n_h];
    for _epoch in 0..cfg.epochs {
        for chunk in pairs.chunks(batch) {
            let mut g_wxh = vec![0.0; n_x * n_h];
            let mut g_wyh = vec![0.0; n_y * n_h];
            let mut g_bx = vec![0.0; n_x];
            let mut g_by = vec![0.0; n_y];
            let mut g_bh = vec![0.0; n_h];
            for (x, y) in chunk {
                for i in 0..n_h {
                    p_h[i] = sigmoid(rbm.hidden_input(x, y, i));
                    h_s[i] = if init_rng.gen_range(0.0..1.0) < p_h[i] {
                        1.0
                    } else {
                        0.0
                    };
                }
                for j in 0..n_x {
                    let mut a = rbm.b_x[j];
                    for i in 0..n_h {
                        a += rbm.w_xh[j * n_h + i] * h_s[i];
                    }
                    x_r[j] = sigmoid(a);
                }
                for j in 0..n_y {
                    let mut a = rbm.b_y[j];
                    for i in 0..n_h {
                        a += rbm.w_yh[j * n_h + i] * h_s[i];
                    }
                    y_r[j] = sigmoid(a);
                }
                for i in 0..n_h {
                    p_h2[i] = sigmoid(rbm.hidden_input(&x_r, &y_r, i));
                }
                for j in 0..n_x {
                    for i in 0..n_h {
                        g_wxh[j * n_h + i] += x[j] * p_h[i] - x_r[j] * p_h2[i];
                    }
                    g_bx[j] += x[j] - x_r[j];
                }
                for j in 0..n_y {
                    for i in 0..n_h {
                        g_wyh[j * n_h + i] += y[j] * p_h[i] - y_r[j] * p_h2[i];
                    }
                    g_by[j] += y[j] - y_r[j];
                }
                for i in 0..n_h {
                    g_bh[i] += p_h[i] - p_h2[i];
                }
            }
            let scale = lr / chunk.len() as f64;
            for (w, g) in rbm.w_xh.iter_mut().zip(&g_wxh) {
                *w += scale * g;
            }
            for (w, g) in rbm.w_yh.iter_mut().zip(&g_wyh) {
                *w += scale * g;
            }
            for (b, g) in rbm.b_x.iter_mut().zip(&g_bx) {
                *b += scale * g;
            }
            for (b, g) in rbm.b_y.iter_mut().zip(&g_by) {
                *b += scale * g;
            }
            for (b, g) in rbm.b_h.iter_mut().zip(&g_bh) {
                *b += scale * g;
            }
        }
    }
    Ok(rbm)
}

/// Downsample a patch by block averaging and binarize at the median of
/// the downsampled values (strictly above the upper median reads as 1).
/// The result is the image part of the RBM's visible vector.
pub fn encode_visible(patch: &Tensor, down_h: usize, down_w: usize) -> Result<Vec<f64>> {
    let (c, h, w) = patch.dims3()?;
    if down_h == 0 || down_w == 0 || h % down_h != 0 || w % down_w != 0 {
        return Err(Error::Dimension(format!(
            "patch {h}x{w} does not downsample evenly to {down_h}x{down_w}"
        )));
    }
    let (bh, bw) = (h / down_h, w / down_w);
    let mut v = vec![0.0; down_h * down_w];
    for i in 0..down_h {
        for j in 0..down_w {
            let mut acc = 0.0;
            for ch in 0..c {
                for a in 0..bh {
                    for b in 0..bw {
                        acc += patch.at3(ch, i * bh + a, j * bw + b);
                    }
                }
            }
            v[i * down_w + j] = acc / (c * bh * bw) as f64;
        }
    }
    let mut sorted = v.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    Ok(v.into_iter()
        .map(|x| if x > median { 1.0 } else { 0.0 })
        .collect())
}

/// Per-sample importance weights derived from RBM free energies.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    /// (sample id, weight), in dataset order.
    pub entries: Vec<(String, f64)>,
}

impl ProbTable {
    pub fn weight(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, w)| *w)
    }

    /// Uniform table: weight one for every id.
    pub fn uniform(ids: &[String]) -> ProbTable {
        ProbTable {
            entries: ids.iter().map(|i| (i.clone(), 1.0)).collect(),
        }
    }
}

/// Weight each sample by exp(F - max F), normalized to mean one. The
/// shift makes the exponentials safe; the mean normalization pins the
/// weighted loss to the scale of the unweighted one.
pub fn build_prob_table(rbm: &Rbm, items: &[(String, Vec<f64>, Vec<f64>)]) -> Result<ProbTable> {
    if items.is_empty() {
        return Err(Error::InsufficientData(
            "prob table needs at least one sample".into(),
        ));
    }
    let mut f = Vec::with_capacity(items.len());
    for (_, x, y) in items {
        f.push(free_energy(rbm, x, y)?);
    }
    let shift = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NonFinite("rbm free energy".into()));
    }
    let raw: Vec<f64> = f.iter().map(|v| (v - shift).exp().max(1e-300)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ProbTable {
        entries: items
            .iter()
            .zip(&raw)
            .map(|((id, _, _), w)| (id.clone(), w / mean))
            .collect(),
    })
}
