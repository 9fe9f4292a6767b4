//! Deterministic synthetic multi-source data.
//!
//! Positives are stick-figure pedestrians whose attribute labels
//! causally shape pixels: the viewpoint skews the silhouette, a hat adds
//! a brim, a backpack adds a pack blob, riding bends the legs over
//! wheels, and so on. Negatives and background patches compose scene
//! elements (sky, road, buildings, trees, vehicles, traffic lights,
//! bare vertical/horizontal structure); poles and traffic lights share
//! the vertical structure of pedestrians on purpose, so the main task is
//! learnable but not trivial. Each source applies its own brightness and
//! noise offsets to emulate the distribution gap between datasets.
//!
//! Everything derives from one seed: each sample draws from its own
//! seeded stream, so regenerating with the same configuration is
//! bit-identical regardless of section sizes.

use crate::error::Error;
use crate::evalkit::GroundTruth;
use crate::rng::{self, stream};
use crate::taskcodec::{
    encode, Assignment, Source, TaskLayout, Viewpoint, MAIN_TASK, SCENE_ATTR_NAMES,
};
use crate::tensor::Tensor;
use crate::trainer::{MultiSourceDataset, Sample};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// Disjoint per-section seed-index bases; section sizes stay below the
// spacing so streams never collide.
const SECTION_SPACING: usize = 10_000;
const BASE_P_POS: usize = 0;
const BASE_P_NEG: usize = SECTION_SPACING;
const BASE_BA: usize = 2 * SECTION_SPACING;
const BASE_BB: usize = 3 * SECTION_SPACING;
const BASE_BC: usize = 4 * SECTION_SPACING;
const BASE_TEST_POS: usize = 5 * SECTION_SPACING;
const BASE_TEST_NEG: usize = 6 * SECTION_SPACING;
const BASE_TEST_SCENE: usize = 7 * SECTION_SPACING;
const BASE_MINE_SCENE: usize = 8 * SECTION_SPACING;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceAppearance {
    /// Added to every pixel before quantization.
    pub brightness: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendererParams {
    /// Limb thickness as a fraction of figure width.
    pub limb_thickness: f64,
    /// Torso width as a fraction of figure width.
    pub body_width: f64,
    /// Head radius as a fraction of figure height.
    pub head_radius: f64,
    /// Horizontal stride of profile-view legs, fraction of figure width.
    pub stride_spread: f64,
    /// Pole width as a fraction of patch width.
    pub pole_width: f64,
    /// Texture noise inside distractor elements.
    pub texture_noise: f64,
}

impl Default for RendererParams {
    fn default() -> Self {
        RendererParams {
            limb_thickness: 0.09,
            body_width: 0.30,
            head_radius: 0.085,
            stride_spread: 0.16,
            pole_width: 0.06,
            texture_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttrProbs {
    /// Pedestrian attribute probabilities, `PED_ATTR_NAMES` order.
    pub ped: [f64; 8],
    /// Scene element presence probabilities, `SCENE_ATTR_NAMES` order.
    pub scene: [f64; 8],
}

impl Default for AttrProbs {
    fn default() -> Self {
        AttrProbs {
            ped: [0.35, 0.5, 0.35, 0.3, 0.5, 0.25, 0.25, 0.4],
            scene: [0.5, 0.45, 0.4, 0.5, 0.35, 0.4, 0.45, 0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub p_pos: usize,
    pub p_neg: usize,
    /// Background sample counts for B^a, B^b, B^c.
    pub b_counts: [usize; 3],
    pub test_pos: usize,
    pub test_neg: usize,
    pub test_scene_count: usize,
    pub mining_scene_count: usize,
    pub scene_h: usize,
    pub scene_w: usize,
    pub max_peds_per_scene: usize,
    pub attr_probs: AttrProbs,
    /// Appearance per source, `Source::ALL` order.
    pub appearance: [SourceAppearance; 4],
    pub renderer: RendererParams,
    pub layout: TaskLayout,
    pub b_main_observed: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            patch_h: 64,
            patch_w: 32,
            p_pos: 160,
            p_neg: 160,
            b_counts: [80, 80, 80],
            test_pos: 120,
            test_neg: 120,
            test_scene_count: 12,
            mining_scene_count: 6,
            scene_h: 120,
            scene_w: 96,
            max_peds_per_scene: 2,
            attr_probs: AttrProbs::default(),
            appearance: [
                SourceAppearance {
                    brightness: 0.0,
                    noise: 0.02,
                },
                SourceAppearance {
                    brightness: 0.05,
                    noise: 0.03,
                },
                SourceAppearance {
                    brightness: -0.05,
                    noise: 0.04,
                },
                SourceAppearance {
                    brightness: 0.10,
                    noise: 0.025,
                },
            ],
            renderer: RendererParams::default(),
            layout: TaskLayout::default(),
            b_main_observed: true,
        }
    }
}

/// A full scene image with planted-pedestrian ground truth and the
/// scene-level attribute flags its source would carry.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub id: String,
    pub source: Source,
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
    /// Which scene kinds were drawn, `SCENE_ATTR_NAMES` order.
    pub present: [bool; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: MultiSourceDataset,
    /// Held-out labeled P-style patches for classification metrics.
    pub test: MultiSourceDataset,
    /// Pedestrian-source scenes for detection evaluation.
    pub test_scenes: Vec<SceneImage>,
    /// Background-source scenes for hard-negative mining.
    pub mining_scenes: Vec<SceneImage>,
}

// --- drawing ----------------------------------------------------------

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, base: f64) -> Canvas {
        Canvas {
            h,
            w,
            px: vec![base; h * w],
        }
    }

    fn set(&mut self, i: i64, j: i64, v: f64) {
        if i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w {
            self.px[i as usize * self.w + j as usize] = v;
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, v: f64) {
        let i0 = y.floor() as i64;
        let i1 = (y + h).ceil() as i64;
        let j0 = x.floor() as i64;
        let j1 = (x + w).ceil() as i64;
        for i in i0..i1 {
            for j in j0..j1 {
                let (cy, cx) = (i as f64 + 0.5, j as f64 + 0.5);
                if cx >= x && cx < x + w && cy >= y && cy < y + h {
                    self.set(i, j, v);
                }
            }
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, v: f64) {
        let i0 = (cy - r).floor() as i64;
        let i1 = (cy + r).ceil() as i64;
        let j0 = (cx - r).floor() as i64;
        let j1 = (cx + r).ceil() as i64;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                    self.set(i, j, v);
                }
            }
        }
    }

    fn ring(&mut self, cx: f64, cy: f64, r: f64, thickness: f64, v: f64) {
        let outer = r + thickness / 2.0;
        let inner = (r - thickness / 2.0).max(0.0);
        let i0 = (cy - outer).floor() as i64;
        let i1 = (cy + outer).ceil() as i64;
        let j0 = (cx - outer).floor() as i64;
        let j1 = (cx + outer).ceil() as i64;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                if d2 <= outer * outer && d2 >= inner * inner {
                    self.set(i, j, v);
                }
            }
        }
    }

    /// Thick segment: every pixel whose center lies within
    /// thickness/2 of the segment.
    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, thickness: f64, v: f64) {
        let half = thickness / 2.0;
        let i0 = (y0.min(y1) - half).floor() as i64;
        let i1 = (y0.max(y1) + half).ceil() as i64;
        let j0 = (x0.min(x1) - half).floor() as i64;
        let j1 = (x0.max(x1) + half).ceil() as i64;
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = dx * dx + dy * dy;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (x0 + t * dx, y0 + t * dy);
                if (px - qx).powi(2) + (py - qy).powi(2) <= half * half {
                    self.set(i, j, v);
                }
            }
        }
    }

    fn vertical_gradient(&mut self, x: f64, y: f64, w: f64, h: f64, top: f64, bottom: f64) {
        let i0 = y.floor().max(0.0) as usize;
        let i1 = ((y + h).ceil() as usize).min(self.h);
        let j0 = x.floor().max(0.0) as usize;
        let j1 = ((x + w).ceil() as usize).min(self.w);
        for i in i0..i1 {
            let t = if h > 1.0 { (i as f64 - y) / h } else { 0.0 };
            let v = top + (bottom - top) * t.clamp(0.0, 1.0);
            for j in j0..j1 {
                self.px[i * self.w + j] = v;
            }
        }
    }

    fn add_noise(&mut self, rng: &mut ChaCha8Rng, sigma: f64) {
        if sigma <= 0.0 {
            return;
        }
        for v in self.px.iter_mut() {
            // sum of uniforms: cheap, bounded, deterministic
            let n: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() / 3.0;
            *v += n * sigma * 1.73;
        }
    }

    fn brighten(&mut self, offset: f64) {
        for v in self.px.iter_mut() {
            *v += offset;
        }
    }

    /// Quantize to the 8-bit grid and wrap as a [1,h,w] tensor, so the
    /// in-memory dataset equals its on-disk round trip exactly.
    fn into_tensor(self) -> Tensor {
        let data = self
            .px
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Tensor::chw(1, self.h, self.w, data).unwrap()
    }
}

// --- pedestrian -------------------------------------------------------

/// Attribute switches for one rendered pedestrian, `PED_ATTR_NAMES`
/// order plus the viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedSpec {
    pub view: Viewpoint,
    pub attrs: [bool; 8],
}

fn sample_ped_spec(rng: &mut ChaCha8Rng, probs: &AttrProbs) -> PedSpec {
    let view = Viewpoint::from_index(rng.gen_range(0..4));
    let mut attrs = [false; 8];
    for (a, p) in attrs.iter_mut().zip(&probs.ped) {
        *a = rng.gen_bool(*p);
    }
    PedSpec { view, attrs }
}

const A_BACKPACK: usize = 0;
const A_TROUSERS: usize = 1;
const A_HAT: usize = 2;
const A_BAG: usize = 3;
const A_GENDER: usize = 4;
const A_OCCLUSION: usize = 5;
const A_RIDING: usize = 6;
const A_WHITE: usize = 7;

/// Draw one pedestrian into the region with top-left (x0, y0) and size
/// (rw, rh). Every attribute changes pixels; the viewpoint changes the
/// whole silhouette.
#[allow(clippy::too_many_arguments)]
fn draw_pedestrian(
    c: &mut Canvas,
    x0: f64,
    y0: f64,
    rw: f64,
    rh: f64,
    spec: &PedSpec,
    p: &RendererParams,
    rng: &mut ChaCha8Rng,
) {
    let cloth = if spec.attrs[A_WHITE] { 0.88 } else { 0.45 };
    let trouser = if spec.attrs[A_TROUSERS] { 0.15 } else { 0.58 };
    let skin = 0.72;
    let dark = 0.22;

    let cx = x0 + rw / 2.0 + rng.gen_range(-0.05..0.05) * rw;
    let head_r = p.head_radius * rh;
    let head_cy = y0 + 0.05 * rh + head_r;
    let neck_y = head_cy + head_r;
    let shoulder_y = neck_y + 0.02 * rh;
    let hip_y = y0 + 0.52 * rh;
    let ankle_y = y0 + 0.94 * rh;
    let limb = p.limb_thickness * rw;
    let body_w = p.body_width * rw;

    // profile direction: left view faces -x, right view faces +x
    let dir = match spec.view {
        Viewpoint::Left => -1.0,
        Viewpoint::Right => 1.0,
        _ => 0.0,
    };
    let profile = dir != 0.0;

    // backpack behind the torso, drawn first so the torso overlaps it
    if spec.attrs[A_BACKPACK] {
        if profile {
            c.disk(
                cx - dir * (body_w * 0.75),
                (shoulder_y + hip_y) / 2.0,
                body_w * 0.55,
                0.30,
            );
        } else if spec.view == Viewpoint::Back {
            c.rect(
                cx - body_w * 0.68,
                shoulder_y,
                body_w * 1.36,
                (hip_y - shoulder_y) * 0.8,
                0.30,
            );
        }
    }

    // torso
    let torso_w = if profile { body_w * 0.8 } else { body_w };
    c.rect(
        cx - torso_w / 2.0,
        shoulder_y,
        torso_w,
        hip_y - shoulder_y,
        cloth,
    );
    // front-view backpack shows as dark straps over the clothing
    if spec.attrs[A_BACKPACK] && spec.view == Viewpoint::Front {
        let dx = torso_w * 0.28;
        c.line(
            cx - dx,
            shoulder_y,
            cx - dx,
            hip_y - 0.05 * rh,
            limb * 0.6,
            dark,
        );
        c.line(
            cx + dx,
            shoulder_y,
            cx + dx,
            hip_y - 0.05 * rh,
            limb * 0.6,
            dark,
        );
    }

    // female silhouette: skirt flare below the hip and longer hair
    let mut leg_top_y = hip_y;
    if spec.attrs[A_GENDER] {
        let knee_y = hip_y + 0.14 * rh;
        c.line(
            cx - torso_w / 2.0,
            hip_y,
            cx - torso_w * 0.95,
            knee_y,
            limb,
            cloth,
        );
        c.line(
            cx + torso_w / 2.0,
            hip_y,
            cx + torso_w * 0.95,
            knee_y,
            limb,
            cloth,
        );
        c.rect(cx - torso_w * 0.95, knee_y - 1.0, torso_w * 1.9, 1.8, cloth);
        c.rect(
            cx - torso_w * 0.6,
            hip_y,
            torso_w * 1.2,
            knee_y - hip_y,
            cloth,
        );
        c.disk(cx - head_r * 0.9, neck_y, head_r * 0.5, dark);
        c.disk(cx + head_r * 0.9, neck_y, head_r * 0.5, dark);
        leg_top_y = knee_y;
    }

    // legs
    if spec.attrs[A_RIDING] {
        // bent legs over wheels
        let wheel_cy = y0 + 0.86 * rh;
        let wheel_r = 0.11 * rh;
        if profile {
            c.ring(cx - dir * 0.22 * rw, wheel_cy, wheel_r, 1.4, 0.15);
            c.ring(cx + dir * 0.26 * rw, wheel_cy, wheel_r, 1.4, 0.15);
            c.line(
                cx - dir * 0.22 * rw,
                wheel_cy,
                cx + dir * 0.26 * rw,
                wheel_cy,
                1.2,
                0.15,
            );
        } else {
            c.ring(cx, wheel_cy + 0.02 * rh, wheel_r, 1.4, 0.15);
        }
        let knee_x = cx + dir * 0.12 * rw + if profile { 0.0 } else { 0.10 * rw };
        let knee_y = y0 + 0.68 * rh;
        let pedal_y = y0 + 0.80 * rh;
        c.line(cx, leg_top_y, knee_x, knee_y, limb, trouser);
        c.line(knee_x, knee_y, cx + dir * 0.04 * rw, pedal_y, limb, trouser);
        if !profile {
            c.line(cx, leg_top_y, cx - 0.10 * rw, knee_y, limb, trouser);
            c.line(
                cx - 0.10 * rw,
                knee_y,
                cx - 0.02 * rw,
                pedal_y,
                limb,
                trouser,
            );
        }
    } else if profile {
        let stride = p.stride_spread * rw;
        let jitter = rng.gen_range(0.6..1.0);
        c.line(
            cx,
            leg_top_y,
            cx + dir * stride * jitter,
            ankle_y,
            limb,
            trouser,
        );
        c.line(
            cx,
            leg_top_y,
            cx - dir * stride * 0.75 * jitter,
            ankle_y,
            limb,
            trouser,
        );
    } else {
        let spread_top = 0.05 * rw;
        let spread_bot = 0.10 * rw + rng.gen_range(0.0..0.03) * rw;
        c.line(
            cx - spread_top,
            leg_top_y,
            cx - spread_bot,
            ankle_y,
            limb,
            trouser,
        );
        c.line(
            cx + spread_top,
            leg_top_y,
            cx + spread_bot,
            ankle_y,
            limb,
            trouser,
        );
    }

    // arms
    if profile {
        c.line(
            cx + dir * torso_w * 0.2,
            shoulder_y + 0.02 * rh,
            cx + dir * torso_w * 0.5,
            hip_y,
            limb * 0.9,
            cloth,
        );
    } else {
        c.line(
            cx - torso_w / 2.0,
            shoulder_y + 0.01 * rh,
            cx - torso_w * 0.72,
            hip_y,
            limb * 0.9,
            cloth,
        );
        c.line(
            cx + torso_w / 2.0,
            shoulder_y + 0.01 * rh,
            cx + torso_w * 0.72,
            hip_y,
            limb * 0.9,
            cloth,
        );
    }

    // head over everything so far
    let head_cx = cx + dir * 0.04 * rw;
    c.disk(head_cx, head_cy, head_r, skin);
    match spec.view {
        Viewpoint::Front => {
            c.disk(head_cx, head_cy - head_r * 0.15, head_r * 0.45, 0.95);
        }
        Viewpoint::Back => {
            c.disk(head_cx, head_cy - head_r * 0.35, head_r * 0.8, dark);
        }
        _ => {
            // nose bump marks the facing side
            c.disk(head_cx + dir * head_r, head_cy, head_r * 0.35, skin);
        }
    }
    if spec.attrs[A_HAT] {
        let brim_y = head_cy - head_r * 0.75;
        c.line(
            head_cx - head_r * 1.6,
            brim_y,
            head_cx + head_r * 1.6,
            brim_y,
            1.6,
            dark,
        );
        c.rect(
            head_cx - head_r * 0.9,
            brim_y - head_r * 0.9,
            head_r * 1.8,
            head_r * 0.9,
            dark,
        );
    }

    // hand bag at hip level
    if spec.attrs[A_BAG] {
        let side = if profile { dir } else { 1.0 };
        let bag_x = cx + side * torso_w * 0.8;
        let bag_y = hip_y + 0.07 * rh;
        c.line(
            cx + side * torso_w * 0.4,
            shoulder_y,
            bag_x,
            bag_y,
            limb * 0.5,
            dark,
        );
        c.rect(bag_x - 0.06 * rw, bag_y, 0.12 * rw, 0.08 * rh, dark);
    }

    // occluder covers the lower third last
    if spec.attrs[A_OCCLUSION] {
        let occ_y = y0 + 0.66 * rh;
        c.rect(x0, occ_y, rw, y0 + rh - occ_y, 0.35);
        c.rect(x0, occ_y, rw, 1.5, 0.25);
    }
}

// --- scene elements ---------------------------------------------------

fn scene_index(kind: &str) -> usize {
    SCENE_ATTR_NAMES.iter().position(|k| *k == kind).unwrap()
}

/// Task index a scene kind occupies under a layout.
pub fn scene_task_index(layout: &TaskLayout, kind: &str) -> usize {
    if let Some(i) = layout.shared.iter().position(|s| s == kind) {
        10 + i
    } else if let Some(i) = layout.unshared.iter().position(|s| s == kind) {
        14 + i
    } else {
        panic!("unknown scene kind {kind}")
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_scene_kind(
    c: &mut Canvas,
    kind: usize,
    x0: f64,
    y0: f64,
    rw: f64,
    rh: f64,
    p: &RendererParams,
    rng: &mut ChaCha8Rng,
) {
    match SCENE_ATTR_NAMES[kind] {
        "sky" => {
            c.vertical_gradient(x0, y0, rw, rh, 0.85, 0.72);
        }
        "road" => {
            c.vertical_gradient(x0, y0, rw, rh, 0.30, 0.24);
            let lane_y = y0 + rh * rng.gen_range(0.35..0.65);
            c.line(x0, lane_y + 1.5, x0 + rw, lane_y - 1.5, 1.6, 0.78);
        }
        "tree" => {
            let tx = x0 + rw * rng.gen_range(0.2..0.8);
            let trunk_w = (0.07 * rw).max(1.8);
            c.line(tx, y0 + 0.32 * rh, tx, y0 + rh, trunk_w, 0.18);
            for _ in 0..22 {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.0..0.22 * rh);
                c.disk(
                    tx + r * a.cos(),
                    y0 + 0.22 * rh + 0.6 * r * a.sin(),
                    rng.gen_range(1.0..2.4),
                    0.3 + rng.gen_range(-0.08..0.08),
                );
            }
        }
        "building" => {
            let bw = rw * rng.gen_range(0.55..0.9);
            let bh = rh * rng.gen_range(0.6..0.95);
            let bx = x0 + rng.gen_range(0.0..(rw - bw).max(0.01));
            let by = y0 + rh - bh;
            c.rect(bx, by, bw, bh, 0.55);
            let cols = 2 + (bw / 9.0) as usize;
            let rows = 2 + (bh / 12.0) as usize;
            for r in 0..rows {
                for col in 0..cols {
                    let wx = bx + bw * (col as f64 + 0.3) / cols as f64;
                    let wy = by + bh * (r as f64 + 0.25) / rows as f64;
                    c.rect(
                        wx,
                        wy,
                        bw / cols as f64 * 0.4,
                        bh / rows as f64 * 0.45,
                        0.28,
                    );
                }
            }
        }
        "vehicle" => {
            let vw = rw * rng.gen_range(0.55..0.85);
            let vh = (vw * 0.45).min(rh * 0.5);
            let vx = x0 + rng.gen_range(0.0..(rw - vw).max(0.01));
            let vy = y0 + rh - vh * 1.25;
            c.rect(vx, vy + vh * 0.35, vw, vh * 0.65, 0.32);
            c.rect(vx + vw * 0.2, vy, vw * 0.55, vh * 0.45, 0.38);
            c.rect(vx + vw * 0.26, vy + vh * 0.08, vw * 0.18, vh * 0.3, 0.18);
            c.rect(vx + vw * 0.5, vy + vh * 0.08, vw * 0.18, vh * 0.3, 0.18);
            c.disk(vx + vw * 0.2, vy + vh, vh * 0.22, 0.10);
            c.disk(vx + vw * 0.8, vy + vh, vh * 0.22, 0.10);
        }
        "traffic-light" => {
            let px_ = x0 + rw * rng.gen_range(0.25..0.75);
            let pole_w = (p.pole_width * rw).max(1.5);
            c.line(px_, y0, px_, y0 + rh, pole_w, 0.20);
            let box_w = (0.16 * rw).max(4.0);
            let box_h = (0.26 * rh).max(9.0);
            let bx = px_ - box_w / 2.0;
            let by = y0 + 0.04 * rh;
            c.rect(bx, by, box_w, box_h, 0.15);
            for (k, v) in [0.95, 0.75, 0.55].iter().enumerate() {
                c.disk(px_, by + box_h * (k as f64 + 0.5) / 3.0, box_w * 0.28, *v);
            }
        }
        "vertical" => {
            for _ in 0..rng.gen_range(1..=3) {
                let vx = x0 + rw * rng.gen_range(0.1..0.9);
                let width = (p.pole_width * rw).max(1.4) * rng.gen_range(0.8..1.6);
                let value = if rng.gen_bool(0.7) { 0.22 } else { 0.8 };
                c.line(vx, y0, vx, y0 + rh, width, value);
            }
        }
        "horizontal" => {
            for _ in 0..rng.gen_range(2..=3) {
                let hy = y0 + rh * rng.gen_range(0.15..0.9);
                let thickness = rng.gen_range(1.4..2.6);
                let value = if rng.gen_bool(0.6) { 0.26 } else { 0.75 };
                c.line(x0, hy, x0 + rw, hy, thickness, value);
            }
        }
        other => panic!("unknown scene kind {other}"),
    }
}

/// Compose the given scene kinds into a canvas region. Band kinds (sky,
/// road) occupy their natural strips; everything else lands in the
/// middle ground.
#[allow(clippy::too_many_arguments)]
fn compose_scene(
    c: &mut Canvas,
    present: &[bool; 8],
    x0: f64,
    y0: f64,
    rw: f64,
    rh: f64,
    p: &RendererParams,
    rng: &mut ChaCha8Rng,
) {
    let sky = scene_index("sky");
    let road = scene_index("road");
    if present[sky] {
        draw_scene_kind(c, sky, x0, y0, rw, rh * 0.35, p, rng);
    }
    if present[road] {
        draw_scene_kind(c, road, x0, y0 + rh * 0.72, rw, rh * 0.28, p, rng);
    }
    let mid_y = y0 + rh * 0.18;
    let mid_h = rh * 0.64;
    for kind in 0..8 {
        if kind == sky || kind == road || !present[kind] {
            continue;
        }
        draw_scene_kind(c, kind, x0, mid_y, rw, mid_h, p, rng);
    }
}

fn sample_scene_presence(rng: &mut ChaCha8Rng, probs: &AttrProbs) -> [bool; 8] {
    let mut present = [false; 8];
    for (slot, p) in present.iter_mut().zip(&probs.scene) {
        *slot = rng.gen_bool(*p);
    }
    present
}

// --- patch generators ---------------------------------------------------

fn ped_assignment(spec: &PedSpec) -> Assignment {
    let mut a = Assignment::new()
        .set_binary(MAIN_TASK, true)
        .set_view(spec.view);
    for (i, &on) in spec.attrs.iter().enumerate() {
        a = a.set_binary(1 + i, on);
    }
    a
}

fn render_positive_patch(
    cfg: &SyntheticConfig,
    spec: &PedSpec,
    app: &SourceAppearance,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (h, w) = (cfg.patch_h, cfg.patch_w);
    let mut c = Canvas::new(h, w, 0.5);
    c.vertical_gradient(
        0.0,
        0.0,
        w as f64,
        h as f64,
        rng.gen_range(0.45..0.62),
        rng.gen_range(0.3..0.5),
    );
    // occasional pole behind the figure keeps vertical structure from
    // being a pedestrian giveaway
    if rng.gen_bool(0.3) {
        let px_ = rng.gen_range(0.1..0.9) * w as f64;
        c.line(
            px_,
            0.0,
            px_,
            h as f64,
            (cfg.renderer.pole_width * w as f64).max(1.4),
            0.3,
        );
    }
    draw_pedestrian(
        &mut c,
        0.0,
        0.0,
        w as f64,
        h as f64,
        spec,
        &cfg.renderer,
        rng,
    );
    c.brighten(app.brightness);
    c.add_noise(rng, app.noise);
    c.into_tensor()
}

fn render_background_patch(
    cfg: &SyntheticConfig,
    present: &[bool; 8],
    app: &SourceAppearance,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (h, w) = (cfg.patch_h, cfg.patch_w);
    let mut c = Canvas::new(h, w, 0.5);
    c.vertical_gradient(
        0.0,
        0.0,
        w as f64,
        h as f64,
        rng.gen_range(0.42..0.6),
        rng.gen_range(0.3..0.5),
    );
    compose_scene(
        &mut c,
        present,
        0.0,
        0.0,
        w as f64,
        h as f64,
        &cfg.renderer,
        rng,
    );
    c.brighten(app.brightness);
    c.add_noise(rng, app.noise);
    c.into_tensor()
}

fn b_assignment(
    layout: &TaskLayout,
    source: Source,
    present: &[bool; 8],
    b_main_observed: bool,
) -> Result<crate::taskcodec::LabelVector> {
    let mut a = Assignment::new();
    for task in layout.observed_tasks(source, b_main_observed) {
        if task == MAIN_TASK {
            continue;
        }
        let kind = layout.task_name(task).to_string();
        a = a.set_binary(task, present[scene_index(&kind)]);
    }
    encode(layout, source, &a, b_main_observed)
}

fn render_scene(
    cfg: &SyntheticConfig,
    id: &str,
    source: Source,
    min_peds: usize,
    max_peds: usize,
    rng: &mut ChaCha8Rng,
) -> SceneImage {
    let (h, w) = (cfg.scene_h, cfg.scene_w);
    let app = cfg.appearance[Source::ALL.iter().position(|s| *s == source).unwrap()];
    let mut c = Canvas::new(h, w, 0.5);
    let mut present = sample_scene_presence(rng, &cfg.attr_probs);
    // scenes always have ground and sky context
    present[scene_index("sky")] = true;
    present[scene_index("road")] = true;
    c.vertical_gradient(0.0, 0.0, w as f64, h as f64, 0.6, 0.4);
    compose_scene(
        &mut c,
        &present,
        0.0,
        0.0,
        w as f64,
        h as f64,
        &cfg.renderer,
        rng,
    );

    let n_peds = if max_peds > min_peds {
        rng.gen_range(min_peds..=max_peds)
    } else {
        min_peds
    };
    let (ph, pw) = (cfg.patch_h as f64, cfg.patch_w as f64);
    let mut gts: Vec<GroundTruth> = Vec::new();
    for _ in 0..n_peds {
        let mut placed = None;
        for _try in 0..12 {
            let x = rng.gen_range(1.0..(w as f64 - pw - 1.0));
            let y = rng.gen_range(2.0..(h as f64 - ph - 2.0));
            let cand = crate::evalkit::BBox::new(x, y, pw, ph);
            if gts.iter().all(|g| g.bbox.iou(&cand) <= 0.25) {
                placed = Some(cand);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let mut spec = sample_ped_spec(rng, &cfg.attr_probs);
        // planted pedestrians stay fully visible so every ground truth
        // participates in matching
        spec.attrs[A_OCCLUSION] = false;
        draw_pedestrian(&mut c, bbox.x, bbox.y, pw, ph, &spec, &cfg.renderer, rng);
        gts.push(GroundTruth {
            image_id: id.to_string(),
            bbox,
            visibility: 1.0,
        });
    }
    c.brighten(app.brightness);
    c.add_noise(rng, app.noise);
    SceneImage {
        id: id.to_string(),
        source,
        image: c.into_tensor(),
        gts,
        present,
    }
}

// --- top level ----------------------------------------------------------

fn section_rng(seed: u64, base: usize, i: usize) -> ChaCha8Rng {
    rng::rng_for2(seed, stream::DATAGEN, (base + i) as u64)
}

/// Generate the full synthetic benchmark: multi-source training patches,
/// held-out test patches, detection scenes and mining scenes.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    let total = cfg.p_pos + cfg.p_neg + cfg.b_counts.iter().sum::<usize>();
    if total == 0 {
        return Err(Error::InsufficientData(
            "configuration generates zero training samples".into(),
        ));
    }
    for (name, count) in [
        ("p_pos", cfg.p_pos),
        ("p_neg", cfg.p_neg),
        ("b_a", cfg.b_counts[0]),
        ("b_b", cfg.b_counts[1]),
        ("b_c", cfg.b_counts[2]),
        ("test_pos", cfg.test_pos),
        ("test_neg", cfg.test_neg),
        ("test_scenes", cfg.test_scene_count),
        ("mining_scenes", cfg.mining_scene_count),
    ] {
        if count >= SECTION_SPACING {
            return Err(Error::Config(format!(
                "{name} = {count} exceeds the per-section limit {SECTION_SPACING}"
            )));
        }
    }
    if cfg.scene_h < cfg.patch_h + 6 || cfg.scene_w < cfg.patch_w + 4 {
        return Err(Error::Config(format!(
            "scene {}x{} too small for {}x{} plants",
            cfg.scene_h, cfg.scene_w, cfg.patch_h, cfg.patch_w
        )));
    }

    let p_app = cfg.appearance[0];
    let mut train = MultiSourceDataset::new(cfg.patch_h, cfg.patch_w);

    for i in 0..cfg.p_pos {
        let mut rng = section_rng(seed, BASE_P_POS, i);
        let spec = sample_ped_spec(&mut rng, &cfg.attr_probs);
        let label = encode(
            &cfg.layout,
            Source::P,
            &ped_assignment(&spec),
            cfg.b_main_observed,
        )?;
        train.samples.push(Sample {
            id: format!("p_pos_{i:05}"),
            patch: render_positive_patch(cfg, &spec, &p_app, &mut rng),
            source: Source::P,
            label,
            z: None,
        });
    }
    for i in 0..cfg.p_neg {
        let mut rng = section_rng(seed, BASE_P_NEG, i);
        let present = sample_scene_presence(&mut rng, &cfg.attr_probs);
        let label = encode(
            &cfg.layout,
            Source::P,
            &Assignment::new().set_binary(MAIN_TASK, false),
            cfg.b_main_observed,
        )?;
        train.samples.push(Sample {
            id: format!("p_neg_{i:05}"),
            patch: render_background_patch(cfg, &present, &p_app, &mut rng),
            source: Source::P,
            label,
            z: None,
        });
    }
    for (s, (source, base)) in [
        (Source::Ba, BASE_BA),
        (Source::Bb, BASE_BB),
        (Source::Bc, BASE_BC),
    ]
    .into_iter()
    .enumerate()
    {
        let app = cfg.appearance[1 + s];
        for i in 0..cfg.b_counts[s] {
            let mut rng = section_rng(seed, base, i);
            let present = sample_scene_presence(&mut rng, &cfg.attr_probs);
            let label = b_assignment(&cfg.layout, source, &present, cfg.b_main_observed)?;
            train.samples.push(Sample {
                id: format!("{}_{i:05}", source.tag().to_lowercase()),
                patch: render_background_patch(cfg, &present, &app, &mut rng),
                source,
                label,
                z: None,
            });
        }
    }

    let mut test = MultiSourceDataset::new(cfg.patch_h, cfg.patch_w);
    for i in 0..cfg.test_pos {
        let mut rng = section_rng(seed, BASE_TEST_POS, i);
        let spec = sample_ped_spec(&mut rng, &cfg.attr_probs);
        let label = encode(
            &cfg.layout,
            Source::P,
            &ped_assignment(&spec),
            cfg.b_main_observed,
        )?;
        test.samples.push(Sample {
            id: format!("t_pos_{i:05}"),
            patch: render_positive_patch(cfg, &spec, &p_app, &mut rng),
            source: Source::P,
            label,
            z: None,
        });
    }
    for i in 0..cfg.test_neg {
        let mut rng = section_rng(seed, BASE_TEST_NEG, i);
        let present = sample_scene_presence(&mut rng, &cfg.attr_probs);
        let label = encode(
            &cfg.layout,
            Source::P,
            &Assignment::new().set_binary(MAIN_TASK, false),
            cfg.b_main_observed,
        )?;
        test.samples.push(Sample {
            id: format!("t_neg_{i:05}"),
            patch: render_background_patch(cfg, &present, &p_app, &mut rng),
            source: Source::P,
            label,
            z: None,
        });
    }

    let mut test_scenes = Vec::new();
    for i in 0..cfg.test_scene_count {
        let mut rng = section_rng(seed, BASE_TEST_SCENE, i);
        test_scenes.push(render_scene(
            cfg,
            &format!("scene_test_{i:04}"),
            Source::P,
            1,
            cfg.max_peds_per_scene.max(1),
            &mut rng,
        ));
    }
    let mut mining_scenes = Vec::new();
    for i in 0..cfg.mining_scene_count {
        let mut rng = section_rng(seed, BASE_MINE_SCENE, i);
        let source = [Source::Ba, Source::Bb, Source::Bc][i % 3];
        mining_scenes.push(render_scene(
            cfg,
            &format!("scene_mine_{i:04}"),
            source,
            0,
            1,
            &mut rng,
        ));
    }

    train.validate(&cfg.layout)?;
    test.validate(&cfg.layout)?;
    Ok(SyntheticData {
        train,
        test,
        test_scenes,
        mining_scenes,
    })
}

/// Scene-kind label a mined patch from `scene` would carry. Exposed for
/// the mining path.
pub fn scene_label_for_mining(
    layout: &TaskLayout,
    scene: &SceneImage,
    attr_mode: bool,
) -> Result<crate::taskcodec::LabelVector> {
    if attr_mode && scene.source != Source::P {
        b_assignment(layout, scene.source, &scene.present, true)
    } else {
        let mut lv = crate::taskcodec::LabelVector::empty();
        lv.mask[0] = true;
        Ok(lv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spv::{hog_extract, HogParams};
    use crate::taskcodec::PED_ATTR_NAMES;

    fn tiny_cfg() -> SyntheticConfig {
        SyntheticConfig {
            p_pos: 10,
            p_neg: 10,
            b_counts: [4, 4, 4],
            test_pos: 6,
            test_neg: 6,
            test_scene_count: 2,
            mining_scene_count: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        let a = generate(&cfg, 11).unwrap();
        let b = generate(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_masks_follow_sources() {
        let cfg = tiny_cfg();
        let data = generate(&cfg, 3).unwrap();
        assert_eq!(data.train.counts(), [20, 4, 4, 4]);
        assert_eq!(data.test.counts(), [12, 0, 0, 0]);
        for s in &data.train.samples {
            let want = cfg.layout.mask_pattern(s.source, true);
            assert_eq!(s.label.mask, want, "sample {}", s.id);
        }
        assert_eq!(data.test_scenes.len(), 2);
        assert_eq!(data.mining_scenes.len(), 2);
    }

    #[test]
    fn p_only_config_observes_bits_zero_through_ten() {
        let cfg = SyntheticConfig {
            b_counts: [0, 0, 0],
            ..tiny_cfg()
        };
        let data = generate(&cfg, 5).unwrap();
        for s in &data.train.samples {
            for bit in 0..19 {
                assert_eq!(s.label.mask[bit], bit <= 10, "sample {} bit {bit}", s.id);
            }
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        let cfg = SyntheticConfig {
            p_pos: 0,
            p_neg: 0,
            b_counts: [0, 0, 0],
            ..SyntheticConfig::default()
        };
        assert!(generate(&cfg, 1).is_err());
    }

    #[test]
    fn patches_are_quantized_to_the_8bit_grid() {
        let data = generate(&tiny_cfg(), 7).unwrap();
        for s in data.train.samples.iter().chain(&data.test.samples) {
            for &v in s.patch.data() {
                assert!((0.0..=1.0).contains(&v));
                let q = (v * 255.0).round() / 255.0;
                assert_eq!(q, v);
            }
        }
    }

    #[test]
    fn every_attribute_flip_changes_pixels() {
        let cfg = SyntheticConfig::default();
        let render = |spec: &PedSpec| {
            let mut rng = crate::rng::rng_for(99, 103);
            render_positive_patch(&cfg, spec, &cfg.appearance[0], &mut rng)
        };
        let base = PedSpec {
            view: Viewpoint::Front,
            attrs: [false; 8],
        };
        let base_patch = render(&base);
        for a in 0..8 {
            let mut spec = base;
            spec.attrs[a] = true;
            assert_ne!(
                render(&spec).data(),
                base_patch.data(),
                "attribute {} left the pixels unchanged",
                PED_ATTR_NAMES[a]
            );
        }
        for v in 1..4 {
            let spec = PedSpec {
                view: Viewpoint::from_index(v),
                attrs: [false; 8],
            };
            assert_ne!(render(&spec).data(), base_patch.data(), "viewpoint {v}");
        }
    }

    #[test]
    fn white_cloth_brightens_the_torso() {
        let cfg = SyntheticConfig::default();
        let torso_mean = |spec: &PedSpec| {
            let mut rng = crate::rng::rng_for(42, 104);
            let p = render_positive_patch(&cfg, spec, &cfg.appearance[0], &mut rng);
            let mut acc = 0.0;
            let mut n = 0.0;
            // central torso region
            for i in 18..32 {
                for j in 12..20 {
                    acc += p.at3(0, i, j);
                    n += 1.0;
                }
            }
            acc / n
        };
        let mut white = PedSpec {
            view: Viewpoint::Front,
            attrs: [false; 8],
        };
        white.attrs[A_WHITE] = true;
        let plain = PedSpec {
            view: Viewpoint::Front,
            attrs: [false; 8],
        };
        assert!(torso_mean(&white) > torso_mean(&plain) + 0.2);
    }

    #[test]
    fn scene_ground_truth_is_in_bounds_and_disjoint() {
        let data = generate(&SyntheticConfig::default(), 13).unwrap();
        let mut total = 0;
        for scene in data.test_scenes.iter().chain(&data.mining_scenes) {
            let (_, h, w) = scene.image.dims3().unwrap();
            for g in &scene.gts {
                total += 1;
                assert!(g.bbox.x >= 0.0 && g.bbox.y >= 0.0);
                assert!(g.bbox.x + g.bbox.w <= w as f64);
                assert!(g.bbox.y + g.bbox.h <= h as f64);
                assert_eq!(g.bbox.w, 32.0);
                assert_eq!(g.bbox.h, 64.0);
                assert_eq!(g.image_id, scene.id);
            }
            for (i, a) in scene.gts.iter().enumerate() {
                for b in &scene.gts[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= 0.25);
                }
            }
        }
        // every test scene plants at least one pedestrian by construction
        assert!(total >= data.test_scenes.len());
    }

    #[test]
    fn mining_scene_labels_follow_mode() {
        let layout = TaskLayout::default();
        let data = generate(&tiny_cfg(), 17).unwrap();
        let scene = &data.mining_scenes[0];
        let neg = scene_label_for_mining(&layout, scene, false).unwrap();
        assert!(neg.mask[0] && !neg.bits[0]);
        assert_eq!(neg.mask.iter().filter(|&&m| m).count(), 1);
        let attr = scene_label_for_mining(&layout, scene, true).unwrap();
        assert_eq!(attr.mask, layout.mask_pattern(scene.source, true));
        for (kind, &name) in SCENE_ATTR_NAMES.iter().enumerate() {
            let task = scene_task_index(&layout, name);
            if layout.mask_pattern(scene.source, true)[layout.task_bits(task).start] {
                assert_eq!(
                    attr.bits[layout.task_bits(task).start],
                    scene.present[kind],
                    "kind {name}"
                );
            }
        }
    }

    /// Held-out linear probe: HOG features + logistic regression must
    /// separate positives from negatives well above chance, proving the
    /// generator yields learnable structure.
    #[test]
    fn hog_logistic_probe_beats_80_percent() {
        let cfg = SyntheticConfig {
            p_pos: 80,
            p_neg: 80,
            b_counts: [0, 0, 0],
            test_pos: 40,
            test_neg: 40,
            test_scene_count: 0,
            mining_scene_count: 0,
            ..SyntheticConfig::default()
        };
        let data = generate(&cfg, 23).unwrap();
        let hog = HogParams::default();
        let feats = |ds: &MultiSourceDataset| -> Vec<(Vec<f64>, f64)> {
            ds.samples
                .iter()
                .map(|s| {
                    (
                        hog_extract(&s.patch, &hog).unwrap(),
                        if s.label.bits[0] { 1.0 } else { 0.0 },
                    )
                })
                .collect()
        };
        let train = feats(&data.train);
        let test = feats(&data.test);
        let dim = train[0].0.len();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let lr = 0.5;
        for _epoch in 0..40 {
            for (x, y) in &train {
                let t: f64 = b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                let p = 1.0 / (1.0 + (-t).exp());
                let g = p - y;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi -= lr * g * xi;
                }
                b -= lr * g;
            }
        }
        let mut correct = 0;
        for (x, y) in &test {
            let t: f64 = b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
            let pred = if t > 0.0 { 1.0 } else { 0.0 };
            if pred == *y {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.8, "held-out probe accuracy {acc}");
    }
}
