//! On-disk formats.
//!
//! Four artifact families, all byte-deterministic given their inputs:
//!
//! * RAW8 patches: one ASCII dimension header line, then the 8-bit
//!   grayscale raster. Values map to [0,1] as byte/255, which round-trips
//!   exactly because the generator quantizes to the same grid.
//! * Dataset trees: a TSV manifest (relative patch path, source tag,
//!   19-char label over {0,1,x}) plus one RAW8 file per patch. Scene
//!   trees store full images with ground-truth boxes and scene-kind
//!   presence flags.
//! * Configs: flat `key=value` text with `#` comments; snapshots are
//!   written in sorted key order.
//! * Checkpoints: magic + version, a string meta section, and named
//!   f64 arrays (name, rank, extents, row-major little-endian values)
//!   covering the network, the projection model, the RBM and the task
//!   coefficients.

use crate::datagen::SceneImage;
use crate::error::Error;
use crate::evalkit::{read_ground_truth, write_ground_truth, GroundTruth};
use crate::model::{Geometry, TaCnnModel};
use crate::rbm::Rbm;
use crate::spv::{HogParams, KMeansTree, SpvModel};
use crate::taskcodec::{Coeffs, LabelVector, Source, NUM_TASKS};
use crate::tensor::Tensor;
use crate::trainer::{MultiSourceDataset, Sample};
use crate::Result;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// --- RAW8 patches -----------------------------------------------------

/// Encode a [c,h,w] tensor as the RAW8 byte stream.
pub fn encode_patch(patch: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = patch.dims3()?;
    let mut out = format!("RAW8 {c} {h} {w}\n").into_bytes();
    out.reserve(c * h * w);
    for &v in patch.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_patch(path: &Path, patch: &Tensor) -> Result<()> {
    std::fs::write(path, encode_patch(patch)?).map_err(|e| Error::io(path.display().to_string(), e))
}

fn patch_format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Decode a RAW8 byte stream. `path` is only used in error messages.
pub fn decode_patch(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| patch_format_err(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| patch_format_err(path, 1, "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "RAW8" {
        return Err(patch_format_err(
            path,
            1,
            format!("expected \"RAW8 c h w\", got {header:?}"),
        ));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| patch_format_err(path, 1, format!("bad dimension {f:?}")))
        })
        .collect::<Result<_>>()?;
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let expected = c * h * w;
    let raster = &bytes[nl + 1..];
    if raster.len() != expected {
        return Err(patch_format_err(
            path,
            2,
            format!(
                "raster holds {} bytes, header promises {expected}",
                raster.len()
            ),
        ));
    }
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::chw(c, h, w, data)
}

pub fn read_patch(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_patch(&bytes, path)
}

// --- dataset trees ----------------------------------------------------

const DATASET_MAGIC: &str = "TACNDATA";
const DATASET_VERSION: u32 = 1;
const SCENE_MAGIC: &str = "TACNSCN";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the dataset as `manifest.tsv` plus `patches/<id>.raw`. The
/// optional per-sample projection `z` is derived state and is not
/// persisted; loads return it empty.
pub fn save_dataset(dir: &Path, ds: &MultiSourceDataset) -> Result<()> {
    create_dir(dir)?;
    create_dir(&dir.join("patches"))?;
    let mut manifest = format!(
        "{DATASET_MAGIC}\t{DATASET_VERSION}\t1\t{}\t{}\n",
        ds.patch_h, ds.patch_w
    );
    for s in &ds.samples {
        let rel = format!("patches/{}.raw", s.id);
        write_patch(&dir.join(&rel), &s.patch)?;
        let _ = writeln!(
            manifest,
            "{rel}\t{}\t{}",
            s.source.tag(),
            s.label.to_label_string()
        );
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn load_dataset(dir: &Path) -> Result<MultiSourceDataset> {
    let mpath = dir.join("manifest.tsv");
    let text =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| manifest_err(&mpath, 1, "empty manifest"))?;
    let hf: Vec<&str> = header.split('\t').collect();
    if hf.len() != 5 || hf[0] != DATASET_MAGIC {
        return Err(manifest_err(&mpath, 1, "bad dataset header"));
    }
    if hf[1].parse::<u32>().ok() != Some(DATASET_VERSION) {
        return Err(manifest_err(
            &mpath,
            1,
            format!("unsupported version {}", hf[1]),
        ));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| manifest_err(&mpath, 1, format!("bad dimension {s:?}")))
    };
    let channels = parse_dim(hf[2])?;
    if channels != 1 {
        return Err(manifest_err(
            &mpath,
            1,
            "only single-channel datasets supported",
        ));
    }
    let mut ds = MultiSourceDataset::new(parse_dim(hf[3])?, parse_dim(hf[4])?);
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(manifest_err(
                &mpath,
                lineno,
                format!("expected 3 fields, got {}", f.len()),
            ));
        }
        let source =
            Source::parse(f[1]).map_err(|e| manifest_err(&mpath, lineno, e.to_string()))?;
        let label = LabelVector::from_label_string(f[2])
            .map_err(|e| manifest_err(&mpath, lineno, e.to_string()))?;
        let ppath = dir.join(f[0]);
        let id = ppath
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| manifest_err(&mpath, lineno, format!("bad patch path {:?}", f[0])))?
            .to_string();
        ds.samples.push(Sample {
            id,
            patch: read_patch(&ppath)?,
            source,
            label,
            z: None,
        });
    }
    Ok(ds)
}

/// Write scenes as `scenes.tsv` + `scene_gt.tsv` + `scenes/<id>.raw`.
pub fn save_scenes(dir: &Path, scenes: &[SceneImage]) -> Result<()> {
    create_dir(dir)?;
    create_dir(&dir.join("scenes"))?;
    let mut manifest = format!("{SCENE_MAGIC}\t{DATASET_VERSION}\n");
    let mut gts: Vec<GroundTruth> = Vec::new();
    for s in scenes {
        let rel = format!("scenes/{}.raw", s.id);
        write_patch(&dir.join(&rel), &s.image)?;
        let flags: String = s
            .present
            .iter()
            .map(|&p| if p { '1' } else { '0' })
            .collect();
        let _ = writeln!(manifest, "{rel}\t{}\t{flags}", s.source.tag());
        gts.extend(s.gts.iter().cloned());
    }
    let mpath = dir.join("scenes.tsv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    write_ground_truth(&dir.join("scene_gt.tsv"), &gts)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<SceneImage>> {
    let mpath = dir.join("scenes.tsv");
    let text =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| manifest_err(&mpath, 1, "empty scene manifest"))?;
    if header.split('\t').next() != Some(SCENE_MAGIC) {
        return Err(manifest_err(&mpath, 1, "bad scene header"));
    }
    let all_gts = read_ground_truth(&dir.join("scene_gt.tsv"))?;
    let mut scenes = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(manifest_err(
                &mpath,
                lineno,
                format!("expected 3 fields, got {}", f.len()),
            ));
        }
        let source =
            Source::parse(f[1]).map_err(|e| manifest_err(&mpath, lineno, e.to_string()))?;
        let flags: Vec<char> = f[2].chars().collect();
        if flags.len() != 8 || flags.iter().any(|c| *c != '0' && *c != '1') {
            return Err(manifest_err(
                &mpath,
                lineno,
                format!("bad presence flags {:?}", f[2]),
            ));
        }
        let mut present = [false; 8];
        for (slot, c) in present.iter_mut().zip(&flags) {
            *slot = *c == '1';
        }
        let spath = dir.join(f[0]);
        let id = spath
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| manifest_err(&mpath, lineno, format!("bad scene path {:?}", f[0])))?
            .to_string();
        let image = read_patch(&spath)?;
        let gts = all_gts
            .iter()
            .filter(|g| g.image_id == id)
            .cloned()
            .collect();
        scenes.push(SceneImage {
            id,
            source,
            image,
            gts,
            present,
        });
    }
    Ok(scenes)
}

// --- flat key=value configs ---------------------------------------------

/// Flat string-to-string configuration with typed getters. Snapshots
/// print in sorted key order so run logs are diffable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let mut cfg = Config::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format {
                    path: origin.to_string(),
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            cfg.entries
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// Apply a command-line `KEY=VALUE` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let Some((k, v)) = spec.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects KEY=VALUE, got {spec:?}"
            )));
        };
        self.entries
            .insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!(
                    "key {key}: cannot parse {raw:?} as {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_as(key, default)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_as(key, default)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_as(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::Config(format!(
                "key {key}: expected true/false/1/0, got {other:?}"
            ))),
        }
    }

    /// Sorted `key=value` lines.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// --- checkpoints --------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"TACNCKPT";
const CKPT_VERSION: u32 = 1;

/// Named-array container: string meta plus rank/extent-tagged f64
/// arrays, all little-endian on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push_array(&mut self, name: &str, extents: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let want: usize = extents.iter().product();
        if want != data.len() {
            return Err(Error::Checkpoint(format!(
                "array {name}: extents {extents:?} promise {want} values, got {}",
                data.len()
            )));
        }
        if self.arrays.iter().any(|(n, _, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
        self.arrays.push((name.to_string(), extents, data));
        Ok(())
    }

    pub fn array(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, e, d)| (e.as_slice(), d.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, extents, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
            for &e in extents {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated: wanted {n} bytes at offset {pos}, file holds {}",
                    bytes.len()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let read_str = |pos: &mut usize| -> Result<String> {
            let n = read_u32(pos)? as usize;
            if n > 1 << 20 {
                return Err(Error::Checkpoint(format!("implausible string length {n}")));
            }
            String::from_utf8(take(pos, n)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
        };

        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CKPT_VERSION}"
            )));
        }
        let mut ckpt = Checkpoint::default();
        let n_meta = read_u32(&mut pos)?;
        for _ in 0..n_meta {
            let k = read_str(&mut pos)?;
            let v = read_str(&mut pos)?;
            ckpt.meta.insert(k, v);
        }
        let n_arrays = read_u32(&mut pos)?;
        for _ in 0..n_arrays {
            let name = read_str(&mut pos)?;
            let rank = read_u32(&mut pos)? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "array {name}: implausible rank {rank}"
                )));
            }
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = extents.iter().product();
            let raw = take(&mut pos, count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.push_array(&name, extents, data)?;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last array",
                bytes.len() - pos
            )));
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Checkpoint::from_bytes(&bytes)
}

// --- trained-state packing ------------------------------------------------

/// Everything a run produces that later stages consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub model: TaCnnModel,
    pub spv: Option<SpvModel>,
    pub rbm: Option<Rbm>,
    pub coeffs: Coeffs,
    /// Config snapshot carried with the arrays (semantic keys only, no
    /// paths, so identical runs produce identical bytes).
    pub config: Config,
}

fn meta_usize(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    let raw = ckpt
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("meta key {key}: bad value {raw:?}")))
}

fn meta_usize4(ckpt: &Checkpoint, key: &str) -> Result<[usize; 4]> {
    let raw = ckpt
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))?;
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Checkpoint(format!("meta key {key}: bad value {raw:?}")))
        })
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("meta key {key}: expected 4 values")))
}

fn fmt4(v: &[usize; 4]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn push_spv(ckpt: &mut Checkpoint, spv: &SpvModel) -> Result<()> {
    ckpt.meta
        .insert("spv.hog.cell".into(), spv.hog.cell.to_string());
    ckpt.meta
        .insert("spv.hog.bins".into(), spv.hog.bins.to_string());
    ckpt.meta
        .insert("spv.hog.block".into(), spv.hog.block.to_string());
    ckpt.push_array("spv.hog.epsilon", vec![1], vec![spv.hog.epsilon])?;
    for (prefix, tree) in [("spv.pos", &spv.pos), ("spv.neg", &spv.neg)] {
        for (part, means) in [("level1", &tree.level1), ("leaves", &tree.leaves)] {
            let d = means.first().map(|m| m.len()).unwrap_or(0);
            let flat: Vec<f64> = means.iter().flatten().copied().collect();
            ckpt.push_array(&format!("{prefix}.{part}"), vec![means.len(), d], flat)?;
        }
    }
    if let Some((mean, std)) = &spv.stats {
        ckpt.push_array("spv.stats.mean", vec![mean.len()], mean.clone())?;
        ckpt.push_array("spv.stats.std", vec![std.len()], std.clone())?;
    }
    Ok(())
}

fn pull_spv(ckpt: &Checkpoint, known: &mut Vec<String>) -> Result<SpvModel> {
    let eps = take_array(ckpt, "spv.hog.epsilon", &[1])?[0];
    known.push("spv.hog.epsilon".into());
    let hog = HogParams {
        cell: meta_usize(ckpt, "spv.hog.cell")?,
        bins: meta_usize(ckpt, "spv.hog.bins")?,
        block: meta_usize(ckpt, "spv.hog.block")?,
        epsilon: eps,
    };
    let mut trees = Vec::new();
    for prefix in ["spv.pos", "spv.neg"] {
        let mut parts = Vec::new();
        for part in ["level1", "leaves"] {
            let name = format!("{prefix}.{part}");
            let (ext, data) = ckpt
                .array(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if ext.len() != 2 {
                return Err(Error::Checkpoint(format!("array {name}: expected rank 2")));
            }
            parts.push(rows(data, ext[1]));
            known.push(name);
        }
        let leaves = parts.pop().unwrap();
        let level1 = parts.pop().unwrap();
        trees.push(KMeansTree { level1, leaves });
    }
    let neg = trees.pop().unwrap();
    let pos = trees.pop().unwrap();
    let stats = match ckpt.array("spv.stats.mean") {
        Some((ext, mean)) => {
            let std = take_array(ckpt, "spv.stats.std", ext)?;
            known.push("spv.stats.mean".into());
            known.push("spv.stats.std".into());
            Some((mean.to_vec(), std))
        }
        None => None,
    };
    Ok(SpvModel {
        hog,
        pos,
        neg,
        stats,
    })
}

fn push_rbm(ckpt: &mut Checkpoint, rbm: &Rbm) -> Result<()> {
    ckpt.push_array("rbm.w_xh", vec![rbm.n_x, rbm.n_h], rbm.w_xh.clone())?;
    ckpt.push_array("rbm.w_yh", vec![rbm.n_y, rbm.n_h], rbm.w_yh.clone())?;
    ckpt.push_array("rbm.b_x", vec![rbm.n_x], rbm.b_x.clone())?;
    ckpt.push_array("rbm.b_y", vec![rbm.n_y], rbm.b_y.clone())?;
    ckpt.push_array("rbm.b_h", vec![rbm.n_h], rbm.b_h.clone())
}

fn pull_rbm(ckpt: &Checkpoint, known: &mut Vec<String>) -> Result<Rbm> {
    let (ext, _) = ckpt
        .array("rbm.w_xh")
        .ok_or_else(|| Error::Checkpoint("missing array rbm.w_xh".into()))?;
    if ext.len() != 2 {
        return Err(Error::Checkpoint("array rbm.w_xh: expected rank 2".into()));
    }
    let (n_x, n_h) = (ext[0], ext[1]);
    let (yext, _) = ckpt
        .array("rbm.w_yh")
        .ok_or_else(|| Error::Checkpoint("missing array rbm.w_yh".into()))?;
    if yext.len() != 2 || yext[1] != n_h {
        return Err(Error::Checkpoint(
            "array rbm.w_yh: inconsistent extents".into(),
        ));
    }
    let n_y = yext[0];
    let rbm = Rbm {
        n_x,
        n_y,
        n_h,
        w_xh: take_array(ckpt, "rbm.w_xh", &[n_x, n_h])?,
        w_yh: take_array(ckpt, "rbm.w_yh", &[n_y, n_h])?,
        b_x: take_array(ckpt, "rbm.b_x", &[n_x])?,
        b_y: take_array(ckpt, "rbm.b_y", &[n_y])?,
        b_h: take_array(ckpt, "rbm.b_h", &[n_h])?,
    };
    for name in ["rbm.w_xh", "rbm.w_yh", "rbm.b_x", "rbm.b_y", "rbm.b_h"] {
        known.push(name.into());
    }
    Ok(rbm)
}

fn check_kind(ckpt: &Checkpoint, want: &str) -> Result<()> {
    let kind = ckpt.meta.get("kind").map(|s| s.as_str());
    match kind {
        Some(k) if k == want => Ok(()),
        // early state checkpoints carried no kind tag
        None if want == "state" => Ok(()),
        _ => Err(Error::Checkpoint(format!(
            "checkpoint kind {:?}, expected {want:?}",
            kind.unwrap_or("<none>")
        ))),
    }
}

pub fn state_to_checkpoint(state: &TrainedState) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::default();
    let g = &state.model.geometry;
    ckpt.meta.insert("kind".into(), "state".into());
    ckpt.meta.insert("geom.in_ch".into(), g.in_ch.to_string());
    ckpt.meta.insert("geom.in_h".into(), g.in_h.to_string());
    ckpt.meta.insert("geom.in_w".into(), g.in_w.to_string());
    ckpt.meta
        .insert("geom.conv_channels".into(), fmt4(&g.conv_channels));
    ckpt.meta
        .insert("geom.conv_kernels".into(), fmt4(&g.conv_kernels));
    ckpt.meta
        .insert("geom.conv_pads".into(), fmt4(&g.conv_pads));
    ckpt.meta
        .insert("geom.pool_cell".into(), g.pool_cell.to_string());
    ckpt.meta
        .insert("geom.pool_stride".into(), g.pool_stride.to_string());
    ckpt.meta.insert("geom.fc5".into(), g.fc5.to_string());
    ckpt.meta.insert("geom.hidden".into(), g.hidden.to_string());
    ckpt.meta
        .insert("geom.spv_dim".into(), g.spv_dim.to_string());
    ckpt.meta.insert(
        "has_spv".into(),
        if state.spv.is_some() { "1" } else { "0" }.into(),
    );
    ckpt.meta.insert(
        "has_rbm".into(),
        if state.rbm.is_some() { "1" } else { "0" }.into(),
    );
    for (k, v) in state.config.entries() {
        ckpt.meta.insert(format!("cfg.{k}"), v.to_string());
    }

    for (name, extents, data) in state.model.named_arrays() {
        ckpt.push_array(&name, extents, data.to_vec())?;
    }
    ckpt.push_array("lambda", vec![NUM_TASKS], state.coeffs.lambda().to_vec())?;
    ckpt.push_array("sigma", vec![1], vec![state.coeffs.sigma])?;

    if let Some(spv) = &state.spv {
        push_spv(&mut ckpt, spv)?;
    }
    if let Some(rbm) = &state.rbm {
        push_rbm(&mut ckpt, rbm)?;
    }
    Ok(ckpt)
}

fn take_array(ckpt: &Checkpoint, name: &str, extents: &[usize]) -> Result<Vec<f64>> {
    let (got_ext, data) = ckpt
        .array(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
    if got_ext != extents {
        return Err(Error::Checkpoint(format!(
            "array {name}: expected extents {extents:?}, found {got_ext:?}"
        )));
    }
    Ok(data.to_vec())
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    if d == 0 {
        return Vec::new();
    }
    flat.chunks_exact(d).map(|c| c.to_vec()).collect()
}

pub fn checkpoint_to_state(ckpt: &Checkpoint) -> Result<TrainedState> {
    check_kind(ckpt, "state")?;
    let geometry = Geometry {
        in_ch: meta_usize(ckpt, "geom.in_ch")?,
        in_h: meta_usize(ckpt, "geom.in_h")?,
        in_w: meta_usize(ckpt, "geom.in_w")?,
        conv_channels: meta_usize4(ckpt, "geom.conv_channels")?,
        conv_kernels: meta_usize4(ckpt, "geom.conv_kernels")?,
        conv_pads: meta_usize4(ckpt, "geom.conv_pads")?,
        pool_cell: meta_usize(ckpt, "geom.pool_cell")?,
        pool_stride: meta_usize(ckpt, "geom.pool_stride")?,
        fc5: meta_usize(ckpt, "geom.fc5")?,
        hidden: meta_usize(ckpt, "geom.hidden")?,
        spv_dim: meta_usize(ckpt, "geom.spv_dim")?,
    };
    // skeleton with the right shapes, then fill from named arrays
    let mut rng = crate::rng::rng_for(0, 0);
    let mut model = TaCnnModel::init(&geometry, &mut rng)?;
    let mut known: Vec<String> = Vec::new();
    {
        let expected: Vec<(String, Vec<usize>)> = model
            .named_arrays()
            .iter()
            .map(|(n, e, _)| (n.clone(), e.clone()))
            .collect();
        for (name, extents) in &expected {
            let data = take_array(ckpt, name, extents)?;
            known.push(name.clone());
            match name.as_str() {
                "fc5.w" => model.fc5.weights = data,
                "fc5.b" => model.fc5.bias = data,
                "fc6.w" => model.fc6.weights = data,
                "fc6.b" => model.fc6.bias = data,
                "spv.w" => model.spv_w = data,
                "spv.b" => model.spv_b = data,
                "task.w" => model.task_w = data,
                other => {
                    let idx: usize = other[4..5].parse().map_err(|_| {
                        Error::Checkpoint(format!("unexpected model array {other}"))
                    })?;
                    if other.ends_with(".k") {
                        model.conv[idx - 1].kernels = data;
                    } else {
                        model.conv[idx - 1].bias = data;
                    }
                }
            }
        }
    }

    let lambda = take_array(ckpt, "lambda", &[NUM_TASKS])?;
    let sigma = take_array(ckpt, "sigma", &[1])?[0];
    let coeffs = Coeffs::from_values(&lambda, sigma)?;
    known.push("lambda".into());
    known.push("sigma".into());

    let spv = if ckpt.meta.get("has_spv").map(|s| s.as_str()) == Some("1") {
        Some(pull_spv(ckpt, &mut known)?)
    } else {
        None
    };

    let rbm = if ckpt.meta.get("has_rbm").map(|s| s.as_str()) == Some("1") {
        Some(pull_rbm(ckpt, &mut known)?)
    } else {
        None
    };

    for (name, _, _) in &ckpt.arrays {
        if !known.contains(name) {
            return Err(Error::Checkpoint(format!("unknown array {name}")));
        }
    }

    let mut config = Config::new();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("cfg.") {
            config.set(key, v);
        }
    }
    Ok(TrainedState {
        model,
        spv,
        rbm,
        coeffs,
        config,
    })
}

pub fn save_state(path: &Path, state: &TrainedState) -> Result<()> {
    write_checkpoint(path, &state_to_checkpoint(state)?)
}

pub fn load_state(path: &Path) -> Result<TrainedState> {
    checkpoint_to_state(&read_checkpoint(path)?)
}

/// Standalone projection-vector artifact, the `spv-build` stage output.
pub fn save_spv(path: &Path, spv: &SpvModel) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.meta.insert("kind".into(), "spv".into());
    push_spv(&mut ckpt, spv)?;
    write_checkpoint(path, &ckpt)
}

pub fn load_spv(path: &Path) -> Result<SpvModel> {
    let ckpt = read_checkpoint(path)?;
    check_kind(&ckpt, "spv")?;
    let mut known = Vec::new();
    let spv = pull_spv(&ckpt, &mut known)?;
    for (name, _, _) in &ckpt.arrays {
        if !known.contains(name) {
            return Err(Error::Checkpoint(format!("unknown array {name}")));
        }
    }
    Ok(spv)
}

/// Standalone joint-RBM artifact, the `rbm-train` stage output.
pub fn save_rbm(path: &Path, rbm: &Rbm) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.meta.insert("kind".into(), "rbm".into());
    push_rbm(&mut ckpt, rbm)?;
    write_checkpoint(path, &ckpt)
}

pub fn load_rbm(path: &Path) -> Result<Rbm> {
    let ckpt = read_checkpoint(path)?;
    check_kind(&ckpt, "rbm")?;
    let mut known = Vec::new();
    let rbm = pull_rbm(&ckpt, &mut known)?;
    for (name, _, _) in &ckpt.arrays {
        if !known.contains(name) {
            return Err(Error::Checkpoint(format!("unknown array {name}")));
        }
    }
    Ok(rbm)
}

/// Probability-table TSV: `id<TAB>weight` per line, dataset order.
pub fn write_prob_table(path: &Path, table: &crate::rbm::ProbTable) -> Result<()> {
    let mut out = String::new();
    for (id, w) in &table.entries {
        let _ = writeln!(out, "{id}\t{w}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_prob_table(path: &Path) -> Result<crate::rbm::ProbTable> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((id, raw)) = line.split_once('\t') else {
            return Err(manifest_err(path, i + 1, "expected id<TAB>weight"));
        };
        let w: f64 = raw
            .parse()
            .map_err(|_| manifest_err(path, i + 1, format!("bad weight {raw:?}")))?;
        entries.push((id.to_string(), w));
    }
    Ok(crate::rbm::ProbTable { entries })
}

/// Expand `~`-free relative paths against a base dir (CLI helper).
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}
