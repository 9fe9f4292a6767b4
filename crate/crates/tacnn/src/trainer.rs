//! Training orchestration: the alternating schedule that runs SGD
//! epochs with coefficients fixed, then re-estimates the coefficients
//! with the network fixed, plus the dataset container, hard-negative
//! mining and the seed scorer that drives it.

use crate::coeffs::{optimize_coeffs, CoeffObjectiveCtx, LbfgsConfig};
use crate::datagen::{scene_label_for_mining, SceneImage};
use crate::error::Error;
use crate::evalkit::{crop_window, sliding_window_detect, WindowScan};
use crate::model::{
    apply_sgd, backward, weighted_ce_loss, Geometry, Grads, Prediction, SgdBuffers, TaCnnModel,
};
use crate::rbm::{build_prob_table, cd_train, encode_visible, ProbTable, Rbm, RbmConfig};
use crate::rng::{self, stream};
use crate::spv::{hog_extract, HogParams, SpvModel};
use crate::taskcodec::{
    expand_lambda, Coeffs, LabelVector, Source, TaskLayout, NUM_BITS, NUM_TASKS,
};
use crate::tensor::Tensor;
use crate::Result;
use rand::seq::SliceRandom;
use std::collections::BTreeSet;
use std::path::Path;

/// One training patch with its provenance and (partially observed)
/// labels. `z` is the structure projection, attached once an SPV model
/// exists; `None` means not yet projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patch: Tensor,
    pub source: Source,
    pub label: LabelVector,
    pub z: Option<Vec<f64>>,
}

/// Patches pooled across the pedestrian source and the three background
/// sources.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiSourceDataset {
    pub patch_h: usize,
    pub patch_w: usize,
    pub samples: Vec<Sample>,
}

impl MultiSourceDataset {
    pub fn new(patch_h: usize, patch_w: usize) -> MultiSourceDataset {
        MultiSourceDataset {
            patch_h,
            patch_w,
            samples: Vec::new(),
        }
    }

    /// Structural soundness: unique ids, declared patch geometry, valid
    /// label vectors, and no sample observing a bit its source could not
    /// have annotated. Observing fewer bits than the source's full
    /// pattern is legal (mined negatives may carry only the main bit).
    pub fn validate(&self, layout: &TaskLayout) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Encoding(format!("duplicate sample id {:?}", s.id)));
            }
            let (c, h, w) = s.patch.dims3()?;
            if c != 1 || h != self.patch_h || w != self.patch_w {
                return Err(Error::Dimension(format!(
                    "sample {:?} has patch {c}x{h}x{w}, dataset declares 1x{}x{}",
                    s.id, self.patch_h, self.patch_w
                )));
            }
            s.label.validate()?;
            let legal = layout.mask_pattern(s.source, true);
            for (bit, (&m, &l)) in s.label.mask.iter().zip(&legal).enumerate() {
                if m && !l {
                    return Err(Error::Encoding(format!(
                        "sample {:?} from source {} observes bit {bit}, outside the source's annotation surface",
                        s.id,
                        s.source.tag()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn by_source(&self, source: Source) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.source == source)
    }

    /// Sample counts in `Source::ALL` order.
    pub fn counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for s in &self.samples {
            let idx = Source::ALL.iter().position(|t| *t == s.source).unwrap();
            counts[idx] += 1;
        }
        counts
    }
}

// --- training configuration ---------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Outer alternations (SGD block + one coefficient update).
    pub outer_iters: usize,
    /// Cap on SGD epochs inside one outer iteration; the plateau
    /// detector may stop a block earlier.
    pub epochs_per_outer: usize,
    pub batch: usize,
    /// SGD step size within the first outer iteration.
    pub learning_rate: f64,
    /// Multiplier applied to the step size per outer iteration.
    pub lr_decay: f64,
    pub seed: u64,
    /// Width of the Gaussian prior tying coefficients to 1.
    pub sigma: f64,
    pub rbm: RbmConfig,
    /// Downsampled grid the RBM sees (rows, cols); must divide the patch.
    pub rbm_down: (usize, usize),
    pub use_spv: bool,
    /// Weight samples by RBM free-energy importance; off means unit
    /// weights everywhere.
    pub use_prob_table: bool,
    /// Read the evidence term as a constant of the coefficient
    /// objective instead of a per-sample weight.
    pub constant_evidence: bool,
    pub geometry: Geometry,
    /// Plateau rule: relative epoch-loss improvement below this ...
    pub plateau_rel_tol: f64,
    /// ... for this many consecutive epochs ends the SGD block.
    pub plateau_patience: usize,
    /// Fraction of the pedestrian source held out, stratified by the
    /// main label.
    pub val_fraction: f64,
    /// Stop the whole schedule when validation loss stops improving.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iters: 2,
            epochs_per_outer: 12,
            batch: 16,
            learning_rate: 0.01,
            lr_decay: 0.5,
            seed: 0,
            sigma: 0.05,
            rbm: RbmConfig::default(),
            rbm_down: (8, 8),
            use_spv: false,
            use_prob_table: true,
            constant_evidence: false,
            geometry: Geometry::default(),
            plateau_rel_tol: 1e-3,
            plateau_patience: 3,
            val_fraction: 0.1,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_outer == 0 || self.batch == 0 {
            return Err(Error::Config(
                "epochs_per_outer and batch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be positive".into()));
        }
        Ok(())
    }
}

// --- epoch-level SGD -------------------------------------------------------

/// Per-task negative log-likelihood of one prediction: sum of per-bit
/// cross-entropies over each task's observed bits; unobserved tasks
/// contribute exactly 0.
pub fn per_task_nll(
    pred: &Prediction,
    label: &LabelVector,
    layout: &TaskLayout,
) -> [f64; NUM_TASKS] {
    let mut out = [0.0; NUM_TASKS];
    for (t, o) in out.iter_mut().enumerate() {
        for b in layout.task_bits(t) {
            if !label.mask[b] {
                continue;
            }
            let logit = pred.logits[b];
            *o += if label.bits[b] {
                crate::nn::softplus(-logit)
            } else {
                crate::nn::softplus(logit)
            };
        }
    }
    out
}

fn sample_weight(table: Option<&ProbTable>, id: &str) -> f64 {
    table.and_then(|t| t.weight(id)).unwrap_or(1.0)
}

/// One seeded epoch of minibatch SGD on the masked weighted loss.
/// Returns the epoch-mean (weighted) loss. `epoch` feeds the shuffle
/// stream so successive epochs draw different orders while staying
/// reproducible. A minibatch in which no sample observes any bit is
/// skipped outright: no evidence, no update.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut TaCnnModel,
    bufs: &mut SgdBuffers,
    dataset: &MultiSourceDataset,
    coeffs: &Coeffs,
    layout: &TaskLayout,
    table: Option<&ProbTable>,
    batch: usize,
    eps: f64,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    if dataset.samples.is_empty() {
        return Err(Error::InsufficientData(
            "train_epoch on an empty dataset".into(),
        ));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let lambda_bits = expand_lambda(coeffs, layout);
    let zero_z = vec![0.0; model.geometry.spv_dim];
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    order.shuffle(&mut rng::rng_for2(seed, stream::EPOCH_SHUFFLE, epoch));

    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch) {
        let mut grads = Grads::zeros_like(model);
        let mut any_observed = false;
        for &i in chunk {
            let s = &dataset.samples[i];
            let z = s.z.as_deref().unwrap_or(&zero_z);
            let w = sample_weight(table, &s.id);
            let (pred, cache) = model.forward_cached(&s.patch, z)?;
            let loss = w * weighted_ce_loss(&pred, &s.label, &lambda_bits);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss for sample {:?} is {loss}",
                    s.id
                )));
            }
            loss_sum += loss;
            if s.label.mask.iter().any(|&m| m) {
                any_observed = true;
            }
            let g = backward(model, &pred, &cache, &s.label, &lambda_bits)?;
            grads.axpy(&g, w);
        }
        if !any_observed {
            continue;
        }
        grads.scale(1.0 / chunk.len() as f64);
        apply_sgd(model, &grads, bufs, eps)?;
    }
    Ok(loss_sum / dataset.samples.len() as f64)
}

/// Mean unit-coefficient loss over a subset of the dataset, without
/// sample weights; the validation metric.
fn mean_loss_subset(
    model: &TaCnnModel,
    dataset: &MultiSourceDataset,
    idx: &[usize],
    lambda_bits: &[f64; NUM_BITS],
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let zero_z = vec![0.0; model.geometry.spv_dim];
    let mut sum = 0.0;
    for &i in idx {
        let s = &dataset.samples[i];
        let z = s.z.as_deref().unwrap_or(&zero_z);
        let pred = model.forward(&s.patch, z)?;
        sum += weighted_ce_loss(&pred, &s.label, lambda_bits);
    }
    Ok(sum / idx.len() as f64)
}

/// Split the pedestrian source into train/validation index sets,
/// stratified by the observed main label. Background sources always
/// train. Both returned sets are sorted.
pub fn stratified_val_split(
    dataset: &MultiSourceDataset,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::rng_for(seed, stream::VAL_SPLIT);
    let mut train: Vec<usize> = Vec::new();
    let mut val: Vec<usize> = Vec::new();
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.source == Source::P && s.label.mask[0] {
            if s.label.bits[0] {
                pos.push(i);
            } else {
                neg.push(i);
            }
        } else {
            train.push(i);
        }
    }
    for group in [pos, neg] {
        let mut g = group;
        g.shuffle(&mut rng);
        let n_val = (fraction * g.len() as f64).floor() as usize;
        val.extend(g.drain(..n_val));
        train.extend(g);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn subset(dataset: &MultiSourceDataset, idx: &[usize]) -> MultiSourceDataset {
    MultiSourceDataset {
        patch_h: dataset.patch_h,
        patch_w: dataset.patch_w,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    }
}

// --- offline RBM stage -----------------------------------------------------

/// One RBM training item: sample id, downsampled binarized patch, and
/// the completed 19-bit label vector.
pub type RbmItem = (String, Vec<f64>, Vec<f64>);

/// Visible pairs for the joint RBM: downsampled binarized patches plus
/// the 19-bit label vector. Unobserved bits are filled by thresholding
/// the given (initialized) model's prediction, so the RBM always sees a
/// complete visible vector.
pub fn rbm_training_items(
    model: &TaCnnModel,
    dataset: &MultiSourceDataset,
    down: (usize, usize),
) -> Result<Vec<RbmItem>> {
    let zero_z = vec![0.0; model.geometry.spv_dim];
    let mut items = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let x = encode_visible(&s.patch, down.0, down.1)?;
        let z = s.z.as_deref().unwrap_or(&zero_z);
        let pred = model.forward(&s.patch, z)?;
        let y: Vec<f64> = (0..NUM_BITS)
            .map(|b| {
                if s.label.mask[b] {
                    s.label.value(b)
                } else if pred.probs[b] > 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        items.push((s.id.clone(), x, y));
    }
    Ok(items)
}

// --- schedule helpers --------------------------------------------------------

/// Relative-improvement plateau rule: `patience` consecutive epochs with
/// improvement below `tol` end the SGD block.
struct PlateauDetector {
    tol: f64,
    patience: usize,
    prev: Option<f64>,
    flat: usize,
}

impl PlateauDetector {
    fn new(tol: f64, patience: usize) -> PlateauDetector {
        PlateauDetector {
            tol,
            patience,
            prev: None,
            flat: 0,
        }
    }

    /// Feed one epoch loss; true when the plateau rule fires.
    fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.prev {
            let rel = (prev - loss) / prev.abs().max(1e-12);
            if rel < self.tol {
                self.flat += 1;
            } else {
                self.flat = 0;
            }
        }
        self.prev = Some(loss);
        self.flat >= self.patience
    }
}

/// Validation early stop: fires after `patience` consecutive epochs
/// without a new best.
struct EarlyStop {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> EarlyStop {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss.is_finite() && val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else if val_loss.is_finite() {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

// --- the alternating schedule ------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub outer: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochRow>,
    /// Coefficient vector after initialization and after every outer
    /// update; the main entry is 1 in every row.
    pub lambda_history: Vec<[f64; NUM_TASKS]>,
}

impl RunLog {
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("outer,epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.outer, r.epoch, r.train_loss, r.val_loss
            ));
        }
        out
    }

    pub fn lambda_txt(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.lambda_history.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{i}\t{}\n", vals.join("\t")));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TaCnnModel,
    pub coeffs: Coeffs,
    pub rbm: Option<Rbm>,
    pub prob_table: Option<ProbTable>,
    pub log: RunLog,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Attach structure projections to every sample. Errors if the model
/// dimension disagrees with the network geometry.
pub fn attach_spv(
    dataset: &MultiSourceDataset,
    spv: &SpvModel,
    spv_dim: usize,
) -> Result<MultiSourceDataset> {
    if spv.dim() != spv_dim {
        return Err(Error::Dimension(format!(
            "spv model projects to {} dims, network expects {spv_dim}",
            spv.dim()
        )));
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        s.z = Some(spv.project_standardized(&s.patch)?);
    }
    Ok(out)
}

/// The alternating schedule: initialize, build the RBM importance table
/// offline, then repeat (SGD block to a plateau, one coefficient
/// update). Fully deterministic given the dataset, configuration and
/// seed. When `run_dir` is given, writes `epochs.csv`, `lambda.txt` and
/// (when built) `prob_table.tsv` there; on divergence the last good
/// model is checkpointed there too.
pub fn algorithm1_train(
    dataset: &MultiSourceDataset,
    layout: &TaskLayout,
    spv: Option<&SpvModel>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::InsufficientData(
            "algorithm1_train on an empty dataset".into(),
        ));
    }
    dataset.validate(layout)?;
    if cfg.use_spv && spv.is_none() {
        return Err(Error::Config(
            "use_spv set but no SPV model supplied".into(),
        ));
    }

    let ds = match (cfg.use_spv, spv) {
        (true, Some(m)) => attach_spv(dataset, m, cfg.geometry.spv_dim)?,
        _ => dataset.clone(),
    };

    let mut init_rng = rng::rng_for(cfg.seed, stream::MODEL_INIT);
    let mut model = TaCnnModel::init(&cfg.geometry, &mut init_rng)?;
    let mut coeffs = Coeffs::unit(cfg.sigma);
    let mut log = RunLog::default();
    log.lambda_history.push(*coeffs.lambda());

    // offline: joint RBM and the importance table, built against the
    // initialized network's label fills
    let (rbm, table) = if cfg.use_prob_table {
        let items = rbm_training_items(&model, &ds, cfg.rbm_down)?;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = items
            .iter()
            .map(|(_, x, y)| (x.clone(), y.clone()))
            .collect();
        let rbm = cd_train(&pairs, &cfg.rbm, cfg.seed)?;
        let table = build_prob_table(&rbm, &items)?;
        (Some(rbm), Some(table))
    } else {
        (None, None)
    };
    if let (Some(dir), Some(t)) = (run_dir, table.as_ref()) {
        crate::io::write_prob_table(&dir.join("prob_table.tsv"), t)?;
    }

    let (train_idx, val_idx) = stratified_val_split(&ds, cfg.val_fraction, cfg.seed);
    let train_ds = subset(&ds, &train_idx);
    if train_ds.samples.is_empty() {
        return Err(Error::InsufficientData(
            "validation split consumed every sample".into(),
        ));
    }
    let unit_bits = expand_lambda(&Coeffs::unit(cfg.sigma), layout);

    let mut bufs = SgdBuffers::zeros_like(&model);
    let mut global_epoch = 0usize;
    let mut stop_all = false;
    let mut early = EarlyStop::new(cfg.plateau_patience);

    for outer in 0..cfg.outer_iters {
        let eps = cfg.learning_rate * cfg.lr_decay.powi(outer as i32);
        let mut plateau = PlateauDetector::new(cfg.plateau_rel_tol, cfg.plateau_patience);
        for _ in 0..cfg.epochs_per_outer {
            let snapshot = model.clone();
            let stepped = train_epoch(
                &mut model,
                &mut bufs,
                &train_ds,
                &coeffs,
                layout,
                table.as_ref(),
                cfg.batch,
                eps,
                cfg.seed,
                global_epoch as u64,
            );
            let train_loss = match stepped {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    let checkpoint = match run_dir {
                        Some(dir) => {
                            let path = dir.join("diverged.ckpt");
                            let state = crate::io::TrainedState {
                                model: snapshot,
                                spv: spv.cloned(),
                                rbm: rbm.clone(),
                                coeffs: coeffs.clone(),
                                config: crate::io::Config::new(),
                            };
                            crate::io::save_state(&path, &state)?;
                            path.display().to_string()
                        }
                        None => "<not written: no run dir>".to_string(),
                    };
                    return Err(Error::Diverged {
                        epoch: global_epoch,
                        checkpoint,
                    });
                }
                Err(e) => return Err(e),
            };
            let val_loss = mean_loss_subset(&model, &ds, &val_idx, &unit_bits)?;
            log.epochs.push(EpochRow {
                outer,
                epoch: global_epoch,
                train_loss,
                val_loss,
            });
            global_epoch += 1;
            if cfg.early_stop && early.observe(val_loss) {
                stop_all = true;
                break;
            }
            if plateau.observe(train_loss) {
                break;
            }
        }

        // coefficient update on the frozen network
        let mut nll = Vec::with_capacity(train_ds.samples.len() * NUM_TASKS);
        let mut weights = Vec::with_capacity(train_ds.samples.len());
        let zero_z = vec![0.0; model.geometry.spv_dim];
        for s in &train_ds.samples {
            let z = s.z.as_deref().unwrap_or(&zero_z);
            let pred = model.forward(&s.patch, z)?;
            nll.extend_from_slice(&per_task_nll(&pred, &s.label, layout));
            weights.push(sample_weight(table.as_ref(), &s.id));
        }
        let mut ctx = CoeffObjectiveCtx::new(nll, weights, cfg.sigma)?;
        if cfg.constant_evidence {
            ctx = ctx.with_constant_evidence();
        }
        let (updated, _) = optimize_coeffs(&ctx, &coeffs, &LbfgsConfig::default())?;
        coeffs = updated;
        log.lambda_history.push(*coeffs.lambda());

        if stop_all {
            break;
        }
    }

    if let Some(dir) = run_dir {
        write_text(&dir.join("epochs.csv"), &log.epochs_csv())?;
        write_text(&dir.join("lambda.txt"), &log.lambda_txt())?;
    }

    Ok(TrainOutcome {
        model,
        coeffs,
        rbm,
        prob_table: table,
        log,
    })
}

// --- seed scorer and hard-negative mining -------------------------------------

/// HOG + logistic-regression window scorer; the cheap cascade stage
/// that proposes hard negatives and prunes windows at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedScorer {
    pub hog: HogParams,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SeedScorer {
    /// Train on every sample whose main bit is observed, by plain SGD on
    /// the logistic loss.
    pub fn train(
        dataset: &MultiSourceDataset,
        hog: &HogParams,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<SeedScorer> {
        let mut feats: Vec<(Vec<f64>, f64)> = Vec::new();
        for s in &dataset.samples {
            if s.label.mask[0] {
                feats.push((hog_extract(&s.patch, hog)?, s.label.value(0)));
            }
        }
        if feats.is_empty() {
            return Err(Error::InsufficientData(
                "seed scorer needs samples with an observed main bit".into(),
            ));
        }
        let dim = feats[0].0.len();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut rng::rng_for2(seed, stream::SCORER, epoch as u64));
            for &i in &order {
                let (x, y) = &feats[i];
                let t: f64 = b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                let g = 1.0 / (1.0 + (-t).exp()) - y;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi -= lr * g * xi;
                }
                b -= lr * g;
            }
        }
        Ok(SeedScorer {
            hog: hog.clone(),
            weights: w,
            bias: b,
        })
    }

    /// Raw logit; monotone in the pedestrian probability.
    pub fn score(&self, patch: &Tensor) -> Result<f64> {
        let x = hog_extract(patch, &self.hog)?;
        if x.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "scorer expects {} HOG features, window produced {}",
                self.weights.len(),
                x.len()
            )));
        }
        Ok(self.bias + self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    /// Windows scoring strictly above this are candidates.
    pub threshold: f64,
    pub max_per_image: usize,
    /// A window is mined only if its IoU with every ground-truth box is
    /// strictly below this.
    pub exclusion_iou: f64,
    pub stride: usize,
    /// Attach the source's scene-attribute labels to mined patches
    /// (the "Attr." setting); off mines with only the main bit (the
    /// "Neg." setting).
    pub attr_mode: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            threshold: 0.0,
            max_per_image: 10,
            exclusion_iou: 0.3,
            stride: 8,
            attr_mode: false,
        }
    }
}

/// Slide a window over each background scene, score it, and return the
/// highest-scoring windows above threshold that stay clear of every
/// ground-truth box, capped per image. Mined samples observe main = 0
/// plus, in attribute mode, their scene's labels.
pub fn mine_hard_negatives(
    score: &mut dyn FnMut(&Tensor) -> f64,
    scenes: &[SceneImage],
    layout: &TaskLayout,
    window: (usize, usize),
    cfg: &MiningConfig,
) -> Result<Vec<Sample>> {
    if cfg.max_per_image == 0 || cfg.stride == 0 {
        return Err(Error::Config(
            "mining caps and stride must be positive".into(),
        ));
    }
    let scan = WindowScan {
        window_h: window.0,
        window_w: window.1,
        stride: cfg.stride,
        scales: vec![1.0],
    };
    let mut out = Vec::new();
    for scene in scenes {
        let dets = sliding_window_detect(&scene.id, &scene.image, &scan, None, score)?;
        let mut cands: Vec<&crate::evalkit::Detection> = dets
            .iter()
            .filter(|d| {
                d.score > cfg.threshold
                    && scene
                        .gts
                        .iter()
                        .all(|g| g.bbox.iou(&d.bbox) < cfg.exclusion_iou)
            })
            .collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(cfg.max_per_image);
        let label = scene_label_for_mining(layout, scene, cfg.attr_mode)?;
        for (k, d) in cands.iter().enumerate() {
            let top = d.bbox.y.round() as usize;
            let left = d.bbox.x.round() as usize;
            let patch = crop_window(&scene.image, top, left, window.0, window.1)?;
            out.push(Sample {
                id: format!("{}_hn_{k:03}", scene.id),
                patch,
                source: scene.source,
                label,
                z: None,
            });
        }
    }
    Ok(out)
}
