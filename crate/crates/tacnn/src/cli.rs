//! Command-line front end. Seven stages share one run directory and a
//! flat key=value config; every artifact is byte-stable, so rerunning a
//! stage with the same seed and settings reproduces its files exactly.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::datagen::{self, SyntheticConfig};
use crate::error::Error;
use crate::evalkit::{
    confusion_matrix, filter_reasonable, log_avg_miss_rate, miss_rate_curve, nms, read_detections,
    read_ground_truth, sliding_window_detect, write_curve_csv, write_detections, Detection,
    WindowScan, VIEWPOINT_STATES,
};
use crate::io::{self, Config, TrainedState};
use crate::model::{Geometry, TaCnnModel};
use crate::rbm::{build_prob_table, cd_train, RbmConfig};
use crate::rng::{rng_for, stream};
use crate::spv::{build_spv_model, HogParams, SpvConfig, SpvModel};
use crate::taskcodec::{TaskLayout, Viewpoint, PED_ATTR_NAMES, VIEWPOINT_BITS};
use crate::tensor::Tensor;
use crate::trainer::{
    algorithm1_train, attach_spv, mine_hard_negatives, rbm_training_items, MiningConfig,
    SeedScorer, TrainConfig,
};
use crate::Result;

/// Environment variable naming the default run directory when `--out`
/// is absent.
pub const RUN_DIR_ENV: &str = "TACNN_RUN_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "tacnn",
    version,
    about = "Multi-source multi-task pedestrian classifier: generate data, train, evaluate",
    arg_required_else_help = true
)]
struct Cli {
    /// Key=value config file, read before --set overrides.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; overrides the `seed` config key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory for artifacts (default: $TACNN_RUN_DIR, then ./run).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress the human-readable summary lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic multi-source datasets into the run directory.
    GenData,
    /// Build the structure projection model from the training patches.
    SpvBuild,
    /// Train the joint RBM offline and write the importance table.
    RbmTrain,
    /// Run the alternating training schedule and write model.ckpt.
    Train,
    /// Score held-out patches and scenes; write metric CSVs.
    Eval,
    /// Slide the trained classifier over one raw grayscale image.
    Detect {
        /// Image to scan.
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
    },
    /// Recompute the miss-rate curve from stored detections.
    Curves {
        /// Detections TSV (default: <out>/detections.tsv).
        #[arg(long, value_name = "PATH")]
        dets: Option<PathBuf>,
        /// Ground-truth TSV (default: <out>/scenes_test/scene_gt.tsv).
        #[arg(long, value_name = "PATH")]
        gt: Option<PathBuf>,
        /// Image count for the FPPI axis (default: test-scene manifest length,
        /// then the number of distinct image ids in the ground truth).
        #[arg(long, value_name = "N")]
        images: Option<usize>,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse and execute: exit 0 on success, 2 on usage errors, 1 on
/// runtime failures.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

// --- config assembly -----------------------------------------------------

/// Every key the stages read. Anything else in a config file or a --set
/// is rejected up front so typos cannot silently fall back to defaults.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    // generator
    "p_pos",
    "p_neg",
    "b_a",
    "b_b",
    "b_c",
    "test_pos",
    "test_neg",
    "test_scenes",
    "mining_scenes",
    "scene_h",
    "scene_w",
    "max_peds",
    "b_main_observed",
    // network geometry
    "in_h",
    "in_w",
    "conv_channels",
    "conv_kernels",
    "conv_pads",
    "pool_cell",
    "pool_stride",
    "fc5",
    "hidden",
    // schedule
    "outer",
    "epochs",
    "batch",
    "lr",
    "lr_decay",
    "sigma",
    "plateau_tol",
    "plateau_patience",
    "val_fraction",
    "early_stop",
    "use_spv",
    "use_prob_table",
    "constant_evidence",
    // joint RBM
    "rbm_hidden",
    "rbm_epochs",
    "rbm_lr",
    "rbm_batch",
    "rbm_down_h",
    "rbm_down_w",
    // projection vectors
    "spv_level1",
    "spv_level2",
    "spv_standardize",
    // hard-negative mining
    "mine",
    "mine_threshold",
    "mine_max_per_image",
    "mine_exclusion_iou",
    "mine_stride",
    "mine_attr",
    "scorer_epochs",
    "scorer_lr",
    // evaluation
    "eval_stride",
    "eval_nms",
    "eval_iou",
    "detect_threshold",
];

fn assemble_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for spec in &cli.sets {
        cfg.apply_set(spec)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    for (k, _) in cfg.entries() {
        if !KNOWN_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(cfg)
}

fn usize4(cfg: &Config, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
    let Some(raw) = cfg.get(key) else {
        return Ok(default);
    };
    let bad = || {
        Error::Config(format!(
            "key {key}: expected four comma-separated integers, got {raw:?}"
        ))
    };
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| bad())
}

fn spv_from(cfg: &Config) -> Result<SpvConfig> {
    let d = SpvConfig::default();
    Ok(SpvConfig {
        hog: HogParams::default(),
        level1: cfg.get_usize("spv_level1", d.level1)?,
        level2: cfg.get_usize("spv_level2", d.level2)?,
        standardize: cfg.get_bool("spv_standardize", d.standardize)?,
    })
}

fn geometry_from(cfg: &Config) -> Result<Geometry> {
    let d = Geometry::default();
    let spv = spv_from(cfg)?;
    Ok(Geometry {
        in_ch: d.in_ch,
        in_h: cfg.get_usize("in_h", d.in_h)?,
        in_w: cfg.get_usize("in_w", d.in_w)?,
        conv_channels: usize4(cfg, "conv_channels", d.conv_channels)?,
        conv_kernels: usize4(cfg, "conv_kernels", d.conv_kernels)?,
        conv_pads: usize4(cfg, "conv_pads", d.conv_pads)?,
        pool_cell: cfg.get_usize("pool_cell", d.pool_cell)?,
        pool_stride: cfg.get_usize("pool_stride", d.pool_stride)?,
        fc5: cfg.get_usize("fc5", d.fc5)?,
        hidden: cfg.get_usize("hidden", d.hidden)?,
        // the fusion width always tracks the projection tree shape
        spv_dim: 2 * spv.level1 * spv.level2,
    })
}

fn synth_from(cfg: &Config) -> Result<SyntheticConfig> {
    let d = SyntheticConfig::default();
    Ok(SyntheticConfig {
        patch_h: cfg.get_usize("in_h", d.patch_h)?,
        patch_w: cfg.get_usize("in_w", d.patch_w)?,
        p_pos: cfg.get_usize("p_pos", d.p_pos)?,
        p_neg: cfg.get_usize("p_neg", d.p_neg)?,
        b_counts: [
            cfg.get_usize("b_a", d.b_counts[0])?,
            cfg.get_usize("b_b", d.b_counts[1])?,
            cfg.get_usize("b_c", d.b_counts[2])?,
        ],
        test_pos: cfg.get_usize("test_pos", d.test_pos)?,
        test_neg: cfg.get_usize("test_neg", d.test_neg)?,
        test_scene_count: cfg.get_usize("test_scenes", d.test_scene_count)?,
        mining_scene_count: cfg.get_usize("mining_scenes", d.mining_scene_count)?,
        scene_h: cfg.get_usize("scene_h", d.scene_h)?,
        scene_w: cfg.get_usize("scene_w", d.scene_w)?,
        max_peds_per_scene: cfg.get_usize("max_peds", d.max_peds_per_scene)?,
        attr_probs: d.attr_probs,
        appearance: d.appearance,
        renderer: d.renderer,
        layout: TaskLayout::default(),
        b_main_observed: cfg.get_bool("b_main_observed", d.b_main_observed)?,
    })
}

fn train_from(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let rd = RbmConfig::default();
    let epochs = cfg.get_usize("epochs", d.epochs_per_outer)?;
    let mut outer = cfg.get_usize("outer", d.outer_iters)?;
    let mut epochs_per_outer = epochs;
    if epochs == 0 {
        // documented idiom: a zero epoch budget means "write the
        // initialized model and stop"
        outer = 0;
        epochs_per_outer = 1;
    }
    Ok(TrainConfig {
        outer_iters: outer,
        epochs_per_outer,
        batch: cfg.get_usize("batch", d.batch)?,
        learning_rate: cfg.get_f64("lr", d.learning_rate)?,
        lr_decay: cfg.get_f64("lr_decay", d.lr_decay)?,
        seed: cfg.get_u64("seed", 0)?,
        sigma: cfg.get_f64("sigma", d.sigma)?,
        rbm: RbmConfig {
            n_hidden: cfg.get_usize("rbm_hidden", rd.n_hidden)?,
            epochs: cfg.get_usize("rbm_epochs", rd.epochs)?,
            learning_rate: cfg.get_f64("rbm_lr", rd.learning_rate)?,
            batch: cfg.get_usize("rbm_batch", rd.batch)?,
        },
        rbm_down: (
            cfg.get_usize("rbm_down_h", d.rbm_down.0)?,
            cfg.get_usize("rbm_down_w", d.rbm_down.1)?,
        ),
        use_spv: cfg.get_bool("use_spv", d.use_spv)?,
        use_prob_table: cfg.get_bool("use_prob_table", d.use_prob_table)?,
        constant_evidence: cfg.get_bool("constant_evidence", d.constant_evidence)?,
        geometry: geometry_from(cfg)?,
        plateau_rel_tol: cfg.get_f64("plateau_tol", d.plateau_rel_tol)?,
        plateau_patience: cfg.get_usize("plateau_patience", d.plateau_patience)?,
        val_fraction: cfg.get_f64("val_fraction", d.val_fraction)?,
        early_stop: cfg.get_bool("early_stop", d.early_stop)?,
    })
}

fn mining_from(cfg: &Config) -> Result<MiningConfig> {
    let d = MiningConfig::default();
    Ok(MiningConfig {
        threshold: cfg.get_f64("mine_threshold", d.threshold)?,
        max_per_image: cfg.get_usize("mine_max_per_image", d.max_per_image)?,
        exclusion_iou: cfg.get_f64("mine_exclusion_iou", d.exclusion_iou)?,
        stride: cfg.get_usize("mine_stride", d.stride)?,
        attr_mode: cfg.get_bool("mine_attr", d.attr_mode)?,
    })
}

// --- stage bodies ----------------------------------------------------------

fn execute(cli: Cli) -> Result<()> {
    let cfg = assemble_config(&cli)?;
    let out = match &cli.out {
        Some(p) => p.clone(),
        None => std::env::var_os(RUN_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("run")),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    cfg.save(&out.join("config.txt"))?;
    let quiet = cli.quiet;
    match &cli.cmd {
        Cmd::GenData => gen_data(&cfg, &out, quiet),
        Cmd::SpvBuild => spv_build(&cfg, &out, quiet),
        Cmd::RbmTrain => rbm_train(&cfg, &out, quiet),
        Cmd::Train => train(&cfg, &out, quiet),
        Cmd::Eval => eval(&cfg, &out, quiet),
        Cmd::Detect { image } => detect(&cfg, &out, image, quiet),
        Cmd::Curves { dets, gt, images } => {
            curves(&cfg, &out, dets.as_deref(), gt.as_deref(), *images, quiet)
        }
    }
}

fn gen_data(cfg: &Config, out: &Path, quiet: bool) -> Result<()> {
    let synth = synth_from(cfg)?;
    let seed = cfg.get_u64("seed", 0)?;
    let data = datagen::generate(&synth, seed)?;
    io::save_dataset(&out.join("train"), &data.train)?;
    io::save_dataset(&out.join("test"), &data.test)?;
    io::save_scenes(&out.join("scenes_test"), &data.test_scenes)?;
    io::save_scenes(&out.join("scenes_mine"), &data.mining_scenes)?;
    if !quiet {
        let c = data.train.counts();
        println!(
            "gen-data: {} train ({} P, {} Ba, {} Bb, {} Bc), {} test, {} test scenes, {} mining scenes -> {}",
            data.train.samples.len(),
            c[0],
            c[1],
            c[2],
            c[3],
            data.test.samples.len(),
            data.test_scenes.len(),
            data.mining_scenes.len(),
            out.display()
        );
    }
    Ok(())
}

fn spv_build(cfg: &Config, out: &Path, quiet: bool) -> Result<()> {
    let ds = io::load_dataset(&out.join("train"))?;
    let spv_cfg = spv_from(cfg)?;
    let seed = cfg.get_u64("seed", 0)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in &ds.samples {
        if !s.label.mask[0] {
            continue;
        }
        if s.label.bits[0] {
            pos.push(s.patch.clone());
        } else {
            neg.push(s.patch.clone());
        }
    }
    let model = build_spv_model(&pos, &neg, &spv_cfg, seed)?;
    let path = out.join("spv.ckpt");
    io::save_spv(&path, &model)?;
    if !quiet {
        println!(
            "spv-build: {} positives, {} negatives -> projection dim {} ({})",
            pos.len(),
            neg.len(),
            model.dim(),
            path.display()
        );
    }
    Ok(())
}

fn rbm_train(cfg: &Config, out: &Path, quiet: bool) -> Result<()> {
    let tc = train_from(cfg)?;
    let ds = io::load_dataset(&out.join("train"))?;
    // mirror the training stage exactly: projections attached when the
    // schedule would attach them, fills from the same initialized model
    let ds = if tc.use_spv {
        let spv = io::load_spv(&out.join("spv.ckpt"))?;
        attach_spv(&ds, &spv, tc.geometry.spv_dim)?
    } else {
        ds
    };
    let mut rng = rng_for(tc.seed, stream::MODEL_INIT);
    let model = TaCnnModel::init(&tc.geometry, &mut rng)?;
    let items = rbm_training_items(&model, &ds, tc.rbm_down)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = items
        .iter()
        .map(|(_, x, y)| (x.clone(), y.clone()))
        .collect();
    let rbm = cd_train(&pairs, &tc.rbm, tc.seed)?;
    let table = build_prob_table(&rbm, &items)?;
    io::save_rbm(&out.join("rbm.ckpt"), &rbm)?;
    io::write_prob_table(&out.join("prob_table.tsv"), &table)?;
    if !quiet {
        let mean = table.entries.iter().map(|(_, w)| w).sum::<f64>() / table.entries.len() as f64;
        println!(
            "rbm-train: {}+{} visible, {} hidden; importance over {} samples (mean weight {:.4}) -> {}",
            rbm.n_x,
            rbm.n_y,
            rbm.n_h,
            table.entries.len(),
            mean,
            out.display()
        );
    }
    Ok(())
}

fn train(cfg: &Config, out: &Path, quiet: bool) -> Result<()> {
    let layout = TaskLayout::default();
    let tc = train_from(cfg)?;
    let mut ds = io::load_dataset(&out.join("train"))?;
    let spv = if tc.use_spv {
        Some(io::load_spv(&out.join("spv.ckpt"))?)
    } else {
        None
    };
    if cfg.get_bool("mine", false)? {
        let mine_cfg = mining_from(cfg)?;
        let scenes = io::load_scenes(&out.join("scenes_mine"))?;
        let scorer = SeedScorer::train(
            &ds,
            &HogParams::default(),
            cfg.get_usize("scorer_epochs", 40)?,
            cfg.get_f64("scorer_lr", 0.5)?,
            tc.seed,
        )?;
        let mut score = |t: &Tensor| scorer.score(t).unwrap_or(f64::NEG_INFINITY);
        let mined = mine_hard_negatives(
            &mut score,
            &scenes,
            &layout,
            (tc.geometry.in_h, tc.geometry.in_w),
            &mine_cfg,
        )?;
        if !quiet {
            println!(
                "train: mined {} hard negatives from {} scenes",
                mined.len(),
                scenes.len()
            );
        }
        ds.samples.extend(mined);
        ds.validate(&layout)?;
    }
    let outcome = algorithm1_train(&ds, &layout, spv.as_ref(), &tc, Some(out))?;
    let state = TrainedState {
        model: outcome.model,
        spv,
        rbm: outcome.rbm,
        coeffs: outcome.coeffs,
        config: cfg.clone(),
    };
    let path = out.join("model.ckpt");
    io::save_state(&path, &state)?;
    if !quiet {
        match outcome.log.epochs.last() {
            Some(row) => println!(
                "train: {} epochs, final train loss {:.6}, val loss {:.6} -> {}",
                outcome.log.epochs.len(),
                row.train_loss,
                row.val_loss,
                path.display()
            ),
            None => println!("train: 0 epochs, initialized model -> {}", path.display()),
        }
        let l = state.coeffs.lambda();
        println!(
            "train: lambda main {}, aux in [{:.4}, {:.4}]",
            l[0],
            l[1..].iter().cloned().fold(f64::INFINITY, f64::min),
            l[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
    }
    Ok(())
}

/// Main-bit probability of each window, with projections when the
/// checkpoint carries a projection model.
fn window_scorer<'a>(
    model: &'a TaCnnModel,
    spv: Option<&'a SpvModel>,
) -> impl FnMut(&Tensor) -> f64 + 'a {
    let zero = vec![0.0; model.geometry.spv_dim];
    move |w: &Tensor| {
        let z = match spv {
            Some(m) => m.project_standardized(w).expect("window projection"),
            None => zero.clone(),
        };
        model.forward(w, &z).expect("window forward").probs[0]
    }
}

fn scan_from(cfg: &Config, g: &Geometry) -> Result<WindowScan> {
    Ok(WindowScan {
        window_h: g.in_h,
        window_w: g.in_w,
        stride: cfg.get_usize("eval_stride", 8)?,
        scales: vec![1.0],
    })
}

fn eval(cfg: &Config, out: &Path, quiet: bool) -> Result<()> {
    let state = io::load_state(&out.join("model.ckpt"))?;
    let g = state.model.geometry.clone();
    let test = io::load_dataset(&out.join("test"))?;

    // patch-level task metrics
    let zero_z = vec![0.0; g.spv_dim];
    let mut main_hits = 0usize;
    let mut main_n = 0usize;
    let mut attr_hits = [0usize; 8];
    let mut attr_n = [0usize; 8];
    let mut vp_true = Vec::new();
    let mut vp_pred = Vec::new();
    for s in &test.samples {
        let z = match &state.spv {
            Some(m) => m.project_standardized(&s.patch)?,
            None => zero_z.clone(),
        };
        let pred = state.model.forward(&s.patch, &z)?;
        if s.label.mask[0] {
            main_n += 1;
            if (pred.probs[0] > 0.5) == s.label.bits[0] {
                main_hits += 1;
            }
        }
        if s.label.mask[0] && s.label.bits[0] {
            for (a, (hits, n)) in attr_hits.iter_mut().zip(attr_n.iter_mut()).enumerate() {
                let bit = 1 + a;
                if s.label.mask[bit] {
                    *n += 1;
                    if (pred.probs[bit] > 0.5) == s.label.bits[bit] {
                        *hits += 1;
                    }
                }
            }
            if s.label.mask[VIEWPOINT_BITS.0] && s.label.mask[VIEWPOINT_BITS.1] {
                let t = Viewpoint::from_bits(
                    s.label.bits[VIEWPOINT_BITS.0],
                    s.label.bits[VIEWPOINT_BITS.1],
                );
                vp_true.push(t.index());
                vp_pred.push(pred.viewpoint().index());
            }
        }
    }
    let confusion = confusion_matrix(&vp_true, &vp_pred)?;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            f64::NAN
        } else {
            num as f64 / den as f64
        }
    };
    let diag: usize = (0..VIEWPOINT_STATES).map(|i| confusion.counts[i][i]).sum();
    let vp_acc = ratio(diag, vp_true.len());

    // scene-level detection under the benchmark protocol
    let scenes = io::load_scenes(&out.join("scenes_test"))?;
    let scan = scan_from(cfg, &g)?;
    let overlap = cfg.get_f64("eval_nms", 0.5)?;
    let iou = cfg.get_f64("eval_iou", 0.5)?;
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts = Vec::new();
    {
        let mut score = window_scorer(&state.model, state.spv.as_ref());
        for scene in &scenes {
            let raw = sliding_window_detect(&scene.id, &scene.image, &scan, None, &mut score)?;
            dets.extend(nms(&raw, overlap));
            gts.extend(scene.gts.iter().cloned());
        }
    }
    let reasonable = filter_reasonable(&gts, 49.0, 0.65);
    let curve = miss_rate_curve(&dets, &reasonable, scenes.len(), iou)?;
    let lamr = log_avg_miss_rate(&curve);

    write_detections(&out.join("detections.tsv"), &dets)?;
    write_curve_csv(&out.join("curve.csv"), &curve)?;

    let mut metrics = String::from("metric,value\n");
    let _ = writeln!(metrics, "lamr,{lamr}");
    let _ = writeln!(metrics, "main_accuracy,{}", ratio(main_hits, main_n));
    for (a, name) in PED_ATTR_NAMES.iter().enumerate() {
        let _ = writeln!(
            metrics,
            "attr_{name}_accuracy,{}",
            ratio(attr_hits[a], attr_n[a])
        );
    }
    let _ = writeln!(metrics, "viewpoint_accuracy,{vp_acc}");
    let mpath = out.join("metrics.csv");
    std::fs::write(&mpath, metrics).map_err(|e| Error::io(mpath.display().to_string(), e))?;

    let mut ctext = String::from("true,front,back,left,right\n");
    for (i, v) in Viewpoint::ALL.iter().enumerate() {
        let row = confusion.counts[i];
        let _ = writeln!(
            ctext,
            "{},{},{},{},{}",
            v.name(),
            row[0],
            row[1],
            row[2],
            row[3]
        );
    }
    let cpath = out.join("confusion.csv");
    std::fs::write(&cpath, ctext).map_err(|e| Error::io(cpath.display().to_string(), e))?;

    if !quiet {
        println!(
            "eval: main accuracy {:.4} on {} patches, viewpoint accuracy {:.4} on {} positives",
            ratio(main_hits, main_n),
            main_n,
            vp_acc,
            vp_true.len()
        );
        println!(
            "LAMR {lamr} ({} scenes, {} ground truths, {} detections)",
            scenes.len(),
            reasonable.len(),
            dets.len()
        );
    }
    Ok(())
}

fn detect(cfg: &Config, out: &Path, image: &Path, quiet: bool) -> Result<()> {
    let state = io::load_state(&out.join("model.ckpt"))?;
    let g = state.model.geometry.clone();
    let img = io::read_patch(image)?;
    let (c, _, _) = img.dims3()?;
    if c != g.in_ch {
        return Err(Error::Config(format!(
            "image has {c} channels, the model expects {}",
            g.in_ch
        )));
    }
    let scan = scan_from(cfg, &g)?;
    let overlap = cfg.get_f64("eval_nms", 0.5)?;
    let thr = cfg.get_f64("detect_threshold", 0.5)?;
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let raw = {
        let mut score = window_scorer(&state.model, state.spv.as_ref());
        sliding_window_detect(&id, &img, &scan, None, &mut score)?
    };
    let kept: Vec<Detection> = nms(&raw, overlap)
        .into_iter()
        .filter(|d| d.score >= thr)
        .collect();
    let path = out.join("detections.tsv");
    write_detections(&path, &kept)?;
    if !quiet {
        println!(
            "detect: {} of {} windows at threshold {} -> {}",
            kept.len(),
            raw.len(),
            thr,
            path.display()
        );
    }
    Ok(())
}

fn scene_manifest_len(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join("scenes.tsv")).ok()?;
    Some(text.lines().skip(1).filter(|l| !l.is_empty()).count())
}

fn curves(
    cfg: &Config,
    out: &Path,
    dets: Option<&Path>,
    gt: Option<&Path>,
    images: Option<usize>,
    quiet: bool,
) -> Result<()> {
    let dpath = dets
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("detections.tsv"));
    let gpath = gt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("scenes_test").join("scene_gt.tsv"));
    let dets = read_detections(&dpath)?;
    let gts = read_ground_truth(&gpath)?;
    let n_images = match images {
        Some(n) => n,
        None => scene_manifest_len(&out.join("scenes_test")).unwrap_or_else(|| {
            let ids: std::collections::BTreeSet<&str> =
                gts.iter().map(|g| g.image_id.as_str()).collect();
            ids.len()
        }),
    };
    let reasonable = filter_reasonable(&gts, 49.0, 0.65);
    let curve = miss_rate_curve(&dets, &reasonable, n_images, cfg.get_f64("eval_iou", 0.5)?)?;
    let lamr = log_avg_miss_rate(&curve);
    write_curve_csv(&out.join("curve.csv"), &curve)?;
    if !quiet {
        println!(
            "LAMR {lamr} over {n_images} images ({} detections, {} ground truths)",
            dets.len(),
            reasonable.len()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(run_from(["tacnn"]), 2);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_from(["tacnn", "--help"]), 0);
        assert_eq!(run_from(["tacnn", "--version"]), 0);
        assert_eq!(run_from(["tacnn", "train", "--help"]), 0);
    }

    #[test]
    fn unknown_subcommand_or_flag_is_a_usage_error() {
        assert_eq!(run_from(["tacnn", "frobnicate"]), 2);
        assert_eq!(run_from(["tacnn", "train", "--bogus"]), 2);
    }

    #[test]
    fn unknown_config_key_is_a_runtime_error() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("r");
        let out = out.to_str().unwrap();
        assert_eq!(
            run_from(["tacnn", "gen-data", "--out", out, "--set", "epoch=3"]),
            1
        );
        assert_eq!(
            run_from(["tacnn", "gen-data", "--out", out, "--set", "nonsense"]),
            1
        );
    }

    #[test]
    fn seed_flag_beats_config_key_and_sets() {
        let dir = tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        std::fs::write(&file, "seed=3\nepochs=2\n").unwrap();
        let cli = Cli::try_parse_from([
            "tacnn",
            "train",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "seed=4",
            "--seed",
            "9",
        ])
        .unwrap();
        let cfg = assemble_config(&cli).unwrap();
        assert_eq!(cfg.get_u64("seed", 0).unwrap(), 9);
        assert_eq!(cfg.get_usize("epochs", 0).unwrap(), 2);
    }

    #[test]
    fn spv_levels_drive_the_fusion_width() {
        let mut cfg = Config::new();
        cfg.set("spv_level1", 3);
        cfg.set("spv_level2", 4);
        let g = geometry_from(&cfg).unwrap();
        assert_eq!(g.spv_dim, 24);
        let mut bad = Config::new();
        bad.set("conv_channels", "1,2,3");
        assert!(geometry_from(&bad).is_err());
        let mut four = Config::new();
        four.set("conv_channels", "1, 2, 3, 4");
        assert_eq!(geometry_from(&four).unwrap().conv_channels, [1, 2, 3, 4]);
    }

    /// Small-but-real settings shared by the pipeline tests: tiny
    /// network, few samples, one short training block.
    const TINY: &[&str] = &[
        "--set",
        "p_pos=48",
        "--set",
        "p_neg=48",
        "--set",
        "b_a=6",
        "--set",
        "b_b=6",
        "--set",
        "b_c=6",
        "--set",
        "test_pos=8",
        "--set",
        "test_neg=8",
        "--set",
        "test_scenes=2",
        "--set",
        "mining_scenes=1",
        "--set",
        "conv_channels=2,2,3,2",
        "--set",
        "fc5=8",
        "--set",
        "hidden=6",
        "--set",
        "spv_level1=2",
        "--set",
        "spv_level2=2",
        "--set",
        "rbm_hidden=4",
        "--set",
        "rbm_epochs=2",
        "--set",
        "outer=1",
        "--set",
        "epochs=1",
        "--set",
        "batch=8",
        "--set",
        "lr=0.002",
    ];

    fn stage(sub: &str, out: &Path, extra: &[&str]) -> i32 {
        let mut args: Vec<String> = vec![
            "tacnn".into(),
            sub.into(),
            "--seed".into(),
            "5".into(),
            "--quiet".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ];
        args.extend(TINY.iter().map(|s| s.to_string()));
        args.extend(extra.iter().map(|s| s.to_string()));
        run_from(args)
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(stage("gen-data", &out, &[]), 0);
        assert_eq!(stage("spv-build", &out, &[]), 0);
        assert_eq!(stage("rbm-train", &out, &["--set", "use_spv=true"]), 0);
        assert_eq!(
            stage(
                "train",
                &out,
                &[
                    "--set",
                    "use_spv=true",
                    "--set",
                    "mine=true",
                    "--set",
                    "mine_max_per_image=3",
                    "--set",
                    "scorer_epochs=5"
                ]
            ),
            0
        );
        assert_eq!(stage("eval", &out, &[]), 0);
        assert_eq!(stage("curves", &out, &[]), 0);

        for f in [
            "train/manifest.tsv",
            "spv.ckpt",
            "rbm.ckpt",
            "prob_table.tsv",
            "model.ckpt",
            "epochs.csv",
            "lambda.txt",
            "metrics.csv",
            "confusion.csv",
            "curve.csv",
            "detections.tsv",
            "config.txt",
        ] {
            assert!(out.join(f).is_file(), "missing artifact {f}");
        }
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next(), Some("metric,value"));
        assert!(lines.next().unwrap().starts_with("lamr,"));
        assert!(metrics.contains("attr_backpack_accuracy,"));

        // the trained state reloads and the config snapshot rode along
        let state = io::load_state(&out.join("model.ckpt")).unwrap();
        assert!(state.spv.is_some());
        assert!(state.rbm.is_some());
        assert_eq!(state.config.get("epochs"), Some("1"));

        // detect accepts any matching-geometry raw image
        let img = Tensor::zeros(vec![1, 70, 40]);
        let ipath = dir.path().join("field.raw");
        io::write_patch(&ipath, &img).unwrap();
        assert_eq!(
            stage(
                "detect",
                &out,
                &[
                    "--image",
                    ipath.to_str().unwrap(),
                    "--set",
                    "detect_threshold=0.0"
                ]
            ),
            0
        );
        let dets = std::fs::read_to_string(out.join("detections.tsv")).unwrap();
        for line in dets.lines() {
            assert!(line.starts_with("field\t"), "{line}");
        }
    }

    #[test]
    fn epochs_zero_writes_the_initialized_model() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(stage("gen-data", &out, &[]), 0);
        assert_eq!(
            stage(
                "train",
                &out,
                &["--set", "epochs=0", "--set", "use_prob_table=false"]
            ),
            0
        );
        let state = io::load_state(&out.join("model.ckpt")).unwrap();
        assert!(state.coeffs.lambda().iter().all(|&l| l == 1.0));
        let epochs = std::fs::read_to_string(out.join("epochs.csv")).unwrap();
        assert_eq!(epochs.trim(), "outer,epoch,train_loss,val_loss");

        // the checkpoint equals a fresh initialization at the same seed
        let tc = train_from(&state.config).unwrap();
        let mut rng = rng_for(5, stream::MODEL_INIT);
        let fresh = TaCnnModel::init(&tc.geometry, &mut rng).unwrap();
        assert_eq!(state.model, fresh);
    }

    #[test]
    fn missing_upstream_artifact_fails_at_runtime() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        // train before gen-data: no dataset manifest
        assert_eq!(stage("train", &out, &[]), 1);
        // eval before train: no checkpoint
        assert_eq!(stage("eval", &out, &[]), 1);
    }
}
