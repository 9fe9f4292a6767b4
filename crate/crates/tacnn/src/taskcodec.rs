//! Label space shared by every data source.
//!
//! 18 tasks map onto 19 sigmoid bits: the main pedestrian task (bit 0),
//! eight binary pedestrian attributes (bits 1-8), the four-state
//! viewpoint on two bits (9-10), four scene attributes shared by all
//! background sources (bits 11-14) and four unshared ones (bits 15-18),
//! one or two per background source. A source annotates a fixed subset
//! of tasks; everything else is masked out. Unobserved bits store 0 by
//! convention so serialization is canonical, and the loss never reads
//! them.

use crate::error::Error;
use crate::Result;

pub const NUM_TASKS: usize = 18;
pub const NUM_BITS: usize = 19;
pub const MAIN_TASK: usize = 0;
pub const VIEWPOINT_TASK: usize = 9;
pub const VIEWPOINT_BITS: (usize, usize) = (9, 10);

pub const PED_ATTR_NAMES: [&str; 8] = [
    "backpack",
    "dark-trousers",
    "hat",
    "bag",
    "gender",
    "occlusion",
    "riding",
    "white-cloth",
];

/// The eight scene attribute kinds the generator knows how to draw.
pub const SCENE_ATTR_NAMES: [&str; 8] = [
    "sky",
    "tree",
    "building",
    "road",
    "vehicle",
    "traffic-light",
    "vertical",
    "horizontal",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    P,
    Ba,
    Bb,
    Bc,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::P, Source::Ba, Source::Bb, Source::Bc];

    pub fn tag(&self) -> &'static str {
        match self {
            Source::P => "P",
            Source::Ba => "Ba",
            Source::Bb => "Bb",
            Source::Bc => "Bc",
        }
    }

    pub fn parse(s: &str) -> Result<Source> {
        match s {
            "P" => Ok(Source::P),
            "Ba" => Ok(Source::Ba),
            "Bb" => Ok(Source::Bb),
            "Bc" => Ok(Source::Bc),
            other => Err(Error::Encoding(format!("unknown source tag {other:?}"))),
        }
    }

    /// Unshared task indices (into 0..18) this background source annotates.
    fn unshared_tasks(&self) -> &'static [usize] {
        match self {
            Source::P => &[],
            Source::Ba => &[14],
            Source::Bb => &[15, 16],
            Source::Bc => &[17],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Viewpoint {
    Front,
    Back,
    Left,
    Right,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 4] = [
        Viewpoint::Front,
        Viewpoint::Back,
        Viewpoint::Left,
        Viewpoint::Right,
    ];

    /// Two-bit code: front 00, back 01, left 10, right 11.
    pub fn bits(&self) -> (bool, bool) {
        match self {
            Viewpoint::Front => (false, false),
            Viewpoint::Back => (false, true),
            Viewpoint::Left => (true, false),
            Viewpoint::Right => (true, true),
        }
    }

    pub fn from_bits(b1: bool, b2: bool) -> Viewpoint {
        match (b1, b2) {
            (false, false) => Viewpoint::Front,
            (false, true) => Viewpoint::Back,
            (true, false) => Viewpoint::Left,
            (true, true) => Viewpoint::Right,
        }
    }

    pub fn index(&self) -> usize {
        let (b1, b2) = self.bits();
        (b1 as usize) * 2 + b2 as usize
    }

    pub fn from_index(i: usize) -> Viewpoint {
        Viewpoint::from_bits(i & 2 != 0, i & 1 != 0)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Viewpoint::Front => "front",
            Viewpoint::Back => "back",
            Viewpoint::Left => "left",
            Viewpoint::Right => "right",
        }
    }
}

/// Threshold two sigmoid outputs at 0.5 into a viewpoint state. Exactly
/// 0.5 rounds down, so an untrained net reads as front.
pub fn decode_viewpoint(p1: f64, p2: f64) -> Viewpoint {
    Viewpoint::from_bits(p1 > 0.5, p2 > 0.5)
}

/// Which of the eight scene attribute kinds sit in the shared slots and
/// which in the per-source unshared slots. The default follows the usual
/// street-scene split; any partition of the eight kinds is accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLayout {
    pub shared: [String; 4],
    pub unshared: [String; 4],
}

impl Default for TaskLayout {
    fn default() -> Self {
        TaskLayout {
            shared: [
                "sky".into(),
                "tree".into(),
                "building".into(),
                "road".into(),
            ],
            unshared: [
                "vehicle".into(),
                "traffic-light".into(),
                "vertical".into(),
                "horizontal".into(),
            ],
        }
    }
}

impl TaskLayout {
    /// Build a layout from a custom shared/unshared split. The two lists
    /// must partition the eight known scene attribute kinds.
    pub fn with_scene_split(shared: [String; 4], unshared: [String; 4]) -> Result<TaskLayout> {
        let mut seen: Vec<&str> = shared
            .iter()
            .chain(unshared.iter())
            .map(|s| s.as_str())
            .collect();
        seen.sort_unstable();
        let mut known: Vec<&str> = SCENE_ATTR_NAMES.to_vec();
        known.sort_unstable();
        if seen != known {
            return Err(Error::Config(format!(
                "scene split must partition {SCENE_ATTR_NAMES:?}; got shared {shared:?}, unshared {unshared:?}"
            )));
        }
        Ok(TaskLayout { shared, unshared })
    }

    pub fn task_name(&self, task: usize) -> &str {
        match task {
            0 => "pedestrian",
            1..=8 => PED_ATTR_NAMES[task - 1],
            9 => "viewpoint",
            10..=13 => &self.shared[task - 10],
            14..=17 => &self.unshared[task - 14],
            _ => panic!("task index {task} out of range"),
        }
    }

    /// Bits occupied by a task; every task owns one bit except viewpoint.
    pub fn task_bits(&self, task: usize) -> std::ops::Range<usize> {
        match task {
            0..=8 => task..task + 1,
            9 => 9..11,
            10..=17 => task + 1..task + 2,
            _ => panic!("task index {task} out of range"),
        }
    }

    /// Task owning a bit.
    pub fn bit_task(&self, bit: usize) -> usize {
        match bit {
            0..=8 => bit,
            9 | 10 => 9,
            11..=18 => bit - 1,
            _ => panic!("bit index {bit} out of range"),
        }
    }

    /// Tasks a source annotates. `b_main_observed` makes background
    /// patches carry an explicit main = 0 observation, the default for
    /// mined hard negatives; without it background patches leave the
    /// main bit unobserved.
    pub fn observed_tasks(&self, source: Source, b_main_observed: bool) -> Vec<usize> {
        match source {
            Source::P => (0..=9).collect(),
            b => {
                let mut tasks = Vec::new();
                if b_main_observed {
                    tasks.push(MAIN_TASK);
                }
                tasks.extend(10..=13);
                tasks.extend(b.unshared_tasks());
                tasks
            }
        }
    }

    /// Fixed observation mask for a source.
    pub fn mask_pattern(&self, source: Source, b_main_observed: bool) -> [bool; NUM_BITS] {
        let mut mask = [false; NUM_BITS];
        for task in self.observed_tasks(source, b_main_observed) {
            for bit in self.task_bits(task) {
                mask[bit] = true;
            }
        }
        mask
    }
}

/// Task groups used when ablating supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskGroup {
    Main,
    PedAttr,
    SharedScene,
    UnsharedScene,
}

pub fn task_group(task: usize) -> TaskGroup {
    match task {
        0 => TaskGroup::Main,
        1..=9 => TaskGroup::PedAttr,
        10..=13 => TaskGroup::SharedScene,
        14..=17 => TaskGroup::UnsharedScene,
        _ => panic!("task index {task} out of range"),
    }
}

// ---------------------------------------------------------------------------
// Label vectors

/// 19 label bits plus a 19-bit observation mask. The two viewpoint bits
/// are jointly observed or jointly unobserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelVector {
    pub bits: [bool; NUM_BITS],
    pub mask: [bool; NUM_BITS],
}

impl LabelVector {
    pub fn empty() -> Self {
        LabelVector {
            bits: [false; NUM_BITS],
            mask: [false; NUM_BITS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v1, v2) = VIEWPOINT_BITS;
        if self.mask[v1] != self.mask[v2] {
            return Err(Error::Encoding(
                "viewpoint bits must be jointly observed or jointly unobserved".into(),
            ));
        }
        Ok(())
    }

    pub fn observed(&self, bit: usize) -> bool {
        self.mask[bit]
    }

    /// Target value of a bit as 0/1.
    pub fn value(&self, bit: usize) -> f64 {
        if self.bits[bit] {
            1.0
        } else {
            0.0
        }
    }

    /// 19-character string over {0,1,x}, bit 0 first. Unobserved bits
    /// always serialize as 'x' regardless of the stored value.
    pub fn to_label_string(&self) -> String {
        (0..NUM_BITS)
            .map(|b| {
                if !self.mask[b] {
                    'x'
                } else if self.bits[b] {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }

    pub fn from_label_string(s: &str) -> Result<LabelVector> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != NUM_BITS {
            return Err(Error::Encoding(format!(
                "label string must have {NUM_BITS} characters, got {}",
                chars.len()
            )));
        }
        let mut lv = LabelVector::empty();
        for (i, c) in chars.iter().enumerate() {
            match c {
                '0' => {
                    lv.mask[i] = true;
                }
                '1' => {
                    lv.mask[i] = true;
                    lv.bits[i] = true;
                }
                'x' => {}
                other => {
                    return Err(Error::Encoding(format!(
                        "label character {other:?} at bit {i}; expected 0, 1 or x"
                    )))
                }
            }
        }
        lv.validate()?;
        Ok(lv)
    }

    /// Drop observations whose task group is not in `keep`. Cleared bits
    /// return to the canonical unobserved state (value 0).
    pub fn retain_groups(&self, layout: &TaskLayout, keep: &[TaskGroup]) -> LabelVector {
        let mut out = *self;
        for bit in 0..NUM_BITS {
            if !keep.contains(&task_group(layout.bit_task(bit))) {
                out.mask[bit] = false;
                out.bits[bit] = false;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Raw attribute assignments

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskValue {
    Binary(bool),
    View(Viewpoint),
}

/// A raw attribute assignment: (task index, value) pairs as they come
/// from an annotator or the generator, before masking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub entries: Vec<(usize, TaskValue)>,
}

impl Assignment {
    pub fn new() -> Self {
        Assignment::default()
    }

    pub fn set(mut self, task: usize, value: TaskValue) -> Self {
        self.entries.push((task, value));
        self
    }

    pub fn set_binary(self, task: usize, value: bool) -> Self {
        self.set(task, TaskValue::Binary(value))
    }

    pub fn set_view(self, view: Viewpoint) -> Self {
        self.set(VIEWPOINT_TASK, TaskValue::View(view))
    }

    fn get(&self, task: usize) -> Option<TaskValue> {
        self.entries
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, v)| *v)
    }
}

/// Encode a raw assignment from one source into a label vector. The mask
/// is the source's fixed pattern; observed tasks missing from the
/// assignment default to 0 (front for viewpoint). Background sources may
/// not assign the main task: it is implied 0, observed when
/// `b_main_observed` is set.
pub fn encode(
    layout: &TaskLayout,
    source: Source,
    assignment: &Assignment,
    b_main_observed: bool,
) -> Result<LabelVector> {
    let observed = layout.observed_tasks(source, b_main_observed);
    if source == Source::P && assignment.get(MAIN_TASK).is_none() {
        return Err(Error::Encoding(
            "main label is mandatory for P-source patches".into(),
        ));
    }
    for (task, _) in &assignment.entries {
        if *task >= NUM_TASKS {
            return Err(Error::Encoding(format!("task index {task} out of range")));
        }
        if source != Source::P && *task == MAIN_TASK {
            return Err(Error::Encoding(format!(
                "source {} cannot assign the main task; background patches are negatives by construction",
                source.tag()
            )));
        }
        if !observed.contains(task) {
            return Err(Error::Encoding(format!(
                "source {} cannot observe task {} ({})",
                source.tag(),
                task,
                layout.task_name(*task)
            )));
        }
    }
    let mut lv = LabelVector::empty();
    for &task in &observed {
        for bit in layout.task_bits(task) {
            lv.mask[bit] = true;
        }
        let value = if source != Source::P && task == MAIN_TASK {
            TaskValue::Binary(false)
        } else {
            assignment.get(task).unwrap_or(match task {
                VIEWPOINT_TASK => TaskValue::View(Viewpoint::Front),
                _ => TaskValue::Binary(false),
            })
        };
        match (task, value) {
            (VIEWPOINT_TASK, TaskValue::View(v)) => {
                let (b1, b2) = v.bits();
                lv.bits[VIEWPOINT_BITS.0] = b1;
                lv.bits[VIEWPOINT_BITS.1] = b2;
            }
            (VIEWPOINT_TASK, TaskValue::Binary(_)) => {
                return Err(Error::Encoding(
                    "viewpoint takes a four-state value, not a binary one".into(),
                ))
            }
            (t, TaskValue::Binary(b)) => {
                lv.bits[layout.task_bits(t).start] = b;
            }
            (t, TaskValue::View(_)) => {
                return Err(Error::Encoding(format!(
                    "task {t} ({}) takes a binary value",
                    layout.task_name(t)
                )))
            }
        }
    }
    Ok(lv)
}

/// Inverse of `encode`: list every observed task with its stored value.
pub fn decode(
    layout: &TaskLayout,
    source: Source,
    label: &LabelVector,
    b_main_observed: bool,
) -> Assignment {
    let mut a = Assignment::new();
    for task in layout.observed_tasks(source, b_main_observed) {
        if task == VIEWPOINT_TASK {
            a = a.set_view(Viewpoint::from_bits(
                label.bits[VIEWPOINT_BITS.0],
                label.bits[VIEWPOINT_BITS.1],
            ));
        } else {
            a = a.set_binary(task, label.bits[layout.task_bits(task).start]);
        }
    }
    a
}

// ---------------------------------------------------------------------------
// Importance coefficients

/// Per-task importance coefficients. The main task's coefficient is
/// pinned to 1 at this type boundary; auxiliary coefficients are floored
/// so no task's gradient signal vanishes entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct Coeffs {
    lambda: [f64; NUM_TASKS],
    pub sigma: f64,
}

pub const LAMBDA_FLOOR: f64 = 1e-3;

impl Coeffs {
    pub fn unit(sigma: f64) -> Self {
        Coeffs {
            lambda: [1.0; NUM_TASKS],
            sigma,
        }
    }

    pub fn lambda(&self) -> &[f64; NUM_TASKS] {
        &self.lambda
    }

    pub fn get(&self, task: usize) -> f64 {
        self.lambda[task]
    }

    /// Set an auxiliary coefficient, clamped to the floor. Writes to the
    /// main task are ignored; it stays at 1.
    pub fn set(&mut self, task: usize, value: f64) {
        if task == MAIN_TASK {
            return;
        }
        self.lambda[task] = value.max(LAMBDA_FLOOR);
    }

    pub fn from_values(values: &[f64], sigma: f64) -> Result<Coeffs> {
        if values.len() != NUM_TASKS {
            return Err(Error::Dimension(format!(
                "expected {NUM_TASKS} coefficients, got {}",
                values.len()
            )));
        }
        let mut c = Coeffs::unit(sigma);
        for (t, v) in values.iter().enumerate() {
            c.set(t, *v);
        }
        Ok(c)
    }
}

/// Replicate per-task coefficients onto the 19 bits. Viewpoint's
/// coefficient lands on both of its bits; the main bit is emitted as
/// exactly 1 whatever the stored value.
pub fn expand_lambda(coeffs: &Coeffs, layout: &TaskLayout) -> [f64; NUM_BITS] {
    let mut out = [0.0; NUM_BITS];
    for (bit, o) in out.iter_mut().enumerate() {
        let task = layout.bit_task(bit);
        *o = if task == MAIN_TASK {
            1.0
        } else {
            coeffs.get(task)
        };
    }
    out
}

// ---------------------------------------------------------------------------
// Output head formulations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// One sigmoid bit per label bit, jointly modeled: 19 H weights.
    JointSigmoid,
    /// Separate softmax per task: seventeen 2-state heads plus one
    /// 4-state head, (17 * 2 + 4) H = 38 H weights.
    PerTaskSoftmax,
}

pub fn toplayer_param_count(formulation: Formulation, h: usize) -> usize {
    match formulation {
        Formulation::JointSigmoid => NUM_BITS * h,
        Formulation::PerTaskSoftmax => (17 * 2 + 4) * h,
    }
}
