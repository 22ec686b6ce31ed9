//! Deterministic synthetic multimodal tasks on colored grid images.
//!
//! An image is a `g × g` grid of uniformly colored cells; each cell is one
//! patch of `cell_pixels² · 3` raw values. Questions ask for a count, the
//! existence of a color, or the color at a cell; a text-only copy task is
//! used to pretrain the base language model. Every sample is a pure function
//! of `(manifest seed, sample seed, class index)`, so generation can be
//! split across workers by sample index without changing its output.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

/// Named RGB colors; index 0 is the background.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Count,
    Existence,
    Color,
    Copy,
}

impl TaskKind {
    pub fn needs_image(self) -> bool {
        !matches!(self, TaskKind::Copy)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Count => "count",
            TaskKind::Existence => "existence",
            TaskKind::Color => "color",
            TaskKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "count" => Ok(TaskKind::Count),
            "existence" => Ok(TaskKind::Existence),
            "color" => Ok(TaskKind::Color),
            "copy" => Ok(TaskKind::Copy),
            _ => Err(()),
        }
    }
}

/// Token-id layout shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Vocab {
    pub size: usize,
    pub max_digit: usize,
    pub num_colors: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const SEP: usize = 2;
    pub const HOW: usize = 3;
    pub const MANY: usize = 4;
    pub const IS: usize = 5;
    pub const THERE: usize = 6;
    pub const WHAT: usize = 7;
    pub const COLOR: usize = 8;
    pub const CELL: usize = 9;
    pub const QUESTION: usize = 10;
    pub const YES: usize = 11;
    pub const NO: usize = 12;
    pub const COPY: usize = 13;
    const FIRST_DIGIT: usize = 14;

    const WORDS: [&'static str; 14] = [
        "<pad>", "<bos>", "<sep>", "how", "many", "is", "there", "what", "color", "cell", "?", "yes", "no",
        "copy",
    ];

    pub fn required_size(max_digit: usize, num_colors: usize) -> usize {
        Self::FIRST_DIGIT + max_digit + 1 + num_colors
    }

    pub fn new(size: usize, max_digit: usize, num_colors: usize) -> Result<Self, ConfigError> {
        let needed = Self::required_size(max_digit, num_colors);
        if needed > size {
            return Err(ConfigError::VocabularyTooSmall { needed, have: size });
        }
        Ok(Self {
            size,
            max_digit,
            num_colors,
        })
    }

    pub fn digit(&self, d: usize) -> usize {
        assert!(d <= self.max_digit, "digit {d} beyond vocabulary");
        Self::FIRST_DIGIT + d
    }

    pub fn color(&self, c: usize) -> usize {
        assert!(c < self.num_colors, "color {c} beyond alphabet");
        Self::FIRST_DIGIT + self.max_digit + 1 + c
    }

    /// First id that copy content may use; everything from `yes` upward.
    pub fn content_start(&self) -> usize {
        Self::YES
    }

    pub fn word(&self, id: usize) -> String {
        let digits = Self::FIRST_DIGIT..Self::FIRST_DIGIT + self.max_digit + 1;
        let colors = digits.end..digits.end + self.num_colors;
        if id < Self::FIRST_DIGIT {
            Self::WORDS[id].to_string()
        } else if digits.contains(&id) {
            (id - digits.start).to_string()
        } else if colors.contains(&id) {
            PALETTE[id - colors.start].0.to_string()
        } else {
            format!("w{id}")
        }
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Raw pixels of a grid image, one patch per cell, patches in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    grid: usize,
    patch_dim: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(grid: usize, patch_dim: usize, data: Vec<f64>) -> Result<Self> {
        if grid == 0 || patch_dim == 0 || data.len() != grid * grid * patch_dim {
            return Err(Error::shape("patch grid", &[grid * grid, patch_dim], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch grid"));
        }
        Ok(Self {
            grid,
            patch_dim,
            data,
        })
    }

    /// Rasterizes palette indices (raster order) with optional uniform pixel noise.
    pub fn render(cells: &[usize], cell_pixels: usize, noise: f64, rng: Option<&mut Rng>) -> Self {
        let p = cells.len();
        let grid = (p as f64).sqrt().round() as usize;
        assert_eq!(grid * grid, p, "cell count must be a square");
        let patch_dim = 3 * cell_pixels * cell_pixels;
        let mut data = Vec::with_capacity(p * patch_dim);
        let mut rng = rng;
        for &c in cells {
            let rgb = PALETTE[c].1;
            for _ in 0..cell_pixels * cell_pixels {
                for ch in rgb {
                    let jitter = match (&mut rng, noise > 0.0) {
                        (Some(r), true) => r.random_range(-noise..noise),
                        _ => 0.0,
                    };
                    data.push(ch + jitter);
                }
            }
        }
        Self {
            grid,
            patch_dim,
            data,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// `patch_dim × p` matrix, one column per patch.
    pub fn to_columns(&self) -> Tensor {
        Tensor::from_vec(&[self.patches(), self.patch_dim], self.data.clone())
            .expect("consistent grid")
            .transpose()
    }

    /// Nearest palette color of each cell among the first `num_colors`.
    pub fn decode_cells(&self, num_colors: usize) -> Vec<usize> {
        (0..self.patches())
            .map(|i| {
                let patch = self.patch(i);
                let px = patch.len() / 3;
                let mut mean = [0.0; 3];
                for (k, v) in patch.iter().enumerate() {
                    mean[k % 3] += v / px as f64;
                }
                (0..num_colors)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..3).map(|k| (mean[k] - PALETTE[a].1[k]).powi(2)).sum();
                        let db: f64 = (0..3).map(|k| (mean[k] - PALETTE[b].1[k]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .expect("at least one color")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: TaskKind,
    pub image: Option<PatchGrid>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    /// True exactly at answer positions of [`tokens`](Self::tokens).
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.extend(std::iter::repeat_n(true, self.answer.len()));
        m
    }

    /// Teacher-forced view: input ids, next-token targets and which targets count.
    pub fn next_token_view(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let tokens = self.tokens();
        let mask = self.loss_mask();
        let n = tokens.len() - 1;
        (tokens[..n].to_vec(), tokens[1..].to_vec(), mask[1..].to_vec())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "tokens": self.tokens(),
            "loss_mask": self.loss_mask(),
            "image": self.image.as_ref().map(|g| serde_json::json!({
                "grid": g.grid,
                "patch_dim": g.patch_dim,
                "pixels": g.data,
            })),
        })
    }
}

/// Everything needed to generate samples of one task mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kinds: Vec<TaskKind>,
    pub grid: usize,
    pub num_colors: usize,
    pub max_count: usize,
    pub copy_len: usize,
    pub cell_pixels: usize,
    pub pixel_noise: f64,
    pub max_text_len: usize,
    pub vocab: Vocab,
    /// Manifest seed; mixed into every per-sample stream.
    pub base_seed: u64,
}

impl TaskSpec {
    pub fn from_config(cfg: &RunConfig, kinds: &[TaskKind]) -> Result<Self> {
        let m = &cfg.model;
        let vocab = Vocab::new(m.vocab_size, m.patches, cfg.data.num_colors)
            .map_err(|e| Error::Config(vec![e]))?;
        let grid = (m.patches as f64).sqrt().round() as usize;
        if kinds.iter().any(|k| k.needs_image()) && grid * grid != m.patches {
            return Err(Error::Config(vec![ConfigError::PatchesNotSquare(m.patches)]));
        }
        Ok(Self {
            kinds: kinds.to_vec(),
            grid,
            num_colors: cfg.data.num_colors,
            max_count: cfg.data.max_count,
            copy_len: cfg.pretrain.copy_len,
            cell_pixels: m.cell_pixels,
            pixel_noise: cfg.data.pixel_noise,
            max_text_len: m.max_text_len,
            vocab,
            base_seed: m.seed,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Number of answer classes a kind cycles through.
    pub fn classes(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Count => self.max_count + 1,
            TaskKind::Existence => 2,
            TaskKind::Color => self.num_colors,
            TaskKind::Copy => 1,
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_colors < 2 {
            return Err(Error::Config(vec![ConfigError::TooFewColors(self.num_colors)]));
        }
        if self.max_count > self.cells() {
            return Err(Error::Config(vec![ConfigError::MaxCountTooLarge {
                max_count: self.max_count,
                patches: self.cells(),
            }]));
        }
        Vocab::new(self.vocab.size, self.cells().max(self.vocab.max_digit), self.num_colors)
            .map_err(|e| Error::Config(vec![e]))?;
        Ok(())
    }

    fn sample_rng(&self, sample_seed: u64) -> Rng {
        rng::derive(self.base_seed, streams::SAMPLE_BASE.wrapping_add(sample_seed))
    }

    /// Cells not holding the target: background or another foreground color.
    fn filler(&self, rng: &mut Rng, avoid: usize) -> usize {
        if rng.random_bool(0.5) {
            return 0;
        }
        loop {
            let c = rng.random_range(1..self.num_colors);
            if c != avoid || self.num_colors == 2 {
                return if c == avoid { 0 } else { c };
            }
        }
    }

    /// One sample of `kind` whose answer is class `class`.
    pub fn sample(&self, kind: TaskKind, class: usize, sample_seed: u64) -> Sample {
        let v = &self.vocab;
        let mut rng = self.sample_rng(sample_seed);
        let p = self.cells();
        let draw_image = |cells: &[usize], rng: &mut Rng| {
            Some(PatchGrid::render(cells, self.cell_pixels, self.pixel_noise, Some(rng)))
        };
        match kind {
            TaskKind::Count | TaskKind::Existence => {
                let target = rng.random_range(1..self.num_colors);
                let k = match kind {
                    TaskKind::Count => class,
                    _ if class == 1 => rng.random_range(1..=self.max_count.max(1).min(p)),
                    _ => 0,
                };
                let mut order: Vec<usize> = (0..p).collect();
                order.shuffle(&mut rng);
                let mut cells = vec![0; p];
                for (rank, &cell) in order.iter().enumerate() {
                    cells[cell] = if rank < k { target } else { self.filler(&mut rng, target) };
                }
                let image = draw_image(&cells, &mut rng);
                let (prompt, answer) = if kind == TaskKind::Count {
                    (
                        vec![Vocab::BOS, Vocab::QUESTION, Vocab::HOW, Vocab::MANY, v.color(target)],
                        vec![v.digit(k)],
                    )
                } else {
                    (
                        vec![Vocab::BOS, Vocab::QUESTION, Vocab::IS, Vocab::THERE, v.color(target)],
                        vec![if k > 0 { Vocab::YES } else { Vocab::NO }],
                    )
                };
                Sample {
                    kind,
                    image,
                    prompt,
                    answer,
                }
            }
            TaskKind::Color => {
                let cell = rng.random_range(0..p);
                let mut cells: Vec<usize> = (0..p).map(|_| rng.random_range(0..self.num_colors)).collect();
                cells[cell] = class;
                let image = draw_image(&cells, &mut rng);
                Sample {
                    kind,
                    image,
                    prompt: vec![Vocab::BOS, Vocab::QUESTION, Vocab::WHAT, Vocab::COLOR, Vocab::CELL, v.digit(cell)],
                    answer: vec![v.color(class)],
                }
            }
            TaskKind::Copy => {
                let content: Vec<usize> = (0..self.copy_len)
                    .map(|_| rng.random_range(v.content_start()..v.size))
                    .collect();
                let mut prompt = vec![Vocab::BOS, Vocab::COPY];
                prompt.extend_from_slice(&content);
                prompt.push(Vocab::SEP);
                Sample {
                    kind,
                    image: None,
                    prompt,
                    answer: content,
                }
            }
        }
    }

    /// Caption of a cell coloring: `cell <i> <color>` for each non-background
    /// cell in raster order.
    pub fn caption_tokens(&self, cells: &[usize]) -> Vec<usize> {
        cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .flat_map(|(i, &c)| [Vocab::CELL, self.vocab.digit(i), self.vocab.color(c)])
            .collect()
    }

    /// Most foreground cells a caption may list while fitting `max_text_len`.
    pub fn max_caption_cells(&self) -> usize {
        (self.max_text_len.saturating_sub(1) / 3).min(self.cells())
    }
}

fn ensure_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    Ok(())
}

/// `count` samples with seeds `seed..seed + count`, kinds interleaved and each
/// kind's answers cycling through its classes, then shuffled.
pub fn generate(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    ensure_count(count)?;
    spec.check()?;
    if spec.kinds.is_empty() {
        return Err(Error::Config(vec![ConfigError::NoTasks]));
    }
    let k = spec.kinds.len();
    let mut samples: Vec<Sample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let kind = spec.kinds[i % k];
            let class = (i / k) % spec.classes(kind);
            spec.sample(kind, class, seed + i as u64)
        })
        .collect();
    let mut rng = rng::derive(spec.base_seed ^ seed, streams::SHUFFLE);
    samples.shuffle(&mut rng);
    for s in &samples {
        if s.prompt.len() + s.answer.len() > spec.max_text_len {
            return Err(Error::Capacity {
                len: s.prompt.len() + s.answer.len(),
                max: spec.max_text_len,
            });
        }
    }
    Ok(samples)
}

/// Image-caption pairs for the alignment stage: prompt `<bos>`, answer the caption.
pub fn generate_captions(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    ensure_count(count)?;
    spec.check()?;
    let p = spec.cells();
    let max_fg = spec.max_caption_cells();
    if max_fg == 0 {
        return Err(Error::Capacity {
            len: 4,
            max: spec.max_text_len,
        });
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.sample_rng(seed + i as u64);
            let fg = 1 + i % max_fg;
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng);
            let mut cells = vec![0; p];
            for &cell in &order[..fg] {
                cells[cell] = rng.random_range(1..spec.num_colors);
            }
            let image = PatchGrid::render(&cells, spec.cell_pixels, spec.pixel_noise, Some(&mut rng));
            Sample {
                kind: TaskKind::Copy,
                image: Some(image),
                prompt: vec![Vocab::BOS],
                answer: spec.caption_tokens(&cells),
            }
        })
        .collect();
    Ok(samples)
}

/// Rule-based answer read straight off the prompt and pixels.
pub fn solve(spec: &TaskSpec, sample: &Sample) -> Vec<usize> {
    let v = &spec.vocab;
    let color_of = |id: usize| (0..spec.num_colors).find(|&c| v.color(c) == id);
    let cells = sample.image.as_ref().map(|g| g.decode_cells(spec.num_colors));
    match sample.kind {
        TaskKind::Count | TaskKind::Existence => {
            let target = color_of(sample.prompt[4]).expect("color token");
            let n = cells.expect("image").iter().filter(|&&c| c == target).count();
            if sample.kind == TaskKind::Count {
                vec![v.digit(n)]
            } else {
                vec![if n > 0 { Vocab::YES } else { Vocab::NO }]
            }
        }
        TaskKind::Color => {
            let cell = sample.prompt[5] - v.digit(0);
            vec![v.color(cells.expect("image")[cell])]
        }
        TaskKind::Copy => sample.prompt[2..sample.prompt.len() - 1].to_vec(),
    }
}

/// Accuracy of always answering each kind's most frequent first answer token.
pub fn majority_accuracy(samples: &[Sample]) -> f64 {
    use std::collections::BTreeMap;
    let mut by_kind: BTreeMap<TaskKind, BTreeMap<usize, usize>> = BTreeMap::new();
    for s in samples {
        *by_kind.entry(s.kind).or_default().entry(s.answer[0]).or_default() += 1;
    }
    let hits: usize = by_kind.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / samples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn spec(kinds: &[TaskKind]) -> TaskSpec {
        TaskSpec::from_config(&RunConfig::default(), kinds).unwrap()
    }

    #[test]
    fn count_by_construction_on_two_by_two() {
        let mut s = spec(&[TaskKind::Count]);
        s.grid = 2;
        s.max_count = 4;
        let sample = s.sample(TaskKind::Count, 3, 99);
        let cells = sample.image.as_ref().unwrap().decode_cells(s.num_colors);
        let target = (0..s.num_colors).find(|&c| s.vocab.color(c) == sample.prompt[4]).unwrap();
        assert_eq!(cells.iter().filter(|&&c| c == target).count(), 3);
        assert_eq!(sample.answer, vec![s.vocab.digit(3)]);
        assert_eq!(s.vocab.word(sample.answer[0]), "3");
    }

    #[test]
    fn existence_without_target_says_no() {
        let s = spec(&[TaskKind::Existence]);
        for seed in 0..20 {
            let sample = s.sample(TaskKind::Existence, 0, seed);
            assert_eq!(sample.answer, vec![Vocab::NO]);
            assert_eq!(solve(&s, &sample), vec![Vocab::NO]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(&[TaskKind::Count, TaskKind::Existence, TaskKind::Color]);
        let a = generate(&s, 64, 5).unwrap();
        let b = generate(&s, 64, 5).unwrap();
        assert_eq!(a, b);
        let c = generate(&s, 64, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oracle_solver_is_perfect() {
        let mut s = spec(&[TaskKind::Count, TaskKind::Existence, TaskKind::Color, TaskKind::Copy]);
        s.max_count = 16;
        for sample in generate(&s, 400, 0).unwrap() {
            assert_eq!(solve(&s, &sample), sample.answer, "{:?}", sample.kind);
        }
    }

    #[test]
    fn classes_are_balanced() {
        let s = spec(&[TaskKind::Count, TaskKind::Existence]);
        let samples = generate(&s, 1000, 0).unwrap();
        let mut hist: BTreeMap<(TaskKind, usize), usize> = BTreeMap::new();
        for x in &samples {
            *hist.entry((x.kind, x.answer[0])).or_default() += 1;
        }
        for (&(kind, _), &n) in &hist {
            let expected = 500.0 / s.classes(kind) as f64;
            assert!((n as f64 - expected).abs() <= 0.1 * expected, "{kind}: {n} vs {expected}");
        }
        let maj = majority_accuracy(&samples);
        // per-task majority: one count class plus one existence class
        let expected = (500.0 / s.classes(TaskKind::Count) as f64 + 250.0) / 1000.0;
        assert!((maj - expected).abs() < 1e-12, "{maj}");
    }

    #[test]
    fn one_by_one_red_caption() {
        let mut s = spec(&[TaskKind::Count]);
        s.grid = 1;
        let caption = s.caption_tokens(&[1]);
        assert_eq!(s.vocab.render(&caption), "cell 0 red");
    }

    #[test]
    fn captions_fit_and_are_deterministic() {
        let s = spec(&[TaskKind::Count]);
        let a = generate_captions(&s, 500, 3).unwrap();
        assert_eq!(a, generate_captions(&s, 500, 3).unwrap());
        for c in &a {
            assert!(c.prompt.len() + c.answer.len() <= s.max_text_len);
            let cells = c.image.as_ref().unwrap().decode_cells(s.num_colors);
            assert_eq!(c.answer, s.caption_tokens(&cells));
        }
    }

    #[test]
    fn vocabulary_too_small_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 30;
        assert!(matches!(
            TaskSpec::from_config(&cfg, &[TaskKind::Count]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_mask_marks_answers_only() {
        let s = spec(&[TaskKind::Copy]);
        let x = s.sample(TaskKind::Copy, 0, 1);
        let mask = x.loss_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), s.copy_len);
        assert!(mask[..x.prompt.len()].iter().all(|&m| !m));
        let (inp, tgt, m) = x.next_token_view();
        assert_eq!(inp.len(), tgt.len());
        assert_eq!(m.iter().filter(|&&b| b).count(), s.copy_len);
    }
}
