//! GenEval-style compositional scoring over palette-exact renders, plus PSNR.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::exec::Exec;
use crate::numcore::{SeededRng, Tensor};
use crate::pipeline::Pipeline;
use crate::shapeworld::{
    caption_constraints, caption_scene, cell_rect, gen_scene, parse_caption, render_scene, Cell, Color, Image, Object, ObjectSpec,
    Relation, SceneConstraints, SceneDescription, Shape, COLORS, WHITE,
};

/// Fill ratio (object pixels over bounding-box area) at or above which a blob
/// is a square. Rasterized squares fill their box exactly.
pub const SQUARE_MIN_FILL: f64 = 0.95;
/// Fill ratio below which a blob is a triangle. At 16x16 a rasterized
/// triangle fills 0.60 of its box and a circle 0.89.
pub const TRIANGLE_MAX_FILL: f64 = 0.75;
/// Minimum share of a cell's pixels the dominant color must cover for the
/// cell to count as occupied.
pub const MIN_OCCUPANCY: f64 = 0.0625;

/// Upper bound reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn palette_color(p: [f64; 3]) -> Option<Color> {
    COLORS.into_iter().find(|c| c.rgb() == p)
}

/// Replaces every pixel by the nearest of white and the four palette colors.
/// Returns the snapped image and the mean Euclidean snap distance.
pub fn snap_to_palette(image: &Image) -> (Image, f64) {
    let mut targets = vec![WHITE];
    targets.extend(COLORS.iter().map(|c| c.rgb()));
    let mut out = image.clone();
    let mut dist = 0.0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.pixel(y, x);
            let d2 = |q: &[f64; 3]| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>();
            let best = targets
                .iter()
                .min_by(|a, b| d2(a).total_cmp(&d2(b)))
                .expect("non-empty palette");
            dist += d2(best).sqrt();
            out.set_pixel(y, x, *best);
        }
    }
    (out, dist / (image.height() * image.width()) as f64)
}

/// Classifies a blob by how much of its bounding box it fills.
pub fn classify_fill(fill: f64) -> Shape {
    if fill >= SQUARE_MIN_FILL {
        Shape::Square
    } else if fill < TRIANGLE_MAX_FILL {
        Shape::Triangle
    } else {
        Shape::Circle
    }
}

/// One detection per occupied cell of a palette-exact image.
pub fn detect_objects(image: &Image) -> Result<Vec<Object>> {
    let size = image.height();
    if image.width() != size || size < 4 || size % 2 != 0 {
        return dim_err(format!("detector needs an even square image, got {}x{}", image.height(), image.width()));
    }
    let mut found = Vec::new();
    for cell in Cell::ALL {
        let (y0, x0, c) = cell_rect(cell, size);
        let mut counts = [0usize; 4];
        for y in y0..y0 + c {
            for x in x0..x0 + c {
                let p = image.pixel(y, x);
                if p == WHITE {
                    continue;
                }
                let col = palette_color(p).ok_or_else(|| {
                    Error::Verifier(format!("pixel ({y}, {x}) = {p:?} is neither white nor a palette color"))
                })?;
                counts[col.index()] += 1;
            }
        }
        let (best, &n) = counts.iter().enumerate().max_by_key(|(i, n)| (**n, usize::MAX - i)).expect("4 colors");
        if (n as f64) < MIN_OCCUPANCY * (c * c) as f64 || n == 0 {
            continue;
        }
        let color = COLORS[best];
        let (mut ymin, mut ymax, mut xmin, mut xmax) = (usize::MAX, 0, usize::MAX, 0);
        for y in y0..y0 + c {
            for x in x0..x0 + c {
                if image.pixel(y, x) == color.rgb() {
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                }
            }
        }
        let area = (ymax - ymin + 1) * (xmax - xmin + 1);
        found.push(Object {
            shape: classify_fill(n as f64 / area as f64),
            color,
            cell,
        });
    }
    Ok(found)
}

/// Snaps a generated image to the palette and detects objects.
pub fn detect_generated(image: &Image) -> Result<Vec<Object>> {
    detect_objects(&snap_to_palette(&image.clone().clamped()).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    ColorAttribution,
}

pub const CATEGORIES: [Category; 6] = [
    Category::SingleObject,
    Category::TwoObject,
    Category::Counting,
    Category::Colors,
    Category::Position,
    Category::ColorAttribution,
];

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::SingleObject => "single_object",
            Category::TwoObject => "two_object",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttribution => "color_attribution",
        }
    }

    /// Every prompt of this category, in a fixed order.
    pub fn prompts(self) -> Vec<Prompt> {
        let specs: Vec<ObjectSpec> = ObjectSpec::all().collect();
        let mut out = Vec::new();
        let mut push = |required: Vec<ObjectSpec>, relation| {
            let c = SceneConstraints { count: Some(required.len()), required, relation };
            out.push(Prompt::new(self, c));
        };
        match self {
            Category::SingleObject | Category::Colors => {
                for &s in &specs {
                    push(vec![s], None);
                }
            }
            Category::Counting => {
                for n in 2..=4 {
                    for &s in &specs {
                        push(vec![s; n], None);
                    }
                }
            }
            Category::TwoObject | Category::ColorAttribution | Category::Position => {
                for &a in &specs {
                    for &b in &specs {
                        let keep = match self {
                            Category::TwoObject => a.shape != b.shape,
                            Category::ColorAttribution => a.shape != b.shape && a.color != b.color,
                            _ => a != b,
                        };
                        if keep {
                            let rel = (self == Category::Position).then_some(Relation::LeftOf);
                            push(vec![a, b], rel);
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CATEGORIES
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

/// A grammar prompt with the category that decides how it is scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub category: Category,
    pub text: String,
    pub constraints: SceneConstraints,
}

impl Prompt {
    pub fn new(category: Category, constraints: SceneConstraints) -> Self {
        let text = caption_constraints(&constraints).expect("category prompts are in the grammar");
        Self { category, text, constraints }
    }

    /// Parses a caption and attaches a category.
    pub fn parse(category: &str, text: &str) -> Result<Self> {
        let category = category.parse()?;
        let constraints = parse_caption(text)?;
        Ok(Self { category, text: text.to_string(), constraints })
    }
}

/// Uniform draw from a category's prompt set.
pub fn sample_prompt(category: Category, rng: &mut SeededRng) -> Prompt {
    let all = category.prompts();
    all[rng.below(all.len())].clone()
}

/// The category predicate over detected objects.
pub fn score_detections(prompt: &Prompt, found: &[Object]) -> bool {
    let req = &prompt.constraints.required;
    let has = |s: ObjectSpec| found.iter().any(|o| o.spec() == s);
    match prompt.category {
        Category::SingleObject => req.first().is_some_and(|&s| has(s)),
        Category::TwoObject => req.iter().all(|s| found.iter().any(|o| o.shape == s.shape)),
        Category::Counting => req.first().is_some_and(|&s| found.iter().filter(|o| o.spec() == s).count() == req.len()),
        Category::Colors => {
            let Some(s) = req.first() else { return false };
            let same_shape: Vec<_> = found.iter().filter(|o| o.shape == s.shape).collect();
            !same_shape.is_empty() && same_shape.iter().all(|o| o.color == s.color)
        }
        Category::Position => match req.as_slice() {
            [a, b] => found.iter().any(|x| {
                x.spec() == *a
                    && found
                        .iter()
                        .any(|y| y.spec() == *b && Relation::LeftOf.holds(x.cell, y.cell))
            }),
            _ => false,
        },
        Category::ColorAttribution => req.iter().all(|&s| has(s)),
    }
}

/// Scores a generated image (snapped to the palette first).
pub fn score_prompt(prompt: &Prompt, image: &Image) -> Result<bool> {
    Ok(score_detections(prompt, &detect_generated(image)?))
}

/// Unweighted mean of the six category accuracies.
pub fn aggregate_geneval(scores: &[f64]) -> Result<f64> {
    if scores.len() != CATEGORIES.len() {
        return Err(Error::Config(format!("expected 6 category scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Config(format!("category scores {scores:?} outside [0, 1]")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Half-up rounding to two decimals for display.
pub fn display_round(x: f64) -> String {
    // nudge by a relative epsilon so that decimal ties such as 0.125 stored
    // as 0.12499999... still round up
    let scaled = x * 100.0;
    let r = (scaled + 0.5 + scaled.abs() * 1e-12).floor() / 100.0;
    format!("{r:.2}")
}

/// `10·log10(1/MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return dim_err(format!(
            "psnr of {}x{} and {}x{} images",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Probability that a uniformly drawn prompt of `category` is satisfied by an
/// independent unconstrained random scene, computed by exact enumeration.
pub fn exact_chance(category: Category) -> f64 {
    let prompts = category.prompts();
    let scenes = SceneDescription::enumerate(4);
    let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut total = 0.0;
    for s in &scenes {
        let n = s.count();
        // count uniform on 1..=4, then a uniform cell subset and attributes
        let p = 0.25 / binom[n] / 12f64.powi(n as i32);
        let hits = prompts.iter().filter(|pr| score_detections(pr, s.objects())).count();
        total += p * hits as f64 / prompts.len() as f64;
    }
    total
}

/// Monte-Carlo chance rate: random prompt against the detected render of an
/// independent random scene. Returns `(rate, trials)`.
pub fn monte_carlo_chance(category: Category, trials: usize, size: usize, rng: &mut SeededRng) -> Result<f64> {
    let mut hits = 0;
    for _ in 0..trials {
        let prompt = sample_prompt(category, rng);
        let scene = gen_scene(rng, None)?;
        let img = render_scene(&scene, size)?;
        if score_detections(&prompt, &detect_objects(&img)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials.max(1) as f64)
}

/// Noise levels of the one-step reconstruction probe.
pub const RECON_TIMES: [f64; 3] = [0.25, 0.5, 0.75];

/// Mean PSNR of one-step reconstructions of `n_scenes` held-out renders at
/// each of [`RECON_TIMES`]. Scenes and noise derive from `seed` only, so two
/// models are compared on identical inputs.
pub fn reconstruction_psnr(model: &Pipeline, n_scenes: usize, seed: u64, exec: Exec) -> Result<f64> {
    if n_scenes == 0 {
        return Err(Error::Config("reconstruction probe needs at least one scene".into()));
    }
    let root = SeededRng::new(seed);
    let size = model.config.dit.image_size;
    let per_scene = exec.map_range(n_scenes, |i| -> Result<f64> {
        let mut r = root.split_indexed("heldout", i as u64);
        let scene = gen_scene(&mut r, None)?;
        let image = render_scene(&scene, size)?;
        let caption = caption_scene(&scene);
        let mut sum = 0.0;
        for &t in &RECON_TIMES {
            let x0 = Tensor::randn(&[size, size, 3], 1.0, &mut r);
            sum += psnr(&model.reconstruct(&caption, &image, &x0, t)?, &image)?;
        }
        Ok(sum / RECON_TIMES.len() as f64)
    });
    let mut total = 0.0;
    for p in per_scene {
        total += p?;
    }
    Ok(total / n_scenes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: Category,
    pub n_prompts: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Chance level for this category under random scenes.
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_per_category: usize,
    pub sample_steps: usize,
    pub categories: Vec<CategoryResult>,
    /// Unrounded mean of the category accuracies.
    pub overall: f64,
    /// Mean palette-snap distance of generated pixels.
    pub mean_snap_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl EvalReport {
    pub fn accuracy(&self, c: Category) -> f64 {
        self.categories.iter().find(|r| r.category == c).map_or(0.0, |r| r.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18} {:>5} {:>8} {:>8} {:>8}\n", "category", "n", "correct", "accuracy", "chance");
        for r in &self.categories {
            s += &format!(
                "{:<18} {:>5} {:>8} {:>8} {:>8}\n",
                r.category.name(),
                r.n_prompts,
                r.correct,
                display_round(r.accuracy),
                display_round(r.chance)
            );
        }
        s += &format!("{:<18} {:>5} {:>8} {:>8}\n", "overall", "", "", display_round(self.overall));
        if let Some(w) = &self.warning {
            s += &format!("warning: {w}\n");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_per_category: usize,
    pub seed: u64,
    pub sample_steps: usize,
    /// Monte-Carlo trials per category for the chance column.
    pub chance_trials: usize,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_per_category: 50,
            seed: 0,
            sample_steps: 20,
            chance_trials: 2000,
            exec: Exec::default(),
        }
    }
}

/// Generates and scores `opts.n_per_category` prompts of one category.
/// Returns the result and the summed palette-snap distance.
pub fn eval_category(model: &Pipeline, category: Category, opts: &EvalOptions) -> Result<(CategoryResult, f64)> {
    let root = SeededRng::new(opts.seed);
    let name = category.name();
    let mut prng = root.split(name);
    let prompts: Vec<Prompt> = (0..opts.n_per_category).map(|_| sample_prompt(category, &mut prng)).collect();
    let results = opts.exec.map_range(prompts.len(), |i| -> Result<(bool, f64)> {
        let mut r = root.split_indexed(name, i as u64);
        let img = model.generate(&prompts[i].text, opts.sample_steps, &mut r)?;
        let (snapped, dist) = snap_to_palette(&img);
        Ok((score_detections(&prompts[i], &detect_objects(&snapped)?), dist))
    });
    let mut correct = 0;
    let mut snap_total = 0.0;
    for r in results {
        let (ok, dist) = r?;
        correct += ok as usize;
        snap_total += dist;
    }
    let size = model.config.dit.image_size;
    let chance = monte_carlo_chance(category, opts.chance_trials, size, &mut root.split(&format!("chance/{name}")))?;
    let n = opts.n_per_category;
    let result = CategoryResult {
        category,
        n_prompts: n,
        correct,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        chance,
    };
    Ok((result, snap_total))
}

/// Generates and scores `n` prompts per category.
pub fn run_eval(model: &Pipeline, opts: &EvalOptions) -> Result<EvalReport> {
    let mut categories = Vec::with_capacity(CATEGORIES.len());
    let mut snap_total = 0.0;
    for cat in CATEGORIES {
        let (result, snap) = eval_category(model, cat, opts)?;
        categories.push(result);
        snap_total += snap;
    }
    let accs: Vec<f64> = categories.iter().map(|c| c.accuracy).collect();
    let total = opts.n_per_category * CATEGORIES.len();
    Ok(EvalReport {
        seed: opts.seed,
        n_per_category: opts.n_per_category,
        sample_steps: opts.sample_steps,
        overall: aggregate_geneval(&accs)?,
        mean_snap_distance: if total == 0 { 0.0 } else { snap_total / total as f64 },
        warning: (opts.n_per_category == 0).then(|| "no prompts evaluated; accuracies are reported as 0".to_string()),
        categories,
    })
}
