use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Exact palette RGB in `[0, 1]`.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One of the four cells of the 2x2 layout grid, numbered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(u8);

impl Cell {
    pub const ALL: [Cell; 4] = [Cell(0), Cell(1), Cell(2), Cell(3)];

    pub fn new(index: usize) -> Result<Self> {
        if index >= 4 {
            return Err(Error::Generation(format!("cell index {index} out of 0..4")));
        }
        Ok(Cell(index as u8))
    }

    pub fn at(row: usize, col: usize) -> Self {
        Cell((row * 2 + col) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn row(self) -> usize {
        self.index() / 2
    }

    pub fn col(self) -> usize {
        self.index() % 2
    }
}

/// A shape with a color, without placement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
}

impl ObjectSpec {
    pub fn all() -> impl Iterator<Item = ObjectSpec> {
        COLORS
            .into_iter()
            .flat_map(|color| SHAPES.into_iter().map(move |shape| ObjectSpec { color, shape }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

impl Object {
    pub fn spec(&self) -> ObjectSpec {
        ObjectSpec {
            color: self.color,
            shape: self.shape,
        }
    }
}

/// Objects sorted by cell, at most one per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneDescription {
    objects: Vec<Object>,
}

impl SceneDescription {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.len() > 4 {
            return Err(Error::Generation(format!(
                "{} objects do not fit a 2x2 grid",
                objects.len()
            )));
        }
        objects.sort_by_key(|o| o.cell);
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) {
            return Err(Error::Generation("two objects share a cell".into()));
        }
        Ok(Self { objects })
    }

    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
        }
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn count(&self) -> usize {
        self.objects.len()
    }

    pub fn at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    /// Every scene with `1..=max_count` objects, in a fixed order.
    pub fn enumerate(max_count: usize) -> Vec<SceneDescription> {
        let specs: Vec<ObjectSpec> = ObjectSpec::all().collect();
        let mut out = Vec::new();
        for mask in 1u32..16 {
            let cells: Vec<Cell> = Cell::ALL
                .into_iter()
                .filter(|c| mask & (1 << c.index()) != 0)
                .collect();
            if cells.len() > max_count {
                continue;
            }
            let k = cells.len();
            let total = specs.len().pow(k as u32);
            for code in 0..total {
                let mut rem = code;
                let objects = cells
                    .iter()
                    .map(|&cell| {
                        let s = specs[rem % specs.len()];
                        rem /= specs.len();
                        Object {
                            shape: s.shape,
                            color: s.color,
                            cell,
                        }
                    })
                    .collect();
                out.push(SceneDescription { objects });
            }
        }
        out
    }
}

/// Spatial relation between the first two required objects of a constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Same row, first object in the left column.
    LeftOf,
    /// First object in the top row, second in the bottom row.
    Above,
}

impl Relation {
    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::LeftOf => a.row() == b.row() && a.col() < b.col(),
            Relation::Above => a.row() < b.row(),
        }
    }

    pub fn of(a: Cell, b: Cell) -> Option<Relation> {
        if Relation::LeftOf.holds(a, b) {
            Some(Relation::LeftOf)
        } else if Relation::Above.holds(a, b) {
            Some(Relation::Above)
        } else {
            None
        }
    }
}

/// What a caption pins down about a scene.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneConstraints {
    /// Exact object count, if fixed.
    pub count: Option<usize>,
    /// Objects that must be present (a multiset, in caption order).
    pub required: Vec<ObjectSpec>,
    /// Relation between `required[0]` and `required[1]`.
    pub relation: Option<Relation>,
}

impl SceneConstraints {
    pub fn count(n: usize) -> Self {
        Self {
            count: Some(n),
            ..Self::default()
        }
    }

    fn check_satisfiable(&self) -> Result<()> {
        let n_req = self.required.len();
        if n_req > 4 {
            return Err(Error::Generation(format!("{n_req} required objects exceed 4 cells")));
        }
        if let Some(c) = self.count {
            if !(1..=4).contains(&c) {
                return Err(Error::Generation(format!("count {c} outside 1..=4")));
            }
            if c < n_req {
                return Err(Error::Generation(format!(
                    "count {c} below {n_req} required objects"
                )));
            }
        }
        if self.relation.is_some() && n_req < 2 {
            return Err(Error::Generation("relation needs two required objects".into()));
        }
        Ok(())
    }

    /// Whether `objects` meet every constraint.
    pub fn satisfied_by(&self, objects: &[Object]) -> bool {
        if let Some(c) = self.count {
            if objects.len() != c {
                return false;
            }
        }
        let mut used = [false; 4];
        assign(&self.required, self.relation, objects, &mut used, &mut Vec::new())
    }
}

// Backtracking search for an injective match of required specs to objects.
fn assign(
    required: &[ObjectSpec],
    relation: Option<Relation>,
    objects: &[Object],
    used: &mut [bool; 4],
    picked: &mut Vec<Cell>,
) -> bool {
    let depth = picked.len();
    if depth == required.len() {
        return match relation {
            Some(r) => r.holds(picked[0], picked[1]),
            None => true,
        };
    }
    for (i, o) in objects.iter().enumerate() {
        if used[i] || o.spec() != required[depth] {
            continue;
        }
        used[i] = true;
        picked.push(o.cell);
        let ok = assign(required, relation, objects, used, picked);
        picked.pop();
        used[i] = false;
        if ok {
            return true;
        }
    }
    false
}

const MAX_ATTEMPTS: usize = 1_000_000;

fn draw_unconstrained(rng: &mut SeededRng, count: usize) -> SceneDescription {
    let mut cells = Cell::ALL;
    rng.shuffle(&mut cells);
    let objects = cells[..count]
        .iter()
        .map(|&cell| Object {
            shape: SHAPES[rng.below(SHAPES.len())],
            color: COLORS[rng.below(COLORS.len())],
            cell,
        })
        .collect();
    SceneDescription::new(objects).expect("distinct cells")
}

/// Draws a scene: the count is uniform over the allowed counts, then cells and
/// attributes are uniform; constraints are imposed by rejection.
pub fn gen_scene(rng: &mut SeededRng, constraints: Option<&SceneConstraints>) -> Result<SceneDescription> {
    let Some(c) = constraints else {
        let count = 1 + rng.below(4);
        return Ok(draw_unconstrained(rng, count));
    };
    c.check_satisfiable()?;
    let lo = c.required.len().max(1);
    for _ in 0..MAX_ATTEMPTS {
        let count = match c.count {
            Some(n) => n,
            None => lo + rng.below(5 - lo),
        };
        let scene = draw_unconstrained(rng, count);
        if c.satisfied_by(scene.objects()) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no scene satisfied {c:?} within {MAX_ATTEMPTS} draws"
    )))
}
