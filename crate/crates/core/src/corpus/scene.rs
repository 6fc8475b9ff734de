//! Shape-world scenes and their rasterization.

use carpe_numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::derive_rng;
use crate::error::{CarpeError, Result};

pub const IMAGE_SIZE: usize = 32;
pub const GRID: usize = 4;
pub const CELL: usize = IMAGE_SIZE / GRID;
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
            Shape::Cross => "crosses",
        }
    }

    /// Whether pixel offset `(dx, dy)` from the object center lies inside the shape of radius `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.7 * r && dy.abs() <= 0.7 * r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.55 * (dy + r),
            Shape::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.15],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Purple => [0.6, 0.1, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    fn radius(self) -> f64 {
        match self {
            Size::Small => 3.2,
            Size::Large => 3.5,
        }
    }
}

/// A color-shape class. Index is `color * 4 + shape`, 20 classes in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub color: Color,
    pub shape: Shape,
}

pub const NUM_CLASSES: usize = 20;

/// Color-shape pairs that never occur in training streams.
pub const OOD_LABELS: [Label; 2] = [
    Label {
        color: Color::Purple,
        shape: Shape::Triangle,
    },
    Label {
        color: Color::Yellow,
        shape: Shape::Cross,
    },
];

impl Label {
    pub fn all() -> Vec<Label> {
        Color::ALL
            .iter()
            .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Label { color, shape }))
            .collect()
    }

    pub fn in_distribution() -> Vec<Label> {
        Self::all().into_iter().filter(|l| !l.is_ood()).collect()
    }

    pub fn index(self) -> usize {
        self.color as usize * Shape::ALL.len() + self.shape as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::all().get(i).copied()
    }

    pub fn is_ood(self) -> bool {
        OOD_LABELS.contains(&self)
    }

    pub fn text(self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    pub size: Size,
}

impl SceneObject {
    pub fn label(&self) -> Label {
        Label {
            color: self.color,
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Background gray level in `[0, 1]`.
    pub background: f64,
}

impl SceneSpec {
    /// Checks cell ranges, object count, overlap and background range.
    ///
    /// An empty scene is valid for rendering; generated samples always carry 1–3 objects.
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > MAX_OBJECTS {
            return Err(CarpeError::Scene(format!(
                "{} objects, at most {MAX_OBJECTS} allowed",
                self.objects.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(CarpeError::Scene(format!("background {} outside [0, 1]", self.background)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= GRID || o.col >= GRID {
                return Err(CarpeError::Scene(format!("cell ({}, {}) outside the grid", o.row, o.col)));
            }
            if self.objects[..i].iter().any(|p| p.row == o.row && p.col == o.col) {
                return Err(CarpeError::Scene(format!("two objects share cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    pub fn count_shape(&self, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }
}

/// Rasterizes `spec` into a `[3 × 32 × 32]` tensor with values in `[0, 1]`.
///
/// `seed` only jitters each object by at most one pixel inside its cell, so
/// objects never leave their grid cell.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![spec.background; 3 * n];
    for (i, o) in spec.objects.iter().enumerate() {
        let mut rng: ChaCha8Rng = derive_rng(seed, 0x5CE_0000 + i as u64);
        let jx = rng.gen_range(-1i32..=1) as f64;
        let jy = rng.gen_range(-1i32..=1) as f64;
        let cx = (o.col * CELL) as f64 + 3.5 + jx;
        let cy = (o.row * CELL) as f64 + 3.5 + jy;
        let r = o.size.radius();
        let rgb = o.color.rgb();
        for py in o.row * CELL..(o.row + 1) * CELL {
            for px in o.col * CELL..(o.col + 1) * CELL {
                if o.shape.covers(px as f64 - cx, py as f64 - cy, r) {
                    for (c, v) in rgb.iter().enumerate() {
                        data[c * n + py * IMAGE_SIZE + px] = *v;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data)?)
}
