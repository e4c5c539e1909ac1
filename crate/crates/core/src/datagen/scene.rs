// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grid scenes of colored shapes and their per-patch feature rendering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Features per patch: one-hot over (4 shapes + blank) then one-hot over 5 colors.
pub const PATCH_DIM: usize = 10;
const JITTER_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }

    pub fn from_word(w: &str) -> Option<Self> {
        SHAPES.iter().position(|s| *s == w).map(|i| Self::ALL[i])
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn word(self) -> &'static str {
        COLORS[self as usize]
    }

    pub fn from_word(w: &str) -> Option<Self> {
        COLORS.iter().position(|s| *s == w).map(|i| Self::ALL[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

/// A `rows x cols` grid; `None` cells are blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyImage {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<Object>>,
    /// Seed of the per-feature rendering jitter.
    pub jitter_seed: u64,
}

impl ToyImage {
    pub fn blank(rows: usize, cols: usize, jitter_seed: u64) -> Self {
        Self {
            rows,
            cols,
            cells: vec![None; rows * cols],
            jitter_seed,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }

    /// Coarse quadrant words of a cell, e.g. `["top", "left"]`.
    pub fn quadrant(&self, cell: usize) -> [&'static str; 2] {
        let (r, c) = (cell / self.cols, cell % self.cols);
        let v = if r < self.rows / 2 { "top" } else { "bottom" };
        let h = if c < self.cols / 2 { "left" } else { "right" };
        [v, h]
    }

    /// Per-patch features `n_cells x PATCH_DIM`, row-major over the grid.
    pub fn render<T: Scalar>(&self) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed);
        let normal = Normal::new(0.0, JITTER_STD).expect("valid std");
        let mut data = Vec::with_capacity(self.n_cells() * PATCH_DIM);
        for cell in &self.cells {
            let mut f = [0.0f64; PATCH_DIM];
            match cell {
                Some(o) => {
                    f[o.shape as usize] = 1.0;
                    f[5 + o.color as usize] = 1.0;
                }
                None => f[4] = 1.0,
            }
            for v in f.iter_mut() {
                *v += normal.sample(&mut rng);
            }
            data.extend(f.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::from_rows(self.n_cells(), PATCH_DIM, data)
    }

    pub fn check_grid(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols || self.cells.len() != rows * cols {
            return Err(Error::Shape(format!(
                "image grid {}x{} ({} cells) does not match model grid {rows}x{cols}",
                self.rows,
                self.cols,
                self.cells.len()
            )));
        }
        Ok(())
    }
}

/// A scene with one queried target object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub image: ToyImage,
    pub target_cell: usize,
}

impl Scene {
    pub fn target(&self) -> Object {
        self.image.cells[self.target_cell].expect("target cell holds an object")
    }
}

/// Draws a scene whose target is unique by both shape and color.
///
/// Distractors never share the target's shape or color, so every
/// question about the target has a single answer. `shapes`/`colors` restrict
/// the attribute pool of all objects.
pub fn random_scene<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    shapes: &[Shape],
    colors: &[Color],
    target: Option<Object>,
    target_cell: Option<usize>,
) -> Scene {
    let n = rows * cols;
    let target = target.unwrap_or_else(|| Object {
        shape: *shapes.choose(rng).expect("nonempty shape pool"),
        color: *colors.choose(rng).expect("nonempty color pool"),
    });
    let target_cell = target_cell.unwrap_or_else(|| rng.gen_range(0..n));
    let mut image = ToyImage::blank(rows, cols, rng.gen());
    image.cells[target_cell] = Some(target);

    let d_shapes: Vec<Shape> = shapes.iter().copied().filter(|&s| s != target.shape).collect();
    let d_colors: Vec<Color> = colors.iter().copied().filter(|&c| c != target.color).collect();
    if !d_shapes.is_empty() && !d_colors.is_empty() && n > 1 {
        let count = rng.gen_range(2..=3).min(n - 1);
        let mut free: Vec<usize> = (0..n).filter(|&c| c != target_cell).collect();
        free.shuffle(rng);
        for &cell in free.iter().take(count) {
            image.cells[cell] = Some(Object {
                shape: *d_shapes.choose(rng).unwrap(),
                color: *d_colors.choose(rng).unwrap(),
            });
        }
    }
    Scene { image, target_cell }
}

/// Same target object and cell; distractors moved and all jitter redrawn.
pub fn rephrase_scene<R: Rng>(rng: &mut R, scene: &Scene) -> Scene {
    let img = &scene.image;
    let n = img.n_cells();
    let distractors: Vec<Object> = img
        .objects()
        .filter(|&(c, _)| c != scene.target_cell)
        .map(|(_, o)| o)
        .collect();
    let mut out = ToyImage::blank(img.rows, img.cols, rng.gen());
    out.cells[scene.target_cell] = Some(scene.target());
    let mut free: Vec<usize> = (0..n).filter(|&c| c != scene.target_cell).collect();
    // Draw until the layout differs from the original when one exists.
    for _ in 0..8 {
        free.shuffle(rng);
        let moved = distractors
            .iter()
            .zip(&free)
            .any(|(o, &cell)| img.cells[cell] != Some(*o));
        if moved || distractors.is_empty() {
            break;
        }
    }
    for (o, &cell) in distractors.iter().zip(&free) {
        out.cells[cell] = Some(*o);
    }
    Scene {
        image: out,
        target_cell: scene.target_cell,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_is_unique_by_shape_and_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = random_scene(&mut rng, 4, 4, &Shape::ALL, &Color::ALL, None, None);
            let t = s.target();
            let same_shape = s.image.objects().filter(|(_, o)| o.shape == t.shape).count();
            let same_color = s.image.objects().filter(|(_, o)| o.color == t.color).count();
            assert_eq!((same_shape, same_color), (1, 1));
        }
    }

    #[test]
    fn render_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_scene(&mut rng, 4, 4, &Shape::ALL, &Color::ALL, None, None);
        let a = s.image.render::<f32>();
        let b = s.image.render::<f32>();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, PATCH_DIM]);
    }

    #[test]
    fn rephrase_keeps_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_scene(&mut rng, 4, 4, &Shape::ALL, &Color::ALL, None, None);
        let r = rephrase_scene(&mut rng, &s);
        assert_eq!(r.target_cell, s.target_cell);
        assert_eq!(r.target(), s.target());
        assert_ne!(r.image.jitter_seed, s.image.jitter_seed);
        assert_eq!(r.image.objects().count(), s.image.objects().count());
    }

    #[test]
    fn quadrant_words() {
        let img = ToyImage::blank(4, 4, 0);
        assert_eq!(img.quadrant(0), ["top", "left"]);
        assert_eq!(img.quadrant(15), ["bottom", "right"]);
        assert_eq!(img.quadrant(6), ["top", "right"]);
    }
}
