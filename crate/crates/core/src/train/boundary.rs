use serde::{Deserialize, Serialize};

use super::fit::logits;
use crate::algebra::KernelRidgeClassifier;
use crate::arch::Model;
use crate::error::{invalid, shape_err, Result};
use crate::fmt::fmt9;
use crate::tensor::Tensor;

/// Anything that assigns a signed margin to 2D points; a positive margin
/// means class 1, zero or negative means class 0.
pub trait Scorer {
    fn margins(&mut self, points: &Tensor) -> Result<Vec<f64>>;
}

impl<M: Model> Scorer for M {
    /// `logit₁ − logit₀` of a two-class network.
    fn margins(&mut self, points: &Tensor) -> Result<Vec<f64>> {
        let l = logits(self, points)?;
        if l.shape()[1] != 2 {
            return Err(shape_err("margins", format!("expected 2 classes, got {}", l.shape()[1])));
        }
        Ok(l.data().chunks(2).map(|r| r[1] - r[0]).collect())
    }
}

impl Scorer for KernelRidgeClassifier {
    fn margins(&mut self, points: &Tensor) -> Result<Vec<f64>> {
        points.rows()?.map(|p| self.decision(p)).collect()
    }
}

/// A square lattice over a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: -1.5,
            x_max: 2.5,
            y_min: -1.5,
            y_max: 2.0,
            resolution: 200,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(self, resolution: usize) -> Self {
        Self { resolution, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(invalid("grid resolution must be ≥ 2"));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(invalid("grid ranges must be non-empty"));
        }
        Ok(())
    }

    /// Center of cell `(row, col)`; row 0 is `y_min`, col 0 is `x_min`.
    pub fn point(&self, row: usize, col: usize) -> [f64; 2] {
        let r = (self.resolution - 1) as f64;
        [
            self.x_min + (self.x_max - self.x_min) * col as f64 / r,
            self.y_min + (self.y_max - self.y_min) * row as f64 / r,
        ]
    }

    /// All lattice points, row-major, as `[R², 2]`.
    pub fn points(&self) -> Tensor {
        let r = self.resolution;
        let data = (0..r * r).flat_map(|k| self.point(k / r, k % r)).collect();
        Tensor::new(vec![r * r, 2], data).expect("grid shape")
    }
}

/// Predicted class and margin on every lattice cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryGrid {
    pub spec: GridSpec,
    pub classes: Vec<u8>,
    pub margins: Vec<f64>,
}

/// Evaluates `model` on every cell of `spec`.
pub fn boundary_eval<S: Scorer + ?Sized>(model: &mut S, spec: &GridSpec) -> Result<BoundaryGrid> {
    spec.validate()?;
    let margins = model.margins(&spec.points())?;
    let classes = margins.iter().map(|&m| u8::from(m > 0.0)).collect();
    Ok(BoundaryGrid {
        spec: *spec,
        classes,
        margins,
    })
}

impl BoundaryGrid {
    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.resolution() + col]
    }

    /// Cells with a 4-neighbour of the other class.
    pub fn boundary_cells(&self) -> usize {
        let r = self.resolution();
        let mut n = 0;
        for row in 0..r {
            for col in 0..r {
                let c = self.class_at(row, col);
                let differs = (row > 0 && self.class_at(row - 1, col) != c)
                    || (row + 1 < r && self.class_at(row + 1, col) != c)
                    || (col > 0 && self.class_at(row, col - 1) != c)
                    || (col + 1 < r && self.class_at(row, col + 1) != c);
                n += usize::from(differs);
            }
        }
        n
    }

    /// Fraction of cells where both grids predict the same class.
    pub fn agreement(&self, other: &BoundaryGrid) -> Result<f64> {
        if self.spec != other.spec {
            return Err(invalid("grids cover different lattices"));
        }
        let same = self.classes.iter().zip(&other.classes).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.classes.len() as f64)
    }

    /// `x,y,class,margin`, one row per cell.
    pub fn to_csv(&self) -> String {
        let r = self.resolution();
        let mut s = String::with_capacity(r * r * 40);
        s.push_str("x,y,class,margin\n");
        for (k, (&c, &m)) in self.classes.iter().zip(&self.margins).enumerate() {
            let [x, y] = self.spec.point(k / r, k % r);
            s += &format!("{},{},{},{}\n", fmt9(x), fmt9(y), c, fmt9(m));
        }
        s
    }

    /// Binary 8-bit grayscale (P5), top row at `y_max`: class 0 light, class 1
    /// dark, boundary cells black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let r = self.resolution();
        let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
        let edge = self.edge_mask();
        for row in (0..r).rev() {
            for col in 0..r {
                let k = row * r + col;
                out.push(if edge[k] {
                    0
                } else if self.classes[k] == 0 {
                    220
                } else {
                    110
                });
            }
        }
        out
    }

    /// Binary colour (P6): class 0 blue, class 1 orange, shaded by |margin|.
    pub fn to_ppm(&self) -> Vec<u8> {
        let r = self.resolution();
        let mut out = format!("P6\n{r} {r}\n255\n").into_bytes();
        let scale = self.margins.iter().fold(0.0f64, |a, m| a.max(m.abs())).max(1e-12);
        for row in (0..r).rev() {
            for col in 0..r {
                let k = row * r + col;
                let t = 0.35 + 0.65 * (self.margins[k].abs() / scale).sqrt();
                let base: [f64; 3] = if self.classes[k] == 0 { [40.0, 110.0, 220.0] } else { [240.0, 140.0, 30.0] };
                out.extend(base.map(|c| (255.0 - (255.0 - c) * t).round() as u8));
            }
        }
        out
    }

    fn edge_mask(&self) -> Vec<bool> {
        let r = self.resolution();
        (0..r * r)
            .map(|k| {
                let (row, col) = (k / r, k % r);
                let c = self.classes[k];
                (row + 1 < r && self.class_at(row + 1, col) != c) || (col + 1 < r && self.class_at(row, col + 1) != c)
            })
            .collect()
    }
}
