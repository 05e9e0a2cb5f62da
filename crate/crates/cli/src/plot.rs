//! Uncertainty surfaces over a 2-D grid: PGM heatmap, raw values and an
//! SVG outline of the class regions.

use std::fmt::Write as _;

use vos_core::evalkit::{self, ScoreMethod};
use vos_core::mathkit::Matrix;
use vos_core::network::Model;
use vos_core::{Result, VosError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Points per axis, edges included.
    pub resolution: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(VosError::InvalidArgument(format!("grid resolution must be >= 2, got {}", self.resolution)));
        }
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.x_min, self.x_max) || !ok(self.y_min, self.y_max) {
            return Err(VosError::InvalidArgument("grid ranges must be finite with min < max".into()));
        }
        Ok(())
    }

    pub fn x(&self, col: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * col as f64 / (self.resolution - 1) as f64
    }

    /// Row 0 is the top edge.
    pub fn y(&self, row: usize) -> f64 {
        self.y_max - (self.y_max - self.y_min) * row as f64 / (self.resolution - 1) as f64
    }

    fn points(&self) -> Vec<Vec<f64>> {
        let n = self.resolution;
        (0..n).flat_map(|r| (0..n).map(move |c| vec![self.x(c), self.y(r)])).collect()
    }
}

/// Scores and predicted classes, row-major with row 0 at `y_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub grid: Grid,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

pub fn evaluate(model: &Model, grid: &Grid) -> Result<Surface> {
    grid.validate()?;
    let inputs = Matrix::from_rows(&grid.points())?;
    Ok(Surface {
        grid: *grid,
        scores: evalkit::score_batch(model, &inputs, ScoreMethod::Vos)?,
        classes: evalkit::predict_batch(model, &inputs)?,
    })
}

/// 0 for a score of 0 (OOD), 255 for a score of 1 (ID).
pub fn gray_level(score: f64) -> u8 {
    (score.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Surface {
    fn n(&self) -> usize {
        self.grid.resolution
    }

    pub fn to_pgm(&self) -> String {
        let n = self.n();
        let mut s = format!("P2\n{n} {n}\n255\n");
        for row in self.scores.chunks(n) {
            let line: Vec<String> = row.iter().map(|&v| gray_level(v).to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// One line per grid row, scores separated by spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.scores.chunks(self.n()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Cell edges separating differently classified neighbours, drawn in
    /// data coordinates over the heatmap extent.
    pub fn to_svg(&self) -> String {
        let g = &self.grid;
        let n = self.n();
        let dx = (g.x_max - g.x_min) / (n - 1) as f64;
        let dy = (g.y_max - g.y_min) / (n - 1) as f64;
        let class = |r: usize, c: usize| self.classes[r * n + c];
        let mut s = String::new();
        writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\">",
            g.x_min,
            -g.y_max,
            g.x_max - g.x_min,
            g.y_max - g.y_min
        )
        .expect("write to String");
        let stroke = (dx.min(dy) * 0.25).max(f64::MIN_POSITIVE);
        writeln!(s, "<g fill=\"none\" stroke=\"black\" stroke-width=\"{stroke}\">").expect("write to String");
        let mut segment = |x0: f64, y0: f64, x1: f64, y1: f64| {
            writeln!(s, "<polyline points=\"{x0},{} {x1},{}\"/>", -y0, -y1).expect("write to String");
        };
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (g.x(c), g.y(r));
                if c + 1 < n && class(r, c) != class(r, c + 1) {
                    segment(x + dx / 2.0, y - dy / 2.0, x + dx / 2.0, y + dy / 2.0);
                }
                if r + 1 < n && class(r, c) != class(r + 1, c) {
                    segment(x - dx / 2.0, y - dy / 2.0, x + dx / 2.0, y - dy / 2.0);
                }
            }
        }
        s.push_str("</g>\n</svg>\n");
        s
    }
}
