//! Shape classes and their analytic geometry. A shape is sampled as exact
//! parameters (centers, radii, vertices) and rasterized by testing each
//! pixel center against the region predicate, so the label mask is the
//! exact rasterization of known geometry rather than an approximation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
    Crescent,
    Ellipse,
    Diamond,
    Bar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 10] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Star,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Crescent,
        ShapeClass::Ellipse,
        ShapeClass::Diamond,
        ShapeClass::Bar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Star => "star",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Crescent => "crescent",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Bar => "bar",
        }
    }

    /// Sample instance geometry. Draws a fixed number of values from `rng`
    /// for a given class, independent of image size.
    pub fn sample(&self, rng: &mut ChaCha8Rng, size: usize) -> ShapeGeom {
        let s = size as f64;
        let cx = rng.random_range(0.35 * s..0.65 * s);
        let cy = rng.random_range(0.35 * s..0.65 * s);
        let r = rng.random_range(0.18 * s..0.30 * s);
        match self {
            ShapeClass::Circle => ShapeGeom::Circle { cx, cy, r },
            ShapeClass::Square => {
                let half = 0.9 * r;
                ShapeGeom::RectUnion {
                    rects: vec![(cx - half, cy - half, cx + half, cy + half)],
                }
            }
            ShapeClass::Triangle => {
                let th0 = rng.random_range(0.0..std::f64::consts::TAU);
                let verts = (0..3)
                    .map(|k| {
                        let a = th0 + k as f64 * std::f64::consts::TAU / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                ShapeGeom::Polygon { verts }
            }
            ShapeClass::Star => {
                let th0 = rng.random_range(0.0..std::f64::consts::TAU);
                let verts = (0..10)
                    .map(|k| {
                        let a = th0 + k as f64 * std::f64::consts::PI / 5.0;
                        let rad = if k % 2 == 0 { r } else { 0.45 * r };
                        (cx + rad * a.cos(), cy + rad * a.sin())
                    })
                    .collect();
                ShapeGeom::Polygon { verts }
            }
            ShapeClass::Cross => {
                let t = 0.55 * r / 2.0;
                ShapeGeom::RectUnion {
                    rects: vec![
                        (cx - r, cy - t, cx + r, cy + t),
                        (cx - t, cy - r, cx + t, cy + r),
                    ],
                }
            }
            ShapeClass::Ring => {
                let inner = rng.random_range(0.45..0.65) * r;
                ShapeGeom::Annulus {
                    cx,
                    cy,
                    r_out: r,
                    r_in: inner,
                }
            }
            ShapeClass::Crescent => {
                let r2 = rng.random_range(0.80..1.00) * r;
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(0.45..0.70) * r;
                ShapeGeom::Crescent {
                    cx,
                    cy,
                    r,
                    ox: cx + d * phi.cos(),
                    oy: cy + d * phi.sin(),
                    r2,
                }
            }
            ShapeClass::Ellipse => {
                let b = rng.random_range(0.45..0.70) * r;
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                ShapeGeom::Ellipse {
                    cx,
                    cy,
                    a: r,
                    b,
                    theta,
                }
            }
            ShapeClass::Diamond => {
                let ry = rng.random_range(0.60..0.90) * r;
                ShapeGeom::Polygon {
                    verts: vec![(cx + r, cy), (cx, cy + ry), (cx - r, cy), (cx, cy - ry)],
                }
            }
            ShapeClass::Bar => {
                let half_t = rng.random_range(0.18..0.30) * r;
                let th = rng.random_range(0.0..std::f64::consts::PI);
                let (c, s) = (th.cos(), th.sin());
                let corners = [(-r, -half_t), (r, -half_t), (r, half_t), (-r, half_t)];
                ShapeGeom::Polygon {
                    verts: corners
                        .iter()
                        .map(|&(u, v)| (cx + c * u - s * v, cy + s * u + c * v))
                        .collect(),
                }
            }
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeClass::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown shape class {s:?}"))
    }
}

/// Exact region described by sampled parameters. Membership is tested at
/// pixel centers `(col + 0.5, row + 0.5)` with strict inequalities, so the
/// rasterized mask is fully determined by the parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeGeom {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Annulus {
        cx: f64,
        cy: f64,
        r_out: f64,
        r_in: f64,
    },
    /// Inside the `(cx, cy, r)` disc but not inside the cutter disc.
    Crescent {
        cx: f64,
        cy: f64,
        r: f64,
        ox: f64,
        oy: f64,
        r2: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        theta: f64,
    },
    /// Simple polygon, even-odd fill rule.
    Polygon {
        verts: Vec<(f64, f64)>,
    },
    RectUnion {
        rects: Vec<(f64, f64, f64, f64)>,
    },
}

impl ShapeGeom {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeGeom::Circle { cx, cy, r } => sq(x - cx) + sq(y - cy) < sq(*r),
            ShapeGeom::Annulus {
                cx,
                cy,
                r_out,
                r_in,
            } => {
                let d2 = sq(x - cx) + sq(y - cy);
                d2 < sq(*r_out) && d2 > sq(*r_in)
            }
            ShapeGeom::Crescent {
                cx,
                cy,
                r,
                ox,
                oy,
                r2,
            } => sq(x - cx) + sq(y - cy) < sq(*r) && sq(x - ox) + sq(y - oy) >= sq(*r2),
            ShapeGeom::Ellipse { cx, cy, a, b, theta } => {
                let (c, s) = (theta.cos(), theta.sin());
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                sq(u / a) + sq(v / b) < 1.0
            }
            ShapeGeom::Polygon { verts } => point_in_polygon(verts, x, y),
            ShapeGeom::RectUnion { rects } => rects
                .iter()
                .any(|&(x0, y0, x1, y1)| x > x0 && x < x1 && y > y0 && y < y1),
        }
    }

    /// Rasterize over an `size x size` grid of pixel centers.
    pub fn rasterize(&self, size: usize) -> Vec<Vec<bool>> {
        (0..size)
            .map(|i| {
                let y = i as f64 + 0.5;
                (0..size)
                    .map(|j| self.contains(j as f64 + 0.5, y))
                    .collect()
            })
            .collect()
    }
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Even-odd rule via crossing count: a point is inside when a ray to the
/// right crosses the boundary an odd number of times.
fn point_in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) {
            let xc = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < xc {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}
