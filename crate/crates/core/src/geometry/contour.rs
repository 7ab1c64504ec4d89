use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D point in pixel coordinates: `x` grows rightward, `y` downward.
/// Pixel `(col, row)` has its center at `(col as f64, row as f64)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// An ordered polygon (closed) or polyline (open).
///
/// Serialized as the `.contour.json` format: `{"closed": bool, "points": [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub closed: bool,
    #[serde(rename = "points")]
    pub vertices: Vec<Point>,
}

impl Contour {
    pub fn closed(vertices: Vec<Point>) -> Self {
        Self { closed: true, vertices }
    }

    pub fn open(vertices: Vec<Point>) -> Self {
        Self { closed: false, vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Checks the minimum vertex count and finiteness.
    pub fn validate(&self) -> Result<()> {
        let min = if self.closed { 3 } else { 2 };
        if self.vertices.len() < min {
            return Err(Error::DegenerateContour(format!(
                "{} contour needs at least {min} vertices, has {}",
                if self.closed { "closed" } else { "open" },
                self.vertices.len()
            )));
        }
        if let Some(i) = self.vertices.iter().position(|p| !p.is_finite()) {
            return Err(Error::DegenerateContour(format!("vertex {i} is not finite")));
        }
        Ok(())
    }

    /// Polyline length, including the closing edge for closed contours.
    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// Iterates edges `(v[i], v[i+1])`, wrapping around when closed.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        let count = if self.closed { n } else { n.saturating_sub(1) };
        (0..count).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Same polyline with points inserted so no edge is longer than `max_spacing`.
    /// Original vertices are kept in place.
    pub fn densified(&self, max_spacing: f64) -> Contour {
        let mut out = Vec::with_capacity(self.vertices.len());
        for (a, b) in self.edges() {
            let steps = (a.dist(b) / max_spacing).ceil().max(1.0) as usize;
            out.extend((0..steps).map(|k| a + (b - a) * (k as f64 / steps as f64)));
        }
        if !self.closed {
            out.extend(self.vertices.last().copied());
        }
        Contour { vertices: out, closed: self.closed }
    }

    /// Mean of the vertices.
    pub fn centroid(&self) -> Point {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Shoelace area; positive for the canonical orientation.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        0.5 * acc
    }

    /// Reverses vertex order (keeping the first vertex) if the signed area is negative.
    pub fn to_canonical_orientation(&self) -> Contour {
        if !self.closed || self.signed_area() >= 0.0 {
            return self.clone();
        }
        let mut vertices = Vec::with_capacity(self.len());
        vertices.push(self.vertices[0]);
        vertices.extend(self.vertices[1..].iter().rev());
        Contour { closed: true, vertices }
    }

    pub fn translate(&self, t: Point) -> Contour {
        Contour {
            closed: self.closed,
            vertices: self.vertices.iter().map(|&p| p + t).collect(),
        }
    }

    /// Scales about `origin`.
    pub fn scale_about(&self, origin: Point, s: f64) -> Contour {
        Contour {
            closed: self.closed,
            vertices: self
                .vertices
                .iter()
                .map(|&p| origin + (p - origin) * s)
                .collect(),
        }
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let edges: Vec<_> = self.edges().collect();
        let m = edges.len();
        for i in 0..m {
            for j in (i + 1)..m {
                let adjacent = j == i + 1 || (self.closed && i == 0 && j == m - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    pub fn read_json(path: &Path) -> Result<Contour> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let contour: Contour = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        contour
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(contour)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on_segment = |a: Point, b: Point, p: Point| {
        p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    };
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Resamples a polyline to `n` vertices equally spaced by arc length.
///
/// The first output vertex is the first input vertex. A closed input spreads
/// the vertices over the full loop (spacing `perimeter / n`); an open input
/// places the last output vertex on the last input vertex.
pub fn resample_uniform(points: &[Point], n: usize, closed: bool) -> Result<Contour> {
    if n == 0 || (closed && n < 3) || (!closed && n < 2) {
        return Err(Error::DegenerateContour(format!("cannot resample to {n} vertices")));
    }
    if points.len() < 2 || points.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateContour("fewer than 2 finite points".into()));
    }
    let source = Contour { closed, vertices: points.to_vec() };
    let edges: Vec<(Point, Point, f64)> = source.edges().map(|(a, b)| (a, b, a.dist(b))).collect();
    let total: f64 = edges.iter().map(|e| e.2).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateContour("zero-length input".into()));
    }
    let spacing = if closed { total / n as f64 } else { total / (n - 1) as f64 };

    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut edge = 0usize;
    let mut edge_start = 0.0; // arc length at the start of `edge`
    for k in 1..n {
        if !closed && k == n - 1 {
            out.push(*points.last().unwrap());
            break;
        }
        let target = spacing * k as f64;
        while edge + 1 < edges.len() && edge_start + edges[edge].2 < target {
            edge_start += edges[edge].2;
            edge += 1;
        }
        let (a, b, len) = edges[edge];
        let t = if len > 0.0 { ((target - edge_start) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(a + (b - a) * t);
    }
    Ok(Contour { closed, vertices: out })
}

/// Places a contour so that its vertex centroid sits at the image center
/// `((w - 1) / 2, (h - 1) / 2)`.
pub fn center_initialize(exemplar: &Contour, width: usize, height: usize) -> Contour {
    let c = exemplar.centroid();
    let center = Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    exemplar.translate(center - c)
}
