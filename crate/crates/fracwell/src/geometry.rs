//! Meshes for the unit square and its shrunken-square exhaustion, boundary
//! extraction with lumped arc-length weights, the combined bulk+boundary
//! measure, and an exact lower/upper d-set verifier for polygonal boundaries.

use nalgebra::{DVector, Point2, Vector2};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid spacing must divide the side exactly: side/h = {0} is not an integer")]
    SpacingNotDivisor(f64),
    #[error("grid spacing must lie in (0, side], got {0}")]
    SpacingRange(f64),
    #[error(
        "boundary dimension mismatch: requested d = {requested}, polygonal boundary has d = 1"
    )]
    DsetMismatch { requested: f64 },
    #[error("mesh boundary is not a single closed loop")]
    NotWatertight,
    #[error("degenerate element {0} (area {1:e})")]
    DegenerateElement(usize, f64),
    #[error("polyline needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("prefractal depth must be at least 1, got {0}")]
    PrefractalDepth(usize),
    #[error("vertex {vertex} of the level-{level} mesh escapes the level-{next} domain")]
    NotNested {
        level: usize,
        next: usize,
        vertex: usize,
    },
    #[error("mesh io: {0}")]
    Io(#[from] std::io::Error),
    #[error("mesh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Metadata for structured square meshes; enables O(1) point location.
#[derive(Debug, Clone, Copy)]
pub struct StructuredGrid {
    pub origin: Point2<f64>,
    pub h: f64,
    pub cells: usize,
}

/// Conforming triangulation. Triangles are counter-clockwise vertex index
/// triples.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point2<f64>>,
    pub triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    grid: Option<StructuredGrid>,
}

fn triangle_area(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    0.5 * ((b - a).perp(&(c - a)))
}

impl Mesh {
    /// Structured triangulation of the unit square with spacing `h = 1/k`.
    /// Cells are split along alternating diagonals so the mesh carries no
    /// directional bias.
    pub fn unit_square(h: f64) -> Result<Self, GeometryError> {
        Self::square(Point2::new(0.0, 0.0), 1.0, h)
    }

    /// Structured triangulation of an axis-aligned square.
    pub fn square(origin: Point2<f64>, side: f64, h: f64) -> Result<Self, GeometryError> {
        if !(h > 0.0 && h <= side) {
            return Err(GeometryError::SpacingRange(h));
        }
        let ratio = side / h;
        let cells = ratio.round() as usize;
        if cells == 0 || (ratio - cells as f64).abs() > 1e-9 * ratio.max(1.0) {
            return Err(GeometryError::SpacingNotDivisor(ratio));
        }
        let n = cells + 1;
        let step = side / cells as f64;
        let mut vertices = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                vertices.push(Point2::new(
                    origin.x + i as f64 * step,
                    origin.y + j as f64 * step,
                ));
            }
        }
        let vid = |i: usize, j: usize| j * n + i;
        let mut triangles = Vec::with_capacity(2 * cells * cells);
        for j in 0..cells {
            for i in 0..cells {
                let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
                if (i + j) % 2 == 0 {
                    triangles.push([a, b, c]);
                    triangles.push([a, c, d]);
                } else {
                    triangles.push([a, b, d]);
                    triangles.push([b, c, d]);
                }
            }
        }
        let grid = Some(StructuredGrid {
            origin,
            h: step,
            cells,
        });
        Self::from_parts(vertices, triangles, grid)
    }

    /// Assemble from raw tables, validating element orientation and areas.
    pub fn from_parts(
        vertices: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        grid: Option<StructuredGrid>,
    ) -> Result<Self, GeometryError> {
        let mut areas = Vec::with_capacity(triangles.len());
        for (k, t) in triangles.iter().enumerate() {
            let a = triangle_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            if a <= 0.0 || !a.is_finite() {
                return Err(GeometryError::DegenerateElement(k, a));
            }
            areas.push(a);
        }
        Ok(Self {
            vertices,
            triangles,
            areas,
            grid,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn area(&self, tri: usize) -> f64 {
        self.areas[tri]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn grid(&self) -> Option<&StructuredGrid> {
        self.grid.as_ref()
    }

    pub fn corners(&self, tri: usize) -> [Point2<f64>; 3] {
        let t = self.triangles[tri];
        [
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
        ]
    }

    pub fn centroid(&self, tri: usize) -> Point2<f64> {
        let [a, b, c] = self.corners(tri);
        Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    pub fn diameter(&self, tri: usize) -> f64 {
        let [a, b, c] = self.corners(tri);
        (a - b).norm().max((b - c).norm()).max((c - a).norm())
    }

    /// Triangle containing `p` together with its barycentric coordinates.
    pub fn locate(&self, p: Point2<f64>) -> Option<(usize, [f64; 3])> {
        const TOL: f64 = 1e-10;
        if let Some(g) = &self.grid {
            let fi = ((p.x - g.origin.x) / g.h).floor();
            let fj = ((p.y - g.origin.y) / g.h).floor();
            let ci = (fi.max(0.0) as usize).min(g.cells - 1);
            let cj = (fj.max(0.0) as usize).min(g.cells - 1);
            // probe the cell and its neighbours to absorb points on cell edges
            for dj in [0i64, -1, 1] {
                for di in [0i64, -1, 1] {
                    let i = ci as i64 + di;
                    let j = cj as i64 + dj;
                    if i < 0 || j < 0 || i >= g.cells as i64 || j >= g.cells as i64 {
                        continue;
                    }
                    let cell = (j as usize) * g.cells + i as usize;
                    for tri in [2 * cell, 2 * cell + 1] {
                        if let Some(l) = self.bary_in(tri, p, TOL) {
                            return Some((tri, l));
                        }
                    }
                }
            }
            return None;
        }
        (0..self.triangles.len()).find_map(|tri| self.bary_in(tri, p, TOL).map(|l| (tri, l)))
    }

    fn bary_in(&self, tri: usize, p: Point2<f64>, tol: f64) -> Option<[f64; 3]> {
        let [a, b, c] = self.corners(tri);
        let total = 2.0 * self.areas[tri];
        let l0 = (b - p).perp(&(c - p)) / total;
        let l1 = (c - p).perp(&(a - p)) / total;
        let l2 = 1.0 - l0 - l1;
        if l0 >= -tol && l1 >= -tol && l2 >= -tol {
            Some([l0, l1, l2])
        } else {
            None
        }
    }

    /// Evaluate the piecewise-linear field `u` (nodal values) at `p`.
    ///
    /// Written in difference form so a constant field evaluates to exactly
    /// that constant: the barycentric weights only ever multiply nodal
    /// differences, never the level.
    pub fn eval(&self, u: &DVector<f64>, p: Point2<f64>) -> Option<f64> {
        let (tri, l) = self.locate(p)?;
        let t = self.triangles[tri];
        Some(u[t[0]] + l[1] * (u[t[1]] - u[t[0]]) + l[2] * (u[t[2]] - u[t[0]]))
    }

    /// Plain-text export: `nodes <count>` then `<idx> <x> <y>` rows,
    /// `triangles <count>` then `<idx> <a> <b> <c>` rows.
    pub fn export(&self, path: &Path) -> Result<(), GeometryError> {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.vertices.len());
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(out, "{} {} {}", i, v.x, v.y);
        }
        let _ = writeln!(out, "triangles {}", self.triangles.len());
        for (i, t) in self.triangles.iter().enumerate() {
            let _ = writeln!(out, "{} {} {} {}", i, t[0], t[1], t[2]);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        let parse = |line: usize, msg: &str| GeometryError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (ln, header) = lines.next().ok_or_else(|| parse(0, "empty file"))?;
        let n_nodes: usize = header
            .strip_prefix("nodes ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse(ln + 1, "expected `nodes <count>`"))?;
        let mut vertices = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| parse(0, "unexpected end of node table"))?;
            let mut it = row.split_whitespace();
            let _idx = it.next();
            let x: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse(ln + 1, "bad node x"))?;
            let y: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse(ln + 1, "bad node y"))?;
            vertices.push(Point2::new(x, y));
        }
        let (ln, header) = lines
            .next()
            .ok_or_else(|| parse(0, "missing triangle table"))?;
        let n_tri: usize = header
            .strip_prefix("triangles ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse(ln + 1, "expected `triangles <count>`"))?;
        let mut triangles = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| parse(0, "unexpected end of triangle table"))?;
            let ids: Vec<usize> = row
                .split_whitespace()
                .skip(1)
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| parse(ln + 1, "bad triangle row"))?;
            if ids.len() != 3 {
                return Err(parse(ln + 1, "triangle row needs 3 vertex ids"));
            }
            triangles.push([ids[0], ids[1], ids[2]]);
        }
        Self::from_parts(vertices, triangles, None)
    }
}

/// Boundary of a mesh as an ordered polyline (closed loop for watertight
/// meshes) with lumped arc-length node weights.
#[derive(Debug, Clone)]
pub struct BoundaryMesh {
    /// Global mesh vertex ids along the loop (standalone fixtures use 0..n).
    pub node_ids: Vec<usize>,
    pub points: Vec<Point2<f64>>,
    /// Segments as local index pairs (i, i+1), wrapping when closed.
    pub segments: Vec<[usize; 2]>,
    pub lengths: Vec<f64>,
    /// Lumped arc-length weight per local node: half of each adjacent segment.
    pub mu: Vec<f64>,
    pub d: f64,
    pub closed: bool,
}

impl BoundaryMesh {
    /// Standalone polyline fixture (used by small boundary-only cases).
    pub fn from_polyline(
        points: Vec<Point2<f64>>,
        closed: bool,
        d: f64,
    ) -> Result<Self, GeometryError> {
        if (d - 1.0).abs() > 1e-12 {
            return Err(GeometryError::DsetMismatch { requested: d });
        }
        let needed = if closed { 3 } else { 2 };
        if points.len() < needed {
            return Err(GeometryError::TooFewPoints {
                needed,
                got: points.len(),
            });
        }
        let n = points.len();
        let n_seg = if closed { n } else { n - 1 };
        let mut segments = Vec::with_capacity(n_seg);
        let mut lengths = Vec::with_capacity(n_seg);
        for k in 0..n_seg {
            let i = k;
            let j = (k + 1) % n;
            let len = (points[j] - points[i]).norm();
            if len <= 0.0 {
                return Err(GeometryError::DegenerateElement(k, len));
            }
            segments.push([i, j]);
            lengths.push(len);
        }
        let mut mu = vec![0.0; n];
        for (seg, len) in segments.iter().zip(&lengths) {
            mu[seg[0]] += 0.5 * len;
            mu[seg[1]] += 0.5 * len;
        }
        Ok(Self {
            node_ids: (0..n).collect(),
            points,
            segments,
            lengths,
            mu,
            d,
            closed,
        })
    }

    pub fn total_measure(&self) -> f64 {
        self.lengths.iter().sum()
    }

    pub fn n_nodes(&self) -> usize {
        self.points.len()
    }

    pub fn min_segment(&self) -> f64 {
        self.lengths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Exact arc length of the boundary inside the disc B(x, r).
    pub fn measure_in_ball(&self, x: Point2<f64>, r: f64) -> f64 {
        let mut total = 0.0;
        for (seg, &len) in self.segments.iter().zip(&self.lengths) {
            let a = self.points[seg[0]];
            let b = self.points[seg[1]];
            let e = b - a;
            let d0 = a - x;
            // |d0 + t e|^2 = r^2
            let qa = e.norm_squared();
            let qb = 2.0 * d0.dot(&e);
            let qc = d0.norm_squared() - r * r;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc <= 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t0 = ((-qb - sq) / (2.0 * qa)).max(0.0);
            let t1 = ((-qb + sq) / (2.0 * qa)).min(1.0);
            if t1 > t0 {
                total += (t1 - t0) * len;
            }
        }
        total
    }
}

/// Extract the boundary loop of a conforming mesh. `d` must match the
/// polygonal boundary dimension (1).
pub fn extract_boundary(mesh: &Mesh, d: f64) -> Result<BoundaryMesh, GeometryError> {
    if (d - 1.0).abs() > 1e-12 {
        return Err(GeometryError::DsetMismatch { requested: d });
    }
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &mesh.triangles {
        for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (i.min(j), i.max(j));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut n_boundary_edges = 0usize;
    for (&(i, j), &count) in &edge_count {
        match count {
            1 => {
                adj.entry(i).or_default().push(j);
                adj.entry(j).or_default().push(i);
                n_boundary_edges += 1;
            }
            2 => {}
            _ => return Err(GeometryError::NotWatertight),
        }
    }
    if adj.is_empty() || adj.values().any(|v| v.len() != 2) {
        return Err(GeometryError::NotWatertight);
    }
    let start = *adj.keys().min().unwrap();
    let mut loop_ids = vec![start];
    let mut prev = start;
    let mut cur = adj[&start][0];
    while cur != start {
        loop_ids.push(cur);
        let nbrs = &adj[&cur];
        let next = if nbrs[0] == prev { nbrs[1] } else { nbrs[0] };
        prev = cur;
        cur = next;
        if loop_ids.len() > n_boundary_edges {
            return Err(GeometryError::NotWatertight);
        }
    }
    if loop_ids.len() != n_boundary_edges {
        return Err(GeometryError::NotWatertight);
    }
    let points: Vec<Point2<f64>> = loop_ids.iter().map(|&i| mesh.vertices[i]).collect();
    let mut bm = BoundaryMesh::from_polyline(points, true, d)?;
    bm.node_ids = loop_ids;
    Ok(bm)
}

/// Combined measure: lumped Lebesgue bulk weights plus lumped arc-length
/// boundary weights on boundary nodes.
#[derive(Debug, Clone)]
pub struct MeasureM {
    pub lebesgue: DVector<f64>,
    pub mu: DVector<f64>,
    pub m: DVector<f64>,
    pub boundary_nodes: Vec<usize>,
}

impl MeasureM {
    pub fn build(mesh: &Mesh, boundary: &BoundaryMesh) -> Self {
        let n = mesh.n_vertices();
        let mut lebesgue = DVector::zeros(n);
        for (k, t) in mesh.triangles.iter().enumerate() {
            let third = mesh.area(k) / 3.0;
            for &v in t {
                lebesgue[v] += third;
            }
        }
        let mut mu = DVector::zeros(n);
        for (local, &global) in boundary.node_ids.iter().enumerate() {
            mu[global] += boundary.mu[local];
        }
        let m = &lebesgue + &mu;
        MeasureM {
            lebesgue,
            mu,
            m,
            boundary_nodes: boundary.node_ids.clone(),
        }
    }

    pub fn total(&self) -> f64 {
        self.m.sum()
    }
}

/// One sampled ratio of the d-set verifier.
#[derive(Debug, Clone, Copy)]
pub struct DsetSample {
    pub center: Point2<f64>,
    pub radius: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct DsetReport {
    pub c_lower: f64,
    pub c_upper: f64,
    pub samples: Vec<DsetSample>,
    /// Radii below the mesh resolution that were skipped.
    pub skipped: usize,
}

/// Sample mu(B(x,r))/r^d over boundary nodes and segment midpoints. Radii
/// below the smallest segment cannot be resolved and are skipped.
pub fn verify_dset(boundary: &BoundaryMesh, radii: &[f64]) -> DsetReport {
    let resolution = boundary.min_segment();
    let mut centers: Vec<Point2<f64>> = boundary.points.clone();
    for (seg, _) in boundary.segments.iter().zip(&boundary.lengths) {
        let a = boundary.points[seg[0]];
        let b = boundary.points[seg[1]];
        centers.push(Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y)));
    }
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for &r in radii {
        if r < resolution {
            skipped += 1;
            continue;
        }
        for &x in &centers {
            let measure = boundary.measure_in_ball(x, r);
            samples.push(DsetSample {
                center: x,
                radius: r,
                ratio: measure / r.powf(boundary.d),
            });
        }
    }
    let c_lower = samples
        .iter()
        .map(|s| s.ratio)
        .fold(f64::INFINITY, f64::min);
    let c_upper = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    DsetReport {
        c_lower,
        c_upper,
        samples,
        skipped,
    }
}

/// Nested shrunken squares exhausting the unit square from inside:
/// level n covers (delta_n, 1-delta_n)^2 with delta_n = 2^-(n+1).
#[derive(Debug, Clone)]
pub struct PrefractalFamily {
    /// meshes[k] is level n = k+1.
    pub meshes: Vec<Mesh>,
    pub deltas: Vec<f64>,
}

impl PrefractalFamily {
    /// Build levels 1..=n_max, each meshed with spacing close to `h_target`.
    pub fn build(n_max: usize, h_target: f64) -> Result<Self, GeometryError> {
        if n_max < 1 {
            return Err(GeometryError::PrefractalDepth(n_max));
        }
        let mut meshes = Vec::with_capacity(n_max);
        let mut deltas = Vec::with_capacity(n_max);
        for n in 1..=n_max {
            let delta = 2f64.powi(-(n as i32) - 1);
            let side = 1.0 - 2.0 * delta;
            let cells = (side / h_target).round().max(1.0) as usize;
            let mesh = Mesh::square(Point2::new(delta, delta), side, side / cells as f64)?;
            meshes.push(mesh);
            deltas.push(delta);
        }
        let fam = Self { meshes, deltas };
        fam.check_nested()?;
        Ok(fam)
    }

    fn check_nested(&self) -> Result<(), GeometryError> {
        for k in 0..self.meshes.len().saturating_sub(1) {
            let next = self.meshes[k + 1]
                .grid()
                .expect("prefractal meshes are structured");
            let lo = next.origin;
            let side = next.h * next.cells as f64;
            for (vi, v) in self.meshes[k].vertices.iter().enumerate() {
                let inside = v.x >= lo.x - 1e-12
                    && v.y >= lo.y - 1e-12
                    && v.x <= lo.x + side + 1e-12
                    && v.y <= lo.y + side + 1e-12;
                if !inside {
                    return Err(GeometryError::NotNested {
                        level: k + 1,
                        next: k + 2,
                        vertex: vi,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Distance from `p` to the boundary polyline.
pub fn distance_to_boundary(boundary: &BoundaryMesh, p: Point2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for seg in &boundary.segments {
        let a = boundary.points[seg[0]];
        let b = boundary.points[seg[1]];
        let e = b - a;
        let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let q = a + e * t;
        best = best.min((p - q).norm());
    }
    best
}

pub fn shared_vertices(ta: &[usize; 3], tb: &[usize; 3]) -> Vec<usize> {
    ta.iter().filter(|v| tb.contains(v)).cloned().collect()
}

/// Vector difference helper for chained points.
pub fn vec2(a: Point2<f64>, b: Point2<f64>) -> Vector2<f64> {
    b - a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_square_counts() {
        let m = Mesh::unit_square(0.5).unwrap();
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.n_triangles(), 8);
        let m1 = Mesh::unit_square(1.0).unwrap();
        assert_eq!(m1.n_vertices(), 4);
        assert_eq!(m1.n_triangles(), 2);
        let m4 = Mesh::unit_square(0.25).unwrap();
        assert_eq!(m4.n_vertices(), 25);
        assert_eq!(m4.n_triangles(), 32);
    }

    #[test]
    fn unit_square_total_area_is_one() {
        let m = Mesh::unit_square(0.125).unwrap();
        assert_relative_eq!(m.total_area(), 1.0, epsilon = 1e-13);
    }

    #[test]
    fn fractional_spacing_rejected() {
        assert!(matches!(
            Mesh::unit_square(0.3),
            Err(GeometryError::SpacingNotDivisor(_))
        ));
        assert!(matches!(
            Mesh::unit_square(0.0),
            Err(GeometryError::SpacingRange(_))
        ));
        assert!(matches!(
            Mesh::unit_square(2.0),
            Err(GeometryError::SpacingRange(_))
        ));
    }

    #[test]
    fn boundary_of_unit_square() {
        let m = Mesh::unit_square(0.5).unwrap();
        let b = extract_boundary(&m, 1.0).unwrap();
        assert_eq!(b.n_nodes(), 8);
        assert_relative_eq!(b.total_measure(), 4.0, epsilon = 1e-13);
        assert!(b.mu.iter().all(|&w| (w - 0.5).abs() < 1e-13));
        // mu weights tile the perimeter
        assert_relative_eq!(b.mu.iter().sum::<f64>(), 4.0, epsilon = 1e-13);
    }

    #[test]
    fn wrong_boundary_dimension_rejected() {
        let m = Mesh::unit_square(0.5).unwrap();
        assert!(matches!(
            extract_boundary(&m, 1.5),
            Err(GeometryError::DsetMismatch { .. })
        ));
    }

    #[test]
    fn measure_partition() {
        let m = Mesh::unit_square(0.25).unwrap();
        let b = extract_boundary(&m, 1.0).unwrap();
        let mm = MeasureM::build(&m, &b);
        assert_relative_eq!(mm.lebesgue.sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(mm.mu.sum(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(mm.total(), 5.0, epsilon = 1e-12);
        for i in 0..m.n_vertices() {
            let on_boundary = mm.boundary_nodes.contains(&i);
            assert_eq!(mm.mu[i] > 0.0, on_boundary);
            assert!(mm.lebesgue[i] > 0.0);
        }
    }

    #[test]
    fn dset_ratios_on_square() {
        let m = Mesh::unit_square(0.25).unwrap();
        let b = extract_boundary(&m, 1.0).unwrap();
        // mid-edge: a ball of radius r < 0.5 covers an arc of length 2r
        let mid = Point2::new(0.5, 0.0);
        assert_relative_eq!(b.measure_in_ball(mid, 0.3) / 0.3, 2.0, epsilon = 1e-12);
        // corner: two half-arcs of length r each
        let corner = Point2::new(0.0, 0.0);
        assert_relative_eq!(b.measure_in_ball(corner, 0.3) / 0.3, 2.0, epsilon = 1e-12);
        // radii capped at 1.0 < diam: by then a mid-edge ball already reaches
        // three sides, so the two-sided constants are 2 and about 2.73
        let radii: Vec<f64> = (1..=4).map(|k| 0.25 * k as f64).collect();
        let report = verify_dset(&b, &radii);
        assert!(report.c_lower >= 2.0 - 1e-9, "c_lower {}", report.c_lower);
        assert!(report.c_lower <= report.c_upper);
        assert!(report.c_upper <= 3.0, "c_upper {}", report.c_upper);
        assert_eq!(report.skipped, 0);
        // sub-resolution radii are skipped, not sampled
        let report2 = verify_dset(&b, &[0.01, 0.5]);
        assert_eq!(report2.skipped, 1);
    }

    #[test]
    fn prefractal_family_nested_and_growing() {
        let fam = PrefractalFamily::build(5, 0.125).unwrap();
        assert_eq!(fam.meshes.len(), 5);
        // level 1 is the square of side 0.5 at (0.25, 0.25)
        let g1 = fam.meshes[0].grid().unwrap();
        assert_relative_eq!(g1.origin.x, 0.25, epsilon = 1e-15);
        assert_relative_eq!(g1.h * g1.cells as f64, 0.5, epsilon = 1e-13);
        let mut prev = 0.0;
        for mesh in &fam.meshes {
            let a = mesh.total_area();
            assert!(a > prev);
            assert!(a < 1.0);
            prev = a;
        }
        assert!(PrefractalFamily::build(0, 0.125).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let m = Mesh::unit_square(0.25).unwrap();
        let dir = std::env::temp_dir().join("fracwell_geometry_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mesh.txt");
        m.export(&path).unwrap();
        let back = Mesh::import(&path).unwrap();
        assert_eq!(back.n_vertices(), m.n_vertices());
        assert_eq!(back.n_triangles(), m.n_triangles());
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            assert_eq!(a, b);
        }
        for (a, b) in m.triangles.iter().zip(&back.triangles) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn locate_reproduces_linear_fields() {
        let m = Mesh::unit_square(0.25).unwrap();
        let u = DVector::from_fn(m.n_vertices(), |i, _| {
            let v = m.vertices[i];
            2.0 * v.x - 3.0 * v.y + 0.5
        });
        for &(x, y) in &[(0.1, 0.2), (0.5, 0.5), (0.99, 0.01), (0.0, 0.0), (1.0, 1.0)] {
            let p = Point2::new(x, y);
            let got = m.eval(&u, p).unwrap();
            assert_relative_eq!(got, 2.0 * x - 3.0 * y + 0.5, epsilon = 1e-11);
        }
    }

    #[test]
    fn distance_to_boundary_of_square() {
        let m = Mesh::unit_square(0.5).unwrap();
        let b = extract_boundary(&m, 1.0).unwrap();
        assert_relative_eq!(
            distance_to_boundary(&b, Point2::new(0.5, 0.5)),
            0.5,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            distance_to_boundary(&b, Point2::new(0.1, 0.4)),
            0.1,
            epsilon = 1e-13
        );
    }
}
