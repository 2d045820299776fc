//! Domains, masked lattices and the normal offset gap.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::numerics::golden_section_min;

pub type Point = Vector2<f64>;

/// Number of boundary samples used for coarse scans.
pub const BOUNDARY_SAMPLES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    pub fn width(&self) -> f64 {
        (self.max.x - self.min.x).max(self.max.y - self.min.y)
    }

    pub fn contains(&self, x: &Point, pad: f64) -> bool {
        x.x >= self.min.x - pad
            && x.x <= self.max.x + pad
            && x.y >= self.min.y - pad
            && x.y <= self.max.y + pad
    }
}

/// Samples of a defining function on a rectangular lattice.
///
/// Binary layout (little endian): `u64 nx, u64 ny, f64 xmin, xmax, ymin, ymax`, then `nx*ny` values
/// with `values[j*nx + i]` at `(xmin + i dx, ymin + j dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSet {
    pub nx: usize,
    pub ny: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub values: Vec<f64>,
}

impl LevelSet {
    pub fn from_fn(nx: usize, ny: usize, bbox: BBox, f: impl Fn(Point) -> f64) -> Self {
        let dx = (bbox.max.x - bbox.min.x) / (nx - 1) as f64;
        let dy = (bbox.max.y - bbox.min.y) / (ny - 1) as f64;
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(f(Point::new(
                    bbox.min.x + i as f64 * dx,
                    bbox.min.y + j as f64 * dy,
                )));
            }
        }
        LevelSet {
            nx,
            ny,
            xmin: bbox.min.x,
            xmax: bbox.max.x,
            ymin: bbox.min.y,
            ymax: bbox.max.y,
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.values.len());
        out.extend_from_slice(&(self.nx as u64).to_le_bytes());
        out.extend_from_slice(&(self.ny as u64).to_le_bytes());
        for v in [self.xmin, self.xmax, self.ymin, self.ymax] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |k: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * k..8 * k + 8)
                .map(|s| s.try_into().unwrap())
                .ok_or_else(|| Error::Parse("level-set file truncated".into()))
        };
        let nx = u64::from_le_bytes(word(0)?) as usize;
        let ny = u64::from_le_bytes(word(1)?) as usize;
        if nx < 2 || ny < 2 {
            return Err(Error::Parse(format!("level-set size {nx}x{ny} too small")));
        }
        let f = |k| -> Result<f64> { Ok(f64::from_le_bytes(word(k)?)) };
        let (xmin, xmax, ymin, ymax) = (f(2)?, f(3)?, f(4)?, f(5)?);
        if bytes.len() != 48 + 8 * nx * ny {
            return Err(Error::Parse(format!(
                "level-set file has {} bytes, expected {}",
                bytes.len(),
                48 + 8 * nx * ny
            )));
        }
        let values = (0..nx * ny).map(|k| f(6 + k)).collect::<Result<Vec<_>>>()?;
        if !(xmax > xmin && ymax > ymin) {
            return Err(Error::Parse("level-set bounding box is empty".into()));
        }
        Ok(LevelSet {
            nx,
            ny,
            xmin,
            xmax,
            ymin,
            ymax,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / (self.nx - 1) as f64
    }

    fn dy(&self) -> f64 {
        (self.ymax - self.ymin) / (self.ny - 1) as f64
    }

    /// Bilinear interpolant; outside the sample box the value at the clamped point plus the
    /// distance to the box, which keeps it positive far away.
    pub fn rho(&self, x: &Point) -> f64 {
        let cx = x.x.clamp(self.xmin, self.xmax);
        let cy = x.y.clamp(self.ymin, self.ymax);
        let out = ((x.x - cx).powi(2) + (x.y - cy).powi(2)).sqrt();
        let fx = ((cx - self.xmin) / self.dx()).min((self.nx - 1) as f64 - 1e-12);
        let fy = ((cy - self.ymin) / self.dy()).min((self.ny - 1) as f64 - 1e-12);
        let i = fx.floor() as usize;
        let j = fy.floor() as usize;
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let v = |i: usize, j: usize| self.values[j * self.nx + i];
        let val = (1.0 - tx) * (1.0 - ty) * v(i, j)
            + tx * (1.0 - ty) * v(i + 1, j)
            + (1.0 - tx) * ty * v(i, j + 1)
            + tx * ty * v(i + 1, j + 1);
        val + out
    }

    pub fn cell(&self) -> f64 {
        self.dx().min(self.dy())
    }
}

#[derive(Clone, Debug)]
pub enum DomainKind {
    Ball { radius: f64 },
    Ellipse { a: f64, b: f64 },
    Implicit(Arc<LevelSet>),
}

#[derive(Clone, Copy, Debug)]
struct BoundarySample {
    phi: f64,
    point: Point,
    arc: f64,
}

/// A bounded C¹ domain containing the origin, star-shaped about it.
#[derive(Clone, Debug)]
pub struct Domain {
    pub kind: DomainKind,
    pub bounding_box: BBox,
    samples: Vec<BoundarySample>,
    perimeter: f64,
    lambda0: Arc<OnceLock<f64>>,
}

impl Domain {
    pub fn ball(radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain(format!(
                "ball radius {radius} must be positive"
            )));
        }
        Self::new(DomainKind::Ball { radius })
    }

    pub fn ellipse(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Domain(format!(
                "ellipse semi-axes ({a}, {b}) must be positive"
            )));
        }
        Self::new(DomainKind::Ellipse { a, b })
    }

    pub fn implicit(level_set: LevelSet) -> Result<Self> {
        Self::new(DomainKind::Implicit(Arc::new(level_set)))
    }

    /// Parses `ball:r`, `ellipse:a,b` or `implicit:<path>`.
    pub fn from_preset(spec: &str) -> Result<Self> {
        let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{s}' in domain '{spec}'")))
        };
        match name.trim() {
            "ball" => Self::ball(num(arg)?),
            "ellipse" => {
                let (a, b) = arg.split_once(',').ok_or_else(|| {
                    Error::Config(format!("ellipse needs two semi-axes: '{spec}'"))
                })?;
                Self::ellipse(num(a)?, num(b)?)
            }
            "implicit" => Self::implicit(LevelSet::read(Path::new(arg.trim()))?),
            other => Err(Error::Config(format!("unknown domain preset '{other}'"))),
        }
    }

    fn new(kind: DomainKind) -> Result<Self> {
        let mut d = Domain {
            kind,
            bounding_box: BBox {
                min: Point::zeros(),
                max: Point::zeros(),
            },
            samples: Vec::new(),
            perimeter: 0.0,
            lambda0: Arc::new(OnceLock::new()),
        };
        if !(d.rho(&Point::zeros()) < 0.0) {
            return Err(Error::Domain(
                "the origin must lie strictly inside the domain".into(),
            ));
        }
        if let DomainKind::Implicit(ls) = &d.kind {
            check_star_shaped(ls)?;
        }
        let mut samples = Vec::with_capacity(BOUNDARY_SAMPLES);
        let mut arc = 0.0;
        let mut prev: Option<Point> = None;
        for k in 0..BOUNDARY_SAMPLES {
            let phi = 2.0 * PI * k as f64 / BOUNDARY_SAMPLES as f64;
            let point = d.boundary_point(phi)?;
            if let Some(p) = prev {
                arc += (point - p).norm();
            }
            prev = Some(point);
            samples.push(BoundarySample { phi, point, arc });
        }
        let perimeter = arc + (samples[0].point - samples[BOUNDARY_SAMPLES - 1].point).norm();
        let mut min = Point::repeat(f64::INFINITY);
        let mut max = Point::repeat(f64::NEG_INFINITY);
        for s in &samples {
            min = min.inf(&s.point);
            max = max.sup(&s.point);
        }
        if let DomainKind::Implicit(_) = &d.kind {
            for s in &samples {
                if d.grad_rho(&s.point).norm() < 1e-8 {
                    return Err(Error::Domain(format!(
                        "defining function has vanishing gradient at boundary point ({}, {})",
                        s.point.x, s.point.y
                    )));
                }
            }
            let pad = 2.0 * PI / BOUNDARY_SAMPLES as f64 * max.norm().max(min.norm());
            min -= Point::repeat(pad);
            max += Point::repeat(pad);
        }
        d.bounding_box = BBox { min, max };
        d.samples = samples;
        d.perimeter = perimeter;
        Ok(d)
    }

    pub fn label(&self) -> String {
        match &self.kind {
            DomainKind::Ball { radius } => format!("ball:{radius}"),
            DomainKind::Ellipse { a, b } => format!("ellipse:{a},{b}"),
            DomainKind::Implicit(ls) => format!("implicit[{}x{}]", ls.nx, ls.ny),
        }
    }

    /// Defining function: negative inside, positive outside.
    pub fn rho(&self, x: &Point) -> f64 {
        match &self.kind {
            DomainKind::Ball { radius } => x.norm() - radius,
            DomainKind::Ellipse { a, b } => (x.x / a).powi(2) + (x.y / b).powi(2) - 1.0,
            DomainKind::Implicit(ls) => ls.rho(x),
        }
    }

    pub fn grad_rho(&self, x: &Point) -> Point {
        match &self.kind {
            DomainKind::Ball { .. } => {
                let n = x.norm();
                if n == 0.0 {
                    Point::zeros()
                } else {
                    x / n
                }
            }
            DomainKind::Ellipse { a, b } => Point::new(2.0 * x.x / (a * a), 2.0 * x.y / (b * b)),
            DomainKind::Implicit(ls) => {
                let s = 0.25 * ls.cell();
                let ex = Point::new(s, 0.0);
                let ey = Point::new(0.0, s);
                Point::new(
                    (ls.rho(&(x + ex)) - ls.rho(&(x - ex))) / (2.0 * s),
                    (ls.rho(&(x + ey)) - ls.rho(&(x - ey))) / (2.0 * s),
                )
            }
        }
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.rho(x) < 0.0
    }

    /// Distance from the origin to the boundary along direction `phi`.
    pub fn radial(&self, phi: f64) -> Result<f64> {
        let (s, c) = phi.sin_cos();
        match &self.kind {
            DomainKind::Ball { radius } => Ok(*radius),
            DomainKind::Ellipse { a, b } => Ok(1.0 / ((c / a).powi(2) + (s / b).powi(2)).sqrt()),
            DomainKind::Implicit(ls) => {
                let dir = Point::new(c, s);
                let step = 0.5 * ls.cell();
                let rmax = 2.0 * (ls.xmax - ls.xmin).hypot(ls.ymax - ls.ymin);
                let mut lo = 0.0;
                let mut hi = step;
                while ls.rho(&(dir * hi)) < 0.0 {
                    lo = hi;
                    hi += step;
                    if hi > rmax {
                        return Err(Error::Projection {
                            x: dir.x * hi,
                            y: dir.y * hi,
                        });
                    }
                }
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if ls.rho(&(dir * mid)) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    pub fn boundary_point(&self, phi: f64) -> Result<Point> {
        let r = self.radial(phi)?;
        Ok(Point::new(r * phi.cos(), r * phi.sin()))
    }

    /// Closest boundary point to `x` and the signed distance.
    pub fn nearest_boundary(&self, x: &Point) -> Result<(Point, f64)> {
        let bb = &self.bounding_box;
        if !bb.contains(x, bb.width()) {
            return Err(Error::Domain(format!(
                "point ({}, {}) outside the extended bounding box",
                x.x, x.y
            )));
        }
        if let DomainKind::Ball { radius } = self.kind {
            let n = x.norm();
            let y = if n == 0.0 {
                Point::new(radius, 0.0)
            } else {
                x * (radius / n)
            };
            return Ok((y, n - radius));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, s) in self.samples.iter().enumerate() {
            let d = (s.point - x).norm_squared();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        let dphi = 2.0 * PI / BOUNDARY_SAMPLES as f64;
        let phi0 = self.samples[best].phi;
        let mut failed = false;
        let (phi, d2) = golden_section_min(
            |phi| match self.boundary_point(phi) {
                Ok(p) => (p - x).norm_squared(),
                Err(_) => {
                    failed = true;
                    f64::INFINITY
                }
            },
            phi0 - dphi,
            phi0 + dphi,
            1e-13,
        );
        if failed || !d2.is_finite() {
            return Err(Error::Projection { x: x.x, y: x.y });
        }
        let y = self.boundary_point(phi)?;
        let dist = d2.sqrt();
        let r = self.rho(x);
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        Ok((y, sign * dist))
    }

    pub fn signed_distance(&self, x: &Point) -> Result<f64> {
        self.nearest_boundary(x).map(|(_, d)| d)
    }

    /// Outward unit normal at a boundary point.
    pub fn boundary_normal(&self, y: &Point) -> Result<Point> {
        let d = self.signed_distance(y)?;
        if d.abs() > 1e-6 {
            return Err(Error::NotOnBoundary {
                x: y.x,
                y: y.y,
                distance: d,
            });
        }
        let g = self.grad_rho(y);
        let n = g.norm();
        if n == 0.0 {
            return Err(Error::Domain(format!(
                "zero gradient of the defining function at ({}, {})",
                y.x, y.y
            )));
        }
        Ok(g / n)
    }

    /// Boundary sample points (1024, uniform in angle).
    pub fn boundary_samples(&self) -> impl Iterator<Item = Point> + '_ {
        self.samples.iter().map(|s| s.point)
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    /// Arc-length coordinate of the boundary point in direction of `x` from the origin.
    pub fn arc_coordinate(&self, x: &Point) -> f64 {
        let mut phi = x.y.atan2(x.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let dphi = 2.0 * PI / BOUNDARY_SAMPLES as f64;
        let k = ((phi / dphi).floor() as usize).min(BOUNDARY_SAMPLES - 1);
        let t = phi / dphi - k as f64;
        let a0 = self.samples[k].arc;
        let a1 = if k + 1 < BOUNDARY_SAMPLES {
            self.samples[k + 1].arc
        } else {
            self.perimeter
        };
        a0 + t * (a1 - a0)
    }

    /// Boundary arc distance between the rays through `x` and `y`.
    pub fn arc_distance(&self, x: &Point, y: &Point) -> f64 {
        let d = (self.arc_coordinate(x) - self.arc_coordinate(y)).abs();
        d.min(self.perimeter - d)
    }

    pub fn diameter(&self) -> f64 {
        match self.kind {
            DomainKind::Ball { radius } => 2.0 * radius,
            DomainKind::Ellipse { a, b } => 2.0 * a.max(b),
            _ => {
                let mut d: f64 = 0.0;
                for s in &self.samples {
                    for t in &self.samples {
                        d = d.max((s.point - t.point).norm());
                    }
                }
                d
            }
        }
    }

    /// Smallest offset λ for which some normal offset `y + λν(y)` lands in the closure, capped at
    /// the diameter.
    pub fn lambda0(&self) -> f64 {
        *self.lambda0.get_or_init(|| {
            let cap = self.diameter();
            let ok = |lam: f64| {
                self.min_offset_distance(lam)
                    .map(|(d, _)| d > 0.0)
                    .unwrap_or(false)
            };
            if ok(cap) {
                return cap;
            }
            let mut lo = 0.0;
            let mut hi = cap;
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        })
    }

    fn offset_point(&self, phi: f64, lambda: f64) -> Result<Point> {
        let y = self.boundary_point(phi)?;
        let g = self.grad_rho(&y);
        Ok(y + g * (lambda / g.norm()))
    }

    fn min_offset_distance(&self, lambda: f64) -> Result<(f64, f64)> {
        let mut best = (f64::INFINITY, 0.0);
        for s in &self.samples {
            let z = self.offset_point(s.phi, lambda)?;
            let d = self.signed_distance(&z)?;
            if d < best.0 {
                best = (d, s.phi);
            }
        }
        Ok(best)
    }

    /// δ(λ) = min over boundary points y of dist(y + λν(y), Ω).
    pub fn normal_offset_gap(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::Parameter(format!(
                "offset lambda = {lambda} must be positive"
            )));
        }
        let lambda0 = self.lambda0();
        if lambda >= lambda0 {
            return Err(Error::OffsetTooLarge { lambda, lambda0 });
        }
        let (coarse, phi0) = self.min_offset_distance(lambda)?;
        if coarse <= 0.0 {
            return Err(Error::OffsetTooLarge { lambda, lambda0 });
        }
        let dphi = 2.0 * PI / BOUNDARY_SAMPLES as f64;
        let (_, fine) = golden_section_min(
            |phi| {
                self.offset_point(phi, lambda)
                    .and_then(|z| self.signed_distance(&z))
                    .unwrap_or(f64::INFINITY)
            },
            phi0 - dphi,
            phi0 + dphi,
            1e-12,
        );
        if fine <= 0.0 {
            return Err(Error::OffsetTooLarge { lambda, lambda0 });
        }
        Ok(coarse.min(fine).min(lambda))
    }
}

fn check_star_shaped(ls: &LevelSet) -> Result<()> {
    let rmax = (ls.xmax - ls.xmin).hypot(ls.ymax - ls.ymin);
    let steps = 2000;
    for k in 0..360 {
        let phi = 2.0 * PI * k as f64 / 360.0;
        let dir = Point::new(phi.cos(), phi.sin());
        let mut changes = 0;
        let mut prev = ls.rho(&Point::zeros()) < 0.0;
        for s in 1..=steps {
            let inside = ls.rho(&(dir * (rmax * s as f64 / steps as f64))) < 0.0;
            if inside != prev {
                changes += 1;
            }
            prev = inside;
        }
        if changes != 1 {
            return Err(Error::Domain(format!(
                "implicit domain is not star-shaped about the origin (ray at angle {phi:.3} crosses the boundary {changes} times)"
            )));
        }
    }
    Ok(())
}

/// Uniform lattice with the origin as a node: node `(i, j)` sits at `((i + i0) h, (j + j0) h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
    pub i0: i64,
    pub j0: i64,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn point(&self, k: usize) -> Point {
        let (i, j) = self.ij(k);
        Point::new(
            (i as i64 + self.i0) as f64 * self.h,
            (j as i64 + self.j0) as f64 * self.h,
        )
    }

    pub fn offset(&self, k: usize, di: i64, dj: i64) -> Option<usize> {
        let (i, j) = self.ij(k);
        let ni = i as i64 + di;
        let nj = j as i64 + dj;
        if ni < 0 || nj < 0 || ni >= self.nx as i64 || nj >= self.ny as i64 {
            None
        } else {
            Some(self.index(ni as usize, nj as usize))
        }
    }

    /// Node closest to `x`, if inside the lattice.
    pub fn nearest(&self, x: &Point) -> Option<usize> {
        let i = (x.x / self.h).round() as i64 - self.i0;
        let j = (x.y / self.h).round() as i64 - self.j0;
        if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
            None
        } else {
            Some(self.index(i as usize, j as usize))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeClass {
    Interior,
    BoundaryAdjacent,
    Exterior,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: Point,
    pub distance: f64,
}

/// Lattice clipped to a domain. Interior nodes lie in the closure; boundary-adjacent nodes are the
/// remaining 8-neighbours of interior nodes and carry their projection onto the boundary.
#[derive(Clone, Debug)]
pub struct MaskedGrid {
    pub lattice: Lattice,
    pub class: Vec<NodeClass>,
    pub projection: Vec<Option<Projection>>,
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
}

pub const NEIGHBORS8: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Builds a masked grid with a default margin of `max(4h, diameter/10)` around the domain.
pub fn build_grid(domain: &Domain, h: f64) -> Result<MaskedGrid> {
    build_grid_with_margin(domain, h, (4.0 * h).max(0.1 * domain.diameter()))
}

pub fn build_grid_with_margin(domain: &Domain, h: f64, margin: f64) -> Result<MaskedGrid> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!(
            "grid spacing h = {h} must be positive"
        )));
    }
    let diam = domain.diameter();
    if h >= diam || diam / h < 4.0 - 1e-12 {
        return Err(Error::GridTooCoarse(format!(
            "h = {h} gives {:.2} nodes across diameter {diam}; at least 4 required",
            diam / h
        )));
    }
    let bb = domain.bounding_box;
    let margin = margin.max(2.0 * h);
    let i0 = ((bb.min.x - margin) / h).floor() as i64;
    let j0 = ((bb.min.y - margin) / h).floor() as i64;
    let i1 = ((bb.max.x + margin) / h).ceil() as i64;
    let j1 = ((bb.max.y + margin) / h).ceil() as i64;
    let lattice = Lattice {
        h,
        nx: (i1 - i0 + 1) as usize,
        ny: (j1 - j0 + 1) as usize,
        i0,
        j0,
    };
    let n = lattice.len();
    let mut class = vec![NodeClass::Exterior; n];
    for (k, c) in class.iter_mut().enumerate() {
        if domain.rho(&lattice.point(k)) <= 0.0 {
            *c = NodeClass::Interior;
        }
    }
    let mut projection = vec![None; n];
    for k in 0..n {
        if class[k] != NodeClass::Exterior {
            continue;
        }
        let touches = NEIGHBORS8.iter().any(|&(di, dj)| {
            lattice
                .offset(k, di, dj)
                .map(|m| class[m] == NodeClass::Interior)
                .unwrap_or(false)
        });
        if touches {
            let (y, d) = domain.nearest_boundary(&lattice.point(k))?;
            projection[k] = Some(Projection {
                point: y,
                distance: d.abs(),
            });
        }
    }
    for k in 0..n {
        if projection[k].is_some() {
            class[k] = NodeClass::BoundaryAdjacent;
        }
    }
    let interior: Vec<usize> = (0..n)
        .filter(|&k| class[k] == NodeClass::Interior)
        .collect();
    let boundary: Vec<usize> = (0..n)
        .filter(|&k| class[k] == NodeClass::BoundaryAdjacent)
        .collect();
    Ok(MaskedGrid {
        lattice,
        class,
        projection,
        interior,
        boundary,
    })
}

impl MaskedGrid {
    pub fn h(&self) -> f64 {
        self.lattice.h
    }

    pub fn point(&self, k: usize) -> Point {
        self.lattice.point(k)
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.class[k] != NodeClass::Exterior
    }

    /// Node index of the origin.
    pub fn origin(&self) -> usize {
        self.lattice
            .nearest(&Point::zeros())
            .expect("origin is a lattice node")
    }

    /// Position at which data for node `k` is evaluated: the node for interior nodes, its
    /// projection for boundary-adjacent nodes.
    pub fn data_point(&self, k: usize) -> Point {
        match &self.projection[k] {
            Some(p) => p.point,
            None => self.point(k),
        }
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.class.len()).filter(move |&k| self.is_active(k))
    }

    /// Grid function with `f` evaluated at `data_point` on active nodes, NaN elsewhere.
    pub fn sample(&self, f: impl Fn(&Point) -> f64) -> GridFunction {
        let mut values = vec![f64::NAN; self.lattice.len()];
        for k in self.active() {
            values[k] = f(&self.data_point(k));
        }
        GridFunction {
            lattice: self.lattice,
            values,
        }
    }
}

/// Values on a lattice; NaN marks undefined nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn undefined(lattice: Lattice) -> Self {
        GridFunction {
            lattice,
            values: vec![f64::NAN; lattice.len()],
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn at(&self, k: usize, di: i64, dj: i64) -> f64 {
        self.lattice
            .offset(k, di, dj)
            .map(|m| self.values[m])
            .unwrap_or(f64::NAN)
    }

    /// Bilinear interpolation over the defined corners of the enclosing cell, renormalized; NaN
    /// if no corner is defined.
    pub fn sample(&self, x: &Point) -> f64 {
        let l = &self.lattice;
        let fx = x.x / l.h - l.i0 as f64;
        let fy = x.y / l.h - l.j0 as f64;
        if fx < 0.0 || fy < 0.0 || fx > (l.nx - 1) as f64 || fy > (l.ny - 1) as f64 {
            return f64::NAN;
        }
        let i = (fx.floor() as usize).min(l.nx - 2);
        let j = (fy.floor() as usize).min(l.ny - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let mut num = 0.0;
        let mut den = 0.0;
        for (di, dj, w) in [
            (0, 0, (1.0 - tx) * (1.0 - ty)),
            (1, 0, tx * (1.0 - ty)),
            (0, 1, (1.0 - tx) * ty),
            (1, 1, tx * ty),
        ] {
            let v = self.values[l.index(i + di, j + dj)];
            if v.is_finite() && w > 0.0 {
                num += w * v;
                den += w;
            }
        }
        if den > 1e-12 {
            num / den
        } else {
            let v = self.values[l.index(
                (fx.round() as usize).min(l.nx - 1),
                (fy.round() as usize).min(l.ny - 1),
            )];
            if v.is_finite() {
                v
            } else {
                f64::NAN
            }
        }
    }

    /// Maximum of |f - g| over nodes where both are finite and `keep` holds.
    pub fn max_abs_diff(&self, other: &GridFunction, keep: impl Fn(usize) -> bool) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..self.values.len() {
            let (a, b) = (self.values[k], other.values[k]);
            if a.is_finite() && b.is_finite() && keep(k) {
                m = m.max((a - b).abs());
            }
        }
        m
    }

    pub fn finite_max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn finite_min(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_distances() {
        let d = Domain::ball(1.0).unwrap();
        assert_eq!(d.signed_distance(&Point::new(0.5, 0.0)).unwrap(), -0.5);
        assert_eq!(d.signed_distance(&Point::new(2.0, 0.0)).unwrap(), 1.0);
    }

    #[test]
    fn ellipse_center_distance() {
        let d = Domain::ellipse(1.0, 1.0 / 2f64.sqrt()).unwrap();
        let sd = d.signed_distance(&Point::zeros()).unwrap();
        assert!((sd + 1.0 / 2f64.sqrt()).abs() < 1e-8, "{sd}");
    }

    #[test]
    fn normals() {
        let d = Domain::ball(1.0).unwrap();
        assert!(
            (d.boundary_normal(&Point::new(1.0, 0.0)).unwrap() - Point::new(1.0, 0.0)).norm()
                < 1e-12
        );
        assert!(
            (d.boundary_normal(&Point::new(0.0, -1.0)).unwrap() - Point::new(0.0, -1.0)).norm()
                < 1e-12
        );
        let e = Domain::ellipse(1.0, 1.0 / 2f64.sqrt()).unwrap();
        let n = e
            .boundary_normal(&Point::new(0.0, 1.0 / 2f64.sqrt()))
            .unwrap();
        assert!((n - Point::new(0.0, 1.0)).norm() < 1e-12);
        assert!(matches!(
            d.boundary_normal(&Point::new(0.5, 0.0)),
            Err(Error::NotOnBoundary { .. })
        ));
    }

    #[test]
    fn coarse_ball_grid() {
        let d = Domain::ball(1.0).unwrap();
        let g = build_grid(&d, 0.5).unwrap();
        assert_eq!(g.interior.len(), 13);
        assert!(build_grid(&d, 2.0).is_err());
        assert!(build_grid(&d, 0.0).is_err());
    }

    #[test]
    fn level_set_roundtrip() {
        let bb = BBox {
            min: Point::new(-2.0, -2.0),
            max: Point::new(2.0, 2.0),
        };
        let ls = LevelSet::from_fn(11, 9, bb, |p| p.norm() - 1.0);
        let back = LevelSet::from_bytes(&ls.to_bytes()).unwrap();
        assert_eq!(ls, back);
        assert!(LevelSet::from_bytes(&ls.to_bytes()[..40]).is_err());
    }
}
