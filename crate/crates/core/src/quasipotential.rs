//! Quasi-potentials by label-setting on the geometric action, and a path-optimization oracle.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Domain, GridFunction, MaskedGrid, NodeClass, Point, NEIGHBORS8};
use crate::model::{hamiltonian, Coefficients, Problem};
use crate::numerics::golden_section_min;
use crate::residual::{one_sided_gradients, ResidualReport};

/// Optimal-time action of the straight segment `x → y` with running cost `γ`, using midpoint
/// coefficients: `½√(A(C+4γ)) − B/2`.
pub fn segment_action(c: &Coefficients, x: &Point, y: &Point, gamma: f64) -> Result<f64> {
    let m = 0.5 * (x + y);
    let value = segment_cost(c, x, y, gamma);
    if gamma == 0.0 && c.b(&m).norm() < 1e-14 && x != y {
        return Err(Error::DegenerateSegment { limit: value });
    }
    Ok(value)
}

/// Unchecked segment action; the `b(m) = 0`, `γ = 0` case returns its `T → ∞` limit.
pub fn segment_cost(c: &Coefficients, x: &Point, y: &Point, gamma: f64) -> f64 {
    let m = 0.5 * (x + y);
    let s = y - x;
    let a = c.a(&m);
    let b = c.b(&m);
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let ainv_s = Point::new(
        a[(1, 1)] * s.x - a[(0, 1)] * s.y,
        a[(0, 0)] * s.y - a[(1, 0)] * s.x,
    ) / det;
    let ainv_b = Point::new(
        a[(1, 1)] * b.x - a[(0, 1)] * b.y,
        a[(0, 0)] * b.y - a[(1, 0)] * b.x,
    ) / det;
    let aa = ainv_s.dot(&s);
    let bb = ainv_s.dot(&b);
    let cc = ainv_b.dot(&b);
    (0.5 * (aa * (cc + 4.0 * gamma)).sqrt() - 0.5 * bb).max(0.0)
}

/// Optimal traversal time of the segment, `√(A/(C+4γ))`.
pub fn segment_time(c: &Coefficients, x: &Point, y: &Point, gamma: f64) -> f64 {
    let m = 0.5 * (x + y);
    let s = y - x;
    let a = c.a(&m);
    let ainv = a.try_inverse().unwrap_or_else(nalgebra::Matrix2::zeros);
    let b = c.b(&m);
    ((ainv * s).dot(&s) / ((ainv * b).dot(&b) + 4.0 * gamma)).sqrt()
}

/// Primitive lattice directions with `max(|di|,|dj|) <= order`, sorted by angle.
pub fn stencil(order: usize) -> Vec<(i64, i64)> {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let k = order as i64;
    let mut dirs = Vec::new();
    for di in -k..=k {
        for dj in -k..=k {
            if (di, dj) != (0, 0) && gcd(di.abs(), dj.abs()) == 1 {
                dirs.push((di, dj));
            }
        }
    }
    dirs.sort_by(|a, b| {
        let ta = (a.1 as f64).atan2(a.0 as f64);
        let tb = (b.1 as f64).atan2(b.0 as f64);
        ta.total_cmp(&tb)
    });
    dirs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum UpdateMode {
    /// Straight edges between stencil nodes only (plain Dijkstra).
    Edges,
    /// Edges plus updates from segments between angularly adjacent accepted stencil nodes.
    Simplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Source {
    Origin,
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundaryValue {
    pub node: usize,
    pub point: [f64; 2],
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cluster {
    pub representative: [f64; 2],
    pub centroid: [f64; 2],
    pub size: usize,
    pub min_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArgminSet {
    pub m0: f64,
    pub tol: f64,
    pub points: Vec<[f64; 2]>,
    pub clusters: Vec<Cluster>,
    /// The minimizers form a single cluster wrapping the whole boundary.
    pub uniform: bool,
}

/// A point-source (`V`) or boundary-source (`U`, `u_γ`) field.
#[derive(Clone, Debug)]
pub struct PotentialField {
    pub grid: MaskedGrid,
    pub values: GridFunction,
    pub source: Source,
    pub gamma: f64,
    pub stencil_order: usize,
    pub mode: UpdateMode,
    pub boundary_values: Vec<BoundaryValue>,
    pub m0: Option<f64>,
    pub argmin: Option<ArgminSet>,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Solver<'a> {
    c: &'a Coefficients,
    grid: &'a MaskedGrid,
    dirs: Vec<(i64, i64)>,
    gamma: f64,
    reversed: bool,
    mode: UpdateMode,
}

impl Solver<'_> {
    /// Cost of moving from `from` to `to` along the accumulation direction.
    fn cost(&self, from: &Point, to: &Point) -> f64 {
        let (x, y) = if self.reversed {
            (to, from)
        } else {
            (from, to)
        };
        if self.gamma == 0.0 && (0.5 * (x + y)).norm() < 0.5 * self.grid.h() * (1.0 - 1e-9) {
            return f64::INFINITY;
        }
        segment_cost(self.c, x, y, self.gamma)
    }

    /// Best value at `target` reached from the segment `[u, w]` with linearly interpolated values.
    fn simplex(&self, pu: &Point, vu: f64, pw: &Point, vw: f64, target: &Point) -> f64 {
        let f = |lam: f64| {
            let p = pu + (pw - pu) * lam;
            (1.0 - lam) * vu + lam * vw + self.cost(&p, target)
        };
        let (_, best) = golden_section_min(f, 0.0, 1.0, 1e-7);
        best.min(f(0.0)).min(f(1.0))
    }

    fn run(&self, values: &mut [f64], heap: &mut BinaryHeap<Entry>) -> Vec<bool> {
        let lat = self.grid.lattice;
        let nd = self.dirs.len();
        let mut accepted = vec![false; values.len()];
        while let Some(Entry(val, u)) = heap.pop() {
            if accepted[u] || val > values[u] {
                continue;
            }
            accepted[u] = true;
            let pu = lat.point(u);
            for q in 0..nd {
                let (di, dj) = self.dirs[q];
                let Some(v) = lat.offset(u, di, dj) else {
                    continue;
                };
                if self.grid.class[v] != NodeClass::Interior || accepted[v] {
                    continue;
                }
                let pv = lat.point(v);
                let mut best = values[u] + self.cost(&pu, &pv);
                if self.mode == UpdateMode::Simplex {
                    for q2 in [(q + 1) % nd, (q + nd - 1) % nd] {
                        let (ei, ej) = self.dirs[q2];
                        let Some(w) = lat.offset(v, -ei, -ej) else {
                            continue;
                        };
                        if w == u || !accepted[w] {
                            continue;
                        }
                        best =
                            best.min(self.simplex(&pu, values[u], &lat.point(w), values[w], &pv));
                    }
                }
                if best < values[v] {
                    values[v] = best;
                    heap.push(Entry(best, v));
                }
            }
        }
        accepted
    }

    /// Minimum over interior stencil neighbours of `node` of value plus the cost to `target`.
    fn reach(&self, values: &[f64], node: usize, target: &Point) -> f64 {
        let lat = self.grid.lattice;
        let nd = self.dirs.len();
        let mut best = f64::INFINITY;
        for q in 0..nd {
            let (di, dj) = self.dirs[q];
            let Some(u) = lat.offset(node, -di, -dj) else {
                continue;
            };
            if self.grid.class[u] != NodeClass::Interior || !values[u].is_finite() {
                continue;
            }
            let pu = lat.point(u);
            best = best.min(values[u] + self.cost(&pu, target));
            if self.mode == UpdateMode::Simplex {
                let (ei, ej) = self.dirs[(q + 1) % nd];
                if let Some(w) = lat.offset(node, -ei, -ej) {
                    if self.grid.class[w] == NodeClass::Interior && values[w].is_finite() {
                        best = best.min(self.simplex(
                            &pu,
                            values[u],
                            &lat.point(w),
                            values[w],
                            target,
                        ));
                    }
                }
            }
        }
        best
    }
}

impl Solver<'_> {
    /// Cheapest entry from the boundary arc near `target`, by golden section over the angle.
    fn from_boundary(&self, domain: &Domain, target: &Point) -> Result<f64> {
        let h = self.grid.h();
        let (yp, _) = domain.nearest_boundary(target)?;
        let phi0 = yp.y.atan2(yp.x);
        let span = 3.0 * h / yp.norm().max(h);
        let f = |phi: f64| {
            domain
                .boundary_point(phi)
                .map(|y| self.cost(&y, target))
                .unwrap_or(f64::INFINITY)
        };
        let (_, best) = golden_section_min(f, phi0 - span, phi0 + span, 1e-10);
        Ok(best.min(self.cost(&yp, target)))
    }
}

fn near_boundary(grid: &MaskedGrid, k: usize) -> bool {
    NEIGHBORS8.iter().any(|&(di, dj)| {
        grid.lattice
            .offset(k, di, dj)
            .map(|m| grid.class[m] == NodeClass::BoundaryAdjacent)
            .unwrap_or(false)
    })
}

fn check_order(stencil_order: usize) -> Result<()> {
    if !(1..=3).contains(&stencil_order) {
        return Err(Error::Config(format!(
            "stencil order {stencil_order} must be 1, 2 or 3"
        )));
    }
    Ok(())
}

/// `V = V_Ω(0, ·)` on the grid.
pub fn solve_from_point(
    p: &Problem,
    grid: &MaskedGrid,
    stencil_order: usize,
) -> Result<PotentialField> {
    solve_from_point_with(p, grid, stencil_order, UpdateMode::Simplex)
}

pub fn solve_from_point_with(
    p: &Problem,
    grid: &MaskedGrid,
    stencil_order: usize,
    mode: UpdateMode,
) -> Result<PotentialField> {
    check_order(stencil_order)?;
    let src = grid.origin();
    if grid.class[src] != NodeClass::Interior {
        return Err(Error::Config("the origin node is not interior".into()));
    }
    let solver = Solver {
        c: &p.coefficients,
        grid,
        dirs: stencil(stencil_order),
        gamma: 0.0,
        reversed: false,
        mode,
    };
    let n = grid.lattice.len();
    let mut values = vec![f64::INFINITY; n];
    values[src] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, src));
    solver.run(&mut values, &mut heap);
    let unreachable = grid
        .interior
        .iter()
        .filter(|&&k| !values[k].is_finite())
        .count();
    if unreachable > 0 {
        return Err(Error::Unreachable(unreachable));
    }
    let mut boundary_values = Vec::with_capacity(grid.boundary.len());
    let mut node_values = vec![f64::NAN; grid.boundary.len()];
    for (i, &b) in grid.boundary.iter().enumerate() {
        let proj = grid.projection[b].unwrap().point;
        let value = solver.reach(&values, b, &proj);
        boundary_values.push(BoundaryValue {
            node: b,
            point: [proj.x, proj.y],
            value,
        });
        node_values[i] = solver.reach(&values, b, &grid.point(b));
    }
    for (i, &b) in grid.boundary.iter().enumerate() {
        values[b] = node_values[i];
    }
    for (k, v) in values.iter_mut().enumerate() {
        if !grid.is_active(k) {
            *v = f64::NAN;
        }
    }
    let mut field = PotentialField {
        grid: grid.clone(),
        values: GridFunction {
            lattice: grid.lattice,
            values,
        },
        source: Source::Origin,
        gamma: 0.0,
        stencil_order,
        mode,
        boundary_values,
        m0: None,
        argmin: None,
    };
    let tol = default_argmin_tol(&field);
    let set = boundary_minimum(&field, tol)?;
    field.m0 = Some(set.m0);
    field.argmin = Some(set);
    Ok(field)
}

/// `U = min_y V_Ω(·, y)` for `γ = 0`, or `u_γ` solving `H(x, −Du) = γ`, `u = 0` on the boundary.
pub fn solve_to_boundary(
    p: &Problem,
    grid: &MaskedGrid,
    gamma: f64,
    stencil_order: usize,
) -> Result<PotentialField> {
    solve_to_boundary_with(p, grid, gamma, stencil_order, UpdateMode::Simplex)
}

pub fn solve_to_boundary_with(
    p: &Problem,
    grid: &MaskedGrid,
    gamma: f64,
    stencil_order: usize,
    mode: UpdateMode,
) -> Result<PotentialField> {
    check_order(stencil_order)?;
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!(
            "gamma = {gamma} must be nonnegative"
        )));
    }
    let solver = Solver {
        c: &p.coefficients,
        grid,
        dirs: stencil(stencil_order),
        gamma,
        reversed: true,
        mode,
    };
    let lat = grid.lattice;
    let n = lat.len();
    let mut values = vec![f64::INFINITY; n];
    for &b in &grid.boundary {
        let proj = grid.projection[b].unwrap().point;
        for &(di, dj) in &solver.dirs {
            let Some(u) = lat.offset(b, -di, -dj) else {
                continue;
            };
            if grid.class[u] != NodeClass::Interior {
                continue;
            }
            let v = solver.cost(&proj, &lat.point(u));
            if v < values[u] {
                values[u] = v;
            }
        }
    }
    for &u in &grid.interior {
        if !near_boundary(grid, u) {
            continue;
        }
        values[u] = values[u].min(solver.from_boundary(&p.domain, &lat.point(u))?);
    }
    let mut heap: BinaryHeap<Entry> = (0..n)
        .filter(|&k| values[k].is_finite())
        .map(|k| Entry(values[k], k))
        .collect();
    if heap.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    solver.run(&mut values, &mut heap);
    let unreachable = grid
        .interior
        .iter()
        .filter(|&&k| !values[k].is_finite())
        .count();
    if unreachable > 0 {
        return Err(Error::Unreachable(unreachable));
    }
    let mut boundary_values = Vec::with_capacity(grid.boundary.len());
    for &b in &grid.boundary {
        values[b] = 0.0;
        let proj = grid.projection[b].unwrap().point;
        boundary_values.push(BoundaryValue {
            node: b,
            point: [proj.x, proj.y],
            value: 0.0,
        });
    }
    for (k, v) in values.iter_mut().enumerate() {
        if !grid.is_active(k) {
            *v = f64::NAN;
        }
    }
    Ok(PotentialField {
        grid: grid.clone(),
        values: GridFunction {
            lattice: lat,
            values,
        },
        source: Source::Boundary,
        gamma,
        stencil_order,
        mode,
        boundary_values,
        m0: None,
        argmin: None,
    })
}

/// `u(map(x))` at every active node of a boundary-source field, by one local update from the stencil
/// neighbours of `x` (and the nearby boundary arc) instead of interpolation, so that concave kinks of `u`
/// are not flattened. `map(x)` must stay within a cell of `x`. Points mapped outside the domain get the
/// odd reflection `−u` of their mirror image across the boundary.
pub fn pullback(
    p: &Problem,
    u: &PotentialField,
    map: impl Fn(&Point) -> Point,
) -> Result<GridFunction> {
    if u.source != Source::Boundary {
        return Err(Error::Precondition(
            "pullback needs a boundary-source field".into(),
        ));
    }
    let grid = &u.grid;
    let solver = Solver {
        c: &p.coefficients,
        grid,
        dirs: stencil(u.stencil_order),
        gamma: u.gamma,
        reversed: true,
        mode: u.mode,
    };
    let values = &u.values.values;
    let local = |k: usize, y: &Point| -> Result<f64> {
        let mut best = solver.reach(values, k, y);
        if grid.class[k] == NodeClass::Interior {
            best = best.min(values[k] + solver.cost(&grid.point(k), y));
        }
        if grid.class[k] != NodeClass::Interior || near_boundary(grid, k) {
            best = best.min(solver.from_boundary(&p.domain, y)?);
        }
        Ok(best)
    };
    let mut out = GridFunction::undefined(grid.lattice);
    for k in grid.active() {
        let y = map(&grid.point(k));
        out.values[k] = if p.domain.contains(&y) {
            local(k, &y)?
        } else {
            let (z, _) = p.domain.nearest_boundary(&y)?;
            let q = z * 2.0 - y;
            match grid.lattice.nearest(&q).filter(|&m| grid.is_active(m)) {
                Some(m) => -local(m, &q)?,
                None => 0.0,
            }
        };
    }
    Ok(out)
}

impl PotentialField {
    pub fn value_at(&self, x: &Point) -> f64 {
        self.values.sample(x)
    }

    /// Writes `i, j, x1, x2, value, class` rows.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["i", "j", "x1", "x2", "value", "class"])
            .map_err(io)?;
        for k in self.grid.active() {
            let (i, j) = self.grid.lattice.ij(k);
            let x = self.grid.point(k);
            let class = match self.grid.class[k] {
                NodeClass::Interior => "interior",
                NodeClass::BoundaryAdjacent => "boundary",
                NodeClass::Exterior => "exterior",
            };
            w.write_record(&[
                i.to_string(),
                j.to_string(),
                x.x.to_string(),
                x.y.to_string(),
                self.values.get(k).to_string(),
                class.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `2h` times the largest one-sided difference quotient among nodes next to the boundary.
pub fn default_argmin_tol(f: &PotentialField) -> f64 {
    let h = f.grid.h();
    let mut lip: f64 = 0.0;
    for &b in &f.grid.boundary {
        for (di, dj) in crate::geometry::NEIGHBORS8 {
            if let Some(u) = f.grid.lattice.offset(b, di, dj) {
                if f.grid.class[u] == NodeClass::Interior {
                    let d = (f.values.get(u) - f.values.get(b)).abs()
                        / (h * ((di * di + dj * dj) as f64).sqrt());
                    if d.is_finite() {
                        lip = lip.max(d);
                    }
                }
            }
        }
    }
    2.0 * h * lip
}

/// `m₀` and the boundary points within `tol` of it, clustered by single linkage at distance `3h`.
pub fn boundary_minimum(f: &PotentialField, tol: f64) -> Result<ArgminSet> {
    if f.boundary_values.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    let m0 = f
        .boundary_values
        .iter()
        .map(|b| b.value)
        .fold(f64::INFINITY, f64::min);
    let sel: Vec<&BoundaryValue> = f
        .boundary_values
        .iter()
        .filter(|b| b.value <= m0 + tol)
        .collect();
    let link = 3.0 * f.grid.h();
    let n = sel.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut i = i;
        while p[i] != r {
            let next = p[i];
            p[i] = r;
            i = next;
        }
        r
    }
    let pt = |b: &BoundaryValue| Point::new(b.point[0], b.point[1]);
    for i in 0..n {
        for j in i + 1..n {
            if (pt(sel[i]) - pt(sel[j])).norm() <= link {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut order: Vec<usize> = roots.clone();
    order.sort_unstable();
    order.dedup();
    let mut clusters = Vec::new();
    for r in &order {
        let members: Vec<&BoundaryValue> =
            (0..n).filter(|&i| roots[i] == *r).map(|i| sel[i]).collect();
        let mut centroid = Point::zeros();
        let mut rep = members[0];
        for m in &members {
            centroid += pt(m);
            if m.value < rep.value {
                rep = m;
            }
        }
        centroid /= members.len() as f64;
        clusters.push(Cluster {
            representative: rep.point,
            centroid: [centroid.x, centroid.y],
            size: members.len(),
            min_value: rep.value,
        });
    }
    let uniform = clusters.len() == 1 && {
        let mut ang: Vec<f64> = sel.iter().map(|b| b.point[1].atan2(b.point[0])).collect();
        ang.sort_by(f64::total_cmp);
        let radius = sel.iter().map(|b| pt(b).norm()).fold(0.0, f64::max);
        let mut gap = ang[0] + 2.0 * std::f64::consts::PI - ang[ang.len() - 1];
        for w in ang.windows(2) {
            gap = gap.max(w[1] - w[0]);
        }
        gap * radius <= link
    };
    roots.clear();
    Ok(ArgminSet {
        m0,
        tol,
        points: sel.iter().map(|b| b.point).collect(),
        clusters,
        uniform,
    })
}

/// Minimizing polyline for `V_Ω(x, y)` with per-segment optimal times.
#[derive(Clone, Debug, Serialize)]
pub struct ActionPath {
    pub points: Vec<[f64; 2]>,
    pub total_time: f64,
    pub action: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn path_action(c: &Coefficients, pts: &[Point]) -> f64 {
    pts.windows(2)
        .map(|w| segment_cost(c, &w[0], &w[1], 0.0))
        .sum()
}

fn project(domain: &Domain, x: Point) -> Point {
    if domain.rho(&x) > 0.0 {
        domain.nearest_boundary(&x).map(|(y, _)| y).unwrap_or(x)
    } else {
        x
    }
}

fn reparametrize(pts: &[Point]) -> Vec<Point> {
    let n = pts.len();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
    }
    let total = cum[n - 1];
    if total == 0.0 {
        return pts.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 1 < n - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 {
            ((s - cum[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(pts[seg] + (pts[seg + 1] - pts[seg]) * t);
    }
    out[0] = pts[0];
    out[n - 1] = pts[n - 1];
    out
}

/// Direct minimization of the geometric action over interior knots, started from the chord.
pub fn minimize_path_action(
    c: &Coefficients,
    x: &Point,
    y: &Point,
    n_knots: usize,
    domain: &Domain,
) -> Result<ActionPath> {
    if x == y {
        return Err(Error::Parameter("path endpoints must differ".into()));
    }
    let n = n_knots.max(3);
    let mut pts: Vec<Point> = (0..n)
        .map(|k| x + (y - x) * (k as f64 / (n - 1) as f64))
        .collect();
    let m = n - 2;
    let dim = 2 * m;
    let grad = |pts: &[Point]| -> Vec<f64> {
        let mut g = vec![0.0; dim];
        for i in 1..=m {
            for d in 0..2 {
                let base = pts[i][d];
                let step = 1e-7 * (1.0 + base.abs());
                let local = |v: f64| {
                    let mut p = pts[i];
                    p[d] = v;
                    segment_cost(c, &pts[i - 1], &p, 0.0) + segment_cost(c, &p, &pts[i + 1], 0.0)
                };
                g[2 * (i - 1) + d] = (local(base + step) - local(base - step)) / (2.0 * step);
            }
        }
        g
    };
    let apply = |pts: &[Point], dir: &[f64], t: f64| -> Vec<Point> {
        let mut out = pts.to_vec();
        for i in 1..=m {
            let p = Point::new(
                pts[i].x + t * dir[2 * (i - 1)],
                pts[i].y + t * dir[2 * (i - 1) + 1],
            );
            out[i] = project(domain, p);
        }
        out
    };
    let mut f = path_action(c, &pts);
    let mut g = grad(&pts);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let max_iter = 4000;
    let mut converged = false;
    let mut stall = 0;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt().max(1e-300);
            let scale = 0.1 * (y - x).norm() / (n as f64 * gn);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += sj * (alpha[i] - beta);
            }
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        let dir = if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            slope = -dot(&g, &g);
            g.iter().map(|v| -v * 1e-2).collect()
        } else {
            dir
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = apply(&pts, &dir, t);
            let fc = path_action(c, &cand);
            if fc <= f + 1e-4 * t * slope.min(0.0) {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            if s_hist.is_empty() {
                converged = true;
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let g_new = grad(&cand);
        let s: Vec<f64> = (1..=m)
            .flat_map(|i| [cand[i].x - pts[i].x, cand[i].y - pts[i].y])
            .collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-300 {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > 10 {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let decrease = f - fc;
        pts = cand;
        f = fc;
        g = g_new;
        if decrease <= 1e-14 * (1.0 + f.abs()) {
            stall += 1;
            if stall >= 20 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
        if iter % 200 == 0 {
            let rp = reparametrize(&pts);
            let fr = path_action(c, &rp);
            if fr <= f + 1e-9 {
                pts = rp;
                f = fr;
                g = grad(&pts);
                s_hist.clear();
                y_hist.clear();
            }
        }
    }
    let total_time = pts
        .windows(2)
        .map(|w| segment_time(c, &w[0], &w[1], 0.0))
        .sum();
    Ok(ActionPath {
        points: pts.iter().map(|p| [p.x, p.y]).collect(),
        total_time,
        action: f,
        converged,
        iterations: iter,
    })
}

/// One-sided test of `H(x, D f) <= tol` (point source) or `H(x, −D f) <= tol` (boundary source)
/// over interior nodes outside a `3h` ball around the source.
pub fn check_subsolution(f: &PotentialField, c: &Coefficients, tol: f64) -> ResidualReport {
    let h = f.grid.h();
    let sign = match f.source {
        Source::Origin => 1.0,
        Source::Boundary => -1.0,
    };
    let mut samples = Vec::new();
    for &k in &f.grid.interior {
        let x = f.grid.point(k);
        if f.source == Source::Origin && x.norm() < 3.0 * h {
            continue;
        }
        if let Some(grads) = one_sided_gradients(&f.values, k) {
            let r = grads
                .iter()
                .map(|p| hamiltonian(c, &x, &(p * sign)) - f.gamma)
                .fold(f64::INFINITY, f64::min);
            samples.push((r, x));
        }
    }
    ResidualReport::from_samples(&samples, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_sizes() {
        assert_eq!(stencil(1).len(), 8);
        assert_eq!(stencil(2).len(), 16);
        assert_eq!(stencil(3).len(), 32);
    }

    #[test]
    fn degenerate_segment_reports_limit() {
        let c = Coefficients::isotropic_quadratic();
        let r = segment_action(&c, &Point::new(-0.1, 0.0), &Point::new(0.1, 0.0), 0.0);
        assert!(matches!(r, Err(Error::DegenerateSegment { limit }) if limit == 0.0));
    }

    #[test]
    fn entry_order_is_min_heap_with_index_ties() {
        let mut h = BinaryHeap::new();
        h.push(Entry(1.0, 5));
        h.push(Entry(0.5, 9));
        h.push(Entry(1.0, 2));
        assert_eq!(h.pop().unwrap().1, 9);
        assert_eq!(h.pop().unwrap().1, 2);
        assert_eq!(h.pop().unwrap().1, 5);
    }
}
