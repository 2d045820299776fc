//! Monotone implicit solvers for `u_t = ε tr(a D²u) + b·Du (+ f)` and the stationary problem.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{GridFunction, Lattice, MaskedGrid, Point};
use crate::model::{Coefficients, Problem, SemilinearTerm};
use crate::numerics::bernoulli;
use crate::residual::central_gradient;

const NONE: usize = usize::MAX;

/// `L_ε` on a masked grid, one row per interior node, in the form `Σ_j c_j (u_j − u_i)` with
/// `c_j >= 0`. Columns may be boundary-adjacent nodes, whose values are Dirichlet data.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub lattice: Lattice,
    pub eps: f64,
    pub rows: Vec<usize>,
    pub row_of: Vec<usize>,
    pub ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub coef: Vec<f64>,
}

/// Off-diagonal coefficients `(to x+he, to x−he)` for diffusion `d` and drift `v` along one axis,
/// exponentially fitted; pure upwinding when `d` vanishes.
fn fitted_pair(d: f64, v: f64, h: f64) -> (f64, f64) {
    if d <= 1e-300 {
        return (v.max(0.0) / h, (-v).max(0.0) / h);
    }
    let pe = v * h / d;
    let s = d / (h * h);
    (s * bernoulli(-pe), s * bernoulli(pe))
}

pub fn assemble_operator(p: &Problem, grid: &MaskedGrid, eps: f64) -> Result<DiscreteOperator> {
    assemble_with_drift(&p.coefficients, grid, eps, None)
}

/// Assembly with an optional extra drift per interior node (indexed like `grid.interior`).
pub fn assemble_with_drift(
    c: &Coefficients,
    grid: &MaskedGrid,
    eps: f64,
    extra: Option<&[Point]>,
) -> Result<DiscreteOperator> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Parameter(format!("ε = {eps} must be nonnegative")));
    }
    let lat = grid.lattice;
    let h = lat.h;
    let mut worst: Option<(f64, Point, f64, f64)> = None;
    for k in grid.active() {
        let x = grid.point(k);
        let a = c.a(&x);
        let min_diag = a[(0, 0)].min(a[(1, 1)]);
        let excess = a[(0, 1)].abs() - min_diag;
        if excess > 0.0 && worst.map(|w| excess > w.0).unwrap_or(true) {
            worst = Some((excess, x, a[(0, 1)], min_diag));
        }
    }
    if let Some((_, x, a12, min_diag)) = worst {
        return Err(Error::Anisotropy {
            x: x.x,
            y: x.y,
            a12,
            min_diag,
        });
    }
    let mut row_of = vec![NONE; lat.len()];
    for (r, &k) in grid.interior.iter().enumerate() {
        row_of[k] = r;
    }
    let mut ptr = Vec::with_capacity(grid.interior.len() + 1);
    let mut cols = Vec::with_capacity(grid.interior.len() * 6);
    let mut coef = Vec::with_capacity(grid.interior.len() * 6);
    ptr.push(0);
    for (r, &k) in grid.interior.iter().enumerate() {
        let x = grid.point(k);
        let a = c.a(&x);
        let mut b = c.b(&x);
        if let Some(e) = extra {
            b += e[r];
        }
        let a12 = a[(0, 1)];
        let dx = eps * (a[(0, 0)] - a12.abs());
        let dy = eps * (a[(1, 1)] - a12.abs());
        let (ex, wx) = fitted_pair(dx, b.x, h);
        let (ny, sy) = fitted_pair(dy, b.y, h);
        let diag = eps * a12.abs() / (h * h);
        let mut push = |di: i64, dj: i64, w: f64| {
            if w > 0.0 {
                let m = lat
                    .offset(k, di, dj)
                    .expect("interior nodes have all neighbours");
                cols.push(m);
                coef.push(w);
            }
        };
        push(1, 0, ex);
        push(-1, 0, wx);
        push(0, 1, ny);
        push(0, -1, sy);
        if a12 > 0.0 {
            push(1, 1, diag);
            push(-1, -1, diag);
        } else if a12 < 0.0 {
            push(1, -1, diag);
            push(-1, 1, diag);
        }
        ptr.push(cols.len());
    }
    Ok(DiscreteOperator {
        lattice: lat,
        eps,
        rows: grid.interior.clone(),
        row_of,
        ptr,
        cols,
        coef,
    })
}

impl DiscreteOperator {
    /// `(L u)` at each interior row; `u` is indexed by lattice node.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, &k)| self.apply_row(r, k, u))
            .collect()
    }

    pub fn apply_row(&self, r: usize, k: usize, u: &[f64]) -> f64 {
        let ui = u[k];
        let mut s = 0.0;
        for e in self.ptr[r]..self.ptr[r + 1] {
            s += self.coef[e] * (u[self.cols[e]] - ui);
        }
        s
    }

    /// Sum of the off-diagonal coefficients of row `r`.
    pub fn off_diagonal_sum(&self, r: usize) -> f64 {
        self.coef[self.ptr[r]..self.ptr[r + 1]].iter().sum()
    }

    /// Sum of interior-to-interior entries (off-diagonals plus diagonal) of row `r`.
    pub fn interior_row_sum(&self, r: usize) -> f64 {
        let mut s = 0.0;
        for e in self.ptr[r]..self.ptr[r + 1] {
            if self.row_of[self.cols[e]] == NONE {
                s -= self.coef[e];
            }
        }
        s
    }

    fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for r in 0..self.rows.len() {
            for e in self.ptr[r]..self.ptr[r + 1] {
                let q = self.row_of[self.cols[e]];
                if q != NONE {
                    bw = bw.max(q.abs_diff(r));
                }
            }
        }
        bw
    }

    /// LU factors of `I − Δt L_II`, or of `−L_II` when `dt` is `None`.
    fn factor(&self, dt: Option<f64>) -> BandLu {
        let n = self.rows.len();
        let bw = self.bandwidth();
        let mut lu = BandLu::zeros(n, bw);
        for r in 0..n {
            let scale = dt.unwrap_or(1.0);
            let base = if dt.is_some() { 1.0 } else { 0.0 };
            lu.add(r, r, base + scale * self.off_diagonal_sum(r));
            for e in self.ptr[r]..self.ptr[r + 1] {
                let q = self.row_of[self.cols[e]];
                if q != NONE {
                    lu.add(r, q, -scale * self.coef[e]);
                }
            }
        }
        lu.factorize();
        lu
    }

    /// `Σ_{boundary j} c_j u_j` per row, the Dirichlet contribution to the right-hand side.
    fn boundary_load(&self, u: &[f64]) -> Vec<f64> {
        (0..self.rows.len())
            .map(|r| {
                let mut s = 0.0;
                for e in self.ptr[r]..self.ptr[r + 1] {
                    let m = self.cols[e];
                    if self.row_of[m] == NONE {
                        s += self.coef[e] * u[m];
                    }
                }
                s
            })
            .collect()
    }
}

/// Banded LU without pivoting; exact for M-matrices, whose factors keep the sign pattern.
struct BandLu {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandLu {
    fn zeros(n: usize, bw: usize) -> Self {
        BandLu {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    fn factorize(&mut self) {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.data[k * w + bw];
            let hi = (k + bw + 1).min(n);
            let (head, tail) = self.data.split_at_mut((k + 1) * w);
            let prow = &head[k * w + bw + 1..k * w + bw + 1 + (hi - k - 1)];
            for i in k + 1..hi {
                let off = (i - k - 1) * w;
                let lik = off + (k + bw - i);
                let l = tail[lik];
                if l == 0.0 {
                    continue;
                }
                let l = l / pivot;
                tail[lik] = l;
                let start = off + (k + 1 + bw - i);
                for (t, &u) in tail[start..start + prow.len()].iter_mut().zip(prow) {
                    *t -= l * u;
                }
            }
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = rhs[i];
            for j in lo..i {
                s -= self.data[i * w + (j + bw - i)] * rhs[j];
            }
            rhs[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = rhs[i];
            for j in i + 1..hi {
                s -= self.data[i * w + (j + bw - i)] * rhs[j];
            }
            rhs[i] = s / self.data[i * w + bw];
        }
    }
}

/// Strictly increasing times starting at 0: an 8-step uniform ramp to `t_min`, then
/// `t_min ρ^k` up to exactly `t_max`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub ratio: f64,
    pub n_steps: usize,
}

pub fn geometric_time_grid(t_min: f64, t_max: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return Err(Error::Parameter(format!(
            "need 0 < t_min < t_max, got {t_min}, {t_max}"
        )));
    }
    if n_steps < 8 {
        return Err(Error::Parameter(format!(
            "n_steps = {n_steps} must be at least 8"
        )));
    }
    let ratio = (t_max / t_min).powf(1.0 / n_steps as f64);
    let mut times = Vec::with_capacity(n_steps + 9);
    times.push(0.0);
    for k in 1..=8 {
        times.push(t_min * k as f64 / 8.0);
    }
    for k in 1..n_steps {
        times.push(t_min * ratio.powi(k as i32));
    }
    times.push(t_max);
    Ok(TimeGrid {
        times,
        t_min,
        t_max,
        ratio,
        n_steps,
    })
}

impl TimeGrid {
    /// Inserts `checkpoints` as grid times; a checkpoint within relative `1e-9` of an existing
    /// time replaces it.
    pub fn with_checkpoints(mut self, checkpoints: &[f64]) -> Result<Self> {
        for &c in checkpoints {
            if !(c > 0.0 && c <= self.t_max) {
                return Err(Error::Parameter(format!(
                    "checkpoint {c} outside (0, {}]",
                    self.t_max
                )));
            }
            let pos = self.times.partition_point(|&t| t < c);
            if pos < self.times.len() && (self.times[pos] - c).abs() <= 1e-9 * c {
                self.times[pos] = c;
            } else if pos > 0 && (self.times[pos - 1] - c).abs() <= 1e-9 * c {
                self.times[pos - 1] = c;
            } else {
                self.times.insert(pos, c);
            }
        }
        Ok(self)
    }
}

/// Nonlinear term in the evolution, treated by lagged fixed-point iteration.
#[derive(Clone, Copy, Debug)]
pub enum Nonlinear<'a> {
    None,
    Semilinear(&'a SemilinearTerm),
    /// `+M |Du|`, the upper envelope operator.
    UpperEnvelope(f64),
}

impl Nonlinear<'_> {
    fn gain(&self, eps: f64, u: f64) -> Option<f64> {
        match self {
            Nonlinear::None => None,
            Nonlinear::Semilinear(f) => Some(f.gain(eps, u)),
            Nonlinear::UpperEnvelope(m) => Some(*m),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveOptions {
    /// Times at which full slices are kept (must be grid times); the final slice is always kept.
    pub store: Vec<f64>,
    pub probes: Vec<Point>,
}

#[derive(Clone, Debug)]
pub struct SpaceTimeSolution {
    pub eps: f64,
    pub times: Vec<f64>,
    pub slices: Vec<GridFunction>,
    pub probes: Vec<Point>,
    pub series_times: Vec<f64>,
    /// Probe values per grid time.
    pub series: Vec<Vec<f64>>,
    pub scheme: String,
    /// Largest correction applied by the rounding guard that clamps to the data range.
    pub clamp_correction: f64,
    pub max_fixed_point_iterations: usize,
}

impl SpaceTimeSolution {
    pub fn slice_at(&self, t: f64) -> Option<&GridFunction> {
        self.times
            .iter()
            .position(|&s| s == t)
            .map(|i| &self.slices[i])
    }

    pub fn probe_at(&self, t: f64, probe: usize) -> Option<f64> {
        self.series_times
            .iter()
            .position(|&s| s == t)
            .map(|i| self.series[i][probe])
    }

    pub fn final_slice(&self) -> &GridFunction {
        self.slices.last().expect("final slice stored")
    }
}

fn data_range(data: &GridFunction, nodes: impl Iterator<Item = usize>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in nodes {
        lo = lo.min(data.values[k]);
        hi = hi.max(data.values[k]);
    }
    (lo, hi)
}

fn check_data(grid: &MaskedGrid, data: &GridFunction) -> Result<()> {
    if data.lattice != grid.lattice {
        return Err(Error::Parameter(
            "data lattice differs from the grid lattice".into(),
        ));
    }
    if let Some(k) = grid.active().find(|&k| !data.values[k].is_finite()) {
        let x = grid.point(k);
        return Err(Error::Parameter(format!(
            "data undefined at active node ({}, {})",
            x.x, x.y
        )));
    }
    Ok(())
}

struct Stepper<'a> {
    c: &'a Coefficients,
    grid: &'a MaskedGrid,
    eps: f64,
    nonlinear: Nonlinear<'a>,
    linear: DiscreteOperator,
    lo: f64,
    hi: f64,
    clamp: f64,
    max_iter_seen: usize,
}

impl Stepper<'_> {
    fn extra_drift(&self, u: &GridFunction) -> Option<Vec<Point>> {
        self.nonlinear.gain(self.eps, 0.0)?;
        Some(
            self.grid
                .interior
                .iter()
                .map(|&k| {
                    let g = self.nonlinear.gain(self.eps, u.values[k]).unwrap();
                    let p = central_gradient(u, k).unwrap_or_else(Point::zeros);
                    let n = p.norm();
                    if g == 0.0 || n == 0.0 {
                        Point::zeros()
                    } else {
                        p * (g / n)
                    }
                })
                .collect(),
        )
    }

    /// One linear solve of `(I − Δt L) v = u_prev` (or `L v = 0` when `dt` is `None`).
    fn linear_solve(
        &mut self,
        op: &DiscreteOperator,
        prev: &GridFunction,
        dt: Option<f64>,
    ) -> GridFunction {
        let lu = op.factor(dt);
        let load = op.boundary_load(&prev.values);
        let mut rhs: Vec<f64> = match dt {
            Some(dt) => self
                .grid
                .interior
                .iter()
                .zip(&load)
                .map(|(&k, l)| prev.values[k] + dt * l)
                .collect(),
            None => load,
        };
        lu.solve(&mut rhs);
        let mut out = prev.clone();
        for (&k, v) in self.grid.interior.iter().zip(rhs) {
            let c = v.clamp(self.lo, self.hi);
            self.clamp = self.clamp.max((c - v).abs());
            out.values[k] = c;
        }
        out
    }

    fn step(&mut self, prev: &GridFunction, dt: Option<f64>) -> Result<GridFunction> {
        let Some(mut beta) = self.extra_drift(prev) else {
            let op = self.linear.clone();
            return Ok(self.linear_solve(&op, prev, dt));
        };
        let mut iterate = prev.clone();
        let mut last_change = f64::INFINITY;
        let mut damped = false;
        for it in 1..=200 {
            let op = assemble_with_drift(self.c, self.grid, self.eps, Some(&beta))?;
            let mut next = self.linear_solve(&op, prev, dt);
            let change = self
                .grid
                .interior
                .iter()
                .map(|&k| (next.values[k] - iterate.values[k]).abs())
                .fold(0.0, f64::max);
            if change > last_change {
                damped = true;
            }
            if damped {
                for &k in &self.grid.interior {
                    next.values[k] = 0.5 * (next.values[k] + iterate.values[k]);
                }
            }
            let new_beta = self.extra_drift(&next).unwrap();
            if change <= 1e-10 || new_beta == beta {
                self.max_iter_seen = self.max_iter_seen.max(it);
                return Ok(next);
            }
            last_change = change;
            beta = new_beta;
            iterate = next;
        }
        Err(Error::SemilinearStep {
            iterations: 200,
            update: last_change,
        })
    }
}

/// Backward Euler from `g` sampled at the grid's data points.
pub fn solve_parabolic(
    p: &Problem,
    eps: f64,
    grid: &MaskedGrid,
    tg: &TimeGrid,
    f: Option<&SemilinearTerm>,
    opts: &SolveOptions,
) -> Result<SpaceTimeSolution> {
    let data = grid.sample(|x| p.boundary.eval(x));
    let nl = f.map(Nonlinear::Semilinear).unwrap_or(Nonlinear::None);
    evolve(&p.coefficients, eps, grid, &data, tg, nl, opts)
}

/// Backward Euler from arbitrary initial data; boundary-adjacent values stay fixed.
pub fn evolve(
    c: &Coefficients,
    eps: f64,
    grid: &MaskedGrid,
    data: &GridFunction,
    tg: &TimeGrid,
    nonlinear: Nonlinear,
    opts: &SolveOptions,
) -> Result<SpaceTimeSolution> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("ε = {eps} must be positive")));
    }
    check_data(grid, data)?;
    for &t in &opts.store {
        if !tg.times.contains(&t) {
            return Err(Error::Parameter(format!(
                "stored time {t} is not a grid time"
            )));
        }
    }
    let (lo, hi) = data_range(data, grid.active());
    let mut st = Stepper {
        c,
        grid,
        eps,
        nonlinear,
        linear: assemble_with_drift(c, grid, eps, None)?,
        lo,
        hi,
        clamp: 0.0,
        max_iter_seen: 0,
    };
    let mut u = data.clone();
    let probe = |u: &GridFunction| {
        opts.probes
            .iter()
            .map(|x| u.sample(x))
            .collect::<Vec<f64>>()
    };
    let mut times = Vec::new();
    let mut slices = Vec::new();
    if opts.store.contains(&0.0) {
        times.push(0.0);
        slices.push(u.clone());
    }
    let mut series_times = vec![0.0];
    let mut series = vec![probe(&u)];
    let last = *tg.times.last().unwrap();
    for w in tg.times.windows(2) {
        let dt = w[1] - w[0];
        u = st.step(&u, Some(dt))?;
        series_times.push(w[1]);
        series.push(probe(&u));
        if opts.store.contains(&w[1]) || w[1] == last {
            times.push(w[1]);
            slices.push(u.clone());
        }
    }
    Ok(SpaceTimeSolution {
        eps,
        times,
        slices,
        probes: opts.probes.clone(),
        series_times,
        series,
        scheme: "backward Euler, exponentially fitted drift, banded LU".into(),
        clamp_correction: st.clamp,
        max_fixed_point_iterations: st.max_iter_seen,
    })
}

/// `L_ε v = 0` (or `L_ε v + f = 0`) in the interior with `v = g` at boundary projections.
pub fn solve_stationary(
    p: &Problem,
    eps: f64,
    grid: &MaskedGrid,
    f: Option<&SemilinearTerm>,
) -> Result<GridFunction> {
    let data = grid.sample(|x| p.boundary.eval(x));
    let nl = f.map(Nonlinear::Semilinear).unwrap_or(Nonlinear::None);
    stationary(&p.coefficients, eps, grid, &data, nl)
}

/// Stationary solve with boundary values taken from `data` (interior entries are used only as
/// the starting iterate of the nonlinear iteration).
pub fn stationary(
    c: &Coefficients,
    eps: f64,
    grid: &MaskedGrid,
    data: &GridFunction,
    nonlinear: Nonlinear,
) -> Result<GridFunction> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("ε = {eps} must be positive")));
    }
    check_data(grid, data)?;
    if grid.boundary.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    let (lo, hi) = data_range(data, grid.boundary.iter().copied());
    let mut st = Stepper {
        c,
        grid,
        eps,
        nonlinear,
        linear: assemble_with_drift(c, grid, eps, None)?,
        lo,
        hi,
        clamp: 0.0,
        max_iter_seen: 0,
    };
    let v = st.step(data, None)?;
    let residual = st
        .linear
        .apply(&v.values)
        .iter()
        .map(|r| r.abs())
        .fold(0.0, f64::max);
    if !residual.is_finite()
        || (matches!(nonlinear, Nonlinear::None)
            && residual > 1e-6 * (1.0 + hi.abs().max(lo.abs())) / (grid.h() * grid.h()))
    {
        return Err(Error::Solver(format!("stationary residual {residual:e}")));
    }
    Ok(v)
}
