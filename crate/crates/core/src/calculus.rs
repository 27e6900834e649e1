//! Polynomial functional calculus for self-adjoint windowed operators.
//!
//! A spectral function on `[0, λ_max]` is replaced by a truncated Chebyshev
//! series whose uniform error is below the requested `eps`. The polynomial
//! is applied exactly through the three-term recurrence, so the result has
//! propagation radius `m·r` and its in-margin blocks are exact values of the
//! polynomial.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::group::TileFunction;
use crate::operator::{Exactness, WindowedOperator};

pub const DEGREE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpectralFunction {
    /// `x ↦ e^{-s x}`.
    Heat { s: f64 },
    /// `x ↦ exp(-x / (w - x))` on `[0, w)`, zero beyond: smooth, `φ(0) = 1`,
    /// `0 ≤ φ ≤ 1`.
    Cutoff { width: f64 },
}

impl SpectralFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SpectralFunction::Heat { s } => (-s * x).exp(),
            SpectralFunction::Cutoff { width } => {
                if x <= 0.0 {
                    1.0
                } else if x >= width {
                    0.0
                } else {
                    (-x / (width - x)).exp()
                }
            }
        }
    }
}

/// Truncated Chebyshev series of a function on `[0, λ_max]`.
#[derive(Clone, Debug)]
pub struct ChebyshevSeries {
    pub coeffs: Vec<f64>,
    pub lambda_max: f64,
    /// Estimated `Σ_{j>m} |c_j|`.
    pub tail: f64,
    /// Estimated `Σ_{j≤m} |c_j - ĉ_j|` from the quadrature.
    pub quadrature_error: f64,
    pub nodes: usize,
}

fn gauss_coefficients(func: &SpectralFunction, lambda: f64, nodes: usize) -> Vec<f64> {
    // cos(j θ_i) = cos(π j (2i+1) / 2N), read from a table of multiples of π/2N
    let period = 4 * nodes;
    let table: Vec<f64> = (0..period).map(|k| (PI * k as f64 / (2 * nodes) as f64).cos()).collect();
    let vals: Vec<f64> = (0..nodes)
        .map(|i| func.eval(0.5 * lambda * (table[2 * i + 1] + 1.0)))
        .collect();
    (0..nodes)
        .map(|j| {
            let s: f64 = vals
                .iter()
                .enumerate()
                .map(|(i, v)| v * table[(j * (2 * i + 1)) % period])
                .sum();
            let c = 2.0 * s / nodes as f64;
            if j == 0 {
                c / 2.0
            } else {
                c
            }
        })
        .collect()
}

impl ChebyshevSeries {
    /// Smallest degree whose uniform error on `[0, λ_max]` is below `eps`:
    /// tail at most `0.8 eps`, quadrature error at most `eps / 10`.
    pub fn fit(func: SpectralFunction, lambda_max: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !(lambda_max > 0.0) || !lambda_max.is_finite() {
            return Err(Error::Precondition(format!(
                "chebyshev fit needs eps > 0 and finite λ_max > 0 (got {eps}, {lambda_max})"
            )));
        }
        let mut nodes = 32;
        loop {
            let coarse = gauss_coefficients(&func, lambda_max, nodes);
            let fine = gauss_coefficients(&func, lambda_max, 2 * nodes);
            let mut tail = 0.0;
            let mut m = fine.len() - 1;
            while m > 0 && tail + fine[m].abs() <= 0.8 * eps {
                tail += fine[m].abs();
                m -= 1;
            }
            if m > DEGREE_CAP {
                return Err(Error::DegreeCap { degree: m, eps, cap: DEGREE_CAP });
            }
            let quadrature_error: f64 = (0..=m.min(nodes - 1)).map(|j| (coarse[j] - fine[j]).abs()).sum();
            if m < nodes && quadrature_error <= eps / 10.0 {
                let series = Self { coeffs: fine[..=m].to_vec(), lambda_max, tail, quadrature_error, nodes: 2 * nodes };
                // sampling can miss features narrower than the node spacing
                if series.max_error_on_grid(&func, 4 * nodes) <= eps {
                    return Ok(series);
                }
            }
            if nodes > 2 * DEGREE_CAP {
                return Err(Error::DegreeCap { degree: m, eps, cap: DEGREE_CAP });
            }
            nodes *= 2;
        }
    }

    fn max_error_on_grid(&self, func: &SpectralFunction, points: usize) -> f64 {
        (0..=points)
            .map(|i| {
                let x = 0.5 * self.lambda_max * ((PI * i as f64 / points as f64).cos() + 1.0);
                (self.eval(x) - func.eval(x)).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn error_bound(&self) -> f64 {
        self.tail + self.quadrature_error
    }

    /// Evaluates the series at a scalar `x ∈ [0, λ_max]`.
    pub fn eval(&self, x: f64) -> f64 {
        let y = 2.0 * x / self.lambda_max - 1.0;
        let (mut b1, mut b2) = (0.0, 0.0);
        for c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * y * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        y * b1 - b2 + self.coeffs[0]
    }
}

#[derive(Clone, Debug, Default)]
pub struct CalculusOptions {
    /// Upper bound on the spectrum; defaults to the Gershgorin bound of `Δ`.
    /// Pinning it makes results independent of the window.
    pub spectral_bound: Option<f64>,
    /// Max-norm radius the result must be exact on.
    pub required_margin: Option<i64>,
}

fn checked_input(delta: &WindowedOperator, opts: &CalculusOptions) -> Result<f64> {
    if *delta.source() != *delta.target() {
        return Err(Error::DegreeMismatch("functional calculus needs a square operator".into()));
    }
    let bound = delta.gershgorin_bound();
    let lambda = opts.spectral_bound.unwrap_or(bound);
    if lambda < bound * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "spectral bound {lambda} is below the Gershgorin bound {bound}"
        )));
    }
    let asym = delta.asymmetry()?;
    if asym > 1e-10 * bound.max(1.0) {
        return Err(Error::Precondition(format!("operator is not self-adjoint (asymmetry {asym:e})")));
    }
    Ok(lambda)
}

fn result_exactness(delta: &WindowedOperator, degree: usize) -> Exactness {
    if degree == 0 {
        Exactness::Everywhere
    } else {
        delta.exactness().shrink((degree as u64 - 1) * delta.radius())
    }
}

fn check_margin(delta: &WindowedOperator, exact: Exactness, opts: &CalculusOptions, degree: usize) -> Result<()> {
    if let (Some(req), Exactness::Within(m)) = (opts.required_margin, exact) {
        if m < req {
            return Err(Error::WindowTooSmall {
                what: format!("polynomial of degree {degree} (propagation {})", degree as u64 * delta.radius()),
                required_radius: delta.window().radius() as i64 + (req - m),
            });
        }
    }
    Ok(())
}

type TileVector = BTreeMap<usize, DMatrix<f64>>;

/// Applies the series of the shifted operator `L = (2/λ)Δ - I` to the tile
/// basis of column tile `h`. Returns `P(Δ)[·, h]` keyed by target tile.
fn apply_to_tile(
    rows: &[Vec<(usize, &DMatrix<f64>)>],
    reach: &[Vec<usize>],
    series: &ChebyshevSeries,
    n: usize,
    h: usize,
) -> TileVector {
    let alpha = 2.0 / series.lambda_max;
    let apply = |v: &TileVector| -> TileVector {
        let mut targets: Vec<usize> = v.keys().flat_map(|u| reach[*u].iter().copied()).collect();
        targets.sort_unstable();
        targets.dedup();
        let mut out = TileVector::new();
        for g in targets {
            let mut acc = DMatrix::zeros(n, n);
            for (u, blk) in &rows[g] {
                if let Some(x) = v.get(u) {
                    acc.gemm(alpha, blk, x, 1.0);
                }
            }
            if let Some(x) = v.get(&g) {
                acc -= x;
            }
            out.insert(g, acc);
        }
        out
    };
    let mut t_prev: TileVector = BTreeMap::from([(h, DMatrix::identity(n, n))]);
    let mut result: TileVector = BTreeMap::from([(h, DMatrix::identity(n, n) * series.coeffs[0])]);
    if series.degree() == 0 {
        return result;
    }
    let mut t_cur = apply(&t_prev);
    let add = |result: &mut TileVector, t: &TileVector, c: f64| {
        for (g, x) in t {
            match result.get_mut(g) {
                Some(acc) => *acc += x * c,
                None => {
                    result.insert(*g, x * c);
                }
            }
        }
    };
    add(&mut result, &t_cur, series.coeffs[1]);
    for c in &series.coeffs[2..] {
        let mut next = apply(&t_cur);
        for (g, x) in next.iter_mut() {
            *x *= 2.0;
            if let Some(p) = t_prev.get(g) {
                *x -= p;
            }
        }
        add(&mut result, &next, *c);
        t_prev = std::mem::replace(&mut t_cur, next);
    }
    result
}

struct Prepared<'a> {
    rows: Vec<Vec<(usize, &'a DMatrix<f64>)>>,
    reach: Vec<Vec<usize>>,
}

fn prepare(delta: &WindowedOperator) -> Prepared<'_> {
    let rows = delta.row_adjacency();
    let mut reach = vec![Vec::new(); rows.len()];
    for (g, row) in rows.iter().enumerate() {
        for (u, _) in row {
            reach[*u].push(g);
        }
    }
    // every tile also reaches itself through the shift by -I
    for (u, r) in reach.iter_mut().enumerate() {
        r.push(u);
        r.sort_unstable();
        r.dedup();
    }
    Prepared { rows, reach }
}

/// Every column that meets an exact row: entry `(g, h)` with `g` exact is
/// computed exactly even when column `h` as a whole is not.
fn columns_for(delta: &WindowedOperator, exact: Exactness, degree: usize) -> Vec<usize> {
    let window = delta.window();
    let group = window.group();
    let reach = (degree as u64 * delta.radius()) as i64;
    (0..window.len())
        .filter(|i| match exact {
            Exactness::Everywhere => true,
            Exactness::Within(m) => (group.box_norm(window.tile(*i)) as i64) <= m + reach,
        })
        .collect()
}

/// `func(Δ)` up to `eps` in operator norm, as an exact polynomial in `Δ`.
pub fn poly_calculus(
    delta: &WindowedOperator,
    func: SpectralFunction,
    eps: f64,
    opts: &CalculusOptions,
) -> Result<(WindowedOperator, ChebyshevSeries)> {
    let lambda = checked_input(delta, opts)?;
    if lambda == 0.0 {
        let series = ChebyshevSeries {
            coeffs: vec![func.eval(0.0)],
            lambda_max: 0.0,
            tail: 0.0,
            quadrature_error: 0.0,
            nodes: 0,
        };
        let id = WindowedOperator::identity(delta.window().clone(), delta.source().clone());
        return Ok((id.scale(series.coeffs[0]), series));
    }
    let series = ChebyshevSeries::fit(func, lambda, eps)?;
    let m = series.degree();
    let exact = result_exactness(delta, m);
    check_margin(delta, exact, opts, m)?;
    let prep = prepare(delta);
    let n = delta.source().dim();
    let cols = columns_for(delta, exact, m);
    let computed: Vec<(usize, TileVector)> = cols
        .par_iter()
        .map(|h| (*h, apply_to_tile(&prep.rows, &prep.reach, &series, n, *h)))
        .collect();
    let mut blocks = BTreeMap::new();
    for (h, col) in computed {
        for (g, b) in col {
            if b.iter().any(|x| *x != 0.0) {
                blocks.insert((g, h), b);
            }
        }
    }
    let op = WindowedOperator::from_parts(
        delta.window().clone(),
        delta.source().clone(),
        delta.target().clone(),
        blocks,
        m as u64 * delta.radius(),
        exact,
    );
    Ok((op, series))
}

/// Per-tile traces `Tr(func(Δ))(g)` on every tile where the result is exact.
/// Cheaper than [`poly_calculus`]: only diagonal blocks are kept.
pub fn calculus_trace(
    delta: &WindowedOperator,
    func: SpectralFunction,
    eps: f64,
    opts: &CalculusOptions,
) -> Result<(TileFunction, ChebyshevSeries)> {
    let lambda = checked_input(delta, opts)?;
    let window = delta.window();
    let group = *window.group();
    let n = delta.source().dim();
    if lambda == 0.0 {
        let v = func.eval(0.0) * n as f64;
        let series = ChebyshevSeries { coeffs: vec![func.eval(0.0)], lambda_max: 0.0, tail: 0.0, quadrature_error: 0.0, nodes: 0 };
        return Ok((TileFunction::on_window(group, window.tiles().iter().map(|g| (g.clone(), v))), series));
    }
    let series = ChebyshevSeries::fit(func, lambda, eps)?;
    let m = series.degree();
    let exact = result_exactness(delta, m);
    check_margin(delta, exact, opts, m)?;
    let prep = prepare(delta);
    let rows: Vec<usize> = (0..window.len())
        .filter(|i| exact.covers_row(group.box_norm(window.tile(*i))))
        .collect();
    let traces: Vec<(usize, f64)> = rows
        .par_iter()
        .map(|h| {
            let col = apply_to_tile(&prep.rows, &prep.reach, &series, n, *h);
            (*h, col.get(h).map(|b| b.trace()).unwrap_or(0.0))
        })
        .collect();
    Ok((
        TileFunction::on_window(group, traces.into_iter().map(|(i, v)| (window.tile(i).clone(), v))),
        series,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{assemble_cover, BaseComplex};
    use crate::group::GroupModel;
    use crate::operator::Grade;

    fn bessel_i0(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= (x / 2.0) * (x / 2.0) / (k as f64 * k as f64);
            sum += term;
        }
        sum
    }

    fn line_laplacian(radius: u64) -> WindowedOperator {
        let cov = assemble_cover(&BaseComplex::circle(1).unwrap(), GroupModel::lattice(1).unwrap(), radius).unwrap();
        let d = cov.coboundary(0).unwrap();
        d.adjoint().compose(&d).unwrap()
    }

    #[test]
    fn series_matches_function() {
        let f = SpectralFunction::Heat { s: 2.0 };
        let ser = ChebyshevSeries::fit(f, 8.0, 1e-10).unwrap();
        for i in 0..=100 {
            let x = 8.0 * i as f64 / 100.0;
            assert!((ser.eval(x) - f.eval(x)).abs() < 1e-10);
        }
        assert!(ser.error_bound() <= 0.9e-10);
    }

    #[test]
    fn cutoff_is_smooth_bump() {
        let f = SpectralFunction::Cutoff { width: 2.0 };
        assert_eq!(f.eval(0.0), 1.0);
        assert_eq!(f.eval(2.5), 0.0);
        assert!(f.eval(1.0) > 0.0 && f.eval(1.0) < 1.0);
        let ser = ChebyshevSeries::fit(f, 4.0, 1e-4).unwrap();
        assert!((ser.eval(1.0) - f.eval(1.0)).abs() < 1e-4);
    }

    #[test]
    fn degree_cap_is_reported() {
        let err = ChebyshevSeries::fit(SpectralFunction::Heat { s: 1e4 }, 1e3, 1e-12).unwrap_err();
        assert!(matches!(err, Error::DegreeCap { .. }));
    }

    #[test]
    fn zero_operator_gives_identity() {
        let lap = line_laplacian(3).scale(0.0);
        let (op, _) = poly_calculus(&lap, SpectralFunction::Heat { s: 5.0 }, 1e-8, &CalculusOptions::default()).unwrap();
        let z = GroupModel::lattice(1).unwrap();
        let g = z.element(&[2]).unwrap();
        assert_eq!(op.block(&g, &g).unwrap()[(0, 0)], 1.0);
        assert_eq!(op.radius(), 0);
    }

    #[test]
    fn scalar_operator() {
        let cov = assemble_cover(&BaseComplex::circle(2).unwrap(), GroupModel::lattice(1).unwrap(), 2).unwrap();
        let lam = 3.5;
        let a = cov.identity(Grade::Degree(0)).scale(lam);
        let (op, _) = poly_calculus(&a, SpectralFunction::Heat { s: 1.0 }, 1e-10, &CalculusOptions::default()).unwrap();
        let z = cov.group();
        let g = z.element(&[0]).unwrap();
        let b = op.block(&g, &g).unwrap();
        assert!((b[(0, 0)] - (-lam).exp()).abs() < 1e-10);
        assert!(b[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn lattice_heat_kernel_diagonal() {
        let lap = line_laplacian(60);
        let (tr, ser) = calculus_trace(&lap, SpectralFunction::Heat { s: 1.0 }, 1e-8, &CalculusOptions::default()).unwrap();
        let oracle = (-2.0f64).exp() * bessel_i0(2.0);
        assert!((oracle - 0.30851).abs() < 5e-6);
        let z = GroupModel::lattice(1).unwrap();
        let v = tr.eval(&z.identity());
        assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
        assert!(ser.degree() > 5);
    }

    #[test]
    fn in_margin_blocks_are_window_independent() {
        let f = SpectralFunction::Heat { s: 0.7 };
        let opts = CalculusOptions { spectral_bound: Some(4.0), required_margin: None };
        let (small, _) = poly_calculus(&line_laplacian(30), f, 1e-8, &opts).unwrap();
        let (large, _) = poly_calculus(&line_laplacian(40), f, 1e-8, &opts).unwrap();
        let z = GroupModel::lattice(1).unwrap();
        let m = small.exactness().margin().unwrap();
        assert!(m >= 1);
        for g in -m..=m {
            let ge = z.element(&[g]).unwrap();
            for (h, b) in small.row_blocks(&ge) {
                assert_eq!(large.block(&ge, h).unwrap(), b);
            }
            assert_eq!(small.row_blocks(&ge).count(), large.row_blocks(&ge).count());
        }
    }

    #[test]
    fn exact_rows_are_complete() {
        // constants are harmonic, so every exact row of e^{-sΔ} sums to 1
        let (heat, _) = poly_calculus(&line_laplacian(25), SpectralFunction::Heat { s: 1.5 }, 1e-10, &CalculusOptions::default()).unwrap();
        let z = GroupModel::lattice(1).unwrap();
        let m = heat.exactness().margin().unwrap();
        for g in -m..=m {
            let sum: f64 = heat.row_blocks(&z.element(&[g]).unwrap()).map(|(_, b)| b.sum()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {g}: {sum}");
        }
    }

    #[test]
    fn margin_shortfall_names_required_radius() {
        let lap = line_laplacian(5);
        let opts = CalculusOptions { spectral_bound: None, required_margin: Some(3) };
        match poly_calculus(&lap, SpectralFunction::Heat { s: 1.0 }, 1e-8, &opts) {
            Err(Error::WindowTooSmall { required_radius, .. }) => assert!(required_radius > 5),
            other => panic!("unexpected {other:?}"),
        }
    }
}
