//! L²-Betti numbers by two independent oracles, heat-trace limits and the
//! Morse-inequality ledger.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::calculus::{calculus_trace, CalculusOptions, SpectralFunction};
use crate::complex::{assemble_cover, BaseComplex, CoverComplex};
use crate::error::{Error, Result};
use crate::group::{folner_average, geq_mod_ideal, GroupKind, GroupModel, TileFunction};
use crate::morse::{check_overflow, count_critical, witten_laplacian, CellFunction, DiscreteMorseData};
use crate::rng::{stream, Stream};
use crate::stats::format_real;

pub const DEFAULT_KER_TOL: f64 = 1e-8;
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BettiMethod {
    Floquet,
    FiniteCover,
    HeatLimit,
}

impl BettiMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            BettiMethod::Floquet => "floquet",
            BettiMethod::FiniteCover => "finite_cover",
            BettiMethod::HeatLimit => "heat_limit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BettiReport {
    pub method: BettiMethod,
    pub values: Vec<f64>,
    /// `(numerator, denominator)` when the value is an exact rational.
    pub rational: Vec<Option<(u64, u64)>>,
    pub tolerance: f64,
    pub samples: usize,
    /// Samples whose kernel count differs from the reported minimum, per degree.
    pub disagreements: Vec<usize>,
    pub notes: Vec<String>,
}

impl BettiReport {
    pub fn euler(&self) -> f64 {
        self.values.iter().enumerate().map(|(k, v)| if k % 2 == 0 { *v } else { -v }).sum()
    }

    /// `degree,value,method,tolerance,samples`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("degree,value,method,tolerance,samples\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{k},{},{},{},{}", format_real(*v), self.method.tag(), format_real(self.tolerance), self.samples);
        }
        s
    }
}

/// An invariant Witten deformation: base-cell values of `f` and the parameter `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub values: Vec<Vec<f64>>,
    pub t: f64,
}

impl Deformation {
    /// Identity-tile values of an invariant cell function.
    pub fn from_invariant(cover: &CoverComplex, f: &CellFunction, t: f64) -> Result<Self> {
        if !f.is_invariant() {
            return Err(Error::Precondition("deformation needs a G-invariant cell function".into()));
        }
        check_overflow(f, t)?;
        let e = cover.group().identity();
        let values = (0..=cover.dim())
            .map(|k| (0..cover.base().count(k)).map(|c| f.value(k, c, &e).expect("identity tile")).collect())
            .collect();
        Ok(Self { values, t })
    }
}

type CMatrix = DMatrix<Complex<f64>>;

/// Fiber Laplacians `Δ_k(θ)` in the orthonormal basis, where `phase(o)` is
/// the character value `⟨θ, o⟩` of a deck offset.
pub fn fiber_laplacians(base: &BaseComplex, phase: impl Fn(&[i64]) -> f64, def: Option<&Deformation>) -> Vec<CMatrix> {
    let n = base.dim();
    let mut ds: Vec<CMatrix> = (0..n).map(|k| CMatrix::zeros(base.count(k + 1), base.count(k))).collect();
    for inc in base.incidences() {
        let k = inc.degree - 1;
        let (ws, wt) = (base.weights(k + 1)[inc.cell], base.weights(k)[inc.face]);
        let mut mag = inc.sign as f64 * (ws / wt).sqrt();
        if let Some(d) = def {
            mag *= (d.t * (d.values[k][inc.face] - d.values[k + 1][inc.cell])).exp();
        }
        ds[k][(inc.cell, inc.face)] += Complex::from_polar(mag, phase(&inc.offset));
    }
    (0..=n)
        .map(|k| {
            let m = base.count(k);
            let mut lap = CMatrix::zeros(m, m);
            if k < n {
                lap += ds[k].adjoint() * &ds[k];
            }
            if k > 0 {
                lap += &ds[k - 1] * ds[k - 1].adjoint();
            }
            lap
        })
        .collect()
}

fn hermitian_eigenvalues(m: CMatrix) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let m = (&m + m.adjoint()) * Complex::new(0.5, 0.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Kernel dimensions for each spectrum, counted below `ker_tol · λ_max`
/// with `λ_max` the largest eigenvalue over all spectra of the degree.
/// Any eigenvalue within a factor 10 of the threshold on either side makes
/// the count ambiguous.
fn kernel_counts(spectra: &[Vec<Vec<f64>>], ker_tol: f64) -> Result<Vec<Vec<usize>>> {
    let degrees = spectra.first().map(|s| s.len()).unwrap_or(0);
    let mut out = vec![Vec::with_capacity(spectra.len()); degrees];
    for k in 0..degrees {
        let lmax = spectra.iter().flat_map(|s| s[k].iter()).fold(0.0f64, |m, x| m.max(*x));
        let thr = ker_tol * lmax;
        for (si, s) in spectra.iter().enumerate() {
            if let Some(x) = s[k].iter().find(|x| **x >= thr / 10.0 && **x < 10.0 * thr) {
                return Err(Error::Ambiguous(format!(
                    "degree {k}, sample {si}: eigenvalue {x:e} within 10x of the kernel threshold {thr:e} (degenerate ker_tol?); \
                     spectrum head {:?}",
                    &s[k][..s[k].len().min(6)]
                )));
            }
            out[k].push(s[k].iter().filter(|x| **x < thr || (lmax == 0.0 && **x <= 0.0)).count());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FloquetOptions {
    pub samples: usize,
    pub ker_tol: f64,
    pub seed: u64,
    pub deformation: Option<Deformation>,
}

impl Default for FloquetOptions {
    fn default() -> Self {
        Self { samples: 64, ker_tol: DEFAULT_KER_TOL, seed: 0, deformation: None }
    }
}

/// Generic fiber kernel dimension over random phases.
pub fn floquet_betti(base: &BaseComplex, group: &GroupModel, opts: &FloquetOptions) -> Result<BettiReport> {
    let GroupKind::Lattice { rank } = group.kind() else {
        return Err(Error::Precondition(format!(
            "Floquet oracle needs a lattice deck group; use finite_cover_betti for {group}"
        )));
    };
    if rank != base.offset_rank() {
        return Err(Error::GroupMismatch(format!("base offsets have rank {} but group is {group}", base.offset_rank())));
    }
    if opts.samples < 16 {
        return Err(Error::Precondition(format!("Floquet oracle needs >= 16 phase samples, got {}", opts.samples)));
    }
    let mut rng = stream(opts.seed, Stream::FloquetPhases);
    let phases: Vec<Vec<f64>> = (0..opts.samples)
        .map(|_| (0..rank).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
        .collect();
    let spectra: Vec<Vec<Vec<f64>>> = phases
        .par_iter()
        .map(|theta| {
            let phase = |o: &[i64]| o.iter().zip(theta).map(|(a, t)| *a as f64 * t).sum();
            fiber_laplacians(base, phase, opts.deformation.as_ref())
                .into_iter()
                .map(hermitian_eigenvalues)
                .collect()
        })
        .collect();
    let counts = kernel_counts(&spectra, opts.ker_tol)?;
    let values: Vec<f64> = counts.iter().map(|c| *c.iter().min().unwrap_or(&0) as f64).collect();
    let disagreements = counts
        .iter()
        .zip(&values)
        .map(|(c, v)| c.iter().filter(|x| **x as f64 != *v).count())
        .collect();
    Ok(BettiReport {
        method: BettiMethod::Floquet,
        rational: values.iter().map(|v| Some((*v as u64, 1))).collect(),
        values,
        tolerance: opts.ker_tol,
        samples: opts.samples,
        disagreements,
        notes: Vec::new(),
    })
}

/// Fiber kernel dimensions averaged over the characters of `Z/N`
/// (phases `2πj/N`, applied to the sum of offset coordinates).
pub fn character_average(base: &BaseComplex, order: u64, ker_tol: f64, def: Option<&Deformation>) -> Result<Vec<f64>> {
    let spectra: Vec<Vec<Vec<f64>>> = (0..order)
        .into_par_iter()
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / order as f64;
            let phase = |o: &[i64]| o.iter().sum::<i64>() as f64 * theta;
            fiber_laplacians(base, phase, def).into_iter().map(hermitian_eigenvalues).collect()
        })
        .collect();
    let counts = kernel_counts(&spectra, ker_tol)?;
    Ok(counts.iter().map(|c| c.iter().sum::<usize>() as f64 / order as f64).collect())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn numerical_rank(m: &DMatrix<f64>, rank_tol: f64, label: &str) -> Result<usize> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv[0];
    if smax == 0.0 {
        return Ok(0);
    }
    let thr = rank_tol * smax;
    if let Some(x) = sv.iter().find(|x| **x > thr / 10.0 && **x <= thr * 10.0) {
        let tail: Vec<String> = sv.iter().rev().take(6).map(|x| format!("{x:.3e}")).collect();
        return Err(Error::Ambiguous(format!(
            "{label}: singular value {x:e} within 10x of rank threshold {thr:e}; smallest: [{}]",
            tail.join(", ")
        )));
    }
    Ok(sv.iter().filter(|x| **x > thr).count())
}

/// `b_k(total) / N` from ranks of the boundary matrices of the whole cover,
/// optionally conjugated by an invariant deformation.
pub fn finite_cover_betti(base: &BaseComplex, order: u64, rank_tol: f64, f: Option<(&CellFunction, f64, &CoverComplex)>) -> Result<BettiReport> {
    let group = GroupModel::cyclic(order)?;
    let owned;
    let cover = match f {
        Some((_, _, c)) => {
            if *c.group() != group {
                return Err(Error::GroupMismatch(format!("deformation lives on {} not {group}", c.group())));
            }
            c
        }
        None => {
            owned = assemble_cover(base, group, 0)?;
            &owned
        }
    };
    let n = base.dim();
    let mut ranks = Vec::with_capacity(n);
    for k in 0..n {
        let d = match f {
            Some((func, t, _)) => crate::morse::witten_coboundary(cover, func, k, t)?,
            None => cover.coboundary(k)?,
        };
        ranks.push(numerical_rank(&d.to_dense_onb(), rank_tol, &format!("d_{k}"))?);
    }
    let mut values = Vec::new();
    let mut rational = Vec::new();
    for k in 0..=n {
        let dim = base.count(k) * order as usize;
        let b = dim - if k < n { ranks[k] } else { 0 } - if k > 0 { ranks[k - 1] } else { 0 };
        let g = gcd(b as u64, order).max(1);
        values.push(b as f64 / order as f64);
        rational.push(Some((b as u64 / g, order / g)));
    }
    Ok(BettiReport {
        method: BettiMethod::FiniteCover,
        disagreements: vec![0; values.len()],
        values,
        rational,
        tolerance: rank_tol,
        samples: 1,
        notes: Vec::new(),
    })
}

/// `a + b q^t` through three points with increasing `t`, solved for `q` by
/// bisection; `None` when the points are not geometric-like.
pub fn geometric_tail_fit(pts: [(f64, f64); 3]) -> Option<(f64, f64, f64)> {
    let [(t1, y1), (t2, y2), (t3, y3)] = pts;
    let (d1, d2) = (y1 - y2, y2 - y3);
    if !(d1 > 0.0 && d2 >= 0.0) {
        return None;
    }
    let target = d2 / d1;
    let ratio = |q: f64| (q.powf(t2) - q.powf(t3)) / (q.powf(t1) - q.powf(t2));
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    if target <= ratio(lo) {
        return Some((y3, 0.0, 0.0));
    }
    if target >= ratio(hi) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    let b = d1 / (q.powf(t1) - q.powf(t2));
    Some((y3 - b * q.powf(t3), b, q))
}

#[derive(Clone, Debug)]
pub struct HeatDegree {
    pub degree: usize,
    /// `(heat time, Følner-averaged trace)`.
    pub averages: Vec<(f64, f64)>,
    /// Per-tile traces at each heat time, in-margin tiles only.
    pub traces: Vec<TileFunction>,
    pub fit: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct HeatBettiReport {
    pub degrees: Vec<HeatDegree>,
    pub folner_k: u64,
    pub eps: f64,
    pub report: BettiReport,
}

#[derive(Clone, Debug)]
pub struct HeatOptions {
    pub eps: f64,
    pub folner_k: u64,
    pub deformation: Option<(CellFunction, f64)>,
}

/// Følner-averaged `Tr(e^{-s Δ_k})` along increasing heat times, with a
/// monotonicity audit (averages and every in-margin tile) and a
/// geometric-tail extrapolation.
pub fn heat_betti(cover: &CoverComplex, times: &[f64], degrees: RangeInclusive<usize>, opts: &HeatOptions) -> Result<HeatBettiReport> {
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
        return Err(Error::Precondition("heat times must be nonnegative and strictly increasing".into()));
    }
    let zero = CellFunction::zero(cover);
    let (f, t) = match &opts.deformation {
        Some((f, t)) => (f, *t),
        None => (&zero, 0.0),
    };
    let group = *cover.group();
    let folner = group.folner_box(opts.folner_k);
    let copts = CalculusOptions { spectral_bound: None, required_margin: Some(opts.folner_k as i64) };
    let mut out = Vec::new();
    for k in degrees {
        let lap = witten_laplacian(cover, f, k, t)?;
        let dim = cover.base().count(k) as f64;
        let slack = 2.0 * opts.eps * dim;
        let mut averages = Vec::new();
        let mut traces: Vec<TileFunction> = Vec::new();
        for &s in times {
            let tr = if s == 0.0 {
                let exact = lap.exactness();
                TileFunction::on_window(
                    group,
                    cover
                        .window()
                        .tiles()
                        .iter()
                        .filter(|g| exact.covers_row(group.box_norm(g)))
                        .map(|g| (g.clone(), dim)),
                )
            } else {
                calculus_trace(&lap, SpectralFunction::Heat { s }, opts.eps, &copts)?.0
            };
            let avg = folner_average(&tr, &folner)?;
            if let Some((s0, prev)) = averages.last() {
                if avg > prev + slack {
                    return Err(Error::NotMonotone(format!(
                        "degree {k}: average {avg} at s = {s} exceeds {prev} at s = {s0} (calculus eps too loose?)"
                    )));
                }
            }
            if let Some(prev) = traces.last() {
                for (g, v) in tr.points() {
                    if prev.covers(g) && v > prev.eval(g) + slack {
                        return Err(Error::NotMonotone(format!("degree {k}: tile {g} trace increases at s = {s}")));
                    }
                }
            }
            averages.push((s, avg));
            traces.push(tr);
        }
        let fit = if averages.len() >= 3 {
            let l = averages.len();
            geometric_tail_fit([averages[l - 3], averages[l - 2], averages[l - 1]])
        } else {
            None
        };
        out.push(HeatDegree { degree: k, averages, traces, fit });
    }
    let values: Vec<f64> = out
        .iter()
        .map(|d| d.fit.map(|f| f.0).unwrap_or(d.averages.last().expect("nonempty").1))
        .collect();
    let report = BettiReport {
        method: BettiMethod::HeatLimit,
        rational: vec![None; values.len()],
        disagreements: vec![0; values.len()],
        values,
        tolerance: opts.eps,
        samples: times.len(),
        notes: vec![format!("heat times {times:?}, Følner box F_{}", opts.folner_k)],
    };
    Ok(HeatBettiReport { degrees: out, folner_k: opts.folner_k, eps: opts.eps, report })
}

#[derive(Clone, Debug)]
pub struct InvarianceReport {
    pub reference: Vec<f64>,
    /// `(t, kernel dimensions at t)`.
    pub rows: Vec<(f64, Vec<f64>)>,
    pub pass: bool,
}

/// Compares generic kernel dimensions of the deformed complex against the
/// undeformed one for each `t`. The function is normalized to oscillation
/// at most 1 first, so the weights stay well conditioned.
pub fn invariance_check(cover: &CoverComplex, f: &CellFunction, t_list: &[f64], opts: &FloquetOptions, rank_tol: f64) -> Result<InvarianceReport> {
    let f = f.normalized();
    let base = cover.base();
    let group = *cover.group();
    let run = |t: f64| -> Result<Vec<f64>> {
        match group.kind() {
            GroupKind::Lattice { .. } => {
                let deformation = if t == 0.0 { None } else { Some(Deformation::from_invariant(cover, &f, t)?) };
                let o = FloquetOptions { deformation, ..opts.clone() };
                Ok(floquet_betti(base, &group, &o)?.values)
            }
            GroupKind::Cyclic { order } => {
                if !f.is_invariant() {
                    return Err(Error::Precondition("invariance check needs a G-invariant function".into()));
                }
                let def = if t == 0.0 { None } else { Some((&f, t, cover)) };
                Ok(finite_cover_betti(base, order, rank_tol, def)?.values)
            }
        }
    };
    let reference = run(0.0)?;
    let rows = t_list.iter().map(|t| Ok((*t, run(*t)?))).collect::<Result<Vec<_>>>()?;
    let pass = rows.iter().all(|(_, v)| *v == reference);
    Ok(InvarianceReport { reference, rows, pass })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LedgerKind {
    /// Σ(-1)^{k-i} c_i ≥ Σ(-1)^{k-i} b_i.
    Inequality,
    /// Top degree: Σ(-1)^{n-i} c_i = (-1)^n χ.
    Equality,
    /// Heat analog Σ(-1)^{k-i} Tr(e^{-s Δ_i(t)}) ≥ 0.
    Heat,
}

impl LedgerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LedgerKind::Inequality => "inequality",
            LedgerKind::Equality => "equality",
            LedgerKind::Heat => "heat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub degree: usize,
    pub kind: LedgerKind,
    pub folner_k: u64,
    pub lhs_avg: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl LedgerRow {
    pub fn defect(&self) -> f64 {
        self.lhs_avg - self.rhs
    }
}

#[derive(Clone, Debug)]
pub struct MorseLedger {
    pub rows: Vec<LedgerRow>,
    /// Box-decay exponent of each inequality's averages, when fitted.
    pub decay_rates: Vec<Option<f64>>,
    /// Per-degree `geq_mod_ideal` verdict, which also demands the last
    /// average clear `-tol/2`.
    pub geq_verdicts: Vec<bool>,
    pub pass: bool,
}

impl MorseLedger {
    /// `k,lhs_avg,rhs,verdict,folner_k,defect`; the verdict reads `<kind>:<pass|fail>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,lhs_avg,rhs,verdict,folner_k,defect\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}:{},{},{}",
                r.degree,
                format_real(r.lhs_avg),
                format_real(r.rhs),
                r.kind.tag(),
                if r.pass { "pass" } else { "fail" },
                r.folner_k,
                format_real(r.defect())
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct LedgerOptions {
    pub s: f64,
    pub t: f64,
    pub folner: RangeInclusive<u64>,
    pub tol: f64,
    pub eps: f64,
}

fn alternating(fs: &[TileFunction], k: usize) -> Result<TileFunction> {
    let mut acc = fs[0].scale(if k % 2 == 0 { 1.0 } else { -1.0 });
    for (i, f) in fs.iter().enumerate().take(k + 1).skip(1) {
        acc = acc.add(&f.scale(if (k - i) % 2 == 0 { 1.0 } else { -1.0 }))?;
    }
    Ok(acc)
}

/// Evaluates the Morse inequalities degree by degree over a range of
/// Følner boxes: (a) averages of Σ(-1)^{k-i} c_i, (b) the oracle side,
/// (c) the inequality verdict, (d) the top-degree equality and (e) the
/// heat-trace analog at `(s, t)`.
pub fn morse_inequality_eval(cover: &CoverComplex, morse: &DiscreteMorseData, betti: &BettiReport, opts: &LedgerOptions) -> Result<MorseLedger> {
    let n = cover.dim();
    if betti.values.len() != n + 1 {
        return Err(Error::DegreeMismatch(format!("Betti report has {} degrees, complex has {}", betti.values.len(), n + 1)));
    }
    let group = *cover.group();
    let counts = count_critical(morse);
    let kmax = *opts.folner.end();
    let heat_opts = CalculusOptions { spectral_bound: None, required_margin: Some(kmax as i64) };
    let heat: Vec<TileFunction> = (0..=n)
        .map(|i| {
            let lap = witten_laplacian(cover, morse.function(), i, opts.t)?;
            Ok(calculus_trace(&lap, SpectralFunction::Heat { s: opts.s }, opts.eps, &heat_opts)?.0)
        })
        .collect::<Result<_>>()?;
    let chi = cover.base().euler_characteristic() as f64;
    let mut rows = Vec::new();
    let mut decay_rates = Vec::new();
    let mut geq_verdicts = Vec::new();
    for k in 0..=n {
        let lhs = counts.alternating(k)?;
        let rhs: f64 = (0..=k).map(|i| if (k - i) % 2 == 0 { betti.values[i] } else { -betti.values[i] }).sum();
        let geq = geq_mod_ideal(&lhs, &TileFunction::constant(group, rhs), opts.folner.clone(), opts.tol)?;
        decay_rates.push(geq.decay_rate);
        geq_verdicts.push(geq.pass);
        for (fk, avg) in &geq.averages {
            rows.push(LedgerRow {
                degree: k,
                kind: LedgerKind::Inequality,
                folner_k: *fk,
                lhs_avg: avg + rhs,
                rhs,
                pass: *avg >= -opts.tol,
            });
        }
        if k == n {
            let target = if n % 2 == 0 { chi } else { -chi };
            for fk in opts.folner.clone() {
                let avg = folner_average(&lhs, &group.folner_box(fk))?;
                rows.push(LedgerRow {
                    degree: k,
                    kind: LedgerKind::Equality,
                    folner_k: fk,
                    lhs_avg: avg,
                    rhs: target,
                    pass: (avg - target).abs() <= opts.tol,
                });
            }
        }
        let h = alternating(&heat, k)?;
        for fk in opts.folner.clone() {
            let avg = folner_average(&h, &group.folner_box(fk))?;
            rows.push(LedgerRow { degree: k, kind: LedgerKind::Heat, folner_k: fk, lhs_avg: avg, rhs: 0.0, pass: avg >= -opts.tol });
        }
    }
    let pass = rows.iter().all(|r| r.pass) && geq_verdicts.iter().all(|v| *v);
    Ok(MorseLedger { rows, decay_rates, geq_verdicts, pass })
}
