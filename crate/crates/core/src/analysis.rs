//! Random finite-propagation operators, the trace-commutator defect and
//! Gaussian decay fits.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::complex::TileWindow;
use crate::error::{Error, Result};
use crate::group::{folner_average, GroupKind};
use crate::operator::{Exactness, TileSpace, WindowedOperator};
use crate::stats::linear_fit;

/// Blocks with i.i.d. uniform `[-1, 1]` entries between every pair of tiles
/// at word distance at most `radius`. Rows whose neighbourhood leaves the
/// window are marked inexact, as for a truncation of an infinite operator.
pub fn random_operator(
    window: &Arc<TileWindow>,
    source: &Arc<TileSpace>,
    target: &Arc<TileSpace>,
    radius: u64,
    rng: &mut impl Rng,
) -> WindowedOperator {
    let group = window.group();
    let mut blocks = BTreeMap::new();
    for (gi, g) in window.tiles().iter().enumerate() {
        for (hi, h) in window.tiles().iter().enumerate() {
            if group.word_norm(&group.difference(g, h)) <= radius {
                let b = DMatrix::from_fn(target.dim(), source.dim(), |_, _| rng.random_range(-1.0..=1.0));
                blocks.insert((gi, hi), b);
            }
        }
    }
    WindowedOperator::from_parts(
        window.clone(),
        source.clone(),
        target.clone(),
        blocks,
        radius,
        window.exactness_for_reach(radius),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectRow {
    pub k: u64,
    /// Følner average of `Tr(AB) - Tr(BA)` over `F_k`.
    pub average: f64,
    /// `||A|| ||B|| · 2 min(|∂_{r(A)} F_k|, |∂_{r(B)} F_k|) / |F_k|`, with
    /// `∂_r F` the cells of `F` within distance `r` of its complement.
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct DefectReport {
    pub rows: Vec<DefectRow>,
    pub norm_a: f64,
    pub norm_b: f64,
    pub decay: Option<PowerFit>,
    pub pass: bool,
}

/// `|y| ≈ C · side^{slope}` fitted in log-log, with `side = |F_k|^{1/d}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFit {
    pub slope: f64,
    pub r2: f64,
    /// Smallest `C` with `|y_k| ≤ C / side_k` for every row.
    pub envelope: f64,
}

/// Fits `(side, |y|)` pairs; zero values are skipped.
pub fn power_fit(points: &[(f64, f64)]) -> Option<PowerFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y != 0.0)
        .map(|(x, y)| (x.ln(), y.abs().ln()))
        .collect();
    let (slope, _, r2) = linear_fit(&logs)?;
    let envelope = points.iter().map(|(x, y)| x * y.abs()).fold(0.0, f64::max);
    Some(PowerFit { slope, r2, envelope })
}

fn side_length(kind: GroupKind, members: usize) -> f64 {
    match kind {
        GroupKind::Lattice { rank } => (members as f64).powf(1.0 / rank as f64),
        GroupKind::Cyclic { .. } => members as f64,
    }
}

/// Box averages of the piecewise trace defect `Tr(AB) - Tr(BA)`.
pub fn trace_commutator_defect(
    a: &WindowedOperator,
    b: &WindowedOperator,
    k_range: RangeInclusive<u64>,
) -> Result<DefectReport> {
    let ab = a.compose(b)?;
    let ba = b.compose(a)?;
    let window = a.window();
    let group = *window.group();
    let kmax = *k_range.end() as i64;
    let margin = ab.exactness().min(ba.exactness());
    if let Exactness::Within(m) = margin {
        if m < kmax {
            return Err(Error::WindowTooSmall {
                what: format!("trace defect up to F_{kmax} with r(A)+r(B) = {}", a.radius() + b.radius()),
                required_radius: window.radius() as i64 + kmax - m,
            });
        }
    }
    let defect = ab.piecewise_trace()?.sub(&ba.piecewise_trace()?)?;
    let norm_a = a.norm_bound();
    let norm_b = b.norm_bound();
    let (dim_a, dim_b) = (a.target().dim() as f64, a.source().dim() as f64);
    let mut rows = Vec::new();
    for k in k_range {
        let folner = group.folner_box(k);
        let average = folner_average(&defect, &folner)?;
        let near = |r: u64| -> usize {
            if group.is_finite() {
                return 0;
            }
            folner.members.iter().filter(|g| group.box_norm(g) + r > k).count()
        };
        // A maps into the target of A; B into its source.
        let cells = (near(a.radius()) as f64 * dim_a).min(near(b.radius()) as f64 * dim_b);
        let bound = norm_a * norm_b * 2.0 * cells / folner.len() as f64;
        rows.push(DefectRow { k, average, bound });
    }
    let pass = rows.iter().all(|r| r.average.abs() <= r.bound * (1.0 + 1e-9) + 1e-12);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (side_length(group.kind(), group.folner_box(r.k).len()), r.average))
        .collect();
    Ok(DefectReport { rows, norm_a, norm_b, decay: power_fit(&pts), pass })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    /// `ln C₁`.
    pub log_c1: f64,
    pub c2: f64,
    pub r2: f64,
    pub gaussian_class: bool,
    /// `(word distance, largest entry at that distance)` over exact rows.
    pub profile: Vec<(u64, f64)>,
}

/// Fits `ln max|A[g,h]| ≈ ln C₁ - C₂ d(g,h)²` over the nonzero distances.
/// `C₁` is then lifted so that the envelope dominates every point.
pub fn decay_fit(a: &WindowedOperator) -> Result<DecayFit> {
    let window = a.window();
    let group = *window.group();
    let mut profile: BTreeMap<u64, f64> = BTreeMap::new();
    for ((g, h), b) in a.blocks() {
        let (tg, th) = (window.tile(g), window.tile(h));
        if !a.exactness().covers_row(group.box_norm(tg)) {
            continue;
        }
        let m = a.onb_block(b).amax();
        if m > 0.0 {
            let d = group.word_norm(&group.difference(tg, th));
            let e = profile.entry(d).or_insert(0.0);
            *e = e.max(m);
        }
    }
    if profile.is_empty() {
        return Err(Error::Precondition("decay fit of an operator with no nonzero exact rows".into()));
    }
    let profile: Vec<(u64, f64)> = profile.into_iter().collect();
    let pts: Vec<(f64, f64)> = profile.iter().map(|(d, m)| ((*d * *d) as f64, m.ln())).collect();
    let (c2, r2) = match linear_fit(&pts) {
        Some((slope, _, r2)) => (-slope, r2),
        // a single distance: compactly supported, any rate will do
        None => (1.0, 1.0),
    };
    let log_c1 = pts.iter().map(|(x, y)| y + c2 * x).fold(f64::NEG_INFINITY, f64::max);
    let envelope_holds = pts.iter().all(|(x, y)| y.exp() <= (log_c1 - c2 * x).exp() * (1.0 + 1e-6));
    Ok(DecayFit { log_c1, c2, r2, gaussian_class: c2 > 0.0 && envelope_holds, profile })
}
