//! Tile-blocked operators with tracked propagation and exactness.
//!
//! An operator is a sparse map of dense blocks `A[g,h]` (target tile `g`,
//! source tile `h`) stored in the cell basis, together with the cell weights
//! of source and target. Quantities that depend on an orthonormal basis use
//! the weight-normalized cells `e_i = cell_i / sqrt(w_i)`, in which the
//! entries read `sqrt(w_tgt_i / w_src_j) A_ij` and the adjoint is the
//! transpose.
//!
//! Every operator carries its propagation radius (blocks vanish beyond that
//! word distance) and an [`Exactness`] radius: rows in tiles of max-norm at
//! most the margin agree with the infinite-cover operator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::complex::TileWindow;
use crate::error::{Error, Result};
use crate::group::{GroupElement, TileFunction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grade {
    Degree(usize),
    /// All degrees stacked, lowest degree first.
    Total,
}

/// The per-tile cochain space of one grade, with its cell weights.
#[derive(Debug, PartialEq)]
pub struct TileSpace {
    grade: Grade,
    weights: Vec<f64>,
    starts: Vec<usize>,
}

impl TileSpace {
    pub fn degree(k: usize, weights: Vec<f64>) -> Self {
        let n = weights.len();
        Self { grade: Grade::Degree(k), weights, starts: vec![0, n] }
    }

    pub fn total(per_degree: Vec<Vec<f64>>) -> Self {
        let mut starts = vec![0];
        let mut weights = Vec::new();
        for w in per_degree {
            weights.extend(w);
            starts.push(weights.len());
        }
        Self { grade: Grade::Total, weights, starts }
    }

    pub fn grade(&self) -> Grade {
        self.grade
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Local index range of degree `k` inside a total space.
    pub fn degree_range(&self, k: usize) -> Option<Range<usize>> {
        match self.grade {
            Grade::Total if k + 1 < self.starts.len() => Some(self.starts[k]..self.starts[k + 1]),
            Grade::Degree(d) if d == k => Some(0..self.dim()),
            _ => None,
        }
    }

    pub fn top_degree(&self) -> usize {
        match self.grade {
            Grade::Degree(k) => k,
            Grade::Total => self.starts.len() - 2,
        }
    }
}

/// Max-norm radius of tiles whose rows are exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exactness {
    Everywhere,
    Within(i64),
}

impl Exactness {
    pub fn shrink(self, r: u64) -> Self {
        match self {
            Exactness::Everywhere => Exactness::Everywhere,
            Exactness::Within(m) => Exactness::Within(m - r as i64),
        }
    }

    pub fn min(self, other: Exactness) -> Self {
        match (self, other) {
            (Exactness::Everywhere, x) | (x, Exactness::Everywhere) => x,
            (Exactness::Within(a), Exactness::Within(b)) => Exactness::Within(a.min(b)),
        }
    }

    pub fn covers_row(&self, box_norm: u64) -> bool {
        match self {
            Exactness::Everywhere => true,
            Exactness::Within(m) => box_norm as i64 <= *m,
        }
    }

    /// A column is exact when every row it can reach is.
    pub fn covers_column(&self, box_norm: u64, radius: u64) -> bool {
        self.shrink(radius).covers_row(box_norm)
    }

    pub fn margin(&self) -> Option<i64> {
        match self {
            Exactness::Everywhere => None,
            Exactness::Within(m) => Some(*m),
        }
    }

    fn describe(&self) -> String {
        match self {
            Exactness::Everywhere => "everywhere".into(),
            Exactness::Within(m) => format!("{m}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowedOperator {
    window: Arc<TileWindow>,
    source: Arc<TileSpace>,
    target: Arc<TileSpace>,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    radius: u64,
    exact: Exactness,
}

impl WindowedOperator {
    pub fn from_parts(
        window: Arc<TileWindow>,
        source: Arc<TileSpace>,
        target: Arc<TileSpace>,
        blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
        radius: u64,
        exact: Exactness,
    ) -> Self {
        debug_assert!(blocks
            .values()
            .all(|b| b.nrows() == target.dim() && b.ncols() == source.dim()));
        Self { window, source, target, blocks, radius, exact }
    }

    pub fn identity(window: Arc<TileWindow>, space: Arc<TileSpace>) -> Self {
        let n = space.dim();
        let blocks = (0..window.len()).map(|i| ((i, i), DMatrix::identity(n, n))).collect();
        Self { window, source: space.clone(), target: space, blocks, radius: 0, exact: Exactness::Everywhere }
    }

    pub fn zero(window: Arc<TileWindow>, source: Arc<TileSpace>, target: Arc<TileSpace>) -> Self {
        Self { window, source, target, blocks: BTreeMap::new(), radius: 0, exact: Exactness::Everywhere }
    }

    /// Block-diagonal multiplication operator with `diag(g)` on tile `g`.
    pub fn diagonal(
        window: Arc<TileWindow>,
        space: Arc<TileSpace>,
        diag: impl Fn(&GroupElement) -> Vec<f64>,
    ) -> Self {
        let n = space.dim();
        let mut blocks = BTreeMap::new();
        for (i, g) in window.tiles().iter().enumerate() {
            let d = diag(g);
            assert_eq!(d.len(), n, "diagonal length must match tile dimension");
            let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d));
            if m.iter().any(|x| *x != 0.0) {
                blocks.insert((i, i), m);
            }
        }
        Self { window, source: space.clone(), target: space, blocks, radius: 0, exact: Exactness::Everywhere }
    }

    pub fn window(&self) -> &Arc<TileWindow> {
        &self.window
    }

    pub fn source(&self) -> &Arc<TileSpace> {
        &self.source
    }

    pub fn target(&self) -> &Arc<TileSpace> {
        &self.target
    }

    pub fn radius(&self) -> u64 {
        self.radius
    }

    pub fn exactness(&self) -> Exactness {
        self.exact
    }

    pub fn with_exactness(mut self, exact: Exactness) -> Self {
        self.exact = exact;
        self
    }

    /// Tightens the declared propagation radius to a known structural bound.
    pub fn with_radius(mut self, radius: u64) -> Self {
        debug_assert!(self.measured_radius() <= radius, "radius {radius} below measured {}", self.measured_radius());
        self.radius = self.radius.min(radius);
        self
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Blocks keyed by `(target tile index, source tile index)` in window order.
    pub fn blocks(&self) -> impl Iterator<Item = ((usize, usize), &DMatrix<f64>)> {
        self.blocks.iter().map(|(k, v)| (*k, v))
    }

    pub fn block(&self, g: &GroupElement, h: &GroupElement) -> Option<&DMatrix<f64>> {
        let gi = self.window.index_of(g)?;
        let hi = self.window.index_of(h)?;
        self.blocks.get(&(gi, hi))
    }

    pub fn row_blocks<'a>(&'a self, g: &GroupElement) -> impl Iterator<Item = (&'a GroupElement, &'a DMatrix<f64>)> + 'a {
        let gi = self.window.index_of(g).unwrap_or(usize::MAX);
        self.blocks
            .range((gi, 0)..=(gi, usize::MAX))
            .map(move |((_, h), b)| (self.window.tile(*h), b))
    }

    /// Per target tile, the list of `(source tile, block)` in source order.
    pub fn row_adjacency(&self) -> Vec<Vec<(usize, &DMatrix<f64>)>> {
        let mut rows = vec![Vec::new(); self.window.len()];
        for ((g, h), b) in &self.blocks {
            rows[*g].push((*h, b));
        }
        rows
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Largest word distance between tiles joined by a nonzero block.
    pub fn measured_radius(&self) -> u64 {
        let group = self.window.group();
        self.blocks
            .keys()
            .map(|(g, h)| group.word_norm(&group.difference(self.window.tile(*g), self.window.tile(*h))))
            .max()
            .unwrap_or(0)
    }

    fn same_window(&self, other: &WindowedOperator) -> Result<()> {
        if Arc::ptr_eq(&self.window, &other.window) || *self.window == *other.window {
            Ok(())
        } else {
            Err(Error::Precondition("operators live on different windows".into()))
        }
    }

    /// `self ∘ rhs`.
    pub fn compose(&self, rhs: &WindowedOperator) -> Result<WindowedOperator> {
        self.same_window(rhs)?;
        if *self.source != *rhs.target {
            return Err(Error::DegreeMismatch(format!(
                "cannot compose {:?} -> {:?} after {:?} -> {:?}",
                self.source.grade, self.target.grade, rhs.source.grade, rhs.target.grade
            )));
        }
        let rhs_rows = rhs.row_adjacency();
        let mut out: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for ((g, u), a) in &self.blocks {
            for (h, b) in &rhs_rows[*u] {
                let prod = a * *b;
                match out.get_mut(&(*g, *h)) {
                    Some(acc) => *acc += prod,
                    None => {
                        out.insert((*g, *h), prod);
                    }
                }
            }
        }
        out.retain(|_, b| b.iter().any(|x| *x != 0.0));
        Ok(WindowedOperator {
            window: self.window.clone(),
            source: rhs.source.clone(),
            target: self.target.clone(),
            blocks: out,
            radius: self.radius + rhs.radius,
            exact: self.exact.min(rhs.exact.shrink(self.radius)),
        })
    }

    /// Adjoint with respect to the weighted inner products.
    pub fn adjoint(&self) -> WindowedOperator {
        let ws = self.source.weights();
        let wt = self.target.weights();
        let blocks = self
            .blocks
            .iter()
            .map(|((g, h), b)| {
                let mut t = b.transpose();
                for i in 0..t.nrows() {
                    for j in 0..t.ncols() {
                        t[(i, j)] *= wt[j] / ws[i];
                    }
                }
                ((*h, *g), t)
            })
            .collect();
        WindowedOperator {
            window: self.window.clone(),
            source: self.target.clone(),
            target: self.source.clone(),
            blocks,
            radius: self.radius,
            exact: self.exact.shrink(self.radius),
        }
    }

    fn combine(&self, rhs: &WindowedOperator, c: f64) -> Result<WindowedOperator> {
        self.same_window(rhs)?;
        if *self.source != *rhs.source || *self.target != *rhs.target {
            return Err(Error::DegreeMismatch("sum of operators between different spaces".into()));
        }
        let mut blocks = self.blocks.clone();
        for (k, b) in &rhs.blocks {
            match blocks.get_mut(k) {
                Some(acc) => *acc += b * c,
                None => {
                    blocks.insert(*k, b * c);
                }
            }
        }
        blocks.retain(|_, b| b.iter().any(|x| *x != 0.0));
        Ok(WindowedOperator {
            window: self.window.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            blocks,
            radius: self.radius.max(rhs.radius),
            exact: self.exact.min(rhs.exact),
        })
    }

    pub fn add(&self, rhs: &WindowedOperator) -> Result<WindowedOperator> {
        self.combine(rhs, 1.0)
    }

    pub fn sub(&self, rhs: &WindowedOperator) -> Result<WindowedOperator> {
        self.combine(rhs, -1.0)
    }

    pub fn scale(&self, c: f64) -> WindowedOperator {
        let mut out = self.clone();
        if c == 0.0 {
            out.blocks.clear();
        } else {
            out.blocks.values_mut().for_each(|b| *b *= c);
        }
        out
    }

    /// The `(tgt_k, src_k)` block of an operator on the total space.
    pub fn restrict(&self, src_k: usize, tgt_k: usize, src: Arc<TileSpace>, tgt: Arc<TileSpace>) -> Result<WindowedOperator> {
        let sr = self
            .source
            .degree_range(src_k)
            .ok_or_else(|| Error::DegreeMismatch(format!("source has no degree {src_k}")))?;
        let tr = self
            .target
            .degree_range(tgt_k)
            .ok_or_else(|| Error::DegreeMismatch(format!("target has no degree {tgt_k}")))?;
        if src.dim() != sr.len() || tgt.dim() != tr.len() {
            return Err(Error::DegreeMismatch("restriction spaces have the wrong dimension".into()));
        }
        let mut blocks: BTreeMap<(usize, usize), DMatrix<f64>> = self
            .blocks
            .iter()
            .map(|(k, b)| (*k, b.view((tr.start, sr.start), (tr.len(), sr.len())).into_owned()))
            .collect();
        blocks.retain(|_, b| b.iter().any(|x| *x != 0.0));
        Ok(WindowedOperator {
            window: self.window.clone(),
            source: src,
            target: tgt,
            blocks,
            radius: self.radius,
            exact: self.exact,
        })
    }

    /// Places a single-degree operator into the total space.
    pub fn embed(&self, total: Arc<TileSpace>) -> Result<WindowedOperator> {
        let (Grade::Degree(s), Grade::Degree(t)) = (self.source.grade, self.target.grade) else {
            return Err(Error::DegreeMismatch("embed expects a single-degree operator".into()));
        };
        let sr = total.degree_range(s).ok_or_else(|| Error::DegreeMismatch(format!("no degree {s}")))?;
        let tr = total.degree_range(t).ok_or_else(|| Error::DegreeMismatch(format!("no degree {t}")))?;
        let n = total.dim();
        let blocks = self
            .blocks
            .iter()
            .map(|(k, b)| {
                let mut m = DMatrix::zeros(n, n);
                m.view_mut((tr.start, sr.start), (tr.len(), sr.len())).copy_from(b);
                (*k, m)
            })
            .collect();
        Ok(WindowedOperator {
            window: self.window.clone(),
            source: total.clone(),
            target: total,
            blocks,
            radius: self.radius,
            exact: self.exact,
        })
    }

    /// A block in the weight-normalized basis.
    pub fn onb_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ws = self.source.weights();
        let wt = self.target.weights();
        let mut m = b.clone();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] *= (wt[i] / ws[j]).sqrt();
            }
        }
        m
    }

    fn tile_function(&self, tiles: impl Iterator<Item = (usize, f64)>) -> TileFunction {
        TileFunction::on_window(*self.window.group(), tiles.map(|(i, v)| (self.window.tile(i).clone(), v)))
    }

    fn column_tiles(&self) -> Vec<usize> {
        let group = self.window.group();
        (0..self.window.len())
            .filter(|i| self.exact.covers_column(group.box_norm(self.window.tile(*i)), self.radius))
            .collect()
    }

    fn row_tiles(&self) -> Vec<usize> {
        let group = self.window.group();
        (0..self.window.len())
            .filter(|i| self.exact.covers_row(group.box_norm(self.window.tile(*i))))
            .collect()
    }

    fn require_column(&self, g: &GroupElement) -> Result<usize> {
        let group = self.window.group();
        match self.window.index_of(g) {
            Some(i) if self.exact.covers_column(group.box_norm(g), self.radius) => Ok(i),
            _ => Err(Error::OutsideMargin {
                tile: g.to_string(),
                margin: format!("{} less radius {}", self.exact.describe(), self.radius),
            }),
        }
    }

    fn require_row(&self, g: &GroupElement) -> Result<usize> {
        let group = self.window.group();
        match self.window.index_of(g) {
            Some(i) if self.exact.covers_row(group.box_norm(g)) => Ok(i),
            _ => Err(Error::OutsideMargin { tile: g.to_string(), margin: self.exact.describe() }),
        }
    }

    /// Squared column-slab norms `Σ_h ||A[h,g]||_F^2` for every tile.
    fn column_hs_squares(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.window.len()];
        for ((_, h), b) in &self.blocks {
            acc[*h] += self.onb_block(b).iter().map(|x| x * x).sum::<f64>();
        }
        acc
    }

    /// `ρ₂(A)(g) = ||A 1_{gK}||_HS` on every tile whose column is exact.
    pub fn rho2(&self) -> TileFunction {
        let sq = self.column_hs_squares();
        self.tile_function(self.column_tiles().into_iter().map(|i| (i, sq[i].sqrt())))
    }

    pub fn rho2_at(&self, g: &GroupElement) -> Result<f64> {
        let i = self.require_column(g)?;
        Ok(self.column_hs_squares()[i].sqrt())
    }

    fn column_pairings(&self, other: &WindowedOperator) -> Result<Vec<f64>> {
        self.same_window(other)?;
        if *self.source != *other.source || *self.target != *other.target {
            return Err(Error::DegreeMismatch("ρ₂ pairing needs operators between the same spaces".into()));
        }
        let mut acc = vec![0.0; self.window.len()];
        for (key, a) in &self.blocks {
            if let Some(b) = other.blocks.get(key) {
                acc[key.1] += self.onb_block(a).dot(&other.onb_block(b));
            }
        }
        Ok(acc)
    }

    /// `ρ₂(A,B)(g) = ⟨A 1_{gK}, B 1_{gK}⟩_HS`.
    pub fn rho2_pairing(&self, other: &WindowedOperator) -> Result<TileFunction> {
        let acc = self.column_pairings(other)?;
        let group = self.window.group();
        let tiles = self.column_tiles().into_iter().filter(|i| {
            other.exact.covers_column(group.box_norm(self.window.tile(*i)), other.radius)
        });
        Ok(self.tile_function(tiles.map(|i| (i, acc[i])).collect::<Vec<_>>().into_iter()))
    }

    fn require_square(&self) -> Result<()> {
        if *self.source != *self.target {
            return Err(Error::DegreeMismatch("trace of a non-square operator".into()));
        }
        Ok(())
    }

    fn diagonal_of(&self, i: usize) -> Vec<f64> {
        match self.blocks.get(&(i, i)) {
            Some(b) => b.diagonal().iter().copied().collect(),
            None => vec![0.0; self.source.dim()],
        }
    }

    /// `ρ₁(A)(g) = Σ_i |⟨e_i^g, A e_i^g⟩|` on every exact tile.
    pub fn rho1(&self) -> Result<TileFunction> {
        self.require_square()?;
        Ok(self.tile_function(
            self.row_tiles()
                .into_iter()
                .map(|i| (i, self.diagonal_of(i).iter().map(|x| x.abs()).sum())),
        ))
    }

    /// Piecewise trace `Tr(A)(g)`: the trace of the diagonal block `A[g,g]`.
    pub fn piecewise_trace(&self) -> Result<TileFunction> {
        self.require_square()?;
        Ok(self.tile_function(
            self.row_tiles()
                .into_iter()
                .map(|i| (i, self.diagonal_of(i).iter().sum())),
        ))
    }

    pub fn trace_at(&self, g: &GroupElement) -> Result<f64> {
        self.require_square()?;
        let i = self.require_row(g)?;
        Ok(self.diagonal_of(i).iter().sum())
    }

    fn abs_row_col_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let nt = self.target.dim();
        let ns = self.source.dim();
        let mut rows = vec![0.0; self.window.len() * nt];
        let mut cols = vec![0.0; self.window.len() * ns];
        for ((g, h), b) in &self.blocks {
            let m = self.onb_block(b);
            for i in 0..nt {
                for j in 0..ns {
                    let a = m[(i, j)].abs();
                    rows[g * nt + i] += a;
                    cols[h * ns + j] += a;
                }
            }
        }
        (rows, cols)
    }

    /// Schur bound `sqrt(||A||_1 ||A||_∞)` on the ℓ² operator norm, computed
    /// in the orthonormal basis over the materialized window.
    pub fn norm_bound(&self) -> f64 {
        let (rows, cols) = self.abs_row_col_sums();
        let r = rows.iter().fold(0.0f64, |m, x| m.max(*x));
        let c = cols.iter().fold(0.0f64, |m, x| m.max(*x));
        (r * c).sqrt()
    }

    /// Gershgorin radius: the largest absolute row sum in the orthonormal basis.
    /// Bounds the spectrum of a self-adjoint operator.
    pub fn gershgorin_bound(&self) -> f64 {
        self.abs_row_col_sums().0.iter().fold(0.0f64, |m, x| m.max(*x))
    }

    /// The whole materialized operator as a dense matrix in the orthonormal
    /// basis, tile-major (cell `j` of tile `i` at `i * dim + j`).
    pub fn to_dense_onb(&self) -> DMatrix<f64> {
        let (nt, ns) = (self.target.dim(), self.source.dim());
        let t = self.window.len();
        let mut m = DMatrix::zeros(t * nt, t * ns);
        for ((g, h), b) in &self.blocks {
            m.view_mut((g * nt, h * ns), (nt, ns)).copy_from(&self.onb_block(b));
        }
        m
    }

    /// `max |A - A*|` entrywise in the orthonormal basis.
    pub fn asymmetry(&self) -> Result<f64> {
        self.require_square()?;
        let diff = self.sub(&self.adjoint())?;
        Ok(diff
            .blocks
            .values()
            .map(|b| diff.onb_block(b).amax())
            .fold(0.0, f64::max))
    }

    /// Text dump: per block a header `blk <k> <g...> <h...> <rows> <cols>`
    /// followed by row-major entries with 17 significant digits. `k` is the
    /// source degree, or `T` for the total space.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let k = match self.source.grade {
            Grade::Degree(k) => k.to_string(),
            Grade::Total => "T".to_string(),
        };
        for ((g, h), b) in &self.blocks {
            let _ = write!(s, "blk {k}");
            for c in self.window.tile(*g).coords() {
                let _ = write!(s, " {c}");
            }
            for c in self.window.tile(*h).coords() {
                let _ = write!(s, " {c}");
            }
            let _ = writeln!(s, " {} {}", b.nrows(), b.ncols());
            for i in 0..b.nrows() {
                let row: Vec<String> = (0..b.ncols()).map(|j| format!("{:.16e}", b[(i, j)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{assemble_cover, BaseComplex};
    use crate::group::GroupModel;

    fn line_cover(radius: u64) -> crate::complex::CoverComplex {
        assemble_cover(&BaseComplex::circle(3).unwrap(), GroupModel::lattice(1).unwrap(), radius).unwrap()
    }

    #[test]
    fn identity_rho2_and_trace() {
        let cov = line_cover(4);
        let z = *cov.group();
        let id0 = cov.identity(Grade::Degree(0));
        let idt = cov.identity(Grade::Total);
        let g = z.element(&[1]).unwrap();
        assert!((id0.rho2_at(&g).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert!((idt.rho2_at(&g).unwrap() - 6f64.sqrt()).abs() < 1e-15);
        let tr = id0.piecewise_trace().unwrap();
        assert!(tr.points().all(|(_, v)| v == 3.0));
        let zero = id0.scale(0.0);
        assert_eq!(zero.rho2_at(&g).unwrap(), 0.0);
    }

    #[test]
    fn composition_with_identity_and_shifts() {
        let cov = assemble_cover(&BaseComplex::circle(1).unwrap(), GroupModel::lattice(1).unwrap(), 6).unwrap();
        let d = cov.coboundary(0).unwrap();
        let id = cov.identity(Grade::Degree(0));
        let same = id.compose(&d.adjoint()).unwrap();
        assert_eq!(same.radius(), d.radius());
        assert_eq!(same.dump(), d.adjoint().dump());

        // shift S: (Su)(g) = u(g+1)
        let z = *cov.group();
        let shift = shift_operator(&cov, 1);
        let s2 = shift.compose(&shift).unwrap();
        assert_eq!(s2.radius(), 2);
        assert_eq!(s2.measured_radius(), 2);
        let g = z.element(&[0]).unwrap();
        let h = z.element(&[2]).unwrap();
        assert_eq!(s2.block(&g, &h).unwrap()[(0, 0)], 1.0);
    }

    pub(crate) fn shift_operator(cov: &crate::complex::CoverComplex, by: i64) -> WindowedOperator {
        let w = cov.window().clone();
        let space = cov.space(0).clone();
        let z = *cov.group();
        let n = space.dim();
        let mut blocks = BTreeMap::new();
        for (i, g) in w.tiles().iter().enumerate() {
            let h = z.compose(g, &z.element(&[by]).unwrap());
            if let Some(j) = w.index_of(&h) {
                blocks.insert((i, j), DMatrix::identity(n, n));
            }
        }
        let exact = w.exactness_for_reach(by.unsigned_abs());
        WindowedOperator::from_parts(w, space.clone(), space, blocks, by.unsigned_abs(), exact)
    }

    #[test]
    fn weighted_adjoint_rescales_by_weight_ratio() {
        let base1 = BaseComplex::circle(1).unwrap();
        let mut base2 = base1.clone();
        base2.set_weights(1, vec![2.0]).unwrap();
        let z = GroupModel::lattice(1).unwrap();
        let g = z.element(&[0]).unwrap();
        let h = z.element(&[1]).unwrap();
        let a1 = assemble_cover(&base1, z, 3).unwrap().coboundary(0).unwrap().adjoint();
        let a2 = assemble_cover(&base2, z, 3).unwrap().coboundary(0).unwrap().adjoint();
        // d*[τ,σ] = (w_σ / w_τ) d[σ,τ]: edge weight 2 over vertex weight 1
        assert_eq!(a1.block(&h, &g).unwrap()[(0, 0)], 1.0);
        assert_eq!(a2.block(&h, &g).unwrap()[(0, 0)], 2.0);
        // ⟨d u, v⟩ = ⟨u, d* v⟩ on a concrete pair
        assert_eq!(a2.block(&g, &g).unwrap()[(0, 0)], -2.0);
    }

    #[test]
    fn rank_one_counterexample() {
        let cov = line_cover(3);
        let z = *cov.group();
        let w = cov.window().clone();
        let space = cov.space(0).clone();
        let one = z.identity();
        let g0 = z.element(&[1]).unwrap();
        let mut blocks = BTreeMap::new();
        let mut e = DMatrix::zeros(3, 3);
        e[(0, 0)] = 1.0;
        blocks.insert((w.index_of(&g0).unwrap(), w.index_of(&one).unwrap()), e);
        let a = WindowedOperator::from_parts(w, space.clone(), space, blocks, 1, Exactness::Everywhere);
        assert_eq!(a.rho2_at(&one).unwrap(), 1.0);
        assert_eq!(a.adjoint().rho2_at(&one).unwrap(), 0.0);
        let ata = a.adjoint().compose(&a).unwrap();
        assert_eq!(ata.rho2_at(&one).unwrap(), 1.0);
        assert!(ata.rho2_at(&one).unwrap() > a.adjoint().rho2_at(&one).unwrap() * a.norm_bound());
    }

    #[test]
    fn margins_shrink_and_are_enforced() {
        let cov = line_cover(5);
        let z = *cov.group();
        let d = cov.coboundary(0).unwrap();
        assert_eq!(d.exactness(), Exactness::Within(4));
        let lap = d.adjoint().compose(&d).unwrap();
        assert_eq!(lap.exactness(), Exactness::Within(3));
        assert!(lap.trace_at(&z.element(&[3]).unwrap()).is_ok());
        assert!(matches!(
            lap.trace_at(&z.element(&[4]).unwrap()),
            Err(Error::OutsideMargin { .. })
        ));
        assert!(matches!(lap.rho2_at(&z.element(&[3]).unwrap()), Err(Error::OutsideMargin { .. })));
    }

    #[test]
    fn zero_diagonal_blocks_have_zero_trace() {
        let cov = line_cover(4);
        let s = shift_operator(&cov, 1);
        let tr = s.piecewise_trace().unwrap();
        assert!(tr.points().all(|(_, v)| v == 0.0));
        assert!(s.rho2().points().all(|(_, v)| v > 0.0));
    }

    #[test]
    fn laplacians_are_symmetric_and_degree_preserving() {
        let cov = assemble_cover(&BaseComplex::torus(2, 2).unwrap(), GroupModel::lattice(2).unwrap(), 3).unwrap();
        let total = cov.total_space().clone();
        let d0 = cov.coboundary(0).unwrap().embed(total.clone()).unwrap();
        let d1 = cov.coboundary(1).unwrap().embed(total.clone()).unwrap();
        let d = d0.add(&d1).unwrap();
        let dd = d.compose(&d).unwrap();
        // d∘d vanishes on exact rows
        let z = *cov.group();
        for ((g, _), b) in dd.blocks() {
            assert!(!dd.exactness().covers_row(z.box_norm(cov.window().tile(g))) || b.amax() == 0.0);
        }
        let dirac = d.add(&d.adjoint()).unwrap();
        assert!(dirac.asymmetry().unwrap() <= 1e-12);
        let sq = dirac.compose(&dirac).unwrap();
        for (k1, k2) in [(0usize, 1usize), (1, 2), (0, 2), (1, 0)] {
            let off = sq
                .restrict(k1, k2, cov.space(k1).clone(), cov.space(k2).clone())
                .unwrap();
            for ((g, _), b) in off.blocks() {
                assert!(!off.exactness().covers_row(z.box_norm(cov.window().tile(g))) || b.amax() == 0.0);
            }
        }
    }

    #[test]
    fn dump_format() {
        let cov = assemble_cover(&BaseComplex::circle(1).unwrap(), GroupModel::lattice(1).unwrap(), 1).unwrap();
        let d = cov.coboundary(0).unwrap();
        let text = d.dump();
        let first: Vec<&str> = text.lines().take(2).collect();
        assert_eq!(first[0], "blk 0 -1 -1 1 1");
        assert_eq!(first[1], "-1.0000000000000000e0");
    }
}
