//! Finite base CW complexes with deck-offset labels, their covers over a
//! finite window of tiles, and the coboundary operator.
//!
//! A base incidence `(σ, τ, s, o)` says that the boundary of the lift
//! `(σ, g)` contains `s · (τ, g·o)`. The fundamental domain `K` is the set of
//! lifts at the identity, so tile `gK` holds the cells `(σ, g)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupModel};
use crate::operator::{Exactness, Grade, TileSpace, WindowedOperator};

/// Default refusal threshold for [`assemble_cover`].
pub const DEFAULT_CELL_CAP: usize = 20_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Incidence {
    /// Degree of the coface `cell`; `face` has degree `degree - 1`.
    pub degree: usize,
    pub cell: usize,
    pub face: usize,
    pub sign: i32,
    pub offset: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseComplex {
    weights: Vec<Vec<f64>>,
    incidences: Vec<Incidence>,
    offset_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseSpec {
    Circle { p: usize },
    Torus { p: usize, q: usize },
    File(std::path::PathBuf),
}

pub fn build_base(spec: &BaseSpec) -> Result<BaseComplex> {
    match spec {
        BaseSpec::Circle { p } => BaseComplex::circle(*p),
        BaseSpec::Torus { p, q } => BaseComplex::torus(*p, *q),
        BaseSpec::File(path) => BaseComplex::from_file(path),
    }
}

impl BaseComplex {
    /// `p` vertices and `p` edges; the last edge closes up with deck offset `+1`.
    pub fn circle(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidComplex("circle needs p >= 1".into()));
        }
        let mut inc = Vec::with_capacity(2 * p);
        for j in 0..p {
            let (next, off) = if j + 1 == p { (0, 1) } else { (j + 1, 0) };
            inc.push(Incidence { degree: 1, cell: j, face: j, sign: -1, offset: vec![0] });
            inc.push(Incidence { degree: 1, cell: j, face: next, sign: 1, offset: vec![off] });
        }
        let base = Self { weights: vec![vec![1.0; p], vec![1.0; p]], incidences: inc, offset_rank: 1 };
        base.check_boundary_squared()?;
        Ok(base)
    }

    /// Square-cell structure on a `p × q` grid, wrapping with offsets `e_1`, `e_2`.
    pub fn torus(p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::InvalidComplex("torus needs p, q >= 1".into()));
        }
        let vert = |i: usize, j: usize| i + p * j;
        let horiz = |i: usize, j: usize| i + p * j;
        let vertical = |i: usize, j: usize| p * q + i + p * j;
        let mut inc = Vec::new();
        for j in 0..q {
            for i in 0..p {
                let (ni, ox) = if i + 1 == p { (0, 1) } else { (i + 1, 0) };
                let (nj, oy) = if j + 1 == q { (0, 1) } else { (j + 1, 0) };
                // horizontal edge (i,j) -> (i+1,j)
                inc.push(Incidence { degree: 1, cell: horiz(i, j), face: vert(i, j), sign: -1, offset: vec![0, 0] });
                inc.push(Incidence { degree: 1, cell: horiz(i, j), face: vert(ni, j), sign: 1, offset: vec![ox, 0] });
                // vertical edge (i,j) -> (i,j+1)
                inc.push(Incidence { degree: 1, cell: vertical(i, j), face: vert(i, j), sign: -1, offset: vec![0, 0] });
                inc.push(Incidence { degree: 1, cell: vertical(i, j), face: vert(i, nj), sign: 1, offset: vec![0, oy] });
                // square: bottom + right - top - left
                let f = i + p * j;
                inc.push(Incidence { degree: 2, cell: f, face: horiz(i, j), sign: 1, offset: vec![0, 0] });
                inc.push(Incidence { degree: 2, cell: f, face: vertical(ni, j), sign: 1, offset: vec![ox, 0] });
                inc.push(Incidence { degree: 2, cell: f, face: horiz(i, nj), sign: -1, offset: vec![0, oy] });
                inc.push(Incidence { degree: 2, cell: f, face: vertical(i, j), sign: -1, offset: vec![0, 0] });
            }
        }
        let base = Self {
            weights: vec![vec![1.0; p * q], vec![1.0; 2 * p * q], vec![1.0; p * q]],
            incidences: inc,
            offset_rank: 2,
        };
        base.check_boundary_squared()?;
        Ok(base)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses the line-oriented complex format:
    ///
    /// ```text
    /// # comment
    /// cell <k> <id> <weight>
    /// bnd <k> <id_to> <id_from> <sign> <offset...>
    /// ```
    ///
    /// `id_to` is a `k`-cell, `id_from` a `(k-1)`-cell. Cell ids in each
    /// degree must be `0..m_k`. Parsing stops at the first violation.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { path: origin.to_string(), line, message };
        let mut cells: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        let mut bnd: Vec<(usize, Incidence)> = Vec::new();
        let mut offset_rank: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let int = |s: &str, what: &str| -> Result<i64> {
                s.parse::<i64>().map_err(|_| err(line_no, format!("{what}: expected integer, got '{s}'")))
            };
            let idx = |s: &str, what: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| err(line_no, format!("{what}: expected index, got '{s}'")))
            };
            match fields[0] {
                "cell" => {
                    if fields.len() != 4 {
                        return Err(err(line_no, "cell record takes: cell k id weight".into()));
                    }
                    let k = idx(fields[1], "degree")?;
                    let id = idx(fields[2], "cell id")?;
                    let w: f64 = fields[3]
                        .parse()
                        .map_err(|_| err(line_no, format!("weight: expected real, got '{}'", fields[3])))?;
                    if !(w.is_finite() && w > 0.0) {
                        return Err(err(line_no, format!("weight must be positive and finite, got {w}")));
                    }
                    if cells.entry(k).or_default().insert(id, w).is_some() {
                        return Err(err(line_no, format!("duplicate cell {k}:{id}")));
                    }
                }
                "bnd" => {
                    if fields.len() < 6 {
                        return Err(err(line_no, "bnd record takes: bnd k id_to id_from sign offset...".into()));
                    }
                    let k = idx(fields[1], "degree")?;
                    if k == 0 {
                        return Err(err(line_no, "bnd degree must be >= 1".into()));
                    }
                    let cell = idx(fields[2], "id_to")?;
                    let face = idx(fields[3], "id_from")?;
                    let sign = int(fields[4], "sign")?;
                    if sign != 1 && sign != -1 {
                        return Err(err(line_no, format!("sign must be +-1, got {sign}")));
                    }
                    let offset = fields[5..].iter().map(|s| int(s, "offset")).collect::<Result<Vec<_>>>()?;
                    match offset_rank {
                        None => offset_rank = Some(offset.len()),
                        Some(r) if r != offset.len() => {
                            return Err(err(line_no, format!("offset has {} entries, expected {r}", offset.len())))
                        }
                        _ => {}
                    }
                    let in_cells = |deg: usize, id: usize| cells.get(&deg).is_some_and(|m| m.contains_key(&id));
                    if !in_cells(k, cell) {
                        return Err(err(line_no, format!("dangling incidence: cell {k}:{cell} not declared")));
                    }
                    if !in_cells(k - 1, face) {
                        return Err(err(line_no, format!("dangling incidence: cell {}:{face} not declared", k - 1)));
                    }
                    bnd.push((line_no, Incidence { degree: k, cell, face, sign: sign as i32, offset }));
                }
                other => return Err(err(line_no, format!("unknown record '{other}'"))),
            }
        }
        let top = *cells.keys().next_back().ok_or_else(|| err(0, "no cells declared".into()))?;
        let mut weights = Vec::with_capacity(top + 1);
        for k in 0..=top {
            let m = cells.remove(&k).unwrap_or_default();
            for (expected, (&id, _)) in m.iter().enumerate() {
                if id != expected {
                    return Err(err(0, format!("degree {k} cell ids must be 0..{}, missing {expected}", m.len())));
                }
            }
            weights.push(m.into_values().collect());
        }
        let base = Self {
            weights,
            incidences: bnd.into_iter().map(|(_, i)| i).collect(),
            offset_rank: offset_rank.unwrap_or(1),
        };
        base.check_boundary_squared()?;
        Ok(base)
    }

    /// Serializes back into the text format read by [`BaseComplex::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, ws) in self.weights.iter().enumerate() {
            for (id, w) in ws.iter().enumerate() {
                let _ = writeln!(s, "cell {k} {id} {w:?}");
            }
        }
        for inc in &self.incidences {
            let _ = write!(s, "bnd {} {} {} {}", inc.degree, inc.cell, inc.face, inc.sign);
            for o in &inc.offset {
                let _ = write!(s, " {o}");
            }
            s.push('\n');
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        self.weights.iter().map(Vec::len).collect()
    }

    pub fn count(&self, k: usize) -> usize {
        self.weights.get(k).map_or(0, Vec::len)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.counts()
            .iter()
            .enumerate()
            .map(|(k, m)| if k % 2 == 0 { *m as i64 } else { -(*m as i64) })
            .sum()
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn set_weights(&mut self, k: usize, w: Vec<f64>) -> Result<()> {
        if k > self.dim() || w.len() != self.count(k) || w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidComplex(format!("bad weight vector for degree {k}")));
        }
        self.weights[k] = w;
        Ok(())
    }

    pub fn incidences(&self) -> &[Incidence] {
        &self.incidences
    }

    pub fn offset_rank(&self) -> usize {
        self.offset_rank
    }

    /// `∂∘∂ = 0` on the universal abelian cover `Z^r`.
    pub fn check_boundary_squared(&self) -> Result<()> {
        self.boundary_squared_with(|o| o.to_vec())
    }

    fn boundary_squared_with<K: Ord + Clone + std::fmt::Debug>(&self, reduce: impl Fn(&[i64]) -> K) -> Result<()> {
        for inc in &self.incidences {
            if inc.offset.len() != self.offset_rank {
                return Err(Error::InvalidComplex("inconsistent offset rank".into()));
            }
            if inc.face >= self.count(inc.degree - 1) || inc.cell >= self.count(inc.degree) {
                return Err(Error::InvalidComplex(format!("dangling incidence {inc:?}")));
            }
        }
        let mut by_cell: HashMap<(usize, usize), Vec<&Incidence>> = HashMap::new();
        for inc in &self.incidences {
            by_cell.entry((inc.degree, inc.cell)).or_default().push(inc);
        }
        for k in 2..=self.dim() {
            for c in 0..self.count(k) {
                let mut acc: BTreeMap<(usize, K), i64> = BTreeMap::new();
                for outer in by_cell.get(&(k, c)).map(Vec::as_slice).unwrap_or(&[]) {
                    for inner in by_cell.get(&(k - 1, outer.face)).map(Vec::as_slice).unwrap_or(&[]) {
                        let off: Vec<i64> = outer.offset.iter().zip(&inner.offset).map(|(a, b)| a + b).collect();
                        *acc.entry((inner.face, reduce(&off))).or_default() += (outer.sign * inner.sign) as i64;
                    }
                }
                if let Some(((face, off), v)) = acc.iter().find(|(_, v)| **v != 0) {
                    return Err(Error::InvalidComplex(format!(
                        "boundary of boundary nonzero: cell {k}:{c} hits {}:{face} at {off:?} with coefficient {v}",
                        k - 2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The finite set of tiles materialized from an infinite (or finite) cover.
#[derive(Debug, PartialEq, Eq)]
pub struct TileWindow {
    group: GroupModel,
    radius: u64,
    tiles: Vec<GroupElement>,
    index: HashMap<GroupElement, usize>,
}

impl TileWindow {
    /// All tiles of max-norm at most `radius`; the whole group when finite.
    pub fn new(group: GroupModel, radius: u64) -> Self {
        let tiles = group.box_members(radius);
        let index = tiles.iter().cloned().enumerate().map(|(i, g)| (g, i)).collect();
        Self { group, radius, tiles, index }
    }

    pub fn group(&self) -> &GroupModel {
        &self.group
    }

    pub fn radius(&self) -> u64 {
        self.radius
    }

    pub fn tiles(&self) -> &[GroupElement] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn index_of(&self, g: &GroupElement) -> Option<usize> {
        self.index.get(g).copied()
    }

    pub fn tile(&self, i: usize) -> &GroupElement {
        &self.tiles[i]
    }

    /// Exactness of an operator whose rows need offsets up to box-norm `reach`.
    pub fn exactness_for_reach(&self, reach: u64) -> Exactness {
        if self.group.is_finite() {
            Exactness::Everywhere
        } else {
            Exactness::Within(self.radius as i64 - reach as i64)
        }
    }
}

/// A cell of the cover: base cell `cell` of degree `degree` in tile `tile`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoverCell {
    pub degree: usize,
    pub cell: usize,
    pub tile: GroupElement,
}

#[derive(Clone, Debug)]
pub struct CoverComplex {
    base: Arc<BaseComplex>,
    window: Arc<TileWindow>,
    spaces: Vec<Arc<TileSpace>>,
    total: Arc<TileSpace>,
    /// Reduced incidences `(degree, cell, face, sign, offset in G)`.
    reduced: Vec<(usize, usize, usize, f64, GroupElement)>,
    /// Max word length of a deck offset (propagation of d).
    offset_radius: u64,
    /// Max box-norm of a deck offset.
    offset_reach: u64,
}

/// Materializes all tiles `gK` with `|g|_∞ <= window_radius`.
pub fn assemble_cover(base: &BaseComplex, group: GroupModel, window_radius: u64) -> Result<CoverComplex> {
    assemble_cover_capped(base, group, window_radius, DEFAULT_CELL_CAP)
}

pub fn assemble_cover_capped(
    base: &BaseComplex,
    group: GroupModel,
    window_radius: u64,
    cap: usize,
) -> Result<CoverComplex> {
    if window_radius < 1 && !group.is_finite() {
        return Err(Error::Precondition("window_radius must be >= 1".into()));
    }
    if let crate::group::GroupKind::Lattice { rank } = group.kind() {
        if rank != base.offset_rank() {
            return Err(Error::GroupMismatch(format!(
                "base offsets have rank {} but group is {group}",
                base.offset_rank()
            )));
        }
    }
    let per_tile: usize = base.counts().iter().sum();
    let tiles = match group.kind() {
        crate::group::GroupKind::Lattice { rank } => (2 * window_radius as u128 + 1).pow(rank as u32),
        crate::group::GroupKind::Cyclic { order } => order as u128,
    };
    let cells = tiles.saturating_mul(per_tile as u128);
    if cells > cap as u128 {
        return Err(Error::CoverTooLarge { cells: cells.min(usize::MAX as u128) as usize, cap });
    }
    base.boundary_squared_with(|o| group.reduce_offset(o).expect("offset rank checked"))?;
    let window = Arc::new(TileWindow::new(group, window_radius));
    let spaces = (0..=base.dim())
        .map(|k| Arc::new(TileSpace::degree(k, base.weights(k).to_vec())))
        .collect::<Vec<_>>();
    let total = Arc::new(TileSpace::total(base.weights.clone()));
    let reduced = base
        .incidences()
        .iter()
        .map(|i| Ok((i.degree, i.cell, i.face, i.sign as f64, group.reduce_offset(&i.offset)?)))
        .collect::<Result<Vec<_>>>()?;
    let offset_radius = reduced.iter().map(|r| group.word_norm(&r.4)).max().unwrap_or(0);
    let offset_reach = reduced.iter().map(|r| group.box_norm(&r.4)).max().unwrap_or(0);
    Ok(CoverComplex {
        base: Arc::new(base.clone()),
        window,
        spaces,
        total,
        reduced,
        offset_radius,
        offset_reach,
    })
}

impl CoverComplex {
    pub fn base(&self) -> &BaseComplex {
        &self.base
    }

    pub fn group(&self) -> &GroupModel {
        self.window.group()
    }

    pub fn window(&self) -> &Arc<TileWindow> {
        &self.window
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn space(&self, k: usize) -> &Arc<TileSpace> {
        &self.spaces[k]
    }

    pub fn total_space(&self) -> &Arc<TileSpace> {
        &self.total
    }

    /// Propagation radius `r_0` of the coboundary.
    pub fn offset_radius(&self) -> u64 {
        self.offset_radius
    }

    pub fn offset_reach(&self) -> u64 {
        self.offset_reach
    }

    /// Propagation of the degree-`k` Laplacian read off the incidence
    /// pattern: two `k`-cells interact only through a shared face or coface.
    pub fn laplacian_reach(&self, k: usize) -> u64 {
        let mut shared: HashMap<(usize, usize, usize), Vec<&GroupElement>> = HashMap::new();
        for (deg, cell, face, _, o) in &self.reduced {
            if *deg == k + 1 {
                shared.entry((0, *deg, *cell)).or_default().push(o);
            } else if *deg == k {
                shared.entry((1, *deg, *face)).or_default().push(o);
            }
        }
        let mut reach = 0;
        for offsets in shared.values() {
            for a in offsets {
                for b in offsets {
                    reach = reach.max(self.group().word_norm(&self.group().difference(a, b)));
                }
            }
        }
        reach
    }

    pub fn cells(&self, k: usize) -> impl Iterator<Item = CoverCell> + '_ {
        self.window.tiles().iter().flat_map(move |g| {
            (0..self.base.count(k)).map(move |cell| CoverCell { degree: k, cell, tile: g.clone() })
        })
    }

    pub fn cell_count(&self) -> usize {
        self.window.len() * self.base.counts().iter().sum::<usize>()
    }

    /// Reduced incidences `(degree, cell, face, sign, offset)`.
    pub fn reduced_incidences(&self) -> &[(usize, usize, usize, f64, GroupElement)] {
        &self.reduced
    }

    /// Coboundary `d_k : C^k -> C^{k+1}` in the cell basis,
    /// `(d u)(σ, g) = Σ s · u(τ, g·o)`.
    pub fn coboundary(&self, k: usize) -> Result<WindowedOperator> {
        self.coboundary_with(k, |_, _, _, _| 1.0)
    }

    /// Coboundary with every entry for coface `(σ,g)` and face `(τ,h)`
    /// multiplied by `scale(σ, g, τ, h)`.
    pub fn coboundary_with(
        &self,
        k: usize,
        scale: impl Fn(usize, &GroupElement, usize, &GroupElement) -> f64,
    ) -> Result<WindowedOperator> {
        if k >= self.dim() {
            return Err(Error::DegreeMismatch(format!("no coboundary out of top degree {k}")));
        }
        let group = *self.group();
        let rows = self.base.count(k + 1);
        let cols = self.base.count(k);
        let mut blocks: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for (gi, g) in self.window.tiles().iter().enumerate() {
            for (deg, cell, face, sign, off) in &self.reduced {
                if *deg != k + 1 {
                    continue;
                }
                let h = group.compose(g, off);
                let Some(hi) = self.window.index_of(&h) else { continue };
                let blk = blocks.entry((gi, hi)).or_insert_with(|| DMatrix::zeros(rows, cols));
                blk[(*cell, *face)] += sign * scale(*cell, g, *face, &h);
            }
        }
        blocks.retain(|_, b| b.iter().any(|x| *x != 0.0));
        Ok(WindowedOperator::from_parts(
            self.window.clone(),
            self.spaces[k].clone(),
            self.spaces[k + 1].clone(),
            blocks,
            self.offset_radius,
            self.window.exactness_for_reach(self.offset_reach),
        ))
    }

    /// Identity on degree `k`, or on all degrees with `Grade::Total`.
    pub fn identity(&self, grade: Grade) -> WindowedOperator {
        let space = match grade {
            Grade::Degree(k) => self.spaces[k].clone(),
            Grade::Total => self.total.clone(),
        };
        WindowedOperator::identity(self.window.clone(), space)
    }
}
