//! Deck groups: the lattice `Z^d` and the cyclic group `Z/N`.
//!
//! Elements carry integer coordinates; the word metric is taken with respect
//! to the standard generators (`±e_i` on the lattice, `±1` on the cycle).
//! Følner sets are centered max-norm boxes, and the averaging ideal is only
//! ever probed through box averages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Lattice { rank: usize },
    Cyclic { order: u64 },
}

/// An element of the deck group. Lattice elements hold `rank` coordinates,
/// cyclic elements a single residue in `0..order`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(Vec<i64>);

impl GroupElement {
    pub fn coords(&self) -> &[i64] {
        &self.0
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupModel {
    kind: GroupKind,
}

impl GroupModel {
    pub fn lattice(rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Precondition("lattice rank must be >= 1".into()));
        }
        Ok(Self { kind: GroupKind::Lattice { rank } })
    }

    pub fn cyclic(order: u64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Precondition("cyclic order must be >= 1".into()));
        }
        Ok(Self { kind: GroupKind::Cyclic { order } })
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.kind, GroupKind::Cyclic { .. })
    }

    /// Number of coordinates of an element.
    pub fn coord_len(&self) -> usize {
        match self.kind {
            GroupKind::Lattice { rank } => rank,
            GroupKind::Cyclic { .. } => 1,
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement(vec![0; self.coord_len()])
    }

    /// Builds an element, reducing residues for the cyclic group.
    pub fn element(&self, coords: &[i64]) -> Result<GroupElement> {
        match self.kind {
            GroupKind::Lattice { rank } => {
                if coords.len() != rank {
                    return Err(Error::GroupMismatch(format!(
                        "expected {rank} coordinates, got {}",
                        coords.len()
                    )));
                }
                Ok(GroupElement(coords.to_vec()))
            }
            GroupKind::Cyclic { order } => {
                if coords.len() != 1 {
                    return Err(Error::GroupMismatch(format!(
                        "cyclic element takes one residue, got {} coordinates",
                        coords.len()
                    )));
                }
                Ok(GroupElement(vec![coords[0].rem_euclid(order as i64)]))
            }
        }
    }

    /// Image of a deck offset of the base complex in this group. Lattice
    /// offsets must match the rank; cyclic groups reduce `sum(offset) mod N`.
    pub fn reduce_offset(&self, offset: &[i64]) -> Result<GroupElement> {
        match self.kind {
            GroupKind::Lattice { .. } => self.element(offset),
            GroupKind::Cyclic { .. } => self.element(&[offset.iter().sum()]),
        }
    }

    fn check(&self, g: &GroupElement) -> Result<()> {
        let ok = match self.kind {
            GroupKind::Lattice { rank } => g.0.len() == rank,
            GroupKind::Cyclic { order } => g.0.len() == 1 && (0..order as i64).contains(&g.0[0]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::GroupMismatch(format!("{g} is not an element of {self}")))
        }
    }

    pub fn compose(&self, g: &GroupElement, h: &GroupElement) -> GroupElement {
        let coords: Vec<i64> = g.0.iter().zip(&h.0).map(|(a, b)| a + b).collect();
        self.normalize(coords)
    }

    pub fn inverse(&self, g: &GroupElement) -> GroupElement {
        self.normalize(g.0.iter().map(|a| -a).collect())
    }

    /// `g^{-1} h`, i.e. the offset carrying `g` to `h`.
    pub fn difference(&self, g: &GroupElement, h: &GroupElement) -> GroupElement {
        self.normalize(g.0.iter().zip(&h.0).map(|(a, b)| b - a).collect())
    }

    fn normalize(&self, mut coords: Vec<i64>) -> GroupElement {
        if let GroupKind::Cyclic { order } = self.kind {
            coords[0] = coords[0].rem_euclid(order as i64);
        }
        GroupElement(coords)
    }

    /// Word length with respect to the standard symmetric generators.
    pub fn word_norm(&self, g: &GroupElement) -> u64 {
        match self.kind {
            GroupKind::Lattice { .. } => g.0.iter().map(|c| c.unsigned_abs()).sum(),
            GroupKind::Cyclic { order } => {
                let r = g.0[0].rem_euclid(order as i64) as u64;
                r.min(order - r)
            }
        }
    }

    pub fn word_distance(&self, g: &GroupElement, h: &GroupElement) -> Result<u64> {
        self.check(g)?;
        self.check(h)?;
        Ok(self.word_norm(&self.difference(g, h)))
    }

    /// Max-norm used for windows and Følner boxes. On the cyclic group this
    /// is the word norm.
    pub fn box_norm(&self, g: &GroupElement) -> u64 {
        match self.kind {
            GroupKind::Lattice { .. } => g.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0),
            GroupKind::Cyclic { .. } => self.word_norm(g),
        }
    }

    /// All elements of max-norm at most `radius`, in lexicographic order.
    /// For the cyclic group this is the whole group regardless of radius.
    pub fn box_members(&self, radius: u64) -> Vec<GroupElement> {
        match self.kind {
            GroupKind::Lattice { rank } => {
                let r = radius as i64;
                let side = (2 * radius + 1) as usize;
                let total = side.pow(rank as u32);
                let mut out = Vec::with_capacity(total);
                let mut cur = vec![-r; rank];
                loop {
                    out.push(GroupElement(cur.clone()));
                    let mut i = rank;
                    loop {
                        if i == 0 {
                            return out;
                        }
                        i -= 1;
                        if cur[i] < r {
                            cur[i] += 1;
                            break;
                        }
                        cur[i] = -r;
                    }
                }
            }
            GroupKind::Cyclic { order } => (0..order as i64).map(|r| GroupElement(vec![r])).collect(),
        }
    }

    /// Ball `G_m` of word radius `m`, lexicographic.
    pub fn ball(&self, m: u64) -> Vec<GroupElement> {
        self.box_members(m)
            .into_iter()
            .filter(|g| self.word_norm(g) <= m)
            .collect()
    }

    /// `|G_m|`, closed form for the lattice.
    pub fn ball_size(&self, m: u64) -> u128 {
        match self.kind {
            GroupKind::Lattice { rank } => {
                // sum_i 2^i C(d,i) C(m,i)
                (0..=rank as u64)
                    .map(|i| (1u128 << i) * binomial(rank as u64, i) * binomial(m, i))
                    .sum()
            }
            GroupKind::Cyclic { order } => (2 * m as u128 + 1).min(order as u128),
        }
    }

    pub fn generators(&self) -> Vec<GroupElement> {
        match self.kind {
            GroupKind::Lattice { rank } => (0..rank)
                .flat_map(|i| {
                    [1i64, -1].into_iter().map(move |s| {
                        let mut c = vec![0; rank];
                        c[i] = s;
                        GroupElement(c)
                    })
                })
                .collect(),
            GroupKind::Cyclic { order } => {
                let mut v = vec![self.normalize(vec![1])];
                if order > 2 {
                    v.push(self.normalize(vec![-1]));
                }
                v
            }
        }
    }

    pub fn folner_box(&self, k: u64) -> FolnerBox {
        FolnerBox { k, members: self.box_members(k) }
    }
}

impl fmt::Display for GroupModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            GroupKind::Lattice { rank } => write!(f, "Z^{rank}"),
            GroupKind::Cyclic { order } => write!(f, "Z/{order}"),
        }
    }
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// A Følner box `F_k`: max-norm ball of radius `k` (the whole group when cyclic).
#[derive(Clone, Debug)]
pub struct FolnerBox {
    pub k: u64,
    pub members: Vec<GroupElement>,
}

impl FolnerBox {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `|F △ gF| / |F|`, computed by direct set comparison.
    pub fn boundary_ratio(&self, group: &GroupModel, g: &GroupElement) -> f64 {
        let own: BTreeSet<&GroupElement> = self.members.iter().collect();
        let shifted: BTreeSet<GroupElement> =
            self.members.iter().map(|h| group.compose(g, h)).collect();
        let outside = shifted.iter().filter(|h| !own.contains(h)).count();
        let missing = self.members.iter().filter(|h| !shifted.contains(*h)).count();
        (outside + missing) as f64 / self.members.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Domain {
    /// Defined on all of G; values outside the stored map equal the default.
    Everywhere,
    /// Defined only on the listed elements.
    Window(BTreeSet<GroupElement>),
}

/// A bounded function `G -> R` known on a window.
#[derive(Clone, Debug, PartialEq)]
pub struct TileFunction {
    group: GroupModel,
    domain: Domain,
    values: BTreeMap<GroupElement, f64>,
    default: f64,
}

impl TileFunction {
    pub fn constant(group: GroupModel, value: f64) -> Self {
        Self { group, domain: Domain::Everywhere, values: BTreeMap::new(), default: value }
    }

    /// A function vanishing outside the given finite set of points.
    pub fn finitely_supported(
        group: GroupModel,
        values: impl IntoIterator<Item = (GroupElement, f64)>,
    ) -> Self {
        Self {
            group,
            domain: Domain::Everywhere,
            values: values.into_iter().collect(),
            default: 0.0,
        }
    }

    /// A function known exactly on `window` (given by its values there).
    pub fn on_window(
        group: GroupModel,
        values: impl IntoIterator<Item = (GroupElement, f64)>,
    ) -> Self {
        let values: BTreeMap<GroupElement, f64> = values.into_iter().collect();
        let window = values.keys().cloned().collect();
        Self { group, domain: Domain::Window(window), values, default: 0.0 }
    }

    pub fn group(&self) -> &GroupModel {
        &self.group
    }

    pub fn covers(&self, g: &GroupElement) -> bool {
        match &self.domain {
            Domain::Everywhere => true,
            Domain::Window(w) => w.contains(g),
        }
    }

    pub fn eval(&self, g: &GroupElement) -> f64 {
        self.values.get(g).copied().unwrap_or(self.default)
    }

    /// Stored points (the window, or the explicit support when defined everywhere).
    pub fn points(&self) -> impl Iterator<Item = (&GroupElement, f64)> {
        self.values.iter().map(|(g, v)| (g, *v))
    }

    pub fn is_everywhere(&self) -> bool {
        self.domain == Domain::Everywhere
    }

    pub fn sup_norm(&self) -> f64 {
        let stored = self.values.values().fold(0.0f64, |m, v| m.max(v.abs()));
        match self.domain {
            Domain::Everywhere => stored.max(self.default.abs()),
            Domain::Window(_) => stored,
        }
    }

    /// Pointwise combination on the common domain.
    pub fn zip_with(&self, other: &TileFunction, op: impl Fn(f64, f64) -> f64) -> Result<TileFunction> {
        if self.group != other.group {
            return Err(Error::GroupMismatch(format!("{} vs {}", self.group, other.group)));
        }
        let (domain, keys): (Domain, BTreeSet<GroupElement>) = match (&self.domain, &other.domain) {
            (Domain::Everywhere, Domain::Everywhere) => (
                Domain::Everywhere,
                self.values.keys().chain(other.values.keys()).cloned().collect(),
            ),
            (Domain::Window(w), Domain::Everywhere) | (Domain::Everywhere, Domain::Window(w)) => {
                (Domain::Window(w.clone()), w.clone())
            }
            (Domain::Window(a), Domain::Window(b)) => {
                let w: BTreeSet<_> = a.intersection(b).cloned().collect();
                (Domain::Window(w.clone()), w)
            }
        };
        let values = keys
            .into_iter()
            .map(|g| {
                let v = op(self.eval(&g), other.eval(&g));
                (g, v)
            })
            .collect();
        Ok(TileFunction { group: self.group, domain, values, default: op(self.default, other.default) })
    }

    pub fn sub(&self, other: &TileFunction) -> Result<TileFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &TileFunction) -> Result<TileFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> TileFunction {
        let mut out = self.clone();
        out.values.values_mut().for_each(|v| *v *= c);
        out.default *= c;
        out
    }

    /// Elements where the function is nonzero, provided it is finitely supported.
    pub fn finite_support(&self) -> Result<Vec<GroupElement>> {
        if self.group.is_finite() {
            return Ok(self.group.box_members(0).into_iter().filter(|g| self.eval(g) != 0.0).collect());
        }
        match self.domain {
            Domain::Everywhere if self.default == 0.0 => {
                Ok(self.values.iter().filter(|(_, v)| **v != 0.0).map(|(g, _)| g.clone()).collect())
            }
            Domain::Everywhere => Err(Error::Precondition(format!(
                "function takes the value {} at infinitely many points",
                self.default
            ))),
            Domain::Window(_) => Err(Error::Precondition(
                "function is only known on a finite window; finite support cannot be certified".into(),
            )),
        }
    }
}

/// `(1/|F|) sum_{g in F} phi(g)`, summed in lexicographic order.
pub fn folner_average(phi: &TileFunction, folner: &FolnerBox) -> Result<f64> {
    if let Some(g) = folner.members.iter().find(|g| !phi.covers(g)) {
        return Err(Error::WindowTooSmall {
            what: format!("Følner box F_{} (element {g} uncovered)", folner.k),
            required_radius: folner.k as i64,
        });
    }
    let sum: f64 = folner.members.iter().map(|g| phi.eval(g)).sum();
    Ok(sum / folner.len() as f64)
}

/// Evidence collected by [`geq_mod_ideal`].
#[derive(Clone, Debug)]
pub struct GeqReport {
    pub averages: Vec<(u64, f64)>,
    /// Exponent `p` in `|avg_k| ~ C |F_k|^{-p}`, fitted over nonzero averages.
    pub decay_rate: Option<f64>,
    pub pass: bool,
}

/// Operational test of `phi >= psi mod I`: every box average of `phi - psi`
/// over `k_range` is at least `-tol`, and the last one at least `-tol/2`.
pub fn geq_mod_ideal(
    phi: &TileFunction,
    psi: &TileFunction,
    k_range: RangeInclusive<u64>,
    tol: f64,
) -> Result<GeqReport> {
    let diff = phi.sub(psi)?;
    let averages = k_range
        .map(|k| Ok((k, folner_average(&diff, &phi.group.folner_box(k))?)))
        .collect::<Result<Vec<_>>>()?;
    let pass = !averages.is_empty()
        && averages.iter().all(|(_, a)| *a >= -tol)
        && averages.last().map(|(_, a)| *a >= -tol / 2.0).unwrap_or(false);
    let decay_rate = fit_box_decay(&phi.group, &averages);
    Ok(GeqReport { averages, decay_rate, pass })
}

fn fit_box_decay(group: &GroupModel, averages: &[(u64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = averages
        .iter()
        .filter(|(_, a)| *a != 0.0)
        .map(|(k, a)| ((group.folner_box(*k).len() as f64).ln(), a.abs().ln()))
        .collect();
    let (slope, _, _) = crate::stats::linear_fit(&pts)?;
    Some(-slope)
}

#[derive(Clone, Debug)]
pub struct VanishingReport {
    /// `(k, average, bound)` triples.
    pub rows: Vec<(u64, f64, f64)>,
    pub pass: bool,
}

/// Checks the box averages of a finitely supported function against
/// `||phi||_inf * |supp| / |F_k|`.
pub fn finitely_supported_vanishing_check(
    phi: &TileFunction,
    k_range: RangeInclusive<u64>,
) -> Result<VanishingReport> {
    let support = phi.finite_support()?;
    let sup = phi.sup_norm();
    let mut rows = Vec::new();
    for k in k_range {
        let folner = phi.group.folner_box(k);
        let avg = folner_average(phi, &folner)?;
        let bound = sup * support.len() as f64 / folner.len() as f64;
        rows.push((k, avg, bound));
    }
    let pass = rows.iter().all(|(_, a, b)| a.abs() <= b * (1.0 + 1e-12));
    Ok(VanishingReport { rows, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z1() -> GroupModel {
        GroupModel::lattice(1).unwrap()
    }

    #[test]
    fn word_distance_examples() {
        let z2 = GroupModel::lattice(2).unwrap();
        let a = z2.element(&[0, 0]).unwrap();
        let b = z2.element(&[3, -1]).unwrap();
        assert_eq!(z2.word_distance(&a, &b).unwrap(), 4);
        assert_eq!(z2.word_distance(&b, &b).unwrap(), 0);

        let c5 = GroupModel::cyclic(5).unwrap();
        let one = c5.element(&[1]).unwrap();
        let four = c5.element(&[4]).unwrap();
        assert_eq!(c5.word_distance(&one, &four).unwrap(), 2);
    }

    #[test]
    fn word_distance_rejects_mixed_groups() {
        let z2 = GroupModel::lattice(2).unwrap();
        let c5 = GroupModel::cyclic(5).unwrap();
        let g = c5.element(&[1]).unwrap();
        assert!(matches!(z2.word_distance(&z2.identity(), &g), Err(Error::GroupMismatch(_))));
    }

    #[test]
    fn inverse_negates() {
        let z3 = GroupModel::lattice(3).unwrap();
        let g = z3.element(&[1, -2, 5]).unwrap();
        assert_eq!(z3.inverse(&g).coords(), &[-1, 2, -5]);
        assert_eq!(z3.compose(&g, &z3.inverse(&g)), z3.identity());
        let c7 = GroupModel::cyclic(7).unwrap();
        let h = c7.element(&[3]).unwrap();
        assert_eq!(c7.inverse(&h).coords(), &[4]);
    }

    #[test]
    fn box_members_are_lexicographic() {
        let z2 = GroupModel::lattice(2).unwrap();
        let m = z2.box_members(1);
        assert_eq!(m.len(), 9);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m[0].coords(), &[-1, -1]);
    }

    #[test]
    fn ball_sizes_match_enumeration() {
        for d in 1..=3 {
            let g = GroupModel::lattice(d).unwrap();
            for m in 0..=6 {
                assert_eq!(g.ball(m).len() as u128, g.ball_size(m), "d={d} m={m}");
            }
        }
    }

    #[test]
    fn folner_average_examples() {
        let g = z1();
        let one = TileFunction::constant(g, 1.0);
        assert_eq!(folner_average(&one, &g.folner_box(7)).unwrap(), 1.0);

        let delta = TileFunction::finitely_supported(g, [(g.identity(), 1.0)]);
        for k in 1..6 {
            let avg = folner_average(&delta, &g.folner_box(k)).unwrap();
            assert!((avg - 1.0 / (2 * k + 1) as f64).abs() < 1e-15);
        }

        let alt = TileFunction::on_window(
            g,
            (-2..=2).map(|x| (g.element(&[x]).unwrap(), if x % 2 == 0 { 1.0 } else { -1.0 })),
        );
        let avg = folner_average(&alt, &g.folner_box(2)).unwrap();
        assert!((avg - 0.2).abs() < 1e-15);
    }

    #[test]
    fn folner_average_window_error_names_radius() {
        let g = z1();
        let phi = TileFunction::on_window(g, (-2..=2).map(|x| (g.element(&[x]).unwrap(), 1.0)));
        match folner_average(&phi, &g.folner_box(3)) {
            Err(Error::WindowTooSmall { required_radius, .. }) => assert_eq!(required_radius, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geq_examples() {
        let g = z1();
        let one = TileFunction::constant(g, 1.0);
        let zero = TileFunction::constant(g, 0.0);
        assert!(geq_mod_ideal(&one, &zero, 1..=5, 1e-9).unwrap().pass);
        assert!(!geq_mod_ideal(&zero, &one, 1..=5, 1e-9).unwrap().pass);

        let delta = TileFunction::finitely_supported(g, [(g.identity(), 1.0)]);
        let rep = geq_mod_ideal(&delta, &zero, 10..=40, 1e-6).unwrap();
        assert!(rep.pass);
        assert!(rep.averages.windows(2).all(|w| w[1].1 < w[0].1));
        // averages are exactly 1/(2k+1): decay rate 1 in |F_k|
        assert!((rep.decay_rate.unwrap() - 1.0).abs() < 1e-9);
        // and the reverse direction also holds up to the vanishing boundary term
        assert!(geq_mod_ideal(&zero, &delta, 10..=40, 0.05).unwrap().pass);
    }

    #[test]
    fn vanishing_check_examples() {
        let g = z1();
        let delta = TileFunction::finitely_supported(g, [(g.identity(), 1.0)]);
        let rep = finitely_supported_vanishing_check(&delta, 1..=20).unwrap();
        assert!(rep.pass);
        assert!(rep.rows.iter().all(|(_, a, b)| a == b));

        let z2 = GroupModel::lattice(2).unwrap();
        let phi = TileFunction::finitely_supported(
            z2,
            [
                (z2.element(&[0, 0]).unwrap(), 1.0),
                (z2.element(&[1, -1]).unwrap(), -2.0),
                (z2.element(&[3, 2]).unwrap(), 5.0),
            ],
        );
        let rep = finitely_supported_vanishing_check(&phi, 1..=10).unwrap();
        assert!(rep.pass);
        // F_1 sees 1 - 2 = -1 over 9 tiles; F_3 sees all three points.
        assert!((rep.rows[0].1 + 1.0 / 9.0).abs() < 1e-15);
        assert!((rep.rows[2].1 - 4.0 / 49.0).abs() < 1e-15);

        let one = TileFunction::constant(g, 1.0);
        assert!(matches!(
            finitely_supported_vanishing_check(&one, 1..=3),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn folner_ratio_is_exact_and_decreasing() {
        for d in 1..=3usize {
            let g = GroupModel::lattice(d).unwrap();
            let mut prev = f64::INFINITY;
            for k in 1..=(if d == 3 { 5 } else { 12 }) {
                let f = g.folner_box(k);
                for gen in g.generators() {
                    let r = f.boundary_ratio(&g, &gen);
                    // two faces of (2k+1)^{d-1} tiles each
                    let expected = 2.0 * (2 * k + 1).pow(d as u32 - 1) as f64 / f.len() as f64;
                    assert!((r - expected).abs() < 1e-15);
                    assert!((r - 2.0 / (2 * k + 1) as f64).abs() < 1e-15);
                }
                let r = f.boundary_ratio(&g, &g.generators()[0]);
                assert!(r < prev);
                prev = r;
            }
        }
    }

    #[test]
    fn growth_bound_holds() {
        for d in 1..=4usize {
            let g = GroupModel::lattice(d).unwrap();
            let c = d as f64 * 3f64.ln();
            for m in 0..=50u64 {
                assert!((g.ball_size(m) as f64) <= (c * m as f64).exp() * (1.0 + 1e-12));
            }
        }
    }
}
