//! Polynomial bound solver over a single magnitude symbol N, where
//! N >= max(1, |v|) for every entry value. Loops bounded by linear ranking
//! functions compose via the rule: K iterations, each growing magnitudes by
//! at most Delta, so inner loops run at entry magnitude M + K*Delta.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::graph::{self, Component};
use crate::interp::Valuation;
use crate::its::{Int, LinTerm, LocId, Rel, TransitionSystem, Var, VarId};
use crate::size_rel::{Dir, SizeAnalysis};

type Rat = BigRational;

/// Finitely supported polynomial in N with nonnegative coefficients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MagnitudePoly {
    pub coeffs: BTreeMap<usize, Rat>,
}

impl MagnitudePoly {
    pub fn zero() -> Self {
        MagnitudePoly { coeffs: BTreeMap::new() }
    }
    pub fn constant(c: Rat) -> Self {
        let mut m = MagnitudePoly::zero();
        if !c.is_zero() {
            m.coeffs.insert(0, c);
        }
        m
    }
    pub fn from_int(c: i64) -> Self {
        MagnitudePoly::constant(Rat::from_integer(BigInt::from(c)))
    }
    pub fn n() -> Self {
        let mut m = MagnitudePoly::zero();
        m.coeffs.insert(1, Rat::one());
        m
    }
    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (d, c) in &other.coeffs {
            *out.coeffs.entry(*d).or_insert_with(Rat::zero) += c.clone();
        }
        out.normalize();
        out
    }
    pub fn mul(&self, other: &Self) -> Self {
        let mut out = MagnitudePoly::zero();
        for (d1, c1) in &self.coeffs {
            for (d2, c2) in &other.coeffs {
                *out.coeffs.entry(d1 + d2).or_insert_with(Rat::zero) += c1 * c2;
            }
        }
        out.normalize();
        out
    }
    pub fn scale(&self, k: &Rat) -> Self {
        let mut out = MagnitudePoly::zero();
        for (d, c) in &self.coeffs {
            out.coeffs.insert(*d, c * k);
        }
        out.normalize();
        out
    }
    /// Coefficient-wise maximum; an upper bound of both for N >= 0.
    pub fn join(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (d, c) in &other.coeffs {
            let e = out.coeffs.entry(*d).or_insert_with(Rat::zero);
            if c > e {
                *e = c.clone();
            }
        }
        out
    }
    fn normalize(&mut self) {
        self.coeffs.retain(|_, c| !c.is_zero());
        debug_assert!(self.coeffs.values().all(|c| !c.is_negative()));
    }
    pub fn degree(&self) -> usize {
        self.coeffs.keys().max().copied().unwrap_or(0)
    }
    /// Ceiling of the polynomial value at N = n.
    pub fn eval(&self, n: &Int) -> Int {
        let mut acc = Rat::zero();
        for (d, c) in &self.coeffs {
            let mut p = Rat::one();
            for _ in 0..*d {
                p *= Rat::from_integer(n.clone());
            }
            acc += c * p;
        }
        acc.ceil().to_integer()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoundVal {
    Finite(MagnitudePoly),
    Infinite,
}

impl BoundVal {
    fn add(&self, other: &BoundVal) -> BoundVal {
        match (self, other) {
            (BoundVal::Finite(a), BoundVal::Finite(b)) => BoundVal::Finite(a.add(b)),
            _ => BoundVal::Infinite,
        }
    }
    fn mul(&self, other: &BoundVal) -> BoundVal {
        match (self, other) {
            (BoundVal::Finite(a), BoundVal::Finite(b)) => BoundVal::Finite(a.mul(b)),
            _ => BoundVal::Infinite,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bound {
    pub value: BoundVal,
    pub conditional: Option<Vec<crate::its::Atom>>,
}

impl Bound {
    pub fn infinite() -> Self {
        Bound { value: BoundVal::Infinite, conditional: None }
    }
}

/// Magnitude state: M bounds |v| for every direction-clean variable; a
/// dirty (v, dir) means v's value is unbounded in that direction.
#[derive(Clone, Debug)]
struct Mag {
    m: MagnitudePoly,
    dirty: BTreeSet<(VarId, Dir)>,
}

impl Mag {
    fn join(&self, other: &Mag) -> Mag {
        Mag {
            m: self.m.join(&other.m),
            dirty: self.dirty.union(&other.dirty).cloned().collect(),
        }
    }
    fn poisoned(&self, vars: &[VarId]) -> Mag {
        let mut dirty = self.dirty.clone();
        for v in vars {
            dirty.insert((v.clone(), Dir::Up));
            dirty.insert((v.clone(), Dir::Down));
        }
        Mag { m: self.m.clone(), dirty }
    }
}

/// Upper bound of a linear term's value at magnitude M, honoring directions:
/// positive coefficients need the variable bounded above, negative below.
fn poly_bound_dir(term: &LinTerm<Var>, mag: &Mag) -> Option<MagnitudePoly> {
    let mut out = MagnitudePoly::constant(Rat::from_integer(term.constant.abs()));
    for (v, c) in &term.coeffs {
        let need = if c > &Int::zero() { Dir::Up } else { Dir::Down };
        if mag.dirty.contains(&(v.id.clone(), need)) {
            return None;
        }
        let k = Rat::from_integer(c.abs());
        out = out.add(&mag.m.scale(&k));
    }
    Some(out)
}

/// Direction-aware dirtiness fixpoint: a (v, dir) is unclassified when its
/// growth term is missing or depends on an unclassified direction.
fn settle_dirty(
    growth: &BTreeMap<(VarId, Dir), Option<LinTerm<Var>>>,
    start: &BTreeSet<(VarId, Dir)>,
) -> BTreeSet<(VarId, Dir)> {
    let mut dirty = start.clone();
    loop {
        let mut changed = false;
        for ((v, dir), g) in growth {
            if dirty.contains(&(v.clone(), *dir)) {
                continue;
            }
            let bad = match g {
                None => true,
                Some(t) => t.coeffs.iter().any(|(w, c)| {
                    let need = if c > &Int::zero() { Dir::Up } else { Dir::Down };
                    dirty.contains(&(w.id.clone(), need))
                }),
            };
            if bad {
                dirty.insert((v.clone(), *dir));
                changed = true;
            }
        }
        if !changed {
            return dirty;
        }
    }
}

fn max_clean_growth(
    growth: &BTreeMap<(VarId, Dir), Option<LinTerm<Var>>>,
    dirty: &BTreeSet<(VarId, Dir)>,
    mag: &Mag,
) -> MagnitudePoly {
    let mut delta = MagnitudePoly::zero();
    let scoped = Mag { m: mag.m.clone(), dirty: dirty.clone() };
    for ((v, dir), g) in growth {
        if dirty.contains(&(v.clone(), *dir)) {
            continue;
        }
        if let Some(t) = g {
            if let Some(b) = poly_bound_dir(t, &scoped) {
                delta = delta.join(&b);
            }
        }
    }
    delta
}

/// Magnitude after crossing one transition.
fn cross_edge(ts: &TransitionSystem, tid: usize, mag: &Mag) -> Mag {
    let t = ts.transition(tid);
    let mut growth = BTreeMap::new();
    for v in &ts.variables {
        for dir in [Dir::Up, Dir::Down] {
            growth.insert((v.clone(), dir), crate::size_rel::transition_growth(ts, t, v, dir));
        }
    }
    let dirty = settle_dirty(&growth, &mag.dirty);
    let delta = max_clean_growth(&growth, &dirty, mag);
    Mag { m: mag.m.add(&delta), dirty }
}

/// Per-cycle effect on one (variable, direction) across the loop.
enum CycleGrowth {
    /// Drift that accumulates over iterations, bounded per cycle by the term
    /// (if any; None means unclassified).
    Acc(Option<LinTerm<Var>>),
    /// Non-accumulating: every cycle re-bounds the value at a constant, so
    /// the in-loop magnitude grows by at most this constant regardless of the
    /// iteration count.
    Reset(Int),
}

/// Per-iteration growth of one cycle through the loop head: the sum of the
/// growths of every non-body transition plus every body stay. A stay that
/// floors (or ceils) the variable at a constant, combined with constant hop
/// drifts, is a reset rather than accumulating drift.
fn loop_growth(
    ts: &TransitionSystem,
    comp: &Component,
    bodies: &[Component],
    size: &mut SizeAnalysis,
) -> BTreeMap<(VarId, Dir), CycleGrowth> {
    let body_trans: BTreeSet<usize> =
        bodies.iter().flat_map(|b| b.transitions.iter().cloned()).collect();
    let mut out = BTreeMap::new();
    let srs: Vec<crate::size_rel::SizeRelation> =
        bodies.iter().map(|b| size.relation(ts, b)).collect();
    for v in &ts.variables {
        for dir in [Dir::Up, Dir::Down] {
            let mut hops: Option<LinTerm<Var>> = Some(LinTerm::zero());
            for tid in &comp.transitions {
                if body_trans.contains(tid) {
                    continue;
                }
                let g = crate::size_rel::transition_growth(ts, ts.transition(*tid), v, dir);
                hops = match (hops, g) {
                    (Some(a), Some(b)) => Some(a.add(&b)),
                    _ => None,
                };
            }
            let stays: Vec<Option<Stay>> =
                srs.iter().map(|sr| stay_growth(sr, v, dir)).collect();
            let cg = cycle_growth(v, dir, hops, &stays);
            out.insert((v.clone(), dir), cg);
        }
    }
    out
}

/// Combine hop drift and stay effects into one per-cycle classification.
fn cycle_growth(
    v: &VarId,
    dir: Dir,
    hops: Option<LinTerm<Var>>,
    stays: &[Option<Stay>],
) -> CycleGrowth {
    let Some(hops) = hops else {
        return CycleGrowth::Acc(None);
    };
    if stays.iter().any(|s| s.is_none()) {
        return CycleGrowth::Acc(None);
    }
    let bounds: Vec<&Int> = stays
        .iter()
        .filter_map(|s| match s {
            Some(Stay::Bound(c)) => Some(c),
            _ => None,
        })
        .collect();
    if bounds.is_empty() {
        return CycleGrowth::Acc(Some(hops));
    }
    if hops.coeffs.is_empty() {
        // Every cycle re-bounds v at a constant and the hops drift by a
        // constant, so the value never strays more than this from zero.
        let c = bounds.iter().map(|c| c.abs()).max().unwrap();
        return CycleGrowth::Reset(c + hops.constant.abs());
    }
    // Fall back to accumulating the stay bound as drift v - c (or c - v).
    let mut total = hops;
    let unprimed = LinTerm::var(Var::unprimed(v.clone()));
    for c in bounds {
        let t = match dir {
            Dir::Up => LinTerm::constant(c.clone()).sub(&unprimed),
            Dir::Down => unprimed.sub(&LinTerm::constant(c.clone())),
        };
        total = total.add(&t);
    }
    CycleGrowth::Acc(Some(total))
}

/// Effect of a whole stay in a sub-SCC on v, from its size relation.
enum Stay {
    /// The stay cannot move v against the direction.
    Zero,
    /// The stay re-bounds v at this constant (a floor for Down, a ceiling
    /// for Up).
    Bound(Int),
}

fn stay_growth(
    sr: &crate::size_rel::SizeRelation,
    v: &VarId,
    dir: Dir,
) -> Option<Stay> {
    let up = LinTerm::var(Var::primed(v.clone())).sub(&LinTerm::var(Var::unprimed(v.clone())));
    let down = up.scale(&-Int::one());
    for a in &sr.atoms {
        let hit = match (dir, &a.rel) {
            (_, Rel::Eq) => a.term == up || a.term == down,
            (Dir::Up, Rel::Le) => a.term == up,
            (Dir::Down, Rel::Le) => a.term == down,
        };
        if hit {
            return Some(Stay::Zero);
        }
    }
    match dir {
        Dir::Up => sr.ceil.get(v).map(|c| Stay::Bound(c.clone())),
        Dir::Down => sr.floor.get(v).map(|c| Stay::Bound(c.clone())),
    }
}

fn loop_cost(
    ts: &TransitionSystem,
    comp: &Component,
    head: LocId,
    mag: &Mag,
    rf_ann: &BTreeMap<LocId, LinTerm<Var>>,
    size: &mut SizeAnalysis,
) -> (BoundVal, Mag) {
    let poisoned = mag.poisoned(&ts.variables);
    let rf = match rf_ann.get(&head) {
        Some(r) => r.clone(),
        None => return (BoundVal::Infinite, poisoned),
    };
    let k = match poly_bound_dir(&rf, mag) {
        Some(p) => p.add(&MagnitudePoly::from_int(2)),
        None => return (BoundVal::Infinite, poisoned),
    };
    let (bodies, _cycles) = match graph::cycles_through_head(ts, comp, head, 10_000) {
        Ok(x) => x,
        Err(_) => return (BoundVal::Infinite, poisoned),
    };
    let growth = loop_growth(ts, comp, &bodies, size);
    // Reset directions stay clean and contribute a constant bump instead of
    // accumulating drift; the rest feed the K-fold growth rule.
    let mut acc: BTreeMap<(VarId, Dir), Option<LinTerm<Var>>> = BTreeMap::new();
    let mut bump = MagnitudePoly::zero();
    for (key, cg) in &growth {
        match cg {
            CycleGrowth::Acc(g) => {
                acc.insert(key.clone(), g.clone());
            }
            CycleGrowth::Reset(c) => {
                acc.insert(key.clone(), Some(LinTerm::zero()));
                bump = bump.join(&MagnitudePoly::constant(Rat::from_integer(c.clone())));
            }
        }
    }
    let dirty = settle_dirty(&acc, &mag.dirty);
    let delta = max_clean_growth(&acc, &dirty, mag);
    // Value magnitudes inside the loop after up to K iterations.
    let m_in = Mag {
        m: mag.m.add(&k.mul(&delta)).add(&k).add(&bump),
        dirty,
    };
    let mut iter_cost = BoundVal::Finite(MagnitudePoly::from_int(
        1 + comp.transitions.len() as i64,
    ));
    for b in &bodies {
        if b.is_trivial() {
            continue;
        }
        let sub_head = match graph::entry_locations(ts, b).into_iter().next() {
            Some(h) => h,
            None => return (BoundVal::Infinite, poisoned),
        };
        let (c, _) = loop_cost(ts, b, sub_head, &m_in, rf_ann, size);
        iter_cost = iter_cost.add(&c);
    }
    let kb = BoundVal::Finite(k.clone());
    let total = kb
        .mul(&iter_cost)
        .add(&kb)
        .add(&BoundVal::Finite(MagnitudePoly::from_int(2)));
    (total, m_in)
}

/// Whole-system bound: the condensation is processed topologically from the
/// entry, threading magnitudes across edges and summing component costs.
pub fn solve(
    ts: &TransitionSystem,
    rf_ann: &BTreeMap<LocId, LinTerm<Var>>,
    size: &mut SizeAnalysis,
) -> Bound {
    let comps = graph::sccs(ts);
    let mut comp_of: BTreeMap<LocId, usize> = BTreeMap::new();
    for (i, c) in comps.iter().enumerate() {
        for l in &c.locations {
            comp_of.insert(*l, i);
        }
    }
    // Cross edges of the condensation, with the transitions realizing them.
    let mut succ: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut indeg: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &ts.transitions {
        let (a, b) = (comp_of[&t.source], comp_of[&t.target]);
        if a != b {
            succ.entry(a).or_default().push((b, t.id));
            *indeg.entry(b).or_insert(0) += 1;
        }
    }
    let entry_comp = comp_of[&ts.entry];
    // Reachable condensation nodes from the entry.
    let mut reach = BTreeSet::new();
    let mut stack = vec![entry_comp];
    while let Some(i) = stack.pop() {
        if !reach.insert(i) {
            continue;
        }
        for (j, _) in succ.get(&i).into_iter().flatten() {
            stack.push(*j);
        }
    }
    // Kahn order restricted to reachable nodes.
    let mut indeg_r: BTreeMap<usize, usize> = reach.iter().map(|i| (*i, 0)).collect();
    for i in &reach {
        for (j, _) in succ.get(i).into_iter().flatten() {
            if reach.contains(j) {
                *indeg_r.get_mut(j).unwrap() += 1;
            }
        }
    }
    let mut order = Vec::new();
    let mut ready: Vec<usize> = indeg_r
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(i, _)| *i)
        .collect();
    while let Some(i) = ready.pop() {
        order.push(i);
        for (j, _) in succ.get(&i).into_iter().flatten() {
            if let Some(d) = indeg_r.get_mut(j) {
                *d -= 1;
                if *d == 0 {
                    ready.push(*j);
                }
            }
        }
        ready.sort_unstable();
    }

    let mut mags: BTreeMap<usize, Mag> = BTreeMap::new();
    mags.insert(entry_comp, Mag { m: MagnitudePoly::n(), dirty: BTreeSet::new() });
    let mut total = BoundVal::Finite(MagnitudePoly::from_int(2));
    for i in order {
        let m_in = match mags.get(&i) {
            Some(m) => m.clone(),
            None => continue,
        };
        let c = &comps[i];
        let m_out = if c.is_trivial() {
            total = total.add(&BoundVal::Finite(MagnitudePoly::from_int(1)));
            m_in
        } else {
            let head = graph::entry_locations(ts, c)
                .into_iter()
                .next()
                .unwrap_or_else(|| *c.locations.iter().next().unwrap());
            let (cost, m_out) = loop_cost(ts, c, head, &m_in, rf_ann, size);
            total = total.add(&cost);
            m_out
        };
        for (j, tid) in succ.get(&i).into_iter().flatten() {
            total = total.add(&BoundVal::Finite(MagnitudePoly::from_int(1)));
            let crossed = cross_edge(ts, *tid, &m_out);
            let joined = match mags.get(j) {
                Some(m) => m.join(&crossed),
                None => crossed,
            };
            mags.insert(*j, joined);
        }
    }
    Bound { value: total, conditional: None }
}

/// N := max(1, max |init value|); evaluates the bound polynomial at N.
pub fn eval_bound(b: &Bound, init: &Valuation) -> Option<Int> {
    match &b.value {
        BoundVal::Infinite => None,
        BoundVal::Finite(p) => {
            let n = crate::interp::magnitude(init);
            Some(p.eval(&n))
        }
    }
}

/// Top degree of the bound polynomial; None encodes infinity.
pub fn asymptotic_degree(b: &Bound) -> Option<usize> {
    match &b.value {
        BoundVal::Infinite => None,
        BoundVal::Finite(p) => Some(p.degree()),
    }
}

/// Renders `3*N^2 + N + 1` style polynomials.
pub fn fmt_poly(p: &MagnitudePoly) -> String {
    if p.coeffs.is_empty() {
        return "0".to_string();
    }
    let mut parts = Vec::new();
    for (d, c) in p.coeffs.iter().rev() {
        let coeff = if c.is_integer() {
            c.to_integer().to_string()
        } else {
            format!("{}/{}", c.numer(), c.denom())
        };
        let part = match d {
            0 => coeff,
            1 if c.is_one() => "N".to_string(),
            1 => format!("{}*N", coeff),
            _ if c.is_one() => format!("N^{}", d),
            _ => format!("{}*N^{}", coeff, d),
        };
        parts.push(part);
    }
    parts.join(" + ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::its::parse_its;
    use crate::pipeline;

    fn run(name: &str) -> crate::pipeline::Pipeline {
        let path = format!("{}/../../fixtures/{}.its", env!("CARGO_MANIFEST_DIR"), name);
        let ts = parse_its(&std::fs::read_to_string(path).unwrap()).unwrap();
        pipeline::run(&ts).unwrap()
    }

    #[test]
    fn corpus_degrees() {
        assert_eq!(asymptotic_degree(&run("straight_line").bound), Some(0));
        assert_eq!(asymptotic_degree(&run("countdown").bound), Some(1));
        assert_eq!(asymptotic_degree(&run("two_loops_seq").bound), Some(1));
        assert_eq!(asymptotic_degree(&run("two_phase").bound), Some(2));
        assert_eq!(asymptotic_degree(&run("nonterm").bound), None);
    }

    #[test]
    fn bound_evaluation_is_monotone_in_the_initial_magnitude() {
        let pl = run("countdown");
        let x = VarId::program("x");
        let mut last: Option<Int> = None;
        for k in 0..40i64 {
            let init: Valuation = [(x.clone(), Int::from(k))].into_iter().collect();
            let v = eval_bound(&pl.bound, &init).expect("finite bound");
            assert!(v >= Int::zero());
            if let Some(prev) = &last {
                assert!(v >= *prev, "bound must not shrink as |init| grows");
            }
            last = Some(v);
        }
    }
}
