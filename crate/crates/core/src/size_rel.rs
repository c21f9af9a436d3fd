//! Size relations between the values entering and leaving a sub-SCC at its
//! entry location: a coarse per-variable domain of equality, monotonicity,
//! and verified linear growth facts.

use std::collections::BTreeMap;

use num_traits::{One, Zero};

use crate::graph::Component;
use crate::its::{Atom, Int, LinTerm, LocId, Rel, TransitionSystem, Var, VarId, VarKind};
use crate::linear;

/// Relation over (unprimed, primed) state variable pairs for a whole stay in
/// the sub-SCC. `atoms` holds the three-form facts; `growth` the loop-wide
/// per-iteration growth facts, kept separate because they bound single steps,
/// not whole stays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeRelation {
    pub entry: LocId,
    pub atoms: Vec<Atom>,
    /// Per-iteration facts v' <= v + g, one minimal verified g per variable.
    pub growth: BTreeMap<VarId, LinTerm<Var>>,
    /// Greatest constant c with v' >= c on every internal transition.
    pub floor: BTreeMap<VarId, Int>,
    /// Least constant c with v' <= c on every internal transition.
    pub ceil: BTreeMap<VarId, Int>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dir {
    /// bounding v' - v from above
    Up,
    /// bounding v - v' from above
    Down,
}

/// Memoizing wrapper so validators and the solver share computed relations.
#[derive(Default)]
pub struct SizeAnalysis {
    memo: BTreeMap<Vec<usize>, SizeRelation>,
}

impl SizeAnalysis {
    pub fn new() -> Self {
        SizeAnalysis::default()
    }
    pub fn relation(&mut self, ts: &TransitionSystem, d: &Component) -> SizeRelation {
        let key: Vec<usize> = d.transitions.iter().cloned().collect();
        if let Some(r) = self.memo.get(&key) {
            return r.clone();
        }
        let entry = crate::graph::entry_locations(ts, d)
            .into_iter()
            .next()
            .unwrap_or_else(|| *d.locations.iter().next().unwrap());
        let r = size_relations(ts, d, entry);
        self.memo.insert(key, r.clone());
        r
    }
}

fn delta_term(v: &VarId, dir: Dir) -> LinTerm<Var> {
    // Up: v' - v; Down: v - v'.
    let p = LinTerm::var(Var::primed(v.clone()));
    let u = LinTerm::var(Var::unprimed(v.clone()));
    match dir {
        Dir::Up => p.sub(&u),
        Dir::Down => u.sub(&p),
    }
}

fn entailed_by_all(
    ts: &TransitionSystem,
    d: &Component,
    a: &Atom,
) -> bool {
    d.transitions.iter().all(|id| {
        let t = ts.transition(*id);
        linear::atoms_entail(&ts.full_relation(t), a).unwrap_or(false)
    })
}

/// Growth candidates for one transition and direction: right-hand sides read
/// off the update atoms, with one level of undefined-variable elimination.
fn growth_candidates(
    t: &crate::its::Transition,
    v: &VarId,
    dir: Dir,
) -> Vec<LinTerm<Var>> {
    let target = Var::primed(v.clone());
    let mut bounds: Vec<LinTerm<Var>> = Vec::new();
    // An atom c*v' + R <= 0 with c = 1 bounds v' above by -R; with c = -1 it
    // bounds v' below by R (useful for Down). Equalities bound both ways.
    // Up collects upper bounds of v', Down collects lower bounds.
    for a in &t.relation {
        let c = a.term.coeff(&target);
        if c.is_one() && (dir == Dir::Up || a.rel == Rel::Eq) {
            let mut rest = a.term.clone();
            rest.add_coeff(target.clone(), &-Int::one());
            bounds.push(rest.scale(&-Int::one()));
        } else if c == -Int::one() && (dir == Dir::Down || a.rel == Rel::Eq) {
            let mut rest = a.term.clone();
            rest.add_coeff(target.clone(), &Int::one());
            bounds.push(rest);
        }
    }
    // One level of substitution for undefined variables appearing in a bound:
    // replace u (coefficient +d) by an upper bound of u when d > 0, by a
    // lower bound when d < 0, in the direction that keeps the bound valid.
    let mut expanded: Vec<LinTerm<Var>> = Vec::new();
    for b in &bounds {
        let undefs: Vec<Var> = b
            .coeffs
            .keys()
            .filter(|w| w.id.kind == VarKind::Undefined)
            .cloned()
            .collect();
        if undefs.is_empty() {
            continue;
        }
        let mut cur = vec![b.clone()];
        for u in undefs {
            let mut next = Vec::new();
            for term in &cur {
                let d = term.coeff(&u);
                if d.is_zero() {
                    next.push(term.clone());
                    continue;
                }
                for a in &t.relation {
                    let cu = a.term.coeff(&u);
                    // Keep an upper bound upper (Up) or lower lower (Down):
                    // substitute u by an upper bound when enlarging is safe,
                    // by a lower bound otherwise.
                    let want_upper = (d > Int::from(0)) == (dir == Dir::Up);
                    let usable = if want_upper {
                        cu.is_one() && (a.rel == Rel::Le || a.rel == Rel::Eq)
                    } else {
                        cu == -Int::one() && (a.rel == Rel::Le || a.rel == Rel::Eq)
                    } || (a.rel == Rel::Eq && (cu.is_one() || cu == -Int::one()));
                    if !usable || a.term.coeffs.keys().any(|w| w.id.kind == VarKind::Undefined && *w != u) {
                        continue;
                    }
                    let mut rest = a.term.clone();
                    rest.add_coeff(u.clone(), &-cu.clone());
                    // cu*u + rest <= 0: u <= -rest/cu for cu=1; u >= rest for cu=-1.
                    let ubound = if cu.is_one() { rest.scale(&-Int::one()) } else { rest };
                    let mut subst = BTreeMap::new();
                    subst.insert(u.clone(), ubound);
                    next.push(term.substitute(&subst));
                }
            }
            cur = next;
        }
        expanded.extend(cur);
    }
    bounds.extend(expanded);
    // Keep closed candidates over unprimed state variables only, as g = bound - v
    // (Up) or v - bound (Down); also try the constants 0 and 1.
    let base = LinTerm::var(Var::unprimed(v.clone()));
    let mut out: Vec<LinTerm<Var>> = Vec::new();
    for b in bounds {
        if b.coeffs
            .keys()
            .any(|w| w.primed || w.id.kind == VarKind::Undefined)
        {
            continue;
        }
        let g = match dir {
            Dir::Up => b.sub(&base),
            // Down: v - v' <= v - lower_bound.
            Dir::Down => base.sub(&b),
        };
        if !out.contains(&g) {
            out.push(g);
        }
    }
    let zero = LinTerm::zero();
    let one = LinTerm::constant(Int::one());
    if !out.contains(&zero) {
        out.push(zero);
    }
    if !out.contains(&one) {
        out.push(one);
    }
    out
}

fn score(g: &LinTerm<Var>) -> (Int, Int) {
    use num_traits::Signed;
    let s: Int = g.coeffs.values().map(|c| c.abs()).sum();
    (s, g.constant.abs())
}

/// Minimal verified growth fact for one transition: `v' - v <= g` (Up) or
/// `v - v' <= g` (Down), with g over unprimed state variables.
pub fn transition_growth(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    v: &VarId,
    dir: Dir,
) -> Option<LinTerm<Var>> {
    let full = ts.full_relation(t);
    let mut best: Option<LinTerm<Var>> = None;
    for g in growth_candidates(t, v, dir) {
        let a = Atom::le(delta_term(v, dir).sub(&g));
        if linear::atoms_entail(&full, &a).unwrap_or(false) {
            let better = match &best {
                None => true,
                Some(b) => score(&g) < score(b),
            };
            if better {
                best = Some(g);
            }
        }
    }
    best
}

/// The three-form relation plus loop-wide growth facts for a sub-SCC.
pub fn size_relations(ts: &TransitionSystem, d: &Component, entry: LocId) -> SizeRelation {
    let mut atoms = Vec::new();
    let mut growth = BTreeMap::new();
    for v in &ts.variables {
        let up = delta_term(v, Dir::Up);
        let down = delta_term(v, Dir::Down);
        let eq = entailed_by_all(ts, d, &Atom::le(up.clone()))
            && entailed_by_all(ts, d, &Atom::le(down.clone()));
        if eq {
            atoms.push(Atom::eq_terms(
                &LinTerm::var(Var::primed(v.clone())),
                &LinTerm::var(Var::unprimed(v.clone())),
            ));
            continue;
        }
        if entailed_by_all(ts, d, &Atom::le(down.clone())) {
            // v' >= v
            atoms.push(Atom::le(down));
        } else if entailed_by_all(ts, d, &Atom::le(up.clone())) {
            // v' <= v
            atoms.push(Atom::le(up));
        }
        // Loop-wide per-iteration growth: one candidate valid on every
        // internal transition.
        let mut cands: Vec<LinTerm<Var>> = Vec::new();
        for id in &d.transitions {
            for g in growth_candidates(ts.transition(*id), v, Dir::Up) {
                if !cands.contains(&g) {
                    cands.push(g);
                }
            }
        }
        let mut best: Option<LinTerm<Var>> = None;
        for g in cands {
            let a = Atom::le(delta_term(v, Dir::Up).sub(&g));
            if entailed_by_all(ts, d, &a) {
                let better = match &best {
                    None => true,
                    Some(b) => score(&g) < score(b),
                };
                if better {
                    best = Some(g);
                }
            }
        }
        if let Some(g) = best {
            growth.insert(v.clone(), g);
        }
    }
    // Constant floors and ceilings on the primed value, candidates taken
    // from the constants mentioned by the internal transitions.
    let mut consts: Vec<Int> = vec![-Int::one(), Int::zero(), Int::one()];
    for id in &d.transitions {
        for a in &ts.transition(*id).relation {
            let c = -a.term.constant.clone();
            if !consts.contains(&c) {
                consts.push(c);
            }
        }
    }
    let mut floor = BTreeMap::new();
    let mut ceil = BTreeMap::new();
    for v in &ts.variables {
        let p = LinTerm::var(Var::primed(v.clone()));
        let lo = consts
            .iter()
            .filter(|c| {
                let a = Atom::le(LinTerm::constant((*c).clone()).sub(&p));
                entailed_by_all(ts, d, &a)
            })
            .max();
        if let Some(c) = lo {
            floor.insert(v.clone(), c.clone());
        }
        let hi = consts
            .iter()
            .filter(|c| {
                let a = Atom::le(p.sub(&LinTerm::constant((*c).clone())));
                entailed_by_all(ts, d, &a)
            })
            .min();
        if let Some(c) = hi {
            ceil.insert(v.clone(), c.clone());
        }
    }
    SizeRelation { entry, atoms, growth, floor, ceil }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Component;
    use crate::interp;
    use crate::its::parse_its;
    use std::collections::BTreeSet;

    #[test]
    fn size_relation_atoms_hold_on_concrete_stays() {
        let path = format!("{}/../../fixtures/fig4.its", env!("CARGO_MANIFEST_DIR"));
        let ts = parse_its(&std::fs::read_to_string(path).unwrap()).unwrap();
        let l1 = ts.loc_by_name("l1").unwrap();
        let internal: BTreeSet<usize> = ts
            .transitions
            .iter()
            .filter(|t| t.source == l1 && t.target == l1)
            .map(|t| t.id)
            .collect();
        assert!(!internal.is_empty());
        let d = Component { locations: [l1].into_iter().collect(), transitions: internal };
        let sr = size_relations(&ts, &d, l1);
        assert!(!sr.atoms.is_empty());

        let mut checked = 0usize;
        for seed in 0..300u64 {
            let init = interp::random_valuation(&ts.variables, seed, 6);
            let trace = interp::run(&ts, &init, seed, 6, 2000);
            let states = &trace.states;
            let mut i = 0;
            while i < states.len() {
                if states[i].0 != l1 {
                    i += 1;
                    continue;
                }
                let mut j = i;
                while j + 1 < states.len() && states[j + 1].0 == l1 {
                    j += 1;
                }
                // Each atom relates the state entering the stay (unprimed) to
                // every state reached while still inside it (primed).
                for k in i..=j {
                    for a in &sr.atoms {
                        let env = |v: &Var| {
                            let val = if v.primed { &states[k].1 } else { &states[i].1 };
                            val.get(&v.id).cloned()
                        };
                        assert_eq!(a.holds(&env), Some(true), "seed {seed}, stay {i}..{k}: {a:?}");
                        checked += 1;
                    }
                }
                i = j + 1;
            }
        }
        assert!(checked > 100, "only {checked} atom instances checked");
    }

    #[test]
    fn growth_facts_bound_single_iterations() {
        let path = format!("{}/../../fixtures/fig4.its", env!("CARGO_MANIFEST_DIR"));
        let ts = parse_its(&std::fs::read_to_string(path).unwrap()).unwrap();
        let l1 = ts.loc_by_name("l1").unwrap();
        let internal: BTreeSet<usize> = ts
            .transitions
            .iter()
            .filter(|t| t.source == l1 && t.target == l1)
            .map(|t| t.id)
            .collect();
        let d = Component { locations: [l1].into_iter().collect(), transitions: internal.clone() };
        let sr = size_relations(&ts, &d, l1);
        for seed in 0..100u64 {
            let init = interp::random_valuation(&ts.variables, seed, 6);
            let trace = interp::run(&ts, &init, seed, 6, 2000);
            for (step, tid) in trace.taken.iter().enumerate() {
                if !internal.contains(tid) {
                    continue;
                }
                let (pre, post) = (&trace.states[step].1, &trace.states[step + 1].1);
                for (v, g) in &sr.growth {
                    let bound = g
                        .eval(&|w: &Var| pre.get(&w.id).cloned())
                        .expect("growth term over unprimed state vars");
                    assert!(post[v] <= pre[v].clone() + bound, "seed {seed} step {step} var {}", v.name);
                }
            }
        }
    }
}
