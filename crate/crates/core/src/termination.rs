//! Termination proofs for components: lexicographic ranking functions found
//! by Farkas-style constraint solving, optional conditional invariants, and
//! the phase analysis that unfolds a component when only a conditional proof
//! exists.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::{One, Zero};
use thiserror::Error;

use crate::graph::{self, Component};
use crate::its::{Atom, Int, LinTerm, LocId, Provenance, Rel, Transition, TransitionSystem, Var, VarId};
use crate::linear::{self, LinearError, LpOutcome, Polyhedron};

/// Per-location affine ranking function over unprimed state variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingFunction {
    pub terms: BTreeMap<LocId, LinTerm<Var>>,
}

impl RankingFunction {
    pub fn at(&self, l: LocId) -> LinTerm<Var> {
        self.terms.get(&l).cloned().unwrap_or_else(LinTerm::zero)
    }
    pub fn zero(locs: &BTreeSet<LocId>) -> Self {
        RankingFunction { terms: locs.iter().map(|l| (*l, LinTerm::zero())).collect() }
    }
}

/// Per-location conjunction of unprimed atoms; a missing location means true.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CondInvariant {
    pub atoms: BTreeMap<LocId, Vec<Atom>>,
}

impl CondInvariant {
    pub fn top() -> Self {
        CondInvariant::default()
    }
    pub fn is_top(&self) -> bool {
        self.atoms.values().all(|v| v.is_empty())
    }
    pub fn at(&self, l: LocId) -> &[Atom] {
        self.atoms.get(&l).map(|v| v.as_slice()).unwrap_or(&[])
    }
    /// Uniform invariant: the same atoms at every location of a component.
    pub fn uniform(locs: &BTreeSet<LocId>, atoms: Vec<Atom>) -> Self {
        CondInvariant { atoms: locs.iter().map(|l| (*l, atoms.clone())).collect() }
    }
}

/// Proof tree for a component: a ranking function that strictly decreases on
/// `strict`, does not increase anywhere, plus subproofs for the strongly
/// connected parts that remain after removing `removed` (= strict plus the
/// transitions left on no cycle).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TerminationProof {
    pub rf: RankingFunction,
    pub inv: CondInvariant,
    pub component: BTreeSet<usize>,
    pub removed: BTreeSet<usize>,
    pub strict: BTreeSet<usize>,
    pub children: Vec<TerminationProof>,
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum AnalyzeError {
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error("invariant negation has {0} disjuncts, refusing to unfold (limit 8)")]
    TooManyDisjuncts(usize),
    #[error("phase analysis did not stabilize within {0} unfoldings")]
    PhaseBudget(usize),
}

/// Columns for the polyhedron of one transition: unprimed state variables,
/// primed state variables, then the transition's own undefined variables.
fn transition_columns(ts: &TransitionSystem, t: &crate::its::Transition) -> Vec<Var> {
    let mut cols: Vec<Var> = Vec::new();
    for v in &ts.variables {
        cols.push(Var::unprimed(v.clone()));
    }
    for v in &ts.variables {
        cols.push(Var::primed(v.clone()));
    }
    for u in t.undef_vars() {
        cols.push(Var::unprimed(u));
    }
    cols
}

/// Polyhedron of a transition's relation with frame equalities and the
/// invariant at its source location.
pub fn transition_polyhedron(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    q: &CondInvariant,
) -> Result<Polyhedron<Var>, LinearError> {
    let cols = transition_columns(ts, t);
    let mut atoms = ts.full_relation(t);
    atoms.extend_from_slice(q.at(t.source));
    Polyhedron::from_atoms(cols, &atoms)
}

fn transition_feasible(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    q: &CondInvariant,
) -> Result<bool, LinearError> {
    linear::is_feasible(&transition_polyhedron(ts, t, q)?)
}

/// One entailment instance inside the synthesis LP: the target row's column
/// coefficients and bound are affine in the template unknowns.
struct EntailmentSpec {
    /// rows of the transition polyhedron
    rows: Vec<(Vec<Int>, Int)>,
    /// per polyhedron column: linear combination of template unknowns
    target_coeffs: Vec<Vec<(usize, Int)>>,
    /// bound as (template combination, constant)
    target_bound: (Vec<(usize, Int)>, Int),
}

/// Assemble and solve the combined LP for a set of entailments sharing one
/// template-unknown block of size `n_template`.
fn solve_entailments(n_template: usize, specs: &[EntailmentSpec]) -> Option<Vec<linear::Rat>> {
    // LP variables: template unknowns (free), then one multiplier per row of
    // each entailment (nonnegative).
    let mut n = n_template;
    let mut lp_rows: Vec<(Vec<Int>, Int)> = Vec::new();
    let total: usize = n + specs.iter().map(|s| s.rows.len()).sum::<usize>();
    let push_row = |coeffs: Vec<(usize, Int)>, bound: Int, lp_rows: &mut Vec<(Vec<Int>, Int)>| {
        let mut row = vec![Int::zero(); total];
        for (j, c) in coeffs {
            row[j] += c;
        }
        lp_rows.push((row, bound));
    };
    for spec in specs {
        let base = n;
        n += spec.rows.len();
        // lambda >= 0
        for i in 0..spec.rows.len() {
            push_row(vec![(base + i, -Int::one())], Int::zero(), &mut lp_rows);
        }
        // For each column: sum_i lambda_i A_ij - target_j = 0.
        let ncols = spec.rows.first().map(|r| r.0.len()).unwrap_or(0);
        for j in 0..ncols {
            let mut coeffs: Vec<(usize, Int)> = Vec::new();
            for (i, (a, _)) in spec.rows.iter().enumerate() {
                if !a[j].is_zero() {
                    coeffs.push((base + i, a[j].clone()));
                }
            }
            for (u, c) in &spec.target_coeffs[j] {
                coeffs.push((*u, -c.clone()));
            }
            push_row(coeffs.clone(), Int::zero(), &mut lp_rows);
            push_row(coeffs.into_iter().map(|(j, c)| (j, -c)).collect(), Int::zero(), &mut lp_rows);
        }
        // sum_i lambda_i b_i <= target bound.
        let mut coeffs: Vec<(usize, Int)> = Vec::new();
        for (i, (_, b)) in spec.rows.iter().enumerate() {
            if !b.is_zero() {
                coeffs.push((base + i, b.clone()));
            }
        }
        for (u, c) in &spec.target_bound.0 {
            coeffs.push((*u, -c.clone()));
        }
        push_row(coeffs, spec.target_bound.1.clone(), &mut lp_rows);
    }
    debug_assert_eq!(n, total);
    let p = Polyhedron { vars: (0..total).collect::<Vec<usize>>(), rows: lp_rows };
    match linear::lp_feasible(&p).ok()? {
        LpOutcome::Feasible(x) => Some(x[..n_template].to_vec()),
        LpOutcome::Infeasible(_) => None,
    }
}

/// Template layout: unknown index of coefficient `v` at location `l`, and of
/// the constant at `l`.
struct Template {
    locs: Vec<LocId>,
    nvars: usize,
}

impl Template {
    fn coeff(&self, l: LocId, v: usize) -> usize {
        let li = self.locs.iter().position(|x| *x == l).unwrap();
        li * (self.nvars + 1) + v
    }
    fn constant(&self, l: LocId) -> usize {
        let li = self.locs.iter().position(|x| *x == l).unwrap();
        li * (self.nvars + 1) + self.nvars
    }
    fn size(&self) -> usize {
        self.locs.len() * (self.nvars + 1)
    }
}

/// Target `R_src(x) - R_tgt(x') >= delta`, rewritten as a `<=` row over the
/// transition polyhedron columns: `-R_src(x) + R_tgt(x') <= -delta`.
fn decrease_spec(
    ts: &TransitionSystem,
    tpl: &Template,
    poly: &Polyhedron<Var>,
    src: LocId,
    tgt: LocId,
    delta: Int,
) -> EntailmentSpec {
    let nv = ts.variables.len();
    let mut target_coeffs: Vec<Vec<(usize, Int)>> = vec![Vec::new(); poly.vars.len()];
    for (vi, _) in ts.variables.iter().enumerate() {
        target_coeffs[vi] = vec![(tpl.coeff(src, vi), -Int::one())];
        target_coeffs[nv + vi] = vec![(tpl.coeff(tgt, vi), Int::one())];
    }
    EntailmentSpec {
        rows: poly.rows.clone(),
        target_coeffs,
        // Bound of the rewritten row: c_src - c_tgt - delta.
        target_bound: (
            vec![(tpl.constant(src), Int::one()), (tpl.constant(tgt), -Int::one())],
            -delta,
        ),
    }
}

/// Target `R_src(x) >= 0`, i.e. `-R_src(x) <= 0`.
fn bounded_spec(
    ts: &TransitionSystem,
    tpl: &Template,
    poly: &Polyhedron<Var>,
    src: LocId,
) -> EntailmentSpec {
    let mut target_coeffs: Vec<Vec<(usize, Int)>> = vec![Vec::new(); poly.vars.len()];
    for (vi, _) in ts.variables.iter().enumerate() {
        target_coeffs[vi] = vec![(tpl.coeff(src, vi), -Int::one())];
    }
    EntailmentSpec {
        rows: poly.rows.clone(),
        target_coeffs,
        // Bound of the rewritten row: c_src.
        target_bound: (vec![(tpl.constant(src), Int::one())], Int::zero()),
    }
}

fn extract_rf(
    ts: &TransitionSystem,
    tpl: &Template,
    solution: &[linear::Rat],
) -> RankingFunction {
    let ints = linear::clear_denominators(solution);
    let mut terms = BTreeMap::new();
    for &l in &tpl.locs {
        let mut t = LinTerm::constant(ints[tpl.constant(l)].clone());
        for (vi, v) in ts.variables.iter().enumerate() {
            t.add_coeff(Var::unprimed(v.clone()), &ints[tpl.coeff(l, vi)]);
        }
        terms.insert(l, t);
    }
    RankingFunction { terms }
}

/// Entailment of `R_src - R'_tgt >= delta` for a concrete ranking function.
fn rf_decreases(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    q: &CondInvariant,
    rf: &RankingFunction,
    delta: Int,
) -> Result<bool, LinearError> {
    let poly = transition_polyhedron(ts, t, q)?;
    let r_src = rf.at(t.source);
    let r_tgt = rf.at(t.target).map_vars(|v| Var { id: v.id.clone(), primed: true });
    // R_src - R'_tgt >= delta is -(R_src - R'_tgt) + delta <= 0.
    let term = r_tgt.sub(&r_src).add_const(&delta);
    linear::entails_atom(&poly, &Atom::le(term))
}

fn rf_bounded(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    q: &CondInvariant,
    rf: &RankingFunction,
) -> Result<bool, LinearError> {
    let poly = transition_polyhedron(ts, t, q)?;
    let term = rf.at(t.source).scale(&-Int::one());
    linear::entails_atom(&poly, &Atom::le(term))
}

/// Find an affine per-location ranking function for `c` under invariant `q`:
/// non-increasing on every transition, strictly decreasing and bounded below
/// on at least one. Returns the function and the full strict set, greedily
/// grown after the first witness. Transitions whose relation contradicts the
/// invariant are vacuously strict.
pub fn synthesize_lrf(
    ts: &TransitionSystem,
    c: &Component,
    q: &CondInvariant,
) -> Result<Option<(RankingFunction, BTreeSet<usize>)>, LinearError> {
    let mut infeasible: BTreeSet<usize> = BTreeSet::new();
    let mut feasible: Vec<usize> = Vec::new();
    for id in &c.transitions {
        if transition_feasible(ts, ts.transition(*id), q)? {
            feasible.push(*id);
        } else {
            infeasible.insert(*id);
        }
    }
    if feasible.is_empty() {
        return Ok(Some((RankingFunction::zero(&c.locations), infeasible)));
    }
    let tpl = Template { locs: c.locations.iter().cloned().collect(), nvars: ts.variables.len() };
    let polys: BTreeMap<usize, Polyhedron<Var>> = feasible
        .iter()
        .map(|id| {
            transition_polyhedron(ts, ts.transition(*id), q).map(|p| (*id, p))
        })
        .collect::<Result<_, _>>()?;
    for &cand in &feasible {
        let mut specs: Vec<EntailmentSpec> = Vec::new();
        for &id in &feasible {
            let t = ts.transition(id);
            specs.push(decrease_spec(ts, &tpl, &polys[&id], t.source, t.target, Int::zero()));
        }
        let t = ts.transition(cand);
        specs.push(decrease_spec(ts, &tpl, &polys[&cand], t.source, t.target, Int::one()));
        specs.push(bounded_spec(ts, &tpl, &polys[&cand], t.source));
        if let Some(sol) = solve_entailments(tpl.size(), &specs) {
            let rf = extract_rf(ts, &tpl, &sol);
            let mut strict = infeasible.clone();
            strict.insert(cand);
            // Grow the strict set: any other transition that also strictly
            // decreases and is bounded below can be removed under the same
            // function.
            for &id in &feasible {
                if id == cand {
                    continue;
                }
                let t = ts.transition(id);
                if rf_decreases(ts, t, q, &rf, Int::one())? && rf_bounded(ts, t, q, &rf)? {
                    strict.insert(id);
                }
            }
            return Ok(Some((rf, strict)));
        }
    }
    if !infeasible.is_empty() {
        // No ranking function, but the contradictory transitions can still be
        // removed; the caller recurses on what is left.
        return Ok(Some((RankingFunction::zero(&c.locations), infeasible)));
    }
    Ok(None)
}

/// Candidate conditional invariants for a component, ordered deterministically
/// and filtered to the inductive ones. Candidates are sign facts `v <= k`,
/// `v >= k` for `k` in `{-1, 0, 1}` (weakest first) and guard atoms of the
/// component's transitions together with their negations.
pub fn candidate_invariants(
    ts: &TransitionSystem,
    c: &Component,
) -> Result<Vec<CondInvariant>, LinearError> {
    let mut occurring: Vec<VarId> = Vec::new();
    for v in &ts.variables {
        let occurs = c.transitions.iter().any(|id| {
            ts.transition(*id)
                .relation
                .iter()
                .any(|a| a.term.coeffs.keys().any(|w| &w.id == v))
        });
        if occurs && !occurring.contains(v) {
            occurring.push(v.clone());
        }
    }
    let mut pool: Vec<Atom> = Vec::new();
    for v in &occurring {
        let x = LinTerm::var(Var::unprimed(v.clone()));
        for k in [1i32, 0, -1] {
            // v <= k
            pool.push(Atom::le(x.add_const(&-Int::from(k))));
        }
        for k in [-1i32, 0, 1] {
            // v >= k  is -v + k <= 0
            pool.push(Atom::le(x.scale(&-Int::one()).add_const(&Int::from(k))));
        }
    }
    for id in &c.transitions {
        for a in &ts.transition(*id).relation {
            if a.rel == Rel::Le && !a.mentions_primed() && !a.mentions_undefined() {
                if !pool.contains(a) {
                    pool.push(a.clone());
                }
                let n = a.negate_le();
                if !pool.contains(&n) {
                    pool.push(n);
                }
            }
        }
    }
    let mut out = Vec::new();
    'cand: for atom in pool {
        let q = CondInvariant::uniform(&c.locations, vec![atom.clone()]);
        // Inductive: along every internal transition the invariant at the
        // source carries over to the target.
        let mut any_feasible = false;
        for id in &c.transitions {
            let t = ts.transition(*id);
            let poly = transition_polyhedron(ts, t, &q)?;
            if linear::is_feasible(&poly)? {
                any_feasible = true;
                for g in q.at(t.target) {
                    if !linear::entails_atom(&poly, &g.primed())? {
                        continue 'cand;
                    }
                }
            }
        }
        // Reject invariants that contradict every transition: they prove
        // nothing and would make unfolding spin.
        if !any_feasible {
            continue;
        }
        out.push(q);
    }
    Ok(out)
}

/// Recursive proof construction for a fixed invariant.
fn build_proof(
    ts: &TransitionSystem,
    c: &Component,
    q: &CondInvariant,
) -> Result<Option<TerminationProof>, LinearError> {
    let (rf, strict) = match synthesize_lrf(ts, c, q)? {
        Some(x) => x,
        None => return Ok(None),
    };
    let remaining: BTreeSet<usize> = c.transitions.difference(&strict).cloned().collect();
    let subs: Vec<Component> = graph::sccs_of(ts, &c.locations, &remaining)
        .into_iter()
        .filter(|s| !s.is_trivial())
        .collect();
    let mut children = Vec::new();
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for sub in &subs {
        covered.extend(sub.transitions.iter().cloned());
        // Children inherit the invariant; no new conditions may be introduced
        // below the root.
        match build_proof(ts, sub, q)? {
            Some(p) => children.push(p),
            None => return Ok(None),
        }
    }
    let mut removed = strict.clone();
    removed.extend(remaining.difference(&covered).cloned());
    Ok(Some(TerminationProof {
        rf,
        inv: CondInvariant {
            atoms: c.locations.iter().map(|l| (*l, q.at(*l).to_vec())).collect(),
        },
        component: c.transitions.clone(),
        removed,
        strict,
        children,
    }))
}

pub enum ProveOutcome {
    /// Unconditional proof.
    Proved(TerminationProof),
    /// Proof valid only under the returned invariant.
    Conditional(TerminationProof, CondInvariant),
    Unprovable,
}

/// Try an unconditional proof first, then each candidate invariant in order.
pub fn prove_component(
    ts: &TransitionSystem,
    c: &Component,
) -> Result<ProveOutcome, LinearError> {
    if let Some(p) = build_proof(ts, c, &CondInvariant::top())? {
        return Ok(ProveOutcome::Proved(p));
    }
    for q in candidate_invariants(ts, c)? {
        if let Some(p) = build_proof(ts, c, &q)? {
            return Ok(ProveOutcome::Conditional(p, q));
        }
    }
    Ok(ProveOutcome::Unprovable)
}

/// Independent checker for a proof tree: structural partition plus all
/// ranking entailments, recursively.
pub fn verify_proof(
    ts: &TransitionSystem,
    c: &Component,
    proof: &TerminationProof,
) -> Result<(), String> {
    if proof.component != c.transitions {
        return Err("proof component does not match".into());
    }
    if !proof.strict.is_subset(&proof.removed) || !proof.removed.is_subset(&proof.component) {
        return Err("removed/strict sets are not nested".into());
    }
    let q = &proof.inv;
    for id in &c.transitions {
        let t = ts.transition(*id);
        let feas = transition_feasible(ts, t, q).map_err(|e| e.to_string())?;
        if !feas {
            continue;
        }
        if !rf_decreases(ts, t, q, &proof.rf, Int::zero()).map_err(|e| e.to_string())? {
            return Err(format!("transition {id} may increase the ranking function"));
        }
        if proof.strict.contains(id) {
            if !rf_decreases(ts, t, q, &proof.rf, Int::one()).map_err(|e| e.to_string())? {
                return Err(format!("strict transition {id} does not decrease"));
            }
            if !rf_bounded(ts, t, q, &proof.rf).map_err(|e| e.to_string())? {
                return Err(format!("strict transition {id} is not bounded below"));
            }
        }
    }
    let remaining: BTreeSet<usize> =
        c.transitions.difference(&proof.strict).cloned().collect();
    let subs: Vec<Component> = graph::sccs_of(ts, &c.locations, &remaining)
        .into_iter()
        .filter(|s| !s.is_trivial())
        .collect();
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    if subs.len() != proof.children.len() {
        return Err("child count does not match remaining components".into());
    }
    for child in &proof.children {
        let sub = subs
            .iter()
            .find(|s| s.transitions == child.component)
            .ok_or("child proof does not match a remaining component")?;
        covered.extend(sub.transitions.iter().cloned());
        verify_proof(ts, sub, child)?;
    }
    let expect_removed: BTreeSet<usize> = c
        .transitions
        .iter()
        .filter(|id| !covered.contains(id))
        .cloned()
        .collect();
    if proof.removed != expect_removed {
        return Err("removed set does not cover exactly the non-recurring transitions".into());
    }
    Ok(())
}

/// Disjuncts of the negation of a conjunction of `<=` atoms.
fn negation_disjuncts(atoms: &[Atom]) -> Result<Vec<Atom>, AnalyzeError> {
    let out: Vec<Atom> = atoms.iter().map(|a| a.negate_le()).collect();
    if out.len() > 8 {
        return Err(AnalyzeError::TooManyDisjuncts(out.len()));
    }
    Ok(out)
}

/// Split a component into the phase satisfying `q` (hatted copy, with `q`
/// conjoined) and the residual phase (original locations, negation conjoined),
/// with a bridge from residual to hatted at every location. Entry and exit
/// transitions are rerouted accordingly.
/// Frame equalities v' = v for state variables whose primed form appears in
/// `extras` but is left implicit (unmentioned) by `t.relation`.
fn frames_for(ts: &TransitionSystem, t: &Transition, extras: &[Atom]) -> Vec<Atom> {
    let already = t.primed_vars();
    let mut needed: BTreeSet<VarId> = BTreeSet::new();
    for a in extras {
        for v in a.term.coeffs.keys() {
            if v.primed && v.id.is_state() && !already.contains(&v.id) {
                needed.insert(v.id.clone());
            }
        }
    }
    ts.variables
        .iter()
        .filter(|v| needed.contains(v))
        .map(|v| {
            Atom::eq_terms(
                &LinTerm::var(Var::primed(v.clone())),
                &LinTerm::var(Var::unprimed(v.clone())),
            )
        })
        .collect()
}

pub fn unfold(
    ts: &TransitionSystem,
    c: &Component,
    q: &CondInvariant,
) -> Result<TransitionSystem, AnalyzeError> {
    let mut out = ts.clone();
    let mut hat: BTreeMap<LocId, LocId> = BTreeMap::new();
    for &l in &c.locations {
        let base = out.loc_name(l).to_string();
        let mut name = format!("{base}_h");
        let mut k = 1;
        while out.loc_by_name(&name).is_some() {
            name = format!("{base}_h{k}");
            k += 1;
        }
        let h = out.add_location(name, Provenance::Hatted(base));
        hat.insert(l, h);
    }
    let (entries, exits) = graph::entry_exit(ts, c);
    let mut to_remove: BTreeSet<usize> = BTreeSet::new();

    for id in &c.transitions {
        let t = ts.transition(*id).clone();
        to_remove.insert(*id);
        // Residual phase: one copy per disjunct of the negated invariant.
        for d in negation_disjuncts(q.at(t.source))? {
            let mut rel = t.relation.clone();
            rel.push(d);
            let rel = out.freshen_relation(&rel);
            out.add_transition(t.source, t.target, rel);
        }
        // Invariant phase on the hatted copy.
        let mut rel = t.relation.clone();
        rel.extend_from_slice(q.at(t.source));
        let rel = out.freshen_relation(&rel);
        out.add_transition(hat[&t.source], hat[&t.target], rel);
    }
    // Bridges: once the invariant holds the run may switch phases.
    for &l in &c.locations {
        if ts.transitions.iter().any(|t| c.transitions.contains(&t.id) && t.source == l) {
            out.add_transition(l, hat[&l], q.at(l).to_vec());
        }
    }
    for id in &entries {
        let t = ts.transition(*id).clone();
        to_remove.insert(*id);
        let target_inv: Vec<Atom> = q.at(t.target).iter().map(|a| a.primed()).collect();
        // Conjoining primed atoms would silently drop the implicit frame
        // v' = v for variables the entry does not update; materialize it.
        let frames = frames_for(ts, &t, &target_inv);
        for d in negation_disjuncts(&target_inv)? {
            let mut rel = t.relation.clone();
            rel.extend_from_slice(&frames_for(ts, &t, std::slice::from_ref(&d)));
            rel.push(d);
            let rel = out.freshen_relation(&rel);
            out.add_transition(t.source, t.target, rel);
        }
        let mut rel = t.relation.clone();
        rel.extend_from_slice(&frames);
        rel.extend_from_slice(&target_inv);
        let rel = out.freshen_relation(&rel);
        out.add_transition(t.source, hat[&t.target], rel);
    }
    for id in &exits {
        // Exits stay and get a duplicate from the hatted source.
        let t = ts.transition(*id).clone();
        let rel = out.freshen_relation(&t.relation);
        out.add_transition(hat[&t.source], t.target, rel);
    }
    out.remove_transitions(&to_remove);
    out.prune_unreachable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Every component terminates from every initial state.
    Proved,
    /// Termination proved under the returned entry precondition.
    Conditional,
    /// No proof; the bound is reported as infinite.
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct AnalysisResult {
    pub ts: TransitionSystem,
    pub proofs: Vec<(Component, TerminationProof)>,
    /// Unprimed atoms over the entry state under which the proofs hold.
    pub pre: Vec<Atom>,
    pub verdict: Verdict,
}

const PHASE_BUDGET: usize = 8;

/// Full termination analysis: prove every nontrivial component, unfolding on
/// conditional proofs; when a residual phase stays unprovable, try to cut it
/// off behind an entry precondition.
pub fn analyze(input: &TransitionSystem) -> Result<AnalysisResult, AnalyzeError> {
    let mut ts = input.clone();
    let mut pre: Vec<Atom> = Vec::new();
    let mut conditional = false;

    enum Action {
        Unfold(Component, CondInvariant),
        Drop(Component),
    }

    for _ in 0..=PHASE_BUDGET {
        let comps = graph::nontrivial_sccs(&ts);
        let mut proofs = Vec::new();
        let mut action: Option<Action> = None;
        for c in comps {
            match prove_component(&ts, &c)? {
                ProveOutcome::Proved(p) => proofs.push((c, p)),
                ProveOutcome::Conditional(_, q) => {
                    action = Some(Action::Unfold(c, q));
                    break;
                }
                ProveOutcome::Unprovable => {
                    action = Some(Action::Drop(c));
                    break;
                }
            }
        }
        match action {
            None => {
                let verdict = if conditional { Verdict::Conditional } else { Verdict::Proved };
                return Ok(AnalysisResult { ts, proofs, pre, verdict });
            }
            Some(Action::Unfold(c, q)) => {
                ts = unfold(&ts, &c, &q)?;
            }
            Some(Action::Drop(c)) => {
                match cut_component(&mut ts, &c)? {
                    Some(mut atoms) => {
                        conditional = true;
                        atoms.retain(|a| !pre.contains(a));
                        pre.extend(atoms);
                    }
                    None => {
                        return Ok(AnalysisResult {
                            ts,
                            proofs: Vec::new(),
                            pre,
                            verdict: Verdict::Failed(
                                "component admits no termination proof".into(),
                            ),
                        });
                    }
                }
            }
        }
    }
    Err(AnalyzeError::PhaseBudget(PHASE_BUDGET))
}

/// Try to make an unprovable component unreachable by strengthening the entry
/// condition. Every transition into the component must start at the system
/// entry and be disabled by an unprimed atom derived from its own relation.
fn cut_component(
    ts: &mut TransitionSystem,
    c: &Component,
) -> Result<Option<Vec<Atom>>, AnalyzeError> {
    let (entries, _) = graph::entry_exit(ts, c);
    if entries.is_empty() {
        return Ok(None);
    }
    let mut pre: Vec<Atom> = Vec::new();
    for id in &entries {
        let t = ts.transition(*id).clone();
        if t.source != ts.entry {
            return Ok(None);
        }
        // Candidate blockers: negations of purely next-state atoms of the
        // entry transition, read back over current-state variables.
        let mut blocked = false;
        for a in &t.relation {
            if a.rel != Rel::Le
                || a.mentions_undefined()
                || a.term.coeffs.keys().any(|v| !v.primed)
            {
                continue;
            }
            let candidate =
                a.negate_le().map_vars(|v| Var { id: v.id.clone(), primed: false });
            // Does the candidate disable this entry transition?
            let mut atoms = ts.full_relation(&t);
            atoms.push(candidate.clone());
            if !linear::atoms_feasible(&atoms).map_err(AnalyzeError::Linear)? {
                if !pre.contains(&candidate) {
                    pre.push(candidate);
                }
                blocked = true;
                break;
            }
        }
        if !blocked {
            return Ok(None);
        }
    }
    // Drop the component and its entries, then prune.
    let mut gone = c.transitions.clone();
    gone.extend(entries.iter().cloned());
    ts.remove_transitions(&gone);
    ts.prune_unreachable();
    Ok(Some(pre))
}
