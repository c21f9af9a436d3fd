//! Exact rational linear arithmetic: feasibility with Farkas certificates,
//! entailment, and variable elimination over polyhedra given as systems of
//! `row . x <= b` constraints.
//!
//! Feasibility runs a phase-1 simplex with Bland's rule over arbitrary
//! precision rationals, so there is no cycling and no rounding. When the
//! primal system is infeasible, the Farkas multipliers are obtained by
//! solving the certificate system `{l >= 0, l A = 0, l b <= -1}` with the
//! same solver rather than reading them off the tableau.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::its::{Atom, Int, LinTerm, Rel};

pub type Rat = BigRational;

fn rat(i: &Int) -> Rat {
    Rat::from_integer(i.clone())
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum LinearError {
    #[error("constraint mentions variable outside the polyhedron's column set")]
    UnknownVariable,
    #[error("internal solver failure: {0}")]
    Internal(&'static str),
}

/// A polyhedron `{x | A x <= b}` over an explicit ordered column set.
/// Equalities are stored as two opposing inequality rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Polyhedron<V: Ord + Clone> {
    pub vars: Vec<V>,
    /// Each row is (coefficients per column, bound): `coeffs . x <= bound`.
    pub rows: Vec<(Vec<Int>, Int)>,
}

impl<V: Ord + Clone> Polyhedron<V> {
    pub fn new(vars: Vec<V>) -> Self {
        Polyhedron { vars, rows: Vec::new() }
    }

    pub fn col(&self, v: &V) -> Option<usize> {
        self.vars.iter().position(|w| w == v)
    }

    fn term_to_row(&self, t: &LinTerm<V>) -> Result<(Vec<Int>, Int), LinearError> {
        let mut row = vec![Int::zero(); self.vars.len()];
        for (v, c) in &t.coeffs {
            let j = self.col(v).ok_or(LinearError::UnknownVariable)?;
            row[j] = c.clone();
        }
        // t <= 0 is coeffs . x <= -constant
        Ok((row, -t.constant.clone()))
    }

    pub fn add_atom(&mut self, a: &Atom<V>) -> Result<(), LinearError> {
        let (row, b) = self.term_to_row(&a.term)?;
        match a.rel {
            Rel::Le => self.rows.push((row, b)),
            Rel::Eq => {
                self.rows.push((row.clone(), b.clone()));
                self.rows.push((row.iter().map(|c| -c).collect(), -b));
            }
        }
        Ok(())
    }

    pub fn from_atoms(vars: Vec<V>, atoms: &[Atom<V>]) -> Result<Self, LinearError> {
        let mut p = Polyhedron::new(vars);
        for a in atoms {
            p.add_atom(a)?;
        }
        Ok(p)
    }

    /// Collect the column set needed by a group of atoms, in key order.
    pub fn columns_of(atoms: &[Atom<V>]) -> Vec<V> {
        let mut set: Vec<V> = Vec::new();
        for a in atoms {
            for v in a.term.coeffs.keys() {
                if !set.contains(v) {
                    set.push(v.clone());
                }
            }
        }
        set.sort();
        set
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LpOutcome {
    /// A rational point satisfying every row, indexed like `vars`.
    Feasible(Vec<Rat>),
    /// Farkas certificate: nonnegative multipliers, one per row, with
    /// `l A = 0` and `l b < 0`.
    Infeasible(Vec<Rat>),
}

/// Phase-1 simplex over `{A x <= b}` with free variables. Returns a feasible
/// point or None.
fn phase1(rows: &[(Vec<Rat>, Rat)], nvars: usize) -> Option<Vec<Rat>> {
    let m = rows.len();
    if m == 0 {
        return Some(vec![Rat::zero(); nvars]);
    }
    // Columns: x+ (nvars), x- (nvars), slack (m), artificial (<= m), rhs.
    // Every equation: a.(x+ - x-) + s_i = b_i with b_i >= 0 after sign fix.
    let mut art_cols: Vec<Option<usize>> = vec![None; m];
    let mut n_art = 0;
    for (i, (_, b)) in rows.iter().enumerate() {
        if b.is_negative() {
            art_cols[i] = Some(n_art);
            n_art += 1;
        }
    }
    let ncols = 2 * nvars + m + n_art;
    let mut tab: Vec<Vec<Rat>> = Vec::with_capacity(m);
    let mut basis: Vec<usize> = Vec::with_capacity(m);
    for (i, (a, b)) in rows.iter().enumerate() {
        let neg = b.is_negative();
        let sign = if neg { -Rat::one() } else { Rat::one() };
        let mut row = vec![Rat::zero(); ncols + 1];
        for j in 0..nvars {
            row[j] = &a[j] * &sign;
            row[nvars + j] = -&a[j] * &sign;
        }
        row[2 * nvars + i] = sign.clone();
        row[ncols] = b * &sign;
        if let Some(k) = art_cols[i] {
            row[2 * nvars + m + k] = Rat::one();
            basis.push(2 * nvars + m + k);
        } else {
            basis.push(2 * nvars + i);
        }
        tab.push(row);
    }
    // Objective: minimize sum of artificials. Reduced-cost row z.
    let mut z = vec![Rat::zero(); ncols + 1];
    for i in 0..m {
        if art_cols[i].is_some() {
            for j in 0..=ncols {
                let v = tab[i][j].clone();
                z[j] += v;
            }
        }
    }
    for i in 0..m {
        if art_cols[i].is_some() {
            // Artificial columns have cost 1; subtract to get reduced costs.
            let col = 2 * nvars + m + art_cols[i].unwrap();
            z[col] -= Rat::one();
        }
    }
    loop {
        // Bland: entering column = smallest index with positive z coefficient
        // (we maximize -sum(art), i.e. reduce objective while z_j > 0).
        let mut enter = None;
        for (j, zj) in z.iter().enumerate().take(ncols) {
            if zj.is_positive() {
                enter = Some(j);
                break;
            }
        }
        let enter = match enter {
            Some(j) => j,
            None => break,
        };
        // Ratio test; Bland tie-break by smallest basis variable index.
        let mut leave: Option<(usize, Rat)> = None;
        for i in 0..m {
            if tab[i][enter].is_positive() {
                let ratio = &tab[i][ncols] / &tab[i][enter];
                match &leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < *lr || (ratio == *lr && basis[i] < basis[*li]) {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let (li, _) = leave?; // unbounded objective cannot happen in phase 1
        // Pivot on (li, enter).
        let piv = tab[li][enter].clone();
        for j in 0..=ncols {
            tab[li][j] = &tab[li][j] / &piv;
        }
        for i in 0..m {
            if i != li && !tab[i][enter].is_zero() {
                let f = tab[i][enter].clone();
                for j in 0..=ncols {
                    let d = &tab[li][j] * &f;
                    tab[i][j] -= d;
                }
            }
        }
        if !z[enter].is_zero() {
            let f = z[enter].clone();
            for j in 0..=ncols {
                let d = &tab[li][j] * &f;
                z[j] -= d;
            }
        }
        basis[li] = enter;
    }
    // Feasible iff objective value (sum of artificials) is zero.
    if !z[ncols].is_zero() {
        return None;
    }
    let mut x = vec![Rat::zero(); nvars];
    for i in 0..m {
        let b = basis[i];
        let val = tab[i][ncols].clone();
        if b < nvars {
            x[b] += val;
        } else if b < 2 * nvars {
            x[b - nvars] -= val;
        }
    }
    Some(x)
}

/// Decide feasibility of `p`, producing a witness point or a Farkas
/// certificate of infeasibility.
pub fn lp_feasible<V: Ord + Clone>(p: &Polyhedron<V>) -> Result<LpOutcome, LinearError> {
    let n = p.vars.len();
    let rows: Vec<(Vec<Rat>, Rat)> = p
        .rows
        .iter()
        .map(|(a, b)| (a.iter().map(rat).collect(), rat(b)))
        .collect();
    if let Some(x) = phase1(&rows, n) {
        debug_assert!(check_point(p, &x));
        return Ok(LpOutcome::Feasible(x));
    }
    // Certificate system over multipliers l_i >= 0:
    //   sum_i l_i a_ij = 0 for every column j, and sum_i l_i b_i <= -1.
    let m = p.rows.len();
    let mut crows: Vec<(Vec<Rat>, Rat)> = Vec::new();
    for j in 0..n {
        let col: Vec<Rat> = (0..m).map(|i| rat(&p.rows[i].0[j])).collect();
        crows.push((col.clone(), Rat::zero()));
        crows.push((col.iter().map(|c| -c).collect(), Rat::zero()));
    }
    crows.push(((0..m).map(|i| rat(&p.rows[i].1)).collect(), -Rat::one()));
    for i in 0..m {
        let mut r = vec![Rat::zero(); m];
        r[i] = -Rat::one();
        crows.push((r, Rat::zero()));
    }
    let l = phase1(&crows, m)
        .ok_or(LinearError::Internal("infeasible system without Farkas certificate"))?;
    debug_assert!(check_certificate(p, &l));
    Ok(LpOutcome::Infeasible(l))
}

pub fn is_feasible<V: Ord + Clone>(p: &Polyhedron<V>) -> Result<bool, LinearError> {
    Ok(matches!(lp_feasible(p)?, LpOutcome::Feasible(_)))
}

/// Check a claimed feasible point by substitution.
pub fn check_point<V: Ord + Clone>(p: &Polyhedron<V>, x: &[Rat]) -> bool {
    p.rows.iter().all(|(a, b)| {
        let lhs: Rat = a.iter().zip(x).map(|(c, v)| rat(c) * v).sum();
        lhs <= rat(b)
    })
}

/// Check a claimed Farkas certificate by substitution.
pub fn check_certificate<V: Ord + Clone>(p: &Polyhedron<V>, l: &[Rat]) -> bool {
    if l.len() != p.rows.len() || l.iter().any(|v| v.is_negative()) {
        return false;
    }
    for j in 0..p.vars.len() {
        let s: Rat = p.rows.iter().zip(l).map(|((a, _), li)| rat(&a[j]) * li).sum();
        if !s.is_zero() {
            return false;
        }
    }
    let s: Rat = p.rows.iter().zip(l).map(|((_, b), li)| rat(b) * li).sum();
    s.is_negative()
}

/// Does `p` entail `coeffs . x <= bound`? Uses Farkas' lemma: either the
/// target is a nonnegative combination of the rows, or `p` itself is empty.
pub fn entails_row<V: Ord + Clone>(
    p: &Polyhedron<V>,
    coeffs: &[Int],
    bound: &Int,
) -> Result<bool, LinearError> {
    debug_assert_eq!(coeffs.len(), p.vars.len());
    let m = p.rows.len();
    let n = p.vars.len();
    // Multipliers l_i >= 0 with l A = coeffs and l b <= bound.
    let mut crows: Vec<(Vec<Rat>, Rat)> = Vec::new();
    for j in 0..n {
        let col: Vec<Rat> = (0..m).map(|i| rat(&p.rows[i].0[j])).collect();
        crows.push((col.clone(), rat(&coeffs[j])));
        crows.push((col.iter().map(|c| -c).collect(), -rat(&coeffs[j])));
    }
    crows.push(((0..m).map(|i| rat(&p.rows[i].1)).collect(), rat(bound)));
    for i in 0..m {
        let mut r = vec![Rat::zero(); m];
        r[i] = -Rat::one();
        crows.push((r, Rat::zero()));
    }
    if phase1(&crows, m).is_some() {
        return Ok(true);
    }
    // Not derivable as a combination: entailed only vacuously.
    Ok(!is_feasible(p)?)
}

/// Does `p` entail the atom?
pub fn entails_atom<V: Ord + Clone>(p: &Polyhedron<V>, a: &Atom<V>) -> Result<bool, LinearError> {
    let mut coeffs = vec![Int::zero(); p.vars.len()];
    for (v, c) in &a.term.coeffs {
        match p.col(v) {
            Some(j) => coeffs[j] = c.clone(),
            None => {
                // A variable unconstrained by p: only entailed when its
                // coefficient is irrelevant, which it is not here; fall back
                // to vacuous entailment.
                return Ok(!is_feasible(p)?);
            }
        }
    }
    let bound = -a.term.constant.clone();
    match a.rel {
        Rel::Le => entails_row(p, &coeffs, &bound),
        Rel::Eq => {
            if !entails_row(p, &coeffs, &bound)? {
                return Ok(false);
            }
            let neg: Vec<Int> = coeffs.iter().map(|c| -c).collect();
            entails_row(p, &neg, &-bound)
        }
    }
}

/// Entailment of atoms against an atom list over a shared variable universe.
pub fn atoms_entail<V: Ord + Clone>(
    premises: &[Atom<V>],
    conclusion: &Atom<V>,
) -> Result<bool, LinearError> {
    let mut vars = Polyhedron::columns_of(premises);
    for v in conclusion.term.coeffs.keys() {
        if !vars.contains(v) {
            vars.push(v.clone());
        }
    }
    vars.sort();
    let p = Polyhedron::from_atoms(vars, premises)?;
    entails_atom(&p, conclusion)
}

pub fn atoms_feasible<V: Ord + Clone>(atoms: &[Atom<V>]) -> Result<bool, LinearError> {
    let p = Polyhedron::from_atoms(Polyhedron::columns_of(atoms), atoms)?;
    is_feasible(&p)
}

fn row_gcd_normalize(row: &mut Vec<Int>, b: &mut Int) {
    use num_integer::Integer;
    let mut g = BigInt::zero();
    for c in row.iter() {
        g = g.gcd(c);
    }
    g = g.gcd(b);
    if g > BigInt::one() {
        for c in row.iter_mut() {
            *c /= &g;
        }
        *b /= &g;
    }
}

/// Fourier-Motzkin elimination of `drop` columns, with entailment-based
/// redundancy pruning. Result is a polyhedron over the remaining columns
/// whose integer solutions include every projection of a solution of `p`
/// (exact over the rationals).
pub fn project<V: Ord + Clone>(
    p: &Polyhedron<V>,
    drop: &[V],
) -> Result<Polyhedron<V>, LinearError> {
    let mut vars = p.vars.clone();
    let mut rows = p.rows.clone();
    for v in drop {
        let j = match vars.iter().position(|w| w == v) {
            Some(j) => j,
            None => continue,
        };
        let mut pos: Vec<(Vec<Int>, Int)> = Vec::new();
        let mut neg: Vec<(Vec<Int>, Int)> = Vec::new();
        let mut rest: Vec<(Vec<Int>, Int)> = Vec::new();
        for (a, b) in rows {
            if a[j].is_positive() {
                pos.push((a, b));
            } else if a[j].is_negative() {
                neg.push((a, b));
            } else {
                rest.push((a, b));
            }
        }
        for (pa, pb) in &pos {
            for (na, nb) in &neg {
                // pa[j] > 0, na[j] < 0: combine |na[j]|*pos + pa[j]*neg.
                let cp = -&na[j];
                let cn = pa[j].clone();
                let mut row: Vec<Int> =
                    pa.iter().zip(na).map(|(x, y)| x * &cp + y * &cn).collect();
                let mut b = pb * &cp + nb * &cn;
                debug_assert!(row[j].is_zero());
                row_gcd_normalize(&mut row, &mut b);
                rest.push((row, b));
            }
        }
        // Remove the dead column.
        for (a, _) in rest.iter_mut() {
            a.remove(j);
        }
        vars.remove(j);
        rows = rest;
    }
    // Redundancy pruning: drop rows entailed by the others.
    let mut kept: Vec<(Vec<Int>, Int)> = Vec::new();
    for i in 0..rows.len() {
        let mut others = kept.clone();
        others.extend_from_slice(&rows[i + 1..]);
        let q = Polyhedron { vars: vars.clone(), rows: others };
        if !entails_row(&q, &rows[i].0, &rows[i].1)? {
            kept.push(rows[i].clone());
        }
    }
    Ok(Polyhedron { vars, rows: kept })
}

/// Render a polyhedron's rows back into canonical atoms.
pub fn rows_to_atoms<V: Ord + Clone>(p: &Polyhedron<V>) -> Vec<Atom<V>> {
    p.rows
        .iter()
        .map(|(a, b)| {
            let mut t = LinTerm::constant(-b.clone());
            for (j, c) in a.iter().enumerate() {
                t.add_coeff(p.vars[j].clone(), c);
            }
            Atom::le(t)
        })
        .collect()
}

/// Clear denominators of a rational vector, returning integers scaled by the
/// lcm of denominators (a positive factor, preserving all inequalities).
pub fn clear_denominators(xs: &[Rat]) -> Vec<Int> {
    use num_integer::Integer;
    let mut l = BigInt::one();
    for x in xs {
        l = l.lcm(x.denom());
    }
    xs.iter().map(|x| (x * rat(&l)).to_integer()).collect()
}

/// Solution map keyed by variable, for callers that want names.
pub fn witness_map<V: Ord + Clone>(p: &Polyhedron<V>, x: &[Rat]) -> BTreeMap<V, Rat> {
    p.vars.iter().cloned().zip(x.iter().cloned()).collect()
}
