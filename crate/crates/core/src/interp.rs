//! Concrete random executor for transition systems. Used as a ground-truth
//! oracle: any terminating run's step count must stay below a claimed bound.

use std::collections::BTreeMap;

use num_traits::{Signed, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::its::{Atom, Int, LinTerm, LocId, Rel, TransitionSystem, Var, VarId, VarKind};

pub type Valuation = BTreeMap<VarId, Int>;

#[derive(Clone, Debug)]
pub struct Trace {
    /// Visited states, starting with the initial state at the entry location.
    pub states: Vec<(LocId, Valuation)>,
    /// Transition ids taken, one per step.
    pub taken: Vec<usize>,
    /// True when the run stopped because no transition was enabled.
    pub terminated: bool,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.taken.len()
    }
}

fn random_int(rng: &mut ChaCha8Rng, range: u64) -> Int {
    let r = range as i64;
    Int::from(rng.gen_range(-r..=r))
}

/// Seeded random initial state with |v| <= range for every state variable.
pub fn random_valuation(vars: &[VarId], seed: u64, range: u64) -> Valuation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vars.iter()
        .filter(|v| v.is_state())
        .map(|v| (v.clone(), random_int(&mut rng, range)))
        .collect()
}

/// Attempt to fire `t` from `val`, with this transition's undefined variables
/// already drawn in `undefs`. Returns the successor valuation when enabled.
fn fire(
    ts: &TransitionSystem,
    t: &crate::its::Transition,
    val: &Valuation,
    undefs: &BTreeMap<VarId, Int>,
    rng: &mut ChaCha8Rng,
    range: u64,
) -> Option<Valuation> {
    // Known values: unprimed state vars and undefined vars.
    let mut primed: BTreeMap<VarId, Int> = BTreeMap::new();
    let known = |primed: &BTreeMap<VarId, Int>, v: &Var| -> Option<Int> {
        if v.id.kind == VarKind::Undefined {
            undefs.get(&v.id).cloned()
        } else if v.primed {
            primed.get(&v.id).cloned()
        } else {
            val.get(&v.id).cloned()
        }
    };
    // Propagate equalities that pin down a single primed variable.
    loop {
        let mut progress = false;
        for a in &t.relation {
            if a.rel != Rel::Eq {
                continue;
            }
            let mut unknown: Option<(&Var, &Int)> = None;
            let mut rest = a.term.constant.clone();
            let mut bad = false;
            for (v, c) in &a.term.coeffs {
                match known(&primed, v) {
                    Some(x) => rest += c * x,
                    None => {
                        if unknown.is_some() {
                            bad = true;
                            break;
                        }
                        unknown = Some((v, c));
                    }
                }
            }
            if bad {
                continue;
            }
            if let Some((v, c)) = unknown {
                // c * v + rest = 0
                if (&rest % c).is_zero() {
                    let value = -(&rest / c);
                    if v.primed && v.id.is_state() {
                        primed.insert(v.id.clone(), value);
                        progress = true;
                    }
                } else {
                    return None; // no integer solution for this draw
                }
            }
        }
        if !progress {
            break;
        }
    }
    // Mentioned primed variables still unresolved get random draws; unmentioned
    // ones are framed to their current value.
    for v in t.primed_vars() {
        if !primed.contains_key(&v) {
            primed.insert(v.clone(), random_int(rng, range));
        }
    }
    for v in &ts.variables {
        if !primed.contains_key(v) {
            primed.insert(v.clone(), val.get(v).cloned().unwrap_or_else(Int::zero));
        }
    }
    // Check the whole relation under the completed assignment.
    let env = |v: &Var| -> Option<Int> {
        if v.id.kind == VarKind::Undefined {
            undefs.get(&v.id).cloned()
        } else if v.primed {
            primed.get(&v.id).cloned()
        } else {
            val.get(&v.id).cloned()
        }
    };
    for a in &t.relation {
        if !a.holds(&env)? {
            return None;
        }
    }
    Some(primed)
}

/// Run the system from `init` at the entry location. Undefined variables are
/// drawn uniformly from `[-range, range]`; among enabled transitions one is
/// chosen uniformly with the same generator. Stops after `cap` steps or when
/// no transition is enabled.
pub fn run(
    ts: &TransitionSystem,
    init: &Valuation,
    seed: u64,
    range: u64,
    cap: usize,
) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Valuation = ts
        .variables
        .iter()
        .map(|v| (v.clone(), init.get(v).cloned().unwrap_or_else(Int::zero)))
        .collect();
    let mut loc = ts.entry;
    let mut trace = Trace { states: vec![(loc, val.clone())], taken: Vec::new(), terminated: false };
    for _ in 0..cap {
        let mut outgoing: Vec<&crate::its::Transition> = ts.outgoing(loc).collect();
        outgoing.sort_by_key(|t| t.id);
        let mut enabled: Vec<(usize, LocId, Valuation)> = Vec::new();
        for t in &outgoing {
            let undefs: BTreeMap<VarId, Int> =
                t.undef_vars().into_iter().map(|u| (u, random_int(&mut rng, range))).collect();
            if let Some(next) = fire(ts, t, &val, &undefs, &mut rng, range) {
                enabled.push((t.id, t.target, next));
            }
        }
        if enabled.is_empty() {
            trace.terminated = true;
            return trace;
        }
        let pick = rng.gen_range(0..enabled.len());
        let (id, target, next) = enabled.swap_remove(pick);
        trace.taken.push(id);
        loc = target;
        val = next;
        trace.states.push((loc, val.clone()));
    }
    trace
}

/// Evaluate a linear term over unprimed state variables.
pub fn eval_term(t: &LinTerm<Var>, val: &Valuation) -> Option<Int> {
    t.eval(&|v: &Var| {
        if v.primed || !v.id.is_state() {
            None
        } else {
            val.get(&v.id).cloned()
        }
    })
}

/// Check unprimed atoms (e.g. a precondition) against a valuation.
pub fn atoms_hold(atoms: &[Atom], val: &Valuation) -> bool {
    atoms.iter().all(|a| {
        a.holds(&|v: &Var| {
            if v.primed || !v.id.is_state() {
                None
            } else {
                val.get(&v.id).cloned()
            }
        })
        .unwrap_or(false)
    })
}

/// Magnitude of a valuation: max absolute value over state variables, at
/// least one.
pub fn magnitude(val: &Valuation) -> Int {
    let mut m = Int::from(1);
    for v in val.values() {
        if v.abs() > m {
            m = v.abs();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::its::parse_its;

    fn fixture(name: &str) -> TransitionSystem {
        let path = format!("{}/../../fixtures/{}.its", env!("CARGO_MANIFEST_DIR"), name);
        parse_its(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let ts = fixture("aaron3");
        for seed in 0..20u64 {
            let init = random_valuation(&ts.variables, seed, 8);
            assert_eq!(init, random_valuation(&ts.variables, seed, 8));
            let a = run(&ts, &init, seed, 8, 100_000);
            let b = run(&ts, &init, seed, 8, 100_000);
            assert_eq!(a.taken, b.taken);
            assert_eq!(a.states, b.states);
            assert_eq!(a.terminated, b.terminated);
        }
    }

    #[test]
    fn traces_are_connected_and_respect_relations() {
        let ts = fixture("aaron3");
        for seed in 0..50u64 {
            let init = random_valuation(&ts.variables, seed, 8);
            let trace = run(&ts, &init, seed, 8, 10_000);
            assert_eq!(trace.states.len(), trace.taken.len() + 1);
            assert_eq!(trace.states[0], (ts.entry, init));
            for (step, tid) in trace.taken.iter().enumerate() {
                let t = ts.transition(*tid);
                assert_eq!(trace.states[step].0, t.source);
                assert_eq!(trace.states[step + 1].0, t.target);
                // State variables not constrained primed must be framed.
                let primed = t.primed_vars();
                for v in &ts.variables {
                    if !primed.contains(v) {
                        assert_eq!(trace.states[step].1[v], trace.states[step + 1].1[v]);
                    }
                }
            }
            if !trace.terminated {
                assert_eq!(trace.taken.len(), 10_000, "only the cap may cut a run short");
            }
        }
    }
}
