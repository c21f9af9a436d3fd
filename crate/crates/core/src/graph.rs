//! Control-flow structure: strongly connected components, component
//! boundaries, and cycle enumeration through a loop-head location.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::graph::{DiGraph, NodeIndex};
use thiserror::Error;

use crate::its::{LocId, TransitionSystem};

#[derive(Error, Debug, PartialEq, Eq)]
pub enum GraphError {
    #[error("cycle enumeration exceeded {0} cycles")]
    CycleBudget(usize),
}

/// A component of a system: a set of locations plus the transitions internal
/// to it (both endpoints inside).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub locations: BTreeSet<LocId>,
    pub transitions: BTreeSet<usize>,
}

impl Component {
    pub fn is_trivial(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Strongly connected components of the subgraph induced by `locs` and
/// `trans` (transition ids). Returned in reverse topological order
/// (successors before predecessors), deterministically.
pub fn sccs_of(
    ts: &TransitionSystem,
    locs: &BTreeSet<LocId>,
    trans: &BTreeSet<usize>,
) -> Vec<Component> {
    let mut g: DiGraph<LocId, usize> = DiGraph::new();
    let mut nodes: BTreeMap<LocId, NodeIndex> = BTreeMap::new();
    for &l in locs {
        nodes.insert(l, g.add_node(l));
    }
    for t in &ts.transitions {
        if trans.contains(&t.id) && locs.contains(&t.source) && locs.contains(&t.target) {
            g.add_edge(nodes[&t.source], nodes[&t.target], t.id);
        }
    }
    let comps = petgraph::algo::tarjan_scc(&g);
    comps
        .into_iter()
        .map(|ixs| {
            let locations: BTreeSet<LocId> = ixs.iter().map(|ix| g[*ix]).collect();
            let transitions = ts
                .transitions
                .iter()
                .filter(|t| {
                    trans.contains(&t.id)
                        && locations.contains(&t.source)
                        && locations.contains(&t.target)
                })
                .map(|t| t.id)
                .collect();
            Component { locations, transitions }
        })
        .collect()
}

/// SCCs of the whole system over reachable locations.
pub fn sccs(ts: &TransitionSystem) -> Vec<Component> {
    let locs = ts.reachable_locations();
    let trans = ts.transitions.iter().map(|t| t.id).collect();
    sccs_of(ts, &locs, &trans)
}

pub fn nontrivial_sccs(ts: &TransitionSystem) -> Vec<Component> {
    sccs(ts).into_iter().filter(|c| !c.is_trivial()).collect()
}

/// Transitions entering the component from outside (entry transitions) and
/// leaving it (exit transitions), by id.
pub fn entry_exit(ts: &TransitionSystem, c: &Component) -> (Vec<usize>, Vec<usize>) {
    let mut entries = Vec::new();
    let mut exits = Vec::new();
    for t in &ts.transitions {
        let s_in = c.locations.contains(&t.source);
        let t_in = c.locations.contains(&t.target);
        let internal = c.transitions.contains(&t.id);
        if internal {
            continue;
        }
        if t_in && !s_in {
            entries.push(t.id);
        }
        if s_in && !t_in {
            exits.push(t.id);
        }
        // A non-internal transition with both endpoints inside counts as both
        // leaving and re-entering the component's loop structure; callers that
        // split components handle those explicitly.
    }
    (entries, exits)
}

/// Entry locations: targets of entry transitions.
pub fn entry_locations(ts: &TransitionSystem, c: &Component) -> BTreeSet<LocId> {
    let (entries, _) = entry_exit(ts, c);
    let mut out: BTreeSet<LocId> = entries.iter().map(|id| ts.transition(*id).target).collect();
    if c.locations.contains(&ts.entry) {
        out.insert(ts.entry);
    }
    out
}

/// One cycle through the loop head of a component: the first transition (from
/// the head into the body or back to the head) followed by the sequence of
/// condensed body components visited before returning to the head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadCycle {
    pub first: usize,
    /// Indices into the sub-component list returned alongside.
    pub body_seq: Vec<usize>,
}

/// Sub-components of `c` with the head removed (SCCs of the rest, trivial
/// ones included), plus all cycles through the head in the condensed graph.
/// Cycles are keyed by distinct first transition and distinct body sequence.
pub fn cycles_through_head(
    ts: &TransitionSystem,
    c: &Component,
    head: LocId,
    budget: usize,
) -> Result<(Vec<Component>, Vec<HeadCycle>), GraphError> {
    let mut body_locs = c.locations.clone();
    body_locs.remove(&head);
    let subs = sccs_of(ts, &body_locs, &c.transitions);
    let comp_of = |l: LocId| subs.iter().position(|s| s.locations.contains(&l));

    // Condensed edges: from head or a sub-component to another vertex.
    // Vertex encoding: None = head, Some(i) = sub-component i.
    let mut edges: Vec<(Option<usize>, Option<usize>, usize)> = Vec::new();
    for id in &c.transitions {
        let t = ts.transition(*id);
        let sv = if t.source == head { None } else { comp_of(t.source).map(Some).unwrap_or(None) };
        let tv = if t.target == head { None } else { comp_of(t.target).map(Some).unwrap_or(None) };
        if sv == tv && sv.is_some() {
            continue; // internal to a sub-component
        }
        edges.push((sv, tv, *id));
    }

    let mut cycles = Vec::new();
    // Depth-first over distinct body sequences, first transition fixed.
    fn dfs(
        at: Option<usize>,
        seq: &mut Vec<usize>,
        first: usize,
        edges: &[(Option<usize>, Option<usize>, usize)],
        cycles: &mut Vec<HeadCycle>,
        budget: usize,
    ) -> Result<(), GraphError> {
        if cycles.len() > budget {
            return Err(GraphError::CycleBudget(budget));
        }
        if at.is_none() {
            cycles.push(HeadCycle { first, body_seq: seq.clone() });
            return Ok(());
        }
        let mut nexts: Vec<Option<usize>> = Vec::new();
        for (s, t, _) in edges {
            if *s == at && !nexts.contains(t) {
                nexts.push(*t);
            }
        }
        for n in nexts {
            if let Some(i) = n {
                if seq.contains(&i) {
                    continue; // simple cycles only
                }
                seq.push(i);
                dfs(n, seq, first, edges, cycles, budget)?;
                seq.pop();
            } else {
                dfs(None, seq, first, edges, cycles, budget)?;
            }
        }
        Ok(())
    }
    let mut firsts: Vec<(usize, Option<usize>)> = edges
        .iter()
        .filter(|(s, _, _)| s.is_none())
        .map(|(_, t, id)| (*id, *t))
        .collect();
    firsts.sort();
    for (id, tv) in firsts {
        let mut seq = Vec::new();
        if let Some(i) = tv {
            seq.push(i);
        }
        dfs(tv, &mut seq, id, &edges, &mut cycles, budget)?;
    }
    Ok((subs, cycles))
}

/// Shortest path from `from` to `to` using the component's internal
/// transitions; ties broken by smallest transition id at each hop. Returns
/// the visited locations in order.
pub fn shortest_path(
    ts: &TransitionSystem,
    c: &Component,
    from: LocId,
    to: LocId,
) -> Option<Vec<LocId>> {
    if from == to {
        return Some(vec![from]);
    }
    let mut prev: BTreeMap<LocId, LocId> = BTreeMap::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(from);
    let mut seen = BTreeSet::new();
    seen.insert(from);
    // Explore transitions in id order so parents are deterministic.
    let mut internal: Vec<&crate::its::Transition> =
        ts.transitions.iter().filter(|t| c.transitions.contains(&t.id)).collect();
    internal.sort_by_key(|t| t.id);
    while let Some(l) = queue.pop_front() {
        for t in internal.iter().filter(|t| t.source == l) {
            if seen.insert(t.target) {
                prev.insert(t.target, l);
                if t.target == to {
                    let mut path = vec![to];
                    let mut cur = to;
                    while let Some(&p) = prev.get(&cur) {
                        path.push(p);
                        cur = p;
                        if cur == from {
                            break;
                        }
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(t.target);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::its::{parse_its, TransitionSystem};

    fn corpus() -> Vec<(String, TransitionSystem)> {
        let dir = format!("{}/../../fixtures", env!("CARGO_MANIFEST_DIR"));
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|x| x == "its") {
                let text = std::fs::read_to_string(&path).unwrap();
                let name = path.file_stem().unwrap().to_string_lossy().into_owned();
                out.push((name, parse_its(&text).unwrap()));
            }
        }
        out
    }

    #[test]
    fn sccs_partition_locations_and_claim_internal_transitions() {
        for (name, ts) in corpus() {
            let comps = sccs(&ts);
            let mut seen: BTreeSet<LocId> = BTreeSet::new();
            for c in &comps {
                for l in &c.locations {
                    assert!(seen.insert(*l), "{name}: location in two components");
                }
                for id in &c.transitions {
                    let t = ts.transition(*id);
                    assert!(c.locations.contains(&t.source), "{name}");
                    assert!(c.locations.contains(&t.target), "{name}");
                }
            }
            let all: BTreeSet<LocId> = (0..ts.locations.len()).collect();
            assert_eq!(seen, all, "{name}");
            for t in &ts.transitions {
                let owner = comps.iter().find(|c| c.locations.contains(&t.source)).unwrap();
                if owner.locations.contains(&t.target) {
                    assert!(owner.transitions.contains(&t.id), "{name}: internal transition unclaimed");
                } else {
                    assert!(comps.iter().all(|c| !c.transitions.contains(&t.id)), "{name}");
                }
            }
        }
    }

    #[test]
    fn sccs_come_out_in_reverse_topological_order() {
        for (name, ts) in corpus() {
            let comps = sccs(&ts);
            let index_of =
                |l: LocId| comps.iter().position(|c| c.locations.contains(&l)).unwrap();
            for t in &ts.transitions {
                let (s, d) = (index_of(t.source), index_of(t.target));
                if s != d {
                    assert!(d < s, "{name}: successor component must precede its predecessor");
                }
            }
        }
    }

    #[test]
    fn entry_locations_are_the_externally_reachable_ones() {
        for (name, ts) in corpus() {
            for c in nontrivial_sccs(&ts) {
                let entries = entry_locations(&ts, &c);
                for l in &c.locations {
                    let external = *l == ts.entry
                        || ts.incoming(*l).any(|t| !c.locations.contains(&t.source));
                    assert_eq!(entries.contains(l), external, "{name}");
                }
            }
        }
    }
}
