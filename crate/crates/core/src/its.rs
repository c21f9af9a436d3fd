//! Integer transition systems: data model, textual format, canonicalization.
//!
//! A system is a control-flow graph whose transitions carry conjunctions of
//! linear integer constraints over current (unprimed) and next-state (primed)
//! variables. Strict comparisons are canonicalized away at parse time
//! (`a < b` becomes `a <= b - 1`), so everything downstream deals with `<=`
//! and `=` only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

pub type Int = BigInt;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum VarKind {
    Program,
    Undefined,
    Flag,
}

/// A named variable. Undefined variables are existentially scoped to a single
/// transition and get a fresh numeric suffix when a system is built, so names
/// are unique system-wide for every kind.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct VarId {
    pub name: String,
    pub kind: VarKind,
}

impl VarId {
    pub fn program(name: &str) -> Self {
        VarId { name: name.to_string(), kind: VarKind::Program }
    }
    pub fn undefined(name: &str) -> Self {
        VarId { name: name.to_string(), kind: VarKind::Undefined }
    }
    pub fn flag(name: &str) -> Self {
        VarId { name: name.to_string(), kind: VarKind::Flag }
    }
    /// Program and flag variables are both state variables of the system.
    pub fn is_state(&self) -> bool {
        matches!(self.kind, VarKind::Program | VarKind::Flag)
    }
}

/// A variable occurrence inside a constraint: possibly primed.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct Var {
    pub id: VarId,
    pub primed: bool,
}

impl Var {
    pub fn unprimed(id: VarId) -> Self {
        Var { id, primed: false }
    }
    pub fn primed(id: VarId) -> Self {
        Var { id, primed: true }
    }
}

/// Integer-coefficient linear expression over a generic variable key.
/// The coefficient map never stores zero entries.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash, Default)]
pub struct LinTerm<V: Ord + Clone = Var> {
    pub coeffs: BTreeMap<V, Int>,
    pub constant: Int,
}

impl<V: Ord + Clone> LinTerm<V> {
    pub fn zero() -> Self {
        LinTerm { coeffs: BTreeMap::new(), constant: Int::zero() }
    }

    pub fn constant(c: Int) -> Self {
        LinTerm { coeffs: BTreeMap::new(), constant: c }
    }

    pub fn var(v: V) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(v, Int::one());
        LinTerm { coeffs, constant: Int::zero() }
    }

    pub fn add_coeff(&mut self, v: V, c: &Int) {
        if c.is_zero() {
            return;
        }
        let entry = self.coeffs.entry(v.clone()).or_insert_with(Int::zero);
        *entry += c;
        if entry.is_zero() {
            self.coeffs.remove(&v);
        }
    }

    pub fn coeff(&self, v: &V) -> Int {
        self.coeffs.get(v).cloned().unwrap_or_else(Int::zero)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (v, c) in &other.coeffs {
            out.add_coeff(v.clone(), c);
        }
        out.constant += &other.constant;
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(&-Int::one()))
    }

    pub fn scale(&self, k: &Int) -> Self {
        if k.is_zero() {
            return LinTerm::zero();
        }
        LinTerm {
            coeffs: self.coeffs.iter().map(|(v, c)| (v.clone(), c * k)).collect(),
            constant: &self.constant * k,
        }
    }

    pub fn add_const(&self, k: &Int) -> Self {
        let mut out = self.clone();
        out.constant += k;
        out
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Rewrite every variable key through `f`, merging coefficients.
    pub fn map_vars<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> W) -> LinTerm<W> {
        let mut out = LinTerm::<W>::constant(self.constant.clone());
        for (v, c) in &self.coeffs {
            out.add_coeff(f(v), c);
        }
        out
    }

    /// Substitute some variables by linear terms, keeping the rest.
    pub fn substitute(&self, subst: &BTreeMap<V, LinTerm<V>>) -> Self {
        let mut out = LinTerm::constant(self.constant.clone());
        for (v, c) in &self.coeffs {
            match subst.get(v) {
                Some(t) => out = out.add(&t.scale(c)),
                None => out.add_coeff(v.clone(), c),
            }
        }
        out
    }

    pub fn eval(&self, env: &impl Fn(&V) -> Option<Int>) -> Option<Int> {
        let mut acc = self.constant.clone();
        for (v, c) in &self.coeffs {
            acc += c * env(v)?;
        }
        Some(acc)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum Rel {
    /// term <= 0
    Le,
    /// term = 0
    Eq,
}

/// A canonical linear constraint `term <= 0` or `term = 0`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct Atom<V: Ord + Clone = Var> {
    pub term: LinTerm<V>,
    pub rel: Rel,
}

impl<V: Ord + Clone> Atom<V> {
    pub fn le(term: LinTerm<V>) -> Self {
        Atom { term, rel: Rel::Le }
    }
    pub fn eq(term: LinTerm<V>) -> Self {
        Atom { term, rel: Rel::Eq }
    }
    /// lhs <= rhs
    pub fn le_terms(lhs: &LinTerm<V>, rhs: &LinTerm<V>) -> Self {
        Atom::le(lhs.sub(rhs))
    }
    /// lhs = rhs
    pub fn eq_terms(lhs: &LinTerm<V>, rhs: &LinTerm<V>) -> Self {
        Atom::eq(lhs.sub(rhs))
    }
    /// Negation over the integers; only defined for `<=` atoms:
    /// not(t <= 0) is t >= 1, i.e. -t + 1 <= 0.
    pub fn negate_le(&self) -> Atom<V> {
        debug_assert_eq!(self.rel, Rel::Le);
        Atom::le(self.term.scale(&-Int::one()).add_const(&Int::one()))
    }
    pub fn map_vars<W: Ord + Clone>(&self, f: impl FnMut(&V) -> W) -> Atom<W> {
        Atom { term: self.term.map_vars(f), rel: self.rel }
    }
    pub fn holds(&self, env: &impl Fn(&V) -> Option<Int>) -> Option<bool> {
        let v = self.term.eval(env)?;
        Some(match self.rel {
            Rel::Le => v <= Int::zero(),
            Rel::Eq => v.is_zero(),
        })
    }
}

impl Atom<Var> {
    pub fn mentions_primed(&self) -> bool {
        self.term.coeffs.keys().any(|v| v.primed)
    }
    pub fn mentions_undefined(&self) -> bool {
        self.term.coeffs.keys().any(|v| v.id.kind == VarKind::Undefined)
    }
    /// Prime every state variable occurrence (used to push invariants across
    /// a transition).
    pub fn primed(&self) -> Atom<Var> {
        self.map_vars(|v| Var { id: v.id.clone(), primed: true })
    }
}

pub type LocId = usize;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Provenance {
    Original,
    /// Phase copy of an original location created by unfolding.
    Hatted(String),
    /// Clone created by the loop-nesting transformation.
    CloneOf(String),
    /// Fresh loop-head location.
    Fresh,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Location {
    pub name: String,
    pub provenance: Provenance,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transition {
    pub id: usize,
    pub source: LocId,
    pub target: LocId,
    pub relation: Vec<Atom>,
}

impl Transition {
    pub fn undef_vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        for a in &self.relation {
            for v in a.term.coeffs.keys() {
                if v.id.kind == VarKind::Undefined {
                    out.insert(v.id.clone());
                }
            }
        }
        out
    }
    /// State variables with an explicit primed occurrence in the relation.
    pub fn primed_vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        for a in &self.relation {
            for v in a.term.coeffs.keys() {
                if v.primed && v.id.is_state() {
                    out.insert(v.id.clone());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TransitionSystem {
    pub locations: Vec<Location>,
    /// Ordered state variables: declared program variables followed by any
    /// flag variables introduced by transformations.
    pub variables: Vec<VarId>,
    pub entry: LocId,
    pub transitions: Vec<Transition>,
    next_trans_id: usize,
    next_undef: usize,
    next_flag: usize,
    next_fresh_loc: usize,
}

impl TransitionSystem {
    pub fn new(variables: Vec<VarId>, locations: Vec<Location>, entry: LocId) -> Self {
        TransitionSystem {
            locations,
            variables,
            entry,
            transitions: Vec::new(),
            next_trans_id: 0,
            next_undef: 0,
            next_flag: 0,
            next_fresh_loc: 0,
        }
    }

    pub fn loc_by_name(&self, name: &str) -> Option<LocId> {
        self.locations.iter().position(|l| l.name == name)
    }

    pub fn loc_name(&self, l: LocId) -> &str {
        &self.locations[l].name
    }

    pub fn add_location(&mut self, name: String, provenance: Provenance) -> LocId {
        debug_assert!(self.loc_by_name(&name).is_none(), "duplicate location {name}");
        self.locations.push(Location { name, provenance });
        self.locations.len() - 1
    }

    pub fn fresh_location(&mut self, prefix: &str, provenance: Provenance) -> LocId {
        loop {
            let name = format!("{}{}", prefix, self.next_fresh_loc);
            self.next_fresh_loc += 1;
            if self.loc_by_name(&name).is_none() {
                return self.add_location(name, provenance);
            }
        }
    }

    pub fn fresh_flag(&mut self) -> VarId {
        loop {
            self.next_flag += 1;
            let id = VarId::flag(&format!("n{}", self.next_flag));
            if !self.variables.contains(&id) {
                self.variables.push(id.clone());
                return id;
            }
        }
    }

    pub fn fresh_undef(&mut self, base: &str) -> VarId {
        self.next_undef += 1;
        let base = base.split('$').next().unwrap_or(base);
        VarId::undefined(&format!("{}${}", base, self.next_undef))
    }

    pub fn add_transition(&mut self, source: LocId, target: LocId, relation: Vec<Atom>) -> usize {
        let id = self.next_trans_id;
        self.next_trans_id += 1;
        self.transitions.push(Transition { id, source, target, relation });
        id
    }

    pub fn transition(&self, id: usize) -> &Transition {
        self.transitions.iter().find(|t| t.id == id).expect("unknown transition id")
    }

    pub fn remove_transitions(&mut self, ids: &BTreeSet<usize>) {
        self.transitions.retain(|t| !ids.contains(&t.id));
    }

    /// Clone a relation, renaming its undefined variables to fresh ones so the
    /// copy has its own existential scope.
    pub fn freshen_relation(&mut self, relation: &[Atom]) -> Vec<Atom> {
        let mut undefs = BTreeSet::new();
        for a in relation {
            for v in a.term.coeffs.keys() {
                if v.id.kind == VarKind::Undefined {
                    undefs.insert(v.id.clone());
                }
            }
        }
        let map: BTreeMap<VarId, VarId> =
            undefs.iter().map(|u| (u.clone(), self.fresh_undef(&u.name))).collect();
        relation
            .iter()
            .map(|a| {
                a.map_vars(|v| match map.get(&v.id) {
                    Some(n) => Var { id: n.clone(), primed: v.primed },
                    None => v.clone(),
                })
            })
            .collect()
    }

    /// Frame equalities `v' = v` for every state variable without an explicit
    /// primed occurrence in the relation. These are kept implicit in storage
    /// and materialized where semantics needs them.
    pub fn frame_atoms(&self, t: &Transition) -> Vec<Atom> {
        let primed = t.primed_vars();
        self.variables
            .iter()
            .filter(|v| !primed.contains(v))
            .map(|v| {
                Atom::eq_terms(
                    &LinTerm::var(Var::primed(v.clone())),
                    &LinTerm::var(Var::unprimed(v.clone())),
                )
            })
            .collect()
    }

    /// Relation of `t` including frame equalities.
    pub fn full_relation(&self, t: &Transition) -> Vec<Atom> {
        let mut rel = t.relation.clone();
        rel.extend(self.frame_atoms(t));
        rel
    }

    pub fn outgoing(&self, l: LocId) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.source == l)
    }

    pub fn incoming(&self, l: LocId) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.target == l)
    }

    /// Drop locations (and their transitions) unreachable from the entry.
    pub fn prune_unreachable(&mut self) {
        let mut reach = BTreeSet::new();
        let mut stack = vec![self.entry];
        while let Some(l) = stack.pop() {
            if !reach.insert(l) {
                continue;
            }
            for t in self.outgoing(l) {
                if !reach.contains(&t.target) {
                    stack.push(t.target);
                }
            }
        }
        self.transitions.retain(|t| reach.contains(&t.source) && reach.contains(&t.target));
        // Reindexing locations would invalidate LocIds held elsewhere, so
        // unreachable locations are kept as inert vertices.
    }

    pub fn reachable_locations(&self) -> BTreeSet<LocId> {
        let mut reach = BTreeSet::new();
        let mut stack = vec![self.entry];
        while let Some(l) = stack.pop() {
            if !reach.insert(l) {
                continue;
            }
            for t in self.outgoing(l) {
                if !reach.contains(&t.target) {
                    stack.push(t.target);
                }
            }
        }
        reach
    }
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: undeclared location '{name}'")]
    UndeclaredLocation { line: usize, name: String },
    #[error("line {line}: duplicate location name '{name}'")]
    DuplicateLocation { line: usize, name: String },
    #[error("line {line}: undeclared variable '{name}'")]
    UndeclaredVariable { line: usize, name: String },
    #[error("missing '{0}' declaration")]
    Missing(&'static str),
}

struct LineParser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl LineParser {
    fn new(text: &str, line: usize) -> Self {
        LineParser { chars: text.chars().collect(), pos: 0, line }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { line: self.line, col: self.pos + 1, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }


    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        let rest: String = self.chars[self.pos..].iter().collect();
        if rest.starts_with(s) {
            self.pos += s.chars().count();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_alphanumeric() || self.chars[self.pos] == '_')
        {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            Some(self.chars[start..self.pos].iter().collect())
        }
    }

    fn number(&mut self) -> Option<Int> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            let s: String = self.chars[start..self.pos].iter().collect();
            Some(s.parse().unwrap())
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.chars.len()
    }
}

struct AtomParser<'b> {
    lp: &'b mut LineParser,
    program_vars: &'b [VarId],
    undef_map: &'b mut BTreeMap<String, VarId>,
}

impl AtomParser<'_> {
    // var := ['?'] ident [''']
    fn variable(&mut self) -> Result<Var, ParseError> {
        let undef = self.lp.eat("?");
        let name = match self.lp.ident() {
            Some(n) => n,
            None => return self.lp.err("expected variable name"),
        };
        let primed = self.lp.eat("'");
        let id = if undef {
            self.undef_map
                .get(&name)
                .cloned()
                .unwrap_or_else(|| VarId::undefined(&name))
        } else {
            match self.program_vars.iter().find(|v| v.name == name) {
                Some(v) => v.clone(),
                None => {
                    return Err(ParseError::UndeclaredVariable { line: self.lp.line, name })
                }
            }
        };
        Ok(Var { id, primed })
    }

    // item := int ['*' var] | var
    fn item(&mut self) -> Result<LinTerm, ParseError> {
        if let Some(c) = self.lp.peek() {
            if c.is_ascii_digit() {
                let n = self.lp.number().unwrap();
                if self.lp.eat("*") {
                    let v = self.variable()?;
                    return Ok(LinTerm::var(v).scale(&n));
                }
                return Ok(LinTerm::constant(n));
            }
            if c == '?' || c.is_alphabetic() || c == '_' {
                let v = self.variable()?;
                return Ok(LinTerm::var(v));
            }
        }
        self.lp.err("expected term")
    }

    // expr := ['-'] item (('+'|'-') item)*
    fn expr(&mut self) -> Result<LinTerm, ParseError> {
        let mut acc = if self.lp.eat("-") {
            self.item()?.scale(&-Int::one())
        } else {
            self.item()?
        };
        loop {
            if self.lp.eat("+") {
                acc = acc.add(&self.item()?);
            } else if self.lp.eat("-") {
                acc = acc.sub(&self.item()?);
            } else {
                break;
            }
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<Atom, ParseError> {
        let lhs = self.expr()?;
        // Order matters: multi-char operators first.
        let (rel, strict, flip) = if self.lp.eat("<=") || self.lp.eat("=<") {
            (Rel::Le, false, false)
        } else if self.lp.eat(">=") {
            (Rel::Le, false, true)
        } else if self.lp.eat("<") {
            (Rel::Le, true, false)
        } else if self.lp.eat(">") {
            (Rel::Le, true, true)
        } else if self.lp.eat("=") {
            (Rel::Eq, false, false)
        } else {
            return self.lp.err("expected relation operator");
        };
        let rhs = self.expr()?;
        let mut term = if flip { rhs.sub(&lhs) } else { lhs.sub(&rhs) };
        if strict {
            // a < b over the integers is a <= b - 1.
            term = term.add_const(&Int::one());
        }
        Ok(Atom { term, rel })
    }
}

/// Parse the line-oriented ITS format. See the crate README for the grammar.
pub fn parse_its(text: &str) -> Result<TransitionSystem, ParseError> {
    let mut program_vars: Vec<VarId> = Vec::new();
    let mut entry_name: Option<(String, usize)> = None;
    let mut declared_locs: Option<Vec<String>> = None;
    let mut loc_provenance: BTreeMap<String, Provenance> = BTreeMap::new();
    struct RawTrans {
        line: usize,
        source: String,
        target: String,
        atoms: Vec<Atom>,
    }
    let mut raw: Vec<RawTrans> = Vec::new();
    let mut undef_count = 0usize;

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(p) => {
                // Provenance comments are part of the emitted format.
                let comment = raw_line[p + 1..].trim();
                if let Some(rest) = comment.strip_prefix("loc ") {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() == 3 {
                        let prov = match parts[1] {
                            "clone-of" => Some(Provenance::CloneOf(parts[2].to_string())),
                            "hatted-from" => Some(Provenance::Hatted(parts[2].to_string())),
                            _ => None,
                        };
                        if let Some(prov) = prov {
                            loc_provenance.insert(parts[0].to_string(), prov);
                        }
                    } else if parts.len() == 2 && parts[1] == "fresh" {
                        loc_provenance.insert(parts[0].to_string(), Provenance::Fresh);
                    }
                }
                &raw_line[..p]
            }
            None => raw_line,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut lp = LineParser::new(trimmed, lineno);
        if trimmed.starts_with("vars") {
            lp.eat("vars");
            while let Some(name) = lp.ident() {
                program_vars.push(VarId::program(&name));
            }
            if !lp.at_end() {
                return lp.err("trailing junk after variable list");
            }
        } else if trimmed.starts_with("flags") {
            lp.eat("flags");
            while let Some(name) = lp.ident() {
                program_vars.push(VarId::flag(&name));
            }
        } else if trimmed.starts_with("locs") {
            lp.eat("locs");
            let mut names = Vec::new();
            while let Some(name) = lp.ident() {
                if names.contains(&name) {
                    return Err(ParseError::DuplicateLocation { line: lineno, name });
                }
                names.push(name);
            }
            declared_locs = Some(names);
        } else if trimmed.starts_with("entry") {
            lp.eat("entry");
            match lp.ident() {
                Some(name) => entry_name = Some((name, lineno)),
                None => return lp.err("expected entry location name"),
            }
        } else {
            // transition: src -> tgt [ atoms ]
            let source = match lp.ident() {
                Some(s) => s,
                None => return lp.err("expected source location"),
            };
            if !lp.eat("->") {
                return lp.err("expected '->'");
            }
            let target = match lp.ident() {
                Some(s) => s,
                None => return lp.err("expected target location"),
            };
            if !lp.eat("[") {
                return lp.err("expected '['");
            }
            let mut atoms = Vec::new();
            if !lp.eat("true") {
                // Rename this transition's undefined variables apart: one
                // fresh id per surface name per transition line.
                let mut undef_map: BTreeMap<String, VarId> = BTreeMap::new();
                let rest: String = lp.chars[lp.pos..].iter().collect();
                for (i, c) in rest.char_indices() {
                    if c == '?' {
                        let name: String = rest[i + 1..]
                            .chars()
                            .take_while(|c| c.is_alphanumeric() || *c == '_')
                            .collect();
                        if !name.is_empty() && !undef_map.contains_key(&name) {
                            undef_count += 1;
                            undef_map.insert(
                                name.clone(),
                                VarId::undefined(&format!("{name}${undef_count}")),
                            );
                        }
                    }
                }
                loop {
                    if lp.peek() == Some(']') {
                        break;
                    }
                    let mut ap = AtomParser {
                        lp: &mut lp,
                        program_vars: &program_vars,
                        undef_map: &mut undef_map,
                    };
                    atoms.push(ap.atom()?);
                    if lp.eat(",") {
                        continue;
                    }
                    break;
                }
            }
            if !lp.eat("]") {
                return lp.err("expected ']'");
            }
            if !lp.at_end() {
                return lp.err("trailing junk after transition");
            }
            raw.push(RawTrans { line: lineno, source, target, atoms });
        }
    }

    if program_vars.is_empty() {
        return Err(ParseError::Missing("vars"));
    }
    let (entry_name, entry_line) = entry_name.ok_or(ParseError::Missing("entry"))?;

    let mut loc_names: Vec<String> = Vec::new();
    let push_loc = |name: &str, line: usize, names: &mut Vec<String>| -> Result<(), ParseError> {
        if names.iter().any(|n| n == name) {
            return Ok(());
        }
        if let Some(decl) = &declared_locs {
            if !decl.iter().any(|n| n == name) {
                return Err(ParseError::UndeclaredLocation { line, name: name.to_string() });
            }
        }
        names.push(name.to_string());
        Ok(())
    };
    push_loc(&entry_name, entry_line, &mut loc_names)?;
    for t in &raw {
        push_loc(&t.source, t.line, &mut loc_names)?;
        push_loc(&t.target, t.line, &mut loc_names)?;
    }

    let locations: Vec<Location> = loc_names
        .iter()
        .map(|n| Location {
            name: n.clone(),
            provenance: loc_provenance.get(n).cloned().unwrap_or(Provenance::Original),
        })
        .collect();
    let entry = locations.iter().position(|l| l.name == entry_name).unwrap();
    let mut ts = TransitionSystem::new(program_vars, locations, entry);
    ts.next_undef = undef_count;
    for t in raw {
        let src = ts.loc_by_name(&t.source).unwrap();
        let tgt = ts.loc_by_name(&t.target).unwrap();
        ts.add_transition(src, tgt, t.atoms);
    }
    Ok(ts)
}

/// Parse a comma-separated atom list against a variable environment; test and
/// precondition helper (undefined variables keep their written names).
pub fn parse_atoms(text: &str, vars: &[VarId]) -> Result<Vec<Atom>, ParseError> {
    let mut lp = LineParser::new(text, 1);
    let mut undef_map: BTreeMap<String, VarId> = BTreeMap::new();
    // Pre-scan undef names so they keep their surface names.
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '?' {
            let name: String = text[i + 1..]
                .chars()
                .take_while(|c| c.is_alphanumeric() || *c == '_')
                .collect();
            if !name.is_empty() {
                undef_map.insert(name.clone(), VarId::undefined(&name));
            }
        }
    }
    let mut atoms = Vec::new();
    if lp.eat("true") {
        return Ok(atoms);
    }
    loop {
        if lp.at_end() {
            break;
        }
        let mut ap = AtomParser { lp: &mut lp, program_vars: vars, undef_map: &mut undef_map };
        atoms.push(ap.atom()?);
        if !lp.eat(",") {
            break;
        }
    }
    Ok(atoms)
}

fn fmt_var(v: &Var) -> String {
    let mut s = String::new();
    if v.id.kind == VarKind::Undefined {
        s.push('?');
        s.push_str(v.id.name.split('$').next().unwrap());
        if let Some(sfx) = v.id.name.split('$').nth(1) {
            s.push_str("_r");
            s.push_str(sfx);
        }
    } else {
        s.push_str(&v.id.name);
    }
    if v.primed {
        s.push('\'');
    }
    s
}

/// Pretty-print a linear term: `2*x + z - 1`.
pub fn fmt_term(t: &LinTerm<Var>) -> String {
    let mut s = String::new();
    for (v, c) in &t.coeffs {
        if c.is_positive() {
            if !s.is_empty() {
                s.push_str(" + ");
            }
        } else {
            s.push_str(if s.is_empty() { "-" } else { " - " });
        }
        let a = c.abs();
        if a.is_one() {
            s.push_str(&fmt_var(v));
        } else {
            s.push_str(&format!("{}*{}", a, fmt_var(v)));
        }
    }
    let c = &t.constant;
    if s.is_empty() {
        s = c.to_string();
    } else if c.is_positive() {
        s.push_str(&format!(" + {}", c));
    } else if c.is_negative() {
        s.push_str(&format!(" - {}", -c));
    }
    s
}

/// Pretty-print an atom with positive coefficients on both sides where
/// possible: `x' <= x + z - 1` rather than `x' - x - z + 1 <= 0`.
pub fn fmt_atom(a: &Atom) -> String {
    let mut lhs = String::new();
    let mut rhs = String::new();
    fn push(side: &mut String, text: String) {
        if !side.is_empty() {
            side.push_str(" + ");
        }
        side.push_str(&text);
    }
    for (v, c) in &a.term.coeffs {
        let (side, c) = if c.is_positive() { (&mut lhs, c.clone()) } else { (&mut rhs, -c) };
        if c.is_one() {
            push(side, fmt_var(v));
        } else {
            push(side, format!("{}*{}", c, fmt_var(v)));
        }
    }
    let c = &a.term.constant;
    if c.is_positive() {
        push(&mut lhs, c.to_string());
    } else if c.is_negative() {
        push(&mut rhs, (-c).to_string());
    }
    if lhs.is_empty() {
        lhs.push('0');
    }
    if rhs.is_empty() {
        rhs.push('0');
    }
    let op = match a.rel {
        Rel::Le => "<=",
        Rel::Eq => "=",
    };
    format!("{lhs} {op} {rhs}")
}

impl fmt::Display for TransitionSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", emit_its(self))
    }
}

/// Serialize a system in the textual ITS format. The output re-parses to a
/// structurally identical system modulo undefined-variable renaming.
pub fn emit_its(ts: &TransitionSystem) -> String {
    let mut out = String::new();
    let progs: Vec<&VarId> =
        ts.variables.iter().filter(|v| v.kind == VarKind::Program).collect();
    let flags: Vec<&VarId> = ts.variables.iter().filter(|v| v.kind == VarKind::Flag).collect();
    out.push_str("vars");
    for v in &progs {
        out.push(' ');
        out.push_str(&v.name);
    }
    out.push('\n');
    if !flags.is_empty() {
        out.push_str("flags");
        for v in &flags {
            out.push(' ');
            out.push_str(&v.name);
        }
        out.push('\n');
    }
    out.push_str(&format!("entry {}\n", ts.loc_name(ts.entry)));
    for loc in &ts.locations {
        match &loc.provenance {
            Provenance::Original => {}
            Provenance::Hatted(base) => {
                out.push_str(&format!("# loc {} hatted-from {}\n", loc.name, base))
            }
            Provenance::CloneOf(base) => {
                out.push_str(&format!("# loc {} clone-of {}\n", loc.name, base))
            }
            Provenance::Fresh => out.push_str(&format!("# loc {} fresh\n", loc.name)),
        }
    }
    for t in &ts.transitions {
        let atoms = if t.relation.is_empty() {
            "true".to_string()
        } else {
            t.relation.iter().map(fmt_atom).collect::<Vec<_>>().join(", ")
        };
        out.push_str(&format!(
            "{} -> {} [ {} ]\n",
            ts.loc_name(t.source),
            ts.loc_name(t.target),
            atoms
        ));
    }
    out
}

/// Structural identity modulo undefined-variable renaming and location ids
/// (locations are matched by name).
pub fn structurally_eq(a: &TransitionSystem, b: &TransitionSystem) -> bool {
    if a.variables != b.variables {
        return false;
    }
    if a.loc_name(a.entry) != b.loc_name(b.entry) {
        return false;
    }
    let a_names: BTreeSet<&str> = a.locations.iter().map(|l| l.name.as_str()).collect();
    let b_names: BTreeSet<&str> = b.locations.iter().map(|l| l.name.as_str()).collect();
    if a_names != b_names {
        return false;
    }
    if a.transitions.len() != b.transitions.len() {
        return false;
    }
    for (ta, tb) in a.transitions.iter().zip(&b.transitions) {
        if a.loc_name(ta.source) != b.loc_name(tb.source)
            || a.loc_name(ta.target) != b.loc_name(tb.target)
        {
            return false;
        }
        if !relations_eq_mod_undef(&ta.relation, &tb.relation) {
            return false;
        }
    }
    true
}

/// Relation equality up to a bijective renaming of undefined variables,
/// matching by base name and order of first occurrence.
pub fn relations_eq_mod_undef(a: &[Atom], b: &[Atom]) -> bool {
    fn canon(rel: &[Atom]) -> Vec<Atom> {
        let mut seen: BTreeMap<VarId, VarId> = BTreeMap::new();
        let mut next = 0usize;
        rel.iter()
            .map(|atom| {
                atom.map_vars(|v| {
                    if v.id.kind == VarKind::Undefined {
                        let id = seen.entry(v.id.clone()).or_insert_with(|| {
                            next += 1;
                            VarId::undefined(&format!("u${next}"))
                        });
                        Var { id: id.clone(), primed: v.primed }
                    } else {
                        v.clone()
                    }
                })
            })
            .collect()
    }
    canon(a) == canon(b)
}
