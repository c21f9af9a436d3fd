//! Cost relation system generation from a hierarchically loop-nested
//! transition system, ranking-function embedding, conditional wrapping,
//! and the textual eq/4 format with its reader.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_traits::{One, Zero};
use thiserror::Error;

use crate::graph::{self, Component};
use crate::its::{Atom, Int, LinTerm, LocId, Rel, TransitionSystem, Var, VarId};
use crate::size_rel::SizeAnalysis;

#[derive(Debug, Error)]
pub enum CrsError {
    #[error("component has no unique entry location")]
    NoEntry,
    #[error("cycle enumeration limit exceeded: {0}")]
    CycleLimit(usize),
    #[error("recursive function {0} has no ranking function annotation")]
    MissingAnnotation(String),
    #[error("linear arithmetic failure: {0}")]
    Linear(#[from] crate::linear::LinearError),
    #[error("malformed CRS text: {0}")]
    Parse(String),
}

/// Variables inside cost equations. `family` 0 is the head's parameter
/// tier, families 1.. belong to the calls in order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CrsVar {
    Param { name: String, family: usize },
    Rank { family: usize },
    Local { name: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Call {
    pub func: String,
    pub family: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEquation {
    pub head: String,
    pub calls: Vec<Call>,
    pub constraints: Vec<Atom<CrsVar>>,
    /// Transition whose execution this equation's unit cost accounts for.
    pub source_trans: Option<usize>,
    pub head_loc: Option<LocId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRelationSystem {
    /// Shared parameter list of every cost function, in declaration order.
    pub params: Vec<VarId>,
    pub equations: Vec<CostEquation>,
    pub entry: String,
    pub rf_embedded: bool,
    pub conditional: bool,
    /// Functions carrying the extra ranking parameter once embedded.
    pub with_r: BTreeSet<String>,
}

const CYCLE_LIMIT: usize = 10_000;

struct EqBuilder<'a> {
    params: &'a [VarId],
    locals: BTreeMap<VarId, String>,
    next_local: usize,
    local_prefix: &'a str,
}

impl<'a> EqBuilder<'a> {
    fn new(params: &'a [VarId], local_prefix: &'a str) -> Self {
        EqBuilder { params, locals: BTreeMap::new(), next_local: 1, local_prefix }
    }

    fn local(&mut self, id: &VarId) -> CrsVar {
        if let Some(n) = self.locals.get(id) {
            return CrsVar::Local { name: n.clone() };
        }
        let n = format!("{}{}", self.local_prefix, self.next_local);
        self.next_local += 1;
        self.locals.insert(id.clone(), n.clone());
        CrsVar::Local { name: n }
    }

    /// Instantiates atoms of a transition-style relation: unprimed state
    /// variables land in `src`, primed ones in `dst` (or a local when the
    /// equation has no continuation), undefined variables become locals.
    fn inst(&mut self, atoms: &[Atom<Var>], src: usize, dst: Option<usize>) -> Vec<Atom<CrsVar>> {
        let _ = self.params;
        atoms
            .iter()
            .map(|a| {
                a.map_vars(&mut |v: &Var| {
                    if v.id.kind == crate::its::VarKind::Undefined {
                        self.local(&v.id)
                    } else if v.primed {
                        match dst {
                            Some(f) => CrsVar::Param { name: v.id.name.clone(), family: f },
                            None => self.local(&VarId {
                                name: format!("{}'", v.id.name),
                                kind: crate::its::VarKind::Undefined,
                            }),
                        }
                    } else {
                        CrsVar::Param { name: v.id.name.clone(), family: src }
                    }
                })
            })
            .collect()
    }
}

fn local_prefix(params: &[VarId]) -> &'static str {
    let clash = |p: &str| params.iter().any(|v| {
        let n = v.name.as_str();
        n.starts_with(p) && n[p.len()..].chars().all(|c| c.is_ascii_digit())
    });
    for p in ["u", "w", "aux"] {
        if !clash(p) {
            return match p {
                "u" => "u",
                "w" => "w",
                _ => "aux",
            };
        }
    }
    "aux"
}

/// Generates the LB-CRS for a transformed transition system: one cost
/// function per location, one equation per transition, recursive equations
/// per cycle through each loop entry with size relations threading the
/// argument values between calls.
pub fn generate_crs(
    ts: &TransitionSystem,
    size: &mut SizeAnalysis,
) -> Result<CostRelationSystem, CrsError> {
    let params = ts.variables.clone();
    let prefix = local_prefix(&params);
    let mut eqs = Vec::new();
    for c in graph::sccs(ts) {
        gen_component(ts, &c, false, size, &mut eqs, &params, prefix)?;
    }
    eqs.sort_by_key(|e| e.head_loc.unwrap_or(usize::MAX));
    Ok(CostRelationSystem {
        params,
        equations: eqs,
        entry: ts.loc_name(ts.entry).to_string(),
        rf_embedded: false,
        conditional: false,
        with_r: BTreeSet::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn gen_component(
    ts: &TransitionSystem,
    c: &Component,
    inner: bool,
    size: &mut SizeAnalysis,
    eqs: &mut Vec<CostEquation>,
    params: &[VarId],
    prefix: &str,
) -> Result<(), CrsError> {
    let head = if c.is_trivial() {
        *c.locations.iter().next().ok_or(CrsError::NoEntry)?
    } else {
        graph::entry_locations(ts, c)
            .into_iter()
            .next()
            .ok_or(CrsError::NoEntry)?
    };
    let head_name = ts.loc_name(head).to_string();

    if !c.is_trivial() {
        let (bodies, cycles) = graph::cycles_through_head(ts, c, head, CYCLE_LIMIT)
            .map_err(|crate::graph::GraphError::CycleBudget(n)| CrsError::CycleLimit(n))?;
        for cy in &cycles {
            let t = ts.transition(cy.first);
            let mut b = EqBuilder::new(params, prefix);
            let mut constraints = b.inst(&ts.full_relation(t), 0, Some(1));
            let mut calls = Vec::new();
            for (i, bi) in cy.body_seq.iter().enumerate() {
                let sub = &bodies[*bi];
                let sub_entry = graph::entry_locations(ts, sub)
                    .into_iter()
                    .next()
                    .or_else(|| sub.locations.iter().next().copied())
                    .ok_or(CrsError::NoEntry)?;
                calls.push(Call { func: ts.loc_name(sub_entry).to_string(), family: i + 1 });
                let sr = size.relation(ts, sub);
                constraints.extend(b.inst(&sr.atoms, i + 1, Some(i + 2)));
            }
            let rec_family = cy.body_seq.len() + 1;
            calls.push(Call { func: head_name.clone(), family: rec_family });
            eqs.push(CostEquation {
                head: head_name.clone(),
                calls,
                constraints,
                source_trans: Some(cy.first),
                head_loc: Some(head),
            });
        }
        for sub in &bodies {
            gen_component(ts, sub, true, size, eqs, params, prefix)?;
        }
    }

    // Transitions of the head that leave the component.
    let mut emitted_out = false;
    let out_ids: Vec<usize> = ts.outgoing(head).map(|t| t.id).collect();
    for tid in out_ids {
        let t = ts.transition(tid);
        if c.locations.contains(&t.target) && !c.is_trivial() {
            continue;
        }
        emitted_out = true;
        let mut b = EqBuilder::new(params, prefix);
        if inner {
            // The caller's equation resumes the flow; no call, and primed
            // values are existential.
            let constraints = b.inst(&t.relation, 0, None);
            eqs.push(CostEquation {
                head: head_name.clone(),
                calls: vec![],
                constraints,
                source_trans: Some(tid),
                head_loc: Some(head),
            });
        } else {
            let constraints = b.inst(&ts.full_relation(t), 0, Some(1));
            eqs.push(CostEquation {
                head: head_name.clone(),
                calls: vec![Call { func: ts.loc_name(t.target).to_string(), family: 1 }],
                constraints,
                source_trans: Some(tid),
                head_loc: Some(head),
            });
        }
    }
    if !emitted_out && c.is_trivial() {
        eqs.push(CostEquation {
            head: head_name.clone(),
            calls: vec![],
            constraints: vec![],
            source_trans: None,
            head_loc: Some(head),
        });
    }
    Ok(())
}

fn rank_term(rf: &LinTerm<Var>, family: usize) -> LinTerm<CrsVar> {
    rf.map_vars(&mut |v: &Var| CrsVar::Param { name: v.id.name.clone(), family })
}

/// Threads a ranking parameter through every non-entry cost function:
/// calls to annotated functions pin it, recursive equations make it
/// nonnegative and strictly decreasing.
pub fn embed_ranking_functions(
    crs: &CostRelationSystem,
    ts: &TransitionSystem,
    rf_ann: &BTreeMap<LocId, LinTerm<Var>>,
) -> Result<CostRelationSystem, CrsError> {
    let mut out = crs.clone();
    let mut with_r: BTreeSet<String> = BTreeSet::new();
    for eq in &crs.equations {
        if eq.head != crs.entry {
            with_r.insert(eq.head.clone());
        }
        for call in &eq.calls {
            if call.func != crs.entry {
                with_r.insert(call.func.clone());
            }
        }
    }
    let ann_by_name: BTreeMap<String, LinTerm<Var>> = rf_ann
        .iter()
        .map(|(l, rf)| (ts.loc_name(*l).to_string(), rf.clone()))
        .collect();
    for eq in &mut out.equations {
        let recursive = eq.calls.iter().any(|c| c.func == eq.head);
        if recursive && !ann_by_name.contains_key(&eq.head) {
            return Err(CrsError::MissingAnnotation(eq.head.clone()));
        }
        let head_has_r = with_r.contains(&eq.head);
        if recursive && head_has_r {
            // r >= 0
            let r0 = LinTerm::var(CrsVar::Rank { family: 0 });
            eq.constraints.push(Atom::le(r0.scale(&-Int::one())));
        }
        for call in eq.calls.clone() {
            if call.func == eq.head {
                if head_has_r {
                    // r_call <= r - 1
                    let rc = LinTerm::var(CrsVar::Rank { family: call.family });
                    let r0 = LinTerm::var(CrsVar::Rank { family: 0 });
                    eq.constraints.push(Atom::le(rc.sub(&r0).add_const(&Int::one())));
                }
            } else if let Some(rf) = ann_by_name.get(&call.func) {
                let rc = LinTerm::var(CrsVar::Rank { family: call.family });
                eq.constraints.push(Atom::eq_terms(&rc, &rank_term(rf, call.family)));
            }
        }
    }
    out.rf_embedded = true;
    out.with_r = with_r;
    Ok(out)
}

/// Wraps the entry in a precondition-guarded equation; the reporting layer
/// prints the bound as valid under the precondition.
pub fn make_conditional(crs: &CostRelationSystem, pre: &[Atom<Var>]) -> CostRelationSystem {
    let mut out = crs.clone();
    let wrapper = format!("e_{}", crs.entry);
    let mut b = EqBuilder::new(&out.params, "u");
    let mut constraints = b.inst(pre, 0, Some(1));
    for v in &out.params {
        constraints.push(Atom::eq_terms(
            &LinTerm::var(CrsVar::Param { name: v.name.clone(), family: 1 }),
            &LinTerm::var(CrsVar::Param { name: v.name.clone(), family: 0 }),
        ));
    }
    out.equations.insert(
        0,
        CostEquation {
            head: wrapper.clone(),
            calls: vec![Call { func: crs.entry.clone(), family: 1 }],
            constraints,
            source_trans: None,
            head_loc: None,
        },
    );
    out.entry = wrapper;
    out.conditional = true;
    out
}

fn func_symbol(name: &str) -> String {
    let mut s = String::from("c_");
    for ch in name.chars() {
        match ch {
            '\'' => s.push('p'),
            c if c.is_ascii_alphanumeric() || c == '_' => s.push(c),
            _ => {}
        }
    }
    s
}

fn var_token(v: &CrsVar) -> String {
    match v {
        CrsVar::Param { name, family } => {
            let up = name.to_uppercase();
            if *family == 0 {
                up
            } else {
                format!("{}{}", up, family)
            }
        }
        CrsVar::Rank { family } => {
            if *family == 0 {
                "R".to_string()
            } else {
                format!("R{}", family)
            }
        }
        CrsVar::Local { name } => name.to_uppercase(),
    }
}

fn fmt_crs_term_side(pairs: &[(String, Int)], constant: &Int) -> String {
    let mut s = String::new();
    for (tok, c) in pairs {
        if !s.is_empty() {
            s.push_str(" + ");
        }
        if c.is_one() {
            s.push_str(tok);
        } else {
            let _ = write!(s, "{}*{}", c, tok);
        }
    }
    if !constant.is_zero() || s.is_empty() {
        if s.is_empty() {
            let _ = write!(s, "{}", constant);
        } else {
            let _ = write!(s, " + {}", constant);
        }
    }
    s
}

fn fmt_crs_atom(a: &Atom<CrsVar>) -> String {
    // term rel 0 rendered as lhs rel rhs with nonnegative parts on each side.
    let mut left: Vec<(String, Int)> = Vec::new();
    let mut right: Vec<(String, Int)> = Vec::new();
    for (v, c) in &a.term.coeffs {
        if c > &Int::zero() {
            left.push((var_token(v), c.clone()));
        } else {
            right.push((var_token(v), -c.clone()));
        }
    }
    let (lc, rc) = if a.term.constant >= Int::zero() {
        (a.term.constant.clone(), Int::zero())
    } else {
        (Int::zero(), -a.term.constant.clone())
    };
    let op = match a.rel {
        Rel::Le => "=<",
        Rel::Eq => "=",
    };
    format!(
        "{} {} {}",
        fmt_crs_term_side(&left, &lc),
        op,
        fmt_crs_term_side(&right, &rc)
    )
}

fn head_args(crs: &CostRelationSystem, func: &str, family: usize) -> String {
    let mut args: Vec<String> = crs
        .params
        .iter()
        .map(|p| var_token(&CrsVar::Param { name: p.name.clone(), family }))
        .collect();
    if crs.rf_embedded && crs.with_r.contains(func) {
        args.push(var_token(&CrsVar::Rank { family }));
    }
    args.join(",")
}

/// One `eq/4` fact per equation, preceded by header comments that make the
/// text self-describing for the internal reader.
pub fn emit_crs(crs: &CostRelationSystem) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "% params: {}",
        crs.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(out, "% entry: {}", crs.entry);
    let _ = writeln!(
        out,
        "% flags: rf_embedded={} conditional={}",
        crs.rf_embedded, crs.conditional
    );
    if !crs.with_r.is_empty() {
        let _ = writeln!(
            out,
            "% ranked: {}",
            crs.with_r.iter().cloned().collect::<Vec<_>>().join(" ")
        );
    }
    for eq in &crs.equations {
        let calls = eq
            .calls
            .iter()
            .map(|c| format!("{}({})", func_symbol(&c.func), head_args(crs, &c.func, c.family)))
            .collect::<Vec<_>>()
            .join(", ");
        let cons = eq
            .constraints
            .iter()
            .map(fmt_crs_atom)
            .collect::<Vec<_>>()
            .join(", ");
        let meta = match (eq.source_trans, eq.head_loc) {
            (Some(t), Some(l)) => format!(" % t{} l{}", t, l),
            (None, Some(l)) => format!(" % l{}", l),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "eq({}({}), 1, [{}], [{}]).{}",
            func_symbol(&eq.head),
            head_args(crs, &eq.head, 0),
            calls,
            cons,
            meta
        );
    }
    out
}

struct CrsScanner<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> CrsScanner<'a> {
    fn new(s: &'a str) -> Self {
        CrsScanner { s: s.as_bytes(), pos: 0 }
    }
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && (self.s[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
    }
    fn eat(&mut self, lit: &str) -> Result<(), CrsError> {
        self.skip_ws();
        if self.s[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(CrsError::Parse(format!(
                "expected `{}` at byte {}",
                lit, self.pos
            )))
        }
    }
    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.s.get(self.pos).map(|b| *b as char)
    }
    fn ident(&mut self) -> Result<String, CrsError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() {
            let c = self.s[self.pos] as char;
            if c.is_ascii_alphanumeric() || c == '_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(CrsError::Parse(format!("expected identifier at byte {}", self.pos)));
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.pos]).into_owned())
    }
    fn int(&mut self) -> Result<Int, CrsError> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        while self.pos < self.s.len() && (self.s[self.pos] as char).is_ascii_digit() {
            self.pos += 1;
        }
        let text = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        text.parse::<Int>()
            .map_err(|_| CrsError::Parse(format!("bad integer at byte {}", start)))
    }
}

fn decode_var(tok: &str, params: &[VarId]) -> CrsVar {
    if let Some(rest) = tok.strip_prefix('R') {
        if rest.chars().all(|c| c.is_ascii_digit()) {
            let family = rest.parse().unwrap_or(0);
            return CrsVar::Rank { family };
        }
    }
    // Longest param-name match followed by an optional family suffix.
    let mut best: Option<(usize, String)> = None;
    for p in params {
        let up = p.name.to_uppercase();
        if let Some(rest) = tok.strip_prefix(up.as_str()) {
            if rest.chars().all(|c| c.is_ascii_digit())
                && best.as_ref().map_or(true, |(l, _)| up.len() > *l)
            {
                best = Some((up.len(), p.name.clone()));
            }
        }
    }
    if let Some((l, name)) = best {
        let family = if tok.len() == l { 0 } else { tok[l..].parse().unwrap_or(0) };
        return CrsVar::Param { name, family };
    }
    CrsVar::Local { name: tok.to_lowercase() }
}

fn parse_crs_term(sc: &mut CrsScanner, params: &[VarId]) -> Result<LinTerm<CrsVar>, CrsError> {
    let mut term: LinTerm<CrsVar> = LinTerm::zero();
    let mut sign = Int::one();
    loop {
        match sc.peek() {
            Some('-') => {
                sc.pos += 1;
                sign = -Int::one();
            }
            Some('+') => {
                sc.pos += 1;
                sign = Int::one();
            }
            _ => {}
        }
        let c = sc.peek().ok_or_else(|| CrsError::Parse("unexpected end".into()))?;
        if c.is_ascii_digit() {
            let n = sc.int()?;
            if sc.peek() == Some('*') {
                sc.eat("*")?;
                let v = decode_var(&sc.ident()?, params);
                term.add_coeff(v, &(sign.clone() * n));
            } else {
                term.constant += sign.clone() * n;
            }
        } else {
            let v = decode_var(&sc.ident()?, params);
            term.add_coeff(v, &sign);
        }
        match sc.peek() {
            Some('+') | Some('-') => continue,
            _ => break,
        }
    }
    Ok(term)
}

fn parse_crs_atom(sc: &mut CrsScanner, params: &[VarId]) -> Result<Atom<CrsVar>, CrsError> {
    let lhs = parse_crs_term(sc, params)?;
    sc.skip_ws();
    let ops = ["=<", "<=", ">=", "=", "<", ">"];
    let mut op = None;
    for o in ops {
        if sc.s[sc.pos..].starts_with(o.as_bytes()) {
            sc.pos += o.len();
            op = Some(o);
            break;
        }
    }
    let op = op.ok_or_else(|| CrsError::Parse(format!("expected relation at byte {}", sc.pos)))?;
    let rhs = parse_crs_term(sc, params)?;
    Ok(match op {
        "=<" | "<=" => Atom::le_terms(&lhs, &rhs),
        ">=" => Atom::le_terms(&rhs, &lhs),
        "<" => Atom::le(lhs.sub(&rhs).add_const(&Int::one())),
        ">" => Atom::le(rhs.sub(&lhs).add_const(&Int::one())),
        _ => Atom::eq_terms(&lhs, &rhs),
    })
}

/// Internal reader for the eq/4 format; round-trips `emit_crs` output.
pub fn parse_crs(text: &str) -> Result<CostRelationSystem, CrsError> {
    let mut params: Vec<VarId> = Vec::new();
    let mut entry = String::new();
    let mut rf_embedded = false;
    let mut conditional = false;
    let mut with_r = BTreeSet::new();
    let mut equations = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("% params:") {
            params = rest
                .split_whitespace()
                .map(|n| VarId { name: n.to_string(), kind: crate::its::VarKind::Program })
                .collect();
            continue;
        }
        if let Some(rest) = line.strip_prefix("% entry:") {
            entry = rest.trim().to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("% flags:") {
            rf_embedded = rest.contains("rf_embedded=true");
            conditional = rest.contains("conditional=true");
            continue;
        }
        if let Some(rest) = line.strip_prefix("% ranked:") {
            with_r = rest.split_whitespace().map(|s| s.to_string()).collect();
            continue;
        }
        if line.starts_with('%') {
            continue;
        }
        let (fact, meta) = match line.find("). %") {
            Some(i) => (&line[..i + 2], line[i + 3..].trim()),
            None => (line, ""),
        };
        let mut source_trans = None;
        let mut head_loc = None;
        for item in meta.split_whitespace() {
            if let Some(n) = item.strip_prefix('t') {
                source_trans = n.parse().ok();
            } else if let Some(n) = item.strip_prefix('l') {
                head_loc = n.parse().ok();
            }
        }
        let mut sc = CrsScanner::new(fact);
        sc.eat("eq(")?;
        let head_sym = sc.ident()?;
        let head = head_sym
            .strip_prefix("c_")
            .ok_or_else(|| CrsError::Parse(format!("bad head symbol {}", head_sym)))?
            .to_string();
        sc.eat("(")?;
        // Head argument tokens only fix arity; identity comes from params.
        while sc.peek() != Some(')') {
            sc.ident()?;
            if sc.peek() == Some(',') {
                sc.eat(",")?;
            }
        }
        sc.eat(")")?;
        sc.eat(",")?;
        let one = sc.int()?;
        if !one.is_one() {
            return Err(CrsError::Parse("equation cost must be 1".into()));
        }
        sc.eat(",")?;
        sc.eat("[")?;
        let mut calls = Vec::new();
        while sc.peek() != Some(']') {
            let sym = sc.ident()?;
            let func = sym
                .strip_prefix("c_")
                .ok_or_else(|| CrsError::Parse(format!("bad call symbol {}", sym)))?
                .to_string();
            sc.eat("(")?;
            let mut family = None;
            while sc.peek() != Some(')') {
                let tok = sc.ident()?;
                if family.is_none() {
                    if let CrsVar::Param { family: f, .. } = decode_var(&tok, &params) {
                        family = Some(f);
                    } else if let CrsVar::Rank { family: f } = decode_var(&tok, &params) {
                        family = Some(f);
                    }
                }
                if sc.peek() == Some(',') {
                    sc.eat(",")?;
                }
            }
            sc.eat(")")?;
            calls.push(Call { func, family: family.unwrap_or(1) });
            if sc.peek() == Some(',') {
                sc.eat(",")?;
            }
        }
        sc.eat("]")?;
        sc.eat(",")?;
        sc.eat("[")?;
        let mut constraints = Vec::new();
        while sc.peek() != Some(']') {
            constraints.push(parse_crs_atom(&mut sc, &params)?);
            if sc.peek() == Some(',') {
                sc.eat(",")?;
            }
        }
        sc.eat("]")?;
        sc.eat(")")?;
        sc.eat(".")?;
        equations.push(CostEquation { head, calls, constraints, source_trans, head_loc });
    }
    if entry.is_empty() {
        entry = equations
            .first()
            .map(|e| e.head.clone())
            .ok_or_else(|| CrsError::Parse("empty CRS".into()))?;
    }
    Ok(CostRelationSystem { params, equations, entry, rf_embedded, conditional, with_r })
}

/// Structural replay of a concrete trace against the CRS: every executed
/// transition must be billed by exactly one applicable equation, and the
/// final location must own a dummy equation closing the derivation. Returns
/// the accumulated cost (trace steps plus the terminal dummy).
pub fn replay_cost(
    crs: &CostRelationSystem,
    ts: &TransitionSystem,
    trace: &crate::interp::Trace,
) -> Option<usize> {
    let by_source: BTreeMap<usize, &CostEquation> = crs
        .equations
        .iter()
        .filter_map(|e| e.source_trans.map(|t| (t, e)))
        .collect();
    for t in &trace.taken {
        by_source.get(t)?;
    }
    let last_loc = trace
        .taken
        .last()
        .map(|t| ts.transition(*t).target)
        .unwrap_or(ts.entry);
    let has_dummy = crs
        .equations
        .iter()
        .any(|e| e.head == ts.loc_name(last_loc) && e.calls.is_empty() && e.source_trans.is_none());
    if has_dummy {
        Some(trace.taken.len() + 1)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp;
    use crate::its::parse_its;

    fn fig4() -> TransitionSystem {
        let path = format!("{}/../../fixtures/fig4.its", env!("CARGO_MANIFEST_DIR"));
        parse_its(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    fn fig4_rf_ann(ts: &TransitionSystem) -> BTreeMap<LocId, LinTerm<Var>> {
        let x = LinTerm::var(Var::unprimed(VarId::program("x")));
        let y = LinTerm::var(Var::unprimed(VarId::program("y")));
        let z = LinTerm::var(Var::unprimed(VarId::program("z")));
        let mut ann = BTreeMap::new();
        ann.insert(ts.loc_by_name("f0").unwrap(), z);
        for l in ["l1", "l1_h", "l1_c"] {
            ann.insert(ts.loc_by_name(l).unwrap(), x.sub(&y));
        }
        ann
    }

    fn variants() -> Vec<CostRelationSystem> {
        let ts = fig4();
        let plain = generate_crs(&ts, &mut SizeAnalysis::new()).unwrap();
        let embedded = embed_ranking_functions(&plain, &ts, &fig4_rf_ann(&ts)).unwrap();
        let z = LinTerm::var(Var::unprimed(VarId::program("z")));
        let cond = make_conditional(&embedded, &[Atom::le(z)]);
        vec![plain, embedded, cond]
    }

    #[test]
    fn emitted_systems_parse_back_unchanged() {
        for c in variants() {
            let p = parse_crs(&emit_crs(&c)).unwrap();
            assert_eq!(p.params, c.params);
            assert_eq!(p.entry, c.entry);
            assert_eq!(p.rf_embedded, c.rf_embedded);
            assert_eq!(p.conditional, c.conditional);
            assert_eq!(p.with_r, c.with_r);
            assert_eq!(p.equations.len(), c.equations.len());
            // source_trans and head_loc are emitted only as comments, so
            // compare everything but those.
            for (a, b) in p.equations.iter().zip(&c.equations) {
                assert_eq!(a.head, b.head);
                assert_eq!(a.calls, b.calls);
                assert_eq!(a.constraints, b.constraints);
            }
        }
    }

    #[test]
    fn every_transition_is_billed_exactly_once() {
        let ts = fig4();
        let crs = generate_crs(&ts, &mut SizeAnalysis::new()).unwrap();
        let mut billed: Vec<usize> = crs.equations.iter().filter_map(|e| e.source_trans).collect();
        billed.sort_unstable();
        let mut all: Vec<usize> = ts.transitions.iter().map(|t| t.id).collect();
        all.sort_unstable();
        assert_eq!(billed, all);
        // Every sink location carries exactly one unbilled dummy equation.
        let sinks: Vec<LocId> = (0..ts.locations.len())
            .filter(|l| ts.outgoing(*l).next().is_none())
            .collect();
        let dummies = crs.equations.iter().filter(|e| e.source_trans.is_none()).count();
        assert_eq!(dummies, sinks.len());
    }

    #[test]
    fn replayed_cost_is_steps_plus_one() {
        let ts = fig4();
        let crs = generate_crs(&ts, &mut SizeAnalysis::new()).unwrap();
        let mut checked = 0;
        for seed in 0..200u64 {
            let init = interp::random_valuation(&ts.variables, seed, 6);
            let trace = interp::run(&ts, &init, seed, 6, 5000);
            if !trace.terminated {
                continue;
            }
            let last = trace.taken.last().map(|t| ts.transition(*t).target).unwrap_or(ts.entry);
            if ts.outgoing(last).next().is_some() {
                // Stuck at a non-sink location: no dummy equation closes the
                // derivation there, so the trace is not replayable.
                assert_eq!(replay_cost(&crs, &ts, &trace), None, "seed {seed}");
                continue;
            }
            assert_eq!(replay_cost(&crs, &ts, &trace), Some(trace.taken.len() + 1), "seed {seed}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn erasing_rank_constraints_recovers_the_plain_system() {
        let ts = fig4();
        let plain = generate_crs(&ts, &mut SizeAnalysis::new()).unwrap();
        let embedded = embed_ranking_functions(&plain, &ts, &fig4_rf_ann(&ts)).unwrap();
        assert_eq!(plain.equations.len(), embedded.equations.len());
        for (e, o) in embedded.equations.iter().zip(&plain.equations) {
            assert_eq!(e.head, o.head);
            let funcs: Vec<&str> = e.calls.iter().map(|c| c.func.as_str()).collect();
            let ofuncs: Vec<&str> = o.calls.iter().map(|c| c.func.as_str()).collect();
            assert_eq!(funcs, ofuncs);
            let stripped: Vec<&Atom<CrsVar>> = e
                .constraints
                .iter()
                .filter(|a| {
                    a.term.coeffs.keys().all(|v| !matches!(v, CrsVar::Rank { .. }))
                })
                .collect();
            let original: Vec<&Atom<CrsVar>> = o.constraints.iter().collect();
            assert_eq!(stripped, original, "embedding must only append rank atoms");
        }
    }
}
