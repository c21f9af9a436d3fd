//! End-to-end driver: termination analysis, loop-nest transformation,
//! validation, size relations, CRS generation, and bound solving.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crs::{self, CostRelationSystem};
use crate::graph;
use crate::its::{LinTerm, LocId, TransitionSystem, Var};
use crate::size_rel::SizeAnalysis;
use crate::solver::{self, Bound};
use crate::termination::{self, AnalysisResult, Verdict};
use crate::transform;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("termination analysis failed: {0}")]
    Analyze(#[from] termination::AnalyzeError),
    #[error("transformation failed: {0}")]
    Transform(#[from] transform::TransformError),
    #[error("CRS generation failed: {0}")]
    Crs(#[from] crs::CrsError),
}

pub struct Pipeline {
    pub analysis: AnalysisResult,
    /// Hierarchically loop-nested form; equals the analyzed system when the
    /// verdict is Failed.
    pub transformed: TransitionSystem,
    pub rf_ann: BTreeMap<LocId, LinTerm<Var>>,
    pub validator_ok: bool,
    pub validator_diags: Vec<String>,
    pub crs: Option<CostRelationSystem>,
    pub crs_embedded: Option<CostRelationSystem>,
    pub bound: Bound,
}

pub fn run(input: &TransitionSystem) -> Result<Pipeline, PipelineError> {
    let analysis = termination::analyze(input)?;
    if let Verdict::Failed(_) = analysis.verdict {
        return Ok(Pipeline {
            transformed: analysis.ts.clone(),
            analysis,
            rf_ann: BTreeMap::new(),
            validator_ok: false,
            validator_diags: vec!["no termination proof".to_string()],
            crs: None,
            crs_embedded: None,
            bound: Bound::infinite(),
        });
    }

    let mut ts = analysis.ts.clone();
    let mut rf_ann: BTreeMap<LocId, LinTerm<Var>> = BTreeMap::new();
    // Proof order is leaf-first (reverse topological), so each transform
    // only touches transitions of its own component and its entries/exits.
    for (c, p) in &analysis.proofs {
        transform::nested_loop_trans(&mut ts, c, p, &mut rf_ann, 0)?;
    }

    let mut size = SizeAnalysis::new();
    let mut validator_ok = true;
    let mut validator_diags = Vec::new();
    for scc in graph::nontrivial_sccs(&ts) {
        let (ok, diags) = transform::is_lb_hierarchically_loop_nested(&ts, &scc, &rf_ann, &mut size);
        validator_ok &= ok;
        validator_diags.extend(diags);
    }

    let crs_plain = crs::generate_crs(&ts, &mut size)?;
    let crs_embedded = crs::embed_ranking_functions(&crs_plain, &ts, &rf_ann).ok();

    let mut bound = solver::solve(&ts, &rf_ann, &mut size);
    let conditional = matches!(analysis.verdict, Verdict::Conditional) && !analysis.pre.is_empty();
    let crs = if conditional {
        bound.conditional = Some(analysis.pre.clone());
        Some(crs::make_conditional(&crs_plain, &analysis.pre))
    } else {
        Some(crs_plain)
    };

    Ok(Pipeline {
        analysis,
        transformed: ts,
        rf_ann,
        validator_ok,
        validator_diags,
        crs,
        crs_embedded,
        bound,
    })
}
