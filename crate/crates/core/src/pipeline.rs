//! End-to-end grounding: alignment, optional rectification, then viewpoint
//! distillation and the reasoning tournament.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align, AlignmentOutcome};
use crate::clients::{ModelClients, QueryParse};
use crate::config::Config;
use crate::distillation::{build_prompt_set, disambiguate, Disambiguation, DistillError, PromptSet, Round};
use crate::geometry::Box3D;
use crate::raster::encode_png;
use crate::rectification::{rectify, should_rectify, RectificationCase};
use crate::scene::{scene_category_list, Proposal3D, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Grounded,
    NoMatch,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SemanticAlignment,
    InstanceRectification,
    ViewpointDistillation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub query: String,
    pub scene_id: String,
    pub status: Status,
    pub proposal_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: Option<Box3D<f64>>,
    pub rationale: String,
    /// Whether the answer came from a rectified proposal.
    pub rectified: bool,
    pub failed_phase: Option<Phase>,
    pub error: Option<String>,
    pub rounds: Vec<Round>,
}

/// The public result record written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query: String,
    pub scene_id: String,
    pub status: Status,
    pub proposal_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: Option<Box3D<f64>>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_dir: Option<String>,
}

impl GroundingResult {
    fn new(query: &str, scene_id: &str) -> Self {
        Self {
            query: query.to_string(),
            scene_id: scene_id.to_string(),
            status: Status::NoMatch,
            proposal_id: None,
            bbox: None,
            rationale: String::new(),
            rectified: false,
            failed_phase: None,
            error: None,
            rounds: Vec::new(),
        }
    }

    fn failed(mut self, phase: Phase, error: impl ToString) -> Self {
        self.status = Status::Error;
        self.failed_phase = Some(phase);
        self.error = Some(error.to_string());
        self
    }

    pub fn record(&self, trace_dir: Option<&Path>) -> ResultRecord {
        ResultRecord {
            query: self.query.clone(),
            scene_id: self.scene_id.clone(),
            status: self.status,
            proposal_id: self.proposal_id,
            bbox: self.bbox,
            rationale: self.rationale.clone(),
            trace_dir: trace_dir.map(|p| p.display().to_string()),
        }
    }
}

/// Everything the pipeline computed for one query.
#[derive(Debug, Default)]
pub struct Trace {
    pub parse: Option<QueryParse>,
    pub alignment: Option<AlignmentOutcome>,
    pub rectification: Vec<RectificationCase>,
    pub prompt_sets: Vec<PromptSet>,
    pub disambiguation: Option<Disambiguation>,
}

impl Trace {
    /// Writes JSON records and every rendered image under `dir`.
    pub fn write(&self, dir: &Path, result: &GroundingResult) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = |name: &str, v: &dyn ToJson| std::fs::write(dir.join(name), v.to_pretty() + "\n");
        if let Some(p) = &self.parse {
            json("parse.json", p)?;
        }
        if let Some(a) = &self.alignment {
            json("alignment.json", a)?;
        }
        if !self.rectification.is_empty() {
            json("rectification.json", &self.rectification)?;
            for case in &self.rectification {
                for (name, img) in &case.renderings {
                    let file = format!("rect_seed{}_{name}.png", case.proposal_id);
                    std::fs::write(dir.join(file), encode_png(img))?;
                }
            }
        }
        for set in &self.prompt_sets {
            for pair in &set.pairs {
                let file = format!("composite_p{}_c{}_f{}.png", set.proposal_id, pair.cluster_id, pair.frame_id);
                std::fs::write(dir.join(file), encode_png(&pair.composite))?;
            }
        }
        if !self.prompt_sets.is_empty() {
            json("prompt_sets.json", &self.prompt_sets)?;
        }
        if let Some(d) = &self.disambiguation {
            json("tournament.json", d)?;
        }
        json("result.json", result)
    }
}

trait ToJson {
    fn to_pretty(&self) -> String;
}

impl<T: Serialize> ToJson for T {
    fn to_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace records serialize")
    }
}

/// Runs the full pipeline for one query. Failures are reported in the
/// result's status rather than returned.
pub fn run_grounding(
    clients: &ModelClients,
    scene: &Scene,
    proposals: &[Proposal3D],
    query: &str,
    config: &Config,
) -> (GroundingResult, Trace) {
    let mut trace = Trace::default();
    let result = GroundingResult::new(query, &scene.scene_id);

    // Phase 1: semantic alignment.
    let categories = scene_category_list(proposals);
    let parse = match clients.parse_query(query, &categories) {
        Ok(p) => p,
        Err(e) => return (result.failed(Phase::SemanticAlignment, e), trace),
    };
    trace.parse = Some(parse.clone());
    let outcome = match align(clients, proposals, &parse, scene, config) {
        Ok(o) => o,
        Err(e) => return (result.failed(Phase::SemanticAlignment, e), trace),
    };
    trace.alignment = Some(outcome.clone());

    // Phase 2: instance rectification when nothing matched.
    let mut candidates = outcome.refined_proposals.clone();
    let mut rectified = false;
    if should_rectify(&outcome, config.gamma) {
        let seeds: Vec<&Proposal3D> = proposals
            .iter()
            .filter(|p| outcome.candidate_ids.contains(&p.proposal_id))
            .collect();
        match rectify(clients, &seeds, proposals, &parse, scene, config) {
            Ok((props, cases)) => {
                trace.rectification = cases;
                candidates = props;
                rectified = true;
            }
            Err(e) => return (result.failed(Phase::InstanceRectification, e), trace),
        }
    }
    if candidates.is_empty() {
        let mut r = result;
        r.rationale = "no candidate survived alignment or rectification".into();
        return (r, trace);
    }

    // Phase 3: viewpoint distillation and disambiguation.
    let built: Vec<Result<PromptSet, DistillError>> =
        candidates.par_iter().map(|p| build_prompt_set(p, scene, config)).collect();
    let mut sets = Vec::new();
    for r in built {
        match r {
            Ok(s) if !s.pairs.is_empty() => sets.push(s),
            Ok(_) | Err(DistillError::NoVisibleFrames(_)) => {}
            Err(e) => return (result.failed(Phase::ViewpointDistillation, e), trace),
        }
    }
    if sets.is_empty() {
        let mut r = result;
        r.rationale = "no candidate is visible in any frame".into();
        return (r, trace);
    }
    let d = match disambiguate(clients, &sets, query, config.batch_limit) {
        Ok(d) => d,
        Err(e) => {
            trace.prompt_sets = sets;
            return (result.failed(Phase::ViewpointDistillation, e), trace);
        }
    };
    trace.prompt_sets = sets;
    let mut r = result;
    r.rounds = d.rounds.clone();
    r.rectified = rectified;
    match d.winner {
        Some(id) => {
            let chosen = candidates.iter().find(|p| p.proposal_id == id).expect("winner is a candidate");
            r.status = Status::Grounded;
            r.proposal_id = Some(id);
            r.bbox = Some(chosen.bbox);
            r.rationale = d.rationale.clone();
        }
        None => r.rationale = "every candidate was rejected".into(),
    }
    trace.disambiguation = Some(d);
    (r, trace)
}

/// Runs the pipeline and, when `trace_dir` is set, writes the trace there.
pub fn ground(
    clients: &ModelClients,
    scene: &Scene,
    proposals: &[Proposal3D],
    query: &str,
    config: &Config,
    trace_dir: Option<&Path>,
) -> std::io::Result<(GroundingResult, Option<PathBuf>)> {
    let (result, trace) = run_grounding(clients, scene, proposals, query, config);
    if let Some(dir) = trace_dir {
        trace.write(dir, &result)?;
        return Ok((result, Some(dir.to_path_buf())));
    }
    Ok((result, None))
}
