//! Semantic alignment: coarse embedding filter, IoU-weighted 2D-3D matching
//! and category-level propagation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, ModelClients, QueryParse};
use crate::config::Config;
use crate::geometry::{iou_2d, rank_visible_frames};
use crate::raster::crop_padded;
use crate::scene::{Proposal3D, ProposalState, Scene};

/// Padding applied per side to the best-view crop before embedding.
pub const CROP_PADDING: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("no proposal category is among the ranked categories {0:?}")]
    NoCandidates(Vec<String>),
    #[error("proposal {0} is not visible in any frame")]
    NoVisibleFrames(u32),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Cosine similarity between the target text and a proposal's best-view crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaScore {
    pub proposal_id: u32,
    pub category: String,
    /// `None` when the proposal has no visible frame to crop from.
    pub frame_id: Option<u32>,
    pub zeta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseResult {
    pub top3_categories: Vec<String>,
    pub candidate_ids: Vec<u32>,
    pub zeta: Vec<ZetaScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMatch {
    pub frame_id: u32,
    pub best_iou: f64,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub proposal_id: u32,
    pub eta: f64,
    pub per_frame: Vec<FrameMatch>,
}

/// Mean of `best_iou * best_score` over the evaluated frames; 0 when none.
pub fn eta(per_frame: &[FrameMatch]) -> f64 {
    if per_frame.is_empty() {
        return 0.0;
    }
    per_frame.iter().map(|f| f.best_iou * f.best_score).sum::<f64>() / per_frame.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub proposal_id: u32,
    pub from_category: String,
    pub to_category: String,
    pub state: ProposalState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutcome {
    pub refined_proposals: Vec<Proposal3D>,
    pub valid_categories: BTreeSet<String>,
    pub max_eta: f64,
    pub top3_categories: Vec<String>,
    pub candidate_ids: Vec<u32>,
    pub zeta: Vec<ZetaScore>,
    pub scores: Vec<MatchScore>,
    pub transitions: Vec<Transition>,
}

/// Picks the three highest-ζ proposals (ties by ascending id) and returns
/// their distinct categories in rank order.
pub fn top3_by_zeta(zeta: &[ZetaScore]) -> Vec<String> {
    let mut ranked: Vec<&ZetaScore> = zeta.iter().filter(|z| z.zeta.is_some()).collect();
    ranked.sort_by(|a, b| {
        b.zeta
            .partial_cmp(&a.zeta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.proposal_id.cmp(&b.proposal_id))
    });
    let mut cats: Vec<String> = Vec::new();
    for z in ranked.into_iter().take(3) {
        if !cats.contains(&z.category) {
            cats.push(z.category.clone());
        }
    }
    cats
}

pub fn coarse_filter(
    clients: &ModelClients,
    proposals: &[Proposal3D],
    parse: &QueryParse,
    scene: &Scene,
    config: &Config,
) -> Result<CoarseResult, AlignmentError> {
    let pool: Vec<&Proposal3D> = proposals
        .iter()
        .filter(|p| parse.top_categories.contains(&p.category))
        .collect();
    if pool.is_empty() {
        return Err(AlignmentError::NoCandidates(parse.top_categories.clone()));
    }
    let text = clients.embed_text(&parse.target_category)?;
    let zeta = pool
        .par_iter()
        .map(|p| {
            let best = rank_visible_frames(p, scene, config.min_visible_fraction, config.depth_tol_m)
                .into_iter()
                .next();
            let Some(vis) = best else {
                return Ok(ZetaScore {
                    proposal_id: p.proposal_id,
                    category: p.category.clone(),
                    frame_id: None,
                    zeta: None,
                });
            };
            let frame = scene.frame(vis.frame_id).expect("ranked frame exists");
            let bbox = vis.bbox2d.expect("ranked frames have a box");
            let crop = crop_padded(&frame.image, &bbox, CROP_PADDING);
            let emb = clients.embed_image(&crop)?;
            Ok(ZetaScore {
                proposal_id: p.proposal_id,
                category: p.category.clone(),
                frame_id: Some(vis.frame_id),
                zeta: Some(text.cosine(&emb)),
            })
        })
        .collect::<Result<Vec<_>, ClientError>>()?;
    let top3_categories = top3_by_zeta(&zeta);
    let candidate_ids = proposals
        .iter()
        .filter(|p| top3_categories.contains(&p.category))
        .map(|p| p.proposal_id)
        .collect();
    Ok(CoarseResult {
        top3_categories,
        candidate_ids,
        zeta,
    })
}

pub fn fine_match(
    clients: &ModelClients,
    proposal: &Proposal3D,
    scene: &Scene,
    target_category: &str,
    config: &Config,
) -> Result<MatchScore, AlignmentError> {
    let frames = rank_visible_frames(proposal, scene, config.min_visible_fraction, config.depth_tol_m);
    if frames.is_empty() {
        return Err(AlignmentError::NoVisibleFrames(proposal.proposal_id));
    }
    let per_frame = frames
        .into_iter()
        .take(config.max_fine_frames)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|vis| {
            let frame = scene.frame(vis.frame_id).expect("ranked frame exists");
            let projected = vis.bbox2d.expect("ranked frames have a box");
            let detections = clients.segment_by_text(&frame.image, target_category)?;
            let mut best = (0.0, 0.0);
            for d in &detections {
                let iou = iou_2d(&projected, &d.bbox);
                if iou > best.0 {
                    best = (iou, d.score);
                }
            }
            Ok(FrameMatch {
                frame_id: vis.frame_id,
                best_iou: best.0,
                best_score: best.1,
            })
        })
        .collect::<Result<Vec<_>, ClientError>>()?;
    Ok(MatchScore {
        proposal_id: proposal.proposal_id,
        eta: eta(&per_frame),
        per_frame,
    })
}

/// Category-level propagation over scored candidates.
///
/// Candidates with `eta >= gamma` become `matched` and take the target
/// category; the remaining candidates whose category was validated by some
/// match become `salvaged`; everything else is `discarded`.
pub fn propagate(
    candidates: &[(&Proposal3D, f64)],
    target_category: &str,
    gamma: f64,
) -> (Vec<Proposal3D>, BTreeSet<String>, Vec<Transition>) {
    let valid: BTreeSet<String> = candidates
        .iter()
        .filter(|(_, e)| *e >= gamma)
        .map(|(p, _)| p.category.clone())
        .collect();
    let mut refined = Vec::new();
    let mut transitions = Vec::new();
    for (p, e) in candidates {
        let (state, category) = if *e >= gamma {
            (ProposalState::Matched, target_category.to_string())
        } else if valid.contains(&p.category) {
            (ProposalState::Salvaged, p.category.clone())
        } else {
            (ProposalState::Discarded, p.category.clone())
        };
        debug_assert!(p.state.can_become(state));
        transitions.push(Transition {
            proposal_id: p.proposal_id,
            from_category: p.category.clone(),
            to_category: category.clone(),
            state,
        });
        if state != ProposalState::Discarded {
            let mut q = (*p).clone();
            q.state = state;
            q.category = category;
            refined.push(q);
        }
    }
    (refined, valid, transitions)
}

pub fn align(
    clients: &ModelClients,
    proposals: &[Proposal3D],
    parse: &QueryParse,
    scene: &Scene,
    config: &Config,
) -> Result<AlignmentOutcome, AlignmentError> {
    let coarse = coarse_filter(clients, proposals, parse, scene, config)?;
    let candidates: Vec<&Proposal3D> = proposals
        .iter()
        .filter(|p| coarse.candidate_ids.contains(&p.proposal_id))
        .collect();
    let scores = candidates
        .par_iter()
        .map(|p| match fine_match(clients, p, scene, &parse.target_category, config) {
            Err(AlignmentError::NoVisibleFrames(id)) => Ok(MatchScore {
                proposal_id: id,
                eta: 0.0,
                per_frame: Vec::new(),
            }),
            other => other,
        })
        .collect::<Result<Vec<_>, AlignmentError>>()?;
    let scored: Vec<(&Proposal3D, f64)> = candidates.iter().copied().zip(scores.iter().map(|s| s.eta)).collect();
    let (refined_proposals, valid_categories, transitions) =
        propagate(&scored, &parse.target_category, config.gamma);
    let max_eta = scores.iter().map(|s| s.eta).fold(0.0, f64::max);
    Ok(AlignmentOutcome {
        refined_proposals,
        valid_categories,
        max_eta,
        top3_categories: coarse.top3_categories,
        candidate_ids: coarse.candidate_ids,
        zeta: coarse.zeta,
        scores,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box3D, Vec3};

    fn prop(id: u32, cat: &str) -> Proposal3D {
        Proposal3D {
            proposal_id: id,
            mask: vec![id as usize],
            bbox: Box3D::new(Vec3::zero(), Vec3::zero()),
            category: cat.into(),
            confidence: 1.0,
            state: ProposalState::Initial,
        }
    }

    fn fm(iou: f64, score: f64) -> FrameMatch {
        FrameMatch { frame_id: 0, best_iou: iou, best_score: score }
    }

    #[test]
    fn eta_examples() {
        assert_eq!(eta(&[fm(0.5, 0.8)]), 0.4);
        assert_eq!(eta(&[fm(0.6, 1.0), fm(0.0, 0.0)]), 0.3);
        assert_eq!(eta(&[fm(0.0, 0.0), fm(0.0, 0.0)]), 0.0);
        assert_eq!(eta(&[]), 0.0);
    }

    #[test]
    fn top3_example() {
        let zs: Vec<ZetaScore> = [(0.9, "table"), (0.8, "table"), (0.7, "desk"), (0.2, "chair"), (0.1, "sofa")]
            .iter()
            .enumerate()
            .map(|(i, (z, c))| ZetaScore {
                proposal_id: i as u32,
                category: c.to_string(),
                frame_id: Some(0),
                zeta: Some(*z),
            })
            .collect();
        assert_eq!(top3_by_zeta(&zs), vec!["table", "desk"]);
    }

    #[test]
    fn top3_ties_prefer_lower_ids() {
        let zs: Vec<ZetaScore> = ["d", "c", "b", "a"]
            .iter()
            .enumerate()
            .rev()
            .map(|(i, c)| ZetaScore {
                proposal_id: i as u32,
                category: c.to_string(),
                frame_id: Some(0),
                zeta: Some(0.5),
            })
            .collect();
        assert_eq!(top3_by_zeta(&zs), vec!["d", "c", "b"]);
    }

    #[test]
    fn propagation_examples() {
        let (a, b) = (prop(0, "table"), prop(1, "table"));
        let (refined, valid, _) = propagate(&[(&a, 0.10), (&b, 0.05)], "table", 0.07);
        assert_eq!(refined[0].state, ProposalState::Matched);
        assert_eq!(refined[1].state, ProposalState::Salvaged);
        assert_eq!(valid, BTreeSet::from(["table".to_string()]));

        let (refined, valid, _) = propagate(&[(&a, 0.05), (&b, 0.03)], "table", 0.07);
        assert!(refined.is_empty() && valid.is_empty());

        let d = prop(1, "desk");
        let (refined, _, tr) = propagate(&[(&a, 0.2), (&d, 0.01)], "table", 0.07);
        assert_eq!(refined.len(), 1);
        assert_eq!(tr[1].state, ProposalState::Discarded);
    }

    #[test]
    fn matched_take_the_target_category() {
        let a = prop(0, "desk");
        let (refined, valid, _) = propagate(&[(&a, 0.07)], "table", 0.07);
        assert_eq!(refined[0].category, "table");
        assert_eq!(valid, BTreeSet::from(["desk".to_string()]));
    }
}
