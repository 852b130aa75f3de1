//! Instance rectification: rebuilds target geometry from VLM-pointed,
//! point-prompted 2D masks when no proposal passes the matching threshold.

use std::collections::BTreeSet;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentOutcome;
use crate::clients::{ClientError, ModelClients, PointPromptResult, Presence, QueryParse};
use crate::config::Config;
use crate::geometry::{
    back_project_mask, bbox_from_indices, denoise_points, fuse_views, proposal_visibility, rank_visible_frames,
    Box3D,
};
use crate::raster::{draw_box_outline, draw_dot, draw_label, ANCHOR_PALETTE, GREEN, RED, WHITE};
use crate::scene::{CameraFrame, Proposal3D, ProposalState, Scene};

pub const DOT_RADIUS: u32 = 6;
pub const ANCHOR_OUTLINE: u32 = 3;

/// True iff no candidate reached the matching threshold.
pub fn should_rectify(outcome: &AlignmentOutcome, gamma: f64) -> bool {
    outcome.max_eta < gamma
}

/// Draws every anchor visible in `frame` and returns the image together with
/// the anchor descriptions for the prompt, joined by `"; "`.
pub fn annotate_anchors(frame: &CameraFrame, anchors: &[&Proposal3D], scene: &Scene, config: &Config) -> (RgbImage, String) {
    let mut img = frame.image.clone();
    let mut descriptions = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let vis = proposal_visibility(a, frame, scene, config.depth_tol_m);
        let Some(b) = vis.bbox2d else { continue };
        let color = ANCHOR_PALETTE[i % ANCHOR_PALETTE.len()];
        let label = format!("A{}:{}", a.proposal_id, a.category);
        draw_box_outline(&mut img, &b, ANCHOR_OUTLINE, color);
        draw_label(&mut img, b.x_min.floor() as i64, b.y_min.floor() as i64, &label, 1, WHITE, color);
        descriptions.push(format!(
            "{label} [{:.0}, {:.0}, {:.0}, {:.0}]",
            b.x_min, b.y_min, b.x_max, b.y_max
        ));
    }
    (img, descriptions.join("; "))
}

/// Positive points in green and negative points in red.
pub fn draw_point_prompts(img: &RgbImage, points: &PointPromptResult) -> RgbImage {
    let mut out = img.clone();
    for &(u, v) in &points.positive_points {
        draw_dot(&mut out, u, v, DOT_RADIUS, GREEN);
    }
    for &(u, v) in &points.negative_points {
        draw_dot(&mut out, u, v, DOT_RADIUS, RED);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMask {
    pub frame_id: u32,
    pub mask_pixels: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectified {
    #[serde(rename = "box")]
    pub bbox: Box3D<f64>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationCase {
    pub proposal_id: u32,
    pub frames_considered: Vec<u32>,
    pub stage1_skipped: bool,
    pub stage1_survivors: Vec<u32>,
    pub stage2_points: Vec<(u32, PointPromptResult)>,
    pub stage3_verified: Vec<u32>,
    /// Frames dropped because a reply could not be parsed.
    pub parse_failures: Vec<(u32, String)>,
    pub per_view_masks: Vec<ViewMask>,
    pub fused_indices: Vec<usize>,
    pub rectified: Option<Rectified>,
    /// Annotated prompt images, named by stage and frame.
    #[serde(skip)]
    pub renderings: Vec<(String, RgbImage)>,
}

enum FrameOutcome {
    Stage1Dropped,
    Stage2Dropped,
    Stage3Dropped(PointPromptResult),
    /// Reply at `stage` could not be parsed; earlier stages passed.
    ParseFailed {
        stage: u8,
        message: String,
        points: Option<PointPromptResult>,
    },
    Verified {
        points: PointPromptResult,
        mask: Option<(usize, Vec<usize>)>,
    },
}

struct FrameRun {
    frame_id: u32,
    outcome: FrameOutcome,
    renderings: Vec<(String, RgbImage)>,
}

fn parse_soft<T>(r: Result<T, ClientError>) -> Result<Result<T, String>, ClientError> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(ClientError::ParseFailure { message, .. }) => Ok(Err(message)),
        Err(e) => Err(e),
    }
}

fn run_frame(
    clients: &ModelClients,
    frame: &CameraFrame,
    anchors: &[&Proposal3D],
    parse: &QueryParse,
    scene: &Scene,
    config: &Config,
) -> Result<FrameRun, ClientError> {
    let id = frame.frame_id;
    let mut run = FrameRun {
        frame_id: id,
        outcome: FrameOutcome::Stage1Dropped,
        renderings: Vec::new(),
    };
    let (annotated, desc) = annotate_anchors(frame, anchors, scene, config);
    if !parse.spatial_refs.is_empty() {
        run.renderings.push((format!("frame_{id}_anchors"), annotated.clone()));
        match parse_soft(clients.presence_check(&annotated, &parse.query, &desc))? {
            Err(message) => {
                run.outcome = FrameOutcome::ParseFailed { stage: 1, message, points: None };
                return Ok(run);
            }
            Ok(p) if p.presence == Presence::No => return Ok(run),
            Ok(_) => {}
        }
    }
    let points = match parse_soft(clients.point_prompt(&annotated, &parse.query, &desc))? {
        Err(message) => {
            run.outcome = FrameOutcome::ParseFailed { stage: 2, message, points: None };
            return Ok(run);
        }
        Ok(p) => p,
    };
    if points.presence == Presence::No || points.positive_points.is_empty() {
        run.outcome = FrameOutcome::Stage2Dropped;
        return Ok(run);
    }
    let dotted = draw_point_prompts(&annotated, &points);
    run.renderings.push((format!("frame_{id}_points"), dotted.clone()));
    match parse_soft(clients.verify_points(&dotted, &parse.query, &desc))? {
        Err(message) => {
            run.outcome = FrameOutcome::ParseFailed { stage: 3, message, points: Some(points) };
            return Ok(run);
        }
        Ok(v) if !v.query_match => {
            run.outcome = FrameOutcome::Stage3Dropped(points);
            return Ok(run);
        }
        Ok(_) => {}
    }
    let detections = clients.segment_by_points(&frame.image, &points.positive_points, &points.negative_points)?;
    let best = detections
        .iter()
        .filter(|d| d.mask.is_some())
        .fold(None, |acc: Option<&crate::clients::Detection2D>, d| match acc {
            Some(a) if a.score >= d.score => Some(a),
            _ => Some(d),
        });
    let mask = match best.and_then(|d| d.mask.as_ref()) {
        Some(m) => {
            let idx = back_project_mask(m, frame, scene, config.depth_tol_m).map_err(|e| ClientError::Service {
                role: crate::clients::Role::Segmenter,
                message: e.to_string(),
            })?;
            Some((m.count(), idx.into_iter().collect()))
        }
        None => None,
    };
    run.outcome = FrameOutcome::Verified { points, mask };
    Ok(run)
}

/// Runs the three-stage point prompting, segmentation and back-projection
/// for one seed proposal.
pub fn rectify_seed(
    clients: &ModelClients,
    seed: &Proposal3D,
    anchors: &[&Proposal3D],
    parse: &QueryParse,
    scene: &Scene,
    config: &Config,
) -> Result<RectificationCase, ClientError> {
    let frames: Vec<u32> = rank_visible_frames(seed, scene, config.min_visible_fraction, config.depth_tol_m)
        .into_iter()
        .take(config.k_v)
        .map(|v| v.frame_id)
        .collect();
    let runs = frames
        .par_iter()
        .map(|id| {
            let frame = scene.frame(*id).expect("ranked frame exists");
            run_frame(clients, frame, anchors, parse, scene, config)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let stage1_skipped = parse.spatial_refs.is_empty();
    let mut case = RectificationCase {
        proposal_id: seed.proposal_id,
        frames_considered: frames,
        stage1_skipped,
        stage1_survivors: Vec::new(),
        stage2_points: Vec::new(),
        stage3_verified: Vec::new(),
        parse_failures: Vec::new(),
        per_view_masks: Vec::new(),
        fused_indices: Vec::new(),
        rectified: None,
        renderings: Vec::new(),
    };
    for run in runs {
        case.renderings.extend(run.renderings);
        let id = run.frame_id;
        match run.outcome {
            FrameOutcome::Stage1Dropped => {}
            FrameOutcome::ParseFailed { stage, message, points } => {
                if stage > 1 {
                    case.stage1_survivors.push(id);
                }
                if let Some(p) = points {
                    case.stage2_points.push((id, p));
                }
                case.parse_failures.push((id, message));
            }
            FrameOutcome::Stage2Dropped => case.stage1_survivors.push(id),
            FrameOutcome::Stage3Dropped(points) => {
                case.stage1_survivors.push(id);
                case.stage2_points.push((id, points));
            }
            FrameOutcome::Verified { points, mask } => {
                case.stage1_survivors.push(id);
                case.stage2_points.push((id, points));
                case.stage3_verified.push(id);
                if let Some((mask_pixels, indices)) = mask {
                    case.per_view_masks.push(ViewMask {
                        frame_id: id,
                        mask_pixels,
                        indices,
                    });
                }
            }
        }
    }
    let views: Vec<BTreeSet<usize>> = case
        .per_view_masks
        .iter()
        .map(|v| v.indices.iter().copied().collect())
        .collect();
    if views.is_empty() {
        return Ok(case);
    }
    let fused = fuse_views(&views, config.fusion_min_votes.threshold(views.len()));
    let cleaned = denoise_points(&fused, scene, config.denoise_k, config.denoise_std_ratio);
    case.fused_indices = cleaned.iter().copied().collect();
    if let Ok(bbox) = bbox_from_indices(&cleaned, scene) {
        case.rectified = Some(Rectified {
            bbox,
            indices: case.fused_indices.clone(),
        });
    }
    Ok(case)
}

/// Rectifies every seed; returns the new proposal set and one case per seed.
///
/// New proposals are numbered after the largest existing id, carry the
/// target category, and take the mean stage-2 confidence of their verified
/// frames.
pub fn rectify(
    clients: &ModelClients,
    seeds: &[&Proposal3D],
    all_proposals: &[Proposal3D],
    parse: &QueryParse,
    scene: &Scene,
    config: &Config,
) -> Result<(Vec<Proposal3D>, Vec<RectificationCase>), ClientError> {
    let anchors: Vec<&Proposal3D> = all_proposals
        .iter()
        .filter(|p| parse.spatial_refs.contains(&p.category))
        .collect();
    let cases = seeds
        .par_iter()
        .map(|s| rectify_seed(clients, s, &anchors, parse, scene, config))
        .collect::<Result<Vec<_>, _>>()?;
    let mut next_id = all_proposals.iter().map(|p| p.proposal_id + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for case in &cases {
        let Some(r) = &case.rectified else { continue };
        let conf: Vec<f64> = case
            .stage2_points
            .iter()
            .filter(|(f, _)| case.stage3_verified.contains(f))
            .map(|(_, p)| p.confidence)
            .collect();
        out.push(Proposal3D {
            proposal_id: next_id,
            mask: r.indices.clone(),
            bbox: r.bbox,
            category: parse.target_category.clone(),
            confidence: conf.iter().sum::<f64>() / conf.len().max(1) as f64,
            state: ProposalState::Rectified,
        });
        next_id += 1;
    }
    Ok((out, cases))
}
