//! Viewpoint distillation: view clustering, BEV rendering, RGB|BEV prompt
//! pairs and the batched multiple-choice tournament.

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, ModelClients, Turn};
use crate::config::Config;
use crate::geometry::{
    cluster_directions, proposal_visibility, rank_visible_frames, viewing_direction, Box2D, Box3D, ViewCluster,
};
use crate::raster::{draw_arrow, draw_box_outline, draw_dot, draw_label, hconcat_letterboxed, text_size, RED, WHITE};
use crate::scene::{CameraFrame, Proposal3D, Scene};

pub const BEV_MARGIN_M: f64 = 0.5;
pub const BEV_FOOTPRINT_PX: u32 = 2;
pub const BEV_CAMERA_DOT_RADIUS: u32 = 4;
pub const BEV_ARROW_PX: f64 = 40.0;
pub const COMPOSITE_BOX_PX: u32 = 3;
pub const GUTTER_PX: u32 = 4;
pub const LABEL_SCALE: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("proposal {0} is not visible in any frame")]
    NoVisibleFrames(u32),
    #[error("proposal {proposal_id} is not visible in frame {frame_id}")]
    NotVisible { proposal_id: u32, frame_id: u32 },
    #[error("scene XY extent is smaller than one BEV pixel")]
    DegenerateExtent,
}

/// Top-`k_v` frames by projected area, clustered by viewing direction.
/// Each cluster's representative is its member with the largest area
/// (ties: lowest frame id).
pub fn distill_viewpoints(
    proposal: &Proposal3D,
    scene: &Scene,
    k_v: usize,
    epsilon_rad: f64,
    config: &Config,
) -> Result<Vec<ViewCluster>, DistillError> {
    let ranked: Vec<_> = rank_visible_frames(proposal, scene, config.min_visible_fraction, config.depth_tol_m)
        .into_iter()
        .take(k_v.max(1))
        .collect();
    let centroid = proposal.centroid(scene);
    let mut kept = Vec::new();
    let mut dirs = Vec::new();
    for vis in ranked {
        let frame = scene.frame(vis.frame_id).expect("ranked frame exists");
        if let Ok(d) = viewing_direction(frame, &centroid) {
            dirs.push(d);
            kept.push(vis);
        }
    }
    if kept.is_empty() {
        return Err(DistillError::NoVisibleFrames(proposal.proposal_id));
    }
    Ok(cluster_directions(&dirs, epsilon_rad)
        .into_iter()
        .map(|c| {
            let members: Vec<_> = c.members.iter().map(|&m| &kept[m]).collect();
            let rep = members
                .iter()
                .max_by(|a, b| a.pixel_area.cmp(&b.pixel_area).then(b.frame_id.cmp(&a.frame_id)))
                .expect("clusters are non-empty");
            ViewCluster {
                frame_ids: members.iter().map(|v| v.frame_id).collect(),
                center_direction: c.center,
                representative_frame_id: rep.frame_id,
            }
        })
        .collect())
}

/// Pixel grid of a BEV rendering: north-up, `v = (y_max - y) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub y_max: f64,
    pub m_per_px: f64,
    pub width: u32,
    pub height: u32,
}

impl BevGrid {
    pub fn for_scene(scene: &Scene, m_per_px: f64) -> Result<Self, DistillError> {
        let b = scene.bounds().ok_or(DistillError::DegenerateExtent)?;
        let span_x = b.max.x - b.min.x;
        let span_y = b.max.y - b.min.y;
        if span_x < m_per_px || span_y < m_per_px {
            return Err(DistillError::DegenerateExtent);
        }
        let px = |span: f64| ((span + 2.0 * BEV_MARGIN_M) / m_per_px - 1e-9).ceil() as u32;
        Ok(Self {
            x_min: b.min.x - BEV_MARGIN_M,
            y_max: b.max.y + BEV_MARGIN_M,
            m_per_px,
            width: px(span_x),
            height: px(span_y),
        })
    }

    /// Continuous pixel coordinates of a world XY position.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.m_per_px, (self.y_max - y) / self.m_per_px)
    }

    pub fn footprint(&self, b: &Box3D<f64>) -> Box2D<f64> {
        let (u0, v0) = self.to_pixel(b.min.x, b.max.y);
        let (u1, v1) = self.to_pixel(b.max.x, b.min.y);
        Box2D::new(u0, v0, u1, v1)
    }
}

/// Top-down rendering of the cloud with highlighted boxes and, optionally,
/// the camera of the paired frame.
pub fn render_bev(
    scene: &Scene,
    highlights: &[(u32, Box3D<f64>)],
    camera: Option<&CameraFrame>,
    m_per_px: f64,
) -> Result<RgbImage, DistillError> {
    let grid = BevGrid::for_scene(scene, m_per_px)?;
    let (w, h) = (grid.width, grid.height);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let mut top = vec![f64::NEG_INFINITY; (w * h) as usize];
    for (p, c) in scene.points.iter().zip(&scene.colors) {
        let (u, v) = grid.to_pixel(p.x, p.y);
        let x = (u.floor().max(0.0) as u32).min(w - 1);
        let y = (v.floor().max(0.0) as u32).min(h - 1);
        let slot = (y * w + x) as usize;
        if p.z > top[slot] {
            top[slot] = p.z;
            img.put_pixel(x, y, Rgb(*c));
        }
    }
    for (id, b) in highlights {
        let fp = grid.footprint(b);
        draw_box_outline(&mut img, &fp, BEV_FOOTPRINT_PX, RED);
        let text = id.to_string();
        let (tw, th) = text_size(&text, LABEL_SCALE);
        let cx = (fp.x_min + fp.x_max) / 2.0;
        let cy = (fp.y_min + fp.y_max) / 2.0;
        let x0 = (cx - (tw as f64 + 4.0) / 2.0).round() as i64;
        let y0 = (cy - (th as f64 + 4.0) / 2.0).round() as i64;
        draw_label(&mut img, x0, y0, &text, LABEL_SCALE, WHITE, RED);
    }
    if let Some(frame) = camera {
        let pos = frame.pose.camera_position();
        let axis = frame.pose.optical_axis();
        let (u, v) = grid.to_pixel(pos.x, pos.y);
        draw_dot(&mut img, u, v, BEV_CAMERA_DOT_RADIUS, RED);
        let (dx, dy) = (axis.x, -axis.y);
        let n = (dx * dx + dy * dy).sqrt();
        if n > 1e-9 {
            draw_arrow(&mut img, (u, v), (dx / n, dy / n), BEV_ARROW_PX, RED);
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevCamera {
    pub position: [f64; 2],
    /// Unit XY direction, or zero when the camera looks straight up or down.
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub proposal_id: u32,
    pub cluster_id: usize,
    pub frame_id: u32,
    pub bev_camera: BevCamera,
    #[serde(skip)]
    pub composite: RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub proposal_id: u32,
    pub pairs: Vec<PromptPair>,
}

/// Draws the proposal's projected box and ID on `frame` and places the BEV
/// to its right.
pub fn compose_prompt_pair(
    frame: &CameraFrame,
    proposal: &Proposal3D,
    bev: &RgbImage,
    scene: &Scene,
    cluster_id: usize,
    config: &Config,
) -> Result<PromptPair, DistillError> {
    let vis = proposal_visibility(proposal, frame, scene, config.depth_tol_m);
    let bbox = vis.bbox2d.ok_or(DistillError::NotVisible {
        proposal_id: proposal.proposal_id,
        frame_id: frame.frame_id,
    })?;
    let mut left = frame.image.clone();
    draw_box_outline(&mut left, &bbox, COMPOSITE_BOX_PX, RED);
    draw_label(
        &mut left,
        bbox.x_min.floor() as i64,
        bbox.y_min.floor() as i64,
        &proposal.proposal_id.to_string(),
        LABEL_SCALE,
        WHITE,
        RED,
    );
    let pos = frame.pose.camera_position();
    let axis = frame.pose.optical_axis();
    let n = (axis.x * axis.x + axis.y * axis.y).sqrt();
    let direction = if n > 1e-9 { [axis.x / n, axis.y / n] } else { [0.0, 0.0] };
    Ok(PromptPair {
        proposal_id: proposal.proposal_id,
        cluster_id,
        frame_id: frame.frame_id,
        bev_camera: BevCamera {
            position: [pos.x, pos.y],
            direction,
        },
        composite: hconcat_letterboxed(&left, bev, GUTTER_PX),
    })
}

/// One prompt pair per view cluster, in cluster order.
pub fn build_prompt_set(proposal: &Proposal3D, scene: &Scene, config: &Config) -> Result<PromptSet, DistillError> {
    let clusters = distill_viewpoints(proposal, scene, config.k_v, config.epsilon_radians(), config)?;
    let highlight = [(proposal.proposal_id, proposal.bbox)];
    let pairs = clusters
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            let frame = scene.frame(c.representative_frame_id).expect("cluster frame exists");
            let bev = render_bev(scene, &highlight, Some(frame), config.bev_m_per_px)?;
            compose_prompt_pair(frame, proposal, &bev, scene, ci, config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PromptSet {
        proposal_id: proposal.proposal_id,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub proposal_id: u32,
    pub cluster_id: usize,
    pub frame_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: String,
    pub text: String,
    pub images: usize,
}

impl From<&Turn> for TurnRecord {
    fn from(t: &Turn) -> Self {
        Self {
            role: t.role.to_string(),
            text: t.text.clone(),
            images: t.images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchOutcome {
    Winner {
        proposal_id: u32,
        image_id: i64,
        process: String,
        reprompts: u32,
    },
    Eliminated {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub candidates: Vec<u32>,
    pub images: Vec<ImageRef>,
    pub outcome: BatchOutcome,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: usize,
    pub full_pairs: bool,
    pub batches: Vec<BatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disambiguation {
    pub winner: Option<u32>,
    pub rationale: String,
    pub rounds: Vec<Round>,
}

impl Disambiguation {
    /// Number of reasoning sessions started, one per batch.
    pub fn vlm_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.batches.len()).sum()
    }
}

/// `ceil(n/b) + ceil(ceil(n/b)/b) + ...` until one candidate remains.
pub fn tournament_call_bound(n: usize, batch_limit: usize) -> usize {
    let mut n = n;
    let mut calls = 0;
    while n > 1 {
        n = n.div_ceil(batch_limit);
        calls += n;
    }
    calls
}

/// Single-elimination tournament over the candidates' prompt sets.
///
/// Each round shows one composite per candidate in batches of at most
/// `batch_limit`; batch winners advance. When every remaining candidate fits
/// in one batch and all of their pairs fit too, that final round shows the
/// full pair sets. A refused or exhausted batch eliminates all of its
/// candidates.
pub fn disambiguate(
    clients: &ModelClients,
    sets: &[PromptSet],
    query: &str,
    batch_limit: usize,
) -> Result<Disambiguation, ClientError> {
    let mut alive: Vec<&PromptSet> = sets.iter().filter(|s| !s.pairs.is_empty()).collect();
    let mut rounds = Vec::new();
    if alive.len() == 1 {
        return Ok(Disambiguation {
            winner: Some(alive[0].proposal_id),
            rationale: "single candidate".into(),
            rounds,
        });
    }
    let mut rationale = String::new();
    while alive.len() > 1 {
        let final_round = alive.len() <= batch_limit;
        let total_pairs: usize = alive.iter().map(|s| s.pairs.len()).sum();
        let full_pairs = final_round && total_pairs <= batch_limit;
        let mut round = Round {
            index: rounds.len(),
            full_pairs,
            batches: Vec::new(),
        };
        let mut winners = Vec::new();
        for batch in alive.chunks(batch_limit) {
            let shown: Vec<&PromptPair> = batch
                .iter()
                .flat_map(|s| if full_pairs { &s.pairs[..] } else { &s.pairs[..1] })
                .collect();
            let images: Vec<RgbImage> = shown.iter().map(|p| p.composite.clone()).collect();
            let refs: Vec<ImageRef> = shown
                .iter()
                .map(|p| ImageRef {
                    proposal_id: p.proposal_id,
                    cluster_id: p.cluster_id,
                    frame_id: p.frame_id,
                })
                .collect();
            let candidates = batch.iter().map(|s| s.proposal_id).collect();
            let record = match clients.choose_image(&images, query, batch_limit) {
                Ok(session) => {
                    let pid = refs[session.result.image_id as usize].proposal_id;
                    let set = batch.iter().find(|s| s.proposal_id == pid).expect("image maps to a candidate");
                    winners.push(*set);
                    rationale = session.result.process.clone();
                    BatchRecord {
                        candidates,
                        images: refs,
                        outcome: BatchOutcome::Winner {
                            proposal_id: pid,
                            image_id: session.result.image_id,
                            process: session.result.process,
                            reprompts: session.reprompts,
                        },
                        turns: session.turns.iter().map(TurnRecord::from).collect(),
                    }
                }
                Err(ClientError::RefusalOrExhausted(reason)) => BatchRecord {
                    candidates,
                    images: refs,
                    outcome: BatchOutcome::Eliminated { reason },
                    turns: Vec::new(),
                },
                Err(e) => return Err(e),
            };
            round.batches.push(record);
        }
        rounds.push(round);
        alive = winners;
        if final_round {
            break;
        }
    }
    Ok(Disambiguation {
        winner: alive.first().map(|s| s.proposal_id),
        rationale: if alive.is_empty() { String::new() } else { rationale },
        rounds,
    })
}
