//! Synthetic scenes with known ground truth and an oracle model service.
//!
//! Every object is an axis-aligned box with a unique flat color, sampled on
//! its top and side faces. Views are rendered by point splatting, so depth
//! maps agree with the cloud exactly. The [`Oracle`] answers every model role
//! by looking at colors: it knows which color belongs to which object and
//! which object each query refers to.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use vground::clients::{default_response, Backend, BackendError, Role};
use vground::geometry::{Box3D, Intrinsics, Vec3};
use vground::raster::decode_png_b64;
use vground::scene::{Proposal3D, ProposalState, Scene};
use vground::synthetic::{render_look_at, BACKGROUND};

pub const FLOOR_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub category: String,
    pub color: [u8; 3],
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl ObjectSpec {
    pub fn new(category: &str, color: [u8; 3], min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            category: category.into(),
            color,
            min: Vec3::new(min[0], min[1], min[2]),
            max: Vec3::new(max[0], max[1], max[2]),
        }
    }
}

/// How a proposal is derived from a world object.
#[derive(Debug, Clone)]
pub enum ProposalSpec {
    /// All of the object's points, under the given label.
    Exact { object: usize, category: String },
    /// Only the points within `fraction` of each extent from the object's
    /// minimum corner, under the given label.
    Fragment { object: usize, category: String, fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct WorldObject {
    pub category: String,
    pub color: [u8; 3],
    pub indices: Vec<usize>,
    pub gt_box: Box3D<f64>,
}

pub struct World {
    pub scene: Scene,
    pub proposals: Vec<Proposal3D>,
    pub objects: Vec<WorldObject>,
}

#[derive(Debug, Clone)]
pub struct WorldBuilder {
    pub scene_id: String,
    pub objects: Vec<ObjectSpec>,
    pub proposals: Vec<ProposalSpec>,
    /// Floor extent `(x0, y0, x1, y1)` at z = 0, if any.
    pub floor: Option<[f64; 4]>,
    pub floor_spacing: f64,
    pub spacing: f64,
    pub cameras: Vec<(Vec3<f64>, Vec3<f64>)>,
    pub intrinsics: Intrinsics<f64>,
    pub extra_points: Vec<(Vec3<f64>, [u8; 3])>,
}

impl WorldBuilder {
    pub fn new(scene_id: &str) -> Self {
        Self {
            scene_id: scene_id.into(),
            objects: Vec::new(),
            proposals: Vec::new(),
            floor: None,
            floor_spacing: 0.1,
            spacing: 0.03,
            cameras: Vec::new(),
            intrinsics: Intrinsics { fx: 150.0, fy: 150.0, cx: 120.0, cy: 90.0, width: 240, height: 180 },
            extra_points: Vec::new(),
        }
    }

    pub fn object(mut self, spec: ObjectSpec) -> Self {
        self.objects.push(spec);
        self
    }

    pub fn proposal(mut self, spec: ProposalSpec) -> Self {
        self.proposals.push(spec);
        self
    }

    /// One correctly labelled proposal per object, in object order.
    pub fn exact_proposals(mut self) -> Self {
        for (i, o) in self.objects.iter().enumerate() {
            self.proposals.push(ProposalSpec::Exact { object: i, category: o.category.clone() });
        }
        self
    }

    pub fn floor(mut self, extent: [f64; 4]) -> Self {
        self.floor = Some(extent);
        self
    }

    /// `count` cameras evenly spaced on a horizontal circle, all looking at `target`.
    pub fn ring(mut self, target: [f64; 3], radius: f64, height: f64, count: usize, start_deg: f64) -> Self {
        let t = Vec3::new(target[0], target[1], target[2]);
        for i in 0..count {
            let a = (start_deg + 360.0 * i as f64 / count as f64).to_radians();
            let eye = Vec3::new(t.x + radius * a.cos(), t.y + radius * a.sin(), height);
            self.cameras.push((eye, t));
        }
        self
    }

    pub fn camera(mut self, eye: [f64; 3], target: [f64; 3]) -> Self {
        self.cameras.push((Vec3::new(eye[0], eye[1], eye[2]), Vec3::new(target[0], target[1], target[2])));
        self
    }

    pub fn extra_point(mut self, p: [f64; 3], color: [u8; 3]) -> Self {
        self.extra_points.push((Vec3::new(p[0], p[1], p[2]), color));
        self
    }

    pub fn build(&self) -> World {
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut objects = Vec::new();
        for o in &self.objects {
            let start = points.len();
            for p in box_surface(&o.min, &o.max, self.spacing) {
                points.push(p);
                colors.push(o.color);
            }
            let indices: Vec<usize> = (start..points.len()).collect();
            let gt_box = Box3D::hull(indices.iter().map(|&i| &points[i])).expect("objects have points");
            objects.push(WorldObject { category: o.category.clone(), color: o.color, indices, gt_box });
        }
        if let Some([x0, y0, x1, y1]) = self.floor {
            let nx = ((x1 - x0) / self.floor_spacing).round() as usize;
            let ny = ((y1 - y0) / self.floor_spacing).round() as usize;
            for i in 0..=nx {
                for j in 0..=ny {
                    let p = Vec3::new(x0 + i as f64 * self.floor_spacing, y0 + j as f64 * self.floor_spacing, 0.0);
                    let inside = objects.iter().any(|o| {
                        p.x >= o.gt_box.min.x && p.x <= o.gt_box.max.x && p.y >= o.gt_box.min.y && p.y <= o.gt_box.max.y
                    });
                    if !inside {
                        points.push(p);
                        colors.push(FLOOR_COLOR);
                    }
                }
            }
        }
        for (p, c) in &self.extra_points {
            points.push(*p);
            colors.push(*c);
        }
        let frames = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, (eye, target))| {
                render_look_at(i as u32, &points, &colors, *eye, *target, self.intrinsics).expect("valid camera")
            })
            .collect();
        let scene = Scene { scene_id: self.scene_id.clone(), points, colors, frames };
        let proposals = self
            .proposals
            .iter()
            .enumerate()
            .map(|(id, spec)| {
                let (category, indices) = match spec {
                    ProposalSpec::Exact { object, category } => (category, objects[*object].indices.clone()),
                    ProposalSpec::Fragment { object, category, fraction } => {
                        let b = &objects[*object].gt_box;
                        let cut = b.min + (b.max - b.min) * *fraction;
                        let idx = objects[*object]
                            .indices
                            .iter()
                            .copied()
                            .filter(|&i| {
                                let p = scene.points[i];
                                p.x <= cut.x && p.y <= cut.y && p.z <= cut.z
                            })
                            .collect();
                        (category, idx)
                    }
                };
                let mut p = Proposal3D::from_mask(id as u32, indices, category.clone(), 0.9, &scene)
                    .expect("proposal masks are valid");
                p.state = ProposalState::Initial;
                p
            })
            .collect();
        World { scene, proposals, objects }
    }
}

/// Grid samples on the top and four side faces of a box, edges included.
pub fn box_surface(min: &Vec3<f64>, max: &Vec3<f64>, spacing: f64) -> Vec<Vec3<f64>> {
    let steps = |a: f64, b: f64| -> Vec<f64> {
        let n = ((b - a) / spacing).ceil().max(1.0) as usize;
        (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
    };
    let (xs, ys, zs) = (steps(min.x, max.x), steps(min.y, max.y), steps(min.z, max.z));
    let mut out = Vec::new();
    for &x in &xs {
        for &y in &ys {
            out.push(Vec3::new(x, y, max.z));
        }
    }
    for &z in zs.iter().filter(|&&z| z < max.z) {
        for &x in &xs {
            out.push(Vec3::new(x, min.y, z));
            out.push(Vec3::new(x, max.y, z));
        }
        for &y in ys.iter().filter(|&&y| y > min.y && y < max.y) {
            out.push(Vec3::new(min.x, y, z));
            out.push(Vec3::new(max.x, y, z));
        }
    }
    out
}

/// Scripted behaviour of the oracle for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Answers truthfully.
    Normal,
    /// Stage-3 verification always says the dots miss the target.
    VerifyReject,
    /// The reasoner answers -1 to every question.
    Refuse,
}

#[derive(Debug, Clone)]
pub struct QueryScript {
    pub target_object: usize,
    pub mode: Mode,
}

/// Model service that answers from the world's ground truth.
///
/// The parser falls back to the keyword heuristic of the mock backend; the
/// embedder returns one-hot category vectors (from text, or from the
/// dominant object color of an image crop); the segmenter finds objects by
/// color; the pointer points at the target's pixels; the reasoner picks the
/// composite whose red box encloses the most target pixels.
pub struct Oracle {
    vocabulary: Vec<String>,
    objects: Vec<(String, [u8; 3])>,
    frame_width: u32,
    queries: BTreeMap<String, QueryScript>,
}

impl Oracle {
    pub fn new(world: &World) -> Self {
        let mut vocabulary: Vec<String> = world.objects.iter().map(|o| o.category.clone()).collect();
        for p in &world.proposals {
            vocabulary.push(p.category.clone());
        }
        vocabulary.sort();
        vocabulary.dedup();
        let frame_width = world.scene.frames.first().map(|f| f.image.width()).unwrap_or(0);
        Self {
            vocabulary,
            objects: world.objects.iter().map(|o| (o.category.clone(), o.color)).collect(),
            frame_width,
            queries: BTreeMap::new(),
        }
    }

    pub fn script(mut self, query: &str, target_object: usize, mode: Mode) -> Self {
        self.queries.insert(query.to_string(), QueryScript { target_object, mode });
        self
    }

    fn one_hot(&self, category: Option<&str>) -> Value {
        let v: Vec<f64> = self
            .vocabulary
            .iter()
            .map(|c| if Some(c.as_str()) == category { 1.0 } else { 0.0 })
            .collect();
        json!({ "embedding": v })
    }

    fn object_of(&self, px: &Rgb<u8>) -> Option<usize> {
        self.objects.iter().position(|(_, c)| *c == px.0)
    }

    fn script_for(&self, prompt: &str) -> Option<&QueryScript> {
        let at = prompt.rfind("Query: ")?;
        let rest = &prompt[at + 7..];
        let query = rest.lines().next().unwrap_or_default().trim();
        self.queries.get(query)
    }

    fn pixels_of(img: &RgbImage, color: [u8; 3]) -> Vec<(u32, u32)> {
        img.enumerate_pixels().filter(|(_, _, p)| p.0 == color).map(|(x, y, _)| (x, y)).collect()
    }

    fn detection(img: &RgbImage, color: [u8; 3]) -> Option<Value> {
        let px = Self::pixels_of(img, color);
        if px.is_empty() {
            return None;
        }
        let x0 = px.iter().map(|p| p.0).min()?;
        let x1 = px.iter().map(|p| p.0).max()? + 1;
        let y0 = px.iter().map(|p| p.1).min()?;
        let y1 = px.iter().map(|p| p.1).max()? + 1;
        let mask = vground::mask::BinaryMask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y).0 == color);
        Some(json!({
            "box": [x0, y0, x1, y1],
            "score": 0.9,
            "mask": serde_json::to_value(mask.to_wire()).expect("mask serializes"),
        }))
    }

    fn segment(&self, req: &Value) -> Result<Value, BackendError> {
        let img = image_of(req, "image")?;
        let dets: Vec<Value> = match req["mode"].as_str() {
            Some("text") => {
                let text = req["text"].as_str().unwrap_or_default();
                self.objects
                    .iter()
                    .filter(|(c, _)| c == text)
                    .filter_map(|(_, color)| Self::detection(&img, *color))
                    .collect()
            }
            _ => {
                let p = &req["positive_points"][0];
                let (u, v) = (p[0].as_f64().unwrap_or(-1.0), p[1].as_f64().unwrap_or(-1.0));
                let nearest = img
                    .enumerate_pixels()
                    .filter_map(|(x, y, px)| {
                        let o = self.object_of(px)?;
                        let d = (x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2);
                        Some((d, o))
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                nearest
                    .and_then(|(_, o)| Self::detection(&img, self.objects[o].1))
                    .into_iter()
                    .collect()
            }
        };
        Ok(json!({ "detections": dets }))
    }

    fn point(&self, req: &Value) -> Result<Value, BackendError> {
        let prompt = req["prompt"].as_str().unwrap_or_default();
        let task = req["task"].as_str().unwrap_or_default();
        let Some(script) = self.script_for(prompt) else {
            return Ok(default_response(Role::Pointer, req));
        };
        let img = image_of(req, "image")?;
        let color = self.objects[script.target_object].1;
        let px = Self::pixels_of(&img, color);
        let text = match task {
            "presence" => {
                if px.is_empty() {
                    json!({"Presence": "No", "point": null, "confidence": 0.0, "Reasoning": "target not in view"})
                } else {
                    let (x, y) = central_pixel(&px);
                    json!({"Presence": "Yes", "point": [x, y], "confidence": 0.9, "Reasoning": "target in view"})
                }
            }
            "point_prompt" => {
                if px.is_empty() {
                    json!({"Presence": "No", "positive_points": [], "negative_points": [], "confidence": 0.0, "Reasoning": "target not in view"})
                } else {
                    let (w, h) = img.dimensions();
                    let norm = |(x, y): (u32, u32)| {
                        json!([(x as f64 + 0.5) / w as f64 * 1000.0, (y as f64 + 0.5) / h as f64 * 1000.0])
                    };
                    let first = central_pixel(&px);
                    let second = px
                        .iter()
                        .copied()
                        .filter(|p| *p != first)
                        .min_by_key(|p| (p.0.abs_diff(first.0) + p.1.abs_diff(first.1)).abs_diff(4))
                        .unwrap_or(first);
                    let neg = img
                        .enumerate_pixels()
                        .find(|(_, _, p)| p.0 == BACKGROUND.0)
                        .map(|(x, y, _)| (x, y))
                        .unwrap_or((0, 0));
                    json!({
                        "Presence": "Yes",
                        "positive_points": [norm(first), norm(second)],
                        "negative_points": [norm(neg)],
                        "confidence": 0.8,
                        "Reasoning": "points on the target"
                    })
                }
            }
            _ => {
                let ok = script.mode != Mode::VerifyReject && !px.is_empty();
                json!({"query_match": ok, "target_object": self.objects[script.target_object].0, "reasoning": "checked dots"})
            }
        };
        Ok(json!({ "text": text.to_string() }))
    }

    fn choose(&self, req: &Value) -> Result<Value, BackendError> {
        let messages = req["messages"].as_array().cloned().unwrap_or_default();
        let first = messages.first().cloned().unwrap_or(Value::Null);
        let prompt = first["content"][0]["text"].as_str().unwrap_or_default();
        let Some(script) = self.script_for(prompt) else {
            return Ok(default_response(Role::Reasoner, req));
        };
        if script.mode == Mode::Refuse {
            return Ok(json!({"text": json!({"process": "nothing matches", "image_id": -1}).to_string()}));
        }
        let color = self.objects[script.target_object].1;
        let content = first["content"].as_array().cloned().unwrap_or_default();
        let mut best: (usize, i64) = (0, -1);
        for (i, part) in content.iter().filter(|c| c["type"] == "image").enumerate() {
            let img = decode_png_b64(part["data"].as_str().unwrap_or_default()).map_err(BackendError::Malformed)?;
            let n = self.target_pixels_in_red_box(&img, color);
            if n > best.0 {
                best = (n, i as i64);
            }
        }
        let process = if best.1 >= 0 { "the boxed object matches the query" } else { "no boxed object matches" };
        Ok(json!({"text": json!({"process": process, "image_id": best.1}).to_string()}))
    }

    fn target_pixels_in_red_box(&self, img: &RgbImage, color: [u8; 3]) -> usize {
        let w = self.frame_width.min(img.width());
        let red: Vec<(u32, u32)> = (0..img.height())
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get_pixel(x, y).0 == [255, 0, 0])
            .collect();
        let (Some(x0), Some(x1)) = (red.iter().map(|p| p.0).min(), red.iter().map(|p| p.0).max()) else {
            return 0;
        };
        let y0 = red.iter().map(|p| p.1).min().unwrap_or(0);
        let y1 = red.iter().map(|p| p.1).max().unwrap_or(0);
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get_pixel(x, y).0 == color)
            .count()
    }
}

fn image_of(req: &Value, key: &str) -> Result<RgbImage, BackendError> {
    decode_png_b64(req[key].as_str().unwrap_or_default()).map_err(BackendError::Malformed)
}

/// The pixel closest to the mean of `px`.
fn central_pixel(px: &[(u32, u32)]) -> (u32, u32) {
    let n = px.len() as f64;
    let mx = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    *px.iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - mx).powi(2) + (a.1 as f64 - my).powi(2);
            let db = (b.0 as f64 - mx).powi(2) + (b.1 as f64 - my).powi(2);
            da.total_cmp(&db)
        })
        .expect("non-empty pixel set")
}

impl Backend for Oracle {
    fn call(&self, role: Role, req: &Value) -> Result<Value, BackendError> {
        match role {
            Role::Parser => Ok(default_response(role, req)),
            Role::Embedder => match req["kind"].as_str() {
                Some("text") => Ok(self.one_hot(req["text"].as_str())),
                _ => {
                    let img = image_of(req, "image")?;
                    let mut counts = vec![0usize; self.objects.len()];
                    for p in img.pixels() {
                        if let Some(o) = self.object_of(p) {
                            counts[o] += 1;
                        }
                    }
                    let top = counts
                        .iter()
                        .enumerate()
                        .filter(|(_, n)| **n > 0)
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(i, _)| self.objects[i].0.as_str());
                    Ok(self.one_hot(top))
                }
            },
            Role::Segmenter => self.segment(req),
            Role::Pointer => self.point(req),
            Role::Reasoner => self.choose(req),
        }
    }
}

/// The twelve-query living-room world used by the end-to-end tests.
///
/// Lamp, plant and bin proposals are small corner fragments, so queries
/// about them fail the matching threshold and go through rectification.
pub fn living_room() -> (World, Vec<(String, usize, Mode)>) {
    let b = WorldBuilder::new("living_room")
        .object(ObjectSpec::new("table", [150, 90, 40], [-0.4, -0.3, 0.0], [0.4, 0.3, 0.7]))
        .object(ObjectSpec::new("table", [60, 40, 20], [1.0, 1.0, 0.0], [1.5, 1.5, 0.6]))
        .object(ObjectSpec::new("chair", [30, 90, 200], [-1.3, -0.2, 0.0], [-0.9, 0.2, 0.8]))
        .object(ObjectSpec::new("chair", [30, 180, 60], [0.9, -1.3, 0.0], [1.3, -0.9, 0.8]))
        .object(ObjectSpec::new("sofa", [120, 30, 150], [-1.4, 1.0, 0.0], [-0.2, 1.5, 0.6]))
        .object(ObjectSpec::new("lamp", [250, 220, 120], [-1.4, -1.4, 0.0], [-1.1, -1.1, 1.2]))
        .object(ObjectSpec::new("plant", [20, 110, 90], [1.1, 0.1, 0.0], [1.4, 0.4, 0.9]))
        .object(ObjectSpec::new("bin", [70, 70, 160], [-0.2, -1.4, 0.0], [0.1, -1.1, 0.4]))
        .proposal(ProposalSpec::Exact { object: 0, category: "table".into() })
        .proposal(ProposalSpec::Exact { object: 1, category: "table".into() })
        .proposal(ProposalSpec::Exact { object: 2, category: "chair".into() })
        .proposal(ProposalSpec::Exact { object: 3, category: "chair".into() })
        .proposal(ProposalSpec::Exact { object: 4, category: "sofa".into() })
        .proposal(ProposalSpec::Fragment { object: 5, category: "lamp".into(), fraction: 0.15 })
        .proposal(ProposalSpec::Fragment { object: 6, category: "plant".into(), fraction: 0.15 })
        .proposal(ProposalSpec::Fragment { object: 7, category: "bin".into(), fraction: 0.15 })
        .floor([-2.0, -2.0, 2.0, 2.0])
        .ring([0.0, 0.0, 0.3], 4.0, 2.5, 8, 22.5);
    let queries = vec![
        ("the large table in the middle of the room", 0, Mode::Normal),
        ("the small dark table in the corner", 1, Mode::Normal),
        ("the blue chair to the left of the table", 2, Mode::Normal),
        ("the green chair near the plant", 3, Mode::Normal),
        ("the sofa behind the table", 4, Mode::Normal),
        ("the chair facing the sofa", 2, Mode::Normal),
        ("the table next to the plant", 1, Mode::Normal),
        ("the lamp in the corner", 5, Mode::Normal),
        ("the plant beside the small table", 6, Mode::Normal),
        ("the bin in front of the table", 7, Mode::Normal),
        ("the sofa with purple cushions", 4, Mode::Normal),
        ("the chair closest to the bin", 3, Mode::Normal),
    ];
    (b.build(), queries.into_iter().map(|(q, o, m)| (q.to_string(), o, m)).collect())
}
