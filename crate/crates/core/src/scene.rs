//! Scene data model and the on-disk scene bundle format.
//!
//! A bundle is a directory holding `manifest.json`, an ASCII `cloud.ply`,
//! per-frame RGB / 16-bit depth PNGs, row-major pose text files, intrinsics
//! JSON, and optionally `proposals.json` with precomputed 3D instances.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3D, Intrinsics, Pose, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed pose in {path}: not a rigid transform")]
    MalformedPose { path: PathBuf },
    #[error("depth raster {depth:?} does not match image {image:?} for frame {frame_id}")]
    DepthMismatch {
        frame_id: u32,
        image: (u32, u32),
        depth: (u32, u32),
    },
    #[error("intrinsics invalid for frame {frame_id}: {reason}")]
    MalformedIntrinsics { frame_id: u32, reason: String },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("proposal {proposal_id} references point {index} but the cloud has {len} points")]
    IndexOutOfRange {
        proposal_id: u32,
        index: usize,
        len: usize,
    },
    #[error("proposal {0} has an empty mask")]
    EmptyMask(u32),
    #[error("scene has no points")]
    EmptyCloud,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Per-pixel depth in meters, row-major; `0` marks an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    /// Depth at pixel `(x, y)`; `None` when out of bounds or invalid.
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Option<f32> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.data[(y * self.width + x) as usize];
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, d: f32) {
        self.data[(y * self.width + x) as usize] = d;
    }

    /// Encodes as 16-bit millimeters, saturating at 65535.
    pub fn to_millimeters(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_fn(self.width, self.height, |x, y| {
            let d = self.data[(y * self.width + x) as usize];
            Luma([(d * 1000.0).round().clamp(0.0, 65535.0) as u16])
        })
    }

    pub fn from_millimeters(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] as f32 / 1000.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame<T = f64> {
    pub frame_id: u32,
    pub image: RgbImage,
    pub depth: DepthMap,
    pub pose: Pose<T>,
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> CameraFrame<T> {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T = f64> {
    pub scene_id: String,
    pub points: Vec<Vec3<T>>,
    pub colors: Vec<[u8; 3]>,
    pub frames: Vec<CameraFrame<T>>,
}

impl<T: Real> Scene<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self, frame_id: u32) -> Option<&CameraFrame<T>> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn bounds(&self) -> Option<Box3D<T>> {
        Box3D::hull(&self.points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    Initial,
    Matched,
    Salvaged,
    Rectified,
    Discarded,
}

impl ProposalState {
    /// Whether the semantic-alignment state machine permits `self -> next`.
    pub fn can_become(self, next: ProposalState) -> bool {
        use ProposalState::*;
        matches!(
            (self, next),
            (Initial, Matched) | (Initial, Salvaged) | (Initial, Discarded)
        )
    }
}

/// A candidate 3D instance: point-index mask, hull box, category and state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Proposal3D<T = f64> {
    pub proposal_id: u32,
    /// Sorted, duplicate-free indices into the scene cloud.
    pub mask: Vec<usize>,
    #[serde(rename = "box")]
    pub bbox: Box3D<T>,
    pub category: String,
    pub confidence: T,
    pub state: ProposalState,
}

impl<T: Real> Proposal3D<T> {
    /// Builds an `initial` proposal whose box is the hull of its masked points.
    pub fn from_mask(
        proposal_id: u32,
        indices: impl IntoIterator<Item = usize>,
        category: impl Into<String>,
        confidence: T,
        scene: &Scene<T>,
    ) -> Result<Self, SceneError> {
        let mask: Vec<usize> = indices
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(&bad) = mask.iter().find(|&&i| i >= scene.len()) {
            return Err(SceneError::IndexOutOfRange {
                proposal_id,
                index: bad,
                len: scene.len(),
            });
        }
        let bbox = Box3D::hull(mask.iter().map(|&i| &scene.points[i]))
            .ok_or(SceneError::EmptyMask(proposal_id))?;
        Ok(Self {
            proposal_id,
            mask,
            bbox,
            category: category.into(),
            confidence,
            state: ProposalState::Initial,
        })
    }

    pub fn centroid(&self, scene: &Scene<T>) -> Vec3<T> {
        let sum = self
            .mask
            .iter()
            .fold(Vec3::zero(), |acc, &i| acc + scene.points[i]);
        sum / T::lit(self.mask.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub text: String,
    pub scene_id: String,
}

impl GroundingQuery {
    pub fn new(text: impl Into<String>, scene_id: impl Into<String>) -> Option<Self> {
        let text = text.into();
        (!text.trim().is_empty()).then(|| Self {
            text,
            scene_id: scene_id.into(),
        })
    }
}

/// Distinct proposal categories in lexicographic order.
pub fn scene_category_list<T: Real>(proposals: &[Proposal3D<T>]) -> Vec<String> {
    proposals
        .iter()
        .map(|p| p.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk formats

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scene_id: String,
    pub cloud: String,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub id: u32,
    pub image: String,
    pub depth: String,
    pub pose: String,
    pub intrinsics: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub proposal_id: u32,
    pub category: String,
    pub confidence: f64,
    pub point_indices: Vec<usize>,
    /// Ignored on load; boxes are recomputed from the mask.
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<serde_json::Value>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            SceneError::MissingFile(path.to_path_buf())
        } else {
            SceneError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> SceneError {
    SceneError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn require(path: PathBuf) -> Result<PathBuf, SceneError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(SceneError::MissingFile(path))
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

/// Loads and validates a scene bundle directory. All rasters are loaded eagerly.
pub fn load_scene_bundle<T: Real>(dir: &Path) -> Result<Scene<T>, SceneError> {
    let manifest_path = require(dir.join("manifest.json"))?;
    let manifest: Manifest = read_json(&manifest_path)?;
    let cloud_path = require(dir.join(&manifest.cloud))?;
    let (points, colors) = read_ascii_ply::<T>(&cloud_path)?;
    if points.is_empty() {
        return Err(SceneError::EmptyCloud);
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for mf in &manifest.frames {
        let image_path = require(dir.join(&mf.image))?;
        let depth_path = require(dir.join(&mf.depth))?;
        let pose_path = require(dir.join(&mf.pose))?;
        let intr_path = require(dir.join(&mf.intrinsics))?;

        let image = image::open(&image_path)
            .map_err(|source| SceneError::Image {
                path: image_path.clone(),
                source,
            })?
            .to_rgb8();
        let depth_img = image::open(&depth_path)
            .map_err(|source| SceneError::Image {
                path: depth_path.clone(),
                source,
            })?
            .to_luma16();
        if depth_img.dimensions() != image.dimensions() {
            return Err(SceneError::DepthMismatch {
                frame_id: mf.id,
                image: image.dimensions(),
                depth: depth_img.dimensions(),
            });
        }
        let pose = read_pose::<T>(&pose_path)?;
        let intr: IntrinsicsFile = read_json(&intr_path)?;
        let intrinsics = Intrinsics {
            fx: T::lit(intr.fx),
            fy: T::lit(intr.fy),
            cx: T::lit(intr.cx),
            cy: T::lit(intr.cy),
            width: intr.width,
            height: intr.height,
        };
        if !intrinsics.is_valid() {
            return Err(SceneError::MalformedIntrinsics {
                frame_id: mf.id,
                reason: "fx, fy must be positive and finite".into(),
            });
        }
        if (intr.width, intr.height) != image.dimensions() {
            return Err(SceneError::MalformedIntrinsics {
                frame_id: mf.id,
                reason: format!(
                    "declared size {}x{} differs from image {:?}",
                    intr.width,
                    intr.height,
                    image.dimensions()
                ),
            });
        }
        frames.push(CameraFrame {
            frame_id: mf.id,
            image,
            depth: DepthMap::from_millimeters(&depth_img),
            pose,
            intrinsics,
        });
    }

    Ok(Scene {
        scene_id: manifest.scene_id,
        points,
        colors,
        frames,
    })
}

fn read_pose<T: Real>(path: &Path) -> Result<Pose<T>, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| malformed(path, format!("pose value: {e}")))?;
    if vals.len() != 16 {
        return Err(malformed(path, format!("expected 16 values, got {}", vals.len())));
    }
    let m: [T; 16] = std::array::from_fn(|i| T::lit(vals[i]));
    Pose::from_row_major(&m).ok_or_else(|| SceneError::MalformedPose {
        path: path.to_path_buf(),
    })
}

/// Points and their colors.
pub type Cloud<T> = (Vec<Vec3<T>>, Vec<[u8; 3]>);

/// Reads an ASCII PLY with `x y z` (float) and optional `red green blue` (uchar) vertex properties.
pub fn read_ascii_ply<T: Real>(path: &Path) -> Result<Cloud<T>, SceneError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let mut next_line = || -> Result<Option<String>, SceneError> {
        lines.next().transpose().map_err(io_err(path))
    };

    if next_line()?.as_deref().map(str::trim) != Some("ply") {
        return Err(malformed(path, "missing 'ply' magic"));
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = next_line()?.ok_or_else(|| malformed(path, "unterminated header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(malformed(path, format!("unsupported format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let n = count
                    .parse()
                    .map_err(|_| malformed(path, format!("bad element count {count}")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                let (_, _, props) = elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, "property before element"))?;
                props.push("<list>".into());
            }
            ["property", _ty, name] => {
                let (_, _, props) = elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, "property before element"))?;
                props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(malformed(path, format!("unexpected header line '{line}'"))),
        }
    }

    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (name, count, props) in &elements {
        let is_vertex = name == "vertex";
        let pos = |n: &str| props.iter().position(|p| p == n);
        let (ix, iy, iz) = (pos("x"), pos("y"), pos("z"));
        let (ir, ig, ib) = (pos("red"), pos("green"), pos("blue"));
        if is_vertex && (ix.is_none() || iy.is_none() || iz.is_none()) {
            return Err(malformed(path, "vertex element lacks x/y/z"));
        }
        for _ in 0..*count {
            let line = next_line()?.ok_or_else(|| malformed(path, "truncated body"))?;
            if !is_vertex {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < props.len() {
                return Err(malformed(path, format!("short vertex row '{line}'")));
            }
            let f = |i: usize| -> Result<f64, SceneError> {
                toks[i]
                    .parse::<f64>()
                    .map_err(|_| malformed(path, format!("bad number '{}'", toks[i])))
            };
            let c = |i: Option<usize>| -> Result<u8, SceneError> {
                match i {
                    Some(i) => toks[i]
                        .parse::<u8>()
                        .map_err(|_| malformed(path, format!("bad color '{}'", toks[i]))),
                    None => Ok(0),
                }
            };
            let p = Vec3::new(
                T::lit(f(ix.unwrap())?),
                T::lit(f(iy.unwrap())?),
                T::lit(f(iz.unwrap())?),
            );
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(malformed(path, "non-finite coordinate"));
            }
            points.push(p);
            colors.push([c(ir)?, c(ig)?, c(ib)?]);
        }
    }
    Ok((points, colors))
}

pub fn write_ascii_ply<T: Real>(
    path: &Path,
    points: &[Vec3<T>],
    colors: &[[u8; 3]],
) -> Result<(), SceneError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in points.iter().zip(colors) {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.x.as_f64(),
            p.y.as_f64(),
            p.z.as_f64(),
            c[0],
            c[1],
            c[2]
        ));
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Loads `proposals.json`, recomputing every box from its mask.
pub fn load_proposals<T: Real>(
    path: &Path,
    scene: &Scene<T>,
) -> Result<Vec<Proposal3D<T>>, SceneError> {
    let records: Vec<ProposalRecord> = read_json(path)?;
    records
        .into_iter()
        .map(|r| {
            if r.point_indices.is_empty() {
                return Err(SceneError::EmptyMask(r.proposal_id));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(malformed(
                    path,
                    format!("proposal {} confidence {} outside [0,1]", r.proposal_id, r.confidence),
                ));
            }
            Proposal3D::from_mask(
                r.proposal_id,
                r.point_indices,
                r.category,
                T::lit(r.confidence),
                scene,
            )
        })
        .collect()
}

/// Writes a scene (and optional proposals) in bundle layout. Intrinsics are written per frame.
pub fn write_scene_bundle<T: Real>(
    dir: &Path,
    scene: &Scene<T>,
    proposals: Option<&[Proposal3D<T>]>,
) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_ascii_ply(&dir.join("cloud.ply"), &scene.points, &scene.colors)?;
    let mut frames = Vec::new();
    for f in &scene.frames {
        let id = f.frame_id;
        let image = format!("frame_{id}.png");
        let depth = format!("depth_{id}.png");
        let pose = format!("pose_{id}.txt");
        let intrinsics = format!("intrinsics_{id}.json");
        let img_path = dir.join(&image);
        f.image.save(&img_path).map_err(|source| SceneError::Image {
            path: img_path.clone(),
            source,
        })?;
        let depth_path = dir.join(&depth);
        f.depth
            .to_millimeters()
            .save(&depth_path)
            .map_err(|source| SceneError::Image {
                path: depth_path.clone(),
                source,
            })?;
        let m = f.pose.to_row_major();
        let rows: Vec<String> = m
            .chunks(4)
            .map(|r| {
                r.iter()
                    .map(|v| v.as_f64().to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let pose_path = dir.join(&pose);
        fs::write(&pose_path, rows.join("\n") + "\n").map_err(io_err(&pose_path))?;
        let k = &f.intrinsics;
        let intr = IntrinsicsFile {
            fx: k.fx.as_f64(),
            fy: k.fy.as_f64(),
            cx: k.cx.as_f64(),
            cy: k.cy.as_f64(),
            width: k.width,
            height: k.height,
        };
        write_json(&dir.join(&intrinsics), &intr)?;
        frames.push(ManifestFrame {
            id,
            image,
            depth,
            pose,
            intrinsics,
        });
    }
    let manifest = Manifest {
        scene_id: scene.scene_id.clone(),
        cloud: "cloud.ply".into(),
        frames,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    if let Some(props) = proposals {
        let records: Vec<ProposalRecord> = props
            .iter()
            .map(|p| ProposalRecord {
                proposal_id: p.proposal_id,
                category: p.category.clone(),
                confidence: p.confidence.as_f64(),
                point_indices: p.mask.clone(),
                bbox: None,
            })
            .collect();
        write_json(&dir.join("proposals.json"), &records)?;
    }
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), SceneError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| malformed(path, e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}
