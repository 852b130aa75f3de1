//! Accuracy at 3D IoU thresholds over paired results and references.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_3d, Box3D};
use crate::pipeline::{ResultRecord, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceItem {
    pub scene_id: String,
    pub query: String,
    pub gt_box: Box3D<f64>,
    /// Free-form labels such as `unique`, `multiple`, `easy`, `hard`, `dep`, `indep`.
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{results} results for {references} references")]
    CountMismatch { results: usize, references: usize },
    #[error("item {index}: result is for ({got_scene}, {got_query:?}) but reference is ({want_scene}, {want_query:?})")]
    PairingMismatch {
        index: usize,
        got_scene: String,
        got_query: String,
        want_scene: String,
        want_query: String,
    },
    #[error("item {index}: ground-truth box has min > max")]
    InvalidGroundTruth { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub scene_id: String,
    pub query: String,
    pub status: Status,
    pub pred_box: Option<Box3D<f64>>,
    pub gt_box: Box3D<f64>,
    pub iou3d: f64,
    pub hit_025: bool,
    pub hit_05: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub n: usize,
    pub hits_025: usize,
    pub hits_05: usize,
    pub acc_025: f64,
    pub acc_05: f64,
}

impl Breakdown {
    fn add(&mut self, item: &ItemReport) {
        self.n += 1;
        self.hits_025 += item.hit_025 as usize;
        self.hits_05 += item.hit_05 as usize;
    }

    fn finish(&mut self) {
        if self.n > 0 {
            self.acc_025 = self.hits_025 as f64 / self.n as f64;
            self.acc_05 = self.hits_05 as f64 / self.n as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc_025: f64,
    pub acc_05: f64,
    pub hits_025: usize,
    pub hits_05: usize,
    pub per_tag: BTreeMap<String, Breakdown>,
    pub items: Vec<ItemReport>,
}

/// Scores one prediction; only grounded results can hit.
pub fn score_item(status: Status, pred: Option<&Box3D<f64>>, gt: &Box3D<f64>) -> (f64, bool, bool) {
    let iou = match (status, pred) {
        (Status::Grounded, Some(p)) => iou_3d(p, gt),
        _ => 0.0,
    };
    (iou, iou >= 0.25, iou >= 0.5)
}

/// Pairs `results[i]` with `references[i]` and computes accuracies.
pub fn evaluate(results: &[ResultRecord], references: &[ReferenceItem]) -> Result<EvalReport, EvalError> {
    if results.len() != references.len() {
        return Err(EvalError::CountMismatch {
            results: results.len(),
            references: references.len(),
        });
    }
    let mut total = Breakdown::default();
    let mut per_tag: BTreeMap<String, Breakdown> = BTreeMap::new();
    let mut items = Vec::with_capacity(results.len());
    for (index, (r, gt)) in results.iter().zip(references).enumerate() {
        if r.scene_id != gt.scene_id || r.query != gt.query {
            return Err(EvalError::PairingMismatch {
                index,
                got_scene: r.scene_id.clone(),
                got_query: r.query.clone(),
                want_scene: gt.scene_id.clone(),
                want_query: gt.query.clone(),
            });
        }
        if !gt.gt_box.is_valid() {
            return Err(EvalError::InvalidGroundTruth { index });
        }
        let (iou3d, hit_025, hit_05) = score_item(r.status, r.bbox.as_ref(), &gt.gt_box);
        let item = ItemReport {
            scene_id: r.scene_id.clone(),
            query: r.query.clone(),
            status: r.status,
            pred_box: r.bbox,
            gt_box: gt.gt_box,
            iou3d,
            hit_025,
            hit_05,
        };
        total.add(&item);
        for tag in &gt.tags {
            per_tag.entry(tag.clone()).or_default().add(&item);
        }
        items.push(item);
    }
    total.finish();
    per_tag.values_mut().for_each(Breakdown::finish);
    Ok(EvalReport {
        n: total.n,
        acc_025: total.acc_025,
        acc_05: total.acc_05,
        hits_025: total.hits_025,
        hits_05: total.hits_05,
        per_tag,
        items,
    })
}
