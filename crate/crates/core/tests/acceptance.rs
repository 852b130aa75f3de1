//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use image::RgbImage;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use vground::alignment::{eta, propagate, FrameMatch};
use vground::clients::{
    Backend, BackendError, ClientError, FixtureBackend, FnBackend, ModelClients, RecordingBackend, RetryPolicy, Role,
};
use vground::config::FusionVotes;
use vground::distillation::{
    compose_prompt_pair, disambiguate, render_bev, tournament_call_bound, BevCamera, PromptPair, PromptSet,
};
use vground::eval::{evaluate, ReferenceItem};
use vground::geometry::{
    angular_distance, back_project_mask, cluster_directions, iou_2d, iou_3d, project_point, visible_point_indices,
    Box2D, Box3D, Projection, Vec3,
};
use vground::mask::BinaryMask;
use vground::prompts;
use vground::raster::encode_png;
use vground::rectification::rectify;
use vground::scene::{Proposal3D, ProposalState, Scene};
use vground::synthetic::render_look_at;
use vground::{run_grounding, Config, Status};
use vground_testkit::{living_room, Mode, ObjectSpec, Oracle, ProposalSpec, WorldBuilder};

type Criterion = fn() -> String;

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("geometry oracles", geometry_oracles),
        ("matching score", matching_score),
        ("view clustering", view_clustering),
        ("back-projection recovery", back_projection_recovery),
        ("end-to-end determinism and correctness", end_to_end),
        ("protocol conformance", protocol_conformance),
        ("rendering stability", rendering_stability),
        ("config fidelity", config_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}) in {secs:.1}s: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {} ({name}) in {secs:.1}s: {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn clients(backend: Arc<dyn Backend>) -> ModelClients {
    ModelClients::with_policy(backend, RetryPolicy::no_backoff(), 4)
}

fn golden_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden"))
}

// ---------------------------------------------------------------- criterion 1

fn random_box2(rng: &mut StdRng) -> Box2D<f64> {
    let (x, y) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
    Box2D::new(x, y, x + rng.gen_range(0.2..4.0), y + rng.gen_range(0.2..4.0))
}

fn nearby_box2(rng: &mut StdRng, a: &Box2D<f64>) -> Box2D<f64> {
    let x = a.x_min + rng.gen_range(-a.width()..a.width());
    let y = a.y_min + rng.gen_range(-a.height()..a.height());
    Box2D::new(x, y, x + rng.gen_range(0.2..4.0), y + rng.gen_range(0.2..4.0))
}

/// IoU by counting cell centers of an `n` x `n` grid over the union hull.
fn raster_iou(a: &Box2D<f64>, b: &Box2D<f64>, n: usize) -> f64 {
    let (x0, y0) = (a.x_min.min(b.x_min), a.y_min.min(b.y_min));
    let (x1, y1) = (a.x_max.max(b.x_max), a.y_max.max(b.y_max));
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let inside = |r: &Box2D<f64>, x: f64, y: f64| x >= r.x_min && x < r.x_max && y >= r.y_min && y < r.y_max;
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
    }
    both as f64 / either as f64
}

fn random_box3(rng: &mut StdRng) -> Box3D<f64> {
    let p = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0));
    let s = Vec3::new(rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
    Box3D::new(p, p + s)
}

fn nearby_box3(rng: &mut StdRng, a: &Box3D<f64>) -> Box3D<f64> {
    let e = a.extent();
    let p = a.min
        + Vec3::new(
            rng.gen_range(-e.x..e.x) * 0.8,
            rng.gen_range(-e.y..e.y) * 0.8,
            rng.gen_range(-e.z..e.z) * 0.8,
        );
    let s = Vec3::new(rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
    Box3D::new(p, p + s)
}

/// Monte-Carlo IoU from uniform samples over the union hull.
fn monte_carlo_iou(a: &Box3D<f64>, b: &Box3D<f64>, samples: usize, rng: &mut StdRng) -> f64 {
    let lo = a.min.component_min(&b.min);
    let hi = a.max.component_max(&b.max);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    both as f64 / either as f64
}

/// Pinhole projection written out from the row-major camera-to-world matrix.
fn reference_projection(p: &Vec3<f64>, frame: &vground::scene::CameraFrame) -> Option<(f64, f64, f64)> {
    let m = frame.pose.to_row_major();
    let d = [p.x - m[3], p.y - m[7], p.z - m[11]];
    let c: Vec<f64> = (0..3).map(|k| m[k] * d[0] + m[4 + k] * d[1] + m[8 + k] * d[2]).collect();
    if c[2] <= 1e-6 {
        return None;
    }
    let k = &frame.intrinsics;
    Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
}

fn random_world(rng: &mut StdRng, id: usize) -> Scene {
    let mut b = WorldBuilder::new(&format!("random_{id}"));
    for k in 0..3 {
        let (x, y) = (rng.gen_range(-1.5..1.0), rng.gen_range(-1.5..1.0));
        let (w, d, h) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..1.0));
        let color = [40 + 50 * k as u8, rng.gen_range(10..200), 90];
        b = b.object(ObjectSpec::new("thing", color, [x, y, 0.0], [x + w, y + d, h]));
    }
    let start = rng.gen_range(0.0..360.0);
    b.floor([-2.0, -2.0, 2.0, 2.0])
        .ring([0.0, 0.0, 0.3], rng.gen_range(3.0..5.0), rng.gen_range(1.0..3.0), 3, start)
        .build()
        .scene
}

fn geometry_oracles() -> String {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst2 = 0.0f64;
    for _ in 0..100 {
        let a = random_box2(&mut rng);
        let b = nearby_box2(&mut rng, &a);
        worst2 = worst2.max((iou_2d(&a, &b) - raster_iou(&a, &b, 400)).abs());
    }
    assert!(worst2 <= 1e-2, "iou_2d deviates from rasterization by {worst2}");

    let mut worst3 = 0.0f64;
    for _ in 0..100 {
        let a = random_box3(&mut rng);
        let b = nearby_box3(&mut rng, &a);
        let oracle = monte_carlo_iou(&a, &b, 200_000, &mut rng);
        worst3 = worst3.max((iou_3d(&a, &b) - oracle).abs());
    }
    assert!(worst3 <= 1e-2, "iou_3d deviates from Monte-Carlo by {worst3}");

    let tol = Config::default().depth_tol_m;
    let mut checked = 0;
    for s in 0..10 {
        let scene = random_world(&mut rng, s);
        let all: Vec<usize> = (0..scene.len()).collect();
        for frame in &scene.frames {
            for p in &scene.points {
                let ours = match project_point(p, frame) {
                    Projection::InFront { u, v, depth } => Some((u, v, depth)),
                    Projection::Behind => None,
                };
                match (ours, reference_projection(p, frame)) {
                    (Some(a), Some(b)) => assert!(
                        (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9,
                        "projection mismatch {a:?} vs {b:?}"
                    ),
                    (None, None) => {}
                    (a, b) => panic!("projection disagreement {a:?} vs {b:?}"),
                }
            }
            let visible: BTreeSet<usize> = visible_point_indices(&all, frame, &scene, tol).into_iter().collect();
            let mut mask = BinaryMask::new(frame.width(), frame.height());
            for &i in &visible {
                let Projection::InFront { u, v, .. } = project_point(&scene.points[i], frame) else {
                    panic!("visible point behind camera");
                };
                mask.set(u.floor() as u32, v.floor() as u32, true);
            }
            let back = back_project_mask(&mask, frame, &scene, tol).expect("mask matches frame");
            assert_eq!(back, visible, "scene {s} frame {}: round trip differs", frame.frame_id);
            assert!(!visible.is_empty());
            checked += 1;
        }
    }

    let mut worst_tri = f64::NEG_INFINITY;
    let dir = |rng: &mut StdRng| loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            return v;
        }
    };
    for _ in 0..1000 {
        let (a, b, c) = (dir(&mut rng), dir(&mut rng), dir(&mut rng));
        let excess = angular_distance(&a, &c) - angular_distance(&a, &b) - angular_distance(&b, &c);
        worst_tri = worst_tri.max(excess);
    }
    assert!(worst_tri <= 1e-9, "triangle inequality violated by {worst_tri}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.1}s");
    format!(
        "max |dIoU2D| {worst2:.4}, max |dIoU3D| {worst3:.4}, {checked} frame round trips, \
         max triangle excess {worst_tri:.2e}"
    )
}

// ---------------------------------------------------------------- criterion 2

fn fm(best_iou: f64, best_score: f64) -> FrameMatch {
    FrameMatch { frame_id: 0, best_iou, best_score }
}

fn proposal(id: u32, category: &str) -> Proposal3D {
    Proposal3D {
        proposal_id: id,
        mask: vec![id as usize],
        bbox: Box3D::new(Vec3::zero(), Vec3::new(1.0, 1.0, 1.0)),
        category: category.into(),
        confidence: 0.5,
        state: ProposalState::Initial,
    }
}

fn matching_score() -> String {
    // Hand-computed tables; every value is exact in binary.
    let tables: Vec<(Vec<FrameMatch>, f64)> = vec![
        (vec![fm(0.5, 0.5), fm(0.75, 0.5)], 0.3125),
        (vec![fm(1.0, 1.0)], 1.0),
        (vec![fm(0.5, 0.5), fm(0.0, 0.0), fm(0.0, 0.0), fm(0.25, 1.0)], 0.125),
        (vec![], 0.0),
        (vec![fm(0.125, 0.5), fm(0.5, 0.25)], 0.09375),
        (vec![fm(0.25, 0.25), fm(0.25, 0.25), fm(0.25, 0.25)], 0.0625),
        (vec![fm(0.0, 0.9), fm(0.5, 0.0)], 0.0),
    ];
    for (i, (rows, want)) in tables.iter().enumerate() {
        assert_eq!(eta(rows), *want, "table {i}");
    }

    let fixture = [
        (proposal(0, "table"), 0.005),
        (proposal(1, "desk"), 0.03),
        (proposal(2, "table"), 0.07),
        (proposal(3, "chair"), 0.1),
        (proposal(4, "desk"), 0.25),
        (proposal(5, "cabinet"), 0.0),
    ];
    let scored: Vec<(&Proposal3D, f64)> = fixture.iter().map(|(p, e)| (p, *e)).collect();
    let matched = |gamma: f64| -> BTreeSet<u32> {
        let (refined, _, _) = propagate(&scored, "table", gamma);
        refined
            .iter()
            .filter(|p| p.state == ProposalState::Matched)
            .map(|p| p.proposal_id)
            .collect()
    };
    let (m01, m07, m20) = (matched(0.01), matched(0.07), matched(0.2));
    assert_eq!(m20, BTreeSet::from([4]));
    assert_eq!(m07, BTreeSet::from([2, 3, 4]));
    assert_eq!(m01, BTreeSet::from([1, 2, 3, 4]));
    assert!(m20.is_subset(&m07) && m07.is_subset(&m01));
    format!("{} tables exact; matched sets {:?} ⊆ {:?} ⊆ {:?}", tables.len(), m20, m07, m01)
}

// ---------------------------------------------------------------- criterion 3

fn view_clustering() -> String {
    let mut rng = StdRng::seed_from_u64(11);
    let eps = [15.0f64, 30.0, 45.0];
    let mut totals = [0usize; 3];
    for set in 0..200 {
        let bases: Vec<Vec3<f64>> = (0..rng.gen_range(1..4))
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.6..0.2)))
            .collect();
        let n = rng.gen_range(1..25);
        let spread = rng.gen_range(0.05..0.8);
        let dirs: Vec<Vec3<f64>> = (0..n)
            .map(|_| {
                let b = bases[rng.gen_range(0..bases.len())];
                let noise = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                (b + noise * spread).try_normalize(1e-9).unwrap_or(Vec3::new(1.0, 0.0, 0.0))
            })
            .collect();
        let mut counts = [0usize; 3];
        for (k, e) in eps.iter().enumerate() {
            let bound = e.to_radians();
            let clusters = cluster_directions(&dirs, bound);
            let mut seen: Vec<usize> = clusters.iter().flat_map(|c| c.members.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>(), "set {set}: clusters must partition the input");
            for c in &clusters {
                for &m in &c.members {
                    let d = angular_distance(&dirs[m], &c.center);
                    assert!(d <= bound + 1e-12, "set {set} eps {e}: member {m} is {d} rad from its center");
                }
            }
            counts[k] = clusters.len();
        }
        assert!(
            counts[0] >= counts[1] && counts[1] >= counts[2],
            "set {set}: cluster counts {counts:?} increase with epsilon"
        );
        for k in 0..3 {
            totals[k] += counts[k];
        }
    }
    format!("200 sets, total clusters at 15/30/45 degrees: {totals:?}")
}

// ---------------------------------------------------------------- criterion 4

const CABINET: [u8; 3] = [200, 120, 30];

fn cabinet_world(outlier: Option<[f64; 3]>) -> vground_testkit::World {
    let mut b = WorldBuilder::new("cabinet_room")
        .object(ObjectSpec::new("cabinet", CABINET, [-0.3, -0.2, 0.0], [0.3, 0.2, 0.9]))
        .object(ObjectSpec::new("table", [40, 60, 140], [0.8, 0.6, 0.0], [1.4, 1.1, 0.7]))
        .proposal(ProposalSpec::Fragment { object: 0, category: "cabinet".into(), fraction: 0.3 })
        .proposal(ProposalSpec::Exact { object: 1, category: "table".into() })
        .floor([-1.5, -1.5, 1.5, 1.5]);
    for az in [200.0f64, 225.0, 250.0] {
        let a = az.to_radians();
        b = b.camera([3.5 * a.cos(), 3.5 * a.sin(), 2.2], [0.0, 0.0, 0.4]);
    }
    if let Some(p) = outlier {
        b = b.extra_point(p, CABINET);
    }
    b.build()
}

/// A point 10 m from the cabinet that is unoccluded in frames 0 and 1 and
/// outside frame 2.
fn find_outlier(world: &vground_testkit::World) -> [f64; 3] {
    let frames = &world.scene.frames;
    let seen = |p: &Vec3<f64>, f: &vground::scene::CameraFrame| -> bool {
        let Projection::InFront { u, v, depth } = project_point(p, f) else { return false };
        if !(u >= 0.0 && v >= 0.0 && u < f.width() as f64 && v < f.height() as f64) {
            return false;
        }
        f.depth.get(u as u32, v as u32).is_none_or(|d| d as f64 > depth)
    };
    let c = world.objects[0].gt_box.center();
    for step in 0..720 {
        let a = (step as f64 * 0.5).to_radians();
        for dz in [0.0, 1.0, 2.0, -0.3] {
            let dir = Vec3::new(a.cos(), a.sin(), dz / 10.0);
            let p = c + dir * (10.0 / dir.norm());
            if p.z < 0.0 {
                continue;
            }
            if seen(&p, &frames[0]) && seen(&p, &frames[1]) && !seen(&p, &frames[2]) {
                return [p.x, p.y, p.z];
            }
        }
    }
    panic!("no outlier position is visible in exactly two views");
}

fn recover(world: &vground_testkit::World, fixtures: &Path) -> (Box3D<f64>, vground::rectification::RectificationCase) {
    let oracle: Arc<dyn Backend> = Arc::new(Oracle::new(world).script("the cabinet", 0, Mode::Normal));
    let config = Config::default();
    let run = |c: &ModelClients| {
        let cats = vground::scene::scene_category_list(&world.proposals);
        let parse = c.parse_query("the cabinet", &cats).expect("parse");
        let seeds = [&world.proposals[0]];
        rectify(c, &seeds, &world.proposals, &parse, &world.scene, &config).expect("rectify")
    };
    // Record the oracle once, then answer only from the recorded fixtures.
    let recorded = run(&clients(Arc::new(RecordingBackend::new(oracle, fixtures))));
    let (props, mut cases) = run(&clients(Arc::new(FixtureBackend::new(fixtures))));
    assert_eq!(props, recorded.0, "fixture replay differs from the recorded run");
    assert_eq!(props.len(), 1, "expected one rectified proposal");
    (props[0].bbox, cases.remove(0))
}

fn back_projection_recovery() -> String {
    let tmp = tempfile::tempdir().expect("tempdir");
    let clean = cabinet_world(None);
    let gt = clean.objects[0].gt_box;
    let (b, case) = recover(&clean, &tmp.path().join("clean"));
    let iou_clean = iou_3d(&b, &gt);
    assert!(iou_clean >= 0.99, "clean recovery IoU {iou_clean}");
    assert_eq!(case.per_view_masks.len(), 3, "all three views should contribute a mask");

    let p = find_outlier(&clean);
    let noisy = cabinet_world(Some(p));
    let outlier = noisy.scene.len() - 1;
    let (b, case) = recover(&noisy, &tmp.path().join("noisy"));
    let in_masks = case.per_view_masks.iter().filter(|m| m.indices.contains(&outlier)).count();
    assert_eq!(in_masks, 2, "outlier should be in exactly two view masks");
    assert!(!case.fused_indices.contains(&outlier), "outlier survived denoising");
    let iou_noisy = iou_3d(&b, &noisy.objects[0].gt_box);
    assert!(iou_noisy >= 0.99, "recovery IoU with outlier {iou_noisy}");
    format!("IoU3D clean {iou_clean:.4}, with 10 m outlier in 2/3 masks {iou_noisy:.4}")
}

// ---------------------------------------------------------------- criterion 5

const NO_MATCH_QUERY: &str = "the chair made of glass";

fn end_to_end() -> String {
    let (world, queries) = living_room();
    let mut oracle = Oracle::new(&world);
    for (q, o, m) in &queries {
        oracle = oracle.script(q, *o, *m);
    }
    oracle = oracle.script(NO_MATCH_QUERY, 2, Mode::Refuse);
    let oracle: Arc<dyn Backend> = Arc::new(oracle);
    let config = Config::default();
    let mut all: Vec<&str> = queries.iter().map(|(q, _, _)| q.as_str()).collect();
    all.push(NO_MATCH_QUERY);

    let run = |backend: Arc<dyn Backend>| {
        let c = clients(backend);
        all.iter()
            .map(|q| run_grounding(&c, &world.scene, &world.proposals, q, &config).0)
            .collect::<Vec<_>>()
    };
    let tmp = tempfile::tempdir().expect("tempdir");
    let recorded = run(Arc::new(RecordingBackend::new(oracle, tmp.path())));
    let to_json = |rs: &[vground::GroundingResult]| {
        let records: Vec<_> = rs.iter().map(|r| r.record(None)).collect();
        serde_json::to_string_pretty(&records).expect("serialize")
    };
    let reference_json = to_json(&recorded);
    let mut replays = Vec::new();
    for _ in 0..3 {
        replays.push(run(Arc::new(FixtureBackend::new(tmp.path()))));
    }
    for (i, r) in replays.iter().enumerate() {
        assert_eq!(to_json(r), reference_json, "replay {i} is not byte-identical");
    }
    let results = &replays[0];

    let references: Vec<ReferenceItem> = queries
        .iter()
        .map(|(q, o, _)| {
            let cat = &world.objects[*o].category;
            let same = world.objects.iter().filter(|x| &x.category == cat).count();
            ReferenceItem {
                scene_id: world.scene.scene_id.clone(),
                query: q.clone(),
                gt_box: world.objects[*o].gt_box,
                tags: vec![if same > 1 { "multiple" } else { "unique" }.to_string()],
            }
        })
        .collect();
    let records: Vec<_> = results[..queries.len()].iter().map(|r| r.record(None)).collect();
    let report = evaluate(&records, &references).expect("paired");
    assert_eq!((report.acc_025, report.acc_05), (1.0, 1.0), "accuracy {:?}", report.items);

    let rectified = results.iter().filter(|r| r.rectified && r.status == Status::Grounded).count();
    assert!(rectified >= 3, "only {rectified} queries went through rectification");
    let with_tournament = results.iter().filter(|r| !r.rounds.is_empty()).count();
    assert!(with_tournament >= 1, "no query needed the tournament");
    let no_match = results.last().expect("results");
    assert_eq!(no_match.status, Status::NoMatch, "scripted refusal should give no_match");
    assert!(!no_match.rounds.is_empty(), "the refusal must come from the reasoner");
    format!(
        "acc@0.25 {:.2}, acc@0.5 {:.2} over {} queries; {rectified} rectified, {with_tournament} with a \
         tournament, 1 no_match; 3 replays byte-identical ({} bytes)",
        report.acc_025,
        report.acc_05,
        report.n,
        reference_json.len()
    )
}

// ---------------------------------------------------------------- criterion 6

fn golden(name: &str) -> String {
    std::fs::read_to_string(golden_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const Q: &str = "the chair to the left of the lamp";
const ANCHORS: &str = "A3:lamp [10, 20, 30, 40]";

type Script = Arc<Mutex<Vec<Result<Value, BackendError>>>>;

fn scripted(replies: Vec<Result<Value, BackendError>>) -> (Arc<FnBackend>, Arc<Mutex<Vec<Value>>>) {
    let queue: Script = Arc::new(Mutex::new(replies.into_iter().rev().collect()));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let backend = FnBackend::new(move |_, req| {
        log.lock().unwrap().push(req.clone());
        queue.lock().unwrap().pop().unwrap_or_else(|| Err(BackendError::Malformed("script exhausted".into())))
    });
    (Arc::new(backend), seen)
}

fn text(s: &str) -> Result<Value, BackendError> {
    Ok(json!({ "text": s }))
}

fn choice(id: i64) -> Result<Value, BackendError> {
    text(&json!({"process": "looked", "image_id": id}).to_string())
}

fn tiny_images(n: usize) -> Vec<RgbImage> {
    (0..n).map(|i| RgbImage::from_pixel(4, 4, image::Rgb([i as u8, 0, 0]))).collect()
}

fn user_texts(request: &Value) -> Vec<String> {
    request["messages"]
        .as_array()
        .expect("messages")
        .iter()
        .filter(|m| m["role"] == "user")
        .map(|m| m["content"][0]["text"].as_str().expect("text").to_string())
        .collect()
}

fn prompt_set(id: u32, pairs: usize) -> PromptSet {
    PromptSet {
        proposal_id: id,
        pairs: (0..pairs)
            .map(|c| PromptPair {
                proposal_id: id,
                cluster_id: c,
                frame_id: c as u32,
                bev_camera: BevCamera { position: [0.0, 0.0], direction: [1.0, 0.0] },
                composite: RgbImage::from_pixel(4, 4, image::Rgb([id as u8, c as u8, 0])),
            })
            .collect(),
    }
}

fn protocol_conformance() -> String {
    let cats: Vec<String> = ["chair", "lamp", "table"].iter().map(|s| s.to_string()).collect();
    let constructed = [
        ("category_parsing.txt", prompts::category_parsing(Q, &cats)),
        ("presence_check.txt", prompts::presence_check(Q, ANCHORS)),
        ("point_prompt.txt", prompts::point_prompt(Q, ANCHORS)),
        ("verify_points.txt", prompts::verify_points(Q, ANCHORS)),
        ("choose_image.txt", prompts::choose_image(Q, 3)),
        ("image_id_invalid.txt", prompts::image_id_invalid(7)),
        ("wrong_format.txt", prompts::wrong_format()),
        ("reflection.txt", prompts::reflection()),
    ];
    for (name, text) in &constructed {
        assert_eq!(text, &golden(name), "{name} differs from the golden text");
    }

    // A session that walks through every reprompt kind once.
    let (b, seen) = scripted(vec![text("Sure! image 1"), choice(7), choice(-1), choice(1)]);
    let session = clients(b).choose_image(&tiny_images(3), Q, 4).expect("session");
    assert_eq!(session.result.image_id, 1);
    assert_eq!(session.reprompts, 3);
    let last = seen.lock().unwrap().last().cloned().expect("requests");
    let users = user_texts(&last);
    assert_eq!(
        users,
        vec![golden("choose_image.txt"), golden("wrong_format.txt"), golden("image_id_invalid.txt"), golden("reflection.txt")]
    );
    let first_images = last["messages"][0]["content"].as_array().unwrap().iter().filter(|c| c["type"] == "image").count();
    assert_eq!(first_images, 3, "images go with the first user turn");

    // Retry budgets.
    let budget = |replies: Vec<Result<Value, BackendError>>| {
        let (b, seen) = scripted(replies);
        let r = clients(b).choose_image(&tiny_images(2), Q, 4);
        let n = seen.lock().unwrap().len();
        (r, n)
    };
    let (r, n) = budget(vec![text("x"), text("y"), text("z"), choice(0)]);
    assert!(matches!(r, Err(ClientError::RefusalOrExhausted(_))) && n == 3, "WRONG_FORMAT budget: {n} calls");
    let (r, n) = budget(vec![choice(5), choice(6), choice(9), choice(0)]);
    assert!(matches!(r, Err(ClientError::RefusalOrExhausted(_))) && n == 3, "IMAGE_ID_INVALID budget: {n} calls");
    let (r, n) = budget(vec![choice(-1), choice(-1), choice(0)]);
    assert!(matches!(r, Err(ClientError::RefusalOrExhausted(_))) && n == 2, "REFLECTION budget: {n} calls");
    let (r, n) = budget(vec![text("x"), choice(9), choice(-1), text("y"), choice(8), choice(1)]);
    assert!(matches!(r, Ok(ref s) if s.result.image_id == 1 && s.reprompts == 5) && n == 6, "mixed budget");

    let (b, seen) = scripted(vec![text("not json"), text("{}"), text("still not json")]);
    let r = clients(b).parse_query(Q, &cats);
    assert!(matches!(r, Err(ClientError::ParseFailure { .. })), "parser retry: {r:?}");
    assert_eq!(seen.lock().unwrap().len(), 2, "one parse retry");

    let status = |s: u16| Err(BackendError::Status { status: s, body: String::new() });
    let (b, seen) = scripted(vec![status(500), status(503), status(502), Ok(json!({"embedding": [1.0]}))]);
    assert!(matches!(clients(b).embed_text("chair"), Err(ClientError::Service { .. })));
    assert_eq!(seen.lock().unwrap().len(), 3, "three transport attempts");
    let (b, seen) = scripted(vec![status(429), Ok(json!({"embedding": [1.0]}))]);
    assert!(clients(b).embed_text("chair").is_ok());
    assert_eq!(seen.lock().unwrap().len(), 2);
    let (b, seen) = scripted(vec![status(400), Ok(json!({"embedding": [1.0]}))]);
    assert!(clients(b).embed_text("chair").is_err());
    assert_eq!(seen.lock().unwrap().len(), 1, "client errors are not retried");

    // Tournament call counts.
    let mut counts = Vec::new();
    for n in [1usize, 3, 6, 17] {
        let sets: Vec<PromptSet> = (0..n as u32).map(|i| prompt_set(i, 1 + (i as usize % 2))).collect();
        let calls = Arc::new(Mutex::new(0usize));
        let c2 = calls.clone();
        let backend = FnBackend::new(move |role, _| {
            assert_eq!(role, Role::Reasoner);
            *c2.lock().unwrap() += 1;
            choice(0)
        });
        let d = disambiguate(&clients(Arc::new(backend)), &sets, Q, 4).expect("tournament");
        let made = *calls.lock().unwrap();
        assert_eq!(made, tournament_call_bound(n, 4), "n = {n}");
        assert_eq!(made, d.vlm_calls());
        assert!(d.winner.is_some());
        counts.push((n, made));
    }
    assert_eq!(counts, vec![(1, 0), (3, 1), (6, 3), (17, 8)]);
    format!("8 golden prompts equal; reprompt, parse and transport budgets hold; tournament calls {counts:?}")
}

// ---------------------------------------------------------------- criterion 7

fn unit_square_scene() -> Scene {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for i in 0..=10 {
        for j in 0..=10 {
            points.push(Vec3::new(i as f64 / 10.0, j as f64 / 10.0, 0.0));
            colors.push([40, 40 + 20 * i as u8, 40 + 20 * j as u8]);
        }
    }
    // A higher point above (0.5, 0.5) wins the top-down color.
    points.push(Vec3::new(0.5, 0.5, 1.0));
    colors.push([0, 0, 255]);
    Scene { scene_id: "unit".into(), points, colors, frames: Vec::new() }
}

fn check_golden(name: &str, img: &RgbImage) {
    let path = golden_dir().join(name);
    if std::env::var_os("VGROUND_BLESS").is_some() {
        std::fs::write(&path, encode_png(img)).expect("write golden");
    }
    let want = image::open(&path).unwrap_or_else(|e| panic!("{name}: {e}")).to_rgb8();
    assert!(want == *img, "{name} differs from the golden image");
}

fn rendering_stability() -> String {
    let mut scene = unit_square_scene();
    let plain = render_bev(&scene, &[], None, 0.02).expect("bev");
    assert_eq!(plain.dimensions(), (100, 100));
    // (x, y) maps to column (x + 0.5) / 0.02 and row (1 + 0.5 - y) / 0.02.
    assert_eq!(plain.get_pixel(25, 75).0, [40, 40, 40]);
    assert_eq!(plain.get_pixel(75, 25).0, [40, 240, 240]);
    assert_eq!(plain.get_pixel(50, 50).0, [0, 0, 255]);
    assert_eq!(plain.get_pixel(0, 0).0, [255, 255, 255]);

    let cam = render_look_at(0, &scene.points, &scene.colors, Vec3::new(-0.2, -0.2, 1.5), Vec3::new(0.5, 0.5, 0.0), {
        vground::geometry::Intrinsics { fx: 80.0, fy: 80.0, cx: 40.0, cy: 30.0, width: 80, height: 60 }
    })
    .expect("camera");
    let highlight = [(7u32, Box3D::new(Vec3::new(0.2, 0.2, 0.0), Vec3::new(0.6, 0.6, 1.0)))];
    let renders: Vec<Vec<u8>> = (0..3)
        .map(|_| encode_png(&render_bev(&scene, &highlight, Some(&cam), 0.02).expect("bev")))
        .collect();
    assert!(renders.windows(2).all(|w| w[0] == w[1]), "BEV bytes differ across runs");
    let bev = render_bev(&scene, &highlight, Some(&cam), 0.02).expect("bev");
    check_golden("bev_unit_square.png", &bev);

    scene.frames.push(cam);
    let p = Proposal3D::from_mask(7, 0..121, "rug", 0.9, &scene).expect("proposal");
    let config = Config::default();
    let composites: Vec<Vec<u8>> = (0..3)
        .map(|_| {
            let pair = compose_prompt_pair(&scene.frames[0], &p, &bev, &scene, 0, &config).expect("pair");
            encode_png(&pair.composite)
        })
        .collect();
    assert!(composites.windows(2).all(|w| w[0] == w[1]), "composite bytes differ across runs");
    let pair = compose_prompt_pair(&scene.frames[0], &p, &bev, &scene, 0, &config).expect("pair");
    assert_eq!(pair.composite.dimensions(), (80 + 4 + 100, 100));
    check_golden("composite.png", &pair.composite);
    "unit-square BEV 100x100; BEV and composite stable over 3 runs and equal to goldens".to_string()
}

// ---------------------------------------------------------------- criterion 8

fn config_fidelity() -> String {
    let c = Config::default();
    assert_eq!(c.gamma, 0.07);
    assert_eq!(c.epsilon_degrees, 30.0);
    assert_eq!(c.k_v, 5);
    assert_eq!(c.batch_limit, 4);
    assert_eq!(c.fusion_min_votes, FusionVotes::Majority);
    assert_eq!(Config::from_json("{}").expect("empty config"), c);
    c.validate().expect("defaults are valid");
    format!("gamma {}, epsilon {} deg, K_v {}, batch {}", c.gamma, c.epsilon_degrees, c.k_v, c.batch_limit)
}
