//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with the measured values, then asserts.
//!
//! Criteria 4 to 7 share one ablation over the default experiment config
//! (2,000 train / 500 val images, 3 seeds, 30 epochs); it dominates the
//! runtime of this target.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hintpose::experiment::{Ablation, Run};
use hintpose::geometry::{crop_affine, expand_to_aspect, filter_boxes, keypoints_to_image};
use hintpose::heatmap::{decode_all, decode_peak, render_gaussian};
use hintpose::metrics::{oks, person_area, DEFAULT_KAPPA};
use hintpose::model::loss_all_hops_graph;
use hintpose::nn::{gradcheck, Graph, ParamStore, Tensor, Var};
use hintpose::pipeline::{generate_image_cues, oks_nms, ScoredPose};
use hintpose::synth::person_box;
use hintpose::{ablate, BBox, ExperimentConfig, Heatmap, InstanceCue, Keypoint, Model, ModelConfig, Point, Pose, Variant, Visibility};
use hintpose_cli::manifest::RunManifest;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints a verdict line past the test harness's output capture, so every
/// criterion shows up in the log whether it passes or not.
fn verdict(criterion: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let line = format!(
        "\n{} criterion {criterion}: {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    emit(&line);
    pass
}

fn emit(text: &str) {
    match fs::OpenOptions::new().write(true).open("/dev/stdout") {
        Ok(mut f) => {
            let _ = f.write_all(text.as_bytes());
        }
        Err(_) => print!("{text}"),
    }
}

// ---------------------------------------------------------------- 1

const REL_TOL: f64 = 1e-5;
const PROBES: usize = 100;
const SEEDS: u64 = 10;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var>;

/// Worst relative error over `SEEDS` seeds of `PROBES` probes each.
fn layer_check(build: impl Fn(&mut ChaCha8Rng) -> (ParamStore<f64>, LossFn)) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, f) = build(&mut rng);
        let mut g = Graph::new();
        let loss = f(&mut g, &store);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        let report = gradcheck::check(&mut store, PROBES, 1e-6, seed, |s| {
            let mut g = Graph::new();
            let l = f(&mut g, s);
            g.value(l).item()
        })
        .unwrap();
        worst = worst.max(report.max_rel_err());
    }
    worst
}

/// The full architecture (cue path, feedback, 3 hops) at 8 channels on
/// 32x32 crops. At the default width many coordinates have gradients near
/// 1e-6 of the loss, below what f64 central differences resolve.
fn model_check() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let cfg = ModelConfig {
            input_h: 32,
            input_w: 32,
            stem_channels: 8,
            seed,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model: Model<f64> = Model::<f32>::build(cfg.clone()).unwrap().cast();
        // zero-initialized layers would hide their inputs' gradients
        let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = model.params().get(id);
            if p.value.data().iter().any(|&v| v != 0.0) {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let t = Tensor::from_fn(&shape, |_| rng.random_range(-0.1..0.1)).unwrap();
            model.params_mut().set_value(id, t).unwrap();
        }
        let n = 1;
        let crop = Tensor::from_fn(&[n, 1, cfg.input_h, cfg.input_w], |_| rng.random_range(0.0..1.0)).unwrap();
        let cues: Vec<Option<InstanceCue>> = (0..n)
            .map(|_| Some(InstanceCue::new(rng.random_range(4.0..28.0), rng.random_range(4.0..28.0), 2.0).unwrap()))
            .collect();
        let target = Tensor::from_fn(&[n, cfg.joints, cfg.heatmap_h(), cfg.heatmap_w()], |_| rng.random_range(0.0..1.0)).unwrap();
        let mask: Vec<bool> = (0..n * cfg.joints).map(|i| i % 3 != 2).collect();
        let embed = model.cue_embedding(&cues).unwrap();
        let loss_of = |m: &Model<f64>, g: &mut Graph<f64>| {
            let x = g.input(crop.clone()).unwrap();
            let c = g.input(embed.clone()).unwrap();
            let outs = m.forward_graph(g, x, Some(c), cfg.hops).unwrap();
            loss_all_hops_graph(g, &outs, &target, &mask).unwrap().0
        };
        let mut store = model.params().clone();
        store.zero_grad();
        let mut g = Graph::new();
        let loss = loss_of(&model, &mut g);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        let report = gradcheck::check(&mut store, PROBES, 1e-6, seed, |s| {
            let m = Model::from_params(cfg.clone(), s.clone())?;
            let mut g = Graph::new();
            let l = loss_of(&m, &mut g);
            g.value(l).item()
        })
        .unwrap();
        worst = worst.max(report.max_rel_err());
    }
    worst
}

#[test]
fn criterion_1_gradients() {
    let start = Instant::now();
    let mut results: Vec<(&str, f64)> = Vec::new();
    results.push((
        "conv2d",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            let x = s.register("x", random_tensor(rng, &[2, 3, 7, 6])).unwrap();
            let w = s.register("w", random_tensor(rng, &[4, 3, 3, 3])).unwrap();
            let b = s.register("b", random_tensor(rng, &[4])).unwrap();
            let stride = rng.random_range(1..=2);
            let target = random_tensor(rng, &[2, 4, (7 + 2 - 3) / stride + 1, (6 + 2 - 3) / stride + 1]);
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (xv, wv, bv) = (g.param(s, x).unwrap(), g.param(s, w).unwrap(), g.param(s, b).unwrap());
                let y = g.conv2d(xv, wv, bv, stride, 1).unwrap();
                g.mse(y, &target).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push((
        "relu",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            // keep inputs away from the kink so central differences are exact
            let v = Tensor::from_fn(&[2, 2, 4, 4], |_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .unwrap();
            let x = s.register("x", v).unwrap();
            let target = random_tensor(rng, &[2, 2, 4, 4]);
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.param(s, x).unwrap();
                let y = g.relu(xv).unwrap();
                g.mse(y, &target).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push((
        "add",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            let a = s.register("a", random_tensor(rng, &[1, 2, 3, 3])).unwrap();
            let b = s.register("b", random_tensor(rng, &[1, 2, 3, 3])).unwrap();
            let target = random_tensor(rng, &[1, 2, 3, 3]);
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let (av, bv) = (g.param(s, a).unwrap(), g.param(s, b).unwrap());
                let y = g.add(av, bv).unwrap();
                g.mse(y, &target).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push((
        "upsample",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            let x = s.register("x", random_tensor(rng, &[1, 2, 4, 3])).unwrap();
            let target = random_tensor(rng, &[1, 2, 8, 6]);
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.param(s, x).unwrap();
                let y = g.upsample_bilinear(xv, 2).unwrap();
                g.mse(y, &target).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push((
        "downsample",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            let x = s.register("x", random_tensor(rng, &[2, 1, 8, 8])).unwrap();
            let target = random_tensor(rng, &[2, 1, 2, 2]);
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.param(s, x).unwrap();
                let y = g.downsample_stride(xv, 4).unwrap();
                g.mse(y, &target).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push((
        "masked mse",
        layer_check(|rng| {
            let mut s = ParamStore::new();
            let x = s.register("x", random_tensor(rng, &[2, 3, 4, 4])).unwrap();
            let target = random_tensor(rng, &[2, 3, 4, 4]);
            let mask: Vec<bool> = (0..6).map(|i| i != 2 && i != 4).collect();
            let f = Box::new(move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.param(s, x).unwrap();
                g.mse_masked(xv, &target, Some(&mask), 1.0).unwrap()
            }) as LossFn;
            (s, f)
        }),
    ));
    results.push(("3-hop model", model_check()));
    let secs = start.elapsed().as_secs_f64();
    let pass = results.iter().all(|&(_, e)| e < REL_TOL) && secs < 60.0;
    let detail = results
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    assert!(verdict(
        "1 (gradients)",
        pass,
        format!("max rel err < {REL_TOL:.0e} over {PROBES} coords x {SEEDS} seeds: {detail}; {secs:.1}s")
    ));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_heatmap_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, w) = (16, 16);
    let errors: Vec<f64> = (0..1000)
        .map(|_| {
            let c = Point::new(rng.random_range(3.0..13.0), rng.random_range(3.0..13.0));
            let map = render_gaussian(c, 2.0, h, w).unwrap();
            let p = decode_peak(&map, 0);
            (p.x - c.x).hypot(p.y - c.y)
        })
        .collect();
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let within = errors.iter().filter(|&&e| e <= 0.3).count() as f64 / errors.len() as f64;
    assert!(verdict(
        "2 (heatmap round trip)",
        max <= 0.5 && within >= 0.9,
        format!("1000 cycles on a 16x16 grid, sigma 2: max error {max:.3} px (<= 0.5), {:.1}% <= 0.3 px (>= 90%)", within * 100.0)
    ));
}

// ---------------------------------------------------------------- 3

/// Reference greedy OKS-NMS written without the library's OKS routine.
fn brute_force_nms(poses: &[ScoredPose], gamma: f64) -> Vec<usize> {
    let n = poses.len();
    let sim = |a: usize, b: usize| {
        // a is the reference; its area scales the distances
        let s2 = poses[a].area * DEFAULT_KAPPA * DEFAULT_KAPPA;
        let k = poses[a].keypoints.len() as f64;
        poses[a]
            .keypoints
            .iter()
            .zip(&poses[b].keypoints)
            .map(|(p, q)| (-((p.x - q.x).powi(2) + (p.y - q.y).powi(2)) / (2.0 * s2)).exp())
            .sum::<f64>()
            / k
    };
    // selection order: repeatedly take the highest score, earliest index
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if poses[remaining[i]].score > poses[remaining[best]].score {
                best = i;
            }
        }
        let top = remaining.remove(best);
        if kept.iter().all(|&k| sim(k, top) <= gamma) {
            kept.push(top);
        }
    }
    kept
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<ScoredPose> {
    let n = rng.random_range(0..=20);
    let centers: Vec<Point> = (0..rng.random_range(1..=4))
        .map(|_| Point::new(rng.random_range(20.0..100.0), rng.random_range(20.0..100.0)))
        .collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            let spread = rng.random_range(0.5..8.0);
            ScoredPose {
                keypoints: (0..5)
                    .map(|j| {
                        Point::new(
                            c.x + 6.0 * j as f64 + rng.random_range(-spread..spread),
                            c.y - 4.0 * j as f64 + rng.random_range(-spread..spread),
                        )
                    })
                    .collect(),
                keypoint_scores: vec![1.0; 5],
                // coarse scores so ties occur
                score: (rng.random_range(0..8) as f64) / 8.0,
                box_id: 0,
                cue: None,
                hop: 3,
                area: rng.random_range(400.0..3000.0),
            }
        })
        .collect()
}

#[test]
fn criterion_3_nms_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let kappas = [DEFAULT_KAPPA; 5];
    let mut mismatches = Vec::new();
    let mut suppressed = 0;
    for case in 0..200 {
        let poses = random_instance(&mut rng);
        let gamma = [0.5, 0.7, 0.9, 0.3][case % 4];
        let got = oks_nms(&poses, gamma, &kappas).unwrap();
        let want: Vec<ScoredPose> = brute_force_nms(&poses, gamma).into_iter().map(|i| poses[i].clone()).collect();
        suppressed += poses.len() - want.len();
        if got != want {
            mismatches.push(case);
        }
    }
    assert!(verdict(
        "3 (OKS-NMS oracle)",
        mismatches.is_empty() && suppressed > 0,
        format!("200 instances (<= 20 poses), {suppressed} suppressions, mismatching cases {mismatches:?}")
    ));
}

// ---------------------------------------------------------------- 4 to 7

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let out = std::env::temp_dir().join(format!("hintpose-acceptance-{}", std::process::id()));
        let a = ablate(&cfg, Some(&out)).expect("ablation");
        let _ = fs::remove_dir_all(&out);
        let line = format!(
            "ablation over the default config finished in {:.1} min\n{}\n",
            start.elapsed().as_secs_f64() / 60.0,
            a.report.table()
        );
        emit(&line);
        a
    })
}

fn ap_of(a: &Ablation, v: Variant) -> f64 {
    a.report.row(v).expect("variant row").ap * 100.0
}

#[test]
fn criterion_4_ablation_grid() {
    let a = ablation();
    let [base, ic, rr, full] = Variant::ALL.map(|v| ap_of(a, v));
    let checks = [full >= base + 1.0, ic >= base, rr >= base];
    // training reports divergence as an error, so finished runs never saw NaN
    let finished = a.runs.len();
    assert!(verdict(
        "4 (ablation grid)",
        checks.iter().all(|&c| c),
        format!(
            "seed-averaged AP baseline {base:.2}, I.C. {ic:.2}, R.R. {rr:.2}, I.C.+R.R. {full:.2}; \
             (a) full >= baseline + 1.0: {}, (b) I.C. >= baseline: {}, (c) R.R. >= baseline: {}; {finished} runs without divergence",
            checks[0], checks[1], checks[2]
        )
    ));
}

#[test]
fn criterion_5_hop_refinement() {
    let row = ablation().report.row(Variant::RECURRENT).expect("row");
    let (m1, m3) = (row.val_mse_by_hop[0], *row.val_mse_by_hop.last().unwrap());
    let (a1, a3) = (row.ap_by_hop[0] * 100.0, *row.ap_by_hop.last().unwrap() * 100.0);
    assert!(verdict(
        "5 (hop refinement)",
        m3 <= m1 && a3 >= a1,
        format!("R.R. val MSE hop1 {m1:.5} -> hop3 {m3:.5}; AP hop1 {a1:.2} -> hop3 {a3:.2}")
    ));
}

struct PairOutcome {
    follows_a: bool,
    follows_b: bool,
    argmax_moved: bool,
}

fn predict(model: &Model, crop: &Tensor<f32>, cue: Point) -> Heatmap {
    let c = InstanceCue::new(cue.x, cue.y, model.config().cue_sigma).unwrap();
    model.forward_batch(crop, &[Some(c)], model.config().hops).unwrap().heatmap(model.config().hops - 1, 0).unwrap()
}

fn cue_pairs(a: &Ablation, model: &Model) -> Vec<PairOutcome> {
    let mc = model.config();
    let kappas = vec![DEFAULT_KAPPA; mc.joints];
    let mut outcomes = Vec::new();
    for scene in &a.val.scenes {
        for i in 0..scene.persons.len() {
            for j in i + 1..scene.persons.len() {
                let (pa, pb) = (&scene.persons[i], &scene.persons[j]);
                if pa.bbox.iou(&pb.bbox) <= 0.0 || !pa.pose.keypoints[0].vis.is_labeled() || !pb.pose.keypoints[0].vis.is_labeled() {
                    continue;
                }
                let union = person_box(scene, i, 4.0).union(&person_box(scene, j, 4.0));
                let expanded = expand_to_aspect(&union, 0.75, 1.25).unwrap();
                let (crop, t) = crop_affine(&scene.image, &expanded, mc.input_h, mc.input_w).unwrap();
                let area = person_area(&expanded);
                let decode = |heat: &Heatmap| {
                    let in_heat = Pose::new(decode_all(heat).iter().map(|p| Keypoint::new(p.x, p.y, Visibility::Visible)).collect());
                    keypoints_to_image(&in_heat, &t, mc.stride).keypoints.iter().map(|k| k.pos).collect::<Vec<_>>()
                };
                let ha = predict(model, &crop, t.to_crop(pa.pose.keypoints[0].pos));
                let hb = predict(model, &crop, t.to_crop(pb.pose.keypoints[0].pos));
                let (qa, qb) = (decode(&ha), decode(&hb));
                let o = |pred: &[Point], gt: &Pose| oks(pred, gt, area, &kappas).unwrap();
                let argmax = |h: &Heatmap| decode_all(h).iter().map(|p| (p.x, p.y)).collect::<Vec<_>>();
                outcomes.push(PairOutcome {
                    follows_a: o(&qa, &pa.pose) > o(&qa, &pb.pose),
                    follows_b: o(&qb, &pb.pose) > o(&qb, &pa.pose),
                    argmax_moved: argmax(&ha) != argmax(&hb),
                });
            }
        }
    }
    outcomes
}

fn full_run(a: &Ablation) -> &Run {
    a.runs.iter().find(|r| r.variant == Variant::FULL).expect("full run")
}

#[test]
fn criterion_6_cue_following() {
    let a = ablation();
    let run = full_run(a);
    let outcomes = cue_pairs(a, &run.model);
    let n = outcomes.len() as f64;
    let fa = outcomes.iter().filter(|o| o.follows_a).count() as f64 / n;
    let fb = outcomes.iter().filter(|o| o.follows_b).count() as f64 / n;
    let moved = outcomes.iter().filter(|o| o.argmax_moved).count() as f64 / n;
    assert!(verdict(
        "6 (cue following)",
        outcomes.len() >= 100 && fa >= 0.8 && fb >= 0.8,
        format!(
            "I.C.+R.R. seed {} on {} held-out overlapping pairs, cue on the head: follows A {:.1}%, follows B {:.1}% (>= 80% each); \
             moving the cue changes some channel argmax in {:.1}%",
            run.seed,
            outcomes.len(),
            fa * 100.0,
            fb * 100.0,
            moved * 100.0
        )
    ));
}

#[test]
fn criterion_7_ensemble() {
    let e = ablation().report.ensemble.as_ref().expect("ensemble row");
    let mean = e.single_ap.iter().sum::<f64>() / e.single_ap.len() as f64;
    assert!(verdict(
        "7 (ensemble)",
        e.ensemble_ap >= mean,
        format!(
            "I.C.+R.R. seeds {:?}: single AP {:?}, mean {:.2}, ensemble {:.2}",
            e.seeds,
            e.single_ap.iter().map(|v| (v * 1e4).round() / 1e2).collect::<Vec<_>>(),
            mean * 100.0,
            e.ensemble_ap * 100.0
        )
    ));
}

/// Pipeline behavior with a trained model: an isolated person in its own
/// box yields one cue, on that person, when the cue map uses the head
/// channel. Merging all joints instead gives one peak per visible joint.
#[test]
fn isolated_person_yields_one_cue() {
    let a = ablation();
    let run = full_run(a);
    let cfg = ExperimentConfig::default();
    let head_only = hintpose::PipelineConfig {
        cue_joints: vec![0],
        ..cfg.pipeline.clone()
    };
    let mut total = 0;
    let mut exact = 0;
    let mut all_joint_cues = 0;
    for scene in a.val.scenes.iter().filter(|s| s.persons.len() == 1 && s.detections.len() == 1).take(50) {
        let boxes = filter_boxes(&scene.detections, cfg.pipeline.min_box_side);
        if boxes.is_empty() {
            continue;
        }
        total += 1;
        let cues = generate_image_cues(&scene.image, &boxes, std::slice::from_ref(&run.model), &head_only).unwrap();
        let person = &scene.persons[0].bbox;
        let grown = BBox::new(person.x - 4.0, person.y - 4.0, person.w + 8.0, person.h + 8.0, 1.0);
        if cues[0].len() == 1 && grown.contains(cues[0][0].point()) {
            exact += 1;
        }
        all_joint_cues += generate_image_cues(&scene.image, &boxes, std::slice::from_ref(&run.model), &cfg.pipeline).unwrap()[0].len();
    }
    assert!(verdict(
        "pipeline example (isolated person)",
        total > 0 && exact == total,
        format!(
            "head-channel cue map: {exact}/{total} isolated persons get exactly one cue inside their box; \
             all-joint map gives {:.1} cues per box",
            all_joint_cues as f64 / total.max(1) as f64
        )
    ));
}

// ---------------------------------------------------------------- 8

fn hintpose(dir: &Path, args: &[String]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hintpose"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn hintpose");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Re-runs a manifest's command line with `--config <manifest>` and the
/// output renamed to `rerun-<name>`; returns the new manifest.
fn rerun(dir: &Path, manifest: &Path) -> RunManifest {
    let m = RunManifest::read(&dir.join(manifest)).unwrap();
    let mut argv: Vec<String> = m.argv[1..].to_vec();
    let at = |argv: &[String], flag: &str| argv.iter().position(|a| a == flag).expect("flag recorded") + 1;
    let i = at(&argv, "--config");
    argv[i] = manifest.display().to_string();
    let i = at(&argv, "--out");
    let out = format!("rerun-{}", argv[i]);
    argv[i] = out.clone();
    hintpose(dir, &argv);
    let path = if dir.join(&out).is_dir() {
        PathBuf::from(&out).join("manifest.json")
    } else {
        PathBuf::from(format!("{out}.manifest.json"))
    };
    RunManifest::read(&dir.join(path)).unwrap()
}

/// Output digests keyed by file name; CSV logs are compared without their
/// wallclock column and the ablation report without its timing field.
fn reported(dir: &Path, m: &RunManifest) -> Vec<(String, String)> {
    m.outputs
        .iter()
        .map(|a| {
            let name = Path::new(&a.path).file_name().unwrap().to_string_lossy();
            let name = name.strip_prefix("rerun-").unwrap_or(&name).to_string();
            let path = dir.join(&a.path);
            let digest = if name.ends_with(".csv") {
                fs::read_to_string(&path)
                    .unwrap()
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(h, _)| h).to_string())
                    .collect::<Vec<_>>()
                    .join("\n")
            } else if name == "ablation.json" {
                let r: hintpose::AblationReport = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
                serde_json::to_string(&r.without_timing()).unwrap()
            } else {
                a.sha256.clone()
            };
            (name, digest)
        })
        .collect()
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("small.json"),
        r#"{"train_images": 24, "val_images": 8,
            "model": {"input_h": 32, "input_w": 32, "stem_channels": 6},
            "train": {"epochs": 2, "batch_size": 8, "val_samples": 16},
            "seeds": [0, 1]}"#,
    )
    .unwrap();
    let steps: [&[&str]; 6] = [
        &["--config", "small.json", "--out", "data", "gen-data"],
        &["--config", "small.json", "--seed", "3", "--out", "model", "train", "--data", "data/train", "--val", "data/val"],
        &["--config", "small.json", "--checkpoints", "model/model.ckpt", "--out", "res.jsonl", "infer", "--data", "data/val"],
        &["--config", "small.json", "--out", "ev.json", "eval", "--data", "data/val", "--results", "res.jsonl"],
        &["--config", "small.json", "--out", "grid", "ablate"],
        &["--config", "small.json", "--out", "png", "render", "--data", "data/val", "--results", "res.jsonl", "--limit", "2"],
    ];
    let manifests = ["data/manifest.json", "model/manifest.json", "res.jsonl.manifest.json", "ev.json.manifest.json", "grid/manifest.json", "png/manifest.json"];
    let mut differing = Vec::new();
    let mut compared = 0;
    for (step, manifest) in steps.iter().zip(manifests) {
        hintpose(d, &args(step));
        let first = RunManifest::read(&d.join(manifest)).unwrap();
        let second = rerun(d, Path::new(manifest));
        let (a, b) = (reported(d, &first), reported(d, &second));
        compared += a.len();
        if a != b || first.config != second.config {
            differing.push(first.subcommand.clone());
        }
    }
    assert!(verdict(
        "8 (determinism)",
        differing.is_empty(),
        format!("6 subcommands re-run from their manifests, {compared} artifacts compared; differing: {differing:?}")
    ));
}

// ---------------------------------------------------------------- 9

fn side() -> impl Strategy<Value = f64> {
    prop_oneof![Just(32.0), Just(31.999), Just(32.001), 0.0..100.0f64, 30.0..34.0f64]
}

#[test]
fn criterion_9_box_filter() {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 2000,
        ..ProptestConfig::default()
    });
    let strategy = prop::collection::vec((0.0..200.0f64, 0.0..200.0f64, side(), side(), 0.0..1.0f64), 0..12);
    let result = runner.run(&strategy, |raw| {
        let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h, s)| BBox::new(x, y, w, h, s)).collect();
        let kept = filter_boxes(&boxes, 32.0);
        let want: Vec<BBox> = boxes.iter().filter(|b| b.w >= 32.0 && b.h >= 32.0).copied().collect();
        prop_assert_eq!(kept, want);
        Ok(())
    });
    let exact = filter_boxes(&[BBox::new(0.0, 0.0, 32.0, 32.0, 1.0), BBox::new(0.0, 0.0, 32.0, 31.9, 1.0)], 32.0);
    let boundary = exact.len() == 1 && exact[0].w == 32.0;
    assert!(verdict(
        "9 (box filter)",
        result.is_ok() && boundary,
        format!(
            "2000 random box lists keep exactly the boxes with both sides >= 32 in input order: {}; 32x32 kept, 32x31.9 dropped: {boundary}",
            match &result {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            }
        )
    ));
}
