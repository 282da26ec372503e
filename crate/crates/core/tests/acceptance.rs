//! Acceptance checks A1..A9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use flope_core::camera::{project, to_world, uplift, CameraPose, Intrinsics};
use flope_core::experiment::{run, write_outputs, ExperimentConfig, ExperimentKind, RunOutcome, SceneSource};
use flope_core::metrics::{dice, BinaryMask};
use flope_core::pose::Pose;
use flope_core::simworld::{load_scene, NoiseModel, Scene, SceneGenParams};
use flope_core::so3::{svd_project, NineVec, Rotation};
use flope_core::tracker::{associate_points, TrackRow};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

const SO3_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Uniform rotation from a normalized Gaussian 4-vector.
fn uniform_rotation(r: &mut impl Rng) -> Matrix3<f64> {
    let q = Vector4::new(gauss(r), gauss(r), gauss(r), gauss(r));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
        .to_rotation_matrix()
        .into_inner()
}

/// Max of `|RᵀR − I|` entries and `|det R − 1|`, from row-major values.
fn so3_violation(m: &[f64; 9]) -> f64 {
    let r = Matrix3::from_row_slice(m);
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max().max((r.determinant() - 1.0).abs())
}

fn frobenius_dot(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[(i, j)];
        }
    }
    out
}

fn a1() -> Outcome {
    let mut r = rng(1);
    let samples: Vec<[f64; 9]> = (0..100_000).map(|_| row_major(&uniform_rotation(&mut r))).collect();
    let (mut beaten, mut worst_res, mut worst_margin) = (0, 0.0f64, f64::INFINITY);
    let n = 1000;
    for _ in 0..n {
        let m: [f64; 9] = std::array::from_fn(|_| gauss(&mut r));
        let p = svd_project(&NineVec(m)).expect("random matrix has full rank");
        let pm = p.to_row_major();
        worst_res = worst_res.max(so3_violation(&pm));
        let got = frobenius_dot(&pm, &m);
        let best = samples
            .iter()
            .map(|s| frobenius_dot(s, &m))
            .fold(f64::NEG_INFINITY, f64::max);
        worst_margin = worst_margin.min(got - best);
        if got >= best - 1e-12 {
            beaten += 1;
        }
    }
    Outcome {
        pass: beaten == n && worst_res <= SO3_TOL,
        detail: format!(
            "{beaten}/{n} projections beat all 1e5 sampled rotations (min margin {worst_margin:.3e}); \
             max SO(3) residual {worst_res:.1e} (tol {SO3_TOL:e})"
        ),
    }
}

fn a2() -> Outcome {
    let k = Intrinsics::default_test();
    let mut r = rng(2);
    let (n, mut worst, mut failures) = (10_000, 0.0f64, 0);
    for _ in 0..n {
        let rot = uniform_rotation(&mut r);
        let t = Vector3::new(gauss(&mut r), gauss(&mut r), gauss(&mut r));
        let cam = CameraPose::new(Pose::new(t, Rotation::from_matrix(rot).unwrap()));
        // a visible point built from a pixel and a depth, then moved to world
        let u = r.random_range(0.0..k.width() as f64);
        let v = r.random_range(0.0..k.height() as f64);
        let z = r.random_range(0.1..5.0);
        let xc = Vector3::new((u - k.cx()) * z / k.fx(), (v - k.cy()) * z / k.fy(), z);
        let xw = rot * xc + t;
        let back = project(&xw, &cam, &k)
            .and_then(|px| uplift(&px, &k).ok())
            .map(|xc| to_world(&xc, &cam));
        match back {
            Some(p) => worst = worst.max((p - xw).norm()),
            None => failures += 1,
        }
    }
    Outcome {
        pass: failures == 0 && worst <= 1e-9,
        detail: format!("{n} round trips, {failures} lost, max error {worst:.2e} m (tol 1e-9)"),
    }
}

/// Rotation-invariant bookkeeping shared by A3 and A5 runs.
#[derive(Default)]
struct RotAudit {
    runs: usize,
    rows: usize,
    violations: usize,
    worst: f64,
    run_errors: usize,
}

impl RotAudit {
    fn record(&mut self, out: &RunOutcome) {
        self.runs += 1;
        self.worst = self.worst.max(out.max_rot_residual);
        for row in &out.logs.tracks {
            let v = so3_violation(&row_major_of(row));
            self.rows += 1;
            self.worst = self.worst.max(v);
            if v > SO3_TOL {
                self.violations += 1;
            }
        }
    }
}

fn row_major_of(r: &TrackRow) -> [f64; 9] {
    [r.r00, r.r01, r.r02, r.r10, r.r11, r.r12, r.r20, r.r21, r.r22]
}

fn facing_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.column(2).dot(&b.column(2)).clamp(-1.0, 1.0).acos().to_degrees()
}

struct RefineStats {
    seeds: usize,
    unmatched: usize,
    filt_t: f64,
    filt_r: f64,
    pose_ok: usize,
    beat_t: usize,
    beat_r: usize,
    visible: usize,
    det_ok: usize,
    single_t: Vec<f64>,
    single_r: Vec<f64>,
}

fn refine_runs(audit: &mut RotAudit) -> RefineStats {
    let mut s = RefineStats {
        seeds: 1000,
        unmatched: 0,
        filt_t: 0.0,
        filt_r: 0.0,
        pose_ok: 0,
        beat_t: 0,
        beat_r: 0,
        visible: 0,
        det_ok: 0,
        single_t: Vec::new(),
        single_r: Vec::new(),
    };
    for seed in 0..s.seeds as u64 {
        let mut cfg = ExperimentConfig::new(seed);
        cfg.experiment = ExperimentKind::Refine;
        cfg.viewpoints_per_flower = 20;
        cfg.scene = SceneSource::Generate(SceneGenParams {
            count: 1,
            ..Default::default()
        });
        let scene = cfg.resolve_scene().unwrap();
        let out = match run(&cfg, &scene) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("refine seed {seed}: {e}");
                audit.run_errors += 1;
                s.unmatched += 1;
                continue;
            }
        };
        audit.record(&out);
        let gt = &scene.flowers[0].pose;
        let gt_r = *gt.rotation.matrix();

        let det: Vec<_> = out.logs.detections.iter().filter(|d| d.detected).collect();
        s.visible += out.logs.detections.len();
        s.det_ok += det.iter().filter(|d| d.px_err.unwrap() <= 20.0).count();
        let st: Vec<f64> = det.iter().map(|d| 100.0 * d.trans_err.unwrap()).collect();
        let sr: Vec<f64> = det.iter().map(|d| d.rot_err.unwrap()).collect();
        s.single_t.extend(&st);
        s.single_r.extend(&sr);

        // the filtered estimate is the most confirmed track
        let best = out
            .final_state
            .tracks
            .iter()
            .max_by(|a, b| a.hits.cmp(&b.hits).then(b.id.cmp(&a.id)));
        let Some(t) = best else {
            s.unmatched += 1;
            continue;
        };
        let te = 100.0 * (t.pos_mean - gt.position).norm();
        let re = facing_angle_deg(t.rot_mean.matrix(), &gt_r);
        s.filt_t += te;
        s.filt_r += re;
        if te <= 8.0 && re <= 60.0 {
            s.pose_ok += 1;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        if !st.is_empty() && te < mean(&st) {
            s.beat_t += 1;
        }
        if !sr.is_empty() && re < mean(&sr) {
            s.beat_r += 1;
        }
    }
    s
}

fn a3(s: &RefineStats, secs: f64) -> Outcome {
    let n = s.seeds as f64;
    // unmatched seeds count as failures, not as zero error
    let matched = (s.seeds - s.unmatched).max(1) as f64;
    let ft = s.filt_t / matched;
    let fr = s.filt_r / matched;
    let pose_rate = s.pose_ok as f64 / n;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (st, sr) = (mean(&s.single_t), mean(&s.single_r));
    let dr = s.det_ok as f64 / s.visible as f64;
    let within = |x: f64, target: f64| (x - target).abs() <= 0.10 * target;
    let calibrated = within(st, 3.03) && within(sr, 29.88) && within(dr, 0.9301);
    Outcome {
        pass: calibrated && s.unmatched == 0 && ft <= 1.0 && fr <= 20.0 && pose_rate >= 0.72 && secs < 120.0,
        detail: format!(
            "single-shot {st:.2} cm / {sr:.2} deg / {:.2}% det (targets 3.03 / 29.88 / 93.01 within 10%); \
             filtered {ft:.3} cm (<= 1.0) / {fr:.2} deg (<= 20.0); pose rate {:.2}% (>= 72%); \
             {} unmatched; {secs:.1} s (< 120 s)",
            100.0 * dr,
            100.0 * pose_rate,
            s.unmatched
        ),
    }
}

fn a4(s: &RefineStats) -> Outcome {
    let n = s.seeds as f64;
    let (ft, fr) = (s.beat_t as f64 / n, s.beat_r as f64 / n);
    Outcome {
        pass: ft >= 0.99 && fr >= 0.99,
        detail: format!(
            "filtered beats single-shot mean in {:.1}% of seeds for translation, {:.1}% for rotation (>= 99%)",
            100.0 * ft,
            100.0 * fr
        ),
    }
}

fn pollinate_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&fixtures().join("pollinate20.json")).unwrap();
    cfg.seed = seed;
    cfg
}

const A5_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

fn a5(audit: &mut RotAudit) -> Outcome {
    let scene: Scene<f64> = load_scene(fixtures().join("scene20.json")).unwrap();
    let mut detail = String::new();
    let mut pass = true;
    for noiseless in [false, true] {
        let (mut att, mut succ, mut slowest) = (Vec::new(), Vec::new(), 0.0f64);
        for seed in A5_SEEDS {
            let mut cfg = pollinate_cfg(seed);
            if noiseless {
                cfg.noise = NoiseModel::noiseless();
            }
            let t = Instant::now();
            match run(&cfg, &scene) {
                Ok(out) => {
                    audit.record(&out);
                    att.push(out.report.attempt_rate);
                    succ.push(out.report.success_rate);
                }
                Err(e) => {
                    eprintln!("pollinate seed {seed}: {e}");
                    audit.run_errors += 1;
                    att.push(0.0);
                    succ.push(0.0);
                }
            }
            slowest = slowest.max(t.elapsed().as_secs_f64());
        }
        let (min_a, min_s) = (
            att.iter().copied().fold(1.0, f64::min),
            succ.iter().copied().fold(1.0, f64::min),
        );
        let ok = if noiseless {
            min_a == 1.0 && min_s == 1.0
        } else {
            min_a >= 0.85 && min_s >= 0.70
        };
        pass &= ok && slowest < 120.0;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
        let _ = write!(
            detail,
            "{}: attempt [{}] success [{}] ({}), slowest seed {slowest:.2} s; ",
            if noiseless { "noiseless" } else { "calibrated" },
            fmt(&att),
            fmt(&succ),
            if noiseless {
                "each = 1.00"
            } else {
                "each >= 0.85 / 0.70"
            },
        );
    }
    Outcome {
        pass,
        detail: detail.trim_end_matches("; ").to_string(),
    }
}

/// Best assignment by exhaustive search: most pairs, then least total
/// squared-root distance. Coordinates are integer centimeters.
fn optimal_assignment(ms: &[[i32; 3]], ts: &[[i32; 3]], gate_sq: i32) -> (usize, f64) {
    fn dist(a: &[i32; 3], b: &[i32; 3]) -> (i32, f64) {
        let d2: i32 = (0..3).map(|i| (a[i] - b[i]).pow(2)).sum();
        (d2, (d2 as f64).sqrt())
    }
    fn go(
        i: usize,
        ms: &[[i32; 3]],
        ts: &[[i32; 3]],
        used: &mut [bool],
        gate_sq: i32,
        acc: (usize, f64),
        best: &mut (usize, f64),
    ) {
        if i == ms.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        go(i + 1, ms, ts, used, gate_sq, acc, best);
        for j in 0..ts.len() {
            let (d2, d) = dist(&ms[i], &ts[j]);
            if !used[j] && d2 <= gate_sq {
                used[j] = true;
                go(i + 1, ms, ts, used, gate_sq, (acc.0 + 1, acc.1 + d), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, ms, ts, &mut vec![false; ts.len()], gate_sq, (0, 0.0), &mut best);
    best
}

fn a6() -> Outcome {
    const GRID: i32 = 10; // 0..=10 cm per axis
    const GATE_CM: f64 = 5.0;
    let to_v = |p: &[i32; 3]| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
    let mut instances = 0usize;
    let mut divergent: Vec<String> = Vec::new();
    let mut check = |ms: &[[i32; 3]], ts: &[[i32; 3]]| {
        instances += 1;
        let points: Vec<_> = ms.iter().map(to_v).collect();
        let tracks: Vec<_> = ts.iter().enumerate().map(|(i, p)| (i as u32, to_v(p))).collect();
        let g = associate_points(&points, &tracks, GATE_CM);
        let g_cost: f64 = g
            .pairs
            .iter()
            .map(|&(mi, tid)| (points[mi] - tracks[tid as usize].1).norm())
            .sum();
        let opt = optimal_assignment(ms, ts, 25);
        if g.pairs.len() != opt.0 || g_cost > opt.1 + 1e-9 {
            divergent.push(format!(
                "m={ms:?} t={ts:?} greedy {} pairs / {g_cost:.4} cm, optimal {} / {:.4} cm",
                g.pairs.len(),
                opt.0,
                opt.1
            ));
        }
    };
    // every single-measurement, single-track configuration
    let all: Vec<[i32; 3]> = (0..=GRID)
        .flat_map(|x| (0..=GRID).flat_map(move |y| (0..=GRID).map(move |z| [x, y, z])))
        .collect();
    for m in &all {
        for t in &all {
            check(&[*m], &[*t]);
        }
    }
    let exhaustive = all.len() * all.len();
    // seeded sample of the larger configurations
    let mut r = rng(6);
    for _ in 0..400_000 {
        let nm = r.random_range(1..=4);
        let nt = r.random_range(1..=4);
        if nm == 1 && nt == 1 {
            continue;
        }
        let ms: Vec<_> = (0..nm).map(|_| all[r.random_range(0..all.len())]).collect();
        let ts: Vec<_> = (0..nt).map(|_| all[r.random_range(0..all.len())]).collect();
        check(&ms, &ts);
    }
    let rate = divergent.len() as f64 / instances as f64;
    let log = Path::new(env!("CARGO_TARGET_TMPDIR")).join("association_divergences.txt");
    std::fs::write(&log, divergent.join("\n") + "\n").expect("divergence log written");
    for d in divergent.iter().take(3) {
        println!("    divergence: {d}");
    }
    Outcome {
        pass: rate < 0.02,
        detail: format!(
            "{instances} instances ({exhaustive} exhaustive 1x1, rest sampled up to 4x4 on the 1 cm grid); \
             {} greedy/optimal divergences = {:.3}% (< 2%), logged to {}",
            divergent.len(),
            100.0 * rate,
            log.display()
        ),
    }
}

fn a7(audit: &RotAudit) -> Outcome {
    Outcome {
        pass: audit.violations == 0 && audit.run_errors == 0 && audit.worst <= SO3_TOL,
        detail: format!(
            "{} runs, {} logged track rotations, {} violations, {} aborted runs, max residual {:.1e} (tol {SO3_TOL:e})",
            audit.runs, audit.rows, audit.violations, audit.run_errors, audit.worst
        ),
    }
}

fn a8() -> Outcome {
    let mask = |w, h, on: &[(usize, usize)]| {
        let mut m = BinaryMask::new(w, h);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    };
    let a = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
    let disjoint = mask(4, 4, &[(2, 2), (3, 3)]);
    // |A ∩ B| = 2, |A| = 4, |B| = 4: 2·2 / 8
    let half = mask(4, 4, &[(0, 0), (1, 0), (3, 3), (2, 3)]);
    let same = dice(&a, &a).unwrap();
    let zero = dice(&a, &disjoint).unwrap();
    let h = dice(&a, &half).unwrap();
    let mut r = rng(8);
    let mut asym = 0;
    for _ in 0..100 {
        let (w, hh) = (r.random_range(1..16), r.random_range(1..16));
        let bits = |r: &mut ChaCha8Rng| (0..w * hh).map(|_| r.random_bool(0.4)).collect::<Vec<_>>();
        let x = BinaryMask::from_bits(w, hh, bits(&mut r)).unwrap();
        let y = BinaryMask::from_bits(w, hh, bits(&mut r)).unwrap();
        if dice(&x, &y).unwrap() != dice(&y, &x).unwrap() {
            asym += 1;
        }
    }
    Outcome {
        pass: same == 1.0 && zero == 0.0 && h == 0.5 && asym == 0,
        detail: format!("identical {same}, disjoint {zero}, half overlap {h}; {asym}/100 asymmetric pairs"),
    }
}

fn a9() -> Outcome {
    let scene: Scene<f64> = load_scene(fixtures().join("scene20.json")).unwrap();
    let cfg = pollinate_cfg(42);
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        write_outputs(&dir, &cfg, &run(&cfg, &scene).unwrap()).unwrap();
        dirs.push(dir);
    }
    let list = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let names = list(&dirs[0]);
    let differing: Vec<_> = names
        .iter()
        .filter(|f| std::fs::read(dirs[0].join(f)).ok() != std::fs::read(dirs[1].join(f)).ok())
        .cloned()
        .collect();
    Outcome {
        pass: differing.is_empty() && names == list(&dirs[1]) && !names.is_empty(),
        detail: format!("{} files compared, differing: {differing:?}", names.len()),
    }
}

fn main() {
    let mut results = Vec::new();
    let mut report = |id: &str, what: &str, o: Outcome, secs: f64| {
        println!(
            "{id} {} {what}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push(o.pass);
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };

    let (o, s) = timed(&mut a1);
    let o = Outcome {
        pass: o.pass && s < 30.0,
        ..o
    };
    report("A1", "procrustes oracle", o, s);
    let (o, s) = timed(&mut a2);
    let o = Outcome {
        pass: o.pass && s < 5.0,
        ..o
    };
    report("A2", "camera round trip", o, s);

    let mut audit = RotAudit::default();
    let t = Instant::now();
    let stats = refine_runs(&mut audit);
    let secs = t.elapsed().as_secs_f64();
    report("A3", "filter convergence", a3(&stats, secs), secs);
    report("A4", "filtered beats single-shot", a4(&stats), 0.0);
    let (o, s) = timed(&mut || a5(&mut audit));
    report("A5", "end-to-end pollination", o, s);
    let (o, s) = timed(&mut a6);
    report("A6", "association oracle", o, s);
    report("A7", "rotation filter invariant", a7(&audit), 0.0);
    let (o, s) = timed(&mut a8);
    report("A8", "dice fixtures", o, s);
    let (o, s) = timed(&mut a9);
    report("A9", "determinism", o, s);

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
