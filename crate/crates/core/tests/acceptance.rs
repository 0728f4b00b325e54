//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use radfield::dataset::{make_dataset, make_dataset_at, Dataset, Orbit, SceneSpec};
use radfield::field::{checkpoint_bytes, FieldConfig, RadianceField};
use radfield::guidance::{black_hole_composite, EmbeddingProvider, Image, ToyPaletteEmbedder};
use radfield::mask::{extract_mask_set, MaskOptions, MaskSet, PatchSelection, DEFAULT_ALPHA};
use radfield::pipeline::{
    content_id, eval_iou, eval_psnr, loss_csv, mask_consistency, render_base_images, repaint, train_stage1, EditJob,
    LossRecord, ProviderConfig, RepaintOutcome, Stage1Config,
};
use radfield::planes::Mask;
use radfield::renderer::{render_view, RenderHeads, RenderOptions};

const VIEWS: usize = 20;
const RES: usize = 64;
const FEATURE_DIM: usize = 8;
/// Held-out cameras sit halfway between training azimuths.
const HELD_OUT_OFFSET_DEG: f64 = 9.0;
const REPAINT_STEPS: usize = 2000;
const CLIP_STEPS: usize = 1000;
/// Depth gap (scene units) beyond which a reprojected point counts as occluded.
const OCCLUSION_TOL: f64 = 0.05;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, ok: bool, detail: String) {
        println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((n, ok, detail));
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1(r: &mut Report) {
    let t0 = Instant::now();
    let slab = [(0.5, 2.0), (1.5, 2.0), (3.0, 1.0)]
        .iter()
        .map(|&(s, l)| common::slab_residual_error(s, l, 256))
        .fold(0.0, f64::max);
    let halving = common::quadrature_halving_change();
    let el = t0.elapsed();
    let ok = slab < 1e-3 && halving < 1e-3 && el < Duration::from_secs(1);
    r.record(
        1,
        ok,
        format!("slab err {slab:.2e} (< 1e-3), 64→128 change {halving:.2e} (< 1e-3), {:.3}s (< 1s)", secs(el)),
    );
}

fn criterion_2(r: &mut Report) {
    let t0 = Instant::now();
    let results = common::gradient_suite();
    let el = t0.elapsed();
    let worst = results.iter().max_by(|a, b| a.worst_rel.total_cmp(&b.worst_rel)).unwrap();
    let checked: usize = results.iter().map(|x| x.checked).sum();
    let ok = results.iter().all(|x| x.passed()) && el < Duration::from_secs(60);
    r.record(
        2,
        ok,
        format!(
            "{} objectives, {checked} params, worst rel {:.2e} ({}) (< 1e-3), {:.2}s (< 60s)",
            results.len(),
            worst.worst_rel,
            worst.name,
            secs(el)
        ),
    );
}

fn criterion_3(r: &mut Report) {
    let t0 = Instant::now();
    let (worst, at_target) = common::sds_identity(1000, 2024);
    let el = t0.elapsed();
    let ok = worst < 1e-6 && at_target < 1e-12 && el < Duration::from_secs(5);
    r.record(
        3,
        ok,
        format!("max dev {worst:.2e} (< 1e-6), |g| at I=T {at_target:.2e}, {:.3}s (< 5s)", secs(el)),
    );
}

struct Stage1Run {
    field: RadianceField<f32>,
    time: Duration,
}

fn run_stage1(ds: &Dataset, depth: bool) -> Stage1Run {
    let cfg = Stage1Config {
        depth_supervision: depth,
        ..Stage1Config::default()
    };
    let t0 = Instant::now();
    let out = train_stage1(ds, &FieldConfig::default(), &cfg, &mut |_| {}).expect("stage 1 trains");
    Stage1Run {
        field: out.field,
        time: t0.elapsed(),
    }
}

fn criterion_4(r: &mut Report, run: &Stage1Run, held: &Dataset) {
    let psnr: Vec<f64> = held
        .views
        .iter()
        .map(|v| {
            let p = render_view(&run.field, &v.camera, RenderHeads::ALL, &RenderOptions::default()).unwrap();
            eval_psnr(p.color.as_ref().unwrap(), &v.rgb, None).unwrap()
        })
        .collect();
    let m = mean(&psnr);
    let min = psnr.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = m >= 25.0 && run.time <= Duration::from_secs(600);
    r.record(
        4,
        ok,
        format!(
            "held-out PSNR mean {m:.2} dB (min {min:.2}) over {} views (>= 25), train {:.0}s (<= 600s)",
            psnr.len(),
            secs(run.time)
        ),
    );
}

/// A 6×6 patch centred on the first object's pixels in view 0.
fn canonical_selection(ds: &Dataset) -> PatchSelection {
    let inst = ds.views[0].instance_mask(1);
    let (mut rs, mut cs, mut n) = (0usize, 0usize, 0usize);
    for (i, &m) in inst.data.iter().enumerate() {
        if m {
            rs += i / inst.width;
            cs += i % inst.width;
            n += 1;
        }
    }
    let (r, c) = (rs / n, cs / n);
    let rect = [r - 3, c - 3, r + 3, c + 3];
    for row in rect[0]..rect[2] {
        for col in rect[1]..rect[3] {
            assert!(inst.get(row, col), "canonical patch leaves the object");
        }
    }
    PatchSelection {
        view: 0,
        rect,
        alpha: DEFAULT_ALPHA,
    }
}

fn masks_for(field: &RadianceField<f32>, ds: &Dataset, sel: &PatchSelection) -> MaskSet {
    let id = content_id(&checkpoint_bytes(field, None));
    extract_mask_set(field, &ds.cameras(), sel, &id, MaskOptions::default(), &RenderOptions::default()).unwrap()
}

fn mean_iou(masks: &MaskSet, ds: &Dataset) -> f64 {
    let ious: Vec<f64> = masks
        .masks
        .iter()
        .zip(&ds.views)
        .map(|(m, v)| eval_iou(m, &v.instance_mask(1)).unwrap())
        .collect();
    mean(&ious)
}

fn criterion_5(r: &mut Report, with: &MaskSet, without: &MaskSet, ds: &Dataset, time: Duration) {
    let (a, b) = (mean_iou(with, ds), mean_iou(without, ds));
    let ok = a >= b && a >= 0.85 && time <= Duration::from_secs(1200);
    r.record(
        5,
        ok,
        format!(
            "mean IoU with depth {a:.3} vs without {b:.3} (with >= without, with >= 0.85), two runs {:.0}s (<= 1200s)",
            secs(time)
        ),
    );
}

fn criterion_6(r: &mut Report, field: &RadianceField<f32>, masks: &MaskSet) {
    let rep = mask_consistency(field, masks, &RenderOptions::default(), OCCLUSION_TOL).unwrap();
    let f = rep.fraction();
    let ok = f >= 0.9 && rep.checked > 0;
    r.record(
        6,
        ok,
        format!(
            "{}/{} reprojections inside the other view's mask = {f:.3} (>= 0.9), worst view pair {:.3}",
            rep.hits, rep.checked, rep.worst_pair
        ),
    );
}

fn run_repaint(base: &RadianceField<f32>, masks: &MaskSet, job: &EditJob) -> (RepaintOutcome, Duration) {
    let providers = ProviderConfig::default().providers().unwrap();
    let t0 = Instant::now();
    let out = repaint(base, masks, None, job, &providers, "acceptance", &mut |_, _| {}).expect("repaint runs");
    (out, t0.elapsed())
}

fn renders(field: &RadianceField<f32>, masks: &MaskSet) -> Vec<Image> {
    render_base_images(field, &masks.cameras, 64).unwrap()
}

fn invert(m: &Mask) -> Mask {
    Mask {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|&b| !b).collect(),
    }
}

fn unmasked_psnr(edited: &[Image], base: &[Image], masks: &MaskSet) -> f64 {
    let v: Vec<f64> = edited
        .iter()
        .zip(base)
        .zip(&masks.masks)
        .map(|((e, b), m)| eval_psnr(&e.to_plane(), &b.to_plane(), Some(&invert(m))).unwrap())
        .collect();
    mean(&v)
}

fn criterion_7(r: &mut Report, psnr0: f64, psnr100: f64, time: Duration) {
    let ok = psnr100 > psnr0 && psnr100 >= 30.0 && time <= Duration::from_secs(1800);
    r.record(
        7,
        ok,
        format!(
            "unmasked PSNR λ_unmask=100 {psnr100:.2} dB vs λ_unmask=0 {psnr0:.2} dB (100 > 0, 100 >= 30), two runs {:.0}s (<= 1800s)",
            secs(time)
        ),
    );
}

/// Mean `|C − T|` over masked pixels of every view.
fn masked_abs_error(images: &[Image], targets: &[Image], masks: &MaskSet) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ((img, t), m) in images.iter().zip(targets).zip(&masks.masks) {
        for (p, &inside) in m.data.iter().enumerate() {
            if inside {
                for k in 0..3 {
                    s += (img.data[3 * p + k] - t.data[3 * p + k]).abs();
                }
                n += 3;
            }
        }
    }
    s / n as f64
}

/// Total logged loss per step as written to the loss CSV.
fn csv_totals(trace: &[LossRecord]) -> Vec<f64> {
    let csv = loss_csv(trace);
    csv.lines()
        .skip(1)
        .map(|line| line.split(',').skip(1).take(5).map(|v| v.parse::<f64>().unwrap()).sum())
        .collect()
}

fn criterion_8(r: &mut Report, base: &[Image], out: &RepaintOutcome, edited: &[Image], masks: &MaskSet) {
    let before = masked_abs_error(base, &out.targets, masks);
    let after = masked_abs_error(edited, &out.targets, masks);
    let reduction = 1.0 - after / before;
    let totals = csv_totals(&out.trace);
    let decile = totals.len() / 10;
    let first = mean(&totals[..decile]);
    let last = mean(&totals[totals.len() - decile..]);
    let mut best = f64::INFINITY;
    let mut improvements = 0;
    for &t in &totals {
        if t < best {
            best = t;
            improvements += 1;
        }
    }
    let ok = reduction >= 0.8 && best < totals[0] && last < first;
    r.record(
        8,
        ok,
        format!(
            "masked |C−T| {before:.4} → {after:.4} ({:.1}% reduction, >= 80%), best-so-far loss {:.3e} → {best:.3e} over {improvements} improvements, last-decile mean {last:.3e} < first {first:.3e}",
            100.0 * reduction,
            totals[0]
        ),
    );
}

fn hole_similarity(images: &[Image], masks: &MaskSet, bgt: &str) -> f64 {
    let embedder = ToyPaletteEmbedder::new(ProviderConfig::default().providers().unwrap().palettes);
    let text = embedder.embed_text(bgt).unwrap();
    let sims: Vec<f64> = images
        .iter()
        .zip(&masks.masks)
        .map(|(img, m)| embedder.sim(&embedder.embed_image(&black_hole_composite(img, m).unwrap()), &text))
        .collect();
    mean(&sims)
}

fn criterion_9(r: &mut Report, base: &RadianceField<f32>, masks: &MaskSet) {
    let job = |lambda_clip: f64| {
        let mut j = EditJob {
            prompt: "a small blue sphere".into(),
            bgt: "leaves".into(),
            repaint_steps: CLIP_STEPS,
            ..EditJob::default()
        };
        j.weights.lambda_clip = lambda_clip;
        j
    };
    let (with, t1) = run_repaint(base, masks, &job(1.0));
    let (without, t2) = run_repaint(base, masks, &job(0.0));
    let s_with = hole_similarity(&renders(&with.field, masks), masks, "leaves");
    let s_without = hole_similarity(&renders(&without.field, masks), masks, "leaves");
    r.record(
        9,
        s_with > s_without,
        format!(
            "hole-composite similarity to 'leaves' λ_clip=1 {s_with:.4} vs λ_clip=0 {s_without:.4} after {CLIP_STEPS} steps each ({:.0}s)",
            secs(t1 + t2)
        ),
    );
}

fn criterion_10(r: &mut Report) {
    let ds = make_dataset(&SceneSpec::two_spheres(), 6, 24, &Orbit::default(), FEATURE_DIM).unwrap();
    let cfg = Stage1Config {
        steps: 60,
        ray_batch: 512,
        n_samples: 32,
        ..Stage1Config::default()
    };
    let sel = PatchSelection {
        view: 0,
        rect: [9, 5, 13, 9],
        alpha: DEFAULT_ALPHA,
    };
    let job = EditJob {
        repaint_steps: 20,
        n_samples: 32,
        ..EditJob::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |k: usize| {
        let out = train_stage1(&ds, &FieldConfig::default(), &cfg, &mut |_| {}).unwrap();
        let ckpt = checkpoint_bytes(&out.field, Some(&out.adam));
        let masks = extract_mask_set(
            &out.field,
            &ds.cameras(),
            &sel,
            &content_id(&ckpt),
            MaskOptions::default(),
            &RenderOptions::default(),
        );
        let mask_files = masks.as_ref().ok().map(|m| {
            let d = dir.path().join(format!("run{k}"));
            m.save(&d).unwrap();
            let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            names.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
        });
        let repaint_csv = masks.ok().map(|m| loss_csv(&run_repaint(&out.field, &m, &job).0.trace));
        (loss_csv(&out.trace), ckpt, mask_files, repaint_csv)
    };
    let (a, b) = (run(0), run(1));
    let masks_ok = a.2.is_some() && a.2 == b.2;
    let ok = a.0 == b.0 && a.1 == b.1 && masks_ok && a.3.is_some() && a.3 == b.3;
    r.record(
        10,
        ok,
        format!(
            "stage-1 loss CSV equal {}, checkpoint bytes equal {}, mask files equal {masks_ok}, repaint loss CSV equal {}",
            a.0 == b.0,
            a.1 == b.1,
            a.3.is_some() && a.3 == b.3
        ),
    );
}

fn main() {
    let mut r = Report { lines: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);

    let scene = SceneSpec::two_spheres();
    let ds = make_dataset(&scene, VIEWS, RES, &Orbit::default(), FEATURE_DIM).unwrap();
    let held = make_dataset_at(&scene, VIEWS, RES, &Orbit::default(), FEATURE_DIM, HELD_OUT_OFFSET_DEG).unwrap();
    let with_depth = run_stage1(&ds, true);
    criterion_4(&mut r, &with_depth, &held);

    let without_depth = run_stage1(&ds, false);
    let sel = canonical_selection(&ds);
    let masks = masks_for(&with_depth.field, &ds, &sel);
    let masks_without = masks_for(&without_depth.field, &ds, &sel);
    criterion_5(&mut r, &masks, &masks_without, &ds, with_depth.time + without_depth.time);

    criterion_6(&mut r, &with_depth.field, &masks);

    let base = renders(&with_depth.field, &masks);
    let unmask_job = |lambda_unmask: f64| {
        let mut j = EditJob {
            repaint_steps: REPAINT_STEPS,
            ..EditJob::default()
        };
        j.weights.lambda_unmask = lambda_unmask;
        j
    };
    let (zero, t0) = run_repaint(&with_depth.field, &masks, &unmask_job(0.0));
    let (hundred, t1) = run_repaint(&with_depth.field, &masks, &unmask_job(100.0));
    let edited_zero = renders(&zero.field, &masks);
    let edited = renders(&hundred.field, &masks);
    criterion_7(
        &mut r,
        unmasked_psnr(&edited_zero, &base, &masks),
        unmasked_psnr(&edited, &base, &masks),
        t0 + t1,
    );
    criterion_8(&mut r, &base, &hundred, &edited, &masks);
    criterion_9(&mut r, &with_depth.field, &masks);
    criterion_10(&mut r);

    let failed: Vec<usize> = r.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        r.lines.len() - failed.len(),
        r.lines.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
