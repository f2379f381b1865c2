//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 5`, and `--strict` to exit non-zero
//! when any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::*;
use magms::checkpoint::Checkpoint;
use magms::data::{default_modality_names, generate_phantom, read_dataset, PhantomSpec, Split};
use magms::evaluation::{dice_score, hd95, SweepReport};
use magms::losses::{self, LossWeights};
use magms::model::{fuse, fuse_refs, FeatureBundle, ForwardAll, MagModel};
use magms::theory::{distillation_tightens_bound, sweep_bound};
use magms::training::{SubsetPredictor, TrainState};
use magms::types::{ExperimentConfig, ModalitySubset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const EPS: f64 = 1e-5;
/// Grid edge, modality count and training budget of the complementary
/// phantom runs shared by criteria 7 and 9.
const COMP_SIZE: &str = "24";
const COMP_MODALITIES: usize = 3;
const COMP_ITERS: &str = "200";

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn magms(args: &[&str]) -> Result<f64, String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_magms"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "magms {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(t.elapsed().as_secs_f64())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_outputs(rng: &mut ChaCha8Rng) -> (magms::types::LabelMap, ForwardAll<f64>) {
    let m = rng.random_range(1..4);
    let c = rng.random_range(2..5);
    let sh = random_shape(rng, 4);
    let labels = random_labels(rng, c, sh);
    let shapes = [[2, sh[0], sh[1], sh[2]], [3, 1, 1, 2]];
    let out = ForwardAll {
        modality_logits: (0..m).map(|_| random_logits(rng, c, sh, 2.0)).collect(),
        fused_logits: random_logits(rng, c, sh, 2.0),
        modality_bundles: (0..m).map(|_| random_bundle(rng, &shapes)).collect(),
        fused_bundle: random_bundle(rng, &shapes),
    };
    (labels, out)
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let tol = 1e-4;
    let mut worst = [0.0f64; 4];
    for _ in 0..25 {
        let c = rng.random_range(2..5);
        let sh = random_shape(&mut rng, 4);
        let labels = random_labels(&mut rng, c, sh);
        let s = random_logits(&mut rng, c, sh, 2.0);
        let t = random_logits(&mut rng, c, sh, 2.0);
        let temp = rng.random_range(0.5..4.0);

        let (_, g) = losses::dice_ce_with_grad(&labels, &s, EPS).unwrap();
        let num = numeric_gradient(&s, h, |x| losses::dice_ce(&labels, x, EPS).unwrap());
        worst[0] = worst[0].max(relative_error(&num, g.as_slice().unwrap()));

        let (_, g) = losses::pixel_kl_with_grad(&t, &s, temp).unwrap();
        let num = numeric_gradient(&s, h, |x| losses::pixel_kl(&t, x, temp).unwrap());
        worst[1] = worst[1].max(relative_error(&num, g.as_slice().unwrap()));

        let shapes = [[2, sh[0], sh[1], sh[2]], [1, 1, 2, 1]];
        let f = random_bundle(&mut rng, &shapes);
        let ft = random_bundle(&mut rng, &shapes);
        let (_, g) = losses::feature_l2_with_grad(&f, &ft).unwrap();
        let mut ana = Vec::new();
        let mut num = Vec::new();
        for lvl in 0..shapes.len() {
            ana.extend(g.levels()[lvl].iter().copied());
            num.extend(numeric_gradient(&f.levels()[lvl], h, |x| {
                let mut levels = f.levels().to_vec();
                levels[lvl] = x.clone();
                losses::feature_l2(&FeatureBundle::new(levels, None), &ft).unwrap()
            }));
        }
        worst[2] = worst[2].max(relative_error(&num, &ana));

        let (labels, out) = random_outputs(&mut rng);
        let w = LossWeights {
            lambda_kl: rng.random_range(0.0..2.0),
            gamma_l2: rng.random_range(0.0..2.0),
            temperature: rng.random_range(0.5..3.0),
            dice_epsilon: EPS,
        };
        let (_, grads) = losses::mag_loss_with_grad(&labels, &out, &w).unwrap();
        let total =
            |o: &ForwardAll<f64>, w: &LossWeights| losses::mag_loss(&labels, o, w).unwrap().total;
        let (mut ana, mut num) = (Vec::new(), Vec::new());
        for i in 0..out.modality_logits.len() {
            ana.extend(grads.modality_logits[i].as_ref().unwrap().iter().copied());
            num.extend(numeric_gradient(&out.modality_logits[i], h, |x| {
                let mut o = out.clone();
                o.modality_logits[i] = x.clone();
                total(&o, &w)
            }));
            for lvl in 0..out.modality_bundles[i].levels().len() {
                let level = &out.modality_bundles[i].levels()[lvl];
                match &grads.modality_bundles[i] {
                    Some(b) => ana.extend(b.levels()[lvl].iter().copied()),
                    None => ana.extend(std::iter::repeat_n(0.0, level.len())),
                }
                num.extend(numeric_gradient(level, h, |x| {
                    let mut o = out.clone();
                    o.modality_bundles[i].levels_mut()[lvl] = x.clone();
                    total(&o, &w)
                }));
            }
        }
        // the teacher is detached: the fused-logit gradient is that of the
        // fused supervised term alone, which is the whole loss when lambda = 0
        let no_kl = LossWeights {
            lambda_kl: 0.0,
            ..w
        };
        ana.extend(grads.fused_logits.as_ref().unwrap().iter().copied());
        num.extend(numeric_gradient(&out.fused_logits, h, |x| {
            let mut o = out.clone();
            o.fused_logits = x.clone();
            total(&o, &no_kl)
        }));
        worst[3] = worst[3].max(relative_error(&num, &ana));
    }
    let names = ["dice_ce", "pixel_kl", "feature_l2", "mag_loss"];
    for (n, e) in names.iter().zip(worst) {
        ensure(e < tol, format!("{n} relative error {e:.2e}"))?;
    }
    Ok(format!(
        "25 instances per term, worst relative errors {}",
        names
            .iter()
            .zip(worst)
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..200 {
        let shapes = [[2, 3, 2, 2], [4, 1, 1, 1]];
        let b = random_bundle(&mut rng, &shapes)
            .levels()
            .iter()
            .map(|l| l.mapv(|v| v as f32))
            .collect();
        let b = FeatureBundle::new(b, Some(0));
        ensure(
            fuse(std::slice::from_ref(&b)).unwrap().levels() == b.levels(),
            "singleton fusion changed values",
        )?;
        let n = rng.random_range(2..6);
        let set: Vec<FeatureBundle<f32>> = (0..n)
            .map(|i| {
                let levels = random_bundle(&mut rng, &shapes)
                    .levels()
                    .iter()
                    .map(|l| l.mapv(|v| v as f32 * 100.0))
                    .collect();
                FeatureBundle::new(levels, Some(i))
            })
            .collect();
        let mut order: Vec<&FeatureBundle<f32>> = set.iter().collect();
        order.shuffle(&mut rng);
        ensure(
            fuse(&set).unwrap().levels() == fuse_refs(&order).unwrap().levels(),
            "fusion depends on order",
        )?;
    }
    let mut checked = 0;
    for m in 1..=4 {
        let spec = PhantomSpec::standard(m, 4, 16, m as u64);
        let ds = generate_phantom(&spec, 3).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.modalities = default_modality_names(m);
        let model = MagModel::<f32>::new(&cfg, 7).unwrap();
        let full = model.modalities().full().unwrap();
        for s in &ds.samples {
            let all = model.forward_all(s).unwrap();
            ensure(
                model.forward_subset(s, &full).unwrap() == all.fused_logits,
                "forward_subset(M) differs from fused branch",
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "200 singleton/permutation cases, {checked} full-subset forwards bit-identical"
    ))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (labels, out) = random_outputs(&mut rng);
        let w = LossWeights {
            lambda_kl: rng.random_range(0.0..3.0),
            gamma_l2: rng.random_range(0.0..3.0),
            temperature: rng.random_range(0.5..4.0),
            dice_epsilon: EPS,
        };
        let b = losses::mag_loss(&labels, &out, &w).unwrap();
        let mut expected = dice_ce_oracle(&labels, &out.fused_logits, EPS);
        for i in 0..out.modality_logits.len() {
            expected += dice_ce_oracle(&labels, &out.modality_logits[i], EPS)
                + w.lambda_kl
                    * kl_oracle(&out.fused_logits, &out.modality_logits[i], w.temperature)
                + w.gamma_l2 * l2_oracle(&out.modality_bundles[i], &out.fused_bundle);
        }
        worst = worst.max((b.total - expected).abs() / expected.abs());

        let zero = LossWeights {
            lambda_kl: 0.0,
            gamma_l2: 0.0,
            ..w
        };
        let z = losses::mag_loss(&labels, &out, &zero).unwrap();
        let mut sum = losses::dice_ce(&labels, &out.fused_logits, EPS).unwrap();
        for s in &out.modality_logits {
            sum += losses::dice_ce(&labels, s, EPS).unwrap();
        }
        ensure(
            z.total == sum,
            format!("lambda=gamma=0 total {} != {}", z.total, sum),
        )?;
    }
    ensure(worst < 1e-6, format!("relative error {worst:.2e}"))?;
    Ok(format!(
        "50 instances, worst relative error {worst:.1e}; zero weights collapse exactly"
    ))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut hd_checked = 0;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let c = rng.random_range(2..5);
        let sh = random_shape(&mut rng, 8);
        let (pred, gt) = if i % 3 == 0 {
            (
                random_labels(&mut rng, c, sh),
                random_labels(&mut rng, c, sh),
            )
        } else {
            (
                random_blob_map(&mut rng, sh, c),
                random_blob_map(&mut rng, sh, c),
            )
        };
        let spacing = [
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        ];
        let d = dice_score(&pred, &gt, c).unwrap();
        for k in 0..c {
            ensure(
                d[k] == dice_oracle(&pred, &gt, k as u8),
                format!("dice mismatch on instance {i} class {k}"),
            )?;
        }
        for k in 1..c as u8 {
            match (
                hd95(&pred, &gt, k, spacing).unwrap(),
                hd95_oracle(&pred, &gt, k, spacing),
            ) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    hd_checked += 1;
                }
                (a, b) => ensure(a == b, format!("hd95 definedness differs on instance {i}"))?,
            }
        }
    }
    ensure(worst < 1e-9, format!("hd95 error {worst:.2e}"))?;
    Ok(format!(
        "100 instances, dice exact, {hd_checked} hd95 values within {worst:.1e}"
    ))
}

fn criterion_5() -> Check {
    let t = Instant::now();
    let fraction = sweep_bound(100_000, 5).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(fraction == 1.0, format!("fraction {fraction}"))?;
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "fraction holding {fraction:.6} over 100000 pairs in {secs:.2} s"
    ))
}

struct Standard {
    data: PathBuf,
    ckpt: PathBuf,
    report: PathBuf,
    train_secs: f64,
    sweep_secs: f64,
}

fn standard_run(root: &Path, seed: u64) -> Result<(Standard, f64), String> {
    let seed_s = seed.to_string();
    let data = root.join(format!("std-data-{seed}"));
    let run = root.join(format!("std-run-{seed}"));
    let rep = root.join(format!("std-report-{seed}"));
    let t_gen = magms(&[
        "gen-data",
        "--out",
        p(&data),
        "--modalities",
        "4",
        "--size",
        "32",
        "--subjects",
        "18",
        "--seed",
        &seed_s,
    ])?;
    let t_train = magms(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--arm",
        "magms",
        "--iterations",
        "200",
        "--seed",
        &seed_s,
    ])?;
    let ckpt = run.join("ckpt-200.bin");
    let t_sweep = magms(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&rep),
        "--format",
        "csv,md",
    ])?;
    Ok((
        Standard {
            data,
            ckpt,
            report: rep.join("sweep.json"),
            train_secs: t_train,
            sweep_secs: t_sweep,
        },
        t_gen + t_train + t_sweep,
    ))
}

fn load_report(path: &Path) -> Result<SweepReport, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_6(root: &Path, runs: &mut Vec<Standard>) -> Check {
    let mut dice = Vec::new();
    let mut times = Vec::new();
    for seed in 0..3 {
        let (run, secs) = standard_run(root, seed)?;
        let report = load_report(&run.report)?;
        ensure(
            report.rows.len() == 15,
            format!("{} rows", report.rows.len()),
        )?;
        let full = report.full_row().ok_or("no all-modality row")?;
        dice.push(full.dice.mean);
        times.push(secs);
        ensure(
            secs < 600.0,
            format!("seed {seed} pipeline took {secs:.0} s"),
        )?;
        runs.push(run);
    }
    let med = median(&dice);
    let detail = format!(
        "all-modality Dice per seed {:?}, median {med:.3}; pipeline seconds {:?}",
        dice.iter()
            .map(|d| (d * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        times.iter().map(|t| t.round()).collect::<Vec<_>>()
    );
    ensure(med > 0.80, detail.clone())?;
    Ok(detail)
}

fn criterion_8(runs: &[Standard]) -> Check {
    ensure(!runs.is_empty(), "needs the criterion 6 runs")?;
    for run in runs {
        let bytes = fs::read(&run.ckpt).map_err(|e| e.to_string())?;
        let report = load_report(&run.report)?;
        let hash: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        ensure(
            report.checkpoint == hash,
            "report does not identify the swept checkpoint",
        )?;
        ensure(
            report.parameter_updates == 0,
            "sweep performed parameter updates",
        )?;
        let ck = Checkpoint::load(&run.ckpt).map_err(|e| e.to_string())?;
        ensure(
            report.config_hash == ck.config.hash(),
            "config hash mismatch",
        )?;
        ensure(
            ck.iteration == 200 && ck.optimizer_step == 200,
            "checkpoint was modified",
        )?;
        let state = TrainState::from_checkpoint(&ck, &run.ckpt).map_err(|e| e.to_string())?;
        let digest = state.parameter_digest();
        let ds = read_dataset(&run.data).map_err(|e| e.to_string())?;
        let again = magms::evaluation::sweep_state(&state, &ck.identity(), &ds, 1)
            .map_err(|e| e.to_string())?;
        ensure(
            state.parameter_digest() == digest,
            "in-process sweep changed parameters",
        )?;
        let text = fs::read_to_string(&run.report).map_err(|e| e.to_string())?;
        let again = serde_json::to_string_pretty(&again).map_err(|e| e.to_string())?;
        ensure(
            again == text,
            "in-process sweep differs from the CLI report",
        )?;
        ensure(
            run.sweep_secs < run.train_secs,
            format!(
                "sweep {:.1} s not faster than training {:.1} s",
                run.sweep_secs, run.train_secs
            ),
        )?;
    }
    Ok(format!(
        "{} sweeps of 15 subsets, one checkpoint each, 0 parameter updates; sweep/train seconds {:?}",
        runs.len(),
        runs.iter().map(|r| format!("{:.1}/{:.1}", r.sweep_secs, r.train_secs)).collect::<Vec<_>>()
    ))
}

fn comp_data(root: &Path, seed: u64) -> Result<PathBuf, String> {
    let data = root.join(format!("comp-data-{seed}"));
    if !data.exists() {
        magms(&[
            "gen-data",
            "--out",
            p(&data),
            "--phantom",
            "complementary",
            "--modalities",
            &COMP_MODALITIES.to_string(),
            "--size",
            COMP_SIZE,
            "--subjects",
            "18",
            "--seed",
            &seed.to_string(),
        ])?;
    }
    Ok(data)
}

fn comp_train(root: &Path, seed: u64, arm: &str) -> Result<PathBuf, String> {
    let data = comp_data(root, seed)?;
    let run = root.join(format!("comp-{arm}-{seed}"));
    let ckpt = run.join(format!("ckpt-{COMP_ITERS}.bin"));
    if !ckpt.exists() {
        magms(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&run),
            "--arm",
            arm,
            "--iterations",
            COMP_ITERS,
            "--seed",
            &seed.to_string(),
        ])?;
    }
    Ok(ckpt)
}

fn comp_sweep(root: &Path, seed: u64, arm: &str) -> Result<SweepReport, String> {
    let ckpt = comp_train(root, seed, arm)?;
    let data = comp_data(root, seed)?;
    let out = root.join(format!("comp-report-{arm}-{seed}"));
    magms(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ])?;
    load_report(&out.join("sweep.json"))
}

fn single_dice(report: &SweepReport) -> f64 {
    let singles: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.subset.len() == 1)
        .map(|r| r.dice.mean)
        .collect();
    singles.iter().sum::<f64>() / singles.len() as f64
}

fn criterion_7(root: &Path) -> Check {
    let (mut kl_with, mut kl_without) = (Vec::new(), Vec::new());
    let (mut ent_with, mut ent_without) = (Vec::new(), Vec::new());
    let (mut dice_with, mut dice_without) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let a = TrainState::load(&comp_train(root, seed, "magms")?).map_err(|e| e.to_string())?;
        let b = TrainState::load(&comp_train(root, seed, "mag")?).map_err(|e| e.to_string())?;
        ensure(
            a.config.lambda_kl == 1.0 && a.config.gamma_l2 == 1.0,
            "distilled arm weights",
        )?;
        ensure(
            b.config.lambda_kl == 0.0 && b.config.gamma_l2 == 0.0,
            "plain arm weights",
        )?;
        let ds = read_dataset(&comp_data(root, seed)?).map_err(|e| e.to_string())?;
        ensure(!ds.split(Split::Test).is_empty(), "no held-out subjects")?;
        let (mut kw, mut ko, mut ew, mut eo) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..COMP_MODALITIES {
            let subset = ModalitySubset::new(a.modalities(), [i]).map_err(|e| e.to_string())?;
            let c = distillation_tightens_bound(&a, &b, &ds, &subset).map_err(|e| e.to_string())?;
            kw += c.with_distillation.mean_kl;
            ko += c.without_distillation.mean_kl;
            ew += c.with_distillation.mean_entropy;
            eo += c.without_distillation.mean_entropy;
        }
        let n = COMP_MODALITIES as f64;
        kl_with.push(kw / n);
        kl_without.push(ko / n);
        ent_with.push(ew / n);
        ent_without.push(eo / n);
        dice_with.push(single_dice(&comp_sweep(root, seed, "magms")?));
        dice_without.push(single_dice(&comp_sweep(root, seed, "mag")?));
    }
    let (kw, ko) = (median(&kl_with), median(&kl_without));
    let (dw, dn) = (median(&dice_with), median(&dice_without));
    let detail = format!(
        "median KL(fused||single) {kw:.4} with vs {ko:.4} without; median entropy {:.4} vs {:.4} (logged); \
         median single-modality Dice {dw:.3} vs {dn:.3}",
        median(&ent_with),
        median(&ent_without)
    );
    ensure(kw < ko, format!("KL not reduced: {detail}"))?;
    ensure(
        dw >= dn - 0.02,
        format!("single-modality Dice inferior: {detail}"),
    )?;
    Ok(detail)
}

fn criterion_9(root: &Path) -> Check {
    let arms = ["magms", "zero_fill", "mean_fill", "dropout_mean"];
    let mut medians = Vec::new();
    for arm in arms {
        let mut full = Vec::new();
        for seed in 0..3 {
            let report = comp_sweep(root, seed, arm)?;
            ensure(
                report.rows.len() == (1 << COMP_MODALITIES) - 1,
                format!("{arm}: {} rows", report.rows.len()),
            )?;
            ensure(
                report.arm == arm,
                format!("report arm {} for {arm}", report.arm),
            )?;
            full.push(report.full_row().ok_or("no all-modality row")?.dice.mean);
        }
        medians.push((arm, median(&full)));
    }
    let detail = medians
        .iter()
        .map(|(a, d)| format!("{a} {d:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    let ours = medians[0].1;
    for (arm, d) in &medians[1..] {
        ensure(ours >= d - 0.02, format!("MAG-MS below {arm}: {detail}"))?;
    }
    Ok(format!("median all-modality Dice: {detail}"))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let root = tempfile::tempdir().expect("temporary directory");
    let mut standard_runs = Vec::new();
    let mut failed = Vec::new();
    let mut ran = 0;
    let names = [
        "gradient suite",
        "fusion invariants",
        "loss decomposition",
        "metric oracles",
        "theorem verifier",
        "end-to-end phantom run",
        "distillation mechanism",
        "single-training sweep",
        "baseline arms",
    ];
    for n in 1..=9u32 {
        if !wanted(n) || (n == 8 && !wanted(6)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(root.path(), &mut standard_runs),
            7 => criterion_7(root.path()),
            8 => criterion_8(&standard_runs),
            _ => criterion_9(root.path()),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let secs = t.elapsed().as_secs_f64();
        ran += 1;
        match result {
            Ok(detail) => println!(
                "PASS criterion {n} ({}): {detail} [{secs:.1} s]",
                names[n as usize - 1]
            ),
            Err(detail) => {
                failed.push(n.to_string());
                println!(
                    "FAIL criterion {n} ({}): {detail} [{secs:.1} s]",
                    names[n as usize - 1]
                );
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: {ran}/{ran} criteria passed");
    } else {
        println!(
            "acceptance: {}/{ran} criteria passed; failing: {}",
            ran - failed.len(),
            failed.join(", ")
        );
        if strict {
            std::process::exit(1);
        }
    }
}
