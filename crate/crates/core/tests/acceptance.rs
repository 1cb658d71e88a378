//! Acceptance suite. Prints one PASS/FAIL line per criterion. Set
//! `PLOOD_ACCEPTANCE_STRICT=1` to exit nonzero when any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use plood_core::autodiff::finite_difference;
use plood_core::backbone::{forward_pll, forward_ssfe, init_finetune, Architecture, BackboneParams};
use plood_core::config::ExperimentConfig;
use plood_core::datagen::{rotate, LabelSet, OodKind};
use plood_core::experiment::{pretrain, run_ablation, run_experiment, AblationMode, Datasets};
use plood_core::metrics::{aupr_in, fpr95, EvalInput};
use plood_core::pll::{finetune_pll_observed, init_confidence, loss_pl, loss_pl_grad, update_confidence, ConfidenceMatrix};
use plood_core::report::{Arm, ScoreReport};
use plood_core::scoring::{
    baseline_score, label_energy, partial_energy, pe_from_logits, GlcMode, GlcVector, EnergyInput, ScoreKind,
};
use plood_core::ssfe::{batch_loss_and_grads, loss_rc, loss_ri, loss_ssfe, rotation_probs, rotation_weights, RotationBatch};
use plood_core::tensor::{softmax_rows, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET_S: f64 = 30.0;
const ORACLE_TOL: f64 = 1e-12;
const ROW_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-9;
const SHIFT_TOL: f64 = 1e-9;
/// Seed-averaged ID accuracy of the reference run was 1.0 on every seed;
/// the frozen floor leaves room for platform float drift only.
const ACCURACY_FLOOR: f64 = 0.98;
const BENCH_BUDGET_S: f64 = 15.0 * 60.0;
const MIN_KINDS_WON: usize = 3;

type Verdict = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1.0)
}

fn tiny_arch(seed: u64) -> Architecture {
    Architecture {
        side: 4,
        conv1: 2,
        conv2: 3,
        feature_dim: 3,
        rotations: 4,
        classes: 3 + (seed % 2) as usize,
    }
}

fn rotation_batch(rng: &mut ChaCha8Rng, sources: usize) -> RotationBatch {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..sources {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(|_| rng.gen::<f64>()).collect()).unwrap();
        for r in 1..=4 {
            data.extend_from_slice(rotate(&img, r).unwrap().data());
            labels.push(r);
        }
    }
    RotationBatch {
        images: Tensor::new(&[sources * 4, 1, 4, 4], data).unwrap(),
        rotation_labels: labels,
        sources: (0..sources).collect(),
        rotations: 4,
    }
}

fn jitter_biases(p: &mut BackboneParams, rng: &mut ChaCha8Rng) {
    // keeps relu inputs away from their kink at zero
    for name in ["conv1.b", "conv2.b", "rc.b", "ri.b", "pll.b"] {
        if let Some(t) = p.get_mut(name) {
            for v in t.data_mut() {
                *v = rng.gen_range(0.05..0.2);
            }
        }
    }
}

fn worst(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)))
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let mut max_ssfe: f64 = 0.0;
    let mut max_pll: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let arch = tiny_arch(seed);
        let mut params = BackboneParams::init(arch, seed);
        jitter_biases(&mut params, &mut rng);
        let alpha = rng.gen_range(0.1..0.9);
        let batch = rotation_batch(&mut rng, 2);
        let (_, analytic) = batch_loss_and_grads(&params, &batch, alpha).map_err(|e| e.to_string())?;
        let base = forward_ssfe(&params, &batch.images).unwrap();
        let w = rotation_weights(&rotation_probs(&base.logits).unwrap(), &batch.rotation_labels).unwrap();
        let numeric = finite_difference(params.trainable(), 1e-6, |t| {
            let mut p = params.clone();
            p.trainable_mut().clone_from_slice(t);
            let pass = forward_ssfe(&p, &batch.images).unwrap();
            let rc = loss_rc(&rotation_probs(&pass.logits).unwrap(), &batch.rotation_labels, &w).unwrap();
            let h = pass.features.h_ri.clone().reshape(&[2, 4, arch.feature_dim]).unwrap();
            loss_ssfe(rc, loss_ri(&h).unwrap(), alpha)
        });
        max_ssfe = max_ssfe.max(worst(&analytic, &numeric));

        let mut fine = init_finetune(&params, seed).unwrap();
        jitter_biases(&mut fine, &mut rng);
        let images = Tensor::new(&[5, 1, 4, 4], (0..80).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let masks: Vec<LabelSet> = (0..5)
            .map(|_| {
                let mut s = LabelSet::singleton(arch.classes, rng.gen_range(0..arch.classes));
                s.insert(rng.gen_range(0..arch.classes));
                s
            })
            .collect();
        let noise = Tensor::new(&[5, arch.classes], (0..5 * arch.classes).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let c = update_confidence(&init_confidence(&masks).unwrap(), &noise).unwrap();
        let pass = forward_pll(&fine, &images).unwrap();
        let probs = softmax_rows(&pass.logits).unwrap();
        let analytic = pass.backward(&loss_pl_grad(&probs, &c).unwrap(), None).unwrap();
        let numeric = finite_difference(fine.trainable(), 1e-6, |t| {
            let mut p = fine.clone();
            p.trainable_mut().clone_from_slice(t);
            loss_pl(&softmax_rows(&forward_pll(&p, &images).unwrap().logits).unwrap(), &c).unwrap()
        });
        max_pll = max_pll.max(worst(&analytic, &numeric));
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("max rel err pretext {max_ssfe:.2e}, fine-tune {max_pll:.2e} over {GRAD_SEEDS} seeds in {secs:.1}s");
    check(max_ssfe < GRAD_TOL && max_pll < GRAD_TOL && secs < GRAD_BUDGET_S, || detail.clone())?;
    Ok(detail)
}

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn loss_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_err: f64 = 0.0;
    for _ in 0..100 {
        let (n, r, d, q) = (rng.gen_range(1..6), 4, rng.gen_range(1..5), rng.gen_range(2..6));
        let logits: Vec<Vec<f64>> = (0..n * r)
            .map(|_| (0..r).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n * r).map(|i| i % r + 1).collect();
        let probs = rotation_probs(&Tensor::from_rows(&logits).unwrap()).unwrap();
        let w = rotation_weights(&probs, &labels).unwrap();
        let mut rc = 0.0;
        for (i, row) in logits.iter().enumerate() {
            let p = naive_softmax(row);
            let z = labels[i];
            let wi = if z == 1 { 1.0 } else { 1.0 - p[z - 1] };
            check((0.0..=1.0).contains(&w[i]), || format!("weight {} outside [0,1]", w[i]))?;
            worst_err = worst_err.max((w[i] - wi).abs());
            rc -= wi * p[z - 1].ln();
        }
        rc /= (n * r) as f64;
        let fast_rc = loss_rc(&probs, &labels, &w).unwrap();
        worst_err = worst_err.max((fast_rc - rc).abs());

        let h: Vec<f64> = (0..n * r * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut ri = 0.0;
        for i in 0..n {
            for k in 0..d {
                let mean: f64 = (0..r).map(|j| h[(i * r + j) * d + k]).sum::<f64>() / r as f64;
                for j in 0..r {
                    ri += (h[(i * r + j) * d + k] - mean).powi(2);
                }
            }
        }
        ri /= (n * r) as f64;
        let fast_ri = loss_ri(&Tensor::new(&[n, r, d], h).unwrap()).unwrap();
        worst_err = worst_err.max((fast_ri - ri).abs());
        let alpha = rng.gen::<f64>();
        worst_err = worst_err.max((loss_ssfe(fast_rc, fast_ri, alpha) - (alpha * rc + (1.0 - alpha) * ri)).abs());
        check(fast_rc >= 0.0 && fast_ri >= 0.0, || format!("negative loss rc={fast_rc} ri={fast_ri}"))?;

        let masks: Vec<LabelSet> = (0..n)
            .map(|_| {
                let mut s = LabelSet::singleton(q, rng.gen_range(0..q));
                s.insert(rng.gen_range(0..q));
                s
            })
            .collect();
        let c = init_confidence(&masks).unwrap();
        let pl_logits: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let mut pl = 0.0;
        for (i, row) in pl_logits.iter().enumerate() {
            let p = naive_softmax(row);
            for j in 0..q {
                pl -= c.row(i)[j] * p[j].ln();
            }
        }
        pl /= n as f64;
        let fast_pl = loss_pl(&softmax_rows(&Tensor::from_rows(&pl_logits).unwrap()).unwrap(), &c).unwrap();
        check(fast_pl >= 0.0, || format!("negative partial-label loss {fast_pl}"))?;
        worst_err = worst_err.max((fast_pl - pl).abs());
    }
    check(worst_err < ORACLE_TOL, || format!("oracle gap {worst_err:.2e}"))?;

    // zero cases: identical copies, and a certain correct rotation prediction
    let same = loss_ri(&Tensor::new(&[1, 4, 2], [0.3, -1.0].repeat(4)).unwrap()).unwrap();
    let sure = Tensor::new(&[1, 4], vec![0.0, -800.0, -800.0, -800.0]).unwrap();
    let sure_probs = rotation_probs(&sure).unwrap();
    let sure_rc = loss_rc(&sure_probs, &[1], &rotation_weights(&sure_probs, &[1]).unwrap()).unwrap();
    check(same.abs() < 1e-30 && sure_rc == 0.0, || format!("zero cases gave ri={same} rc={sure_rc}"))?;
    Ok(format!("100 batches, max oracle gap {worst_err:.2e}; zero cases exact"))
}

fn confidence_invariants() -> Verdict {
    let cfg = ExperimentConfig::default();
    let data = Datasets::generate(&cfg, 0).map_err(|e| e.to_string())?;
    let (start, _) = pretrain(&cfg, 0, &data.train, Arm::WithoutSsfe).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    let mut epochs = 0;
    let check_rows = |c: &ConfidenceMatrix, problems: &mut Vec<String>, epoch: usize| {
        for (i, (row, mask)) in c.rows().zip(c.masks()).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                problems.push(format!("epoch {epoch} row {i} sums to {sum}"));
            }
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 || (v > 0.0 && !mask.contains(j)) {
                    problems.push(format!("epoch {epoch} entry ({i},{j}) = {v}"));
                }
            }
        }
    };
    let pcfg = plood_core::pll::PllConfig { seed: 0, ..cfg.pll.clone() };
    let (_, _, log) = finetune_pll_observed(&data.train, &start, &pcfg, |epoch, c| {
        epochs += 1;
        check_rows(c, &mut problems, epoch);
    })
    .map_err(|e| e.to_string())?;
    check(problems.is_empty(), || problems[..problems.len().min(3)].join("; "))?;
    check(epochs == cfg.pll.epochs && log.epochs.len() == epochs, || format!("observed {epochs} epochs"))?;
    Ok(format!("{epochs} epochs on {} instances, every row valid", data.train.len()))
}

fn sweep_aupr(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64;
        let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / id.len() as f64;
        if tp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

fn sweep_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let best = id
        .iter()
        .copied()
        .filter(|&t| id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64 >= 0.95)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gap: f64 = 0.0;
    for _ in 0..200 {
        let (ni, no) = (rng.gen_range(1..=25), rng.gen_range(1..=25));
        let coarse = rng.gen_bool(0.5);
        let mut draw = |shift: f64| {
            if coarse {
                f64::from(rng.gen_range(0..8)) + shift
            } else {
                rng.gen_range(0.0..1.0) + shift
            }
        };
        let id: Vec<f64> = (0..ni).map(|_| draw(0.5)).collect();
        let ood: Vec<f64> = (0..no).map(|_| draw(0.0)).collect();
        let input = EvalInput::new(id.clone(), ood.clone());
        gap = gap.max((aupr_in(&input).unwrap() - sweep_aupr(&id, &ood)).abs());
        gap = gap.max((fpr95(&input).unwrap() - sweep_fpr95(&id, &ood)).abs());
    }
    check(gap < METRIC_TOL, || format!("oracle gap {gap:.2e}"))?;

    let m = |id: &[f64], ood: &[f64]| EvalInput::new(id.to_vec(), ood.to_vec());
    let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
    let hand = [
        aupr_in(&m(&[3.0, 4.0], &[1.0, 2.0])).unwrap() == 1.0,
        (aupr_in(&m(&[0.5; 30], &[0.5; 70])).unwrap() - 0.30).abs() < 1e-12,
        (aupr_in(&m(&[3.0, 1.0], &[2.0])).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12,
        fpr95(&m(&[3.0, 4.0], &[1.0, 2.0])).unwrap() == 0.0,
        fpr95(&m(&[1.0; 20], &[1.0; 20])).unwrap() == 1.0,
        fpr95(&m(&hundred, &[5.5])).unwrap() == 0.0,
        fpr95(&m(&hundred, &[6.5])).unwrap() == 1.0,
    ];
    check(hand.iter().all(|&h| h), || format!("hand cases {hand:?}"))?;
    Ok(format!("200 random sets, max gap {gap:.2e}; 7 hand cases exact"))
}

fn score_kernels() -> Verdict {
    let e = label_energy(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
    let closed = [(e.data()[0] + 2f64.ln()).abs(), (e.data()[1] + (1.0 + 1f64.exp()).ln()).abs()];
    check(closed.iter().all(|&d| d < CLOSED_FORM_TOL), || format!("closed-form gaps {closed:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut pe_gap, mut lse_gap, mut shift_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let (n, q) = (rng.gen_range(1..8), rng.gen_range(2..7));
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect();
        let logits = Tensor::from_rows(&rows).unwrap();
        let g: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..2.0)).collect();
        let glc = GlcVector {
            g: g.clone(),
            mode: GlcMode::RawMean,
            means: vec![1.0 / q as f64; q],
            stds: vec![0.0; q],
        };
        let energy = label_energy(&logits);
        let pe = partial_energy(&energy, &glc).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..q {
                s += g[j] * (1.0 + row[j].exp()).ln();
            }
            pe_gap = pe_gap.max((pe.scores[i] - s).abs());
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            let en = baseline_score(&logits, ScoreKind::Energy, 1.0).unwrap();
            lse_gap = lse_gap.max((en.scores[i] - lse).abs());
        }
        let c = rng.gen_range(-10.0..10.0);
        let shifted = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
        for (kind, t) in [(ScoreKind::Msp, 1.0), (ScoreKind::Entropy, 1.0), (ScoreKind::Odin, 1000.0)] {
            let a = baseline_score(&logits, kind, t).unwrap();
            let b = baseline_score(&shifted, kind, t).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                shift_gap = shift_gap.max((x - y).abs());
            }
        }
        let a = pe_from_logits(&logits, &glc, EnergyInput::Probabilities).unwrap();
        let b = pe_from_logits(&shifted, &glc, EnergyInput::Probabilities).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            shift_gap = shift_gap.max((x - y).abs());
        }
    }
    check(pe_gap < ORACLE_TOL && lse_gap < ORACLE_TOL && shift_gap < SHIFT_TOL, || {
        format!("PE gap {pe_gap:.2e}, energy gap {lse_gap:.2e}, shift gap {shift_gap:.2e}")
    })?;
    Ok(format!(
        "closed forms within {CLOSED_FORM_TOL:e}; PE gap {pe_gap:.2e}, energy gap {lse_gap:.2e}, shift gap {shift_gap:.2e}"
    ))
}

fn aupr(report: &ScoreReport, arm: Arm, kind: ScoreKind, ood: OodKind) -> f64 {
    report.summary_row(arm, kind, Some(ood)).expect("summary row").aupr_in_mean
}

fn desk_benchmark() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.score.kinds = vec![ScoreKind::PartialEnergy, ScoreKind::Energy];
    cfg.save_artifacts = false;
    let d = &cfg.data;
    check(
        d.classes == 6 && d.n_train == 1200 && d.n_test == 400 && d.n_ood == 400 && d.partial_rate == 0.1,
        || "default data config drifted from the benchmark".into(),
    )?;
    check(
        cfg.ssfe.rotations == 4 && cfg.ssfe.alpha == 0.5 && cfg.seeds.len() == 5 && cfg.score.glc_mode == GlcMode::RawMean,
        || "default model config drifted from the benchmark".into(),
    )?;
    let started = Instant::now();
    let report = run_ablation(&cfg, AblationMode::Ssfe).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();

    let accs: Vec<f64> = report.seeds.iter().filter(|s| s.arm == Arm::WithSsfe).map(|s| s.id_accuracy).collect();
    let min_acc = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lines = vec![format!(
        "(a) ID accuracy mean {:.4}, min {min_acc:.4}, floor {ACCURACY_FLOOR}",
        report.id_accuracy_mean
    )];
    let a_ok = report.id_accuracy_mean >= ACCURACY_FLOOR;

    let (mut b_won, mut c_won) = (0, 0);
    for ood in &cfg.data.ood_kinds {
        let pe = aupr(&report, Arm::WithSsfe, ScoreKind::PartialEnergy, *ood);
        let en = aupr(&report, Arm::WithSsfe, ScoreKind::Energy, *ood);
        let without = aupr(&report, Arm::WithoutSsfe, ScoreKind::PartialEnergy, *ood);
        b_won += usize::from(pe >= en);
        c_won += usize::from(pe >= without);
        lines.push(format!(
            "    {ood:<16} PE {pe:.6}  energy {en:.6}  PE without pretext {without:.6}"
        ));
    }
    lines.push(format!("(b) PE >= energy on {b_won}/4 OOD kinds"));
    lines.push(format!("(c) with pretext >= without on {c_won}/4 OOD kinds"));
    lines.push(format!("wall {secs:.0}s of {BENCH_BUDGET_S:.0}s"));
    for l in &lines {
        println!("    {l}");
    }
    let ok = a_ok && b_won >= MIN_KINDS_WON && c_won >= MIN_KINDS_WON && secs < BENCH_BUDGET_S;
    let detail = format!(
        "accuracy {:.4}, PE>=energy {b_won}/4, pretext>=none {c_won}/4, {secs:.0}s",
        report.id_accuracy_mean
    );
    check(ok, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 120;
    cfg.data.n_test = 60;
    cfg.data.n_ood = 40;
    cfg.ssfe.epochs = 2;
    cfg.pll.epochs = 3;
    cfg.seeds = vec![3, 4];
    cfg.save_artifacts = false;
    let a = run_experiment(&cfg).map_err(|e| e.to_string())?.canonical_hash().map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?.canonical_hash().map_err(|e| e.to_string())?;
    check(a == b, || format!("{a} != {b}"))?;
    Ok(format!("canonical hash {}", &a[..16]))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 7] = [
        ("1 gradient suite", gradient_suite),
        ("2 loss and weight invariants", loss_invariants),
        ("3 confidence matrix invariants", confidence_invariants),
        ("4 metric oracles", metric_oracles),
        ("5 score kernels", score_kernels),
        ("6 desk benchmark", desk_benchmark),
        ("7 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var_os("PLOOD_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
