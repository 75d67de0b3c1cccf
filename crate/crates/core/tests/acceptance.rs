//! Acceptance checks for the whole back-end. Each criterion prints one
//! PASS/FAIL line; the process exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasv::decision::{
    asv_bayes_threshold, bayes_accept, calibrate, fuse_nonlinear, fuse_nonlinear_grad, CalibrationParams, FusionMode,
};
use sasv::io;
use sasv::loss::{bce, combined_loss_v1, combined_loss_v2, soft_adcf, BceInput, LossWeights, SoftAdcfConfig};
use sasv::metrics::{actual_adcf, adcf_at, eer, min_adcf, split_by_class};
use sasv::nn::{weighted_cosine_backward, weighted_cosine_score, Activation, Mlp, WeightedCosine};
use sasv::sim::{boundary_grid, simulate_embeddings, simulate_scores, EmbeddingSimConfig, GridSpec, ScoreSimConfig};
use sasv::train::{
    batch_gradient, prepare_trials, train_joint, train_score_fusion, Architecture, LossVariant, ModelParams,
    OptimizerKind, ScoreFusionConfig, TrainConfig, TrainData,
};
use sasv::{CostModel, EmbeddingStore, TrialLabel, TrialRecord};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn labels_cycle(n: usize) -> Vec<TrialLabel> {
    (0..n).map(|i| TrialLabel::ALL[i % 3]).collect()
}

/// Naive a-DCF at one threshold, counted independently of the library.
fn naive_adcf(trials: &[(f64, TrialLabel)], tau: f64, cm: &CostModel, normalized: bool) -> f64 {
    let mut n = [0usize; 3];
    let mut err = [0usize; 3];
    for &(s, l) in trials {
        let k = l as usize;
        n[k] += 1;
        let accepted = s >= tau;
        if (l == TrialLabel::TargetBonafide && !accepted) || (l != TrialLabel::TargetBonafide && accepted) {
            err[k] += 1;
        }
    }
    let r: Vec<f64> = (0..3).map(|k| err[k] as f64 / n[k] as f64).collect();
    let c =
        cm.c_miss_tar() * cm.pi_tar() * r[0] + cm.c_fa_non() * cm.pi_non() * r[1] + cm.c_fa_spf() * cm.pi_spf() * r[2];
    if normalized {
        c / (cm.c_miss_tar() * cm.pi_tar()).min(cm.c_fa_non() * cm.pi_non() + cm.c_fa_spf() * cm.pi_spf())
    } else {
        c
    }
}

fn random_trials(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<(f64, TrialLabel)> {
    labels_cycle(n)
        .into_iter()
        .map(|l| {
            let shift = match l {
                TrialLabel::TargetBonafide => 1.0,
                TrialLabel::NontargetBonafide => -0.5,
                TrialLabel::Spoof => 0.0,
            };
            let s: f64 = shift + rng.gen_range(-2.0..2.0);
            (if ties { (s * 4.0).round() / 4.0 } else { s }, l)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a: f64 = rng.gen_range(-50.0..50.0);
        let b: f64 = rng.gen_range(-50.0..50.0);
        worst = worst
            .max((fuse_nonlinear(a, b, 0.0) - a).abs())
            .max((fuse_nonlinear(a, b, 1.0) - b).abs())
            .max((fuse_nonlinear(a, a, 0.5) - a).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(t.elapsed(), 1.0)?;
    Ok(format!("max deviation {worst:e} over 10^4 pairs"))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let cm = CostModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..100 {
        let n = rng.gen_range(3..=300);
        let trials = random_trials(&mut rng, n, inst % 2 == 0);
        let normalized = inst % 3 != 0;
        let sweep = min_adcf(&trials, &cm, normalized).map_err(|e| e.to_string())?;
        // Anchors: every distinct score and +inf realise every achievable split.
        let mut anchors: Vec<f64> = trials.iter().map(|t| t.0).collect();
        anchors.push(f64::INFINITY);
        let anchor_min = anchors
            .iter()
            .map(|&tau| naive_adcf(&trials, tau, &cm, normalized))
            .fold(f64::INFINITY, f64::min);
        let lo = trials.iter().map(|t| t.0).fold(f64::INFINITY, f64::min) - 1.0;
        let hi = trials.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let dense_min = (0..=4000)
            .map(|i| naive_adcf(&trials, lo + (hi - lo) * i as f64 / 4000.0, &cm, normalized))
            .fold(f64::INFINITY, f64::min);
        ensure((sweep.min_adcf - anchor_min).abs() <= 1e-12, || {
            format!("instance {inst}: sweep {} vs brute force {anchor_min}", sweep.min_adcf)
        })?;
        ensure(dense_min >= sweep.min_adcf - 1e-12, || {
            format!("instance {inst}: dense grid {dense_min} below sweep {}", sweep.min_adcf)
        })?;
        let at_reported = naive_adcf(&trials, sweep.min_threshold, &cm, normalized);
        ensure((at_reported - sweep.min_adcf).abs() <= 1e-12, || {
            format!("instance {inst}: cost at reported threshold {at_reported}")
        })?;
    }
    let worked: Vec<(f64, TrialLabel)> = [
        (1.0, TrialLabel::TargetBonafide),
        (3.0, TrialLabel::TargetBonafide),
        (0.0, TrialLabel::NontargetBonafide),
        (2.0, TrialLabel::NontargetBonafide),
        (-1.0, TrialLabel::Spoof),
        (2.5, TrialLabel::Spoof),
    ]
    .to_vec();
    let u = min_adcf(&worked, &cm, false).map_err(|e| e.to_string())?.min_adcf;
    let n = min_adcf(&worked, &cm, true).map_err(|e| e.to_string())?.min_adcf;
    ensure((u - 0.45).abs() < 1e-12 && (n - 0.5).abs() < 1e-12, || {
        format!("worked instance gave {u} / {n}")
    })?;
    within(t.elapsed(), 5.0)?;
    Ok(format!(
        "100 instances agree; worked set {u} unnormalized / {n} normalized"
    ))
}

fn criterion_3() -> Outcome {
    let cm = CostModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..20 {
        let trials = random_trials(&mut rng, 300, false);
        let p = CalibrationParams::new(rng.gen_range(-5.0..5.0), rng.gen_range(0.05..20.0));
        let cal: Vec<(f64, TrialLabel)> = trials.iter().map(|&(s, l)| (calibrate(s, p), l)).collect();
        let stats = |t: &[(f64, TrialLabel)]| -> Result<(f64, f64, f64), String> {
            let m = min_adcf(t, &cm, true).map_err(|e| e.to_string())?.min_adcf;
            let [tar, non, spf] = split_by_class(t);
            let sv = eer(&tar, &non).map_err(|e| e.to_string())?.0;
            let sp = eer(&tar, &spf).map_err(|e| e.to_string())?.0;
            Ok((m, sv, sp))
        };
        let (a, b) = (stats(&trials)?, stats(&cal)?);
        ensure(
            a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits() && a.2.to_bits() == b.2.to_bits(),
            || format!("instance {inst}: {a:?} vs {b:?}"),
        )?;
    }
    Ok("min a-DCF, SV-EER and SPF-EER bit-identical on 20 instances".into())
}

/// Central-difference check, relative error ≤ 1e-4 with an absolute
/// fallback of 1e-7 near zero.
fn fd_check(what: &str, f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> Result<(), String> {
    let h = 1e-5;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        up[i] += h;
        let mut dn = x.to_vec();
        dn[i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let err = (fd - grad[i]).abs();
        if !(err <= 1e-7 || err <= 1e-4 * fd.abs().max(grad[i].abs())) {
            return Err(format!("{what}: component {i} analytic {} vs numeric {fd}", grad[i]));
        }
    }
    Ok(())
}

fn mlp_with(flat: &[f64], template: &Mlp) -> Mlp {
    let mut m = template.clone();
    m.load_flat(flat).unwrap();
    m
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let sim = simulate_embeddings(&EmbeddingSimConfig {
        n_speakers: 5,
        dim_asv: 4,
        dim_cm: 3,
        n_target: 6,
        n_nontarget: 6,
        n_spoof: 6,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let batch = prepare_trials(&sim.asv, &sim.cm, &sim.train).map_err(|e| e.to_string())?;
    let cost = CostModel::default();
    let mut checks = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = |e: sasv::Error| e.to_string();

        // MLP: parameters and input.
        let act = Activation::LeakyRelu { slope: 0.3 };
        let mlp = Mlp::random(5, &[6, 4], act, &mut rng).map_err(e)?;
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, tape) = mlp.forward(&x).map_err(e)?;
        let up = rng.gen_range(0.5..2.0);
        let (g, dx) = mlp.backward(&tape, up).map_err(e)?;
        let mut flat = Vec::new();
        mlp.flatten_into(&mut flat);
        let mut gflat = Vec::new();
        g.flatten_into(&mut gflat);
        fd_check(
            "mlp params",
            &|p| up * mlp_with(p, &mlp).score(&x).unwrap(),
            &flat,
            &gflat,
        )?;
        fd_check("mlp input", &|v| up * mlp.score(v).unwrap(), &x, &dx)?;

        // Weighted cosine: weights and both embeddings.
        let d = 6;
        let w = WeightedCosine {
            w: (0..d).map(|_| rng.gen_range(0.2..2.0)).collect(),
        };
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, ctape) = weighted_cosine_score(&w, &a, &b).map_err(e)?;
        let cg = weighted_cosine_backward(&w, &ctape, up).map_err(e)?;
        let score = |w: &[f64], a: &[f64], b: &[f64]| {
            up * weighted_cosine_score(&WeightedCosine { w: w.to_vec() }, a, b)
                .unwrap()
                .0
        };
        fd_check("wcos w", &|v| score(v, &a, &b), &w.w, &cg.w)?;
        fd_check("wcos enr", &|v| score(&w.w, v, &b), &a, &cg.e_enr)?;
        fd_check("wcos tst", &|v| score(&w.w, &a, v), &b, &cg.e_tst)?;

        // BCE on logits and probabilities.
        let z = rng.gen_range(-6.0..6.0);
        let y = rng.gen_bool(0.5);
        fd_check(
            "bce logit",
            &|v| bce(v[0], y, BceInput::Logit).0,
            &[z],
            &[bce(z, y, BceInput::Logit).1],
        )?;
        let p = rng.gen_range(0.05..0.95);
        fd_check(
            "bce prob",
            &|v| bce(v[0], y, BceInput::Probability).0,
            &[p],
            &[bce(p, y, BceInput::Probability).1],
        )?;

        // Nonlinear fusion with respect to both LLRs and logit ρ̃.
        let (la, lc, rl) = (
            rng.gen_range(-8.0..8.0),
            rng.gen_range(-8.0..8.0),
            rng.gen_range(-3.0..3.0),
        );
        let fg = fuse_nonlinear_grad(la, lc, rl);
        fd_check(
            "fusion",
            &|v| fuse_nonlinear_grad(v[0], v[1], v[2]).value,
            &[la, lc, rl],
            &[fg.d_asv, fg.d_cm, fg.d_rho_logit],
        )?;

        // Soft a-DCF including τ, and both combined losses.
        let n = 12;
        let labels = labels_cycle(n);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let la_v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lc_v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tau = rng.gen_range(-1.0..1.0);
        let alpha = rng.gen_range(0.5..3.0);
        let normalized = seed % 2 == 0;
        let cfg_at = |tau: f64| SoftAdcfConfig::new(cost, tau, alpha, normalized).unwrap();
        let sa = soft_adcf(&s, &labels, &cfg_at(tau)).map_err(e)?;
        let mut x = s.clone();
        x.push(tau);
        let mut g = sa.d_scores.clone();
        g.push(sa.d_tau);
        fd_check(
            "soft a-DCF",
            &|v| soft_adcf(&v[..n], &labels, &cfg_at(v[n])).unwrap().loss,
            &x,
            &g,
        )?;

        let wts = LossWeights {
            beta1: rng.gen_range(0.1..2.0),
            beta2: rng.gen_range(0.1..2.0),
            lambda1: rng.gen_range(0.1..2.0),
            lambda2: rng.gen_range(0.1..2.0),
            lambda3: rng.gen_range(0.1..2.0),
        };
        let v1 = combined_loss_v1(&s, &labels, &wts, &cfg_at(tau)).map_err(e)?;
        let mut g = v1.d_sasv.clone();
        g.push(v1.d_tau);
        fd_check(
            "loss V1",
            &|v| combined_loss_v1(&v[..n], &labels, &wts, &cfg_at(v[n])).unwrap().loss,
            &x,
            &g,
        )?;
        let v2 = combined_loss_v2(&la_v, &lc_v, &s, &labels, &wts, &cfg_at(tau)).map_err(e)?;
        let mut x2 = la_v.clone();
        x2.extend(&lc_v);
        x2.extend(&s);
        x2.push(tau);
        let mut g2 = v2.d_asv.clone();
        g2.extend(&v2.d_cm);
        g2.extend(&v2.d_sasv);
        g2.push(v2.d_tau);
        fd_check(
            "loss V2",
            &|v| {
                combined_loss_v2(
                    &v[..n],
                    &v[n..2 * n],
                    &v[2 * n..3 * n],
                    &labels,
                    &wts,
                    &cfg_at(v[3 * n]),
                )
                .unwrap()
                .loss
            },
            &x2,
            &g2,
        )?;

        // Full fused graph: heads, calibration, fusion, loss.
        let arch = [
            Architecture::MlpMlp,
            Architecture::CosineMlp,
            Architecture::WeightedCosineMlp,
        ][seed as usize % 3];
        let cfg = TrainConfig {
            architecture: arch,
            loss: if seed % 2 == 0 {
                LossVariant::V1
            } else {
                LossVariant::V2
            },
            fusion: if seed % 4 < 2 {
                FusionMode::Nonlinear
            } else {
                FusionMode::Linear
            },
            hidden: vec![4, 3],
            activation: Activation::Tanh,
            seed,
            weights: wts,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 4, 3).map_err(e)?;
        params.asv_calib = CalibrationParams::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0));
        params.cm_calib = CalibrationParams::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0));
        params.tau = rng.gen_range(-1.0..1.0);
        params.rho_logit = rng.gen_range(-2.0..2.0);
        let bg = batch_gradient(&params, &cfg, &batch).map_err(e)?;
        let flat = params.flatten();
        let loss_at = |v: &[f64]| {
            let mut q = params.clone();
            q.load_flat(v).unwrap();
            batch_gradient(&q, &cfg, &batch).unwrap().loss.loss
        };
        fd_check(&format!("full graph {arch:?}"), &loss_at, &flat, &bg.grad)?;
        checks += 1;
    }
    within(t.elapsed(), 30.0)?;
    Ok(format!(
        "{checks} seeds, every backward within tolerance, {:.1} s",
        t.elapsed().as_secs_f64()
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 100 {
        let tau = rng.gen_range(-1.0..1.0);
        let trials: Vec<(f64, TrialLabel)> = random_trials(&mut rng, 90, false)
            .into_iter()
            .filter(|(s, _)| (s - tau).abs() >= 0.05)
            .collect();
        let labels: Vec<TrialLabel> = trials.iter().map(|t| t.1).collect();
        if TrialLabel::ALL.iter().any(|l| !labels.contains(l)) {
            continue;
        }
        let scores: Vec<f64> = trials.iter().map(|t| t.0).collect();
        for normalized in [false, true] {
            let cm = CostModel::default();
            let soft = soft_adcf(
                &scores,
                &labels,
                &SoftAdcfConfig::new(cm, tau, 1e3, normalized).unwrap(),
            )
            .map_err(|e| e.to_string())?
            .loss;
            let hard = adcf_at(&trials, tau, &cm, normalized).map_err(|e| e.to_string())?;
            worst = worst.max((soft - hard).abs());
        }
        instances += 1;
    }
    ensure(worst <= 1e-6, || format!("max |soft - hard| = {worst:e}"))?;
    Ok(format!("max |soft - hard| = {worst:e} on 100 instances"))
}

fn bayes_rule_adcf(cfg: &ScoreSimConfig, eval: &[sasv::sim::SimScore], cm: &CostModel) -> f64 {
    let mut n = [0usize; 3];
    let mut err = [0usize; 3];
    for s in eval {
        let (a, c) = cfg.true_llrs([s.llr_asv, s.llr_cm]);
        let accept = bayes_accept(a, c, cm).unwrap();
        let k = s.label as usize;
        n[k] += 1;
        if accept != s.label.is_target() {
            err[k] += 1;
        }
    }
    let r: Vec<f64> = (0..3).map(|k| err[k] as f64 / n[k] as f64).collect();
    let raw =
        cm.c_miss_tar() * cm.pi_tar() * r[0] + cm.c_fa_non() * cm.pi_non() * r[1] + cm.c_fa_spf() * cm.pi_spf() * r[2];
    raw / cm.default_cost()
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let cm = CostModel::default();
    let mut wins = 0;
    let mut rows = Vec::new();
    let mut band_failures = Vec::new();
    for seed in 0..5u64 {
        let dev_cfg = ScoreSimConfig {
            seed: 2 * seed,
            ..ScoreSimConfig::default()
        };
        let eval_cfg = ScoreSimConfig {
            seed: 2 * seed + 1,
            ..ScoreSimConfig::default()
        };
        let dev = simulate_scores(&dev_cfg).map_err(|e| e.to_string())?;
        let eval = simulate_scores(&eval_cfg).map_err(|e| e.to_string())?;
        let dev_a: Vec<f64> = dev.iter().map(|s| s.llr_asv).collect();
        let dev_c: Vec<f64> = dev.iter().map(|s| s.llr_cm).collect();
        let dev_l: Vec<TrialLabel> = dev.iter().map(|s| s.label).collect();
        let fit = |mode| {
            train_score_fusion(
                &dev_a,
                &dev_c,
                &dev_l,
                &ScoreFusionConfig {
                    mode,
                    ..Default::default()
                },
            )
        };
        let nonlinear = fit(FusionMode::Nonlinear).map_err(|e| e.to_string())?;
        let linear = fit(FusionMode::Linear).map_err(|e| e.to_string())?;
        let eval_min = |m: &sasv::train::ScoreFusionModel| -> Result<f64, String> {
            let trials: Vec<(f64, TrialLabel)> = eval.iter().map(|s| (m.score(s.llr_asv, s.llr_cm), s.label)).collect();
            Ok(min_adcf(&trials, &cm, true).map_err(|e| e.to_string())?.min_adcf)
        };
        let (nl, li) = (eval_min(&nonlinear)?, eval_min(&linear)?);
        let bayes = bayes_rule_adcf(&eval_cfg, &eval, &cm);
        if nl < li {
            wins += 1;
        }
        for (name, v) in [("nonlinear", nl), ("linear", li)] {
            if (v - bayes).abs() > 0.02 {
                band_failures.push(format!("seed {seed} {name} {v:.4} vs Bayes {bayes:.4}"));
            }
        }
        rows.push(format!(
            "seed {seed}: nonlinear {nl:.4} (rho~ {:.3}) linear {li:.4} Bayes {bayes:.4}",
            nonlinear.fusion.rho_tilde
        ));
    }
    let detail = rows.join("; ");
    ensure(wins >= 4, || format!("nonlinear better on {wins}/5 seeds; {detail}"))?;
    ensure(band_failures.is_empty(), || {
        format!(
            "outside the 0.02 band of the Bayes rule: {}; {detail}",
            band_failures.join(", ")
        )
    })?;
    within(t.elapsed(), 120.0)?;
    Ok(format!("nonlinear better on {wins}/5; {detail}"))
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let sim = simulate_embeddings(&EmbeddingSimConfig {
        spoof_proximity: 1.0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data = TrainData {
        asv: &sim.asv,
        cm: &sim.cm,
        train: &sim.train,
        dev: &sim.dev,
    };
    let cfg = TrainConfig {
        architecture: Architecture::WeightedCosineMlp,
        loss: LossVariant::V1,
        optimizer: OptimizerKind::Sgd,
        epochs: 100,
        ..TrainConfig::default()
    };
    let out = train_joint(&cfg, &data).map_err(|e| e.to_string())?;
    let joint = out.best.dev_min_adcf;

    // Calibrated cosine ASV alone: nonlinear fusion with ρ̃ = 0.
    let dev = prepare_trials(&sim.asv, &sim.cm, &sim.dev).map_err(|e| e.to_string())?;
    let cos: Vec<f64> = dev
        .iter()
        .map(|t| sasv::nn::cosine_score(t.enroll, t.test_asv).unwrap())
        .collect();
    let (s, y): (Vec<f64>, Vec<bool>) = cos
        .iter()
        .zip(&dev)
        .filter_map(|(&c, t)| t.label.label_maps().asv.map(|y| (c, y)))
        .unzip();
    let calib = sasv::decision::fit_calibration(&s, &y).map_err(|e| e.to_string())?;
    let asv_only: Vec<(f64, TrialLabel)> = cos
        .iter()
        .zip(&dev)
        .map(|(&c, t)| (fuse_nonlinear(calib.apply(c), 0.0, 0.0), t.label))
        .collect();
    let asv_min = min_adcf(&asv_only, &cfg.cost, true)
        .map_err(|e| e.to_string())?
        .min_adcf;
    let detail = format!(
        "joint dev min a-DCF {joint:.4} (epoch {}), cosine ASV alone {asv_min:.4}, {:.1} s",
        out.best.epoch,
        t.elapsed().as_secs_f64()
    );
    ensure(joint <= 0.02, || format!("joint training too weak: {detail}"))?;
    ensure(asv_min >= 0.5, || format!("ASV alone unexpectedly good: {detail}"))?;
    within(t.elapsed(), 300.0)?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let cm = CostModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for inst in 0..200 {
        let dev = random_trials(&mut rng, 150, inst % 2 == 0);
        let eval = random_trials(&mut rng, 150, inst % 2 == 0);
        let normalized = inst % 3 != 0;
        let tau = min_adcf(&dev, &cm, normalized)
            .map_err(|e| e.to_string())?
            .min_threshold;
        if !tau.is_finite() {
            continue;
        }
        let act = actual_adcf(&eval, tau, &cm, normalized).map_err(|e| e.to_string())?;
        let min = min_adcf(&eval, &cm, normalized).map_err(|e| e.to_string())?.min_adcf;
        ensure(act >= min, || format!("instance {inst}: actual {act} < min {min}"))?;
        checked += 1;
    }
    ensure(checked >= 150, || {
        format!("only {checked} instances had a finite dev threshold")
    })?;
    Ok(format!("actual >= min on all {checked} instances"))
}

fn random_id(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..12);
    (0..len)
        .map(|_| {
            let c = rng.gen_range(0..40u8);
            match c {
                0..=25 => (b'a' + c) as char,
                26..=35 => (b'0' + c - 26) as char,
                36 => '_',
                37 => '-',
                38 => '.',
                _ => 'é',
            }
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let e = |e: sasv::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // Determinism of training logs, checkpoints and reports.
    let sim = simulate_embeddings(&EmbeddingSimConfig {
        n_speakers: 6,
        dim_asv: 6,
        dim_cm: 4,
        n_target: 30,
        n_nontarget: 30,
        n_spoof: 30,
        seed: 4,
        ..Default::default()
    })
    .map_err(e)?;
    let data = TrainData {
        asv: &sim.asv,
        cm: &sim.cm,
        train: &sim.train,
        dev: &sim.dev,
    };
    let cfg = TrainConfig {
        hidden: vec![16, 8],
        batch_size: 24,
        epochs: 4,
        lr: 0.05,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = || -> Result<(String, String, String), String> {
        let out = train_joint(&cfg, &data).map_err(e)?;
        let log: String = out
            .log
            .iter()
            .map(|l| serde_json::to_string(l).unwrap() + "\n")
            .collect();
        let ckpt = io::checkpoint_to_json(&out.best, Some(&cfg)).map_err(e)?;
        let dev = prepare_trials(&sim.asv, &sim.cm, &sim.dev).map_err(e)?;
        let scored: Vec<(f64, TrialLabel)> = out
            .best
            .params
            .score_trials(&dev)
            .map_err(e)?
            .iter()
            .zip(&dev)
            .map(|(s, t)| (s.s_sasv, t.label))
            .collect();
        let report =
            io::to_json(&io::EvalReport::compute(&scored, &cfg.cost, true, Some(0.0)).map_err(e)?).map_err(e)?;
        Ok((log, ckpt, report))
    };
    let first = run()?;
    ensure(first == run()?, || {
        "training or report output differs between identical runs".into()
    })?;

    // Round trips.
    let records: Vec<TrialRecord> = (0..1000)
        .map(|i| TrialRecord::new(random_id(&mut rng), random_id(&mut rng), TrialLabel::ALL[i % 3]).unwrap())
        .collect();
    let proto = io::format_protocol(&records);
    let back = io::parse_protocol(&proto).map_err(e)?.trials;
    ensure(back == records && io::format_protocol(&back) == proto, || {
        "protocol round trip".into()
    })?;

    let rows: Vec<io::ScoreRow> = records
        .iter()
        .map(|r| io::ScoreRow {
            trial: r.clone(),
            score: rng.gen_range(-1e4..1e4) * 10f64.powi(rng.gen_range(-20..20)),
        })
        .collect();
    let scores = io::format_scores(&rows);
    let back = io::parse_scores(&scores).map_err(e)?;
    ensure(
        back.iter()
            .zip(&rows)
            .all(|(a, b)| a.score.to_bits() == b.score.to_bits())
            && io::format_scores(&back) == scores,
        || "score round trip".into(),
    )?;

    let mut store = EmbeddingStore::new(7).map_err(e)?;
    for i in 0..50 {
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect();
        store.insert(format!("{}-{i}", random_id(&mut rng)), v).map_err(e)?;
    }
    let bin = io::encode_embeddings(&store).map_err(e)?;
    let decoded = io::decode_embeddings(&bin).map_err(e)?;
    ensure(
        decoded == store && io::encode_embeddings(&decoded).map_err(e)? == bin,
        || "embedding round trip".into(),
    )?;

    let (ck, cfg_back) = io::checkpoint_from_json(&first.1).map_err(e)?;
    ensure(
        io::checkpoint_to_json(&ck, cfg_back.as_ref()).map_err(e)? == first.1,
        || "checkpoint round trip".into(),
    )?;

    let det: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 / 99.0, 1.0 - i as f64 / 99.0)).collect();
    let det_text = io::format_det(&det);
    ensure(
        io::format_det(&io::parse_det(&det_text).map_err(e)?) == det_text,
        || "DET round trip".into(),
    )?;
    let grid = boundary_grid(
        &ck.params.fusion_config(),
        &cfg.cost,
        &GridSpec {
            steps_asv: 9,
            steps_cm: 7,
            ..Default::default()
        },
    )
    .map_err(e)?;
    let grid_text = io::format_grid(&grid);
    ensure(io::parse_grid(&grid_text).map_err(e)? == grid, || {
        "grid round trip".into()
    })?;

    // Truncation fuzzing: 1000 cases across formats, no panics, structured errors.
    let ckpt_text = first.1.clone();
    let mut errors = 0;
    let prev_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let fuzz = panic::catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
        for case in 0..1000 {
            match case % 4 {
                0 => {
                    let cut = rng.gen_range(0..bin.len());
                    ensure(io::decode_embeddings(&bin[..cut]).is_err(), || {
                        format!("embedding cut at {cut} accepted")
                    })?;
                    errors += 1;
                }
                1 => {
                    // Any cut before the closing brace leaves invalid JSON.
                    let end = ckpt_text.rfind('}').unwrap();
                    let cut = rng.gen_range(0..end);
                    let cut = (0..=cut).rev().find(|&c| ckpt_text.is_char_boundary(c)).unwrap();
                    ensure(io::checkpoint_from_json(&ckpt_text[..cut]).is_err(), || {
                        format!("checkpoint cut at {cut} accepted")
                    })?;
                    errors += 1;
                }
                2 => {
                    let cut = rng.gen_range(0..proto.len());
                    let cut = (0..=cut).rev().find(|&c| proto.is_char_boundary(c)).unwrap();
                    match io::parse_protocol(&proto[..cut]) {
                        Ok(p) => ensure(p.trials.len() <= records.len(), || "protocol grew".into())?,
                        Err(_) => errors += 1,
                    }
                }
                _ => {
                    let cut = rng.gen_range(0..scores.len());
                    let cut = (0..=cut).rev().find(|&c| scores.is_char_boundary(c)).unwrap();
                    match io::parse_scores(&scores[..cut]) {
                        Ok(r) => ensure(r.len() <= rows.len(), || "score file grew".into())?,
                        Err(_) => errors += 1,
                    }
                }
            }
        }
        Ok(())
    }));
    panic::set_hook(prev_hook);
    match fuzz {
        Ok(r) => r?,
        Err(_) => return Err("a reader panicked on truncated input".into()),
    }
    Ok(format!(
        "identical reruns, all formats round-trip, 1000 truncations without panic ({errors} structured errors)"
    ))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..10_000 {
        let pi = rng.gen_range(0.01..0.99);
        let cm = CostModel::new(
            rng.gen_range(0.1..10.0),
            rng.gen_range(0.1..50.0),
            rng.gen_range(0.0..50.0),
            pi,
            1.0 - pi,
            0.0,
        )
        .map_err(|e| e.to_string())?;
        let a = rng.gen_range(-20.0..20.0);
        let c = rng.gen_range(-20.0..20.0);
        let thr = asv_bayes_threshold(&cm).map_err(|e| e.to_string())?;
        let got = bayes_accept(a, c, &cm).map_err(|e| e.to_string())?;
        ensure(got == (a > thr), || {
            format!("input {i}: llr {a} threshold {thr} gave {got}")
        })?;
    }
    Ok("10^4 random inputs agree exactly".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("fusion identities", criterion_1),
        ("min a-DCF oracle equivalence", criterion_2),
        ("calibration/rank invariance", criterion_3),
        ("gradient suite", criterion_4),
        ("soft to hard convergence", criterion_5),
        ("nonlinear vs linear fusion trend", criterion_6),
        ("end-to-end joint training", criterion_7),
        ("actual >= min", criterion_8),
        ("determinism and I/O", criterion_9),
        ("Bayes policy reduction", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {:>2} {name}: PASS [{secs:.2} s] {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL [{secs:.2} s] {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
