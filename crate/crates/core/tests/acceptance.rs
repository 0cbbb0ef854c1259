//! End-to-end acceptance checks on the synthetic task. Each test prints one
//! `PASS`/`FAIL` line with the measured values, then asserts.
//!
//! Trained artifacts are shared between tests: the dataset and pretrained
//! classifiers are built once, and each (architecture, mode, α) sanitizer is
//! trained at most once, whichever test asks for it first.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use cpriv_core::data::{generate_dataset, Dataset, DatasetSpec, Renderer};
use cpriv_core::evaluation::{attack_retrain, collect_posteriors, conditional_breakdown, AttackBudget, Posteriors};
use cpriv_core::models::{Classifier, SanitizerKind, SanitizerModel};
use cpriv_core::objectives::{
    binary_cross_entropy, binary_cross_entropy_grad, kl_divergence, kl_divergence_grad, privacy_loss,
    sanitization_loss, LossConfig, DEFAULT_EPSILON,
};
use cpriv_core::service::{serve, simulate_capture, CaptureConfig, EntityModels, ServerConfig};
use cpriv_core::training::{pretrain_classifiers, train, PretrainConfig, TrainConfig, TrainMode, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHAS: [f64; 5] = [0.0, 0.05, 0.2, 0.5, 0.8];
/// Training samples used by the trained-model checks; the test split keeps
/// its default size.
const TRAIN_SIZE: usize = 2048;
const PLUG_AND_PLAY_EPOCHS: usize = 6;
/// Adversarial epochs alternate, so this gives the sanitizer six epochs too.
const ADVERSARIAL_EPOCHS: usize = 12;
const EVAL_SEED: u64 = 2718;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // written straight to stderr so the line shows even when output is captured
    let _ = writeln!(std::io::stderr(), "[criterion {criterion}] {verdict} {name}: {detail}");
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct World {
    spec: DatasetSpec,
    train: Dataset,
    test: Dataset,
    utility: Classifier,
    privacy: Classifier,
    raw: Posteriors,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let spec = DatasetSpec {
            train_size: TRAIN_SIZE,
            ..DatasetSpec::default()
        };
        let (train, test) = generate_dataset(&spec).unwrap();
        let (utility, privacy, _) = pretrain_classifiers(&train, spec.num_subjects, &PretrainConfig::default()).unwrap();
        let raw = collect_posteriors(None, &utility, &utility, &privacy, spec.prior, &test, EVAL_SEED).unwrap();
        World {
            spec,
            train,
            test,
            utility,
            privacy,
            raw,
        }
    })
}

struct Trained {
    outcome: TrainOutcome,
    elapsed: Duration,
    posteriors: Posteriors,
}

type CellKey = (&'static str, &'static str, u64);

fn cell(kind: SanitizerKind, mode: TrainMode, alpha: f64) -> Arc<Trained> {
    static CELLS: OnceLock<Mutex<HashMap<CellKey, Arc<OnceLock<Arc<Trained>>>>>> = OnceLock::new();
    let slot = {
        let mut map = CELLS.get_or_init(Default::default).lock().unwrap();
        Arc::clone(map.entry((kind.name(), mode.name(), alpha.to_bits())).or_default())
    };
    Arc::clone(slot.get_or_init(|| Arc::new(train_cell(kind, mode, alpha))))
}

fn train_cell(kind: SanitizerKind, mode: TrainMode, alpha: f64) -> Trained {
    let w = world();
    let renderer = Renderer::new(&w.spec).unwrap();
    let seed = 100 + (alpha * 100.0).round() as u64;
    let sanitizer = SanitizerModel::new(kind, &renderer, seed);
    let cfg = TrainConfig {
        mode,
        alpha,
        epochs: match mode {
            TrainMode::Adversarial => ADVERSARIAL_EPOCHS,
            _ => PLUG_AND_PLAY_EPOCHS,
        },
        seed,
        ..TrainConfig::default()
    };
    // one cell at a time, so the measured wall time is the cell's own
    static TRAINING: Mutex<()> = Mutex::new(());
    let guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = train(sanitizer, &w.utility, &w.privacy, w.spec.prior, &w.train, &cfg).unwrap();
    let elapsed = start.elapsed();
    drop(guard);
    let posteriors = collect_posteriors(
        Some(&outcome.sanitizer),
        &w.utility,
        &outcome.utility,
        &outcome.privacy,
        w.spec.prior,
        &w.test,
        EVAL_SEED,
    )
    .unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "  trained {} {} α={alpha} in {:.0?}",
        kind.name(),
        mode.name(),
        elapsed
    );
    Trained {
        outcome,
        elapsed,
        posteriors,
    }
}

fn softmax64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Chain a probability-space gradient through the softmax.
fn through_softmax(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn criterion_1_loss_oracles() {
    let eps = DEFAULT_EPSILON;
    let mut worst_closed: f64 = 0.0;
    let ln2 = binary_cross_entropy(&[1.0, 0.0], &[0.5, 0.5], eps).unwrap();
    worst_closed = worst_closed.max((ln2 - std::f64::consts::LN_2).abs());
    let kl_prior = kl_divergence(&[0.625, 0.375], &[0.5, 0.5], eps).unwrap();
    let closed = 0.625 * 1.25f64.ln() + 0.375 * 0.75f64.ln();
    worst_closed = worst_closed.max((kl_prior - closed).abs());
    let kl_uniform_from_point = kl_divergence(&[0.5, 0.5], &[0.5, 0.5], eps).unwrap();
    worst_closed = worst_closed.max(kl_uniform_from_point.abs());
    let pl = privacy_loss(&[0.0, 1.0], &[0.5, 0.5], &[0.5, 0.5], eps).unwrap();
    worst_closed = worst_closed.max((pl - 2.0 * std::f64::consts::LN_2).abs());

    // the sanitization loss is affine in α
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_affine: f64 = 0.0;
    for _ in 0..20 {
        let u_raw = softmax64(&(0..16).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let u_san = softmax64(&(0..16).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let p_san = softmax64(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let l = |a: f64| sanitization_loss(&u_raw, &u_san, &[0.625, 0.375], &p_san, &LossConfig::new(a)).unwrap();
        let (l0, l1) = (l(0.0), l(1.0));
        for a in [0.05, 0.2, 0.5, 0.8] {
            worst_affine = worst_affine.max((l(a) - ((1.0 - a) * l0 + a * l1)).abs());
        }
    }

    // analytic logit gradients against central differences, 50 instances
    let h = 1e-5;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(2..20);
        let alpha = rng.gen_range(0.0..1.0);
        let u_raw = softmax64(&(0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let zu: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zp: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zr: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = if rng.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] };
        let prior = [0.625, 0.375];
        let cfg = LossConfig::new(alpha);

        let san = |zu: &[f64], zp: &[f64]| sanitization_loss(&u_raw, &softmax64(zu), &prior, &softmax64(zp), &cfg).unwrap();
        let pu = softmax64(&zu);
        let pp = softmax64(&zp);
        let gu: Vec<f64> = kl_divergence_grad(&u_raw, &pu, eps).iter().map(|g| g * (1.0 - alpha)).collect();
        let gp: Vec<f64> = kl_divergence_grad(&prior, &pp, eps).iter().map(|g| g * alpha).collect();
        let analytic_u = through_softmax(&pu, &gu);
        let analytic_p = through_softmax(&pp, &gp);
        for i in 0..k {
            let (mut a, mut b) = (zu.clone(), zu.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (san(&a, &zp) - san(&b, &zp)) / (2.0 * h);
            worst_grad = worst_grad.max(relative_error(analytic_u[i], fd));
        }
        for i in 0..2 {
            let (mut a, mut b) = (zp.clone(), zp.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (san(&zu, &a) - san(&zu, &b)) / (2.0 * h);
            worst_grad = worst_grad.max(relative_error(analytic_p[i], fd));
        }

        let priv_loss = |zr: &[f64], zp: &[f64]| privacy_loss(&y, &softmax64(zr), &softmax64(zp), eps).unwrap();
        let pr = softmax64(&zr);
        let analytic_r = through_softmax(&pr, &binary_cross_entropy_grad(&y, &pr, eps));
        let analytic_s = through_softmax(&pp, &binary_cross_entropy_grad(&y, &pp, eps));
        for i in 0..2 {
            let (mut a, mut b) = (zr.clone(), zr.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (priv_loss(&a, &zp) - priv_loss(&b, &zp)) / (2.0 * h);
            worst_grad = worst_grad.max(relative_error(analytic_r[i], fd));
            let (mut a, mut b) = (zp.clone(), zp.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (priv_loss(&zr, &a) - priv_loss(&zr, &b)) / (2.0 * h);
            worst_grad = worst_grad.max(relative_error(analytic_s[i], fd));
        }
    }

    let pass = worst_closed < 1e-6 && worst_affine < 1e-9 && worst_grad < 1e-3;
    report(
        1,
        "loss oracles",
        pass,
        &format!(
            "closed-form max err {worst_closed:.2e} (< 1e-6), affinity max err {worst_affine:.2e}, \
             gradient max rel err {worst_grad:.2e} (< 1e-3) over 50 instances"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_alpha_zero_fidelity() {
    let w = world();
    let c = cell(SanitizerKind::Deterministic, TrainMode::PlugAndPlay, 0.0);
    let ukl = mean(&c.posteriors.utility_kl());
    let top1 = c.posteriors.topk(1, EVAL_SEED).unwrap();
    let raw_top1 = w.raw.topk(1, EVAL_SEED).unwrap();
    let pass = ukl < 0.05 && (top1 - raw_top1).abs() <= 0.02 && c.elapsed <= Duration::from_secs(300);
    report(
        2,
        "α=0 fidelity",
        pass,
        &format!(
            "utility KL {ukl:.4} nats (< 0.05), top-1 {top1:.3} vs raw {raw_top1:.3} (within 0.02), \
             trained in {:.0?} (≤ 5 min)",
            c.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_prior_convergence() {
    let w = world();
    let target = w.spec.prior[1];
    let mut pass = true;
    let mut details = Vec::new();
    for kind in [SanitizerKind::Deterministic, SanitizerKind::Stochastic] {
        let c = cell(kind, TrainMode::Adversarial, 0.8);
        let pkl = mean(&c.posteriors.privacy_kl(w.spec.prior));
        let top3 = c.posteriors.topk(3, EVAL_SEED).unwrap();
        let b = conditional_breakdown(
            Some(&c.outcome.sanitizer),
            &c.outcome.privacy,
            w.spec.prior,
            &w.test,
            Some(0.8),
            EVAL_SEED,
        )
        .unwrap();
        let medians: Vec<f64> = b.groups.iter().map(|g| g.summary.median).collect();
        let ok = pkl < 0.05
            && b.groups.len() == 2
            && medians.iter().all(|m| (m - target).abs() <= 0.1)
            && top3 >= 0.70
            && c.elapsed <= Duration::from_secs(900);
        pass &= ok;
        details.push(format!(
            "{}: privacy KL {pkl:.4} (< 0.05), medians {:.3}/{:.3} (target {target:.3} ± 0.1), top-3 {top3:.3} (≥ 0.70), {:.0?}",
            kind.name(),
            medians.first().copied().unwrap_or(f64::NAN),
            medians.get(1).copied().unwrap_or(f64::NAN),
            c.elapsed
        ));
    }
    report(3, "prior convergence at α=0.8", pass, &details.join("; "));
    assert!(pass);
}

fn monotone(values: &[f64], increasing: bool, slack: f64) -> bool {
    values.windows(2).all(|p| {
        if increasing {
            p[1] >= p[0] - slack
        } else {
            p[1] <= p[0] + slack
        }
    })
}

#[test]
fn criterion_4_monotone_tradeoff() {
    let w = world();
    let mut pass = true;
    let mut details = Vec::new();
    for mode in [TrainMode::PlugAndPlay, TrainMode::Adversarial] {
        let cells: Vec<_> = ALPHAS
            .iter()
            .map(|&a| cell(SanitizerKind::Deterministic, mode, a))
            .collect();
        let pkl: Vec<f64> = cells.iter().map(|c| mean(&c.posteriors.privacy_kl(w.spec.prior))).collect();
        let ukl: Vec<f64> = cells.iter().map(|c| mean(&c.posteriors.utility_kl())).collect();
        let ok = monotone(&pkl, false, 0.02) && monotone(&ukl, true, 0.02);
        pass &= ok;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        details.push(format!(
            "deterministic {}: privacy KL [{}], utility KL [{}]",
            mode.name(),
            fmt(&pkl),
            fmt(&ukl)
        ));
    }
    report(4, "monotone trade-off (slack 0.02 nats)", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn criterion_5_adversarial_robustness() {
    let w = world();
    let budget = AttackBudget {
        epochs: PretrainConfig::default().epochs,
        batch_size: PretrainConfig::default().batch_size,
        lr: PretrainConfig::default().lr,
        ..AttackBudget::default()
    };
    let attack = |mode| {
        let c = cell(SanitizerKind::Deterministic, mode, 0.8);
        attack_retrain(&c.outcome.sanitizer, &c.outcome.privacy, w.spec.prior, &w.train, &w.test, &budget).unwrap()
    };
    let adv = attack(TrainMode::Adversarial);
    let pnp = attack(TrainMode::PlugAndPlay);
    let bound = w.spec.prior[0].max(w.spec.prior[1]) + 0.05;
    let pass = adv.accuracy_after <= bound && pnp.accuracy_after > adv.accuracy_after;
    report(
        5,
        "adversarial robustness (deterministic, α=0.8)",
        pass,
        &format!(
            "retrained attacker accuracy: adversarial {:.3} (≤ {bound:.3}), plug-and-play {:.3} (must exceed adversarial)",
            adv.accuracy_after, pnp.accuracy_after
        ),
    );
    assert!(pass);
}

fn raw_accuracy(model: &Classifier, data: &Dataset) -> f64 {
    let w = world();
    collect_posteriors(None, &w.utility, &w.utility, model, w.spec.prior, data, EVAL_SEED)
        .unwrap()
        .privacy_accuracy()
}

#[test]
fn criterion_6_raw_data_preservation() {
    let w = world();
    let before = raw_accuracy(&w.privacy, &w.test);
    let utility_hash = w.utility.param_hash();
    let mut pass = true;
    let mut details = Vec::new();
    for kind in [SanitizerKind::Deterministic, SanitizerKind::Stochastic] {
        let c = cell(kind, TrainMode::Adversarial, 0.8);
        let after = raw_accuracy(&c.outcome.privacy, &w.test);
        let ok = (after - before).abs() <= 0.02;
        pass &= ok;
        details.push(format!("{} privacy raw accuracy {before:.3} → {after:.3}", kind.name()));
    }
    for mode in [TrainMode::PlugAndPlay, TrainMode::Adversarial] {
        let c = cell(SanitizerKind::Deterministic, mode, 0.8);
        let same = c.outcome.utility.param_hash() == utility_hash;
        pass &= same;
        details.push(format!("utility hash unchanged in {}: {same}", mode.name()));
    }
    pass &= w.utility.param_hash() == utility_hash;
    report(6, "raw-data preservation", pass, &details.join("; "));
    assert!(pass);
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_7_loss_evolution() {
    let mut pass = true;
    let mut details = Vec::new();
    for kind in [SanitizerKind::Deterministic, SanitizerKind::Stochastic] {
        for alpha in [0.5, 0.8] {
            let c = cell(kind, TrainMode::Adversarial, alpha);
            let lp = c.outcome.log.loss_p();
            let ls = c.outcome.log.loss_s();
            let q = |v: &[f64]| (v.len() / 4).max(1);
            let (p_first, p_last) = (mean(&lp[..q(&lp)]), mean(&lp[lp.len() - q(&lp)..]));
            let (s_first, s_last) = (variance(&ls[..q(&ls)]), variance(&ls[ls.len() - q(&ls)..]));
            let ok = p_last >= p_first && s_last < s_first;
            pass &= ok;
            details.push(format!(
                "{} α={alpha}: Loss_P quarter means {p_first:.4} → {p_last:.4}, Loss_S quarter variances {s_first:.2e} → {s_last:.2e}",
                kind.name()
            ));
        }
    }
    report(7, "loss evolution (adversarial, α ≥ 0.5)", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn criterion_8_service_equivalence() {
    let w = world();
    let c = cell(SanitizerKind::Deterministic, TrainMode::Adversarial, 0.8);
    let models = Arc::new(EntityModels::new(w.utility.clone(), c.outcome.privacy.clone()).unwrap());
    let server = serve(
        &ServerConfig {
            port: 0,
            topk: w.spec.num_subjects,
            ..ServerConfig::default()
        },
        Arc::clone(&models),
    )
    .unwrap();
    let cfg = CaptureConfig {
        port: server.local_addr().port(),
        limit: Some(100),
        seed: 5,
        ..CaptureConfig::default()
    };
    let session = simulate_capture(&w.test, Some(&c.outcome.sanitizer), w.spec.prior, &cfg);
    let offline = collect_posteriors(
        Some(&c.outcome.sanitizer),
        &w.utility,
        &w.utility,
        &c.outcome.privacy,
        w.spec.prior,
        &w.test.take(100),
        5,
    )
    .unwrap();
    let k = w.spec.num_subjects;
    let mut max_diff: f32 = 0.0;
    for f in &session.frames {
        let i = f.index;
        for &(subject, p) in &f.result.utility_topk {
            max_diff = max_diff.max((p - offline.utility_san[i * k + subject]).abs());
        }
        for (j, p) in f.result.privacy_probs.iter().enumerate() {
            max_diff = max_diff.max((p - offline.privacy_san[i * 2 + j]).abs());
        }
    }
    let equivalent = session.error.is_none() && session.frames.len() == 100 && max_diff <= 1e-5;

    let fuzz_ok = fuzz_server(&server, 1000);
    let pass = equivalent && fuzz_ok && server.is_running();
    report(
        8,
        "service equivalence",
        pass,
        &format!(
            "{} frames, max |online − offline| {max_diff:.2e} (≤ 1e-5); 1000 fuzzed messages, server alive: {}",
            session.frames.len(),
            fuzz_ok && server.is_running()
        ),
    );
    assert!(pass);
}

/// Throw random messages at the server; every one must get exactly one reply.
fn fuzz_server(server: &cpriv_core::service::ServerHandle, n: usize) -> bool {
    use cpriv_core::service::{encode_message, read_message, DEFAULT_MAX_FRAME_BYTES};
    use std::net::TcpStream;
    let connect = || {
        let s = TcpStream::connect(server.local_addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        s
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stream = connect();
    for _ in 0..n {
        let framed = rng.gen_bool(0.7);
        let msg = if framed {
            let body: Vec<u8> = (0..rng.gen_range(0..4096)).map(|_| rng.gen()).collect();
            encode_message(if rng.gen_bool(0.5) { 0x01 } else { rng.gen() }, &body)
        } else {
            (0..rng.gen_range(9..64)).map(|_| rng.gen()).collect()
        };
        if stream.write_all(&msg).is_err() {
            return false;
        }
        match read_message(&mut stream, DEFAULT_MAX_FRAME_BYTES) {
            Ok(Some((0x02 | 0xFF, _))) => {}
            _ => return false,
        }
        if msg[..4] != *b"CPRV" {
            stream = connect();
        }
    }
    true
}
