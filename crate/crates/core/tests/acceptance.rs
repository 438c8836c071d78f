//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so that every criterion prints exactly one PASS/FAIL line, in order, with
//! nothing else competing for the single core during timing.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trackgroup::bench::{bench_latency, bench_scene};
use trackgroup::clustering::{connected_components, spectral_cluster, Partition, SpectralConfig};
use trackgroup::config::{Overrides, RunConfig};
use trackgroup::evalmetrics::group_map;
use trackgroup::evaluate::{evaluate_model, BaselineScene, ThresholdBaseline};
use trackgroup::geometry::{giou_distance, BoundingBox};
use trackgroup::gtransformer::AttentionKind;
use trackgroup::losses::{bce_loss, eigen_loss, eigen_loss_terms, gt_zero_eigenvectors, laplacian, LossConfig};
use trackgroup::model::{GroupModel, ModelConfig, SceneFeatures};
use trackgroup::nn::tensor_from_matrix;
use trackgroup::synth::{split_samples, synth_split};
use trackgroup::tracks::{track_distance, SceneSample, Track, TrackId};
use trackgroup::train::train;
use trackgroup_nd::gradcheck::relative_error;
use trackgroup_nd::{Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

/// Scene with `n` random-walk tracks and a random grouping.
fn small_scene(n: usize, seed: u64) -> SceneSample {
    let base = bench_scene(n, 30, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let k = rng.random_range(1..=n);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let ids = base.ids();
    SceneSample::new("grad", (1920.0, 1080.0), base.keyframe, base.tracks, Partition::from_labels(&ids, &labels)).unwrap()
}

fn analytic_grads(model: &GroupModel, x: &SceneFeatures, cfg: &LossConfig) -> BTreeMap<String, Tensor> {
    let mut m = model.clone();
    let mut t = Tape::new();
    let p = m.params().bind(&mut t);
    let (loss, _) = m.loss(&mut t, &p, x, cfg).unwrap();
    t.backward(loss).unwrap();
    m.params_mut().collect_grads(&t, &p);
    m.params()
        .iter()
        .map(|(name, par)| (name.to_string(), par.grad().expect("every parameter is used").clone()))
        .collect()
}

/// Fresh initialisation puts some ReLU inputs exactly on the kink (zero
/// biases meeting the zero diagonal of the distance matrix), where one-sided
/// and central derivatives legitimately differ. A small jitter moves the
/// check to a generic point.
fn jittered(mut model: GroupModel, rng: &mut ChaCha8Rng) -> GroupModel {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        for v in model.params_mut().get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
    }
    model
}

fn loss_at(model: &GroupModel, x: &SceneFeatures, cfg: &LossConfig) -> f64 {
    model.evaluate_loss(x, cfg).unwrap().total
}

/// Central difference of `loss_at` along `dir` (entries of named tensors).
fn central(model: &GroupModel, x: &SceneFeatures, cfg: &LossConfig, dir: &BTreeMap<String, Vec<(usize, f64)>>, h: f64) -> f64 {
    let shifted = |sign: f64| {
        let mut m = model.clone();
        for (name, d) in dir {
            let data = m.params_mut().get_mut(name).unwrap().data_mut();
            for &(i, dv) in d {
                data[i] += sign * h * dv;
            }
        }
        loss_at(&m, x, cfg)
    };
    (shifted(1.0) - shifted(-1.0)) / (2.0 * h)
}

/// Central differences with step 1e-5 against the tape: three random entries
/// of every parameter tensor plus one random unit direction through all of
/// them. Probes that miss are re-measured at step 1e-7 so the report shows
/// whether the miss is a ReLU kink inside the step or a wrong derivative.
fn gradient_fidelity() -> Verdict {
    const H: f64 = 1e-5;
    const FINE: f64 = 1e-7;
    // Absolute scale below which a derivative counts as zero.
    const FLOOR: f64 = 1e-6;
    let start = Instant::now();
    let cfg = LossConfig::default();
    let (mut worst, mut worst_at) = (0.0f64, String::new());
    let (mut checked, mut missed, mut resolved) = (0, 0, 0);
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let n = rng.random_range(1..=8);
        let model = jittered(GroupModel::new(ModelConfig::default(), s).unwrap(), &mut rng);
        let x = SceneFeatures::new(&small_scene(n, s), &model.config().encoder).unwrap();
        let grads = analytic_grads(&model, &x, &cfg);

        let mut probes: Vec<(String, BTreeMap<String, Vec<(usize, f64)>>)> = Vec::new();
        for (name, g) in &grads {
            for _ in 0..3 {
                let i = rng.random_range(0..g.len());
                probes.push((format!("{name}[{i}]"), BTreeMap::from([(name.clone(), vec![(i, 1.0)])])));
            }
        }
        let mut dir: BTreeMap<String, Vec<(usize, f64)>> = grads
            .iter()
            .map(|(name, g)| (name.clone(), (0..g.len()).map(|i| (i, rng.random_range(-1.0..1.0))).collect()))
            .collect();
        let norm = dir.values().flatten().map(|(_, v)| v * v).sum::<f64>().sqrt();
        dir.values_mut().flatten().for_each(|(_, v)| *v /= norm);
        probes.push(("direction".into(), dir));

        for (label, d) in &probes {
            let analytic: f64 = d.iter().map(|(name, e)| e.iter().map(|&(i, v)| grads[name].data()[i] * v).sum::<f64>()).sum();
            let numeric = central(&model, &x, &cfg, d, H);
            let err = relative_error(analytic, numeric, FLOOR);
            checked += 1;
            if err >= 1e-4 {
                missed += 1;
                resolved += usize::from(relative_error(analytic, central(&model, &x, &cfg, d, FINE), FLOOR) < 1e-4);
            }
            if err > worst {
                worst = err;
                worst_at = format!("scene {s} n={n} {label} ({analytic:.6e} vs {numeric:.6e})");
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "{checked} probes, {missed} at or above 1e-4, max rel err {worst:.2e} at {worst_at}; \
             {resolved} of the misses agree below 1e-4 when re-measured at step 1e-7; {:.1}s",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(0.0..200.0),
        rng.random_range(0.0..200.0),
        rng.random_range(1.0..120.0),
        rng.random_range(1.0..120.0),
    )
    .unwrap()
}

/// Track over a random subset of frames 1..=20 (gaps likely).
fn random_track(id: TrackId, rng: &mut ChaCha8Rng) -> Track {
    let keep = rng.random_range(0.2..1.0);
    let mut states = BTreeMap::new();
    for f in 1..=20 {
        if rng.random_bool(keep) {
            states.insert(f, random_box(rng));
        }
    }
    if states.is_empty() {
        states.insert(rng.random_range(1..=20), random_box(rng));
    }
    Track::new(id, states).unwrap()
}

fn metric_violations<T>(items: &[(T, T, T)], d: impl Fn(&T, &T) -> f64) -> Vec<String> {
    const TOL: f64 = 1e-12;
    let mut bad = Vec::new();
    for (k, (a, b, c)) in items.iter().enumerate() {
        let (ab, ba, ac, bc) = (d(a, b), d(b, a), d(a, c), d(b, c));
        if !(0.0..=1.0 + TOL).contains(&ab) {
            bad.push(format!("#{k} range {ab}"));
        }
        if d(a, a).abs() > TOL {
            bad.push(format!("#{k} identity {}", d(a, a)));
        }
        if (ab - ba).abs() > TOL {
            bad.push(format!("#{k} symmetry {ab} vs {ba}"));
        }
        if ac > ab + bc + TOL {
            bad.push(format!("#{k} triangle {ac} > {ab} + {bc}"));
        }
    }
    bad
}

fn metric_axioms() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let boxes: Vec<_> = (0..1000)
        .map(|_| (random_box(&mut rng), random_box(&mut rng), random_box(&mut rng)))
        .collect();
    let tracks: Vec<_> = (0..1000)
        .map(|_| (random_track(1, &mut rng), random_track(2, &mut rng), random_track(3, &mut rng)))
        .collect();
    let mut bad = metric_violations(&boxes, giou_distance);
    bad.extend(metric_violations(&tracks, track_distance));
    let elapsed = start.elapsed();
    verdict(
        bad.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "1000 box triples, 1000 gapped track triples, {} violations {:?}, {:.2}s",
            bad.len(),
            bad.iter().take(3).collect::<Vec<_>>(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Every ordered composition of `n` into at most `max_parts` positive parts.
fn compositions(n: usize, max_parts: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    if max_parts == 0 {
        return vec![];
    }
    let mut out = Vec::new();
    for first in 1..=n {
        for mut rest in compositions(n - first, max_parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn block_matrix(sizes: &[usize]) -> DMatrix<f64> {
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
    let n = labels.len();
    DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 })
}

fn spectral_matches_components() -> Verdict {
    let start = Instant::now();
    let cfg = SpectralConfig::default();
    let mut all = Vec::new();
    for n in 1..=12 {
        all.extend(compositions(n, 4));
    }
    let mut exact_fail = 0;
    for sizes in &all {
        let a = block_matrix(sizes);
        let want = connected_components(&a).unwrap();
        if spectral_cluster(&a, sizes.len(), &cfg).unwrap() != want {
            exact_fail += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut agree = 0;
    for _ in 0..100 {
        let sizes = all.choose(&mut rng).unwrap();
        let clean = block_matrix(sizes);
        let n = clean.nrows();
        let mut a = clean.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = (clean[(i, j)] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        if spectral_cluster(&a, sizes.len(), &cfg).unwrap() == connected_components(&clean).unwrap() {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        exact_fail == 0 && agree >= 95 && elapsed < Duration::from_secs(60),
        format!(
            "{} exact block matrices, {exact_fail} mismatches; noisy agreement {agree}/100; {:.1}s",
            all.len(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 4

fn loss_identities() -> Verdict {
    let mut worst_null = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let ids: Vec<TrackId> = (1..=n as TrackId).collect();
        let k = rng.random_range(1..=n);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let groups = Partition::from_labels(&ids, &labels);
        let mut t = Tape::new();
        let a = t.constant(tensor_from_matrix(&groups.adjacency(&ids)));
        let lap = laplacian(&mut t, a).unwrap();
        let (null, _) = eigen_loss_terms(&mut t, lap, &gt_zero_eigenvectors(&groups, &ids), 1.0, 1.0).unwrap();
        worst_null = worst_null.max(t.value(null).item().abs());
    }

    let mut t = Tape::new();
    let ids: Vec<TrackId> = (1..=5).collect();
    let groups = Partition::new(vec![vec![1, 2, 3], vec![4, 5]]).unwrap();
    let zero = t.constant(Tensor::zeros(5, 5));
    let alpha = 0.7;
    let eig = eigen_loss(&mut t, zero, &gt_zero_eigenvectors(&groups, &ids), alpha, 1.0).unwrap();
    let at_zero = t.value(eig).item();

    let half = t.constant(Tensor::full(4, 4, 0.5));
    let target = DMatrix::from_fn(4, 4, |i, j| ((i + j) % 2) as f64);
    let bce = bce_loss(&mut t, half, &target).unwrap();
    let bce_half = t.value(bce).item();

    let pass = worst_null <= 1e-10 && (at_zero - alpha).abs() <= 1e-12 && (bce_half - std::f64::consts::LN_2).abs() <= 1e-12;
    verdict(
        pass,
        format!(
            "GT-block first term max {worst_null:.1e}; eigen(L'=0) = {at_zero} (alpha {alpha}); bce(0.5) - ln2 = {:.1e}",
            bce_half - std::f64::consts::LN_2
        ),
    )
}

// ---------------------------------------------------------------- 5

fn permutation_invariance() -> Verdict {
    let cfg = RunConfig::default();
    let model = GroupModel::new(cfg.model, 5).unwrap();
    let files = synth_split(&cfg.data.synth, 5, 9, "perm", 50).unwrap();
    let scenes = split_samples(&files, &cfg.data.synth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut d_adj, mut d_card) = (0.0f64, 0.0f64);
    let mut group_mismatch = 0;
    let (mut plain, mut shuffled) = (Vec::new(), Vec::new());
    for s in &scenes {
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(&mut rng);
        let p = s.permuted(&perm);
        let x = SceneFeatures::new(s, &cfg.model.encoder).unwrap();
        let xp = SceneFeatures::new(&p, &cfg.model.encoder).unwrap();
        let a = model.predict_with(&x, cfg.inference.policy, &cfg.inference.spectral).unwrap();
        let b = model.predict_with(&xp, cfg.inference.policy, &cfg.inference.spectral).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                d_adj = d_adj.max((b.adjacency[(i, j)] - a.adjacency[(perm[i], perm[j])]).abs());
            }
        }
        d_card = d_card.max((a.cardinality - b.cardinality).abs());
        group_mismatch += usize::from(a.groups != b.groups);
        plain.push(x);
        shuffled.push(xp);
    }
    let m1 = evaluate_model(&model, &plain, &cfg.inference).unwrap().map.unwrap_or(f64::NAN);
    let m2 = evaluate_model(&model, &shuffled, &cfg.inference).unwrap().map.unwrap_or(f64::NAN);
    let d_map = (m1 - m2).abs();
    verdict(
        d_adj <= 1e-9 && d_card <= 1e-9 && d_map <= 1e-9,
        format!(
            "50 scenes: adjacency {d_adj:.1e}, cardinality {d_card:.1e}, mAP {m1:.4} vs {m2:.4}, {group_mismatch} partitions differ"
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

struct Data {
    train: Vec<SceneSample>,
    val: Vec<SceneSample>,
    test: Vec<SceneSample>,
}

fn default_data(cfg: &RunConfig) -> Data {
    let d = &cfg.data;
    let split = |k: u64, name: &str, count: usize| split_samples(&synth_split(&d.synth, cfg.seed, k, name, count).unwrap(), &d.synth).unwrap();
    Data {
        train: split(0, "train", d.train_scenes),
        val: split(1, "val", d.val_scenes),
        test: split(2, "test", d.test_scenes),
    }
}

/// Trains with `cfg` and returns (test mAP, wall time).
fn train_and_test(cfg: &RunConfig, data: &Data) -> (f64, Duration) {
    let start = Instant::now();
    let feats = |s: &[SceneSample]| -> Vec<SceneFeatures> { s.iter().map(|x| SceneFeatures::new(x, &cfg.model.encoder).unwrap()).collect() };
    let (tr, va, te) = (feats(&data.train), feats(&data.val), feats(&data.test));
    let mut model = GroupModel::new(cfg.model, cfg.seed).unwrap();
    let outcome = train(&mut model, &tr, &va, &cfg.train, &cfg.loss, &cfg.inference, cfg.seed, |l| {
        eprintln!("    {}", l.line());
    })
    .unwrap();
    let map = evaluate_model(&model, &te, &cfg.inference).unwrap().map.unwrap_or(0.0);
    eprintln!("    best epoch {} test mAP {map:.4}", outcome.best_epoch);
    (map, start.elapsed())
}

fn learnability(cfg: &RunConfig, data: &Data, full_map: f64, took: Duration) -> Verdict {
    let ec = cfg.inference.eval;
    let bl = |s: &[SceneSample]| -> Vec<BaselineScene> { s.iter().map(|x| BaselineScene::new(x).unwrap()).collect() };
    let baseline = ThresholdBaseline::fit(&bl(&data.train), &ec).unwrap();
    let base_map = baseline.evaluate(&bl(&data.test), &ec).unwrap().map.unwrap_or(0.0);
    verdict(
        full_map >= base_map + 0.05 && full_map >= 0.80 && took < Duration::from_secs(900),
        format!(
            "learned mAP {full_map:.4}, baseline (tau {}) {base_map:.4}, needs >= {:.4} and >= 0.80; {} train / {} test scenes, {:.0}s",
            baseline.tau,
            base_map + 0.05,
            cfg.data.train_scenes,
            cfg.data.test_scenes,
            secs(took)
        ),
    )
}

fn ablations(cfg: &RunConfig, data: &Data, full_map: f64) -> Verdict {
    let variants: [(&str, Overrides); 4] = [
        ("gat", Overrides { attention: Some(AttentionKind::Gat), ..Default::default() }),
        ("no-euclid", Overrides { no_euclid: true, ..Default::default() }),
        ("det-only", Overrides { det_only: true, ..Default::default() }),
        ("no-residual", Overrides { no_residual: true, ..Default::default() }),
    ];
    let mut pass = true;
    let mut parts = vec![format!("full {full_map:.4}")];
    for (name, o) in variants {
        let mut c = cfg.clone();
        c.apply(&o).unwrap();
        eprintln!("  ablation {name}");
        let (m, _) = train_and_test(&c, data);
        pass &= full_map >= m - 0.01;
        parts.push(format!("{name} {m:.4}"));
    }
    verdict(pass, parts.join(", "))
}

// ---------------------------------------------------------------- 8

fn size_and_latency() -> Verdict {
    let cfg = RunConfig::default();
    let model = GroupModel::new(cfg.model, 8).unwrap();
    let params = model.num_parameters();
    let lookback = cfg.model.encoder.lookback;
    let stats: Vec<_> = [10, 25, 50]
        .iter()
        .map(|&n| bench_latency(&model, &bench_scene(n, lookback, 8).unwrap(), 30, &cfg.inference).unwrap())
        .collect();
    let at50 = stats[2].mean_ms;
    let monotone = stats.windows(2).all(|w| w[0].mean_ms <= w[1].mean_ms);
    verdict(
        (500_000..=900_000).contains(&params) && at50 < 34.0,
        format!(
            "{params} parameters; mean latency n=10/25/50: {:.2}/{:.2}/{:.2} ms (monotone: {monotone})",
            stats[0].mean_ms, stats[1].mean_ms, at50
        ),
    )
}

// ---------------------------------------------------------------- 9

fn published_map() -> Verdict {
    let m = group_map(&[Some(71.9), Some(73.6), Some(64.0), Some(71.2), Some(48.6)]).unwrap();
    verdict((m - 65.86).abs() < 1e-9, format!("group_map = {m}"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, v: Verdict| {
        println!("{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "metric axioms", metric_axioms());
    report(3, "spectral clustering recovers components", spectral_matches_components());
    report(4, "loss identities", loss_identities());
    report(5, "permutation invariance", permutation_invariance());

    let cfg = RunConfig::default();
    let data = default_data(&cfg);
    eprintln!("  full model");
    let (full_map, took) = train_and_test(&cfg, &data);
    report(6, "end-to-end learnability", learnability(&cfg, &data, full_map, took));
    report(7, "full model vs ablations", ablations(&cfg, &data, full_map));

    report(8, "model size and latency", size_and_latency());
    report(9, "reference mAP arithmetic", published_map());

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
