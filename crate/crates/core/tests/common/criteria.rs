//! The acceptance checks. Each returns a verdict with the measured numbers
//! so failures are diagnosable from the test log.

use std::path::Path;
use std::time::Instant;

use catgan::checkpoint::{self, RngState};
use catgan::conv::{conv_output_extent, conv_transpose_output_extent, Padding};
use catgan::dataset::annotations::{align_lengths, interpolate_va};
use catgan::dataset::container::{PackedDataset, PackedRecord};
use catgan::dataset::faces::{select_face, LandmarkCandidate};
use catgan::dataset::split::{au_percentages, split_dataset, VideoMeta};
use catgan::dataset::{mnist, PixelRange, Samples};
use catgan::layers::ParamSet;
use catgan::losses::{self, fake_label};
use catgan::metrics::{classification_metrics, NUM_AUS};
use catgan::models::{self, GanModel, HeadVariant, LabelBatch, ModelConfig, VaLoss, Weighting};
use catgan::optim::{Optimizer, OptimizerKind};
use catgan::train::{self, update_target, TrainConfig, UpdateTarget};
use catgan::{sweep, Gradients, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad_suite::{self, Which};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }

    fn from_failures(failures: Vec<String>, ok: impl Into<String>) -> Self {
        if failures.is_empty() {
            Verdict::new(true, ok)
        } else {
            Verdict::new(false, failures.join("; "))
        }
    }
}

pub fn mnist_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/mnist10k"))
}

// ---------------------------------------------------------------- 1

/// The four head variants checked end to end.
pub fn canonical_heads() -> [HeadVariant; 4] {
    [
        HeadVariant::Softmax { k: 10 },
        HeadVariant::Au,
        HeadVariant::Va { loss: VaLoss::OneMinusCcc },
        HeadVariant::Joint {
            va_loss: VaLoss::OneMinusCcc,
            weighting: Weighting::Ponderated,
        },
    ]
}

pub fn gradients() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_op: f64 = 0.0;
    for case in grad_suite::op_cases() {
        worst_op = worst_op.max(case.worst());
        if case.worst() >= 1e-4 {
            failures.push(format!("{} rel err {:.2e}", case.name, case.worst()));
        }
    }
    let mut worst_e2e: f64 = 0.0;
    for head in canonical_heads() {
        for which in [Which::D, Which::G] {
            let case = grad_suite::end_to_end(head, which, 2);
            worst_e2e = worst_e2e.max(case.worst());
            if case.worst() >= 1e-3 {
                failures.push(format!("{} rel err {:.2e}", case.name, case.worst()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    Verdict::from_failures(
        failures,
        format!("worst op {worst_op:.1e}, worst end-to-end {worst_e2e:.1e}, {secs:.0} s"),
    )
}

// ---------------------------------------------------------------- 2

/// Distinct spatial sizes along a network, from the conv-layer shapes.
fn spatial_chain(spec: &catgan::layers::NetworkSpec) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    for s in spec.shape_chain(2).unwrap() {
        if s.len() == 4 && sizes.last() != Some(&s[1]) {
            sizes.push(s[1]);
        }
    }
    sizes
}

pub fn shapes() -> Verdict {
    let mut failures = Vec::new();
    // oracle: VALID transposed conv gives (n - 1) * s + k, SAME conv ceil(n / s)
    let deconv = |n: usize, k: usize, s: usize| (n - 1) * s + k;
    let conv = |n: usize, s: usize| n.div_ceil(s);
    for (size, last_k) in [(32, 6), (28, 2)] {
        let expected_g = vec![1, deconv(1, 2, 1), deconv(2, 4, 2), deconv(6, 4, 2), deconv(14, last_k, 2)];
        let expected_d = vec![size, conv(size, 2), conv(conv(size, 2), 2), conv(conv(conv(size, 2), 2), 2)];
        let (g, d) = ModelConfig::categorical(HeadVariant::Au, size).build_specs().unwrap();
        let (gc, dc) = (spatial_chain(&g), spatial_chain(&d));
        if gc != expected_g || *expected_g.last().unwrap() != size {
            failures.push(format!("generator {gc:?}, expected {expected_g:?}"));
        }
        if dc != expected_d {
            failures.push(format!("discriminator {dc:?}, expected {expected_d:?}"));
        }
        if g.output_shape(5).unwrap() != vec![5, size, size, 3] {
            failures.push(format!("generator output {:?}", g.output_shape(5).unwrap()));
        }
    }
    let (_, d) = ModelConfig::categorical(HeadVariant::Au, 28).build_specs().unwrap();
    if spatial_chain(&d) != vec![28, 14, 7, 4] {
        failures.push(format!("28px discriminator {:?}", spatial_chain(&d)));
    }
    // the library arithmetic agrees with the oracle on a grid
    for n in 1..40 {
        for k in 1..7 {
            for s in 1..4 {
                if conv_transpose_output_extent(n, k, s, Padding::Valid).unwrap() != deconv(n, k, s) {
                    failures.push(format!("transpose extent n={n} k={k} s={s}"));
                }
                if conv_output_extent(n, k, s, Padding::Same).unwrap() != conv(n, s) {
                    failures.push(format!("same extent n={n} k={k} s={s}"));
                }
                if n >= k && conv_output_extent(n, k, s, Padding::Valid).unwrap() != (n - k) / s + 1 {
                    failures.push(format!("valid extent n={n} k={k} s={s}"));
                }
            }
        }
    }
    Verdict::from_failures(failures, "G 1-2-6-14-32 (28 variant), D 28-14-7-4, extents match oracle")
}

// ---------------------------------------------------------------- 3

pub fn schedule() -> Verdict {
    let mut failures = Vec::new();
    let mut counts = Vec::new();
    for r in [2u64, 5, 7] {
        let d: Vec<u64> = (0..=10_000)
            .filter(|&i| update_target(i, r) == UpdateTarget::Discriminator)
            .collect();
        let expected = 10_000 / (r + 1) + 1;
        if d.len() as u64 != expected {
            failures.push(format!("r={r}: {} D updates, expected {expected}", d.len()));
        }
        if let Some(bad) = d.iter().find(|&&i| i % (r + 1) != 0) {
            failures.push(format!("r={r}: D update at {bad}"));
        }
        counts.push(format!("r={r}: {}", d.len()));
    }
    Verdict::from_failures(failures, format!("D updates over iterations 0..=10000: {}", counts.join(", ")))
}

// ---------------------------------------------------------------- 4

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, t: f64) -> f64 {
    -(t * sig(z).ln() + (1.0 - t) * (1.0 - sig(z)).ln())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ccc_direct(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let vx = mean(&x.iter().map(|a| (a - mx).powi(2)).collect::<Vec<_>>());
    let vy = mean(&y.iter().map(|b| (b - my).powi(2)).collect::<Vec<_>>());
    let cov = mean(&x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect::<Vec<_>>());
    2.0 * cov / (vx + vy + (mx - my).powi(2))
}

/// Straight-line discriminator loss of one side from the written formulas.
fn side_oracle(head: HeadVariant, z: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let b = z.len();
    let w = z[0].len();
    let col = |m: &[Vec<f64>], c: usize| m.iter().map(|r| r[c]).collect::<Vec<f64>>();
    let bce_cols = |cols: std::ops::Range<usize>| {
        let mut s = 0.0;
        for i in 0..b {
            for c in cols.clone() {
                s += bce(z[i][c], t[i][c]);
            }
        }
        s / (b * cols.len()) as f64
    };
    let va = |loss: VaLoss| {
        let f = |c: usize| match loss {
            VaLoss::Mse => mean(&(0..b).map(|i| (z[i][c] - t[i][c]).powi(2)).collect::<Vec<_>>()),
            VaLoss::OneMinusCcc => 1.0 - ccc_direct(&col(z, c), &col(t, c)),
        };
        (f(0) + f(1)) / 2.0
    };
    match head {
        HeadVariant::Softmax { .. } => {
            let mut s = 0.0;
            for i in 0..b {
                let lse = z[i].iter().map(|v| v.exp()).sum::<f64>().ln();
                s -= (0..w).map(|c| t[i][c] * (z[i][c] - lse)).sum::<f64>();
            }
            s / b as f64
        }
        HeadVariant::Au => bce_cols(0..w),
        HeadVariant::Va { loss } => (va(loss) + bce_cols(w - 1..w)) / 2.0,
        HeadVariant::Joint { va_loss, weighting } => {
            let (v, a, r) = (va(va_loss), bce_cols(2..2 + NUM_AUS), bce_cols(w - 1..w));
            match weighting {
                Weighting::Equal => (v + a + r) / 3.0,
                Weighting::Ponderated => 0.27 * v + 0.40 * a + 0.33 * r,
            }
        }
    }
}

pub fn loss_assembly() -> Verdict {
    let mut failures = Vec::new();
    let alpha = 0.9;
    let labels = LabelBatch {
        au: vec![
            [true, false, false, true, false, false, true, false],
            [false, true, false, false, true, true, false, false],
        ],
        valence: vec![0.4, -0.3],
        arousal: vec![-0.1, 0.6],
        class: vec![3, 7],
    };
    let mut heads = vec![HeadVariant::Softmax { k: 10 }, HeadVariant::Au];
    for loss in [VaLoss::Mse, VaLoss::OneMinusCcc] {
        heads.push(HeadVariant::Va { loss });
        for weighting in [Weighting::Equal, Weighting::Ponderated] {
            heads.push(HeadVariant::Joint { va_loss: loss, weighting });
        }
    }
    let mut worst: f64 = 0.0;
    for head in heads {
        let w = head.width();
        let logit = |i: usize, c: usize, s: f64| ((i * 7 + c * 3) as f64 * 0.37 + s).sin() * 1.5;
        let zr: Vec<Vec<f64>> = (0..2).map(|i| (0..w).map(|c| logit(i, c, 0.0)).collect()).collect();
        let zf: Vec<Vec<f64>> = (0..2).map(|i| (0..w).map(|c| logit(i, c, 1.0)).collect()).collect();
        // targets written out by hand
        let fake_row = {
            let mut r = vec![(1.0 - alpha) / (w - 1) as f64; w - 1];
            r.push(alpha);
            r
        };
        let real_rows: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                let mut r = vec![0.0; w];
                let au = labels.au[i].map(|f| if f { 1.0 } else { 0.0 });
                match head {
                    HeadVariant::Softmax { .. } => r[labels.class[i]] = 1.0,
                    HeadVariant::Au => r[..8].copy_from_slice(&au),
                    HeadVariant::Va { .. } => {
                        r[0] = labels.valence[i];
                        r[1] = labels.arousal[i];
                    }
                    HeadVariant::Joint { .. } => {
                        r[0] = labels.valence[i];
                        r[1] = labels.arousal[i];
                        r[2..10].copy_from_slice(&au);
                    }
                }
                r
            })
            .collect();
        let expected = (side_oracle(head, &zr, &real_rows) + side_oracle(head, &zf, &[fake_row.clone(), fake_row])) / 2.0;

        let mut g: Graph<f64> = Graph::new();
        let flat = |m: &[Vec<f64>]| Tensor::from_f64(vec![2, w], &m.concat()).unwrap();
        let r = g.input(flat(&zr)).unwrap();
        let f = g.input(flat(&zf)).unwrap();
        let (_, parts) = models::head_loss(&mut g, head, r, f, &labels, alpha).unwrap();
        let err = (parts.total - expected).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            failures.push(format!("{head:?}: {} vs oracle {expected} ({err:.1e})", parts.total));
        }
    }
    let fl = fake_label(8, 0.9).unwrap();
    let mut want = vec![0.0125; 8];
    want.push(0.9);
    if fl.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-15) {
        failures.push(format!("fake_label(8, 0.9) = {fl:?}"));
    }
    Verdict::from_failures(failures, format!("7 variants within {worst:.1e} of the oracle; fake_label(8,0.9) ok"))
}

// ---------------------------------------------------------------- 5

fn one_param(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::scalar(v));
    p
}

fn grad(v: f64) -> Gradients<f64> {
    let mut g = Gradients::new();
    g.insert("theta", Tensor::scalar(v));
    g
}

/// Applies gradients `gs` in turn and returns theta after each step.
fn run_steps(mut opt: Optimizer, theta: f64, gs: &[f64]) -> Vec<f64> {
    let mut p = one_param(theta);
    gs.iter()
        .map(|&g| {
            opt.step(&mut p, &grad(g)).unwrap();
            p.get("theta").unwrap().item()
        })
        .collect()
}

pub fn optimizers() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: Vec<f64>, want: Vec<f64>| {
        for (k, (a, b)) in got.iter().zip(&want).enumerate() {
            if (a - b).abs() > 1e-12 {
                failures.push(format!("{name} step {}: {a} vs {b}", k + 1));
            }
        }
    };
    check("sgd", run_steps(Optimizer::sgd(0.1), 1.0, &[2.0]), vec![0.8]);
    check("momentum", run_steps(Optimizer::momentum(0.1, 0.9), 0.0, &[1.0, 1.0]), vec![-0.1, -0.29]);
    {
        // three steps: v = 0.9 v + 0.1 g
        let (v1, v2, v3) = (0.1 * 2.0, 0.9 * 0.2 + 0.1 * -1.0, 0.9 * (0.9 * 0.2 + 0.1 * -1.0) + 0.1 * 0.5);
        check(
            "momentum x3",
            run_steps(Optimizer::momentum(0.1, 0.9), 1.0, &[2.0, -1.0, 0.5]),
            vec![1.0 - v1, 1.0 - v1 - v2, 1.0 - v1 - v2 - v3],
        );
    }
    check("adagrad", run_steps(Optimizer::adagrad(1.0, 1e-8), 0.0, &[3.0]), vec![-3.0 / (9.0f64 + 1e-8).sqrt()]);
    {
        let t1 = -0.5 * 2.0 / (4.0f64 + 1e-8).sqrt();
        let t2 = t1 - 0.5 * 1.0 / (5.0f64 + 1e-8).sqrt();
        check("adagrad x2", run_steps(Optimizer::adagrad(0.5, 1e-8), 0.0, &[2.0, 1.0]), vec![t1, t2]);
    }
    for (name, opt) in [
        ("rmsprop", Optimizer::rmsprop(0.001, 0.9)),
        ("adadelta", Optimizer::adadelta(0.01, 0.95)),
    ] {
        let gamma = opt.hyper().gamma;
        let eta = opt.hyper().eta;
        let e1 = (1.0 - gamma) * 4.0;
        let e2 = gamma * e1 + (1.0 - gamma) * 1.0;
        let t1 = 1.0 - eta * 2.0 / (e1 + 1e-8).sqrt();
        let t2 = t1 + eta * 1.0 / (e2 + 1e-8).sqrt();
        check(name, run_steps(opt, 1.0, &[2.0, -1.0]), vec![t1, t2]);
    }
    {
        let (b1, b2, eps, eta): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.001);
        let mut theta = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut want = Vec::new();
        for (t, g) in [1.0, -0.5, 2.0].into_iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= eta * mh / (vh.sqrt() + eps);
            want.push(theta);
        }
        check("adam x3", run_steps(Optimizer::adam(eta, b1, b2, eps), 0.0, &[1.0, -0.5, 2.0]), want);
        let first = run_steps(Optimizer::adam(eta, b1, b2, eps), 0.0, &[1.0])[0];
        if (first + 0.0009999999).abs() > 1e-10 {
            failures.push(format!("adam first step {first}"));
        }
    }
    // zero gradient never moves anything
    for kind in KINDS {
        if run_steps(Optimizer::preset(kind), 0.7, &[0.0, 0.0]) != vec![0.7, 0.7] {
            failures.push(format!("{kind:?} moved on a zero gradient"));
        }
    }
    // convergence on theta^2 with default hyperparameters
    let mut steps_taken = Vec::new();
    for kind in KINDS {
        let mut opt = Optimizer::preset(kind);
        let mut p = one_param(1.0);
        let mut reached = None;
        for step in 1..=10_000 {
            let th = p.get("theta").unwrap().item();
            opt.step(&mut p, &grad(2.0 * th)).unwrap();
            if reached.is_none() && p.get("theta").unwrap().item().abs() < 1e-2 {
                reached = Some(step);
            }
        }
        let end = p.get("theta").unwrap().item();
        if end.abs() >= 1e-2 {
            failures.push(format!("{kind:?} ends at {end}"));
        }
        steps_taken.push(format!("{kind:?} {}", reached.map_or("-".into(), |s| s.to_string())));
    }
    Verdict::from_failures(failures, format!("hand oracles exact; |theta|<1e-2 after {}", steps_taken.join(", ")))
}

const KINDS: [OptimizerKind; 6] = [
    OptimizerKind::Sgd,
    OptimizerKind::Momentum,
    OptimizerKind::Adagrad,
    OptimizerKind::Adadelta,
    OptimizerKind::RmsProp,
    OptimizerKind::Adam,
];

// ---------------------------------------------------------------- 6

pub fn vanilla_mnist(out: &Path) -> Verdict {
    let data = mnist::load(mnist_dir(), PixelRange::Unit).unwrap().reshaped(vec![784]).unwrap();
    // all 10,000 digits train; the last 2,000 double as the logged test batches
    let (_, test) = data.split_at(8000).unwrap();
    let config = TrainConfig::vanilla();
    let start = Instant::now();
    let outcome = match train::train::<f64>(&config, &data, &test, out, |_| {}) {
        Ok(o) => o,
        Err(e) => return Verdict::new(false, format!("training failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let finite = outcome.losses.iter().all(|l| l.d_loss.is_finite() && l.g_loss.is_finite());
    let tail = &outcome.losses[outcome.losses.len() - 1000..];
    let g = mean(&tail.iter().map(|l| l.g_loss).collect::<Vec<_>>());
    let d = mean(&tail.iter().map(|l| l.d_loss).collect::<Vec<_>>());
    let data_mean = data.mean_pixel();
    let gen_mean = train::mean_generated_pixel(&outcome.model, 1000, 99).unwrap();
    let pass = finite && (1.0..=4.0).contains(&g) && (0.2..=2.0).contains(&d) && (gen_mean - data_mean).abs() <= 0.15;
    Verdict::new(
        pass,
        format!(
            "finite {finite}, final-1000 mean g_loss {g:.3}, d_loss {d:.3}, sample mean {gen_mean:.3} vs data {data_mean:.3}, {:.0} min",
            secs / 60.0
        ),
    )
}

// ---------------------------------------------------------------- 7

pub fn categorical_mnist(out: &Path) -> Verdict {
    let data = mnist::load(mnist_dir(), PixelRange::Signed).unwrap().to_rgb().unwrap();
    let (train_set, test) = data.split_at(8000).unwrap();
    let config = TrainConfig::categorical(HeadVariant::Softmax { k: 10 }, 28);
    let start = Instant::now();
    if let Err(e) = train::train::<f32>(&config, &train_set, &test, out, |_| {}) {
        return Verdict::new(false, format!("training failed: {e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let sweep = match sweep::evaluate_checkpoints::<f32>(&out.join(train::CHECKPOINT_DIR), &test, 250) {
        Ok(s) => s,
        Err(e) => return Verdict::new(false, format!("sweep failed: {e}")),
    };
    let best = sweep.table.get("class_accuracy").expect("softmax head reports accuracy");
    let at_best = sweep
        .reports
        .iter()
        .find(|r| Some(r.iteration) == best.iteration)
        .and_then(|r| r.pct_real_as_real)
        .unwrap_or(f64::NAN);
    Verdict::new(
        best.value > 0.85 && at_best > 0.9,
        format!(
            "best test accuracy {:.4} at iteration {}, pct_real_as_real there {at_best:.4}, {:.0} min",
            best.value,
            best.iteration.unwrap_or(0),
            secs / 60.0
        ),
    )
}

// ---------------------------------------------------------------- 8

fn square(cx: f64, cy: f64) -> LandmarkCandidate {
    LandmarkCandidate {
        points: [[cx - 2.0, cy - 1.0], [cx + 2.0, cy - 1.0], [cx + 2.0, cy + 1.0], [cx - 2.0, cy + 1.0]],
    }
}

pub fn random_videos(rng: &mut ChaCha8Rng) -> Vec<VideoMeta> {
    let people = rng.random_range(15..40);
    let mut videos = Vec::new();
    for p in 0..people {
        for k in 0..rng.random_range(1..4) {
            let frames = rng.random_range(200..3000);
            videos.push(VideoMeta {
                video_id: format!("v{p}_{k}"),
                identity_id: format!("p{p}"),
                frame_count: frames,
                fps: 30.0,
                au_counts: std::array::from_fn(|_| rng.random_range(0..frames / 2)),
            });
        }
    }
    videos
}

pub fn pipeline() -> Verdict {
    let mut failures = Vec::new();
    // linear ramps at several frame-rate pairs
    for (src, dst) in [(15.0, 30.0), (25.0, 30.0), (24.0, 30.0), (30.0, 30.0), (60.0, 30.0)] {
        let n = 101;
        let ramp: Vec<f64> = (0..n).map(|i| -0.8 + 1.6 * i as f64 / (n - 1) as f64).collect();
        let out = interpolate_va(&ramp, src, dst).unwrap();
        let len = out.len();
        for (j, v) in out.iter().enumerate() {
            let want = -0.8 + 1.6 * j as f64 / (len - 1) as f64;
            if (v - want).abs() > 1e-12 {
                failures.push(format!("ramp {src}->{dst} at {j}: {v} vs {want}"));
                break;
            }
        }
        if out[0] != ramp[0] || out[len - 1] != ramp[n - 1] {
            failures.push(format!("ramp {src}->{dst} endpoints moved"));
        }
    }
    let track: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    for delta in [-2i64, -1, 1, 2] {
        let target = (100 + delta) as usize;
        let out = align_lengths(&track, target).unwrap();
        let ok = out.len() == target
            && out[..target.min(100)] == track[..target.min(100)]
            && out[100.min(target)..].iter().all(|&v| v == 0.99);
        if !ok {
            failures.push(format!("align_lengths to {target}"));
        }
    }
    if align_lengths(&track, 103).is_ok() || align_lengths(&track, 97).is_ok() {
        failures.push("align_lengths accepted a gap of 3".into());
    }

    let pick = |c: &[LandmarkCandidate], prev| select_face(c, prev).unwrap();
    if pick(&[square(0.0, 0.0), square(10.0, 10.0)], Some([1.0, 1.0])) != 0
        || pick(&[square(7.0, 7.0)], Some([-50.0, 0.0])) != 0
        || pick(&[square(-3.0, 0.0), square(3.0, 0.0), square(0.0, 3.0)], Some([0.0, 0.0])) != 0
        || pick(&[square(10.0, 10.0), square(0.0, 0.0)], None) != 0
        || pick(&[square(10.0, 10.0), square(0.0, 0.0)], Some([1.0, 0.0])) != 1
    {
        failures.push("select_face examples".into());
    }

    let mut fractions = (1.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let videos = random_videos(&mut rng);
        let r = match split_dataset(&videos, 0.8, seed, 200) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        fractions = (fractions.0.min(r.train_fraction), fractions.1.max(r.train_fraction));
        if !(0.78..=0.86).contains(&r.train_fraction) {
            failures.push(format!("seed {seed}: fraction {}", r.train_fraction));
        }
        let side = |id: &str| r.train.iter().any(|v| v == id);
        for a in &videos {
            for b in &videos {
                if a.identity_id == b.identity_id && side(&a.video_id) != side(&b.video_id) {
                    failures.push(format!("seed {seed}: {} split from {}", a.video_id, b.video_id));
                }
            }
        }
        if r.train.len() + r.test.len() != videos.len() || r.train.iter().any(|v| r.test.contains(v)) {
            failures.push(format!("seed {seed}: not a partition"));
        }
    }

    let mut counts = [0u64; NUM_AUS];
    counts[0] = 41_741;
    counts[5] = 222_241 - 41_741;
    let pct = au_percentages(&counts)[0];
    if (pct - 18.78).abs() > 0.01 {
        failures.push(format!("41,741/222,241 gives {pct}"));
    }
    Verdict::from_failures(
        failures,
        format!(
            "ramps exact, align/select rules hold, 100 splits identity-closed with fractions {:.3}..{:.3}, AU-1 {pct:.2}%",
            fractions.0, fractions.1
        ),
    )
}

// ---------------------------------------------------------------- 9

pub fn serialization(work: &Path) -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for head in canonical_heads() {
        let model: GanModel = models::build_categorical(head, 28, &mut rng).unwrap();
        let state = RngState::capture(&rng);
        let path = work.join("round.cgan");
        checkpoint::save(&path, &model, 1234, &state).unwrap();
        let back = checkpoint::load::<f64>(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        if back.iteration != 1234 || back.rng != state || checkpoint::to_bytes(&back.model, 1234, &back.rng) != bytes {
            failures.push(format!("{head:?}: checkpoint bytes differ after reload"));
        }
        let x = Tensor::from_fn(&[2, 28, 28, 3], |i| ((i % 17) as f64 / 8.0) - 1.0);
        let (a, b) = (model.logits(&x).unwrap(), back.model.logits(&x).unwrap());
        if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            failures.push(format!("{head:?}: forward outputs differ after reload"));
        }
    }

    let records: Vec<PackedRecord> = (0..7)
        .map(|i| {
            let presence = std::array::from_fn(|k| rng.random_bool(0.3) || k == i);
            PackedRecord {
                presence,
                intensity: presence.map(u8::from),
                valence: rng.random_range(-1.0..=1.0),
                arousal: rng.random_range(-1.0..=1.0),
            }
        })
        .collect();
    let images: Vec<u8> = (0..7 * 28 * 28 * 3).map(|_| rng.random()).collect();
    let packed = PackedDataset::new(28, 28, 3, images, records).unwrap();
    let bytes = packed.to_bytes();
    match PackedDataset::from_bytes(&bytes) {
        Ok(back) if back == packed && back.to_bytes() == bytes => {}
        _ => failures.push("packed dataset round trip".into()),
    }

    // seeded reruns, one on MNIST and one on packed AU/VA data
    let mnist = mnist::load(mnist_dir(), PixelRange::Signed).unwrap().to_rgb().unwrap();
    let (train_set, test) = mnist.subset(&(0..300).collect::<Vec<_>>()).unwrap().split_at(200).unwrap();
    let au: Samples = packed.to_samples(PixelRange::Signed).unwrap();
    let runs: [(&str, TrainConfig, &Samples, &Samples); 2] = [
        ("mnist", small(HeadVariant::Softmax { k: 10 }), &train_set, &test),
        (
            "joint",
            small(HeadVariant::Joint {
                va_loss: VaLoss::OneMinusCcc,
                weighting: Weighting::Ponderated,
            }),
            &au,
            &au,
        ),
    ];
    for (name, config, tr, te) in runs {
        let mut logs = Vec::new();
        for rerun in 0..2 {
            let out = work.join(format!("{name}-{rerun}"));
            train::train::<f64>(&config, tr, te, &out, |_| {}).unwrap();
            logs.push((
                std::fs::read(out.join(train::METRICS_FILE)).unwrap(),
                std::fs::read(out.join(train::CHECKPOINT_DIR).join(checkpoint::file_name(config.iterations))).unwrap(),
            ));
        }
        if logs[0].0 != logs[1].0 {
            failures.push(format!("{name}: metrics.tsv differs between seeded runs"));
        }
        if logs[0].1 != logs[1].1 {
            failures.push(format!("{name}: final checkpoint differs between seeded runs"));
        }
    }
    Verdict::from_failures(
        failures,
        "checkpoints and packed data bit-exact, seeded reruns identical (metrics.tsv and checkpoints)",
    )
}

fn small(head: HeadVariant) -> TrainConfig {
    let mut c = TrainConfig::categorical(head, 28);
    c.iterations = 13;
    c.checkpoint_every = 5;
    c.batch_size = 6;
    c.update_rate = 2;
    c
}

// ---------------------------------------------------------------- 10

pub fn metrics() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for batch in 0..1000 {
        let (b, l) = (rng.random_range(1..40), rng.random_range(1..10));
        let p_true = rng.random_range(0.0..1.0);
        let pred: Vec<bool> = (0..b * l).map(|_| rng.random_bool(p_true)).collect();
        let truth: Vec<bool> = (0..b * l).map(|_| rng.random_bool(0.5)).collect();
        let m = classification_metrics(&pred, &truth, l).unwrap();
        let (mut f1s, mut accs) = (0.0, 0.0);
        for label in 0..l {
            // brute-force 2x2 confusion matrix
            let mut cm = [[0usize; 2]; 2];
            for row in 0..b {
                let i = row * l + label;
                cm[usize::from(truth[i])][usize::from(pred[i])] += 1;
            }
            let (tp, fp, fn_, tn) = (cm[1][1] as f64, cm[0][1] as f64, cm[1][0] as f64, cm[0][0] as f64);
            let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
            let (p, r) = (div(tp, tp + fp), div(tp, tp + fn_));
            let f1 = div(2.0 * p * r, p + r);
            let acc = (tp + tn) / b as f64;
            let s = &m.per_label[label];
            if (s.precision - p).abs() > 1e-12 || (s.recall - r).abs() > 1e-12 || (s.f1 - f1).abs() > 1e-12 || (s.accuracy - acc).abs() > 1e-12 {
                failures.push(format!("batch {batch} label {label}: {s:?} vs p {p} r {r} f1 {f1} acc {acc}"));
            }
            f1s += f1;
            accs += acc;
        }
        let (mf, ma) = (f1s / l as f64, accs / l as f64);
        if (m.mean_f1 - mf).abs() > 1e-12 || (m.mean_accuracy - ma).abs() > 1e-12 || (m.mean_of_means - (mf + ma) / 2.0).abs() > 1e-12 {
            failures.push(format!("batch {batch}: means"));
        }
        if failures.len() > 5 {
            break;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.random_range(-0.5..1.5) + rng.random_range(-0.5..0.5)).collect();
        let c = losses::ccc(&x, &y).unwrap();
        worst = worst.max((c - ccc_direct(&x, &y)).abs());
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
            failures.push(format!("ccc {c} out of range"));
        }
        if (c - losses::ccc(&y, &x).unwrap()).abs() > 1e-12 {
            failures.push("ccc not symmetric".into());
        }
        if (losses::ccc(&x, &x).unwrap() - 1.0).abs() > 1e-12 {
            failures.push("ccc(x, x) != 1".into());
        }
        let mx = mean(&x);
        let mirror: Vec<f64> = x.iter().map(|v| 2.0 * mx - v).collect();
        if (losses::ccc(&x, &mirror).unwrap() + 1.0).abs() > 1e-12 {
            failures.push("ccc against the mirrored series is not -1".into());
        }
        if failures.len() > 5 {
            break;
        }
    }
    if worst > 1e-12 {
        failures.push(format!("ccc differs from direct moments by {worst:.1e}"));
    }
    Verdict::from_failures(failures, format!("1000 batches match the confusion oracle; CCC within {worst:.1e}"))
}
