//! Finite-difference cases shared by the gradient tests and the acceptance run.

use catgan::conv::Padding;
use catgan::gradcheck::{self, GradCheck};
use catgan::layers::ParamSet;
use catgan::models::{self, GanModel, HeadVariant, LabelBatch};
use catgan::{Graph, Mode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub struct Case {
    pub name: String,
    pub checks: Vec<GradCheck>,
}

impl Case {
    pub fn worst(&self) -> f64 {
        gradcheck::worst(&self.checks)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values kept away from 0 so |x| kinks are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Reduces any node to a scalar through a fixed random projection.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(g.shape(y), &mut rng);
    let w = g.input(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

fn p(g: &mut Graph, ps: &ParamSet, name: &str) -> Result<Var> {
    g.param(name, ps.get(name).expect("registered"), true)
}

type Build = Box<dyn Fn(&mut Graph, &ParamSet) -> Result<Var>>;

fn run(name: &str, ps: ParamSet, build: Build) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let checks = gradcheck::check(&ps, build, H, None, &mut rng).expect(name);
    Case {
        name: name.to_string(),
        checks,
    }
}

/// One case per differentiable operation.
pub fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = Vec::new();
    let ab = |rng: &mut ChaCha8Rng| params(vec![("a", randn(&[3, 4], rng)), ("b", randn(&[3, 4], rng))]);

    macro_rules! binary {
        ($name:literal, $op:ident) => {
            cases.push(run(
                $name,
                ab(&mut rng),
                Box::new(|g, ps| {
                    let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                    let y = g.$op(a, b)?;
                    project(g, y, 1)
                }),
            ));
        };
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);

    macro_rules! unary {
        ($name:literal, $init:expr, |$g:ident, $x:ident| $body:expr) => {
            let t = $init;
            cases.push(run(
                $name,
                params(vec![("x", t)]),
                Box::new(|$g, ps| {
                    let $x = p($g, ps, "x")?;
                    let y = $body;
                    project($g, y, 2)
                }),
            ));
        };
    }
    unary!("affine_scalar", randn(&[2, 5], &mut rng), |g, x| g.affine_scalar(x, 1.7, -0.3)?);
    unary!("square", randn(&[2, 5], &mut rng), |g, x| g.square(x)?);
    unary!("relu", away_from_zero(&[2, 5], &mut rng), |g, x| g.relu(x)?);
    unary!("leaky_relu", away_from_zero(&[2, 5], &mut rng), |g, x| g.leaky_relu(x, 0.54, 0.4)?);
    unary!("sigmoid", randn(&[2, 5], &mut rng), |g, x| g.sigmoid(x)?);
    unary!("tanh", randn(&[2, 5], &mut rng), |g, x| g.tanh(x)?);
    unary!("softmax", randn(&[3, 4], &mut rng), |g, x| g.softmax(x)?);
    unary!("global_avg_pool", randn(&[2, 3, 3, 4], &mut rng), |g, x| g.global_avg_pool(x)?);
    unary!("reshape", randn(&[2, 6], &mut rng), |g, x| g.reshape(x, &[3, 4])?);
    unary!("flatten", randn(&[2, 2, 3], &mut rng), |g, x| g.flatten(x)?);
    unary!("slice_cols", randn(&[3, 5], &mut rng), |g, x| g.slice_cols(x, 1, 4)?);
    unary!("sum", randn(&[3, 2], &mut rng), |g, x| g.sum(x)?);
    unary!("mean", randn(&[3, 2], &mut rng), |g, x| g.mean(x)?);
    unary!("log_clamp", Tensor::from_fn(&[2, 3], |i| 0.1 + 0.13 * i as f64), |g, x| g.log_clamp(x, 1e-12, 1.0 - 1e-12)?);
    unary!("dropout", randn(&[4, 5], &mut rng), |g, x| {
        g.dropout(x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9))?
    });
    unary!("sigmoid_ce", randn(&[3, 4], &mut rng), |g, x| {
        let t = Tensor::from_fn(&[3, 4], |i| (i % 5) as f64 / 4.0);
        g.sigmoid_ce(x, &t)?
    });
    unary!("softmax_ce", randn(&[3, 4], &mut rng), |g, x| {
        let t = Tensor::from_f64(vec![3, 4], &[0.0, 1.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25])?;
        g.softmax_ce(x, &t)?
    });

    cases.push(run(
        "matmul+add_bias",
        params(vec![
            ("x", randn(&[3, 4], &mut rng)),
            ("w", randn(&[4, 2], &mut rng)),
            ("b", randn(&[2], &mut rng)),
        ]),
        Box::new(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            let y = g.affine(x, w, b)?;
            project(g, y, 3)
        }),
    ));

    for (stride, padding, hw, k) in [
        (1, Padding::Same, 5, 3),
        (2, Padding::Same, 6, 5),
        (2, Padding::Valid, 7, 3),
        (2, Padding::Same, 7, 2),
    ] {
        cases.push(run(
            &format!("conv2d s{stride} {padding:?} {hw}x{hw} k{k}"),
            params(vec![
                ("x", randn(&[2, hw, hw, 2], &mut rng)),
                ("f", randn(&[k, k, 2, 3], &mut rng)),
            ]),
            Box::new(move |g, ps| {
                let (x, f) = (p(g, ps, "x")?, p(g, ps, "f")?);
                let y = g.conv2d(x, f, (stride, stride), padding)?;
                project(g, y, 4)
            }),
        ));
    }
    for (stride, padding, hw, k) in [
        (1, Padding::Valid, 1, 2),
        (2, Padding::Valid, 2, 4),
        (2, Padding::Valid, 3, 2),
        (2, Padding::Same, 3, 3),
    ] {
        cases.push(run(
            &format!("conv2d_transpose s{stride} {padding:?} {hw}x{hw} k{k}"),
            params(vec![
                ("x", randn(&[2, hw, hw, 3], &mut rng)),
                ("f", randn(&[k, k, 2, 3], &mut rng)),
            ]),
            Box::new(move |g, ps| {
                let (x, f) = (p(g, ps, "x")?, p(g, ps, "f")?);
                let y = g.conv2d_transpose(x, f, (stride, stride), padding)?;
                project(g, y, 5)
            }),
        ));
    }

    let bn = |rng: &mut ChaCha8Rng| {
        params(vec![
            ("x", randn(&[4, 2, 2, 3], rng)),
            ("gamma", randn(&[3], rng)),
            ("beta", randn(&[3], rng)),
        ])
    };
    cases.push(run(
        "batch_norm (train)",
        bn(&mut rng),
        Box::new(|g, ps| {
            let (x, ga, be) = (p(g, ps, "x")?, p(g, ps, "gamma")?, p(g, ps, "beta")?);
            let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
            project(g, y, 6)
        }),
    ));
    cases.push(run(
        "batch_norm (inference)",
        bn(&mut rng),
        Box::new(|g, ps| {
            let (x, ga, be) = (p(g, ps, "x")?, p(g, ps, "gamma")?, p(g, ps, "beta")?);
            let y = g.batch_norm_infer(x, ga, be, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
            project(g, y, 6)
        }),
    ));

    let pair = |rng: &mut ChaCha8Rng| params(vec![("pred", randn(&[6, 1], rng)), ("obs", randn(&[6, 1], rng))]);
    cases.push(run(
        "one_minus_ccc",
        pair(&mut rng),
        Box::new(|g, ps| {
            let (a, b) = (p(g, ps, "pred")?, p(g, ps, "obs")?);
            g.one_minus_ccc(a, b)
        }),
    ));
    let mut hp = pair(&mut rng);
    // residuals on both sides of the knee at delta = 0.5
    hp.get_mut("pred").unwrap().data_mut().copy_from_slice(&[0.9, -0.8, 0.1, 0.2, -1.4, 0.05]);
    hp.get_mut("obs").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    cases.push(run(
        "huber",
        hp,
        Box::new(|g, ps| {
            let (a, b) = (p(g, ps, "pred")?, p(g, ps, "obs")?);
            g.huber(a, b, 0.5)
        }),
    ));
    cases.push(run(
        "mean_of+weighted_sum",
        ab(&mut rng),
        Box::new(|g, ps| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let m = g.mean_of(&[a, b])?;
            let w = g.weighted_sum(&[(m, 0.3), (b, -1.2)])?;
            project(g, w, 7)
        }),
    ));
    cases
}

pub fn labels_for(batch: usize, rng: &mut ChaCha8Rng) -> LabelBatch {
    LabelBatch {
        au: (0..batch).map(|_| std::array::from_fn(|_| rng.random_bool(0.4))).collect(),
        valence: (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect(),
        arousal: (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect(),
        class: (0..batch).map(|_| rng.random_range(0..10)).collect(),
    }
}

/// Which loss an end-to-end case differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    D,
    G,
}

/// d_loss or g_loss of a full categorical model, batch norm in inference
/// mode, every parameter of both networks checked on sampled elements.
pub fn end_to_end(head: HeadVariant, which: Which, sample: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model: GanModel = models::build_categorical(head, 28, &mut rng).unwrap();
    // non-trivial running statistics
    for net in [&mut model.generator, &mut model.discriminator] {
        for (name, t) in net.buffers.iter_mut() {
            let var = name.ends_with("running_var");
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.2..0.2) });
        }
    }
    let batch = 3;
    let labels = labels_for(batch, &mut rng);
    let real = Tensor::from_fn(&[batch, 28, 28, 3], |_| rng.random_range(-1.0..1.0));
    let noise: Tensor = GanModel::sample_noise(batch, &mut rng);
    let mut all = model.generator.params.clone();
    for (n, t) in model.discriminator.params.iter() {
        all.insert(n, t.clone());
    }
    let build = move |g: &mut Graph, ps: &ParamSet| -> Result<Var> {
        let mut m = model.clone();
        for net in [&mut m.generator, &mut m.discriminator] {
            for (n, t) in net.params.iter_mut() {
                *t = ps.get(n).expect("param").clone();
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let z = g.input(noise.clone())?;
        let (fake, _) = m.generator.forward(g, z, Mode::Infer, true, &mut r)?;
        let x = g.input(real.clone())?;
        let dr = m.discriminate(g, x, Mode::Infer, true, &mut r)?;
        let df = m.discriminate(g, fake, Mode::Infer, true, &mut r)?;
        match which {
            Which::D => Ok(models::head_loss(g, head, dr.logits, df.logits, &labels, 0.9)?.0),
            Which::G => {
                let pf = models::fake_prob(g, Some(head), df.logits)?;
                Ok(models::generator_loss(g, pf, x, fake, 300, false)?.0)
            }
        }
    };
    let checks = gradcheck::check(&all, build, 1e-6, Some(sample), &mut rng).unwrap();
    Case {
        name: format!("{which:?} loss, {head:?}"),
        checks,
    }
}
