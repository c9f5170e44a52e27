//! Shared fixtures: toy models and the finite-difference gradient oracle.
#![allow(dead_code)]

use std::path::PathBuf;

use profe::distill::{self, DistillConfig, TeacherOutputs};
use profe::nn::{LabelBatch, MlpSpec, SplitModel, Tape, Tensor, Var};
use profe::prototype::{aggregate_global, proto_mse_on, GlobalPrototypeTable, Prototype};
use profe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-3;

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("PROFE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub struct Fixture {
    pub x: Tensor,
    pub labels: LabelBatch,
    pub table: GlobalPrototypeTable,
    pub teacher_logits: Tensor,
    pub teacher_repr: Tensor,
    pub cfg: DistillConfig,
}

const INPUT: usize = 5;
const REPR: usize = 4;
const CLASSES: usize = 3;
const BATCH: usize = 8;
const KINK_MARGIN: f64 = 0.02;

fn f64_params(model: &SplitModel) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|p| p.values().iter().map(|&v| v as f64).collect())
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn toy_model(seed: u64) -> SplitModel {
    let spec = MlpSpec {
        input: INPUT,
        hidden: vec![6],
        repr_width: REPR,
        classes: CLASSES,
    };
    SplitModel::mlp(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Random batch plus a global table that covers classes 0 and 2 but not 1.
pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
    let protos = vec![
        Prototype {
            class_id: 0,
            vector: (0..REPR).map(|_| rng.random_range(0.0..1.0)).collect(),
            count: 3,
        },
        Prototype {
            class_id: 2,
            vector: (0..REPR).map(|_| rng.random_range(0.0..1.0)).collect(),
            count: 5,
        },
    ];
    // Keep every ReLU input clear of 0 so central differences stay on one side of the kink.
    let model = toy_model(seed);
    let params = f64_params(&model);
    let x = loop {
        let x = random_tensor(&mut rng, vec![BATCH, INPUT], -1.0, 1.0);
        if reference_forward(&params, &model.param_shapes(), &x).kink_margin > KINK_MARGIN {
            break x;
        }
    };
    Fixture {
        x,
        labels: LabelBatch::new(labels, CLASSES).unwrap(),
        table: aggregate_global(&[(0, protos)], false).unwrap(),
        teacher_logits: random_tensor(&mut rng, vec![BATCH, CLASSES], -2.0, 2.0),
        teacher_repr: random_tensor(&mut rng, vec![BATCH, REPR], 0.0, 1.0),
        cfg: DistillConfig {
            temperature: 2.0,
            alpha_s: 0.5,
            beta_s: 0.8,
            beta_t: 0.7,
            beta_limit: 0.1,
        },
    }
}

/// A loss term recorded on top of the model's `(repr, logits)`.
pub type Term = fn(&mut Tape, Var, Var, &Fixture) -> Result<Var>;

/// The same term evaluated by the f64 reference below.
pub type RefTerm = fn(&Reference, &Fixture) -> f64;

fn teacher(f: &Fixture) -> TeacherOutputs<'_> {
    TeacherOutputs {
        logits: &f.teacher_logits,
        repr: &f.teacher_repr,
    }
}

pub fn terms() -> Vec<(&'static str, Term, RefTerm)> {
    vec![
        (
            "cross entropy",
            |t, _, l, f| t.cross_entropy(l, &f.labels),
            |r, f| ref_ce(&r.logits, f),
        ),
        (
            "distillation KL (kd_loss)",
            |t, _, l, f| {
                let yt = t.constant(f.teacher_logits.clone())?;
                distill::kd_loss_on(t, l, yt, f.cfg.temperature)
            },
            |r, f| ref_kd(&r.logits, f),
        ),
        (
            "cross entropy + distillation",
            |t, r, l, f| {
                let cfg = DistillConfig { beta_s: 0.0, ..f.cfg };
                distill::student_loss_on(t, l, r, Some(teacher(f)), &f.labels, &f.table, &cfg)
            },
            |r, f| ref_ce(&r.logits, f) + f.cfg.alpha_s as f64 * (ref_kd(&r.logits, f) + ref_repr_mse(&r.repr, f)),
        ),
        (
            "prototype MSE",
            |t, r, _, f| proto_mse_on(t, r, &f.labels, &f.table),
            |r, f| ref_proto(&r.repr, f),
        ),
        (
            "student objective",
            |t, r, l, f| distill::student_loss_on(t, l, r, Some(teacher(f)), &f.labels, &f.table, &f.cfg),
            |r, f| {
                ref_ce(&r.logits, f)
                    + f.cfg.beta_s as f64 * ref_proto(&r.repr, f)
                    + f.cfg.alpha_s as f64 * (ref_kd(&r.logits, f) + ref_repr_mse(&r.repr, f))
            },
        ),
        (
            "teacher objective",
            |t, r, l, f| distill::teacher_loss_on(t, l, r, &f.labels, &f.table, f.cfg.beta_t),
            |r, f| ref_ce(&r.logits, f) + f.cfg.beta_t as f64 * ref_proto(&r.repr, f),
        ),
    ]
}

/// Forward pass of the toy MLP in f64: rows of representation and logits.
pub struct Reference {
    pub repr: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Smallest |pre-activation| seen by a ReLU.
    pub kink_margin: f64,
}

/// Parameters in wire order: W1 `[in,h]`, b1, W2 `[h,d]`, b2, W3 `[d,n]`, b3.
fn reference_forward(params: &[Vec<f64>], shapes: &[Vec<usize>], x: &Tensor) -> Reference {
    let linear = |input: &[f64], w: &[f64], b: &[f64], shape: &[usize]| -> Vec<f64> {
        let (k, m) = (shape[0], shape[1]);
        (0..m)
            .map(|j| b[j] + (0..k).map(|i| input[i] * w[i * m + j]).sum::<f64>())
            .collect()
    };
    let mut kink_margin = f64::INFINITY;
    let mut relu = |v: Vec<f64>| {
        v.into_iter()
            .map(|a| {
                kink_margin = kink_margin.min(a.abs());
                a.max(0.0)
            })
            .collect::<Vec<_>>()
    };
    let mut repr = Vec::new();
    let mut logits = Vec::new();
    for r in 0..x.rows() {
        let input: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let h = relu(linear(&input, &params[0], &params[1], &shapes[0]));
        let d = relu(linear(&h, &params[2], &params[3], &shapes[2]));
        logits.push(linear(&d, &params[4], &params[5], &shapes[4]));
        repr.push(d);
    }
    Reference {
        repr,
        logits,
        kink_margin,
    }
}

fn ref_log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|v| v / t).collect();
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn ref_ce(logits: &[Vec<f64>], f: &Fixture) -> f64 {
    let labels = f.labels.labels();
    logits.iter().zip(labels).map(|(row, &y)| -ref_log_softmax(row, 1.0)[y]).sum::<f64>() / logits.len() as f64
}

fn ref_kd(logits: &[Vec<f64>], f: &Fixture) -> f64 {
    let t = f.cfg.temperature as f64;
    let kl: f64 = logits
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let yt: Vec<f64> = f.teacher_logits.row(r).iter().map(|&v| v as f64).collect();
            let lp = ref_log_softmax(&yt, t);
            let lq = ref_log_softmax(row, t);
            lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum();
    kl / logits.len() as f64 * t * t
}

fn ref_repr_mse(repr: &[Vec<f64>], f: &Fixture) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (r, row) in repr.iter().enumerate() {
        for (a, &b) in row.iter().zip(f.teacher_repr.row(r)) {
            s += (a - b as f64).powi(2);
            n += 1;
        }
    }
    s / n as f64
}

fn ref_proto(repr: &[Vec<f64>], f: &Fixture) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (row, &y) in repr.iter().zip(f.labels.labels()) {
        if let Some(p) = f.table.get(y) {
            s += row.iter().zip(&p.vector).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / row.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Worst norm-wise relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)` over the
/// model's parameter tensors. `g` comes from the tape; `fd` from central
/// differences of step [`FD_STEP`] on the independent f64 reference.
pub fn gradient_error(seed: u64, term: Term, reference: RefTerm) -> f64 {
    let f = fixture(seed);
    let mut model = toy_model(seed);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let (r, l) = model.forward_tape(&mut tape, &bound, &f.x).unwrap();
    let loss = term(&mut tape, r, l, &f).unwrap();
    tape.backward(loss).unwrap();
    model.collect_grads(&tape, &bound).unwrap();
    let analytic: Vec<Vec<f32>> = model.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();

    let shapes = model.param_shapes();
    let base = f64_params(&model);
    let h = FD_STEP as f64;
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        let (mut diff2, mut g2, mut fd2) = (0.0f64, 0.0f64, 0.0f64);
        for (j, &gj) in g.iter().enumerate() {
            let mut p = base.clone();
            p[pi][j] += h;
            let plus = reference(&reference_forward(&p, &shapes, &f.x), &f);
            p[pi][j] -= 2.0 * h;
            let minus = reference(&reference_forward(&p, &shapes, &f.x), &f);
            let fd = (plus - minus) / (2.0 * h);
            diff2 += (gj as f64 - fd).powi(2);
            g2 += (gj as f64).powi(2);
            fd2 += fd * fd;
        }
        let denom = g2.sqrt().max(fd2.sqrt());
        worst = worst.max(if denom > 1e-6 { diff2.sqrt() / denom } else { diff2.sqrt() });
    }
    worst
}

/// The reference must agree with the engine's own loss value.
pub fn reference_value_gap(seed: u64, term: Term, reference: RefTerm) -> f64 {
    let f = fixture(seed);
    let model = toy_model(seed);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let (r, l) = model.forward_tape(&mut tape, &bound, &f.x).unwrap();
    let loss = term(&mut tape, r, l, &f).unwrap();
    let want = reference(&reference_forward(&f64_params(&model), &model.param_shapes(), &f.x), &f);
    (tape.scalar(loss) as f64 - want).abs() / want.abs().max(1.0)
}
