//! Finite-difference gradient suites over every tape op and each model
//! architecture, shared by the gradient tests and the acceptance run.

use crosstask_core::attention::{attention_pool, mha_block, AttnPoolParams, MhaParams, PoolHead};
use crosstask_core::dsp::LogMelConfig;
use crosstask_core::models::params::BoundParams;
use crosstask_core::models::{ModelInput, ModelInstance, ModelKind, ModelSpec, Strategy};
use crosstask_core::tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crosstask_core::tensor::{Result, Tape, Tensor, TensorError, Var};
use crosstask_core::training::{cross_entropy_hard_tape, distill_loss_tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rand_vec;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

pub fn options(max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        step: STEP,
        rel_tol: REL_TOL,
        abs_tol: ABS_TOL,
        max_coords,
        seed: 11,
    }
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, scale)).unwrap()
}

/// Reduces any tensor to a scalar through fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 ^ 0xabc);
    let w = rand_vec(&mut rng, n, 1.0);
    tape.dot_const(y, &w)
}

fn other(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid {
        op: "gradcheck",
        detail: e.to_string(),
    }
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut cases: Vec<OpCase> = Vec::new();
    cases.push((
        "matmul",
        vec![rt(&mut r, &[3, 4], 1.0), rt(&mut r, &[4, 5], 1.0)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "transpose",
        vec![rt(&mut r, &[3, 4], 1.0)],
        Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            project(t, y)
        }),
    ));
    cases.push((
        "add",
        vec![rt(&mut r, &[2, 3], 1.0), rt(&mut r, &[2, 3], 1.0)],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "add_bias",
        vec![rt(&mut r, &[4, 3], 1.0), rt(&mut r, &[3], 1.0)],
        Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "mul",
        vec![rt(&mut r, &[2, 3], 1.0), rt(&mut r, &[2, 3], 1.0)],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "scale",
        vec![rt(&mut r, &[5], 1.0)],
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y)
        }),
    ));
    cases.push((
        "relu",
        vec![rt(&mut r, &[4, 4], 1.0)],
        Box::new(|t, v| {
            let y = t.relu(v[0])?;
            project(t, y)
        }),
    ));
    cases.push((
        "tanh",
        vec![rt(&mut r, &[4, 4], 2.0)],
        Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            project(t, y)
        }),
    ));
    for axis in 0..2 {
        cases.push((
            if axis == 0 { "softmax_axis0" } else { "softmax_axis1" },
            vec![rt(&mut r, &[3, 4], 2.0)],
            Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y)
            }),
        ));
    }
    cases.push((
        "log_softmax",
        vec![rt(&mut r, &[3, 5], 2.0)],
        Box::new(|t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y)
        }),
    ));
    cases.push((
        "layernorm",
        vec![rt(&mut r, &[3, 6], 2.0), rt(&mut r, &[6], 1.0), rt(&mut r, &[6], 1.0)],
        Box::new(|t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }),
    ));
    cases.push((
        "dropout",
        vec![rt(&mut r, &[4, 5], 1.0)],
        Box::new(|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = t.dropout(v[0], 0.3, true, &mut rng)?;
            project(t, y)
        }),
    ));
    cases.push((
        "conv2d",
        vec![rt(&mut r, &[2, 2, 5, 4], 1.0), rt(&mut r, &[3, 2, 3, 3], 1.0), rt(&mut r, &[3], 1.0)],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y)
        }),
    ));
    cases.push((
        "maxpool2d",
        vec![rt(&mut r, &[1, 2, 6, 5], 1.0)],
        Box::new(|t, v| {
            let y = t.maxpool2d(v[0], 2)?;
            project(t, y)
        }),
    ));
    cases.push((
        "reshape",
        vec![rt(&mut r, &[2, 6], 1.0)],
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y)
        }),
    ));
    cases.push((
        "permute",
        vec![rt(&mut r, &[2, 3, 4], 1.0)],
        Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "concat",
        vec![rt(&mut r, &[2, 3], 1.0), rt(&mut r, &[2, 2], 1.0)],
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y)
        }),
    ));
    cases.push((
        "slice",
        vec![rt(&mut r, &[5, 3], 1.0)],
        Box::new(|t, v| {
            let y = t.slice(v[0], 0, 1, 3)?;
            project(t, y)
        }),
    ));
    cases.push((
        "mean_axis",
        vec![rt(&mut r, &[4, 3], 1.0)],
        Box::new(|t, v| {
            let y = t.mean_axis(v[0], 0)?;
            project(t, y)
        }),
    ));
    cases.push((
        "sum",
        vec![rt(&mut r, &[3, 3], 1.0)],
        Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            t.sum(y)
        }),
    ));
    cases.push((
        "linear",
        vec![rt(&mut r, &[3, 4], 1.0), rt(&mut r, &[4, 2], 1.0), rt(&mut r, &[2], 1.0)],
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y)
        }),
    ));
    let (d, dkv, heads) = (6, 5, 2);
    cases.push((
        "mha_block",
        vec![
            rt(&mut r, &[4, d], 1.0),
            rt(&mut r, &[3, dkv], 1.0),
            rt(&mut r, &[d, d], 0.7),
            rt(&mut r, &[dkv, d], 0.7),
            rt(&mut r, &[dkv, d], 0.7),
            rt(&mut r, &[d, d], 0.7),
            rt(&mut r, &[d], 1.0),
            rt(&mut r, &[d], 1.0),
        ],
        Box::new(move |t, v| {
            let p = MhaParams {
                w_q: v[2],
                w_k: v[3],
                w_v: v[4],
                w_o: v[5],
                ln_gain: v[6],
                ln_shift: v[7],
                n_heads: heads,
                dropout: 0.2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let out = mha_block(t, v[0], v[1], &p, true, &mut rng)?;
            project(t, out.output)
        }),
    ));
    cases.push((
        "attention_pool",
        vec![
            rt(&mut r, &[5, 4], 1.0),
            rt(&mut r, &[4, 3], 1.0),
            rt(&mut r, &[3, 1], 1.0),
            rt(&mut r, &[4, 2], 1.0),
            rt(&mut r, &[4, 3], 1.0),
            rt(&mut r, &[3, 1], 1.0),
            rt(&mut r, &[4, 2], 1.0),
        ],
        Box::new(|t, v| {
            let heads = vec![
                PoolHead { w1: v[1], w2: v[2], wv: v[3] },
                PoolHead { w1: v[4], w2: v[5], wv: v[6] },
            ];
            let out = attention_pool(t, v[0], &AttnPoolParams { heads })?;
            project(t, out.pooled)
        }),
    ));
    cases.push((
        "cross_entropy_hard",
        vec![rt(&mut r, &[5], 2.0)],
        Box::new(|t, v| cross_entropy_hard_tape(t, v[0], 3).map_err(other)),
    ));
    let q = {
        let raw: Vec<f64> = (0..5).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect::<Vec<_>>()
    };
    cases.push((
        "distill_loss",
        vec![rt(&mut r, &[5], 2.0)],
        Box::new(move |t, v| distill_loss_tape(t, v[0], &q, 2.0).map_err(other)),
    ));
    cases
}

/// One report per tape op, attention block and loss.
pub fn op_reports() -> Vec<(String, GradCheckReport)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_gradients(&inputs, |t, v| f(t, v), &options(None)).unwrap();
            (name.to_string(), report)
        })
        .collect()
}

/// Scale-1/8 model with short inputs for 64-bit gradient checks.
pub fn small_model(kind: ModelKind) -> (ModelInstance<f64>, ModelInput<f64>) {
    let n_mels = 16;
    let mut spec = ModelSpec::new(kind, 3);
    spec.n_mels = n_mels;
    spec.embedder.frames_per_embedding = 8;
    spec.strategy = if kind.uses_embedder() {
        Strategy::FineTuning
    } else {
        Strategy::FromScratch
    };
    let features = LogMelConfig {
        n_mels,
        ..LogMelConfig::default()
    };
    let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let model = ModelInstance::<f32>::new(spec, classes, features, 17)
        .unwrap()
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
    let x = rt(&mut rng, &[32, n_mels], 3.0);
    (model, ModelInput::from_features(x))
}

/// Checks every parameter tensor of `kind` through the full forward pass
/// and hard-label loss, probing up to `coords` entries per tensor.
pub fn model_report(kind: ModelKind, coords: usize) -> GradCheckReport {
    let (model, input) = small_model(kind);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    check_gradients(
        &inputs,
        |tape, vars| {
            let mut bound = BoundParams::default();
            for (n, v) in names.iter().zip(vars) {
                bound.insert(n.clone(), *v);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let out = model.forward(tape, &bound, &input, true, &mut rng).map_err(other)?;
            cross_entropy_hard_tape(tape, out.logits, 1).map_err(other)
        },
        &options(Some(coords)),
    )
    .unwrap()
}

pub const KINDS: [ModelKind; 4] = [ModelKind::Base, ModelKind::Vfm, ModelKind::Jrm, ModelKind::Cmam];
