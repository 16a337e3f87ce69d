//! Central finite-difference checks of reverse-mode gradients.
//!
//! A case registers its inputs as parameters, builds a graph, and is reduced
//! to a scalar by a fixed random projection `L = Σ r ⊙ out`. The projection is
//! evaluated in f64 outside the tape so finite differences see as little
//! rounding as possible.

use serde::Serialize;

use super::ops::{cross_attention, AttentionVars};
use super::{seeded_rng, NumericsError, ParamStore, Tape, Tensor, Var};

pub type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>>;

pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
    /// Score all inputs as one concatenated gradient vector instead of the
    /// worst input. Used for whole networks, where some parameter tensors
    /// have gradients too small to resolve individually in f32.
    pub joint: bool,
}

impl GradCheckCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
            joint: false,
        }
    }

    pub fn joint(mut self) -> Self {
        self.joint = true;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.op.as_str()).collect()
    }
}

/// Step for small toy networks, where f32 rounding stays well below the signal.
pub const FD_STEP: f32 = 1e-3;
/// Step for deeper composites (attention, the full denoiser); at 1e-3 their
/// f32 forward noise alone reaches the tolerance.
pub const FD_STEP_COMPOSITE: f32 = 1e-2;
/// Step for whole-network joint checks.
pub const FD_STEP_NETWORK: f32 = 3e-3;
pub const REL_TOL: f64 = 1e-3;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with tiny-norm pairs treated as agreeing.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-7 {
        0.0
    } else {
        diff / denom
    }
}

fn projected(tape: &Tape, out: Var, proj: &Tensor) -> f64 {
    tape.value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(&o, &r)| o as f64 * r as f64)
        .sum()
}

fn evaluate(case: &GradCheckCase, inputs: &[Tensor], proj: &Tensor) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(projected(&tape, out, proj))
}

/// Analytic and central-difference gradients of each input for one case.
pub fn input_gradients(
    case: &GradCheckCase,
    seed: u64,
    step: f32,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, NumericsError> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("in{i}"), t.clone()))
        .collect::<Result<_, _>>()?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let mut rng = seeded_rng(seed);
    let n = tape.value(out).numel();
    let proj = Tensor::randn(tape.shape(out), 1.0 / (n as f32).sqrt(), &mut rng);
    let weighted = tape.mul_const(out, proj.clone())?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss, &store)?;

    let mut out = Vec::with_capacity(ids.len());
    let mut inputs = case.inputs.clone();
    for (k, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(*id).data().iter().map(|&g| g as f64).collect();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + step;
            let plus = evaluate(case, &inputs, &proj)?;
            inputs[k].data_mut()[i] = orig - step;
            let minus = evaluate(case, &inputs, &proj)?;
            inputs[k].data_mut()[i] = orig;
            // Divide by the step actually realised in f32.
            let realised = ((orig + step) as f64) - ((orig - step) as f64);
            *slot = (plus - minus) / realised;
        }
        out.push((analytic, numeric));
    }
    Ok(out)
}

/// Relative error of each input's gradient for one case.
pub fn input_errors(case: &GradCheckCase, seed: u64, step: f32) -> Result<Vec<f64>, NumericsError> {
    Ok(input_gradients(case, seed, step)?
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .collect())
}

/// Runs one case; the error is the worst relative error across its inputs.
pub fn check_case(case: &GradCheckCase, seed: u64, step: f32) -> Result<GradCheckEntry, NumericsError> {
    let grads = input_gradients(case, seed, step)?;
    let worst = if case.joint {
        let a: Vec<f64> = grads.iter().flat_map(|(a, _)| a.iter().copied()).collect();
        let n: Vec<f64> = grads.iter().flat_map(|(_, n)| n.iter().copied()).collect();
        relative_error(&a, &n)
    } else {
        grads.iter().map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
    };
    Ok(GradCheckEntry {
        op: case.name.clone(),
        max_rel_err: worst,
        passed: worst < REL_TOL,
    })
}

pub fn run(cases: &[GradCheckCase], seed: u64, step: f32) -> Result<GradCheckReport, NumericsError> {
    let entries = cases
        .iter()
        .enumerate()
        .map(|(i, c)| check_case(c, seed.wrapping_add(i as u64), step))
        .collect::<Result<_, _>>()?;
    Ok(GradCheckReport { entries })
}

/// One case per differentiable primitive plus the composite cross-attention.
pub fn standard_cases(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = seeded_rng(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let positive_weight = Tensor::rand_uniform(&[3, 4], 0.2, 2.0, &mut seeded_rng(seed ^ 0x5eed));
    let target = Tensor::randn(&[2, 3, 4], 1.0, &mut seeded_rng(seed ^ 0x7a7));
    let mask = Tensor::new(&[2, 3], vec![0.0, 1.25, 1.25, 0.0, 1.25, 1.25]).expect("mask");
    vec![
        GradCheckCase::new("add", vec![r(&[2, 3]), r(&[2, 3])], |t, v| t.add(v[0], v[1])),
        GradCheckCase::new("sub", vec![r(&[2, 3]), r(&[2, 3])], |t, v| t.sub(v[0], v[1])),
        GradCheckCase::new("mul", vec![r(&[2, 3]), r(&[2, 3])], |t, v| t.mul(v[0], v[1])),
        GradCheckCase::new("scale", vec![r(&[4])], |t, v| t.scale(v[0], -1.7)),
        GradCheckCase::new("mul_const", vec![r(&[2, 3])], move |t, v| t.mul_const(v[0], mask.clone())),
        GradCheckCase::new("add_channel", vec![r(&[3, 2, 2]), r(&[3])], |t, v| t.add_channel(v[0], v[1])),
        GradCheckCase::new("add_row", vec![r(&[4, 3]), r(&[3])], |t, v| t.add_row(v[0], v[1])),
        GradCheckCase::new("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1])),
        GradCheckCase::new("transpose", vec![r(&[3, 2])], |t, v| t.transpose(v[0])),
        GradCheckCase::new("reshape", vec![r(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        GradCheckCase::new("softmax", vec![r(&[3, 5])], |t, v| t.softmax_rows(v[0])),
        GradCheckCase::new("conv2d", vec![r(&[2, 5, 4]), r(&[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1])),
        GradCheckCase::new("group_norm", vec![r(&[4, 3, 3]), r(&[4]), r(&[4])], |t, v| {
            t.group_norm(v[0], v[1], v[2], 2, 1e-5)
        }),
        GradCheckCase::new("silu", vec![r(&[2, 4])], |t, v| t.silu(v[0])),
        GradCheckCase::new("avg_pool", vec![r(&[2, 4, 4])], |t, v| t.avg_pool(v[0], 2)),
        GradCheckCase::new("upsample", vec![r(&[2, 2, 3])], |t, v| t.upsample(v[0], 2)),
        GradCheckCase::new("concat", vec![r(&[2, 3]), r(&[1, 3])], |t, v| t.concat(&[v[0], v[1]])),
        GradCheckCase::new("weighted_mse", vec![r(&[2, 3, 4])], move |t, v| {
            t.weighted_mse(v[0], &target, &positive_weight)
        }),
        GradCheckCase::new("sum", vec![r(&[3, 2])], |t, v| t.sum(v[0])),
        GradCheckCase::new(
            "cross_attention",
            vec![r(&[4, 3]), r(&[5, 2]), r(&[3, 4]), r(&[2, 4]), r(&[2, 4])],
            |t, v| {
                cross_attention(
                    t,
                    v[0],
                    v[1],
                    AttentionVars {
                        wq: v[2],
                        wk: v[3],
                        wv: v[4],
                    },
                )
            },
        ),
    ]
}

/// Negative control: `x²` recorded with the wrong derivative (`x` instead of `2x`).
pub fn broken_square_case(seed: u64) -> GradCheckCase {
    let mut rng = seeded_rng(seed);
    let x = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
    GradCheckCase::new("broken_square", vec![x], |t, v| {
        let value = t.value(v[0]).map(|x| x * x);
        t.custom(
            "broken_square",
            &[v[0]],
            value,
            Box::new(|inputs, _out, g| vec![inputs[0].zip_map(g, |x, g| x * g).expect("shape")]),
        )
    })
}
