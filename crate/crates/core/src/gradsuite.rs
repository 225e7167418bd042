//! Finite-difference checks of every differentiable operation and of the
//! full training objective on a micro model.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{encode, snippet_scores, video_score, EncoderConfig, ModelParams};
use crate::error::Result;
use crate::losses::{
    loss_contrastive, loss_regularisation, loss_snippet_topk, loss_total, loss_video, BatchOutputs, LossConfig,
    Pairing, Reduction,
};
use crate::mining::{mine_batch, MinedSets, MiningConfig, SnippetRef};
use crate::tensor_core::{
    grad_check, multi_head_self_attention, scaled_dot_product_attention, CustomOp, GradCheckConfig, GradCheckReport,
    QkvProjection, Tape, Tensor, Var,
};

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One function to check: named inputs and a scalar-valued closure.
pub struct Case {
    pub name: &'static str,
    pub params: Vec<(String, Tensor)>,
    pub f: Objective,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

/// Values bounded away from `[-gap, gap]`, for ops with a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(gap..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

/// Contracts any output with fixed pseudo-random weights, so that every
/// output element contributes to the checked scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.leaf(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

macro_rules! case {
    ($name:expr, $seed:expr, [$($p:expr),* $(,)?], |$tape:ident, $v:ident| $body:expr) => {{
        let seed = $seed;
        Case {
            name: $name,
            params: named(vec![$($p),*]),
            f: Box::new(move |$tape: &mut Tape, $v: &[Var]| {
                let out: Var = $body;
                project($tape, out, seed)
            }),
        }
    }};
}

/// The micro configuration of the end-to-end check.
pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        snippets: 8,
        input_dim: 4,
        model_dim: 8,
        heads: 2,
        depth: 2,
        // every parameter gets a nonzero gradient
        zero_init_residual: false,
        final_norm: true,
        ..EncoderConfig::default()
    }
}

/// Checks of every tensor operation for one seed.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let positive = |r: &mut ChaCha8Rng| {
        let data = (0..12).map(|_| r.random_range(0.5..2.0)).collect();
        Tensor::matrix(3, 4, data).unwrap()
    };
    let spaced = |r: &mut ChaCha8Rng| {
        // distinct values at least 0.1 apart, randomly ordered
        let mut vals: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 + r.random_range(0.0..0.1)).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        Tensor::matrix(6, 1, vals).unwrap()
    };
    let clamp_input = |r: &mut ChaCha8Rng| {
        let data = (0..12)
            .map(|_| loop {
                let x: f64 = r.random_range(-1.0..1.0);
                if (x.abs() - 0.5).abs() > 0.05 {
                    break x;
                }
            })
            .collect();
        Tensor::matrix(3, 4, data).unwrap()
    };
    vec![
        case!("add", seed, [("a", normal(r, 3, 4)), ("b", normal(r, 3, 4))], |t, v| t
            .add(v[0], v[1])?),
        case!("sub", seed, [("a", normal(r, 3, 4)), ("b", normal(r, 3, 4))], |t, v| t
            .sub(v[0], v[1])?),
        case!("mul", seed, [("a", normal(r, 3, 4)), ("b", normal(r, 3, 4))], |t, v| t
            .mul(v[0], v[1])?),
        case!(
            "add_row",
            seed,
            [("a", normal(r, 3, 4)), ("row", normal(r, 1, 4))],
            |t, v| t.add_row(v[0], v[1])?
        ),
        case!(
            "mul_row",
            seed,
            [("a", normal(r, 3, 4)), ("row", normal(r, 1, 4))],
            |t, v| t.mul_row(v[0], v[1])?
        ),
        case!(
            "add_col",
            seed,
            [("a", normal(r, 3, 4)), ("col", normal(r, 3, 1))],
            |t, v| t.add_col(v[0], v[1])?
        ),
        case!("scale", seed, [("a", normal(r, 3, 4))], |t, v| t.scale(v[0], 1.7)),
        case!("add_scalar", seed, [("a", normal(r, 3, 4))], |t, v| t
            .add_scalar(v[0], 0.3)),
        case!("one_minus", seed, [("a", normal(r, 3, 4))], |t, v| t.one_minus(v[0])),
        case!(
            "matmul",
            seed,
            [("a", normal(r, 3, 4)), ("b", normal(r, 4, 2))],
            |t, v| t.matmul(v[0], v[1])?
        ),
        case!("transpose", seed, [("a", normal(r, 3, 4))], |t, v| t.transpose(v[0])?),
        case!("sigmoid", seed, [("a", normal(r, 3, 4))], |t, v| t.sigmoid(v[0])),
        case!("exp", seed, [("a", normal(r, 3, 4))], |t, v| t.exp(v[0])),
        case!("log", seed, [("a", positive(r))], |t, v| t.log(v[0])),
        case!("gelu", seed, [("a", normal(r, 3, 4))], |t, v| t.gelu(v[0])),
        case!("relu", seed, [("a", away_from_zero(r, 3, 4, 0.05))], |t, v| t
            .relu(v[0])),
        case!("clamp", seed, [("a", clamp_input(r))], |t, v| t.clamp(v[0], -0.5, 0.5)),
        case!("softmax", seed, [("a", normal(r, 3, 4))], |t, v| t.softmax(v[0])),
        case!("layer_norm", seed, [("a", normal(r, 3, 4))], |t, v| t
            .layer_norm(v[0], 1e-5)),
        case!("l2_normalize_rows", seed, [("a", normal(r, 3, 4))], |t, v| t
            .l2_normalize_rows(v[0], 1e-12)),
        case!("sum", seed, [("a", normal(r, 3, 4))], |t, v| t.sum(v[0])),
        case!("mean", seed, [("a", normal(r, 3, 4))], |t, v| t.mean(v[0])),
        case!(
            "add_all",
            seed,
            [("a", normal(r, 2, 3)), ("b", normal(r, 2, 3)), ("c", normal(r, 2, 3))],
            |t, v| t.add_all(v)?
        ),
        case!("topk_mean", seed, [("a", spaced(r))], |t, v| t.topk_mean(v[0], 3)?),
        case!(
            "depthwise_conv1d",
            seed,
            [("x", normal(r, 5, 3)), ("kernel", normal(r, 3, 3))],
            |t, v| t.depthwise_conv1d(v[0], v[1])?
        ),
        case!(
            "dws_conv1d",
            seed,
            [
                ("x", normal(r, 5, 3)),
                ("depth", normal(r, 3, 3)),
                ("point", normal(r, 3, 2))
            ],
            |t, v| t.dws_conv1d(v[0], v[1], v[2])?
        ),
        case!("slice_rows", seed, [("a", normal(r, 4, 3))], |t, v| t
            .slice_rows(v[0], 1, 2)?),
        case!("slice_cols", seed, [("a", normal(r, 3, 4))], |t, v| t
            .slice_cols(v[0], 1, 2)?),
        case!(
            "concat_rows",
            seed,
            [("a", normal(r, 2, 3)), ("b", normal(r, 1, 3))],
            |t, v| t.concat_rows(v)?
        ),
        case!(
            "concat_cols",
            seed,
            [("a", normal(r, 3, 2)), ("b", normal(r, 3, 1))],
            |t, v| t.concat_cols(v)?
        ),
        case!("gather_rows", seed, [("a", normal(r, 4, 3))], |t, v| t
            .gather_rows(v[0], &[0, 2, 0])?),
        case!(
            "scaled_dot_product_attention",
            seed,
            [("q", normal(r, 4, 4)), ("k", normal(r, 4, 4)), ("v", normal(r, 4, 4))],
            |t, v| scaled_dot_product_attention(t, v[0], v[1], v[2], 2)?.output
        ),
        case!(
            "multi_head_self_attention",
            seed,
            [
                ("x", normal(r, 3, 4)),
                ("wq", normal(r, 4, 4)),
                ("wk", normal(r, 4, 4)),
                ("wv", normal(r, 4, 4))
            ],
            |t, v| multi_head_self_attention(
                t,
                v[0],
                &QkvProjection {
                    query: v[1],
                    key: v[2],
                    value: v[3]
                },
                2,
            )?
            .output
        ),
    ]
}

/// Score sequences `sigmoid(logits)` with well separated logits.
fn spaced_logits(r: &mut ChaCha8Rng, t_len: usize) -> Tensor {
    let mut vals: Vec<f64> = (0..t_len)
        .map(|i| -2.0 + i as f64 * 0.5 + r.random_range(0.0..0.2))
        .collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::matrix(t_len, 1, vals).unwrap()
}

/// Checks of each objective term in isolation for one seed.
pub fn loss_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let r = &mut r;
    let video_logits = normal(r, 4, 1);
    let seqs: Vec<(String, Tensor)> = (0..4).map(|i| (format!("logits{i}"), spaced_logits(r, 6))).collect();
    let feats: Vec<(String, Tensor)> = (0..4).map(|i| (format!("features{i}"), normal(r, 6, 5))).collect();
    let mined = MinedSets {
        hard_abnormal: vec![SnippetRef { video: 2, t: 1 }, SnippetRef { video: 3, t: 4 }],
        easy_abnormal: vec![
            SnippetRef { video: 2, t: 3 },
            SnippetRef { video: 3, t: 0 },
            SnippetRef { video: 3, t: 2 },
        ],
        hard_normal: vec![SnippetRef { video: 0, t: 5 }, SnippetRef { video: 1, t: 2 }],
        easy_normal: vec![SnippetRef { video: 0, t: 0 }, SnippetRef { video: 1, t: 4 }],
    };
    let labels = [false, false, true, true];
    let scores = |t: &mut Tape, v: &[Var]| -> Vec<Var> { v.iter().map(|&x| t.sigmoid(x)).collect() };
    vec![
        Case {
            name: "loss_video",
            params: vec![("logits".into(), video_logits)],
            f: Box::new(move |t, v| {
                let s = t.sigmoid(v[0]);
                let per: Vec<Var> = (0..4).map(|i| t.slice_rows(s, i, 1)).collect::<Result<_>>()?;
                loss_video(t, &per, &labels)
            }),
        },
        Case {
            name: "loss_snippet_topk",
            params: seqs.clone(),
            f: Box::new(move |t, v| {
                let s = scores(t, v);
                loss_snippet_topk(t, &s[2..], &s[..2], 3, Pairing::AllPairs)
            }),
        },
        Case {
            name: "loss_regularisation",
            params: seqs,
            f: Box::new(move |t, v| {
                let s = scores(t, v);
                loss_regularisation(t, &s, 0.3, 0.2)
            }),
        },
        Case {
            name: "loss_contrastive",
            params: feats,
            f: Box::new(move |t, v| loss_contrastive(t, &mined, v, 0.5, Reduction::Mean)),
        },
    ]
}

/// Input features for the end-to-end check: two normal and two abnormal
/// videos, the latter with a shifted block of snippets.
fn micro_batch(seed: u64) -> (Vec<Tensor>, Vec<bool>) {
    let cfg = micro_encoder();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let labels = vec![false, false, true, true];
    let feats = labels
        .iter()
        .map(|&abn| {
            let mut f = normal(&mut r, cfg.snippets, cfg.input_dim);
            if abn {
                let start = r.random_range(0..cfg.snippets - 3);
                for t in start..start + 3 {
                    f.data_mut()[t * cfg.input_dim] += 2.0;
                }
            }
            f
        })
        .collect();
    (feats, labels)
}

/// The full weighted objective on the micro model, differentiated with
/// respect to every parameter. Mined sets come from the model's scores at the
/// base point and stay fixed, as mining is detached from the gradient.
pub fn full_objective_case(seed: u64) -> Result<Case> {
    let params = ModelParams::init(&micro_encoder(), seed)?;
    let (feats, labels) = micro_batch(seed);
    let mining = MiningConfig {
        window: 3,
        min_abnormal: 2,
        k_hard_normal: 2,
        k_easy: 2,
        ..MiningConfig::default()
    };
    let scores: Vec<Vec<f64>> = feats.iter().map(|f| Ok(params.score(f)?.0)).collect::<Result<_>>()?;
    let mut mined = mine_batch(scores.iter().map(Vec::as_slice).zip(labels.iter().copied()), &mining)?;
    if mined.hard_abnormal.is_empty() {
        // an untrained model rarely crosses the threshold; keep the term live
        mined.hard_abnormal = vec![SnippetRef { video: 2, t: 0 }, SnippetRef { video: 3, t: 5 }];
        mined.easy_abnormal.retain(|s| !mined.hard_abnormal.contains(s));
    }
    let loss_cfg = LossConfig {
        k: 2,
        alpha: 0.1,
        beta: 0.1,
        tau: 0.5,
        ..LossConfig::default()
    };
    let named_params = params
        .names()
        .iter()
        .cloned()
        .zip(params.tensors().iter().cloned())
        .collect();
    Ok(Case {
        name: "full_objective",
        params: named_params,
        f: Box::new(move |t, v| {
            let bound = params.bind_vars(v)?;
            let mut out = BatchOutputs {
                snippet_scores: Vec::new(),
                video_scores: Some(Vec::new()),
                features: Vec::new(),
                labels: labels.clone(),
            };
            for f in &feats {
                let x = t.leaf(f.clone());
                let enc = encode(t, &bound, x, None)?;
                out.snippet_scores.push(snippet_scores(t, &bound, &enc)?);
                out.features.push(enc.snippets);
                let vs = video_score(t, &bound, &enc)?;
                out.video_scores.as_mut().unwrap().push(vs);
            }
            Ok(loss_total(t, &out, &mined, &loss_cfg)?.0)
        }),
    })
}

/// Deliberately wrong derivative of `x²` (reports `3x` instead of `2x`),
/// used to show that the checker rejects a faulty operation.
pub struct FaultySquare;

impl CustomOp for FaultySquare {
    fn name(&self) -> &str {
        "faulty_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| x * x))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(x, g)| 3.0 * x * g)
            .collect();
        vec![Tensor::new(inputs[0].shape().to_vec(), data).expect("same shape")]
    }
}

/// Name of the negative-control case in suite reports.
pub const FAULTY_CASE: &str = "faulty_square";

pub fn faulty_case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let op: Arc<dyn CustomOp> = Arc::new(FaultySquare);
    case!(FAULTY_CASE, seed, [("a", away_from_zero(&mut r, 2, 3, 0.2))], |t, v| t
        .custom(op.clone(), &[v[0]])?)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub seed: u64,
    pub name: &'static str,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tol: f64,
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.report.max_rel_error())
            .fold(0.0, f64::max)
    }

    /// Distinct case names in the order they were first checked.
    pub fn case_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for r in &self.results {
            if !names.contains(&r.name) {
                names.push(r.name);
            }
        }
        names
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.report.passed())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in self.case_names() {
            let rows: Vec<&CaseResult> = self.results.iter().filter(|r| r.name == name).collect();
            let worst = rows.iter().map(|r| r.report.max_rel_error()).fold(0.0, f64::max);
            let ok = rows.iter().all(|r| r.report.passed());
            writeln!(
                f,
                "{:<30} seeds={:<3} max_rel_err={worst:.3e} {}",
                name,
                rows.len(),
                if ok { "ok" } else { "FAIL" }
            )?;
        }
        for r in self.failures() {
            writeln!(f, "failure in {} (seed {}):\n{}", r.name, r.seed, r.report)?;
        }
        write!(
            f,
            "gradient suite: {} (max relative error {:.3e}, tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tol
        )
    }
}

/// Runs every op, loss term and the full objective for each seed, plus the
/// faulty control when `with_faulty_control` is set.
pub fn run_suite(seeds: &[u64], cfg: GradCheckConfig, with_faulty_control: bool) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for &seed in seeds {
        let mut cases = op_cases(seed);
        cases.extend(loss_cases(seed));
        cases.push(full_objective_case(seed)?);
        if with_faulty_control {
            cases.push(faulty_case(seed));
        }
        for c in cases {
            let report = grad_check(&c.f, &c.params, cfg)?;
            results.push(CaseResult {
                seed,
                name: c.name,
                report,
            });
        }
    }
    Ok(SuiteReport { tol: cfg.tol, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faulty_control_is_rejected() {
        let c = faulty_case(0);
        let report = grad_check(&c.f, &c.params, GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.3);
    }

    #[test]
    fn every_op_passes_for_one_seed() {
        for c in op_cases(3).into_iter().chain(loss_cases(3)) {
            let report = grad_check(&c.f, &c.params, GradCheckConfig::default()).unwrap();
            assert!(report.passed(), "{}:\n{report}", c.name);
        }
    }

    #[test]
    fn full_objective_passes() {
        let c = full_objective_case(5).unwrap();
        let report = grad_check(&c.f, &c.params, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report}");
    }
}
