//! Finite-difference check of every differentiable op, layer and loss on
//! small random instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, TopK};
use crate::data::VideoLabel;
use crate::error::Error;
use crate::losses::{
    cosine_sim_matrix, l_align, l_distill, l_infonce_bidirectional, l_mil, l_pmg, objective,
    LossVars, Stage,
};
use crate::nn::{Bound, Conv1dLayer, Init, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::tensor::{grad_check, GradReport, Graph, Tensor, TensorError, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_THRESHOLD: f64 = 1e-4;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: CaseFn,
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub report: GradReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<GradCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCase> {
        self.cases.iter().filter(|c| !c.report.passed).collect()
    }
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("positive dims")
}

fn normalish(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    uniform(rng, &[r, c], -1.5, 1.5)
}

/// A shuffled arithmetic progression, so that no two entries tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], step: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("positive dims")
}

/// Weighted sum with fixed random weights so every output coordinate has
/// its own slope.
fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(uniform(&mut rng, &shape, 0.5, 1.5));
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

macro_rules! case {
    ($name:expr, $inputs:expr, $s:ident, |$g:ident, $v:ident| $body:expr) => {
        Case {
            name: $name,
            inputs: $inputs,
            f: Box::new(move |$g: &mut Graph, $v: &[Var]| {
                let y = $body;
                probe_sum($g, y, $s)
            }),
        }
    };
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..=8);
    let c = rng.random_range(2..=8);
    let k = rng.random_range(1..=c.min(3));
    let a = normalish(&mut rng, r, c);
    let b = normalish(&mut rng, r, c);
    let bias = uniform(&mut rng, &[c], -1.0, 1.0);
    let pa = uniform(&mut rng, &[r, c], 0.2, 2.0);
    let pb = uniform(&mut rng, &[r, c], 0.2, 2.0);
    let m2 = normalish(&mut rng, c, 3);
    let wconv = uniform(&mut rng, &[k, c, 3], -1.0, 1.0);
    let bconv = uniform(&mut rng, &[3], -0.5, 0.5);
    let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
    let d = distinct(&mut rng, &[r, c], 0.37);
    let sq = normalish(&mut rng, 3, 3);
    let s = seed;
    vec![
        case!("add", vec![a.clone(), b.clone()], s, |g, v| g
            .add(v[0], v[1])?),
        case!("sub_broadcast", vec![a.clone(), bias.clone()], s, |g, v| g
            .sub(v[0], v[1])?),
        case!("mul", vec![a.clone(), b.clone()], s, |g, v| g
            .mul(v[0], v[1])?),
        case!("div", vec![a.clone(), pb], s, |g, v| g.div(v[0], v[1])?),
        case!("neg", vec![a.clone()], s, |g, v| g.neg(v[0])?),
        case!("exp", vec![a.clone()], s, |g, v| g.exp(v[0])?),
        case!("log", vec![pa.clone()], s, |g, v| g.log(v[0])?),
        case!("sqrt", vec![pa], s, |g, v| g.sqrt(v[0])?),
        case!("relu", vec![a.clone()], s, |g, v| g.relu(v[0])?),
        case!("gelu", vec![a.clone()], s, |g, v| g.gelu(v[0])?),
        case!("sigmoid", vec![a.clone()], s, |g, v| g.sigmoid(v[0])?),
        case!("tanh", vec![a.clone()], s, |g, v| g.tanh(v[0])?),
        case!("matmul", vec![a.clone(), m2], s, |g, v| g
            .matmul(v[0], v[1])?),
        case!("transpose", vec![a.clone()], s, |g, v| g.transpose(v[0])?),
        case!("conv1d", vec![a.clone(), wconv, bconv], s, |g, v| g
            .conv1d(v[0], v[1], v[2], 1, k / 2)?),
        case!("sum_axis0", vec![a.clone()], s, |g, v| g
            .sum(v[0], Some(0))?),
        case!("mean_axis1", vec![a.clone()], s, |g, v| g
            .mean(v[0], Some(1))?),
        case!("max_axis1", vec![d.clone()], s, |g, v| g.max(v[0], 1)?),
        case!("topk_mean_axis0", vec![d], s, |g, v| g.topk_mean(
            v[0],
            0,
            2.min(r)
        )?),
        case!("softmax", vec![a.clone()], s, |g, v| g.softmax(v[0], 1)?),
        case!("log_softmax_axis0", vec![a.clone()], s, |g, v| g
            .log_softmax(v[0], 0)?),
        case!("layer_norm", vec![a.clone(), gamma, bias], s, |g, v| g
            .layer_norm(v[0], v[1], v[2], 1e-5)?),
        case!("concat_slice", vec![a.clone(), b], s, |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            g.slice_cols(y, 1, c)?
        }),
        case!("normalize_rows", vec![a.clone()], s, |g, v| g
            .normalize_rows(v[0], 1e-12)?),
        case!("scale_shift_clamp", vec![a], s, |g, v| {
            let y = g.scale(v[0], 3.0);
            let y = g.add_scalar(y, 0.5);
            g.clamp(y, -10.0, 10.0)
        }),
        case!("reshape_diagonal", vec![sq], s, |g, v| {
            let y = g.reshape(v[0], vec![9])?;
            let y = g.reshape(y, vec![3, 3])?;
            g.diagonal(y)?
        }),
    ]
}

/// A layer case: the first input is the layer input, the rest are the
/// layer's parameters in store order.
fn layer_case<L>(name: &'static str, x: Tensor, store: ParamStore, layer: L, seed: u64) -> Case
where
    L: Fn(&mut Graph, &Bound, Var) -> Result<Var, TensorError> + 'static,
{
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    Case {
        name,
        inputs,
        f: Box::new(move |g: &mut Graph, v: &[Var]| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = layer(g, &p, v[0])?;
            probe_sum(g, y, seed)
        }),
    }
}

fn layer_cases(seed: u64) -> Result<Vec<Case>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a1e);
    let mut init = Init::new(seed);
    let t = rng.random_range(2..=8);
    let d = 8;
    let x = normalish(&mut rng, t, d);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut init, "lin", d, 5)?;
    perturb(&mut store, &mut rng);
    cases.push(layer_case(
        "linear",
        x.clone(),
        store,
        move |g, p, x| lin.forward(g, p, x),
        seed,
    ));

    let mut store = ParamStore::new();
    let conv = Conv1dLayer::new(&mut store, &mut init, "conv", 3, d, 4)?;
    perturb(&mut store, &mut rng);
    cases.push(layer_case(
        "conv_layer",
        x.clone(),
        store,
        move |g, p, x| conv.forward(g, p, x),
        seed,
    ));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d)?;
    perturb(&mut store, &mut rng);
    cases.push(layer_case(
        "layer_norm_layer",
        x.clone(),
        store,
        move |g, p, x| ln.forward(g, p, x),
        seed,
    ));

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, &mut init, "block", d, 2, 2)?;
    perturb(&mut store, &mut rng);
    cases.push(layer_case(
        "transformer_block",
        x,
        store,
        move |g, p, x| block.forward(g, p, x),
        seed,
    ));
    Ok(cases)
}

/// Moves zero biases and unit gains off their initial values so that every
/// parameter gradient is generic.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let t = rng.random_range(2..=8);
    let h = rng.random_range(2..=16);
    let d1 = rng.random_range(1..=16);
    let tau = rng.random_range(0.2..1.0);
    let f = normalish(&mut rng, t, h);
    let a1 = normalish(&mut rng, t, h);
    let a2 = normalish(&mut rng, t, h);
    let a3 = normalish(&mut rng, t, h);
    let p1 = normalish(&mut rng, t, d1);
    let p2 = normalish(&mut rng, t, h);
    let e1 = normalish(&mut rng, t, d1);
    let e2 = normalish(&mut rng, t, h);
    let teach = normalish(&mut rng, t, h);
    let mil_t = rng.random_range(2..=8);
    let logits: Vec<Tensor> = (0..4).map(|_| distinct(&mut rng, &[mil_t], 0.41)).collect();
    let labels = [
        VideoLabel::Normal,
        VideoLabel::Anomalous,
        VideoLabel::Anomalous,
        VideoLabel::Normal,
    ];
    let top_k = TopK::FloorDivPlusOne(16);
    let loss_cfg = LossConfig {
        lambda1: 0.7,
        lambda2: 1.3,
        tau,
        ..LossConfig::default()
    };

    let targets = [e1, e2];
    let targets_first = targets.clone();
    let targets_second = targets.clone();
    let teach_first = teach.clone();
    let teach_second = teach.clone();
    let cfg_first = loss_cfg.clone();
    let cfg_second = loss_cfg;
    let mut second_inputs = vec![p1.clone(), p2.clone(), f.clone(), a1.clone()];
    second_inputs.extend(logits.iter().cloned());
    let s = seed;

    vec![
        Case {
            name: "l_pmg",
            inputs: vec![p1.clone(), p2.clone()],
            f: Box::new(move |g, v| pmg_loss(g, &v[..2], &targets)),
        },
        case!(
            "cosine_sim_matrix",
            vec![f.clone(), a1.clone()],
            s,
            |g, v| { cosine_sim_matrix(g, v[0], v[1]).map_err(tensor_err)? }
        ),
        Case {
            name: "l_infonce_bidirectional",
            inputs: vec![f.clone(), a1.clone()],
            f: Box::new(move |g, v| {
                l_infonce_bidirectional(g, v[0], v[1], tau).map_err(tensor_err)
            }),
        },
        Case {
            name: "l_align",
            inputs: vec![f.clone(), a1.clone(), a2, a3],
            f: Box::new(move |g, v| l_align(g, v[0], &v[1..], tau).map_err(tensor_err)),
        },
        Case {
            name: "l_distill",
            inputs: vec![f.clone()],
            f: Box::new(move |g, v| {
                let teacher = g.constant(teach.clone());
                l_distill(g, v[0], teacher).map_err(tensor_err)
            }),
        },
        Case {
            name: "l_mil",
            inputs: logits,
            f: Box::new(move |g, v| l_mil(g, v, &labels, top_k).map_err(tensor_err)),
        },
        Case {
            name: "l_first",
            inputs: vec![p1, p2, f, a1],
            f: Box::new(move |g, v| {
                let parts = aux_parts(g, v, &targets_first, &teach_first, tau, None)?;
                Ok(objective(g, &parts, Stage::First, &cfg_first)
                    .map_err(tensor_err)?
                    .0)
            }),
        },
        Case {
            name: "l_second",
            inputs: second_inputs,
            f: Box::new(move |g, v| {
                let mil = l_mil(g, &v[4..], &labels, top_k).map_err(tensor_err)?;
                let parts = aux_parts(g, v, &targets_second, &teach_second, tau, Some(mil))?;
                Ok(objective(g, &parts, Stage::Second, &cfg_second)
                    .map_err(tensor_err)?
                    .0)
            }),
        },
    ]
}

fn pmg_loss(g: &mut Graph, pseudo: &[Var], targets: &[Tensor; 2]) -> Result<Var, TensorError> {
    let names = ["P", "txt"];
    let pseudo: BTreeMap<String, Var> = names
        .iter()
        .map(|n| n.to_string())
        .zip(pseudo.iter().copied())
        .collect();
    let targets: BTreeMap<String, Var> = names
        .iter()
        .zip(targets)
        .map(|(n, t)| (n.to_string(), g.constant(t.clone())))
        .collect();
    l_pmg(g, &pseudo, &targets).map_err(tensor_err)
}

/// Inputs `[ê_P, ê_txt, F*, a]` to the three auxiliary terms.
fn aux_parts(
    g: &mut Graph,
    v: &[Var],
    targets: &[Tensor; 2],
    teacher: &Tensor,
    tau: f64,
    mil: Option<Var>,
) -> Result<LossVars, TensorError> {
    let pmg = pmg_loss(g, &v[..2], targets)?;
    let align = l_align(g, v[2], &[v[3]], tau).map_err(tensor_err)?;
    let teacher = g.constant(teacher.clone());
    let distill = l_distill(g, v[2], teacher).map_err(tensor_err)?;
    Ok(LossVars {
        pmg,
        align,
        distill,
        mil,
    })
}

/// Runs every case for each seed.
pub fn run_grad_suite(seeds: impl IntoIterator<Item = u64>) -> Result<SuiteReport, TensorError> {
    let mut cases = Vec::new();
    for seed in seeds {
        let mut all = op_cases(seed);
        all.extend(layer_cases(seed)?);
        all.extend(loss_cases(seed));
        for c in all {
            let report = grad_check(&c.f, &c.inputs, GRAD_EPS, GRAD_THRESHOLD)?;
            cases.push(GradCase {
                name: c.name.to_string(),
                seed,
                report,
            });
        }
    }
    Ok(SuiteReport { cases })
}
