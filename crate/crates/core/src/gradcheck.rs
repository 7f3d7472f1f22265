//! Finite-difference verification of the analytic VJPs.
//!
//! Everything runs in `f64`: the function under test is rebuilt on a fresh
//! [`Graph<f64>`] for every evaluation, the analytic gradient comes from one
//! backward pass, and the numeric gradient from central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BranchPattern, Graph, Var};
use crate::blocks::{Block, BlockConfig, Cfdm, Dffn, ForwardCtx, SimMha, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{ComplexTensor, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Step for the end-to-end model entries of [`standard_suite`].
pub const MODEL_STEP: f64 = 1e-4;

/// A differentiable input to a checked function.
#[derive(Clone, Debug)]
pub enum Probe {
    Real(Tensor<f64>),
    Complex(ComplexTensor<f64>),
}

impl Probe {
    fn len(&self) -> usize {
        match self {
            Probe::Real(t) => t.len(),
            Probe::Complex(t) => 2 * t.len(),
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Probe::Real(t) => t.data()[i],
            Probe::Complex(t) if i < t.len() => t.re()[i],
            Probe::Complex(t) => t.im()[i - t.len()],
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        match self {
            Probe::Real(t) => t.data_mut()[i] = v,
            Probe::Complex(t) => {
                let n = t.len();
                if i < n {
                    t.re_mut()[i] = v;
                } else {
                    t.im_mut()[i - n] = v;
                }
            }
        }
    }

    fn bind(&self, g: &mut Graph<f64>) -> Var {
        match self {
            Probe::Real(t) => g.leaf(t.clone()),
            Probe::Complex(t) => g.complex_leaf(t.clone()),
        }
    }

    fn grad_of(&self, g: &Graph<f64>, v: Var, i: usize) -> f64 {
        match self {
            Probe::Real(_) => g.grad(v).map(|t| t.data()[i]).unwrap_or(0.0),
            Probe::Complex(t) => g
                .complex_grad(v)
                .map(|c| if i < t.len() { c.re()[i] } else { c.im()[i - t.len()] })
                .unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (sampled deterministically).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, |m, v| if m.is_nan() || v.is_nan() { f64::NAN } else { m.max(v) })
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error <= self.tolerance)
    }

    /// `Err` naming the worst coordinate when any input exceeds the tolerance.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self
            .inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("failed report has inputs");
        Err(Error::GradCheck(format!(
            "`{}`[{}]: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e} > {:.1e})",
            worst.name, worst.worst_index, worst.analytic, worst.numeric, worst.max_rel_error, self.tolerance
        )))
    }
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` receives the bound inputs (in order) and returns any node; a fixed
/// random projection reduces non-scalar (or complex) outputs to a scalar so
/// every output coordinate contributes.
///
/// Perturbed evaluations replay the ReLU, CReLU and L1 branch pattern of the
/// unperturbed point, so a kink lying within one step of a coordinate does not
/// turn the difference quotient into a mix of two linear pieces.
///
/// The relative error of an input is `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over its
/// checked coordinates, where `floor` is `1e-3` times the largest gradient
/// magnitude seen on any input; the reported coordinate is the one with the
/// largest absolute disagreement. Inputs whose gradient is far below the
/// dominant one sit at the round-off level of the difference quotient and are
/// judged against the floor instead of their own size.
pub fn grad_check<F>(f: F, inputs: &[(&str, Probe)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes: Vec<Probe> = inputs.iter().map(|(_, p)| p.clone()).collect();

    // Fix the projection from one evaluation.
    let projection = {
        let mut g = Graph::new();
        let vars: Vec<Var> = probes.iter().map(|p| p.bind(&mut g)).collect();
        let out = f(&mut g, &vars)?;
        if g.is_complex(out) {
            Some(Probe::Complex(ComplexTensor::random(g.complex_value(out).shape(), &mut rng)))
        } else if g.value(out).len() == 1 {
            None
        } else {
            Some(Probe::Real(Tensor::random(g.value(out).shape(), &mut rng)))
        }
    };
    let evaluate = |probes: &[Probe], branches: Option<&BranchPattern>| -> Result<(f64, Graph<f64>, Vec<Var>)> {
        let mut g = match branches {
            Some(b) => Graph::with_branches(b.clone()),
            None => Graph::new(),
        };
        let vars: Vec<Var> = probes.iter().map(|p| p.bind(&mut g)).collect();
        let out = f(&mut g, &vars)?;
        let loss = match &projection {
            Some(Probe::Real(w)) => g.weighted_sum(out, w.clone())?,
            Some(Probe::Complex(w)) => g.complex_weighted_sum(out, w.clone())?,
            None => out,
        };
        let value = g.value(loss).data()[0];
        if branches.is_none() {
            g.backward(loss)?;
        }
        Ok((value, g, vars))
    };

    let (_, graph, vars) = evaluate(&probes, None)?;
    let branches = graph.branch_pattern();

    let mut checked = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let n = probes[k].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut pairs = Vec::with_capacity(coords.len());
        for &i in &coords {
            let analytic = probes[k].grad_of(&graph, vars[k], i);
            let orig = probes[k].get(i);
            probes[k].set(i, orig + opts.step);
            let (fp, _, _) = evaluate(&probes, Some(&branches))?;
            probes[k].set(i, orig - opts.step);
            let (fm, _, _) = evaluate(&probes, Some(&branches))?;
            probes[k].set(i, orig);
            pairs.push((i, analytic, (fp - fm) / (2.0 * opts.step)));
        }
        checked.push(pairs);
    }
    let scale = checked
        .iter()
        .flatten()
        .map(|&(_, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);

    let mut reports = Vec::with_capacity(inputs.len());
    for ((name, _), pairs) in inputs.iter().zip(checked) {
        let mut report = InputReport {
            name: name.to_string(),
            checked: pairs.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut worst = -1.0;
        for &(i, a, num) in &pairs {
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
            if (a - num).abs() > worst {
                worst = (a - num).abs();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = num;
            }
        }
        report.max_rel_error = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor);
        reports.push(report);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        inputs: reports,
    })
}

/// Randomises every parameter of `store` so that no gradient is trivially
/// zero: `tau` in `[0.5, 2]`, layer-norm gains around one, everything else
/// uniform in `[-scale, scale]`.
pub fn randomize_params<R: rand::Rng + ?Sized>(store: &mut ParamStore, scale: f32, rng: &mut R) {
    for p in store.iter_mut() {
        let name = p.name.clone();
        for v in p.tensor.data_mut() {
            *v = if name.ends_with(".tau") {
                rng.random_range(0.5..2.0)
            } else if name.ends_with(".gain") {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-scale..scale)
            };
        }
    }
}

/// Moves values within `margin` of zero away from it, keeping finite
/// differences clear of ReLU kinks at the input.
fn off_kink(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -2.0 * margin } else { 2.0 * margin };
        }
    }
    t
}

fn store_probes(store: &ParamStore) -> Vec<(String, Probe)> {
    store
        .iter()
        .map(|p| (p.name.clone(), Probe::Real(p.tensor.cast())))
        .collect()
}

fn check_with_store<F>(
    f: F,
    x: (&str, Probe),
    store: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var], Var) -> Result<Var>,
{
    let named = store_probes(store);
    let mut inputs: Vec<(&str, Probe)> = vec![x];
    inputs.extend(named.iter().map(|(n, p)| (n.as_str(), p.clone())));
    grad_check(|g, v| f(g, &v[1..], v[0]), &inputs, opts)
}

/// One named result of [`standard_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: String,
    pub shape: String,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every differentiable operation on three
/// random shapes each, plus the full tiny model on a 16 × 16 input.
///
/// Every entry uses `tolerance`. The model entries take the smaller
/// [`MODEL_STEP`] and sample four coordinates per parameter. Parameters are
/// randomised at the scale of a freshly initialised network, and module
/// inputs are spread wide enough that no layer norm sees a near-constant pixel.
pub fn standard_suite(tolerance: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tolerance,
        seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    let mut push = |op: &str, shape: String, report: GradCheckReport| {
        out.push(SuiteEntry {
            op: op.to_string(),
            shape,
            report,
        })
    };

    for (hw, cin, cout, k, groups, bias) in [
        ([5, 6], 3, 4, 3, 1, true),
        ([4, 4], 2, 5, 3, 1, false),
        ([6, 3], 4, 2, 5, 1, true),
    ] {
        let x = Tensor::<f64>::random(&[hw[0], hw[1], cin], &mut rng);
        let w = Tensor::<f64>::random(&[k, k, cin / groups, cout], &mut rng);
        let b = Tensor::<f64>::random(&[cout], &mut rng);
        let mut inputs = vec![("x", Probe::Real(x)), ("kernel", Probe::Real(w))];
        if bias {
            inputs.push(("bias", Probe::Real(b)));
        }
        let r = grad_check(|g, v| g.conv2d(v[0], v[1], v.get(2).copied(), groups), &inputs, &opts)?;
        push("conv2d dense", format!("{hw:?}x{cin} k{k} -> {cout}"), r);
    }
    for (hw, c, k) in [([5, 6], 3, 3), ([4, 4], 6, 3), ([7, 3], 2, 5)] {
        let x = Tensor::<f64>::random(&[hw[0], hw[1], c], &mut rng);
        let w = Tensor::<f64>::random(&[k, k, 1, c], &mut rng);
        let r = grad_check(
            |g, v| g.conv2d(v[0], v[1], None, c),
            &[("x", Probe::Real(x)), ("kernel", Probe::Real(w))],
            &opts,
        )?;
        push("conv2d depthwise", format!("{hw:?}x{c} k{k}"), r);
    }
    for (hw, cin, cout) in [([4, 5], 3, 4), ([3, 3], 8, 2), ([6, 2], 1, 5)] {
        let x = Tensor::<f64>::random(&[hw[0], hw[1], cin], &mut rng);
        let w = Tensor::<f64>::random(&[1, 1, cin, cout], &mut rng);
        let b = Tensor::<f64>::random(&[cout], &mut rng);
        let r = grad_check(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
            &[("x", Probe::Real(x)), ("kernel", Probe::Real(w)), ("bias", Probe::Real(b))],
            &opts,
        )?;
        push("conv2d 1x1", format!("{hw:?}x{cin} -> {cout}"), r);
    }
    for (hw, cin, cout, groups) in [([4, 4], 4, 6, 2), ([5, 3], 6, 3, 3), ([3, 6], 4, 4, 2)] {
        let x = Tensor::<f64>::random(&[hw[0], hw[1], cin], &mut rng);
        let w = Tensor::<f64>::random(&[3, 3, cin / groups, cout], &mut rng);
        let r = grad_check(
            |g, v| g.conv2d(v[0], v[1], None, groups),
            &[("x", Probe::Real(x)), ("kernel", Probe::Real(w))],
            &opts,
        )?;
        push("conv2d grouped", format!("{hw:?}x{cin} -> {cout} g{groups}"), r);
    }
    for shape in [[4, 4, 8], [3, 5, 6], [2, 7, 3]] {
        let c = shape[2];
        let x = Tensor::<f64>::random(&shape, &mut rng).map(|v| 4.0 * v);
        let gain = Tensor::<f64>::random(&[c], &mut rng);
        let shift = Tensor::<f64>::random(&[c], &mut rng);
        let r = grad_check(
            |g, v| g.layer_norm(v[0], v[1], v[2]),
            &[("x", Probe::Real(x)), ("gain", Probe::Real(gain)), ("shift", Probe::Real(shift))],
            &opts,
        )?;
        push("layer_norm", format!("{shape:?}"), r);
    }
    for shape in [vec![7], vec![3, 5], vec![2, 3, 4]] {
        let x = Tensor::<f64>::random(&shape, &mut rng).map(|v| 3.0 * v);
        let r = grad_check(|g, v| g.softmax(v[0]), &[("x", Probe::Real(x))], &opts)?;
        push("softmax", format!("{shape:?}"), r);
    }
    for (shape, heads) in [([4, 4, 6], 2), ([3, 5, 4], 1), ([2, 3, 8], 4)] {
        let a = Tensor::<f64>::random(&shape, &mut rng);
        let b = Tensor::<f64>::random(&shape, &mut rng);
        let x = Tensor::<f64>::random(&shape, &mut rng);
        let tau = Tensor::<f64>::random(&[heads], &mut rng).map(|v| 1.0 + 0.5 * v);
        let r = grad_check(
            |g, v| {
                let s = g.head_gram(v[0], v[1], heads)?;
                let s = g.head_scale(s, v[3])?;
                let a = g.softmax(s)?;
                g.head_mix(v[2], a, heads)
            },
            &[
                ("q", Probe::Real(a)),
                ("k", Probe::Real(b)),
                ("x", Probe::Real(x)),
                ("tau", Probe::Real(tau)),
            ],
            &opts,
        )?;
        push("softmax∘matmul attention", format!("{shape:?} h{heads}"), r);
    }
    for shape in [[4, 6, 3], [6, 4, 2], [8, 2, 5]] {
        let x = Tensor::<f64>::random(&shape, &mut rng);
        let r = grad_check(|g, v| Ok(g.gelu(v[0])), &[("x", Probe::Real(x))], &opts)?;
        push("gelu", format!("{shape:?}"), r);
    }
    for shape in [[4, 6, 3], [6, 4, 2], [8, 2, 5]] {
        let x = Tensor::<f64>::random(&shape, &mut rng);
        let width = shape[1];
        let r = grad_check(|g, v| g.rfft2(v[0]), &[("x", Probe::Real(x))], &opts)?;
        push("rfft2", format!("{shape:?}"), r);
        let f = ComplexTensor::<f64>::random(&[shape[0], width / 2 + 1, shape[2]], &mut rng);
        let r = grad_check(|g, v| g.irfft2(v[0], width), &[("f", Probe::Complex(f))], &opts)?;
        push("irfft2", format!("{shape:?}"), r);
    }
    for (shape, cin, cout) in [([8, 5], 4, 4), ([4, 3], 2, 3), ([5, 5], 3, 1)] {
        let f = ComplexTensor::<f64>::random(&[shape[0], shape[1], cin], &mut rng);
        let u = Tensor::<f64>::random(&[3, 3, cin, cout], &mut rng);
        let v = Tensor::<f64>::random(&[3, 3, cin, cout], &mut rng);
        let r = grad_check(
            |g, x| g.complex_conv2d(x[0], x[1], x[2]),
            &[("f", Probe::Complex(f)), ("kernel.re", Probe::Real(u)), ("kernel.im", Probe::Real(v))],
            &opts,
        )?;
        push("complex_conv2d", format!("{shape:?}x{cin} -> {cout}"), r);
    }
    for shape in [[4, 3, 2], [5, 5, 1], [2, 6, 3]] {
        let mut f = ComplexTensor::<f64>::random(&shape, &mut rng);
        let (re, im) = f.parts_mut();
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v = off_kink(Tensor::scalar(*v), 0.01).data()[0];
        }
        let r = grad_check(
            |g, x| g.crelu(x[0]),
            &[("f", Probe::Complex(f))],
            &opts,
        )?;
        push("crelu", format!("{shape:?}"), r);
    }
    for shape in [[4, 4, 2], [8, 6, 3], [6, 2, 1]] {
        let x = off_kink(Tensor::<f64>::random(&shape, &mut rng), 0.01);
        let r = grad_check(|g, v| g.relu(v[0]), &[("x", Probe::Real(x))], &opts)?;
        push("relu", format!("{shape:?}"), r);
    }
    for (shape, c) in [([4, 4], 2), ([6, 4], 3), ([4, 6], 1)] {
        let mut store = ParamStore::new();
        let m = Cfdm::new(&mut store, "cfdm", c, &mut rng)?;
        randomize_params(&mut store, 0.05, &mut rng);
        let x = Tensor::<f64>::random(&[shape[0], shape[1], c], &mut rng).map(|v| 3.0 * v);
        let r = check_with_store(|g, p, x| m.forward(g, p, x), ("x", Probe::Real(x)), &store, &opts)?;
        push("cfdm", format!("{shape:?}x{c}"), r);
    }
    for (shape, c, heads) in [([4, 4], 4, 2), ([3, 5], 3, 1), ([4, 2], 6, 3)] {
        let mut store = ParamStore::new();
        let m = SimMha::new(&mut store, "attn", c, heads, &mut rng)?;
        randomize_params(&mut store, 0.05, &mut rng);
        let x = Tensor::<f64>::random(&[shape[0], shape[1], c], &mut rng).map(|v| 3.0 * v);
        let r = check_with_store(|g, p, x| m.forward(g, p, x), ("x", Probe::Real(x)), &store, &opts)?;
        push("sim_mha", format!("{shape:?}x{c} h{heads}"), r);
    }
    for (shape, c) in [([4, 4], 4), ([3, 5], 3), ([5, 2], 3)] {
        let mut store = ParamStore::new();
        let m = Dffn::new(&mut store, "ffn", c, 2.66, &mut rng)?;
        randomize_params(&mut store, 0.05, &mut rng);
        let x = Tensor::<f64>::random(&[shape[0], shape[1], c], &mut rng).map(|v| 3.0 * v);
        let r = check_with_store(|g, p, x| m.forward(g, p, x), ("x", Probe::Real(x)), &store, &opts)?;
        push("dffn", format!("{shape:?}x{c}"), r);
    }
    for variant in Variant::ALL {
        for (shape, c, heads) in [([4, 4], 4, 2), ([4, 6], 4, 1), ([6, 2], 3, 1)] {
            let mut store = ParamStore::new();
            let cfg = BlockConfig::new(c, heads, variant);
            let b = Block::new(&mut store, "block", &cfg, &mut rng)?;
            randomize_params(&mut store, 0.05, &mut rng);
            let x = Tensor::<f64>::random(&[shape[0], shape[1], c], &mut rng).map(|v| 3.0 * v);
            let r = check_with_store(
                |g, p, x| b.forward(g, p, x, &mut ForwardCtx::inference()),
                ("x", Probe::Real(x)),
                &store,
                &opts,
            )?;
            push(&format!("block {}", variant.name()), format!("{shape:?}x{c} h{heads}"), r);
        }
    }
    for (i, seed2) in [11u64, 12, 13].into_iter().enumerate() {
        let mut model = Model::new(&ModelConfig::tiny(), seed2)?;
        randomize_params(model.params_mut(), 0.05, &mut rng);
        let x = Tensor::<f64>::random(&[16, 16, 1], &mut rng).map(|v| 0.5 + 0.5 * v);
        let target = Tensor::<f64>::random(&[16, 16, 1], &mut rng).map(|v| 0.5 + 0.5 * v);
        let model_opts = GradCheckOptions {
            step: MODEL_STEP,
            max_coords: Some(4),
            seed: seed + i as u64,
            ..opts.clone()
        };
        let r = check_with_store(
            |g, p, x| {
                let y = model.forward(g, p, x, &mut ForwardCtx::inference())?;
                let t = g.leaf(target.clone());
                g.l1_loss(y, t)
            },
            ("x", Probe::Real(x)),
            model.params(),
            &model_opts,
        )?;
        push("model tiny", format!("[16, 16] seed {seed2}"), r);
    }
    Ok(out)
}
