//! Toy regression trainer: a small network plus a linear head fitted to a
//! random linear teacher, with hand-written backpropagation.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, OptState, OptimizerConfig};
use crate::attention::{self, AttentionKind, AttentionParams};
use crate::error::{Error, Result};
use crate::init::top_singular_value;
use crate::layers::{Activation, LayerSpec};
use crate::linalg::{self, DenseMatrix};
use crate::network::{Network, Op, Shortcut, SubBlock};
use crate::rng;

const DATA_STREAM: u16 = 0xd0;
const TEACHER_STREAM: u16 = 0xd1;
const HEAD_STREAM: u16 = 0xd2;

/// Network, linear head and the teacher that generates targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub net: Network,
    /// `out_dim × D_out`.
    pub head: DenseMatrix,
    /// `out_dim × D_in`; targets are `teacher · x` per token.
    pub teacher: DenseMatrix,
}

impl ToyModel {
    pub fn new(net: Network, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 {
            return Err(Error::InvalidParam("out_dim must be >= 1".into()));
        }
        let (d_out, _) = net.output_shape()?;
        let d_in = net.input_shape.0;
        let head = gaussian(
            seed,
            HEAD_STREAM,
            out_dim,
            d_out,
            1.0 / (d_out as f64).sqrt(),
        );
        let teacher = gaussian(
            seed,
            TEACHER_STREAM,
            out_dim,
            d_in,
            1.0 / (d_in as f64).sqrt(),
        );
        let model = ToyModel { net, head, teacher };
        model.slots()?;
        Ok(model)
    }

    /// Names of the trainable matrices, in gradient order.
    pub fn weight_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for (l, block) in self.net.blocks.iter().enumerate() {
            for (s, sub) in block.subs.iter().enumerate() {
                for (k, op) in sub.branch.iter().enumerate() {
                    let names: &[&str] = match op {
                        Op::Layer(LayerSpec::Linear(_)) => &["w"],
                        Op::Layer(LayerSpec::FFN { .. }) => &["w1", "w2"],
                        Op::Attention(_) => &["wq", "wk", "wv"],
                        _ => &[],
                    };
                    ids.extend(names.iter().map(|n| format!("b{l}.s{s}.op{k}.{n}")));
                }
            }
        }
        ids.push("head".into());
        ids
    }

    pub fn weights(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for sub in self.net.blocks.iter().flat_map(|b| &b.subs) {
            for op in &sub.branch {
                match op {
                    Op::Layer(LayerSpec::Linear(l)) => out.push(&l.weight),
                    Op::Layer(LayerSpec::FFN { w1, w2, .. }) => out.extend([w1, w2]),
                    Op::Attention(a) => out.extend([&a.w_q, &a.w_k, &a.w_v]),
                    _ => {}
                }
            }
        }
        out.push(&self.head);
        out
    }

    fn weights_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        for sub in self.net.blocks.iter_mut().flat_map(|b| &mut b.subs) {
            for op in &mut sub.branch {
                match op {
                    Op::Layer(LayerSpec::Linear(l)) => out.push(&mut l.weight),
                    Op::Layer(LayerSpec::FFN { w1, w2, .. }) => out.extend([w1, w2]),
                    Op::Attention(a) => out.extend([&mut a.w_q, &mut a.w_k, &mut a.w_v]),
                    _ => {}
                }
            }
        }
        out.push(&mut self.head);
        out
    }

    /// First gradient slot of every op, checking that each op is supported.
    fn slots(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let mut next = 0;
        let mut out = Vec::with_capacity(self.net.blocks.len());
        for block in &self.net.blocks {
            let mut subs = Vec::with_capacity(block.subs.len());
            for sub in &block.subs {
                for norm in sub.pre_norm.iter().chain(&sub.post_norm) {
                    check_norm(norm)?;
                }
                let mut ops = Vec::with_capacity(sub.branch.len());
                for op in &sub.branch {
                    ops.push(next);
                    next += match op {
                        Op::Layer(LayerSpec::Linear(_)) => 1,
                        Op::Layer(LayerSpec::FFN { .. }) => 2,
                        Op::Layer(l) if l.activation().is_some() => 0,
                        Op::Attention(a) if a.kind == AttentionKind::DPA => 3,
                        Op::Attention(a) => {
                            return Err(Error::Unsupported(format!(
                                "toy training backprop covers DPA attention only, got {:?}",
                                a.kind
                            )))
                        }
                        Op::Layer(l) => {
                            return Err(Error::Unsupported(format!(
                                "toy training has no backward pass for {}",
                                l.kind().name()
                            )))
                        }
                    };
                }
                subs.push(ops);
            }
            out.push(subs);
        }
        Ok(out)
    }
}

fn check_norm(norm: &LayerSpec) -> Result<()> {
    match norm {
        LayerSpec::LayerNorm { .. } | LayerSpec::RMSNorm { .. } | LayerSpec::CenterNorm { .. } => {
            Ok(())
        }
        l => Err(Error::Unsupported(format!(
            "toy training has no backward pass for {} as a norm",
            l.kind().name()
        ))),
    }
}

fn gaussian(seed: u64, stream: u16, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let mut r = rng::stream(seed, rng::stream_id(stream, 0, 0));
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        std * z
    })
}

/// Input batch for `step`; batches differ per step and repeat per seed.
pub fn toy_batch(model: &ToyModel, seed: u64, step: usize) -> (DenseMatrix, DenseMatrix) {
    let (d, n) = model.net.input_shape;
    let mut r = rng::stream(seed, rng::stream_id(DATA_STREAM, step as u32, 0));
    let x = DenseMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut r));
    let y = model.teacher.matmul(&x).expect("teacher matches input");
    (x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Replace every gradient by zero (pure weight-decay dynamics).
    pub zero_grad: bool,
    pub clip: Option<f64>,
}

impl ToyConfig {
    pub fn new(steps: usize, optimizer: OptimizerConfig) -> Self {
        ToyConfig {
            steps,
            optimizer,
            seed: 0,
            zero_grad: false,
            clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub weight_id: String,
    pub sigma_max: f64,
    pub max_update: f64,
    pub loss: f64,
}

/// Chronological records; step 0 holds the initial weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub records: Vec<StepRecord>,
    /// Step whose loss or gradient was non-finite; training stopped there.
    pub diverged_at: Option<usize>,
}

impl StepTrace {
    /// σ_max of one weight over the recorded steps.
    pub fn sigma_series(&self, weight_id: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.weight_id == weight_id)
            .map(|r| r.sigma_max)
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut last = usize::MAX;
        for r in &self.records {
            if r.step != last {
                out.push(r.loss);
                last = r.step;
            }
        }
        out
    }
}

/// CSV with columns `step,weight_id,sigma_max,max_update,loss`.
pub fn write_trace_csv<W: Write>(trace: &StepTrace, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in &trace.records {
        out.serialize(r)?;
    }
    if trace.records.is_empty() {
        out.write_record(["step", "weight_id", "sigma_max", "max_update", "loss"])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean squared error of `head · net(x)` against `y`.
pub fn toy_loss(model: &ToyModel, x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    let h = match model.net.forward(x) {
        Ok(h) => h,
        Err(Error::Overflow { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let pred = model.head.matmul(&h)?;
    let diff = pred.sub(y)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Loss and its gradient for every weight in [`ToyModel::weights`] order.
pub fn toy_gradients(
    model: &ToyModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(f64, Vec<DenseMatrix>)> {
    let slots = model.slots()?;
    if x.shape() != model.net.input_shape {
        return Err(Error::shape(
            "toy_gradients",
            format!(
                "expected input {:?}, got {:?}",
                model.net.input_shape,
                x.shape()
            ),
        ));
    }
    let mut grads: Vec<Option<DenseMatrix>> = vec![None; model.weights().len()];

    let mut caches = Vec::new();
    let mut cur = x.clone();
    for block in &model.net.blocks {
        for sub in &block.subs {
            let (next, cache) = sub_forward(sub, &cur);
            caches.push(cache);
            cur = next;
        }
    }
    let pred = model.head.matmul(&cur)?;
    let diff = pred.sub(y)?;
    let m = diff.len() as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / m;
    let dpred = diff.scale(2.0 / m);
    let head_slot = grads.len() - 1;
    grads[head_slot] = Some(linalg::product(dpred.view(), cur.view().t())?);
    let mut dcur = linalg::product(model.head.view().t(), dpred.view())?;

    let flat: Vec<(&SubBlock, &Vec<usize>)> = model
        .net
        .blocks
        .iter()
        .zip(&slots)
        .flat_map(|(b, s)| b.subs.iter().zip(s))
        .collect();
    for ((sub, ops), cache) in flat.into_iter().zip(&caches).rev() {
        dcur = sub_backward(sub, ops, cache, &dcur, &mut grads)?;
    }
    let grads = grads
        .into_iter()
        .zip(model.weights())
        .map(|(g, w)| g.unwrap_or_else(|| DenseMatrix::zeros(w.rows(), w.cols())))
        .collect();
    Ok((loss, grads))
}

struct SubCache {
    input: DenseMatrix,
    /// Input of every branch op, after the pre-norm.
    op_inputs: Vec<DenseMatrix>,
    /// Input of the post-norm.
    pre_post: DenseMatrix,
}

fn sub_forward(sub: &SubBlock, x: &DenseMatrix) -> (DenseMatrix, SubCache) {
    let mut h = match &sub.pre_norm {
        Some(n) => n.apply(x),
        None => x.clone(),
    };
    let mut op_inputs = Vec::with_capacity(sub.branch.len());
    for op in &sub.branch {
        let next = match op {
            Op::Layer(l) => l.apply(&h),
            Op::Attention(a) => attention::apply(a, &h),
        };
        op_inputs.push(std::mem::replace(&mut h, next));
    }
    let z = match &sub.shortcut {
        Shortcut::None => h,
        Shortcut::Plain => h.add(x).expect("shape-preserving branch"),
        Shortcut::Weighted { nu } => {
            DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + nu[i] * h.get(i, j))
        }
    };
    let out = match &sub.post_norm {
        Some(n) => n.apply(&z),
        None => z.clone(),
    };
    let cache = SubCache {
        input: x.clone(),
        op_inputs,
        pre_post: z,
    };
    (out, cache)
}

fn sub_backward(
    sub: &SubBlock,
    slots: &[usize],
    cache: &SubCache,
    dy: &DenseMatrix,
    grads: &mut [Option<DenseMatrix>],
) -> Result<DenseMatrix> {
    let dz = match &sub.post_norm {
        Some(n) => norm_backward(n, &cache.pre_post, dy)?,
        None => dy.clone(),
    };
    let mut dh = match &sub.shortcut {
        Shortcut::Weighted { nu } => {
            DenseMatrix::from_fn(dz.rows(), dz.cols(), |i, j| nu[i] * dz.get(i, j))
        }
        _ => dz.clone(),
    };
    for ((op, x), &slot) in sub.branch.iter().zip(&cache.op_inputs).zip(slots).rev() {
        dh = op_backward(op, x, &dh, slot, grads)?;
    }
    let mut dx = match &sub.pre_norm {
        Some(n) => norm_backward(n, &cache.input, &dh)?,
        None => dh,
    };
    if sub.shortcut != Shortcut::None {
        dx.axpy(1.0, &dz)?;
    }
    Ok(dx)
}

fn accumulate(grads: &mut [Option<DenseMatrix>], slot: usize, g: DenseMatrix) -> Result<()> {
    match &mut grads[slot] {
        Some(acc) => acc.axpy(1.0, &g),
        empty => {
            *empty = Some(g);
            Ok(())
        }
    }
}

fn op_backward(
    op: &Op,
    x: &DenseMatrix,
    dy: &DenseMatrix,
    slot: usize,
    grads: &mut [Option<DenseMatrix>],
) -> Result<DenseMatrix> {
    match op {
        Op::Layer(LayerSpec::Linear(l)) => {
            accumulate(grads, slot, linalg::product(dy.view(), x.view().t())?)?;
            linalg::product(l.weight.view().t(), dy.view())
        }
        Op::Layer(LayerSpec::FFN { w1, b1, w2, .. }) => {
            let mut pre = w1.matmul(x)?;
            crate::layers::add_row_bias(&mut pre, b1);
            let h = pre.map(|v| v.max(0.0));
            accumulate(grads, slot + 1, linalg::product(dy.view(), h.view().t())?)?;
            let mut dh = linalg::product(w2.view().t(), dy.view())?;
            for (g, p) in dh.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            accumulate(grads, slot, linalg::product(dh.view(), x.view().t())?)?;
            linalg::product(w1.view().t(), dh.view())
        }
        Op::Layer(l) => {
            let act: Activation = l
                .activation()
                .ok_or_else(|| Error::Unsupported(format!("backward for {}", l.kind().name())))?;
            let mut dx = dy.clone();
            for (g, v) in dx.data_mut().iter_mut().zip(x.data()) {
                *g *= act.derivative(*v);
            }
            Ok(dx)
        }
        Op::Attention(a) => dpa_backward(a, x, dy, slot, grads),
    }
}

/// Backward pass of multi-head dot-product attention `y_h = V_h · softmax_col(Q_hᵀK_h / √dh)`.
fn dpa_backward(
    a: &AttentionParams,
    x: &DenseMatrix,
    dy: &DenseMatrix,
    slot: usize,
    grads: &mut [Option<DenseMatrix>],
) -> Result<DenseMatrix> {
    let dh = a.head_dim();
    let c = 1.0 / (dh as f64).sqrt();
    let q_all = a.w_q.matmul(x)?;
    let k_all = a.w_k.matmul(x)?;
    let v_all = a.w_v.matmul(x)?;
    let (mut dq_blocks, mut dk_blocks, mut dv_blocks) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..a.heads {
        let q = q_all.row_block(h * dh, (h + 1) * dh);
        let k = k_all.row_block(h * dh, (h + 1) * dh);
        let v = v_all.row_block(h * dh, (h + 1) * dh);
        let dout = dy.row_block(h * dh, (h + 1) * dh);
        let mut p = attention::head_scores(AttentionKind::DPA, &q, &k, a.tau);
        attention::softmax_columns(&mut p);
        dv_blocks.push(linalg::product(dout.view(), p.view().t())?);
        let dp = linalg::product(v.view().t(), dout.view())?;
        // Column-softmax Jacobian applied to dP.
        let n = p.rows();
        let mut ds = DenseMatrix::zeros(n, p.cols());
        for j in 0..p.cols() {
            let dot: f64 = (0..n).map(|i| p.get(i, j) * dp.get(i, j)).sum();
            for i in 0..n {
                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot));
            }
        }
        dq_blocks.push(linalg::product(k.view(), ds.view().t())?.scale(c));
        dk_blocks.push(linalg::product(q.view(), ds.view())?.scale(c));
    }
    let dq = DenseMatrix::vstack(&dq_blocks)?;
    let dk = DenseMatrix::vstack(&dk_blocks)?;
    let dv = DenseMatrix::vstack(&dv_blocks)?;
    accumulate(grads, slot, linalg::product(dq.view(), x.view().t())?)?;
    accumulate(grads, slot + 1, linalg::product(dk.view(), x.view().t())?)?;
    accumulate(grads, slot + 2, linalg::product(dv.view(), x.view().t())?)?;
    let mut dx = linalg::product(a.w_q.view().t(), dq.view())?;
    dx.axpy(1.0, &linalg::product(a.w_k.view().t(), dk.view())?)?;
    dx.axpy(1.0, &linalg::product(a.w_v.view().t(), dv.view())?)?;
    Ok(dx)
}

/// Column-wise backward pass of LayerNorm, RMSNorm and CenterNorm.
fn norm_backward(norm: &LayerSpec, x: &DenseMatrix, dy: &DenseMatrix) -> Result<DenseMatrix> {
    let (d, n) = x.shape();
    let mut dx = DenseMatrix::zeros(d, n);
    for j in 0..n {
        let col = x.column(j);
        let du: Vec<f64> = match norm {
            LayerSpec::LayerNorm { affine, .. }
            | LayerSpec::RMSNorm { affine, .. }
            | LayerSpec::CenterNorm { affine } => {
                (0..d).map(|i| affine.gamma[i] * dy.get(i, j)).collect()
            }
            _ => return Err(Error::Unsupported("norm backward".into())),
        };
        let out: Vec<f64> = match norm {
            LayerSpec::LayerNorm { eps, .. } | LayerSpec::RMSNorm { eps, .. } => {
                let centered = matches!(norm, LayerSpec::LayerNorm { .. });
                let mean = if centered {
                    col.iter().sum::<f64>() / d as f64
                } else {
                    0.0
                };
                let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
                let s = (c.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let u: Vec<f64> = c.iter().map(|v| v / s).collect();
                let udu: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
                let dc: Vec<f64> = du
                    .iter()
                    .zip(&u)
                    .map(|(g, ui)| (g - ui * udu) / s)
                    .collect();
                if centered {
                    let m = dc.iter().sum::<f64>() / d as f64;
                    dc.iter().map(|v| v - m).collect()
                } else {
                    dc
                }
            }
            _ => {
                let scale = d as f64 / (d as f64 - 1.0);
                let m = du.iter().sum::<f64>() / d as f64;
                du.iter().map(|v| scale * (v - m)).collect()
            }
        };
        dx.set_column(j, &out);
    }
    Ok(dx)
}

/// Trains `model` in place. A non-finite loss or gradient stops the run and
/// is reported in [`StepTrace::diverged_at`]; the trace up to that point is
/// kept.
pub fn run_toy_training(model: &mut ToyModel, cfg: &ToyConfig) -> Result<StepTrace> {
    model.slots()?;
    let ids = model.weight_ids();
    let mut states = model
        .weights()
        .iter()
        .map(|w| OptState::new(&cfg.optimizer, w.shape()))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity((cfg.steps + 1) * ids.len());
    let push = |records: &mut Vec<StepRecord>, step, model: &ToyModel, updates: &[f64], loss| {
        for ((id, w), &u) in ids.iter().zip(model.weights()).zip(updates) {
            let sigma = if w.is_finite() {
                top_singular_value(w)
            } else {
                f64::INFINITY
            };
            records.push(StepRecord {
                step,
                weight_id: id.clone(),
                sigma_max: sigma,
                max_update: u,
                loss,
            });
        }
    };

    let (x0, y0) = toy_batch(model, cfg.seed, 0);
    let loss0 = toy_loss(model, &x0, &y0)?;
    push(&mut records, 0, model, &vec![0.0; ids.len()], loss0);
    if !loss0.is_finite() {
        return Ok(StepTrace {
            records,
            diverged_at: Some(0),
        });
    }

    for t in 1..=cfg.steps {
        let (x, y) = toy_batch(model, cfg.seed, t);
        let (_, mut grads) = toy_gradients(model, &x, &y)?;
        if cfg.zero_grad {
            grads.iter_mut().for_each(|g| g.data_mut().fill(0.0));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepTrace {
                records,
                diverged_at: Some(t),
            });
        }
        if let Some(c) = cfg.clip {
            grads = clip_global_norm(&grads, c)?;
        }
        let mut updates = Vec::with_capacity(grads.len());
        for ((w, g), st) in model.weights_mut().into_iter().zip(&grads).zip(&mut states) {
            let next = st.step(w, g, t)?;
            let du = next.sub(w)?.max_abs();
            updates.push(if du.is_nan() { f64::INFINITY } else { du });
            *w = next;
        }
        let loss = toy_loss(model, &x, &y)?;
        push(&mut records, t, model, &updates, loss);
        if !loss.is_finite() {
            return Ok(StepTrace {
                records,
                diverged_at: Some(t),
            });
        }
    }
    Ok(StepTrace {
        records,
        diverged_at: None,
    })
}

/// Smallest constant learning rate in `[lo, hi]` at which training diverges,
/// by bisection in log space over `iters` rounds. `None` when `hi` still
/// trains without divergence.
pub fn divergence_threshold(
    model: &ToyModel,
    cfg: &ToyConfig,
    lo: f64,
    hi: f64,
    iters: usize,
) -> Result<Option<f64>> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParam(format!(
            "need 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    let diverges = |lr: f64| -> Result<bool> {
        let mut m = model.clone();
        let c = ToyConfig {
            optimizer: cfg.optimizer.with_lr(lr),
            ..cfg.clone()
        };
        Ok(run_toy_training(&mut m, &c)?.diverged_at.is_some())
    };
    if !diverges(hi)? {
        return Ok(None);
    }
    if diverges(lo)? {
        return Ok(Some(lo));
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..iters {
        let mid = 0.5 * (a + b);
        if diverges(mid.exp())? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(Some(b.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build, Family, NetworkSpec};

    fn toy(depth: usize) -> ToyModel {
        let spec = NetworkSpec {
            depth,
            width: 8,
            heads: 2,
            ffn_expand: 2,
            input_height: 2,
            input_width: 3,
            ..NetworkSpec::desk(Family::TransformerDPA)
        };
        ToyModel::new(build(&spec, 4).unwrap(), 3, 4).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = toy(2);
        let (x, y) = toy_batch(&model, 1, 0);
        let (_, grads) = toy_gradients(&model, &x, &y).unwrap();
        let h = 1e-6;
        for (slot, g) in grads.iter().enumerate() {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut plus = model.clone();
                plus.weights_mut()[slot].data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.weights_mut()[slot].data_mut()[idx] -= h;
                let fd = (toy_loss(&plus, &x, &y).unwrap() - toy_loss(&minus, &x, &y).unwrap())
                    / (2.0 * h);
                let an = g.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "slot {slot} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn ids_match_weights() {
        let m = toy(2);
        assert_eq!(m.weight_ids().len(), m.weights().len());
        assert_eq!(m.weight_ids().len(), 2 * 5 + 1);
    }
}
