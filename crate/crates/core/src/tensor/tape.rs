//! Recording tape and reverse sweep.

use super::kernels::{self, ConvParams, PoolParams};
use super::{Element, Result, Tensor, TensorError};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source of a batch-norm evaluation.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize by the batch mean and biased variance.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel batch statistics observed in train mode; `var` is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Piecewise decisions (ReLU masks, max-pool winners) taken during a forward
/// pass, in recording order. Replaying a log evaluates the network with those
/// decisions held fixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateLog {
    gates: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq)]
enum Gate {
    Relu(Vec<bool>),
    Pool(Vec<usize>),
}

impl GateLog {
    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

enum GateMode {
    Off,
    Record(GateLog),
    Replay(GateLog, usize),
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
        mask: Vec<bool>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
    },
    Flatten {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    gates: GateMode,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            gates: GateMode::Off,
        }
    }

    /// A tape that logs every ReLU mask and max-pool winner.
    pub fn recording_gates() -> Self {
        Self {
            nodes: Vec::new(),
            gates: GateMode::Record(GateLog::default()),
        }
    }

    /// A tape that reuses the decisions of a previously recorded pass.
    pub fn replaying_gates(log: GateLog) -> Self {
        Self {
            nodes: Vec::new(),
            gates: GateMode::Replay(log, 0),
        }
    }

    /// Returns the recorded log, if this tape was recording.
    pub fn take_gate_log(&mut self) -> Option<GateLog> {
        match std::mem::replace(&mut self.gates, GateMode::Off) {
            GateMode::Record(log) => Some(log),
            other => {
                self.gates = other;
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Forces gradient tracking on `v`. Only nodes recorded afterwards see
    /// the change.
    pub fn mark_requires_grad(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
        self.nodes[v.0].value.requires_grad = true;
    }

    /// Records a leaf; it is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        if wt.shape() != p.weight_shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "conv weight shape {:?} does not match {:?}",
                wt.shape(),
                p.weight_shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [p.out_channels] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    p.out_channels
                )));
            }
        }
        let xd = xt.dims5()?;
        let (out, od) = kernels::conv3d_forward(
            xt.data(),
            xd,
            wt.data(),
            b.map(|b| self.value(b).data()),
            &p,
        )?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(Tensor::from_vec(&od, out)?, Op::Conv { x, w, b, p }, rg))
    }

    /// Per-channel normalization followed by `gamma * x_hat + beta`.
    /// Returns the observed batch statistics in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats>)> {
        let xt = self.value(x);
        let [n, c, d, h, w] = xt.dims5()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::ShapeMismatch(format!(
                    "batch-norm {name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let spatial = d * h * w;
        let count = n * spatial;
        let xs = xt.data();
        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch { channel: 0, count });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        for v in &xs[(b * c + ch) * spatial..][..spatial] {
                            s += v.to_f64();
                        }
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for v in &xs[(b * c + ch) * spatial..][..spatial] {
                            let dv = v.to_f64() - m;
                            sq += dv * dv;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch(format!(
                        "running statistics hold {}/{} channels, expected {c}",
                        mean.len(),
                        var.len()
                    )));
                }
                let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv, None)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gv, bv) = (g[ch].to_f64(), bt[ch].to_f64());
                for v in &xs[(b * c + ch) * spatial..][..spatial] {
                    out.push(T::from_f64((v.to_f64() - m) * is * gv + bv));
                }
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let mask: Vec<bool> = match &mut self.gates {
            GateMode::Replay(log, cursor) => {
                let Some(Gate::Relu(m)) = log.gates.get(*cursor) else {
                    return Err(TensorError::GateReplay);
                };
                if m.len() != xt.numel() {
                    return Err(TensorError::GateReplay);
                }
                *cursor += 1;
                m.clone()
            }
            _ => xt.data().iter().map(|v| *v > T::ZERO).collect(),
        };
        let out = xt
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, &on)| if on { *v } else { T::ZERO })
            .collect();
        let shape = xt.shape().to_vec();
        if let GateMode::Record(log) = &mut self.gates {
            log.gates.push(Gate::Relu(mask.clone()));
        }
        let rg = self.any_grad(&[Some(x)]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Relu { x, mask }, rg))
    }

    pub fn max_pool3d(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let xd = xt.dims5()?;
        let (mut out, mut argmax, od) = kernels::maxpool3d_forward(xt.data(), xd, &p)?;
        match &mut self.gates {
            GateMode::Replay(log, cursor) => {
                let Some(Gate::Pool(a)) = log.gates.get(*cursor) else {
                    return Err(TensorError::GateReplay);
                };
                if a.len() != argmax.len() {
                    return Err(TensorError::GateReplay);
                }
                *cursor += 1;
                argmax = a.clone();
                out = argmax.iter().map(|&i| xt.data()[i]).collect();
            }
            GateMode::Record(log) => log.gates.push(Gate::Pool(argmax.clone())),
            GateMode::Off => {}
        }
        let rg = self.any_grad(&[Some(x)]);
        Ok(self.push(Tensor::from_vec(&od, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean over the spatial axes; output `[N, C, 1, 1, 1]`.
    pub fn adaptive_avg_pool_111(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, d, h, w] = xt.dims5()?;
        let spatial = d * h * w;
        let out = xt
            .data()
            .chunks_exact(spatial)
            .map(|ch| T::from_f64(ch.iter().map(|v| v.to_f64()).sum::<f64>() / spatial as f64))
            .collect();
        let rg = self.any_grad(&[Some(x)]);
        Ok(self.push(Tensor::from_vec(&[n, c, 1, 1, 1], out)?, Op::AvgPool { x }, rg))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.shape()[0];
        let f = xt.numel() / n;
        let t = xt.clone().reshape(&[n, f])?;
        let rg = self.any_grad(&[Some(x)]);
        Ok(self.push(t, Op::Flatten { x }, rg))
    }

    /// `x[N,F] @ w[O,F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (&[rows, features], &[outputs, wf]) = (xt.shape(), wt.shape()) else {
            return Err(TensorError::ShapeMismatch(format!(
                "linear expects 2-D input and weight, got {:?} and {:?}",
                xt.shape(),
                wt.shape()
            )));
        };
        if features != wf {
            return Err(TensorError::ShapeMismatch(format!(
                "linear input has {features} features, weight expects {wf}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [outputs] {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias shape {:?}, expected [{outputs}]",
                    self.value(b).shape()
                )));
            }
        }
        let out = kernels::linear_forward(
            xt.data(),
            rows,
            features,
            wt.data(),
            outputs,
            b.map(|b| self.value(b).data()),
        );
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(Tensor::from_vec(&[rows, outputs], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add of {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let out = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = at.shape().to_vec();
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, with the
    /// log-sum-exp shift.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let &[rows, classes] = lt.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "cross-entropy expects [N, K] logits, got {:?}",
                lt.shape()
            )));
        };
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch(format!(
                "{} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::BadLabel(bad));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let z: Vec<f64> = lt.data()[r * classes..][..classes]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            // ln(1 + tail) keeps precision when the label dominates.
            let tail: f64 = z
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != label)
                .map(|(_, v)| (v - z[label]).exp())
                .sum();
            total += if z[label] == m { tail.ln_1p() } else { lse - z[label] };
            probs.extend(z.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / rows as f64;
        let rg = self.any_grad(&[Some(logits)]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xt = self.value(x);
        let Some(&v) = xt.data().get(index) else {
            return Err(TensorError::ShapeMismatch(format!(
                "index {index} out of bounds for shape {:?}",
                xt.shape()
            )));
        };
        let rg = self.any_grad(&[Some(x)]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.any_grad(&[Some(x)]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar output. Gradients are computed for every
    /// recorded node that tracks gradients and lies upstream of `output`.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if !out_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracks = |v: Var| self.nodes[v.0].requires_grad;
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| match &mut grads
            [v.0]
        {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, p } => {
                let xt = self.value(*x);
                let (gx, gw) = kernels::conv3d_backward(
                    xt.data(),
                    xt.dims5().expect("recorded as 5-D"),
                    self.value(*w).data(),
                    p,
                    g,
                    tracks(*x),
                    tracks(*w),
                );
                if let Some(gx) = gx {
                    send(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    send(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| tracks(*b)) {
                    let spatial = g.len() / (node.value.shape()[0] * p.out_channels);
                    let mut gb = vec![0.0; p.out_channels];
                    for (k, chunk) in g.chunks_exact(spatial).enumerate() {
                        gb[k % p.out_channels] += chunk.iter().sum::<f64>();
                    }
                    send(grads, b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xt = self.value(*x);
                let [n, c, d, h, w] = xt.dims5().expect("recorded as 5-D");
                let spatial = d * h * w;
                let count = (n * spatial) as f64;
                let xs = xt.data();
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for (xv, dy) in xs[off..off + spatial].iter().zip(&g[off..off + spatial]) {
                            let xhat = (xv.to_f64() - mean[ch]) * inv_std[ch];
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * xhat;
                        }
                    }
                }
                if tracks(*x) {
                    let mut gx = vec![0.0; xs.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let scale = gam[ch].to_f64() * inv_std[ch];
                            let rows = xs[off..off + spatial]
                                .iter()
                                .zip(&g[off..off + spatial])
                                .zip(&mut gx[off..off + spatial]);
                            if *batch_stats {
                                for ((xv, dy), t) in rows {
                                    let xhat = (xv.to_f64() - mean[ch]) * inv_std[ch];
                                    *t = scale / count
                                        * (count * dy - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                                }
                            } else {
                                for ((_, dy), t) in rows {
                                    *t = scale * dy;
                                }
                            }
                        }
                    }
                    send(grads, *x, gx);
                }
                if tracks(*gamma) {
                    send(grads, *gamma, sum_dy_xhat);
                }
                if tracks(*beta) {
                    send(grads, *beta, sum_dy);
                }
            }
            Op::Relu { x, mask } => {
                if tracks(*x) {
                    let gx = g
                        .iter()
                        .zip(mask)
                        .map(|(d, &on)| if on { *d } else { 0.0 })
                        .collect();
                    send(grads, *x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if tracks(*x) {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (d, &i) in g.iter().zip(argmax) {
                        gx[i] += d;
                    }
                    send(grads, *x, gx);
                }
            }
            Op::AvgPool { x } => {
                if tracks(*x) {
                    let xt = self.value(*x);
                    let spatial = xt.numel() / g.len();
                    let mut gx = Vec::with_capacity(xt.numel());
                    for d in g {
                        gx.extend(std::iter::repeat_n(d / spatial as f64, spatial));
                    }
                    send(grads, *x, gx);
                }
            }
            Op::Flatten { x } => {
                if tracks(*x) {
                    send(grads, *x, g.to_vec());
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (rows, features) = (xt.shape()[0], xt.shape()[1]);
                let outputs = wt.shape()[0];
                if tracks(*x) {
                    let mut gx = vec![0.0; rows * features];
                    for r in 0..rows {
                        for o in 0..outputs {
                            let d = g[r * outputs + o];
                            let wr = &wt.data()[o * features..][..features];
                            for (t, wv) in gx[r * features..][..features].iter_mut().zip(wr) {
                                *t += d * wv.to_f64();
                            }
                        }
                    }
                    send(grads, *x, gx);
                }
                if tracks(*w) {
                    let mut gw = vec![0.0; outputs * features];
                    for r in 0..rows {
                        let xr = &xt.data()[r * features..][..features];
                        for o in 0..outputs {
                            let d = g[r * outputs + o];
                            for (t, xv) in gw[o * features..][..features].iter_mut().zip(xr) {
                                *t += d * xv.to_f64();
                            }
                        }
                    }
                    send(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| tracks(*b)) {
                    let mut gb = vec![0.0; outputs];
                    for r in 0..rows {
                        for o in 0..outputs {
                            gb[o] += g[r * outputs + o];
                        }
                    }
                    send(grads, b, gb);
                }
            }
            Op::Add { a, b } => {
                if tracks(*a) {
                    send(grads, *a, g.to_vec());
                }
                if tracks(*b) {
                    send(grads, *b, g.to_vec());
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if tracks(*logits) {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = g[0] / rows as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        gl[r * classes + l] -= scale;
                    }
                    send(grads, *logits, gl);
                }
            }
            Op::Pick { x, index } => {
                if tracks(*x) {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    gx[*index] = g[0];
                    send(grads, *x, gx);
                }
            }
            Op::Sum { x } => {
                if tracks(*x) {
                    send(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
        }
    }
}

/// Result of a reverse sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`, or
    /// [`TensorError::DisconnectedGraph`] when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Result<&[f64]> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_deref())
            .ok_or(TensorError::DisconnectedGraph(1))
    }
}

/// Accumulates the gradient of `output` into the `grad` buffer of each
/// target. Disconnected targets receive a zero gradient and are reported
/// through [`TensorError::DisconnectedGraph`] after all others are updated.
pub fn backward<T: Element>(
    tape: &Tape<T>,
    output: Var,
    targets: &mut [(Var, &mut Tensor<T>)],
) -> Result<()> {
    let grads = tape.gradients(output)?;
    let mut disconnected = 0;
    for (v, t) in targets.iter_mut() {
        match grads.wrt(*v) {
            Ok(g) => t.accumulate_grad(g)?,
            Err(_) => {
                disconnected += 1;
                if t.grad.is_none() {
                    t.zero_grad();
                }
            }
        }
    }
    if disconnected > 0 {
        return Err(TensorError::DisconnectedGraph(disconnected));
    }
    Ok(())
}
