//! Reverse-mode differentiable computation core.
//!
//! Networks are built as explicit tapes over f64 vectors: dense layers,
//! ReLU, concatenation, and summation pooling, which is all the model
//! families need. Everything is deterministic by construction. Batched
//! gradient evaluation splits the batch into fixed chunks and merges the
//! per-chunk results in chunk order, so the bytes of a training run do not
//! depend on how many worker threads computed them.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch slice each worker processes at a time. Chunked accumulation is
/// merged in chunk order, which is what makes thread count irrelevant to
/// the result.
pub const GRAD_CHUNK: usize = 8;

/// Handle to a named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// One parameter tensor, row-major. Vectors are single-column matrices.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Bias vectors initialize to zero; weight matrices get fan-in scaling.
    pub is_bias: bool,
    pub value: Vec<f64>,
}

/// Named parameter tensors in registration order. Registration order is the
/// serialization order, so two builds of the same architecture produce the
/// same manifest.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    fn add(&mut self, name: &str, rows: usize, cols: usize, is_bias: bool) -> ParamId {
        assert!(rows >= 1, "empty parameter {name}");
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}",
        );
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            is_bias,
            value: vec![0.0; rows * cols],
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a weight matrix, zero initialized. `cols` may be zero for
    /// a layer fed by an empty feature vector.
    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, false)
    }

    /// Registers a bias vector, zero initialized.
    pub fn add_vector(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, len, 1, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    /// Scales a column range of a weight matrix in place. Used to correct
    /// the fan-in init on columns fed by sum-pooled blocks, whose second
    /// moment exceeds the unit scale the init assumes.
    pub fn scale_columns(&mut self, id: ParamId, cols: std::ops::Range<usize>, factor: f64) {
        let p = &mut self.params[id.0];
        assert!(!p.is_bias && cols.end <= p.cols, "bad column scale on {}", p.name);
        for r in 0..p.rows {
            for c in cols.clone() {
                p.value[r * p.cols + c] *= factor;
            }
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fills weight matrices uniformly in +-sqrt(6 / fan_in); bias vectors
    /// and zero-input weights stay zero. Draw order is registration order,
    /// so a fixed seed gives bit-identical parameters.
    pub fn init_he_uniform<R: Rng>(&mut self, rng: &mut R) {
        for p in &mut self.params {
            if p.is_bias || p.cols == 0 {
                continue;
            }
            let bound = (6.0 / p.cols as f64).sqrt();
            for v in &mut p.value {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    /// Serializes values with the shape manifest, floats base64-packed
    /// little endian.
    pub fn to_json(&self) -> serde_json::Value {
        let records: Vec<ParamRecord> = self
            .params
            .iter()
            .map(|p| {
                let mut bytes = Vec::with_capacity(8 * p.value.len());
                for v in &p.value {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ParamRecord {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: BASE64.encode(bytes),
                }
            })
            .collect();
        serde_json::to_value(records).expect("parameter records serialize")
    }

    /// Loads values serialized by `to_json` into a store with the identical
    /// manifest, rejecting any name, order, or shape drift.
    pub fn load_json(&mut self, value: &serde_json::Value) -> Result<()> {
        let records: Vec<ParamRecord> = serde_json::from_value(value.clone())?;
        if records.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, file has {}",
                self.params.len(),
                records.len(),
            )));
        }
        for (p, r) in self.params.iter_mut().zip(&records) {
            if p.name != r.name || p.rows != r.rows || p.cols != r.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} ({}x{}) does not match stored {} ({}x{})",
                    p.name, p.rows, p.cols, r.name, r.rows, r.cols,
                )));
            }
            let bytes = BASE64
                .decode(&r.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", r.name)))?;
            if bytes.len() != 8 * p.value.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} holds {} bytes, expected {}",
                    r.name,
                    bytes.len(),
                    8 * p.value.len(),
                )));
            }
            for (v, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

/// Gradient slots parallel to a store's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients { data: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.fill(0.0);
        }
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.data {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef(usize);

enum Op {
    Input,
    Linear { w: ParamId, b: ParamId, x: NodeRef },
    Relu { x: NodeRef },
    Concat { xs: Vec<NodeRef> },
    Sum { xs: Vec<NodeRef> },
    /// Mean squared error against a constant target; scalar output.
    Mse { pred: NodeRef, target: Vec<f64> },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// A recorded forward computation over one parameter store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeRef {
        self.nodes.push(Node { value, op });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.0].value
    }

    pub fn width(&self, n: NodeRef) -> usize {
        self.nodes[n.0].value.len()
    }

    pub fn input(&mut self, values: &[f64]) -> NodeRef {
        self.push(values.to_vec(), Op::Input)
    }

    /// y = W x + b. A zero-column weight makes the layer bias-only, the
    /// degenerate form used when a graph role carries no features.
    pub fn linear(&mut self, w: ParamId, b: ParamId, x: NodeRef) -> Result<NodeRef> {
        let wp = self.store.param(w);
        let bp = self.store.param(b);
        let xv = &self.nodes[x.0].value;
        if wp.cols != xv.len() || bp.value.len() != wp.rows {
            return Err(Error::Shape(format!(
                "linear {}x{} applied to width {} with bias {}",
                wp.rows,
                wp.cols,
                xv.len(),
                bp.value.len(),
            )));
        }
        let mut y = bp.value.clone();
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wp.value[r * wp.cols..(r + 1) * wp.cols];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(xv) {
                acc += wv * xv;
            }
            *yr += acc;
        }
        Ok(self.push(y, Op::Linear { w, b, x }))
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        let y = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(y, Op::Relu { x })
    }

    pub fn concat(&mut self, xs: &[NodeRef]) -> NodeRef {
        let mut y = Vec::new();
        for &x in xs {
            y.extend_from_slice(&self.nodes[x.0].value);
        }
        self.push(y, Op::Concat { xs: xs.to_vec() })
    }

    /// Elementwise sum of same-width nodes; the pooling reduction.
    pub fn sum(&mut self, xs: &[NodeRef]) -> Result<NodeRef> {
        let first = xs.first().ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        let width = self.nodes[first.0].value.len();
        let mut y = vec![0.0; width];
        for &x in xs {
            let xv = &self.nodes[x.0].value;
            if xv.len() != width {
                return Err(Error::Shape(format!(
                    "sum of widths {} and {}",
                    width,
                    xv.len(),
                )));
            }
            for (a, b) in y.iter_mut().zip(xv) {
                *a += b;
            }
        }
        Ok(self.push(y, Op::Sum { xs: xs.to_vec() }))
    }

    /// Mean squared error over coordinates, a scalar node.
    pub fn mse(&mut self, pred: NodeRef, target: &[f64]) -> Result<NodeRef> {
        let pv = &self.nodes[pred.0].value;
        if pv.len() != target.len() {
            return Err(Error::Shape(format!(
                "mse of width {} against target width {}",
                pv.len(),
                target.len(),
            )));
        }
        let n = pv.len() as f64;
        let loss = pv.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        Ok(self.push(vec![loss], Op::Mse { pred, target: target.to_vec() }))
    }

    /// Reverse pass from a scalar node, accumulating into `grads`.
    pub fn backward(&self, loss: NodeRef, grads: &mut Gradients) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Vec<f64>> = self.nodes[..=loss.0]
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Linear { w, b, x } => {
                    let wp = self.store.param(*w);
                    let xv = self.nodes[x.0].value.clone();
                    let (head, tail) = adj.split_at_mut(i);
                    let up = &tail[0];
                    let gw = &mut grads.data[w.0];
                    for r in 0..wp.rows {
                        let u = up[r];
                        if u == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * wp.cols..(r + 1) * wp.cols];
                        for (gwc, xc) in row.iter_mut().zip(&xv) {
                            *gwc += u * xc;
                        }
                    }
                    for (gb, u) in grads.data[b.0].iter_mut().zip(up) {
                        *gb += u;
                    }
                    let gx = &mut head[x.0];
                    for r in 0..wp.rows {
                        let u = up[r];
                        if u == 0.0 {
                            continue;
                        }
                        let row = &wp.value[r * wp.cols..(r + 1) * wp.cols];
                        for (gxc, wv) in gx.iter_mut().zip(row) {
                            *gxc += u * wv;
                        }
                    }
                }
                Op::Relu { x } => {
                    let (head, tail) = adj.split_at_mut(i);
                    let up = &tail[0];
                    let xv = &self.nodes[x.0].value;
                    for (k, g) in head[x.0].iter_mut().enumerate() {
                        if xv[k] > 0.0 {
                            *g += up[k];
                        }
                    }
                }
                Op::Concat { xs } => {
                    let (head, tail) = adj.split_at_mut(i);
                    let up = &tail[0];
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.nodes[x.0].value.len();
                        for (g, u) in head[x.0].iter_mut().zip(&up[offset..offset + w]) {
                            *g += u;
                        }
                        offset += w;
                    }
                }
                Op::Sum { xs } => {
                    let (head, tail) = adj.split_at_mut(i);
                    let up = &tail[0];
                    for &x in xs {
                        for (g, u) in head[x.0].iter_mut().zip(up) {
                            *g += u;
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let (head, tail) = adj.split_at_mut(i);
                    let u = tail[0][0];
                    let pv = &self.nodes[pred.0].value;
                    let scale = 2.0 * u / pv.len() as f64;
                    for (k, g) in head[pred.0].iter_mut().enumerate() {
                        *g += scale * (pv[k] - target[k]);
                    }
                }
            }
        }
    }
}

/// Plain MLP shape: affine plus ReLU per hidden layer, affine output.
/// `input` may be zero when the layer stack starts from an empty feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpConfig {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        assert!(output >= 1 && hidden.iter().all(|&h| h >= 1), "degenerate widths");
        MlpConfig { input, hidden: hidden.to_vec(), output }
    }
}

/// An MLP's registered parameters; forward passes replay it onto a tape.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub cfg: MlpConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers weights named `{prefix}.w{k}` / `{prefix}.b{k}`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: MlpConfig) -> Mlp {
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut fan_in = cfg.input;
        for (k, width) in cfg.hidden.iter().chain(std::iter::once(&cfg.output)).enumerate() {
            let w = store.add_matrix(&format!("{prefix}.w{k}"), *width, fan_in);
            let b = store.add_vector(&format!("{prefix}.b{k}"), *width);
            layers.push((w, b));
            fan_in = *width;
        }
        Mlp { cfg, layers }
    }

    /// Weight matrix of the first affine layer.
    pub fn first_weight(&self) -> ParamId {
        self.layers[0].0
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeRef) -> Result<NodeRef> {
        if tape.width(x) != self.cfg.input {
            return Err(Error::Shape(format!(
                "mlp expects width {}, got {}",
                self.cfg.input,
                tape.width(x),
            )));
        }
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(*w, *b, h)?;
            if k + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Adam with bias correction. The learning rate is passed per step so the
/// caller owns the schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.value.iter_mut().enumerate() {
                let g = grads.data[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Geometric interpolation from `lr0` at epoch 0 to `lr1` at the last
/// budgeted epoch.
pub fn geometric_lr(lr0: f64, lr1: f64, epoch: usize, budget: usize) -> f64 {
    if budget <= 1 {
        return lr0;
    }
    let t = epoch.min(budget - 1) as f64 / (budget - 1) as f64;
    lr0 * (lr1 / lr0).powf(t)
}

/// Worker threads for batch evaluation; reads SYMLEG_THREADS, default 1.
/// Thread count never changes results, only wall time.
pub fn default_threads() -> usize {
    std::env::var("SYMLEG_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Mean loss and mean gradients over a batch.
///
/// The batch is cut into `GRAD_CHUNK`-sized chunks; workers claim chunks
/// from a shared cursor and each chunk accumulates into its own slot; the
/// slots are then reduced in chunk order. The reduction order is therefore
/// a function of the batch alone, which keeps results byte-identical for
/// every thread count.
pub fn batch_gradients<S: Sync, F>(
    store: &ParamStore,
    samples: &[S],
    threads: usize,
    per_sample: F,
) -> (f64, Gradients)
where
    F: Fn(&ParamStore, &S, &mut Gradients) -> f64 + Sync,
{
    assert!(!samples.is_empty(), "empty batch");
    let n_chunks = samples.len().div_ceil(GRAD_CHUNK);
    let mut slots: Vec<Option<(f64, Gradients)>> = (0..n_chunks).map(|_| None).collect();

    let run_chunk = |c: usize| {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(samples.len());
        let mut grads = Gradients::zeros_like(store);
        let mut loss = 0.0;
        for s in &samples[lo..hi] {
            loss += per_sample(store, s, &mut grads);
        }
        (loss, grads)
    };

    if threads <= 1 || n_chunks == 1 {
        for (c, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_chunk(c));
        }
    } else {
        let cursor = std::sync::atomic::AtomicUsize::new(0);
        let slot_cells: Vec<std::sync::Mutex<&mut Option<(f64, Gradients)>>> =
            slots.iter_mut().map(std::sync::Mutex::new).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(n_chunks) {
                scope.spawn(|| loop {
                    let c = cursor.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if c >= n_chunks {
                        break;
                    }
                    let out = run_chunk(c);
                    **slot_cells[c].lock().unwrap() = Some(out);
                });
            }
        });
    }

    let mut total = Gradients::zeros_like(store);
    let mut loss = 0.0;
    for slot in slots {
        let (l, g) = slot.expect("all chunks ran");
        loss += l;
        total.add(&g);
    }
    let inv = 1.0 / samples.len() as f64;
    total.scale(inv);
    (loss * inv, total)
}

/// Central finite-difference check of analytic gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel < tol
    }
}

/// Compares `grads` against central differences of `loss` with step 1e-5.
/// Up to `coords_per_param` coordinates of every tensor are probed, spread
/// evenly; relative error uses a 1e-5 denominator floor so near-zero
/// gradient pairs are compared absolutely at that scale.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    mut loss: F,
    coords_per_param: usize,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    // Step must stay well above sqrt(machine eps) for roundoff, yet small
    // enough that a relu pre-activation rarely lies inside the straddled
    // interval, where central differences disagree with the subgradient.
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-5;
    let mut report =
        GradCheckReport { checked: 0, worst_rel: 0.0, worst_param: String::new() };
    for i in 0..store.params.len() {
        let n = store.params[i].value.len();
        if n == 0 {
            continue;
        }
        let stride = n.div_ceil(coords_per_param);
        for k in (0..n).step_by(stride) {
            let orig = store.params[i].value[k];
            store.params[i].value[k] = orig + STEP;
            let up = loss(store);
            store.params[i].value[k] = orig - STEP;
            let down = loss(store);
            store.params[i].value[k] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = grads.data[i][k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = format!("{}[{}]", store.params[i].name, k);
            }
        }
    }
    report
}
