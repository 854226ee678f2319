//! Next-item sequence model: item embedding, one GRU layer, two ReLU layers
//! and a temperature softmax over inner products with output item embeddings.
//!
//! ```text
//! x_i = E[a_i]
//! z   = σ(W_z x + U_z h + b_z)          update gate
//! r   = σ(W_r x + U_r h + b_r)          reset gate
//! n   = tanh(W_n x + U_n (r ⊙ h) + b_n)  candidate
//! h'  = (1 − z) ⊙ n + z ⊙ h
//! s   = relu(A_2 relu(A_1 h_L + c_1) + c_2)
//! π(a) ∝ exp(sᵀ v_a / T)
//! ```
//!
//! Everything is differentiated by hand; [`backward`] is full backpropagation
//! through time and [`step_jacobian`] gives `∂h_{i+1}/∂h_i` in closed form.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::numerics::activation::{sigmoid, tanh};
use crate::numerics::{axpy, Matrix, RngState};
use crate::simulator::{ItemId, Trajectory};

/// Probability floor used inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub head_dims: [usize; 2],
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            embed_dim: 16,
            hidden_dim: 32,
            head_dims: [32, 32],
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("head_dims[0]", self.head_dims[0]),
            ("head_dims[1]", self.head_dims[1]),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::invalid(format!("model {name} must be at least 1")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// All trainable tensors. Also used, shape for shape, to hold gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab × embed`
    pub embedding: Matrix,
    /// `3H × embed`, row blocks: update, reset, candidate.
    pub input_weights: Matrix,
    /// `2H × H`, row blocks: update, reset.
    pub recurrent_weights: Matrix,
    /// `H × H`, applied to `r ⊙ h`.
    pub candidate_weights: Matrix,
    /// `3H`, same block order as `input_weights`.
    pub gate_bias: Vec<f64>,
    pub head1: Matrix,
    pub head1_bias: Vec<f64>,
    pub head2: Matrix,
    pub head2_bias: Vec<f64>,
    /// `vocab × head_dims[1]`: the `v_a` of the softmax.
    pub item_embeddings: Matrix,
}

pub type Gradients = ModelParams;

/// Read-only view of one named tensor.
#[derive(Clone, Copy, Debug)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

pub const TENSOR_NAMES: [&str; 10] = [
    "embedding",
    "gru.input_weights",
    "gru.recurrent_weights",
    "gru.candidate_weights",
    "gru.bias",
    "head1.weight",
    "head1.bias",
    "head2.weight",
    "head2.bias",
    "item_embeddings",
];

impl ModelParams {
    /// All-zero parameters (uniform predictions).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let [d1, d2] = config.head_dims;
        Ok(Self {
            config,
            embedding: Matrix::zeros(config.vocab_size, config.embed_dim),
            input_weights: Matrix::zeros(3 * h, config.embed_dim),
            recurrent_weights: Matrix::zeros(2 * h, h),
            candidate_weights: Matrix::zeros(h, h),
            gate_bias: vec![0.0; 3 * h],
            head1: Matrix::zeros(d1, h),
            head1_bias: vec![0.0; d1],
            head2: Matrix::zeros(d2, d1),
            head2_bias: vec![0.0; d2],
            item_embeddings: Matrix::zeros(config.vocab_size, d2),
        })
    }

    /// Zero-mean uniform weights with standard deviation `1/√fan_in`, zero biases.
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let h = config.hidden_dim;
        let [d1, _] = config.head_dims;
        let fill = |m: &mut Matrix, fan_in: usize, rng: &mut RngState| {
            let bound = (3.0 / fan_in as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = (2.0 * rng.uniform_f64() - 1.0) * bound;
            }
        };
        fill(&mut p.embedding, config.embed_dim, rng);
        fill(&mut p.input_weights, config.embed_dim, rng);
        fill(&mut p.recurrent_weights, h, rng);
        fill(&mut p.candidate_weights, h, rng);
        fill(&mut p.head1, h, rng);
        fill(&mut p.head2, d1, rng);
        fill(&mut p.item_embeddings, config.head_dims[1], rng);
        Ok(p)
    }

    /// Standard deviation the initializer targets for each weight tensor
    /// (`None` for biases).
    pub fn init_scale(&self, name: &str) -> Option<f64> {
        let c = &self.config;
        let fan_in = match name {
            "embedding" | "gru.input_weights" => c.embed_dim,
            "gru.recurrent_weights" | "gru.candidate_weights" | "head1.weight" => c.hidden_dim,
            "head2.weight" => c.head_dims[0],
            "item_embeddings" => c.head_dims[1],
            _ => return None,
        };
        Some(1.0 / (fan_in as f64).sqrt())
    }

    pub fn tensors(&self) -> [TensorView<'_>; 10] {
        fn m<'a>(name: &'static str, x: &'a Matrix) -> TensorView<'a> {
            TensorView {
                name,
                shape: [x.rows(), x.cols()],
                data: x.as_slice(),
            }
        }
        fn v<'a>(name: &'static str, x: &'a [f64]) -> TensorView<'a> {
            TensorView {
                name,
                shape: [x.len(), 1],
                data: x,
            }
        }
        let n = TENSOR_NAMES;
        [
            m(n[0], &self.embedding),
            m(n[1], &self.input_weights),
            m(n[2], &self.recurrent_weights),
            m(n[3], &self.candidate_weights),
            v(n[4], &self.gate_bias),
            m(n[5], &self.head1),
            v(n[6], &self.head1_bias),
            m(n[7], &self.head2),
            v(n[8], &self.head2_bias),
            m(n[9], &self.item_embeddings),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        let n = TENSOR_NAMES;
        [
            (n[0], self.embedding.as_mut_slice()),
            (n[1], self.input_weights.as_mut_slice()),
            (n[2], self.recurrent_weights.as_mut_slice()),
            (n[3], self.candidate_weights.as_mut_slice()),
            (n[4], self.gate_bias.as_mut_slice()),
            (n[5], self.head1.as_mut_slice()),
            (n[6], self.head1_bias.as_mut_slice()),
            (n[7], self.head2.as_mut_slice()),
            (n[8], self.head2_bias.as_mut_slice()),
            (n[9], self.item_embeddings.as_mut_slice()),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(scale, src.data, dst);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn tensor_norms(&self) -> Vec<(String, f64)> {
        self.tensors()
            .iter()
            .map(|t| {
                let n = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                (t.name.to_string(), n)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Caches the input-side gate pre-activations `W E[a]` for every item.
    pub fn prepare(&self) -> PreparedModel<'_> {
        let proj = self
            .embedding
            .matmul(&self.input_weights.transpose())
            .expect("embedding and input weights share embed_dim");
        PreparedModel {
            params: self,
            input_proj: proj,
            recurrent_t: self.recurrent_weights.transpose(),
            candidate_t: self.candidate_weights.transpose(),
        }
    }
}

/// A probability vector over the item corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// `softmax(logits / temperature)`.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut probs: Vec<f64> = logits
            .iter()
            .map(|&l| ((l - max) / temperature).exp())
            .collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Self { probs }
    }

    /// Validates a raw probability vector (non-negative, sums to one within `1e-9`).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        crate::numerics::validate_probabilities(&probs)?;
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable item; ties go to the lowest id.
    pub fn argmax(&self) -> ItemId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Negative log-likelihood of `target`, with the probability floored at [`PROB_FLOOR`].
pub fn loss_nll(dist: &PredictiveDistribution, target: ItemId) -> f64 {
    // written so that a NaN probability yields a NaN loss
    let p = dist.probs[target];
    -(if p < PROB_FLOOR { PROB_FLOOR } else { p }).ln()
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    config: ModelConfig,
    items: Vec<ItemId>,
    /// `(L + 1) × H`; row 0 is the zero initial state.
    hidden: Vec<f64>,
    /// `L × H` each.
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    head1_pre: Vec<f64>,
    head2_pre: Vec<f64>,
    state: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    /// `h_i` for `i` in `0..=len`.
    pub fn hidden(&self, i: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.hidden[i * h..(i + 1) * h]
    }

    pub fn update_gate(&self, i: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.update[i * h..(i + 1) * h]
    }

    pub fn reset_gate(&self, i: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.reset[i * h..(i + 1) * h]
    }

    pub fn candidate(&self, i: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.candidate[i * h..(i + 1) * h]
    }

    /// The user state `s` fed to the softmax.
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn check_against(&self, params: &ModelParams) -> Result<()> {
        if self.config != params.config {
            return Err(Error::invalid(
                "forward trace was produced by a model with a different configuration",
            ));
        }
        Ok(())
    }
}

/// Parameters plus the per-item input projections, shared across many sequences.
pub struct PreparedModel<'a> {
    params: &'a ModelParams,
    /// `vocab × 3H`
    input_proj: Matrix,
    /// Transposed recurrent weights, so the per-step products are
    /// accumulated row by row.
    recurrent_t: Matrix,
    candidate_t: Matrix,
}

impl<'a> PreparedModel<'a> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    fn check_items(&self, items: &[ItemId]) -> Result<()> {
        let v = self.params.config.vocab_size;
        if items.is_empty() {
            return Err(Error::invalid("sequence must contain at least one item"));
        }
        if let Some(&bad) = items.iter().find(|&&a| a >= v) {
            return Err(Error::invalid(format!(
                "item id {bad} is outside the vocabulary of {v} items"
            )));
        }
        Ok(())
    }

    /// One recurrent step from `h` on `item`, writing gates and the new state.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        item: ItemId,
        h: &[f64],
        z: &mut [f64],
        r: &mut [f64],
        n: &mut [f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        let p = self.params;
        let hd = p.config.hidden_dim;
        let proj = self.input_proj.row(item);
        let (gzr, rest) = scratch.split_at_mut(2 * hd);
        let (gn, rh) = rest.split_at_mut(hd);
        let bias = &p.gate_bias;
        for (k, g) in gzr.iter_mut().enumerate() {
            *g = proj[k] + bias[k];
        }
        self.recurrent_t.matvec_transpose_acc(h, gzr);
        let (gz, gr) = gzr.split_at(hd);
        for (zj, &g) in z.iter_mut().zip(gz) {
            *zj = sigmoid(g);
        }
        for (((rj, rhj), &g), &hj) in r.iter_mut().zip(rh.iter_mut()).zip(gr).zip(h) {
            *rj = sigmoid(g);
            *rhj = *rj * hj;
        }
        for (k, g) in gn.iter_mut().enumerate() {
            *g = proj[2 * hd + k] + bias[2 * hd + k];
        }
        self.candidate_t.matvec_transpose_acc(rh, gn);
        for (nj, &g) in n.iter_mut().zip(gn.iter()) {
            *nj = tanh(g);
        }
        for (((o, &zj), &nj), &hj) in out.iter_mut().zip(z.iter()).zip(n.iter()).zip(h) {
            *o = (1.0 - zj) * nj + zj * hj;
        }
    }

    /// Runs the recurrence over the raw item ids, then the head.
    pub fn forward_items(
        &self,
        items: &[ItemId],
    ) -> Result<(ForwardTrace, PredictiveDistribution)> {
        self.check_items(items)?;
        let p = self.params;
        let c = p.config;
        let hd = c.hidden_dim;
        let len = items.len();
        let mut hidden = vec![0.0; (len + 1) * hd];
        let mut update = vec![0.0; len * hd];
        let mut reset = vec![0.0; len * hd];
        let mut candidate = vec![0.0; len * hd];
        let mut scratch = vec![0.0; 4 * hd];
        for (i, &item) in items.iter().enumerate() {
            let (prev, next) = hidden.split_at_mut((i + 1) * hd);
            self.step(
                item,
                &prev[i * hd..],
                &mut update[i * hd..(i + 1) * hd],
                &mut reset[i * hd..(i + 1) * hd],
                &mut candidate[i * hd..(i + 1) * hd],
                &mut next[..hd],
                &mut scratch,
            );
        }
        let last = &hidden[len * hd..];
        let mut head1_pre = p.head1.matvec(last);
        axpy(1.0, &p.head1_bias, &mut head1_pre);
        let g1: Vec<f64> = head1_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut head2_pre = p.head2.matvec(&g1);
        axpy(1.0, &p.head2_bias, &mut head2_pre);
        let state: Vec<f64> = head2_pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = p.item_embeddings.matvec(&state);
        let dist = PredictiveDistribution::from_logits(&logits, c.temperature);
        let trace = ForwardTrace {
            config: c,
            items: items.to_vec(),
            hidden,
            update,
            reset,
            candidate,
            head1_pre,
            head2_pre,
            state,
            logits,
        };
        Ok((trace, dist))
    }

    pub fn forward(&self, sequence: &Trajectory) -> Result<(ForwardTrace, PredictiveDistribution)> {
        self.forward_items(sequence.items())
    }

    pub fn predict(&self, sequence: &Trajectory) -> Result<PredictiveDistribution> {
        Ok(self.forward(sequence)?.1)
    }
}

/// Forward pass over a whole sequence.
pub fn forward(
    params: &ModelParams,
    sequence: &Trajectory,
) -> Result<(ForwardTrace, PredictiveDistribution)> {
    params.prepare().forward(sequence)
}

/// Single recurrent step `h_{i+1} = GRU(h_i, a_i)`.
pub fn gru_step(params: &ModelParams, item: ItemId, h: &[f64]) -> Result<Vec<f64>> {
    let hd = params.config.hidden_dim;
    if h.len() != hd {
        return Err(Error::invalid(format!(
            "hidden state has length {}, expected {hd}",
            h.len()
        )));
    }
    let prepared = params.prepare();
    prepared.check_items(&[item])?;
    let (mut z, mut r, mut n, mut out) =
        (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
    let mut scratch = vec![0.0; 4 * hd];
    prepared.step(item, h, &mut z, &mut r, &mut n, &mut out, &mut scratch);
    Ok(out)
}

/// Gradient accumulator in which the embedding and input-gate weights are
/// represented jointly by the gradient of their product `E Wᵀ`; that keeps
/// per-step work independent of `embed_dim`.
#[derive(Clone, Debug)]
pub struct GradientAccumulator {
    input_proj: Matrix,
    grads: Gradients,
    /// Per-step gate pre-activation gradients and `r ⊙ h`, reused across calls.
    da_all: Vec<f64>,
    rh_all: Vec<f64>,
}

impl GradientAccumulator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            input_proj: Matrix::zeros(config.vocab_size, 3 * config.hidden_dim),
            grads: Gradients::zeros(config)?,
            da_all: Vec::new(),
            rh_all: Vec::new(),
        })
    }

    /// `self += other`
    pub fn merge(&mut self, other: &GradientAccumulator) {
        axpy(
            1.0,
            other.input_proj.as_slice(),
            self.input_proj.as_mut_slice(),
        );
        self.grads.add_scaled(&other.grads, 1.0);
    }

    /// Expands the projection gradient into embedding and input-weight gradients.
    pub fn finish(mut self, params: &ModelParams, scale: f64) -> Gradients {
        // d(E Wᵀ) = G  =>  dE = G W,  dW = Gᵀ E
        let de = self
            .input_proj
            .matmul(&params.input_weights)
            .expect("shapes agree");
        let dw = self
            .input_proj
            .transpose()
            .matmul(&params.embedding)
            .expect("shapes agree");
        axpy(1.0, de.as_slice(), self.grads.embedding.as_mut_slice());
        axpy(1.0, dw.as_slice(), self.grads.input_weights.as_mut_slice());
        if scale != 1.0 {
            self.grads.scale(scale);
        }
        self.grads
    }

    /// Backpropagates `−ln π(target)` through `trace` and adds the result.
    /// Returns the loss. When `hidden_grads` is given it receives `∂L/∂h_i`
    /// for `i = 0..=L`.
    pub fn accumulate(
        &mut self,
        params: &ModelParams,
        trace: &ForwardTrace,
        dist: &PredictiveDistribution,
        target: ItemId,
        mut hidden_grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<f64> {
        trace.check_against(params)?;
        let c = params.config;
        if target >= c.vocab_size {
            return Err(Error::invalid(format!(
                "target {target} is outside the vocabulary of {} items",
                c.vocab_size
            )));
        }
        let loss = loss_nll(dist, target);
        let hd = c.hidden_dim;
        let len = trace.len();
        let g = &mut self.grads;

        // softmax head
        let mut dlogits: Vec<f64> = dist.probs().to_vec();
        if dist.probs()[target] < PROB_FLOOR {
            // loss is flat in the floored region
            dlogits.iter_mut().for_each(|v| *v = 0.0);
        } else {
            dlogits[target] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v /= c.temperature);
        }
        g.item_embeddings.add_outer(&dlogits, &trace.state);
        let mut ds = vec![0.0; c.head_dims[1]];
        params
            .item_embeddings
            .matvec_transpose_acc(&dlogits, &mut ds);
        let du2: Vec<f64> = ds
            .iter()
            .zip(&trace.head2_pre)
            .map(|(&d, &u)| if u > 0.0 { d } else { 0.0 })
            .collect();
        let g1: Vec<f64> = trace.head1_pre.iter().map(|&v| v.max(0.0)).collect();
        g.head2.add_outer(&du2, &g1);
        axpy(1.0, &du2, &mut g.head2_bias);
        let mut dg1 = vec![0.0; c.head_dims[0]];
        params.head2.matvec_transpose_acc(&du2, &mut dg1);
        let du1: Vec<f64> = dg1
            .iter()
            .zip(&trace.head1_pre)
            .map(|(&d, &u)| if u > 0.0 { d } else { 0.0 })
            .collect();
        g.head1.add_outer(&du1, trace.hidden(len));
        axpy(1.0, &du1, &mut g.head1_bias);
        let mut dh = vec![0.0; hd];
        params.head1.matvec_transpose_acc(&du1, &mut dh);

        if let Some(out) = hidden_grads.as_deref_mut() {
            out.clear();
            out.resize(len + 1, Vec::new());
            out[len] = dh.clone();
        }

        // through time; weight gradients are summed over steps afterwards
        // every entry is overwritten below, so stale contents are harmless
        let mut da_all = std::mem::take(&mut self.da_all);
        let mut rh_all = std::mem::take(&mut self.rh_all);
        da_all.resize(len * 3 * hd, 0.0);
        rh_all.resize(len * hd, 0.0);
        let mut drh = vec![0.0; hd];
        let mut dh_prev = vec![0.0; hd];
        for i in (0..len).rev() {
            let h = trace.hidden(i);
            let z = trace.update_gate(i);
            let r = trace.reset_gate(i);
            let n = trace.candidate(i);
            let da = &mut da_all[i * 3 * hd..(i + 1) * 3 * hd];
            let rh = &mut rh_all[i * hd..(i + 1) * hd];
            for j in 0..hd {
                let dz = dh[j] * (h[j] - n[j]);
                da[j] = dz * z[j] * (1.0 - z[j]);
                let dn = dh[j] * (1.0 - z[j]);
                da[2 * hd + j] = dn * (1.0 - n[j] * n[j]);
                rh[j] = r[j] * h[j];
            }
            drh.iter_mut().for_each(|v| *v = 0.0);
            params
                .candidate_weights
                .matvec_transpose_acc(&da[2 * hd..], &mut drh);
            for j in 0..hd {
                da[hd + j] = drh[j] * h[j] * r[j] * (1.0 - r[j]);
            }
            for j in 0..hd {
                dh_prev[j] = dh[j] * z[j] + drh[j] * r[j];
            }
            params
                .recurrent_weights
                .matvec_transpose_acc(&da[..2 * hd], &mut dh_prev);
            axpy(1.0, da, &mut g.gate_bias);
            axpy(1.0, da, self.input_proj.row_mut(trace.items[i]));
            std::mem::swap(&mut dh, &mut dh_prev);
            if let Some(out) = hidden_grads.as_deref_mut() {
                out[i] = dh.clone();
            }
        }
        g.recurrent_weights
            .add_transpose_product(&da_all, 3 * hd, 0, &trace.hidden[..len * hd]);
        g.candidate_weights
            .add_transpose_product(&da_all, 3 * hd, 2 * hd, &rh_all);
        self.da_all = da_all;
        self.rh_all = rh_all;
        Ok(loss)
    }
}

/// Exact gradients of `−ln π(target)` with respect to every parameter tensor.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, target: ItemId) -> Result<Gradients> {
    trace.check_against(params)?;
    let dist = PredictiveDistribution::from_logits(&trace.logits, params.config.temperature);
    let mut acc = GradientAccumulator::new(params.config)?;
    acc.accumulate(params, trace, &dist, target, None)?;
    Ok(acc.finish(params, 1.0))
}

/// `∂L/∂h_i` for `i = 0..=L`, computed by backpropagation through time.
pub fn hidden_state_gradients(
    params: &ModelParams,
    trace: &ForwardTrace,
    target: ItemId,
) -> Result<Vec<Vec<f64>>> {
    trace.check_against(params)?;
    let dist = PredictiveDistribution::from_logits(&trace.logits, params.config.temperature);
    let mut acc = GradientAccumulator::new(params.config)?;
    let mut out = Vec::new();
    acc.accumulate(params, trace, &dist, target, Some(&mut out))?;
    Ok(out)
}

/// `∂h_{i+1}/∂h_i` of the recurrent cell at step `i`, from cached activations.
///
/// ```text
/// J = diag(z) + diag((h − n) z(1 − z)) U_z
///   + diag((1 − z)(1 − n²)) U_n (diag(r) + diag(h r(1 − r)) U_r)
/// ```
pub fn step_jacobian(params: &ModelParams, trace: &ForwardTrace, i: usize) -> Result<Matrix> {
    trace.check_against(params)?;
    if i >= trace.len() {
        return Err(Error::invalid(format!(
            "step {i} is out of range for a sequence of length {}",
            trace.len()
        )));
    }
    let hd = params.config.hidden_dim;
    let h = trace.hidden(i);
    let z = trace.update_gate(i);
    let r = trace.reset_gate(i);
    let n = trace.candidate(i);
    let uz = &params.recurrent_weights;
    let un = &params.candidate_weights;

    // inner = diag(r) + diag(h r (1 − r)) U_r
    let mut inner = Matrix::zeros(hd, hd);
    for m in 0..hd {
        let c = h[m] * r[m] * (1.0 - r[m]);
        let row = inner.row_mut(m);
        axpy(c, uz.row(hd + m), row);
        row[m] += r[m];
    }
    let through_candidate = un.matmul(&inner)?;
    let mut jac = Matrix::zeros(hd, hd);
    for j in 0..hd {
        let cz = (h[j] - n[j]) * z[j] * (1.0 - z[j]);
        let cn = (1.0 - z[j]) * (1.0 - n[j] * n[j]);
        let row = jac.row_mut(j);
        axpy(cz, uz.row(j), row);
        axpy(cn, through_candidate.row(j), row);
        row[j] += z[j];
    }
    Ok(jac)
}
