use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCache, AdapterGrads, MaskedLoraAdapter, RankLimits};
use crate::error::{Error, Result};
use crate::numerics::{softmax, softmax_topk_masked, Matrix, Rng};

/// Adapted projections per expert (up and down), sharing one active rank.
pub const PROJECTIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_expert: usize,
    /// Width of the synthetic task's inputs and targets.
    pub d_task: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            experts: 8,
            top_k: 2,
            d_model: 32,
            d_expert: 64,
            d_task: 16,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.layers", self.layers),
            ("model.experts", self.experts),
            ("model.top_k", self.top_k),
            ("model.d_model", self.d_model),
            ("model.d_expert", self.d_expert),
            ("model.d_task", self.d_task),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.top_k > self.experts {
            return Err(Error::config(
                "model.top_k",
                format!("top_k {} exceeds expert count {}", self.top_k, self.experts),
            ));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// SiLU activation `u · σ(u)`.
#[inline]
pub fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

#[inline]
fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

/// One expert: frozen up/down projections plus their adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// `d_expert × d_model`
    pub w_up: Matrix,
    /// `d_model × d_expert`
    pub w_down: Matrix,
    pub up: MaskedLoraAdapter,
    pub down: MaskedLoraAdapter,
}

impl Expert {
    /// Shared expert-level active rank.
    pub fn rank(&self) -> usize {
        self.up.rank()
    }

    /// Grows both projections in lockstep.
    pub fn grow(&mut self, n: usize, rng: &mut Rng) -> Result<()> {
        self.up.grow_ranks(n, rng)?;
        self.down.grow_ranks(n, rng)?;
        Ok(())
    }

    /// `(W_down + ΔW_down) · silu((W_up + ΔW_up) · x)` for a batch of rows.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.out)
    }

    fn forward_cached(&self, x: &Matrix) -> Result<ExpertCache> {
        let mut pre = x.matmul_t(&self.w_up)?;
        let (delta_up, up) = self.up.forward_cached(x)?;
        pre.add_assign(&delta_up)?;
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = silu(*v);
        }
        let mut out = act.matmul_t(&self.w_down)?;
        let (delta_down, down) = self.down.forward_cached(&act)?;
        out.add_assign(&delta_down)?;
        Ok(ExpertCache {
            tokens: Vec::new(),
            x: x.clone(),
            up,
            pre,
            act,
            down,
            out,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeBlock {
    /// `experts × d_model`
    pub router: Matrix,
    pub experts: Vec<Expert>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Head,
    Router,
    Adapter,
}

/// Per-token routing weights for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    /// One `tokens × experts` matrix of post-top-k weights per layer; zero for
    /// unselected experts.
    pub layers: Vec<Matrix>,
}

impl RoutingTrace {
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    /// Batch-mean post-top-k weight per (layer, expert).
    pub fn batch_mean(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|z| {
                let n = z.rows() as f64;
                (0..z.cols())
                    .map(|i| (0..z.rows()).map(|t| z.get(t, i)).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ExpertCache {
    tokens: Vec<usize>,
    x: Matrix,
    up: AdapterCache,
    pre: Matrix,
    act: Matrix,
    down: AdapterCache,
    out: Matrix,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    probs: Matrix,
    selected: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    z: Matrix,
    experts: Vec<Option<ExpertCache>>,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    input: Matrix,
    layers: Vec<LayerCache>,
    last_hidden: Matrix,
    output: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGrads {
    pub up: AdapterGrads,
    pub down: AdapterGrads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub router: Matrix,
    pub experts: Vec<ExpertGrads>,
}

/// Per-token `(z, q)` for one expert: routing weight and local gradient
/// intensity (norm of the per-sample adapter gradient divided by `z`).
pub type TokenIntensity = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub input_head: Matrix,
    pub output_head: Matrix,
    pub layers: Vec<LayerGrads>,
    /// Indexed `[layer][expert]`; one entry per routed token.
    pub intensity: Vec<Vec<TokenIntensity>>,
}

impl Gradients {
    /// Gradient tensors in [`MoeNetwork::params`] order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.input_head, &self.output_head];
        for layer in &self.layers {
            out.push(&layer.router);
            for e in &layer.experts {
                out.extend([&e.up.a, &e.up.b, &e.down.a, &e.down.b]);
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.input_head.scale(s);
        self.output_head.scale(s);
        for layer in &mut self.layers {
            layer.router.scale(s);
            for e in &mut layer.experts {
                for m in [&mut e.up.a, &mut e.up.b, &mut e.down.a, &mut e.down.b] {
                    m.scale(s);
                }
            }
        }
    }
}

/// Stack of MoE blocks with residual connections between frozen linear
/// input and output heads.
#[derive(Clone, Debug)]
pub struct MoeNetwork {
    config: MoeConfig,
    /// `d_model × d_task`
    pub input_head: Matrix,
    /// `d_task × d_model`
    pub output_head: Matrix,
    pub blocks: Vec<MoeBlock>,
    retained: Option<ForwardCache>,
}

impl PartialEq for MoeNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_head == other.input_head
            && self.output_head == other.output_head
            && self.blocks == other.blocks
    }
}

/// Routes one layer's tokens: per token, top-k over `router · x` with the
/// weights renormalized over the selected experts.
pub fn route(
    block: &MoeBlock,
    top_k: usize,
    x: &Matrix,
    allowed: Option<&[bool]>,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>, Matrix)> {
    let logits = x.matmul_t(&block.router)?;
    let n = x.rows();
    let mut selected = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut z = Matrix::zeros(n, block.experts.len());
    for t in 0..n {
        let (idx, w) = softmax_topk_masked(logits.row(t), top_k, allowed)?;
        for (&i, &wi) in idx.iter().zip(&w) {
            z.set(t, i, wi);
        }
        selected.push(idx);
        weights.push(w);
    }
    Ok((selected, weights, z))
}

impl MoeNetwork {
    /// Fresh network: Gaussian frozen weights scaled by `1/√fan_in`, and
    /// adapters with `active_rank` leading dimensions enabled.
    pub fn new(config: MoeConfig, limits: RankLimits, active_rank: usize, scaling: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        limits.validate()?;
        let gauss = |rng: &mut Rng, r: usize, c: usize| {
            let std = 1.0 / (c as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.normal(std))
        };
        let input_head = gauss(rng, config.d_model, config.d_task);
        let output_head = gauss(rng, config.d_task, config.d_model);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let router = gauss(rng, config.experts, config.d_model);
            let mut experts = Vec::with_capacity(config.experts);
            for _ in 0..config.experts {
                let w_up = gauss(rng, config.d_expert, config.d_model);
                let w_down = gauss(rng, config.d_model, config.d_expert);
                let up = MaskedLoraAdapter::new(config.d_model, config.d_expert, limits, active_rank, scaling, rng)?;
                let down = MaskedLoraAdapter::new(config.d_expert, config.d_model, limits, active_rank, scaling, rng)?;
                experts.push(Expert { w_up, w_down, up, down });
            }
            blocks.push(MoeBlock { router, experts });
        }
        Ok(Self {
            config,
            input_head,
            output_head,
            blocks,
            retained: None,
        })
    }

    /// Assembles a network from stored parts (checkpoint restore).
    pub fn from_parts(config: MoeConfig, input_head: Matrix, output_head: Matrix, blocks: Vec<MoeBlock>) -> Result<Self> {
        config.validate()?;
        let ok = input_head.shape() == (config.d_model, config.d_task)
            && output_head.shape() == (config.d_task, config.d_model)
            && blocks.len() == config.layers
            && blocks.iter().all(|b| {
                b.router.shape() == (config.experts, config.d_model)
                    && b.experts.len() == config.experts
                    && b.experts.iter().all(|e| {
                        e.w_up.shape() == (config.d_expert, config.d_model)
                            && e.w_down.shape() == (config.d_model, config.d_expert)
                            && e.up.d_in() == config.d_model
                            && e.up.d_out() == config.d_expert
                            && e.down.d_in() == config.d_expert
                            && e.down.d_out() == config.d_model
                            && e.up.mask() == e.down.mask()
                    })
            });
        if !ok {
            return Err(Error::shape("stored network tensors do not match the model config"));
        }
        Ok(Self {
            config,
            input_head,
            output_head,
            blocks,
            retained: None,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    /// Active rank per (layer, expert).
    pub fn ranks(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| b.experts.iter().map(Expert::rank).collect())
            .collect()
    }

    pub fn expert(&self, layer: usize, expert: usize) -> &Expert {
        &self.blocks[layer].experts[expert]
    }

    pub fn expert_mut(&mut self, layer: usize, expert: usize) -> &mut Expert {
        &mut self.blocks[layer].experts[expert]
    }

    /// Trainable tensors in a fixed order: heads, then per layer the router
    /// followed by each expert's `up.A, up.B, down.A, down.B`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.input_head, &self.output_head];
        for b in &self.blocks {
            out.push(&b.router);
            for e in &b.experts {
                out.extend([e.up.a(), e.up.b(), e.down.a(), e.down.b()]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.input_head, &mut self.output_head];
        for b in &mut self.blocks {
            out.push(&mut b.router);
            for e in &mut b.experts {
                let Expert { up, down, .. } = e;
                let (ua, ub) = up.factors_mut();
                let (da, db) = down.factors_mut();
                out.extend([ua, ub, da, db]);
            }
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = vec![ParamKind::Head, ParamKind::Head];
        for b in &self.blocks {
            out.push(ParamKind::Router);
            out.extend(std::iter::repeat_n(ParamKind::Adapter, 4 * b.experts.len()));
        }
        out
    }

    fn forward_impl(&self, x: &Matrix, routing_mask: Option<&[Vec<bool>]>) -> Result<ForwardCache> {
        let cfg = &self.config;
        if x.cols() != cfg.d_task {
            return Err(Error::shape(format!(
                "network expects {} input features, got {}",
                cfg.d_task,
                x.cols()
            )));
        }
        if let Some(mask) = routing_mask {
            if mask.len() != cfg.layers || mask.iter().any(|m| m.len() != cfg.experts) {
                return Err(Error::shape("routing mask must be layers × experts"));
            }
        }
        let mut h = x.matmul_t(&self.input_head)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let allowed = routing_mask.map(|m| m[l].as_slice());
            let (selected, weights, z) = route(block, cfg.top_k, &h, allowed)?;
            let logits = h.matmul_t(&block.router)?;
            let mut probs = Matrix::zeros(h.rows(), cfg.experts);
            for t in 0..h.rows() {
                probs.row_mut(t).copy_from_slice(&softmax(logits.row(t)));
            }
            let mut out = h.clone();
            let mut routed = vec![Vec::new(); cfg.experts];
            for (t, sel) in selected.iter().enumerate() {
                for &i in sel {
                    routed[i].push(t);
                }
            }
            let mut experts = Vec::with_capacity(cfg.experts);
            for (i, (expert, tokens)) in block.experts.iter().zip(routed).enumerate() {
                if tokens.is_empty() {
                    experts.push(None);
                    continue;
                }
                let xi = h.gather_rows(&tokens);
                let mut cache = expert.forward_cached(&xi)?;
                for (r, &t) in tokens.iter().enumerate() {
                    let w = z.get(t, i);
                    let yr = cache.out.row(r);
                    for (o, &y) in out.row_mut(t).iter_mut().zip(yr) {
                        *o += w * y;
                    }
                }
                cache.tokens = tokens;
                experts.push(Some(cache));
            }
            out.check_finite()?;
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                probs,
                selected,
                weights,
                z,
                experts,
            });
        }
        let output = h.matmul_t(&self.output_head)?;
        Ok(ForwardCache {
            input: x.clone(),
            layers,
            last_hidden: h,
            output,
        })
    }

    /// Inference pass. `routing_mask[l][i] == false` removes expert `i` of
    /// layer `l` from routing candidacy.
    pub fn forward(&self, x: &Matrix, routing_mask: Option<&[Vec<bool>]>) -> Result<(Matrix, RoutingTrace)> {
        let cache = self.forward_impl(x, routing_mask)?;
        let trace = RoutingTrace {
            layers: cache.layers.iter().map(|l| l.z.clone()).collect(),
        };
        Ok((cache.output, trace))
    }

    /// Forward pass that retains intermediates for [`MoeNetwork::backward`].
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, RoutingTrace)> {
        let cache = self.forward_impl(x, None)?;
        let out = cache.output.clone();
        let trace = RoutingTrace {
            layers: cache.layers.iter().map(|l| l.z.clone()).collect(),
        };
        self.retained = Some(cache);
        Ok((out, trace))
    }

    /// Load-balancing auxiliary loss `coef · N · Σ_i frac_i · P_i` of the
    /// retained forward pass, summed over layers.
    pub fn aux_loss(&self, coef: f64) -> Result<f64> {
        let cache = self
            .retained
            .as_ref()
            .ok_or_else(|| Error::State("aux_loss needs a retained forward pass".into()))?;
        if coef == 0.0 {
            return Ok(0.0);
        }
        let n_exp = self.config.experts as f64;
        let mut total = 0.0;
        for layer in &cache.layers {
            let (frac, mean_p) = balance_terms(layer, self.config.top_k);
            total += coef * n_exp * frac.iter().zip(&mean_p).map(|(f, p)| f * p).sum::<f64>();
        }
        Ok(total)
    }

    /// Backward pass for the retained forward pass given `∂L/∂output`.
    ///
    /// Consumes the retained intermediates; a second call without a new
    /// forward pass is a state error. `aux_coef > 0` adds the gradient of
    /// [`MoeNetwork::aux_loss`] to the router logits.
    pub fn backward(&mut self, d_output: &Matrix, aux_coef: f64) -> Result<Gradients> {
        let cache = self
            .retained
            .take()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if d_output.shape() != cache.output.shape() {
            return Err(Error::shape("output gradient shape differs from forward output"));
        }
        let cfg = self.config;
        let n = cache.input.rows();
        let n_f = n as f64;

        let output_head = d_output.t_matmul(&cache.last_hidden)?;
        let mut dh = d_output.matmul(&self.output_head)?;

        let mut layer_grads = Vec::with_capacity(cfg.layers);
        let mut intensity = Vec::with_capacity(cfg.layers);
        for (l, layer) in cache.layers.iter().enumerate().rev() {
            let block = &self.blocks[l];
            let mut d_in = dh.clone();
            // ∂L/∂z[t][i] for the selected experts.
            let mut dz = Matrix::zeros(n, cfg.experts);
            let mut experts = Vec::with_capacity(cfg.experts);
            let mut layer_intensity = Vec::with_capacity(cfg.experts);
            for (i, expert) in block.experts.iter().enumerate() {
                let Some(ec) = &layer.experts[i] else {
                    experts.push(ExpertGrads {
                        up: zero_grads(&expert.up),
                        down: zero_grads(&expert.down),
                    });
                    layer_intensity.push(Vec::new());
                    continue;
                };
                let m = ec.tokens.len();
                let mut d_y = Matrix::zeros(m, cfg.d_model);
                for (r, &t) in ec.tokens.iter().enumerate() {
                    let g = dh.row(t);
                    dz.set(t, i, crate::numerics::matrix_dot(g, ec.out.row(r)));
                    let w = layer.z.get(t, i);
                    for (d, &gv) in d_y.row_mut(r).iter_mut().zip(g) {
                        *d = w * gv;
                    }
                }
                let mut d_act = d_y.matmul(&expert.w_down)?;
                let (d_act_ad, down, dproj_down) = expert.down.backward(&ec.act, &ec.down, &d_y)?;
                d_act.add_assign(&d_act_ad)?;
                let mut d_pre = d_act;
                for (d, &u) in d_pre.data_mut().iter_mut().zip(ec.pre.data()) {
                    *d *= silu_grad(u);
                }
                let mut d_x = d_pre.matmul(&expert.w_up)?;
                let (d_x_ad, up, dproj_up) = expert.up.backward(&ec.x, &ec.up, &d_pre)?;
                d_x.add_assign(&d_x_ad)?;
                for (r, &t) in ec.tokens.iter().enumerate() {
                    for (d, &v) in d_in.row_mut(t).iter_mut().zip(d_x.row(r)) {
                        *d += v;
                    }
                }

                let s_up = expert.up.scaling();
                let s_down = expert.down.scaling();
                let mut tokens = Vec::with_capacity(m);
                for (r, &t) in ec.tokens.iter().enumerate() {
                    let z = layer.z.get(t, i);
                    let q2 = s_down.powi(2) * sq(d_y.row(r)) * sq(ec.down.projected.row(r))
                        + sq(dproj_down.row(r)) * sq(ec.act.row(r))
                        + s_up.powi(2) * sq(d_pre.row(r)) * sq(ec.up.projected.row(r))
                        + sq(dproj_up.row(r)) * sq(ec.x.row(r));
                    // Per-sample gradient is n × the batch-mean contribution;
                    // dividing by z leaves the local signal.
                    let q = if z > 0.0 { q2.sqrt() * n_f / z } else { 0.0 };
                    tokens.push((z, q));
                }
                layer_intensity.push(tokens);
                experts.push(ExpertGrads { up, down });
            }

            let mut d_logits = Matrix::zeros(n, cfg.experts);
            for t in 0..n {
                let sel = &layer.selected[t];
                let w = &layer.weights[t];
                let mean: f64 = sel.iter().zip(w).map(|(&i, &wi)| wi * dz.get(t, i)).sum();
                for (&i, &wi) in sel.iter().zip(w) {
                    d_logits.set(t, i, wi * (dz.get(t, i) - mean));
                }
            }
            if aux_coef != 0.0 {
                let (frac, _) = balance_terms(layer, cfg.top_k);
                let scale = aux_coef * cfg.experts as f64 / n_f;
                for t in 0..n {
                    let p = layer.probs.row(t);
                    let inner: f64 = p.iter().zip(&frac).map(|(pi, fi)| pi * scale * fi).sum();
                    for i in 0..cfg.experts {
                        let v = d_logits.get(t, i) + p[i] * (scale * frac[i] - inner);
                        d_logits.set(t, i, v);
                    }
                }
            }
            let router = d_logits.t_matmul(&layer.input)?;
            d_in.add_assign(&d_logits.matmul(&block.router)?)?;
            dh = d_in;
            layer_grads.push(LayerGrads { router, experts });
            intensity.push(layer_intensity);
        }
        layer_grads.reverse();
        intensity.reverse();
        let input_head = dh.t_matmul(&cache.input)?;
        Ok(Gradients {
            input_head,
            output_head,
            layers: layer_grads,
            intensity,
        })
    }
}

fn zero_grads(ad: &MaskedLoraAdapter) -> AdapterGrads {
    AdapterGrads {
        a: Matrix::zeros(ad.a().rows(), ad.a().cols()),
        b: Matrix::zeros(ad.b().rows(), ad.b().cols()),
    }
}

#[inline]
fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per-expert selected-token fraction (normalized by `n·k`) and mean full
/// softmax probability.
fn balance_terms(layer: &LayerCache, top_k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = layer.selected.len();
    let n_exp = layer.probs.cols();
    let mut frac = vec![0.0; n_exp];
    for sel in &layer.selected {
        for &i in sel {
            frac[i] += 1.0;
        }
    }
    let denom = (n * top_k) as f64;
    for f in &mut frac {
        *f /= denom;
    }
    let mean_p = (0..n_exp)
        .map(|i| (0..n).map(|t| layer.probs.get(t, i)).sum::<f64>() / n as f64)
        .collect();
    (frac, mean_p)
}

/// Mean over samples of the per-sample mean squared error, and its gradient
/// with respect to `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("prediction and target shapes differ"));
    }
    let n = pred.rows() as f64;
    let d = pred.cols() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for t in 0..pred.rows() {
        let mut row = 0.0;
        for (c, (p, y)) in pred.row(t).iter().zip(target.row(t)).enumerate() {
            let e = p - y;
            row += e * e;
            grad.set(t, c, 2.0 * e / (n * d));
        }
        total += row / d;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::DEFAULT_SCALING;
    use crate::numerics::{finite_diff_check, softmax_topk};

    fn limits(r_init: usize, r_max: usize) -> RankLimits {
        RankLimits {
            r_init,
            r_target: r_init,
            r_max,
        }
    }

    fn small(layers: usize, experts: usize, top_k: usize, seed: u64) -> MoeNetwork {
        let cfg = MoeConfig {
            layers,
            experts,
            top_k,
            d_model: 6,
            d_expert: 10,
            d_task: 4,
        };
        MoeNetwork::new(cfg, limits(2, 4), 3, DEFAULT_SCALING, &mut Rng::new(seed)).unwrap()
    }

    /// Fills every active adapter entry with O(0.3) Gaussian noise.
    fn randomize_adapters(net: &mut MoeNetwork, seed: u64) {
        let mut rng = Rng::new(seed);
        for b in &mut net.blocks {
            for e in &mut b.experts {
                for ad in [&mut e.up, &mut e.down] {
                    let dims = ad.active_dims();
                    let (a, bm) = ad.factors_mut();
                    for &j in &dims {
                        for v in a.row_mut(j) {
                            *v = rng.normal(0.3);
                        }
                        for o in 0..bm.rows() {
                            bm.set(o, j, rng.normal(0.3));
                        }
                    }
                }
            }
        }
    }

    fn inputs(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, d, |_, _| rng.normal(1.0))
    }

    fn base_expert(e: &Expert, x: &Matrix) -> Matrix {
        let mut act = x.matmul_t(&e.w_up).unwrap();
        for v in act.data_mut() {
            *v = silu(*v);
        }
        act.matmul_t(&e.w_down).unwrap()
    }

    #[test]
    fn two_of_two_experts_always_selected() {
        let net = small(1, 2, 2, 1);
        let x = inputs(2, 9, 6);
        let (sel, w, z) = route(&net.blocks[0], 2, &x, None).unwrap();
        for t in 0..9 {
            let mut s = sel[t].clone();
            s.sort_unstable();
            assert_eq!(s, vec![0, 1]);
            assert!((w[t].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!((z.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_router_rows_give_uniform_lowest_index_routing() {
        let mut net = small(1, 5, 2, 3);
        let row = net.blocks[0].router.row(0).to_vec();
        for i in 1..5 {
            net.blocks[0].router.row_mut(i).copy_from_slice(&row);
        }
        let (sel, w, _) = route(&net.blocks[0], 2, &inputs(4, 6, 6), None).unwrap();
        for t in 0..6 {
            assert_eq!(sel[t], vec![0, 1]);
            assert_eq!(w[t], vec![0.5, 0.5]);
        }
    }

    #[test]
    fn routing_matches_softmax_topk_oracle() {
        let cfg = MoeConfig {
            layers: 1,
            experts: 8,
            top_k: 2,
            d_model: 6,
            d_expert: 4,
            d_task: 3,
        };
        let net = MoeNetwork::new(cfg, limits(1, 2), 1, 2.0, &mut Rng::new(5)).unwrap();
        let x = inputs(6, 16, 6);
        let (_, _, z) = route(&net.blocks[0], 2, &x, None).unwrap();
        for t in 0..16 {
            let logits: Vec<f64> = (0..8)
                .map(|i| (0..6).map(|c| net.blocks[0].router.get(i, c) * x.get(t, c)).sum())
                .collect();
            let (idx, w) = softmax_topk(&logits, 2).unwrap();
            let mut expect = vec![0.0; 8];
            for (i, wi) in idx.into_iter().zip(w) {
                expect[i] = wi;
            }
            for i in 0..8 {
                assert!((z.get(t, i) - expect[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fresh_expert_equals_base_expert() {
        let net = small(1, 2, 1, 7);
        let e = net.expert(0, 1);
        let x = inputs(8, 5, 6);
        assert_eq!(e.forward(&x).unwrap(), base_expert(e, &x));
        assert_eq!(e.forward(&Matrix::zeros(3, 6)).unwrap(), Matrix::zeros(3, 6));
    }

    #[test]
    fn expert_matches_dense_rematerialized_weights() {
        let mut net = small(1, 1, 1, 9);
        randomize_adapters(&mut net, 10);
        let e = net.expert(0, 0);
        let mut w_up = e.w_up.clone();
        w_up.add_assign(&e.up.effective_delta()).unwrap();
        let mut w_down = e.w_down.clone();
        w_down.add_assign(&e.down.effective_delta()).unwrap();
        let x = inputs(11, 7, 6);
        let mut act = x.matmul_t(&w_up).unwrap();
        for v in act.data_mut() {
            *v = silu(*v);
        }
        let dense = act.matmul_t(&w_down).unwrap();
        assert!(e.forward(&x).unwrap().max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn single_expert_network_reduces_to_expert() {
        let mut net = small(1, 1, 1, 12);
        randomize_adapters(&mut net, 13);
        let x = inputs(14, 5, 4);
        let (out, trace) = net.forward(&x, None).unwrap();
        let h0 = x.matmul_t(&net.input_head).unwrap();
        let mut h1 = h0.clone();
        h1.add_assign(&net.expert(0, 0).forward(&h0).unwrap()).unwrap();
        let expect = h1.matmul_t(&net.output_head).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-12);
        assert!(trace.layers[0].data().iter().all(|&z| z == 1.0));
    }

    #[test]
    fn zero_adapters_equal_frozen_base_network() {
        let net = small(3, 4, 2, 15);
        let x = inputs(16, 8, 4);
        let (out, _) = net.forward(&x, None).unwrap();
        let mut h = x.matmul_t(&net.input_head).unwrap();
        for b in &net.blocks {
            let (sel, w, _) = route(b, 2, &h, None).unwrap();
            let mut next = h.clone();
            for t in 0..h.rows() {
                let row = h.gather_rows(&[t]);
                for (&i, &wi) in sel[t].iter().zip(&w[t]) {
                    let y = base_expert(&b.experts[i], &row);
                    for (o, v) in next.row_mut(t).iter_mut().zip(y.row(0)) {
                        *o += wi * v;
                    }
                }
            }
            h = next;
        }
        let expect = h.matmul_t(&net.output_head).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn trace_weights_sum_to_one_per_token_and_layer() {
        let mut net = small(2, 4, 2, 17);
        randomize_adapters(&mut net, 18);
        let (_, trace) = net.forward(&inputs(19, 32, 4), None).unwrap();
        assert_eq!(trace.layers.len(), 2);
        for z in &trace.layers {
            for t in 0..z.rows() {
                assert!((z.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(z.row(t).iter().filter(|&&v| v != 0.0).count() <= 2);
            }
        }
        for layer in trace.batch_mean() {
            assert!((layer.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    fn flat(mats: &[&Matrix]) -> Vec<f64> {
        mats.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    fn set_flat(net: &mut MoeNetwork, values: &[f64]) {
        let mut off = 0;
        for m in net.params_mut() {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&values[off..off + len]);
            off += len;
        }
    }

    fn full_loss(net: &MoeNetwork, x: &Matrix, y: &Matrix, aux: f64) -> f64 {
        let mut probe = net.clone();
        let (out, _) = probe.forward_train(x).unwrap();
        mse_loss(&out, y).unwrap().0 + probe.aux_loss(aux).unwrap()
    }

    fn check_gradients(aux: f64) {
        let mut net = small(2, 4, 2, 20);
        randomize_adapters(&mut net, 21);
        let x = inputs(22, 12, 4);
        let y = inputs(23, 12, 4);
        let (out, _) = net.forward_train(&x).unwrap();
        let (_, d_out) = mse_loss(&out, &y).unwrap();
        let grads = net.backward(&d_out, aux).unwrap();
        let params = flat(&net.params());
        let analytic = flat(&grads.tensors());
        let err = finite_diff_check(
            |p| {
                let mut probe = net.clone();
                set_flat(&mut probe, p);
                full_loss(&probe, &x, &y, aux)
            },
            &params,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        assert!(analytic.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        check_gradients(0.0);
    }

    #[test]
    fn backward_with_balance_loss_matches_central_differences() {
        check_gradients(0.05);
    }

    #[test]
    fn inactive_dims_and_unrouted_experts_get_zero_gradient() {
        let mut net = small(1, 4, 1, 24);
        randomize_adapters(&mut net, 25);
        // A copy of router row 0 always loses the tie to expert 0 under top-1.
        let row = net.blocks[0].router.row(0).to_vec();
        net.blocks[0].router.row_mut(3).copy_from_slice(&row);
        let x = inputs(26, 10, 4);
        let (out, trace) = net.forward_train(&x).unwrap();
        assert!((0..10).all(|t| trace.layers[0].get(t, 3) == 0.0));
        let grads = net.backward(&out, 0.0).unwrap();
        let g3 = &grads.layers[0].experts[3];
        for m in [&g3.up.a, &g3.up.b, &g3.down.a, &g3.down.b] {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
        for (e, g) in net.blocks[0].experts.iter().zip(&grads.layers[0].experts) {
            for (ad, ag) in [(&e.up, &g.up), (&e.down, &g.down)] {
                for j in 0..4 {
                    if !ad.mask()[j] {
                        assert!(ag.a.row(j).iter().all(|&v| v == 0.0));
                        assert!((0..ag.b.rows()).all(|o| ag.b.get(o, j) == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn doubling_the_loss_doubles_every_gradient() {
        let mut net = small(2, 4, 2, 27);
        randomize_adapters(&mut net, 28);
        let x = inputs(29, 9, 4);
        let y = inputs(30, 9, 4);
        let (out, _) = net.forward_train(&x).unwrap();
        let (_, d_out) = mse_loss(&out, &y).unwrap();
        let g1 = net.backward(&d_out, 0.0).unwrap();
        net.forward_train(&x).unwrap();
        let g2 = net.backward(&d_out.scaled(2.0), 0.0).unwrap();
        let mut doubled = g1.clone();
        doubled.scale(2.0);
        assert_eq!(flat(&doubled.tensors()), flat(&g2.tensors()));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut net = small(1, 2, 1, 31);
        assert!(matches!(net.backward(&Matrix::zeros(1, 4), 0.0), Err(Error::State(_))));
        let (out, _) = net.forward_train(&inputs(32, 1, 4)).unwrap();
        net.backward(&out, 0.0).unwrap();
        assert!(matches!(net.backward(&out, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn intensity_matches_per_sample_gradient_norm() {
        // q for a token = ‖∂ℓ_t/∂θ_expert‖ / z_t, with ℓ_t the per-sample loss.
        let mut net = small(1, 3, 2, 33);
        randomize_adapters(&mut net, 34);
        let x = inputs(35, 5, 4);
        let y = inputs(36, 5, 4);
        let (out, trace) = net.forward_train(&x).unwrap();
        let (_, d_out) = mse_loss(&out, &y).unwrap();
        let grads = net.backward(&d_out, 0.0).unwrap();
        let expert = 0;
        let mut k = 0;
        for t in 0..5 {
            let z = trace.layers[0].get(t, expert);
            if z == 0.0 {
                continue;
            }
            let xt = x.gather_rows(&[t]);
            let yt = y.gather_rows(&[t]);
            let mut single = net.clone();
            let (o, _) = single.forward_train(&xt).unwrap();
            let (_, d) = mse_loss(&o, &yt).unwrap();
            let g = single.backward(&d, 0.0).unwrap();
            let e = &g.layers[0].experts[expert];
            let norm = [&e.up.a, &e.up.b, &e.down.a, &e.down.b]
                .iter()
                .map(|m| m.frobenius_norm().powi(2))
                .sum::<f64>()
                .sqrt();
            let (zr, q) = grads.intensity[0][expert][k];
            assert_eq!(zr, z);
            assert!((q - norm / z).abs() <= 1e-10 * (1.0 + q), "{q} vs {}", norm / z);
            k += 1;
        }
        assert_eq!(k, grads.intensity[0][expert].len());
    }
}
