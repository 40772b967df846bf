//! Pre-LN decoder-only transformer with per-branch KV caches.
//!
//! Architecture: learned token and absolute position embeddings, `n_layers`
//! blocks of `h += Attn(LN(h)); h += MLP(LN(h))` with a tanh-GELU MLP, a final
//! LayerNorm and an untied unembedding onto the image vocabulary. Projections
//! are applied as `x · W` with `W` stored `[d_in x d_out]`.
//!
//! The value-scaling hook behind SoftCFG lives here: [`forward_step_scaled`]
//! multiplies every cached value vector at a generated position by a scalar
//! for one step without touching what is stored.

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Number of image tokens; the unembedding predicts only these.
    pub vocab_size: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl ModelConfig {
    /// 2 layers, 2 heads, `d_model = 32`, 16 image tokens, 4 classes, 8x8 grid.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            vocab_size: 16,
            n_classes: 4,
            max_seq_len: 65,
            grid_rows: 8,
            grid_cols: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_classes", self.n_classes),
            ("max_seq_len", self.max_seq_len),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.grid_rows * self.grid_cols + 1 != self.max_seq_len {
            return Err(Error::config(format!(
                "grid {}x{} needs max_seq_len {}, got {}",
                self.grid_rows,
                self.grid_cols,
                self.grid_rows * self.grid_cols + 1,
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Image tokens, class tokens and the null token.
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + self.n_classes + 1
    }

    /// Number of image tokens generated per sample.
    pub fn grid_len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            vocab_size: self.vocab_size,
            n_classes: self.n_classes,
        }
    }
}

/// Token id layout: image tokens `[0, V)`, class tokens `[V, V + C)`, null token `V + C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub n_classes: usize,
}

impl VocabLayout {
    pub fn class_token(&self, class_id: usize) -> Result<u32> {
        if class_id >= self.n_classes {
            return Err(Error::input(format!(
                "class {class_id} out of range (n_classes = {})",
                self.n_classes
            )));
        }
        Ok((self.vocab_size + class_id) as u32)
    }

    pub fn null_token(&self) -> u32 {
        (self.vocab_size + self.n_classes) as u32
    }

    pub fn is_image_token(&self, id: u32) -> bool {
        (id as usize) < self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[total_vocab x d_model]`
    pub token_embedding: Matrix,
    /// `[max_seq_len x d_model]`
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Vec<f32>,
    pub final_bias: Vec<f32>,
    /// `[d_model x vocab_size]`
    pub unembedding: Matrix,
}

/// Name and shape of one stored tensor. Vectors have a one-element shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every tensor of a model with `config`, in canonical (checkpoint) order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d_model;
    let mut specs = vec![
        TensorSpec::new("token_embedding", &[config.total_vocab(), d]),
        TensorSpec::new("position_embedding", &[config.max_seq_len, d]),
    ];
    for i in 0..config.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        specs.extend([
            TensorSpec::new(p("ln1.gain"), &[d]),
            TensorSpec::new(p("ln1.bias"), &[d]),
            TensorSpec::new(p("attn.wq"), &[d, d]),
            TensorSpec::new(p("attn.wk"), &[d, d]),
            TensorSpec::new(p("attn.wv"), &[d, d]),
            TensorSpec::new(p("attn.wo"), &[d, d]),
            TensorSpec::new(p("ln2.gain"), &[d]),
            TensorSpec::new(p("ln2.bias"), &[d]),
            TensorSpec::new(p("mlp.w1"), &[d, config.d_ff]),
            TensorSpec::new(p("mlp.b1"), &[config.d_ff]),
            TensorSpec::new(p("mlp.w2"), &[config.d_ff, d]),
            TensorSpec::new(p("mlp.b2"), &[d]),
        ]);
    }
    specs.extend([
        TensorSpec::new("final_norm.gain", &[d]),
        TensorSpec::new("final_norm.bias", &[d]),
        TensorSpec::new("unembedding", &[d, config.vocab_size]),
    ]);
    specs
}

impl ModelParams {
    /// Builds params from tensors listed in [`tensor_specs`] order, then validates.
    pub fn from_canonical(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if tensors.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.numel() != t.len() {
                return Err(Error::validation(
                    &spec.name,
                    format!(
                        "{} values, expected {} for shape {:?}",
                        t.len(),
                        spec.numel(),
                        spec.shape
                    ),
                ));
            }
        }
        let mut it = specs.into_iter().zip(tensors);
        let mut mat = || -> Result<Matrix> {
            let (spec, data) = it.next().expect("length checked");
            if spec.shape.len() == 2 {
                Matrix::new(spec.shape[0], spec.shape[1], data)
                    .map_err(|e| Error::validation(&spec.name, e.to_string()))
            } else {
                Matrix::new(1, data.len(), data).map_err(|e| Error::validation(&spec.name, e.to_string()))
            }
        };
        let vec1 = |m: Result<Matrix>| m.map(Matrix::into_data);
        let token_embedding = mat()?;
        let position_embedding = mat()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gain: vec1(mat())?,
                ln1_bias: vec1(mat())?,
                wq: mat()?,
                wk: mat()?,
                wv: mat()?,
                wo: mat()?,
                ln2_gain: vec1(mat())?,
                ln2_bias: vec1(mat())?,
                w1: mat()?,
                b1: vec1(mat())?,
                w2: mat()?,
                b2: vec1(mat())?,
            });
        }
        let final_gain = vec1(mat())?;
        let final_bias = vec1(mat())?;
        let unembedding = mat()?;
        let params = Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            unembedding,
        };
        params.validate()?;
        Ok(params)
    }

    /// Tensors in canonical order, paired with their actual shapes.
    pub fn tensors(&self) -> Vec<(TensorSpec, &[f32])> {
        fn mat(name: String, m: &Matrix) -> (TensorSpec, &[f32]) {
            (TensorSpec::new(name, &[m.rows(), m.cols()]), m.data())
        }
        fn vec1(name: String, v: &[f32]) -> (TensorSpec, &[f32]) {
            (TensorSpec::new(name, &[v.len()]), v)
        }
        let mut out = vec![
            mat("token_embedding".into(), &self.token_embedding),
            mat("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                vec1(p("ln1.gain"), &l.ln1_gain),
                vec1(p("ln1.bias"), &l.ln1_bias),
                mat(p("attn.wq"), &l.wq),
                mat(p("attn.wk"), &l.wk),
                mat(p("attn.wv"), &l.wv),
                mat(p("attn.wo"), &l.wo),
                vec1(p("ln2.gain"), &l.ln2_gain),
                vec1(p("ln2.bias"), &l.ln2_bias),
                mat(p("mlp.w1"), &l.w1),
                vec1(p("mlp.b1"), &l.b1),
                mat(p("mlp.w2"), &l.w2),
                vec1(p("mlp.b2"), &l.b2),
            ]);
        }
        out.extend([
            vec1("final_norm.gain".into(), &self.final_gain),
            vec1("final_norm.bias".into(), &self.final_bias),
            mat("unembedding".into(), &self.unembedding),
        ]);
        out
    }

    /// Checks every tensor shape against `config` and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::validation(
                "layers",
                format!("expected {} layers, found {}", self.config.n_layers, self.layers.len()),
            ));
        }
        for (expected, (actual, data)) in tensor_specs(&self.config).iter().zip(self.tensors()) {
            if expected.shape != actual.shape {
                return Err(Error::validation(
                    &expected.name,
                    format!("shape {:?}, expected {:?}", actual.shape, expected.shape),
                ));
            }
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(
                    &expected.name,
                    format!("non-finite value at index {i}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    /// `len x d_model`, heads contiguous within a position.
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Key/value history of one guidance branch.
///
/// Position 0 is the condition slot (a class token on the conditional branch,
/// the null token on the unconditional one).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCache {
    d_model: usize,
    max_seq_len: usize,
    layers: Vec<LayerCache>,
    token_ids: Vec<u32>,
    confidences: Vec<f64>,
    value_norms: Vec<f64>,
}

impl BranchCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            max_seq_len: config.max_seq_len,
            layers: vec![LayerCache::default(); config.n_layers],
            token_ids: Vec::new(),
            confidences: Vec::new(),
            value_norms: Vec::new(),
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Recorded `p_max` for generated positions `1..`, possibly one ahead of the cached tokens.
    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Per-layer cached lengths, for checking they agree.
    pub fn layer_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.values.len() / self.d_model).collect()
    }

    pub fn key(&self, layer: usize, pos: usize) -> &[f32] {
        &self.layers[layer].keys[pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[f32] {
        &self.layers[layer].values[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// All stored values of one layer, `len x d_model` row-major.
    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys
    }

    /// L2 norm of the concatenated per-layer, per-head value vectors at `pos`.
    pub fn value_norm(&self, pos: usize) -> f64 {
        self.value_norms[pos]
    }

    /// Value norms of the generated positions `1..len`.
    pub fn generated_value_norms(&self) -> &[f64] {
        self.value_norms.get(1..).unwrap_or(&[])
    }

    fn push_kv(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        self.layers[layer].keys.extend_from_slice(k);
        self.layers[layer].values.extend_from_slice(v);
    }
}

/// Appends a confidence for the most recently sampled token.
pub fn record_confidence(cache: &mut BranchCache, p_max: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p_max) {
        return Err(Error::input(format!("p_max {p_max} outside [0, 1]")));
    }
    if cache.is_empty() || cache.confidences.len() >= cache.token_ids.len() {
        return Err(Error::input(
            "confidence already recorded for every position awaiting its forward step",
        ));
    }
    cache.confidences.push(p_max);
    Ok(())
}

/// Both branches seeded with their condition slot, plus the logits that slot predicts.
#[derive(Debug, Clone)]
pub struct SeededBranches {
    pub cond: BranchCache,
    pub uncond: BranchCache,
    /// Logits for the first image token from each branch.
    pub cond_logits: Vec<f32>,
    pub uncond_logits: Vec<f32>,
}

pub fn init_caches(params: &ModelParams, class_id: usize) -> Result<SeededBranches> {
    let layout = params.config.layout();
    let class_token = layout.class_token(class_id)?;
    let mut cond = BranchCache::new(&params.config);
    let mut uncond = BranchCache::new(&params.config);
    let cond_logits = forward_step(&mut cond, class_token, params)?;
    let uncond_logits = forward_step(&mut uncond, layout.null_token(), params)?;
    Ok(SeededBranches {
        cond,
        uncond,
        cond_logits,
        uncond_logits,
    })
}

/// Appends `token_id` at the next position and returns next-token logits over image tokens.
pub fn forward_step(cache: &mut BranchCache, token_id: u32, params: &ModelParams) -> Result<Vec<f32>> {
    Ok(forward(cache, token_id, params, None)?.plain)
}

/// Like [`forward_step`], but for this step every value vector at generated
/// position `i + 1` is multiplied by `scale[i]` in every layer and head.
///
/// `scale.len()` must equal `cache.len()` before the call. The last entry
/// applies to the incoming token; the condition slot is never scaled. The
/// stored cache afterwards is bitwise what [`forward_step`] would leave.
pub fn forward_step_scaled(
    cache: &mut BranchCache,
    token_id: u32,
    params: &ModelParams,
    scale: &[f32],
) -> Result<Vec<f32>> {
    Ok(forward(cache, token_id, params, Some(scale))?
        .scaled
        .expect("scaled stream requested"))
}

/// Logits of one step with and without value scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLogits {
    pub plain: Vec<f32>,
    pub scaled: Vec<f32>,
}

/// Runs the unscaled and scaled streams of one step together, sharing the
/// first layer's projections. The unscaled stream feeds the stored cache.
pub fn forward_step_dual(
    cache: &mut BranchCache,
    token_id: u32,
    params: &ModelParams,
    scale: &[f32],
) -> Result<DualLogits> {
    let out = forward(cache, token_id, params, Some(scale))?;
    Ok(DualLogits {
        plain: out.plain,
        scaled: out.scaled.expect("scaled stream requested"),
    })
}

struct StepOutput {
    plain: Vec<f32>,
    scaled: Option<Vec<f32>>,
}

fn forward(cache: &mut BranchCache, token_id: u32, params: &ModelParams, scale: Option<&[f32]>) -> Result<StepOutput> {
    let cfg = &params.config;
    let pos = cache.len();
    if pos >= cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence overflow: cache already holds max_seq_len = {} positions",
            cfg.max_seq_len
        )));
    }
    if token_id as usize >= cfg.total_vocab() {
        return Err(Error::input(format!(
            "token {token_id} outside vocabulary of {}",
            cfg.total_vocab()
        )));
    }
    if cache.layers.len() != cfg.n_layers || cache.d_model != cfg.d_model {
        return Err(Error::config("cache was built for a different model"));
    }
    // Per-position factors including the condition slot, which stays at 1.
    let factors: Option<Vec<f64>> = match scale {
        None => None,
        Some(s) => {
            if s.len() != pos {
                return Err(Error::input(format!(
                    "scale has {} entries, cache holds {pos} positions",
                    s.len()
                )));
            }
            if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::input(format!("scale entry {bad} outside [0, 1]")));
            }
            let mut f = Vec::with_capacity(pos + 1);
            f.push(1.0);
            f.extend(s.iter().map(|&v| v as f64));
            Some(f)
        }
    };

    let d = cfg.d_model;
    let mut h: Vec<f32> = params
        .token_embedding
        .row(token_id as usize)
        .iter()
        .zip(params.position_embedding.row(pos))
        .map(|(a, b)| a + b)
        .collect();
    let mut h_scaled = factors.as_ref().map(|_| h.clone());
    let mut new_values = Vec::with_capacity(cfg.n_layers * d);

    for (l, layer) in params.layers.iter().enumerate() {
        let a = tensor::layer_norm_unchecked(&h, &layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS);
        let q = tensor::vecmat(&a, &layer.wq);
        let k = tensor::vecmat(&a, &layer.wk);
        let v = tensor::vecmat(&a, &layer.wv);
        cache.push_kv(l, &k, &v);
        new_values.extend_from_slice(&v);

        let history = &cache.layers[l];
        let attn = attend(cfg, &q, &history.keys, &history.values, None, None);

        if let (Some(hs), Some(f)) = (h_scaled.as_mut(), factors.as_ref()) {
            let attn_s = if l == 0 {
                // Identical input stream: reuse q and the stored k/v of the new token.
                attend(cfg, &q, &history.keys, &history.values, Some(f), None)
            } else {
                let a_s = tensor::layer_norm_unchecked(hs, &layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS);
                let q_s = tensor::vecmat(&a_s, &layer.wq);
                let k_s = tensor::vecmat(&a_s, &layer.wk);
                let v_s = tensor::vecmat(&a_s, &layer.wv);
                attend(cfg, &q_s, &history.keys, &history.values, Some(f), Some((&k_s, &v_s)))
            };
            block_tail(layer, hs, &attn_s);
        }
        block_tail(layer, &mut h, &attn);
    }

    cache.token_ids.push(token_id);
    cache.value_norms.push(tensor::l2_norm(&new_values));

    let plain = unembed(params, &h);
    let scaled = h_scaled.map(|hs| unembed(params, &hs));
    Ok(StepOutput { plain, scaled })
}

/// Causal attention of one query over the cached positions (which already
/// include the incoming token). `own_kv` replaces the incoming token's key and
/// value when the query comes from a stream that diverged from the stored one.
fn attend(
    cfg: &ModelConfig,
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    factors: Option<&[f64]>,
    own_kv: Option<(&[f32], &[f32])>,
) -> Vec<f32> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let n = keys.len() / d;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f32; d];
    let mut scores = vec![0.0f64; n];
    for head in 0..cfg.n_heads {
        let hs = head * dh..(head + 1) * dh;
        for (i, s) in scores.iter_mut().enumerate() {
            let k = match own_kv {
                Some((k_own, _)) if i == n - 1 => &k_own[hs.clone()],
                _ => &keys[i * d + hs.start..i * d + hs.end],
            };
            *s = tensor::dot(&q[hs.clone()], k) * inv_sqrt;
        }
        tensor::softmax_in_place(&mut scores);
        let mut acc = vec![0.0f64; dh];
        for (i, &p) in scores.iter().enumerate() {
            let w = match factors {
                Some(f) => p * f[i],
                None => p,
            };
            let v = match own_kv {
                Some((_, v_own)) if i == n - 1 => &v_own[hs.clone()],
                _ => &values[i * d + hs.start..i * d + hs.end],
            };
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out[hs].iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    out
}

/// Output projection, residual, then the MLP half of the block.
fn block_tail(layer: &LayerParams, h: &mut [f32], attn: &[f32]) {
    let proj = tensor::vecmat(attn, &layer.wo);
    h.iter_mut().zip(&proj).for_each(|(x, p)| *x += p);
    let a = tensor::layer_norm_unchecked(h, &layer.ln2_gain, &layer.ln2_bias, LAYER_NORM_EPS);
    let mut hidden = tensor::vecmat_bias(&a, &layer.w1, &layer.b1);
    hidden.iter_mut().for_each(|x| *x = tensor::gelu(*x));
    let mlp = tensor::vecmat_bias(&hidden, &layer.w2, &layer.b2);
    h.iter_mut().zip(&mlp).for_each(|(x, m)| *x += m);
}

fn unembed(params: &ModelParams, h: &[f32]) -> Vec<f32> {
    let a = tensor::layer_norm_unchecked(h, &params.final_gain, &params.final_bias, LAYER_NORM_EPS);
    tensor::vecmat(&a, &params.unembedding)
}
