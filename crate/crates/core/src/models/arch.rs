use rand::Rng;

use super::embedder::{surrogate_forward, SurrogateVars};
use super::params::{conv_decls, linear_decls, BoundParams, ParamDecl};
use super::{EmbedderVariant, ModelError, ModelInstance, ModelKind, ModelSpec};
use crate::attention::{
    attention_pool, mha_block, positional_encoding, self_attention_stack, AttnPoolParams,
    MhaParams,
};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One clip as seen by a model.
#[derive(Debug, Clone)]
pub struct ModelInput<F> {
    /// Log-mel features `[T, n_mels]`.
    pub features: Tensor<F>,
    /// Precomputed `[T_e, embed_dim]` embeddings for file-backed embedders.
    pub embeddings: Option<Tensor<F>>,
}

impl<F: Real> ModelInput<F> {
    pub fn from_features(features: Tensor<F>) -> Self {
        Self {
            features,
            embeddings: None,
        }
    }
}

/// Logits plus intermediates that tests and diagnostics inspect.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n_classes]`
    pub logits: Var,
    /// Pooled vectors feeding the classifier, in concatenation order.
    pub branch_pools: Vec<Var>,
    /// CMAM cross-attention maps `[T_e, T_cnn]`, one per head.
    pub cross_attention: Vec<Var>,
    pub embeddings: Option<Var>,
}

/// Shortest log-mel input the raw-feature encoder accepts: every pooling
/// stage must halve the time axis.
pub fn min_raw_frames(spec: &ModelSpec) -> usize {
    spec.pool_window.pow(spec.cnn_channels.len() as u32)
}

fn pooled_width(width: usize, stages: usize, window: usize) -> usize {
    (0..stages).fold(width, |w, _| if w >= window { w / window } else { w })
}

/// Flattened per-time-step width an encoder emits for `width` input columns.
fn encoder_out_width(width: usize, channels: &[usize], window: usize) -> usize {
    channels.last().copied().unwrap_or(1) * pooled_width(width, channels.len(), window)
}

fn encoder_decls(prefix: &str, channels: &[usize], k: usize) -> Vec<ParamDecl> {
    let mut c_in = 1;
    let mut decls = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        decls.extend(conv_decls(&format!("{prefix}.conv{i}"), c_in, c, k));
        c_in = c;
    }
    decls
}

/// Every parameter the spec implies, with shapes and initialisers.
pub fn layout(spec: &ModelSpec) -> Result<Vec<ParamDecl>, ModelError> {
    spec.validate()?;
    let k = spec.kernel_size;
    let win = spec.pool_window;
    let cnn = spec.effective_cnn_channels();
    let pool_dim = spec.effective_pool_attn_dim();
    let heads = spec.pool_heads;
    let emb = spec.embedder.embed_dim;
    let mut decls = Vec::new();
    if spec.kind.uses_embedder() {
        decls.extend(spec.embedder.declare(spec.n_mels));
    }
    match spec.kind {
        ModelKind::Base | ModelKind::Vfm => {
            let width = if spec.kind == ModelKind::Base { spec.n_mels } else { emb };
            let d = encoder_out_width(width, &cnn, win);
            decls.extend(encoder_decls("encoder", &cnn, k));
            decls.extend(AttnPoolParams::declare("pool", d, heads, pool_dim));
            let p = AttnPoolParams::output_dim(d, heads);
            decls.extend(linear_decls("classifier", p, spec.n_classes));
        }
        ModelKind::Jrm => {
            let jrm = spec.effective_jrm_channels();
            let d_raw = encoder_out_width(spec.n_mels, &cnn, win);
            let d_emb = encoder_out_width(emb, &jrm, win);
            decls.extend(encoder_decls("raw_encoder", &cnn, k));
            decls.extend(AttnPoolParams::declare("raw_pool", d_raw, heads, pool_dim));
            decls.extend(encoder_decls("emb_encoder", &jrm, k));
            decls.extend(AttnPoolParams::declare("emb_pool", d_emb, heads, pool_dim));
            let p = AttnPoolParams::output_dim(d_raw, heads) + AttnPoolParams::output_dim(d_emb, heads);
            decls.extend(linear_decls("classifier", p, spec.n_classes));
        }
        ModelKind::Cmam => {
            let dm = spec.effective_d_model();
            decls.extend(linear_decls("emb_proj", emb, dm));
            for l in 0..spec.attn_layers {
                decls.extend(MhaParams::declare(&format!("self_attn.{l}"), dm, dm, dm));
            }
            let d_raw = encoder_out_width(spec.n_mels, &cnn, win);
            decls.extend(encoder_decls("raw_encoder", &cnn, k));
            decls.extend(linear_decls("raw_proj", d_raw, dm));
            decls.extend(MhaParams::declare("cross_attn", dm, dm, dm));
            decls.extend(AttnPoolParams::declare("pool", dm, heads, pool_dim));
            let p = AttnPoolParams::output_dim(dm, heads);
            decls.extend(linear_decls("classifier", p, spec.n_classes));
        }
    }
    Ok(decls)
}

/// `[T, W]` → `n × (conv → relu → maxpool)` → `[T', C·W']`.
fn cnn_encoder<F: Real>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    prefix: &str,
    n_layers: usize,
    window: usize,
    input: Var,
) -> Result<Var, ModelError> {
    let (t, w) = tape.value(input).dims2()?;
    let mut x = tape.reshape(input, &[1, 1, t, w])?;
    for i in 0..n_layers {
        let kernel = params.get(&format!("{prefix}.conv{i}.weight"))?;
        let bias = params.get(&format!("{prefix}.conv{i}.bias"))?;
        x = tape.conv2d(x, kernel, bias)?;
        x = tape.relu(x)?;
        x = tape.maxpool2d(x, window)?;
    }
    let (c, t_out, w_out) = match tape.shape(x)[..] {
        [_, c, t, w] => (c, t, w),
        _ => unreachable!("conv output is rank 4"),
    };
    let x = tape.reshape(x, &[c, t_out, w_out])?;
    let x = tape.permute(x, &[1, 0, 2])?;
    Ok(tape.reshape(x, &[t_out, c * w_out])?)
}

/// Whole-matrix standardisation; keeps the spectral shape.
fn standardize<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let n = x.len() as f64;
    let vals = x.data().iter().map(|v| v.to_f64().unwrap_or(0.0));
    let mean = vals.clone().sum::<f64>() / n;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-8).sqrt();
    x.map(|v| F::lit((v.to_f64().unwrap_or(0.0) - mean) * inv))
}

fn classifier<F: Real>(tape: &mut Tape<F>, params: &BoundParams, pooled: Var) -> Result<Var, ModelError> {
    let width = tape.value(pooled).len();
    let row = tape.reshape(pooled, &[1, width])?;
    let logits = tape.linear(
        row,
        params.get("classifier.weight")?,
        Some(params.get("classifier.bias")?),
    )?;
    let n = tape.value(logits).len();
    Ok(tape.reshape(logits, &[n])?)
}

impl<F: Real> ModelInstance<F> {
    /// Full forward pass on `tape`. Dispatches on the spec's kind.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput, ModelError> {
        match self.spec.kind {
            ModelKind::Base => self.forward_base(tape, params, input),
            ModelKind::Vfm => self.forward_vfm(tape, params, input),
            ModelKind::Jrm => self.forward_jrm(tape, params, input),
            ModelKind::Cmam => self.forward_cmam(tape, params, input, training, rng),
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), ModelError> {
        if self.spec.kind == kind {
            Ok(())
        } else {
            Err(ModelError::Spec(format!(
                "{kind:?} forward called on a {:?} model",
                self.spec.kind
            )))
        }
    }

    fn raw_features(&self, tape: &mut Tape<F>, input: &ModelInput<F>) -> Result<Var, ModelError> {
        let (t, w) = input.features.dims2()?;
        if w != self.spec.n_mels {
            return Err(ModelError::InputWidth {
                expected: self.spec.n_mels,
                got: w,
            });
        }
        let required = min_raw_frames(&self.spec);
        if t < required {
            return Err(ModelError::InputTooShort { required, got: t });
        }
        Ok(tape.constant(self.prepared_features(&input.features)))
    }

    fn prepared_features(&self, features: &Tensor<F>) -> Tensor<F> {
        if self.spec.normalize_input {
            standardize(features)
        } else {
            features.clone()
        }
    }

    /// Event embeddings `[T_e, embed_dim]` for this clip.
    fn embeddings(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
    ) -> Result<Var, ModelError> {
        let spec = &self.spec.embedder;
        match spec.variant {
            EmbedderVariant::Surrogate => {
                let (_, w) = input.features.dims2()?;
                if w != self.spec.n_mels {
                    return Err(ModelError::InputWidth {
                        expected: self.spec.n_mels,
                        got: w,
                    });
                }
                let features = tape.constant(self.prepared_features(&input.features));
                let vars = SurrogateVars {
                    w1: params.get("embedder.w1")?,
                    b1: params.get("embedder.b1")?,
                    w2: params.get("embedder.w2")?,
                    b2: params.get("embedder.b2")?,
                };
                Ok(surrogate_forward(tape, spec, &vars, features)?)
            }
            EmbedderVariant::FileBacked => {
                let emb = input
                    .embeddings
                    .as_ref()
                    .ok_or(ModelError::MissingEmbeddings(self.spec.kind))?;
                let (_, d) = emb.dims2()?;
                if d != spec.embed_dim {
                    return Err(ModelError::InputWidth {
                        expected: spec.embed_dim,
                        got: d,
                    });
                }
                Ok(tape.constant(emb.clone()))
            }
        }
    }

    pub fn forward_base(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
    ) -> Result<ForwardOutput, ModelError> {
        self.expect_kind(ModelKind::Base)?;
        let x = self.raw_features(tape, input)?;
        let n = self.spec.cnn_channels.len();
        let h = cnn_encoder(tape, params, "encoder", n, self.spec.pool_window, x)?;
        let pool = AttnPoolParams::bind(params, "pool", self.spec.pool_heads)?;
        let pooled = attention_pool(tape, h, &pool)?.pooled;
        Ok(ForwardOutput {
            logits: classifier(tape, params, pooled)?,
            branch_pools: vec![pooled],
            cross_attention: Vec::new(),
            embeddings: None,
        })
    }

    pub fn forward_vfm(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
    ) -> Result<ForwardOutput, ModelError> {
        self.expect_kind(ModelKind::Vfm)?;
        let e = self.embeddings(tape, params, input)?;
        let n = self.spec.cnn_channels.len();
        let h = cnn_encoder(tape, params, "encoder", n, self.spec.pool_window, e)?;
        let pool = AttnPoolParams::bind(params, "pool", self.spec.pool_heads)?;
        let pooled = attention_pool(tape, h, &pool)?.pooled;
        Ok(ForwardOutput {
            logits: classifier(tape, params, pooled)?,
            branch_pools: vec![pooled],
            cross_attention: Vec::new(),
            embeddings: Some(e),
        })
    }

    pub fn forward_jrm(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
    ) -> Result<ForwardOutput, ModelError> {
        self.expect_kind(ModelKind::Jrm)?;
        let win = self.spec.pool_window;
        let x = self.raw_features(tape, input)?;
        let h_raw = cnn_encoder(tape, params, "raw_encoder", self.spec.cnn_channels.len(), win, x)?;
        let raw_pool = AttnPoolParams::bind(params, "raw_pool", self.spec.pool_heads)?;
        let p_raw = attention_pool(tape, h_raw, &raw_pool)?.pooled;

        let e = self.embeddings(tape, params, input)?;
        let h_emb = cnn_encoder(tape, params, "emb_encoder", self.spec.jrm_channels.len(), win, e)?;
        let emb_pool = AttnPoolParams::bind(params, "emb_pool", self.spec.pool_heads)?;
        let p_emb = attention_pool(tape, h_emb, &emb_pool)?.pooled;

        let joint = tape.concat(&[p_raw, p_emb], 0)?;
        Ok(ForwardOutput {
            logits: classifier(tape, params, joint)?,
            branch_pools: vec![p_raw, p_emb],
            cross_attention: Vec::new(),
            embeddings: Some(e),
        })
    }

    pub fn forward_cmam<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        params: &BoundParams,
        input: &ModelInput<F>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput, ModelError> {
        self.expect_kind(ModelKind::Cmam)?;
        let spec = &self.spec;
        let dm = spec.effective_d_model();

        let e = self.embeddings(tape, params, input)?;
        let q = tape.linear(e, params.get("emb_proj.weight")?, Some(params.get("emb_proj.bias")?))?;
        let t_e = tape.shape(q)[0];
        let pe = tape.constant(positional_encoding(t_e, dm)?);
        let q = tape.add(q, pe)?;
        let layers = (0..spec.attn_layers)
            .map(|l| MhaParams::bind(params, &format!("self_attn.{l}"), spec.attn_heads, spec.dropout))
            .collect::<Result<Vec<_>, _>>()?;
        let q = self_attention_stack(tape, q, &layers, training, rng)?;

        let x = self.raw_features(tape, input)?;
        let h = cnn_encoder(tape, params, "raw_encoder", spec.cnn_channels.len(), spec.pool_window, x)?;
        let kv = tape.linear(h, params.get("raw_proj.weight")?, Some(params.get("raw_proj.bias")?))?;

        let cross = MhaParams::bind(params, "cross_attn", spec.attn_heads, spec.dropout)?;
        let attended = mha_block(tape, q, kv, &cross, training, rng)?;

        let pool = AttnPoolParams::bind(params, "pool", spec.pool_heads)?;
        let pooled = attention_pool(tape, attended.output, &pool)?.pooled;
        Ok(ForwardOutput {
            logits: classifier(tape, params, pooled)?,
            branch_pools: vec![pooled],
            cross_attention: attended.weights,
            embeddings: Some(e),
        })
    }
}
