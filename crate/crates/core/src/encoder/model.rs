use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use super::EncoderConfig;
use crate::frontend::EncoderInput;
use crate::maskgen::{mask_for_context, AttentionMask, ContextSpec};
use crate::nn::{all_finite, softmax, swish, glu, Init, LayerNorm, Linear, ParamStore};
use crate::{Error, Result};

/// Every layer's output for one utterance: index 0 is the front-end
/// projection, index `i` the output of block `i` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub hidden: Vec<Array2<f32>>,
}

impl BlockOutput {
    pub fn final_output(&self) -> &Array2<f32> {
        self.hidden.last().expect("at least one tap")
    }

    /// Output of block `block_index` (0-based over blocks, excluding the front end).
    pub fn block(&self, block_index: usize) -> &Array2<f32> {
        &self.hidden[block_index + 1]
    }

    pub fn len(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let (rows, cols) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Shape(e.to_string()))
}

pub(crate) fn array_to_tensor(a: &Array2<f32>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Concatenates the `k` most recent frames (oldest first) along features:
/// `[B, k-1+n, C] -> [B, n, k*C]`.
fn causal_unfold(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let n = x.dim(1)? + 1 - kernel;
    let parts: Vec<Tensor> = (0..kernel)
        .map(|k| x.narrow(1, k, n))
        .collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&parts, 2)?)
}

/// Prepends `context` (may be shorter than `want` or absent) zero-padded to
/// exactly `want` frames.
fn with_left_context(x: &Tensor, context: Option<&Tensor>, want: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    let have = context.map_or(Ok(0), |t| t.dim(1))?;
    let mut parts = Vec::with_capacity(3);
    if have < want {
        parts.push(Tensor::zeros((b, want - have, c), x.dtype(), x.device())?);
    }
    if let Some(ctx) = context {
        parts.push(ctx.narrow(1, have.saturating_sub(want), have.min(want))?);
    }
    parts.push(x.clone());
    Ok(Tensor::cat(&parts, 1)?)
}

fn tail(x: &Tensor, n: usize) -> Result<Tensor> {
    let len = x.dim(1)?;
    Ok(x.narrow(1, len.saturating_sub(n), len.min(n))?)
}

#[derive(Debug, Clone)]
struct FrontendConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl FrontendConv {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let fan_in = cfg.conv_kernel * cfg.frontend_dim;
        let bound = (6.0 / (fan_in + cfg.d_model) as f64).sqrt();
        Ok(Self {
            weight: ps.get(
                &format!("{name}.weight"),
                &[fan_in, cfg.d_model],
                Init::Uniform(bound),
            )?,
            bias: ps.get(&format!("{name}.bias"), &[cfg.d_model], Init::Uniform(0.1))?,
            kernel: cfg.conv_kernel,
        })
    }

    /// `x_ctx` holds `kernel-1` context frames followed by the new frames.
    fn forward(&self, x_ctx: &Tensor) -> Result<Tensor> {
        let cols = causal_unfold(x_ctx, self.kernel)?;
        let (b, n, f) = cols.dims3()?;
        let y = cols
            .reshape((b * n, f))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        swish(&y.reshape((b, n, self.weight.dim(1)?))?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.d_model)?,
            up: Linear::new(ps, &format!("{name}.up"), cfg.d_model, cfg.d_ff)?,
            down: Linear::new(ps, &format!("{name}.down"), cfg.d_ff, cfg.d_model)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&swish(&self.up.forward(&self.norm.forward(x)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: Tensor,
    depthwise_bias: Tensor,
    inner_norm: LayerNorm,
    pointwise_out: Linear,
    kernel: usize,
}

impl ConvModule {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        let bound = (3.0 / cfg.conv_kernel as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d)?,
            pointwise_in: Linear::new(ps, &format!("{name}.pointwise_in"), d, 2 * d)?,
            depthwise: ps.get(
                &format!("{name}.depthwise.weight"),
                &[cfg.conv_kernel, d],
                Init::Uniform(bound),
            )?,
            depthwise_bias: ps.get(&format!("{name}.depthwise.bias"), &[d], Init::Zeros)?,
            inner_norm: LayerNorm::new(ps, &format!("{name}.inner_norm"), d)?,
            pointwise_out: Linear::new(ps, &format!("{name}.pointwise_out"), d, d)?,
            kernel: cfg.conv_kernel,
        })
    }

    /// Returns the module output and the gated sequence (with context) so the
    /// caller can keep its tail as streaming cache.
    fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let gated = glu(&self.pointwise_in.forward(&self.norm.forward(x)?)?)?;
        let n = gated.dim(1)?;
        let padded = with_left_context(&gated, context, self.kernel - 1)?;
        let mut acc = padded
            .narrow(1, 0, n)?
            .broadcast_mul(&self.depthwise.get(0)?)?;
        for k in 1..self.kernel {
            acc = (acc + padded.narrow(1, k, n)?.broadcast_mul(&self.depthwise.get(k)?)?)?;
        }
        let acc = acc.broadcast_add(&self.depthwise_bias)?;
        let out = self
            .pointwise_out
            .forward(&swish(&self.inner_norm.forward(&acc)?)?)?;
        Ok((out, padded))
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    n_heads: usize,
}

impl SelfAttention {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d)?,
            query: Linear::new(ps, &format!("{name}.query"), d, d)?,
            key: Linear::new(ps, &format!("{name}.key"), d, d)?,
            value: Linear::new(ps, &format!("{name}.value"), d, d)?,
            out: Linear::new(ps, &format!("{name}.out"), d, d)?,
            n_heads: cfg.n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.n_heads, d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias` is `[B, 1, n, m+n]` with 0 for allowed pairs and -inf otherwise,
    /// where `m` is the number of cached key frames.
    fn forward(
        &self,
        x: &Tensor,
        cache: Option<(&Tensor, &Tensor)>,
        bias: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let h = self.norm.forward(x)?;
        let (b, n, d) = h.dims3()?;
        let q = self.query.forward(&h)?;
        let mut k = self.key.forward(&h)?;
        let mut v = self.value.forward(&h)?;
        if let Some((kc, vc)) = cache {
            k = Tensor::cat(&[kc, &k], 1)?;
            v = Tensor::cat(&[vc, &v], 1)?;
        }
        let scale = 1.0 / ((d / self.n_heads) as f64).sqrt();
        let qh = self.split_heads(&q)?;
        let kh = self.split_heads(&k)?;
        let vh = self.split_heads(&v)?;
        let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?.broadcast_add(bias)?;
        let mixed = softmax(&scores)?.matmul(&vh)?;
        let merged = mixed.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        Ok((self.out.forward(&merged)?, k, v))
    }
}

#[derive(Debug, Clone)]
struct ConformerBlock {
    ff_in: FeedForward,
    conv: ConvModule,
    attn: SelfAttention,
    ff_out: FeedForward,
    final_norm: LayerNorm,
}

struct BlockStep {
    out: Tensor,
    conv_padded: Tensor,
    keys: Tensor,
    values: Tensor,
}

impl ConformerBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            ff_in: FeedForward::new(ps, &format!("{name}.ff_in"), cfg)?,
            conv: ConvModule::new(ps, &format!("{name}.conv"), cfg)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), cfg)?,
            ff_out: FeedForward::new(ps, &format!("{name}.ff_out"), cfg)?,
            final_norm: LayerNorm::new(ps, &format!("{name}.final_norm"), cfg.d_model)?,
        })
    }

    /// Half-step FFN, causal conv, masked attention, half-step FFN, norm.
    fn forward(
        &self,
        x: &Tensor,
        conv_context: Option<&Tensor>,
        kv_cache: Option<(&Tensor, &Tensor)>,
        bias: &Tensor,
    ) -> Result<BlockStep> {
        let x = (x + (self.ff_in.forward(x)? * 0.5)?)?;
        let (conv_out, conv_padded) = self.conv.forward(&x, conv_context)?;
        let x = (x + conv_out)?;
        let (attn_out, keys, values) = self.attn.forward(&x, kv_cache, bias)?;
        let x = (x + attn_out)?;
        let x = (&x + (self.ff_out.forward(&x)? * 0.5)?)?;
        Ok(BlockStep {
            out: self.final_norm.forward(&x)?,
            conv_padded,
            keys,
            values,
        })
    }
}

/// Conv-first Conformer encoder without positional embeddings. A single
/// parameter set serves every attention context.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    frontend: FrontendConv,
    blocks: Vec<ConformerBlock>,
    dtype: DType,
}

impl Encoder {
    /// Registers (or reuses) the encoder's parameters under `prefix`.
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let frontend = FrontendConv::new(ps, &format!("{prefix}.frontend"), cfg)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| ConformerBlock::new(ps, &format!("{prefix}.blocks.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            blocks,
            dtype: ps.dtype(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_taps(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Additive attention bias `[B, 1, T, T]` for a padded batch: keys past an
    /// utterance's end are blocked except on the diagonal.
    pub fn attention_bias(&self, mask: &AttentionMask, lens: &[usize]) -> Result<Tensor> {
        let t = mask.len();
        let mut data = vec![0f32; lens.len() * t * t];
        for (b, &len) in lens.iter().enumerate() {
            let base = b * t * t;
            for q in 0..t {
                for k in 0..t {
                    let ok = k == q || (k < len && mask.allows(q, k));
                    if !ok {
                        data[base + q * t + k] = f32::NEG_INFINITY;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (lens.len(), 1, t, t), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Batched forward over a zero-padded batch `[B, T, frontend_dim]`.
    /// Returns `n_blocks + 1` taps of shape `[B, T, d_model]`.
    pub fn forward_batch(&self, x: &Tensor, lens: &[usize], mask: &AttentionMask) -> Result<Vec<Tensor>> {
        let (b, t, f) = x.dims3()?;
        if f != self.cfg.frontend_dim {
            return Err(Error::Shape(format!(
                "encoder input has {f} dims, expected {}",
                self.cfg.frontend_dim
            )));
        }
        if mask.len() != t || lens.len() != b {
            return Err(Error::Shape(format!(
                "mask length {} / {} lengths for a [{b}, {t}] batch",
                mask.len(),
                lens.len()
            )));
        }
        let bias = self.attention_bias(mask, lens)?;
        let x = x.to_dtype(self.dtype)?;
        let mut h = self
            .frontend
            .forward(&with_left_context(&x, None, self.cfg.conv_kernel - 1)?)?;
        let mut taps = Vec::with_capacity(self.num_taps());
        taps.push(h.clone());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, None, None, &bias)?.out;
            if !all_finite(&h)? {
                return Err(Error::NonFinite { block: i });
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Full-sequence forward of one utterance under `ctx`; the same mask is
    /// applied in every block.
    pub fn forward(&self, input: &EncoderInput, ctx: &ContextSpec) -> Result<BlockOutput> {
        if input.is_empty() {
            return Err(Error::InvalidInput("empty encoder input".into()));
        }
        let mask = mask_for_context(input.len(), ctx)?;
        self.forward_with_mask(input, &mask)
    }

    pub fn forward_with_mask(&self, input: &EncoderInput, mask: &AttentionMask) -> Result<BlockOutput> {
        let x = array_to_tensor(&input.frames, self.dtype)?.unsqueeze(0)?;
        let taps = self.forward_batch(&x, &[input.len()], mask)?;
        Ok(BlockOutput {
            hidden: taps
                .iter()
                .map(|t| tensor_to_array(&t.squeeze(0)?))
                .collect::<Result<_>>()?,
        })
    }

    /// Forward with every query allowed to see every key.
    pub fn forward_unmasked(&self, input: &EncoderInput) -> Result<BlockOutput> {
        let n = input.len();
        self.forward_with_mask(input, &AttentionMask::from_fn(n, |_, _| true))
    }

    pub fn streaming_state(&self, ctx: &ContextSpec) -> Result<super::StreamingState> {
        super::StreamingState::new(&self.cfg, ctx)
    }

    /// Incremental forward of one chunk. `chunk` must be at most the chunk
    /// size `la_frames + 1`, and only the final chunk may be shorter.
    pub fn forward_streaming(
        &self,
        chunk: &EncoderInput,
        ctx: &ContextSpec,
        mut state: super::StreamingState,
    ) -> Result<(BlockOutput, super::StreamingState)> {
        state.check(&self.cfg, ctx, chunk.len())?;
        if chunk.dim() != self.cfg.frontend_dim {
            return Err(Error::Shape(format!(
                "chunk has {} dims, expected {}",
                chunk.dim(),
                self.cfg.frontend_dim
            )));
        }
        let n = chunk.len();
        let x = array_to_tensor(&chunk.frames, self.dtype)?.unsqueeze(0)?;
        let kernel_ctx = self.cfg.conv_kernel - 1;
        let x_ctx = with_left_context(&x, state.frontend_cache.as_ref(), kernel_ctx)?;
        state.frontend_cache = Some(tail(&x_ctx, kernel_ctx)?);
        let mut h = self.frontend.forward(&x_ctx)?;
        let mut hidden = Vec::with_capacity(self.num_taps());
        hidden.push(tensor_to_array(&h.squeeze(0)?)?);
        for (i, block) in self.blocks.iter().enumerate() {
            let cached = state.key_cache[i].as_ref().map_or(Ok(0), |k| k.dim(1))?;
            let bias = state.chunk_bias(n, cached, self.dtype)?;
            let kv = match (&state.key_cache[i], &state.value_cache[i]) {
                (Some(k), Some(v)) => Some((k, v)),
                _ => None,
            };
            let step = block.forward(&h, state.conv_cache[i].as_ref(), kv, &bias)?;
            if !all_finite(&step.out)? {
                return Err(Error::NonFinite { block: i });
            }
            state.conv_cache[i] = Some(tail(&step.conv_padded, kernel_ctx)?);
            if state.lb_frames > 0 {
                state.key_cache[i] = Some(tail(&step.keys, state.lb_frames)?);
                state.value_cache[i] = Some(tail(&step.values, state.lb_frames)?);
            }
            h = step.out;
            hidden.push(tensor_to_array(&h.squeeze(0)?)?);
        }
        state.advance(n);
        Ok((BlockOutput { hidden }, state))
    }

    /// Runs a whole utterance chunk by chunk; returns the concatenated taps.
    pub fn stream_utterance(&self, input: &EncoderInput, ctx: &ContextSpec) -> Result<BlockOutput> {
        let mut state = self.streaming_state(ctx)?;
        let c = state.chunk_size();
        let mut parts: Vec<BlockOutput> = Vec::new();
        let mut start = 0;
        while start < input.len() {
            let end = (start + c).min(input.len());
            let (out, next) = self.forward_streaming(&input.slice(start, end), ctx, state)?;
            parts.push(out);
            state = next;
            start = end;
        }
        let taps = self.num_taps();
        let hidden = (0..taps)
            .map(|i| {
                let views: Vec<_> = parts.iter().map(|p| p.hidden[i].view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views)
                    .map_err(|e| Error::Shape(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(BlockOutput { hidden })
    }
}
