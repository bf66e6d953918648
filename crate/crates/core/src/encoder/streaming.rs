use candle_core::{DType, Device, Tensor};

use super::EncoderConfig;
use crate::maskgen::{ContextSpec, Frames};
use crate::{Error, Result};

/// Per-block caches for chunked incremental inference.
///
/// Conv caches hold the last `conv_kernel - 1` inputs of each causal conv; the
/// attention caches hold keys and values of the last `lb_frames` frames.
#[derive(Debug, Clone)]
pub struct StreamingState {
    pub(super) ctx: ContextSpec,
    pub(super) lb_frames: usize,
    chunk: usize,
    n_blocks: usize,
    d_model: usize,
    pub(super) frontend_cache: Option<Tensor>,
    pub(super) conv_cache: Vec<Option<Tensor>>,
    pub(super) key_cache: Vec<Option<Tensor>>,
    pub(super) value_cache: Vec<Option<Tensor>>,
    frames_seen: usize,
    finished: bool,
}

impl StreamingState {
    pub fn new(cfg: &EncoderConfig, ctx: &ContextSpec) -> Result<Self> {
        let chunk = match ctx.la_frames()? {
            Frames::Finite(la) => la + 1,
            Frames::Inf => {
                return Err(Error::Streaming(
                    "streaming needs a finite look-ahead".into(),
                ))
            }
        };
        let lb_frames = match ctx.lb_frames()? {
            Frames::Finite(lb) => lb,
            Frames::Inf => {
                tracing::warn!(
                    cap = cfg.streaming_lb_cap_frames,
                    "unbounded look-back in streaming mode; capping the key/value cache"
                );
                cfg.streaming_lb_cap_frames
            }
        };
        Ok(Self {
            ctx: *ctx,
            lb_frames,
            chunk,
            n_blocks: cfg.n_blocks,
            d_model: cfg.d_model,
            frontend_cache: None,
            conv_cache: vec![None; cfg.n_blocks],
            key_cache: vec![None; cfg.n_blocks],
            value_cache: vec![None; cfg.n_blocks],
            frames_seen: 0,
            finished: false,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn lb_frames(&self) -> usize {
        self.lb_frames
    }

    /// Cached frame counts: (front end, per-block conv, per-block keys).
    pub fn cache_lengths(&self) -> (usize, Vec<usize>, Vec<usize>) {
        let len = |t: &Option<Tensor>| t.as_ref().map_or(0, |t| t.dim(1).unwrap_or(0));
        (
            len(&self.frontend_cache),
            self.conv_cache.iter().map(len).collect(),
            self.key_cache.iter().map(len).collect(),
        )
    }

    pub(super) fn check(&self, cfg: &EncoderConfig, ctx: &ContextSpec, n: usize) -> Result<()> {
        if cfg.n_blocks != self.n_blocks || cfg.d_model != self.d_model {
            return Err(Error::Streaming(format!(
                "state built for {} blocks x {} dims, encoder has {} x {}",
                self.n_blocks, self.d_model, cfg.n_blocks, cfg.d_model
            )));
        }
        if *ctx != self.ctx {
            return Err(Error::Streaming(format!(
                "state built for {}, called with {}",
                self.ctx.label(),
                ctx.label()
            )));
        }
        if n == 0 {
            return Err(Error::Streaming("empty chunk".into()));
        }
        if n > self.chunk {
            return Err(Error::Streaming(format!(
                "chunk of {n} frames exceeds chunk size {}",
                self.chunk
            )));
        }
        if self.finished {
            return Err(Error::Streaming(
                "a short final chunk was already consumed".into(),
            ));
        }
        Ok(())
    }

    /// Bias `[1, 1, n, cached + n]` for a chunk starting at `frames_seen`.
    pub(super) fn chunk_bias(&self, n: usize, cached: usize, dtype: DType) -> Result<Tensor> {
        let keys = cached + n;
        let start = self.frames_seen;
        let mut data = vec![0f32; n * keys];
        for q in 0..n {
            let t = start + q;
            for k in 0..keys {
                // Absolute position of key k.
                let p = start + k - cached;
                if p + self.lb_frames < t {
                    data[q * keys + k] = f32::NEG_INFINITY;
                }
            }
        }
        Ok(Tensor::from_vec(data, (1, 1, n, keys), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub(super) fn advance(&mut self, n: usize) {
        self.frames_seen += n;
        if n < self.chunk {
            self.finished = true;
        }
    }
}
