//! LSTM prediction network, tanh joint network and greedy decoding.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use ndarray::Array2;

use super::config::TransducerConfig;
use crate::encoder::array_to_tensor;
use crate::nn::{sigmoid, Init, Linear, ParamStore};
use crate::objectives::{rnnt_loss_tensor, ExternalLoss, BLANK};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct LstmLayer {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl LstmLayer {
    fn new(ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ih: Linear::new(ps, &format!("{name}.ih"), d_in, 4 * hidden)?,
            hh: Linear::new(ps, &format!("{name}.hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    /// One step on `[B, d_in]`; gate order i, f, g, o.
    fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (self.ih.forward(x)? + self.hh.forward(h)?)?;
        let n = self.hidden;
        let i = sigmoid(&gates.narrow(D::Minus1, 0, n)?)?;
        let f = sigmoid(&gates.narrow(D::Minus1, n, n)?)?;
        let g = gates.narrow(D::Minus1, 2 * n, n)?.tanh()?;
        let o = sigmoid(&gates.narrow(D::Minus1, 3 * n, n)?)?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Recurrent state for incremental decoding, one `(h, c)` per layer.
#[derive(Debug, Clone)]
pub struct PredictorState {
    hc: Vec<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Transducer {
    embed: Tensor,
    layers: Vec<LstmLayer>,
    enc_proj: Linear,
    pred_proj: Linear,
    out: Linear,
    vocab: usize,
    cfg: TransducerConfig,
}

impl Transducer {
    pub fn new(ps: &mut ParamStore, prefix: &str, d_model: usize, vocab: usize, cfg: &TransducerConfig) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidInput("transducer vocabulary needs blank plus one word".into()));
        }
        let embed = ps.get(&format!("{prefix}.embed"), &[vocab, cfg.embed_dim], Init::Normal(1.0))?;
        let mut layers = Vec::with_capacity(cfg.pred_layers);
        for l in 0..cfg.pred_layers {
            let d_in = if l == 0 { cfg.embed_dim } else { cfg.pred_hidden };
            layers.push(LstmLayer::new(ps, &format!("{prefix}.lstm.{l}"), d_in, cfg.pred_hidden)?);
        }
        Ok(Self {
            embed,
            layers,
            enc_proj: Linear::new(ps, &format!("{prefix}.joint.enc"), d_model, cfg.joint_dim)?,
            pred_proj: Linear::new(ps, &format!("{prefix}.joint.pred"), cfg.pred_hidden, cfg.joint_dim)?,
            out: Linear::new(ps, &format!("{prefix}.joint.out"), cfg.joint_dim, vocab)?,
            vocab,
            cfg: cfg.clone(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn zero_state(&self, batch: usize) -> Result<PredictorState> {
        let z = Tensor::zeros((batch, self.cfg.pred_hidden), self.embed.dtype(), &Device::Cpu)?;
        Ok(PredictorState {
            hc: vec![(z.clone(), z); self.layers.len()],
        })
    }

    /// Feeds `tokens` `[B]` and returns the top-layer output `[B, H]`.
    fn predict_step(&self, tokens: &Tensor, state: &PredictorState) -> Result<(Tensor, PredictorState)> {
        let mut x = self.embed.index_select(tokens, 0)?;
        let mut hc = Vec::with_capacity(self.layers.len());
        for (layer, (h, c)) in self.layers.iter().zip(&state.hc) {
            let (h2, c2) = layer.step(&x, h, c)?;
            x = h2.clone();
            hc.push((h2, c2));
        }
        Ok((x, PredictorState { hc }))
    }

    /// Prediction-network outputs `[B, L, H]` for token rows `[B, L]`.
    fn predict_sequence(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let b = tokens.len();
        let l = tokens.first().map_or(0, |t| t.len());
        let mut state = self.zero_state(b)?;
        let mut outs = Vec::with_capacity(l);
        for j in 0..l {
            let col: Vec<u32> = tokens.iter().map(|row| row[j]).collect();
            let (y, next) = self.predict_step(&Tensor::from_vec(col, b, &Device::Cpu)?, &state)?;
            outs.push(y);
            state = next;
        }
        Ok(Tensor::stack(&outs, 1)?)
    }

    /// Joint logits `[B, T, L, V]` from encoder `[B, T, d]` and predictor `[B, L, H]`.
    fn joint(&self, enc: &Tensor, pred: &Tensor) -> Result<Tensor> {
        let e = self.enc_proj.forward(enc)?.unsqueeze(2)?;
        let p = self.pred_proj.forward(pred)?.unsqueeze(1)?;
        self.out.forward(&e.broadcast_add(&p)?.tanh()?)
    }

    /// Mean per-utterance transducer loss over a padded batch.
    pub fn loss(&self, enc: &Tensor, lens: &[usize], labels: &[Vec<u32>]) -> Result<ExternalLoss> {
        let b = lens.len();
        if labels.len() != b {
            return Err(Error::Shape(format!("{} label rows for batch of {b}", labels.len())));
        }
        let l_max = labels.iter().map(|l| l.len()).max().unwrap_or(0) + 1;
        let tokens: Vec<Vec<u32>> = labels
            .iter()
            .map(|l| {
                let mut row = vec![BLANK];
                row.extend(l);
                row.resize(l_max, BLANK);
                row
            })
            .collect();
        let logits = self.joint(enc, &self.predict_sequence(&tokens)?)?;
        let mut surrogate: Option<Tensor> = None;
        let mut value = 0.0;
        for (i, (&len, lab)) in lens.iter().zip(labels).enumerate() {
            let li = logits.i(i)?.narrow(0, 0, len)?.narrow(1, 0, lab.len() + 1)?;
            let part = rnnt_loss_tensor(&li, lab, 1.0 / b as f64)?;
            value += part.value;
            surrogate = Some(match surrogate {
                Some(s) => (s + part.surrogate)?,
                None => part.surrogate,
            });
        }
        Ok(ExternalLoss {
            surrogate: surrogate.ok_or_else(|| Error::InvalidInput("empty batch".into()))?,
            value,
        })
    }

    /// Greedy decoding of encoder output `[T, d]`: at each frame emit the
    /// argmax while it is not blank, at most `max_symbols_per_frame` times.
    pub fn greedy_decode(&self, enc: &Array2<f32>) -> Result<Vec<u32>> {
        let enc = array_to_tensor(enc, self.embed.dtype())?;
        let enc_proj = self.enc_proj.forward(&enc)?;
        let mut state = self.zero_state(1)?;
        let start = Tensor::from_vec(vec![BLANK], 1, &Device::Cpu)?;
        let (mut pred, s) = self.predict_step(&start, &state)?;
        state = s;
        let mut pred_proj = self.pred_proj.forward(&pred)?;
        let mut out = Vec::new();
        for t in 0..enc_proj.dim(0)? {
            let e = enc_proj.narrow(0, t, 1)?;
            for _ in 0..self.cfg.max_symbols_per_frame {
                let logits = self.out.forward(&(&e + &pred_proj)?.tanh()?)?;
                let k = argmax(&logits.squeeze(0)?)?;
                if k == BLANK {
                    break;
                }
                out.push(k);
                let (p, s) = self.predict_step(&Tensor::from_vec(vec![k], 1, &Device::Cpu)?, &state)?;
                pred = p;
                state = s;
                pred_proj = self.pred_proj.forward(&pred)?;
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry, ties toward the lower index.
pub fn argmax(v: &Tensor) -> Result<u32> {
    let v = v.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, AdamConfig};
    use crate::objectives::{rnnt_loss, RnntLattice};

    fn small() -> TransducerConfig {
        TransducerConfig {
            embed_dim: 6,
            pred_hidden: 8,
            pred_layers: 2,
            joint_dim: 10,
            max_symbols_per_frame: 10,
        }
    }

    #[test]
    fn batched_loss_matches_per_utterance_lattices() {
        let mut ps = ParamStore::new(DType::F32, 3);
        let tr = Transducer::new(&mut ps, "tr", 4, 5, &small()).unwrap();
        let enc = Tensor::randn(0f32, 1.0, (2, 5, 4), &Device::Cpu).unwrap();
        let labels = vec![vec![1, 4], vec![3]];
        let batched = tr.loss(&enc, &[5, 3], &labels).unwrap();
        let mut expect = 0.0;
        for (i, (len, lab)) in [(5usize, &labels[0]), (3, &labels[1])].into_iter().enumerate() {
            let mut toks = vec![BLANK];
            toks.extend(lab.iter());
            let pred = tr.predict_sequence(&[toks]).unwrap();
            let logits = tr.joint(&enc.i(i).unwrap().narrow(0, 0, len).unwrap().unsqueeze(0).unwrap(), &pred).unwrap();
            let flat: Vec<f64> = logits.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|&v| v as f64).collect();
            let lat = RnntLattice { frames: len, labels: lab.len(), vocab: 5 };
            expect += rnnt_loss(&flat, lat, lab).unwrap().loss / 2.0;
        }
        assert!((batched.value - expect).abs() < 1e-4, "{} vs {expect}", batched.value);
    }

    #[test]
    fn always_blank_joint_decodes_to_nothing() {
        let mut ps = ParamStore::new(DType::F32, 1);
        let tr = Transducer::new(&mut ps, "tr", 4, 3, &small()).unwrap();
        // Force the output bias to favour blank by a wide margin.
        let bias = ps.var("tr.joint.out.bias").unwrap();
        bias.set(&Tensor::new(&[100f32, -100.0, -100.0], &Device::Cpu).unwrap()).unwrap();
        let enc = Array2::from_elem((6, 4), 0.3f32);
        assert!(tr.greedy_decode(&enc).unwrap().is_empty());
    }

    #[test]
    fn emissions_per_frame_are_capped() {
        let mut ps = ParamStore::new(DType::F32, 1);
        let cfg = TransducerConfig { max_symbols_per_frame: 3, ..small() };
        let tr = Transducer::new(&mut ps, "tr", 4, 3, &cfg).unwrap();
        let bias = ps.var("tr.joint.out.bias").unwrap();
        bias.set(&Tensor::new(&[-100f32, 100.0, -100.0], &Device::Cpu).unwrap()).unwrap();
        let enc = Array2::from_elem((2, 4), 0.1f32);
        assert_eq!(tr.greedy_decode(&enc).unwrap(), vec![1; 6]);
    }

    #[test]
    fn memorizes_a_tiny_task() {
        // Two "utterances" whose encoder frames spell out their labels.
        let mut ps = ParamStore::new(DType::F32, 7);
        let tr = Transducer::new(&mut ps, "tr", 4, 4, &small()).unwrap();
        let mk = |seq: &[usize]| {
            let mut a = Array2::<f32>::zeros((seq.len(), 4));
            for (t, &k) in seq.iter().enumerate() {
                a[[t, k]] = 1.0;
            }
            a
        };
        let a = mk(&[0, 1, 0, 2, 0]);
        let b = mk(&[0, 3, 0, 0, 0]);
        let enc = Tensor::stack(&[array_to_tensor(&a, DType::F32).unwrap(), array_to_tensor(&b, DType::F32).unwrap()], 0).unwrap();
        let labels = vec![vec![1, 2], vec![3]];
        let mut opt = Adam::new(AdamConfig { lr: 2e-2, warmup_steps: 1, ..Default::default() });
        for _ in 0..300 {
            let loss = tr.loss(&enc, &[5, 5], &labels).unwrap();
            let g = loss.surrogate.backward().unwrap();
            opt.update(&ps, &g, |_| true).unwrap();
        }
        assert_eq!(tr.greedy_decode(&a).unwrap(), vec![1, 2]);
        assert_eq!(tr.greedy_decode(&b).unwrap(), vec![3]);
    }
}
