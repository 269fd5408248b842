//! Per-city sequence encoder and calendar time embedding.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::dataset::TimeFeatures;
use crate::error::{Error, Result};
use crate::nn::{glorot, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `softmax(Q·Kᵀ / √d_key)` for a single head.
pub fn self_attention_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Tensor<T> {
    assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let logits = q.matmul(&k.transpose()).map(|v| v * scale);
    softmax_rows(&logits)
}

/// Single-head attention output `scores · V`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    self_attention_scores(q, k).matmul(v)
}

/// Sinusoidal position table `[len × width]`.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(len, width, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, d_ffn: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d),
            output: Linear::new(store, rng, &format!("{name}.output"), d, d),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, d_ffn),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d_ffn, d),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, seq_len: usize, heads: usize) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let a = tape.attention(q, k, v, seq_len, heads);
        let a = self.output.forward(tape, a);
        let h = tape.add(x, a);
        let h = self.norm1.forward(tape, h);
        let f = self.ff1.forward(tape, h);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f);
        let h2 = tape.add(h, f);
        self.norm2.forward(tape, h2)
    }
}

/// Input projection, positional encoding, encoder blocks, and mean pooling
/// over time. Every city sequence shares the parameters.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
}

impl SequenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        width: usize,
        heads: usize,
        d_ffn: usize,
        n_blocks: usize,
        seq_len: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("head count {heads} must divide model width {width}")));
        }
        let input = Linear::new(store, rng, &format!("{name}.input"), in_features, width);
        let blocks = (0..n_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("{name}.block{i}"), width, d_ffn))
            .collect();
        Ok(Self {
            input,
            blocks,
            width,
            heads,
            seq_len,
        })
    }

    /// `history`: `[(n_seq·τ_in) × F]` → `[n_seq × width]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, history: Var) -> Var {
        let h = self.sequence_states(tape, history);
        tape.segment_mean(h, self.seq_len)
    }

    /// Per-step states after the last block, before pooling.
    pub fn sequence_states<T: Scalar>(&self, tape: &mut Tape<'_, T>, history: Var) -> Var {
        let rows = tape.value(history).rows();
        assert_eq!(rows % self.seq_len, 0, "history rows must be a multiple of τ_in");
        let n_seq = rows / self.seq_len;
        let x = self.input.forward(tape, history);
        let pe = positional_encoding::<T>(self.seq_len, self.width);
        let mut tiled = Tensor::zeros(rows, self.width);
        for s in 0..n_seq {
            for t in 0..self.seq_len {
                tiled.row_mut(s * self.seq_len + t).copy_from_slice(pe.row(t));
            }
        }
        let pe = tape.constant(tiled);
        let mut h = tape.add(x, pe);
        for block in &self.blocks {
            h = block.forward(tape, h, self.seq_len, self.heads);
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.input.params().to_vec();
        for b in &self.blocks {
            for l in [&b.query, &b.key, &b.value, &b.output, &b.ff1, &b.ff2] {
                out.extend(l.params());
            }
            out.extend(b.norm1.params());
            out.extend(b.norm2.params());
        }
        out
    }
}

/// Learned month, day-of-week, and hour-of-day embeddings concatenated into
/// one time vector.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub month: ParamId,
    pub day_of_week: ParamId,
    pub hour: ParamId,
    pub dims: [usize; 3],
}

impl TimeEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        let mut table = |suffix: &str, rows: usize, cols: usize| {
            store.add(format!("{name}.{suffix}"), ParamGroup::Base, glorot(rng, rows, cols))
        };
        Self {
            month: table("month", TimeFeatures::MONTHS, dims[0]),
            day_of_week: table("day_of_week", TimeFeatures::DAYS, dims[1]),
            hour: table("hour", TimeFeatures::HOURS, dims[2]),
            dims,
        }
    }

    pub fn width(&self) -> usize {
        self.dims.iter().sum()
    }

    /// `[B × width]` for B time stamps.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, times: &[TimeFeatures]) -> Result<Var> {
        for t in times {
            if t.month >= TimeFeatures::MONTHS || t.day_of_week >= TimeFeatures::DAYS || t.hour >= TimeFeatures::HOURS {
                return Err(Error::InvalidArgument(format!("time feature out of range: {t:?}")));
            }
        }
        let m = tape.param(self.month);
        let d = tape.param(self.day_of_week);
        let h = tape.param(self.hour);
        let m = tape.gather_rows(m, times.iter().map(|t| t.month).collect());
        let d = tape.gather_rows(d, times.iter().map(|t| t.day_of_week).collect());
        let h = tape.gather_rows(h, times.iter().map(|t| t.hour).collect());
        Ok(tape.concat_cols(&[m, d, h]))
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.month, self.day_of_week, self.hour]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn single_step_attention_is_one() {
        let q = Tensor::from_vec(1, 3, vec![0.3, -1.0, 2.0]);
        let s = self_attention_scores(&q, &q);
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn zero_query_gives_uniform_rows() {
        let q = Tensor::<f64>::zeros(4, 2);
        let k = Tensor::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let s = self_attention_scores(&q, &k);
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn time_embedding_width_and_range() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = TimeEmbedding::new(&mut store, &mut rng, "time", [4, 4, 4]);
        assert_eq!(emb.width(), 12);
        let mut tape = Tape::with_params(&store);
        let ok = TimeFeatures {
            month: 11,
            day_of_week: 6,
            hour: 23,
        };
        let v = emb.forward(&mut tape, &[ok, ok]).unwrap();
        assert_eq!(tape.value(v).shape(), (2, 12));
        assert_eq!(tape.value(v).row(0), tape.value(v).row(1));
        let bad = TimeFeatures { hour: 24, ..ok };
        assert!(emb.forward(&mut tape, &[bad]).is_err());
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(SequenceEncoder::new(&mut store, &mut rng, "enc", 8, 10, 4, 16, 1, 24).is_err());
    }
}
