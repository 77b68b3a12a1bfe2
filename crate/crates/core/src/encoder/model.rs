use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, EncoderError, TokenSequence};
use crate::numkit::{Tape, Tensor, Var};
use crate::scalar::{count, lit, Scalar};

const PER_LAYER: usize = 16;

// Offsets of a layer's tensors inside its block of `PER_LAYER` entries.
const LN1_GAIN: usize = 0;
const LN1_BIAS: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_GAIN: usize = 10;
const LN2_BIAS: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// Named parameter tensors in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Canonical `(name, shape)` layout for a configuration.
pub(crate) fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.model_dim, cfg.ff_dim);
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ff.w1"), vec![d, f]),
            (p("ff.b1"), vec![f]),
            (p("ff.w2"), vec![f, d]),
            (p("ff.b2"), vec![d]),
        ]);
    }
    out.push(("final_ln.gain".to_string(), vec![d]));
    out.push(("final_ln.bias".to_string(), vec![d]));
    out
}

/// Last-layer hidden states `[K × model_dim]` and attention `[H × K × K]`.
/// `attention[h][i][j]` is the weight query `i` puts on key `j` in head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub hidden: Tensor<T>,
    pub attention: Tensor<T>,
}

/// Encoder outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    pub hidden: Var,
    pub attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Seeded initialization: matrices and embeddings ~ N(0, 1/model_dim),
    /// layer-norm gains 1, biases 0.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / (config.model_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| EncoderError::Config(e.to_string()))?;
        let entries = layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gain") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    (0..n).map(|_| lit(normal.sample(&mut rng))).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>, EncoderError>>()?;
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    /// Assembles a model from loaded tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_parts(config: EncoderConfig, params: ParamSet<T>) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(EncoderError::Contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(EncoderError::Contract(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        super::tokenize(text, self.config.max_seq_len)
    }

    /// Registers every parameter on `tape`, in canonical order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Forward pass on `tape` using parameters previously registered with [`bind`](Self::bind).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        tokens: &TokenSequence,
    ) -> Result<TapeOutput, EncoderError> {
        let cfg = &self.config;
        if bound.len() != self.params.len() {
            return Err(EncoderError::Contract("parameters not bound to this tape".into()));
        }
        let k = tokens.len();
        if k == 0 || k > cfg.max_seq_len {
            return Err(EncoderError::Contract(format!(
                "sequence length {k} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(EncoderError::Contract(format!("token id {bad} outside vocabulary")));
        }
        let positions: Vec<usize> = (0..k).collect();
        let tok = tape.gather_rows(bound[0], tokens.ids())?;
        let pos = tape.gather_rows(bound[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let (h, dh) = (cfg.num_heads, cfg.head_dim());
        let scale = T::one() / count::<T>(dh).sqrt();
        let mut last_attention = Vec::new();
        for l in 0..cfg.num_layers {
            let p = |i: usize| bound[2 + l * PER_LAYER + i];
            let n1 = tape.layer_norm(x, p(LN1_GAIN), p(LN1_BIAS))?;
            let q = tape.matmul(n1, p(WQ))?;
            let q = tape.add_row(q, p(BQ))?;
            let kk = tape.matmul(n1, p(WK))?;
            let kk = tape.add_row(kk, p(BK))?;
            let v = tape.matmul(n1, p(WV))?;
            let v = tape.add_row(v, p(BV))?;
            let mut heads = Vec::with_capacity(h);
            let mut maps = Vec::with_capacity(h);
            for head in 0..h {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(kk, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_lastdim(scores)?;
                heads.push(tape.matmul(attn, vh)?);
                maps.push(attn);
            }
            let merged = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(merged, p(WO))?;
            let o = tape.add_row(o, p(BO))?;
            x = tape.add(x, o)?;

            let n2 = tape.layer_norm(x, p(LN2_GAIN), p(LN2_BIAS))?;
            let f = tape.matmul(n2, p(W1))?;
            let f = tape.add_row(f, p(B1))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, p(W2))?;
            let f = tape.add_row(f, p(B2))?;
            x = tape.add(x, f)?;
            last_attention = maps;
        }
        let fin = 2 + cfg.num_layers * PER_LAYER;
        let hidden = tape.layer_norm(x, bound[fin], bound[fin + 1])?;
        let attention = tape.stack(&last_attention)?;
        Ok(TapeOutput { hidden, attention })
    }

    /// Inference-only forward pass.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<EncoderOutput<T>, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, tokens)?;
        Ok(EncoderOutput {
            hidden: tape.value(out.hidden).clone(),
            attention: tape.value(out.attention).clone(),
        })
    }

    pub fn encode_text(&self, text: &str) -> Result<EncoderOutput<T>, EncoderError> {
        self.encode(&self.tokenize(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tokenize;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: 258,
            max_seq_len: 12,
            seed: 7,
        }
    }

    #[test]
    fn parameter_count_matches_layout_walk() {
        for cfg in [small(), EncoderConfig::default()] {
            let model = Encoder::<f64>::init(cfg.clone()).unwrap();
            assert_eq!(model.params().scalar_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Encoder::<f64>::init(small()).unwrap();
        let b = Encoder::<f64>::init(small()).unwrap();
        assert_eq!(a, b);
        let c = Encoder::<f64>::init(EncoderConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_config_lists_violations() {
        let cfg = EncoderConfig {
            model_dim: 10,
            num_heads: 3,
            ff_dim: 0,
            ..small()
        };
        let err = Encoder::<f64>::init(cfg).unwrap_err().to_string();
        assert!(err.contains("divisible") && err.contains("ff_dim"), "{err}");
    }

    #[test]
    fn from_parts_rejects_missing_tensors() {
        let model = Encoder::<f64>::init(small()).unwrap();
        let mut entries: Vec<_> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.pop();
        assert!(matches!(
            Encoder::from_parts(small(), ParamSet::new(entries)),
            Err(EncoderError::Contract(_))
        ));
    }

    #[test]
    fn single_token_attention_is_one() {
        let model = Encoder::<f64>::init(small()).unwrap();
        let out = model.encode(&tokenize("", 1)).unwrap();
        assert_eq!(out.attention.shape(), &[2, 1, 1]);
        assert!(out.attention.data().iter().all(|&a| a == 1.0));
        assert_eq!(out.hidden.shape(), &[1, 8]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let model = Encoder::<f64>::init(small()).unwrap();
        let out = model.encode_text("hello there").unwrap();
        let k = out.hidden.shape()[0];
        assert_eq!(out.attention.shape(), &[2, k, k]);
        for r in 0..out.attention.num_rows() {
            let row = out.attention.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = Encoder::<f64>::init(small()).unwrap();
        assert_eq!(model.encode_text("same").unwrap(), model.encode_text("same").unwrap());
    }

    #[test]
    fn f32_model_runs() {
        let model = Encoder::<f32>::init(small()).unwrap();
        let out = model.encode_text("abc").unwrap();
        assert!(out.hidden.is_finite());
    }
}
