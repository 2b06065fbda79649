//! Sequence heads: interchangeable strategies that summarize a `t x d`
//! embedding sequence into one clip-level vector.
//!
//! Each head registers under a stable name; the CLI and config layer select
//! one at runtime through [`HEAD_REGISTRY`].

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Result, Tape, TensorRef};

use super::{glorot_uniform, HeadConfig};

/// The four head variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Lstm,
    Gru,
    Transformer,
    MaxpoolTime,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] =
        [HeadKind::Lstm, HeadKind::Gru, HeadKind::Transformer, HeadKind::MaxpoolTime];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lstm => "lstm",
            HeadKind::Gru => "gru",
            HeadKind::Transformer => "transformer",
            HeadKind::MaxpoolTime => "maxpool",
        }
    }

    pub fn parse(s: &str) -> Option<HeadKind> {
        let lower = s.to_ascii_lowercase();
        HEAD_REGISTRY.iter().find(|(name, _, _)| *name == lower).map(|(_, kind, _)| *kind)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A clip-level summarizer over per-timestep embeddings.
pub trait SequenceHead: Send + Sync {
    fn kind(&self) -> HeadKind;
    fn output_dim(&self) -> usize;
    /// `seq: t x d` -> `1 x output_dim`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: TensorRef) -> Result<TensorRef>;
}

type HeadBuilder =
    fn(&mut ParamStore, &str, usize, &HeadConfig, &mut ChaCha8Rng) -> Box<dyn SequenceHead>;

/// Name -> head constructor table.
pub static HEAD_REGISTRY: &[(&str, HeadKind, HeadBuilder)] = &[
    ("lstm", HeadKind::Lstm, LstmHead::build),
    ("gru", HeadKind::Gru, GruHead::build),
    ("transformer", HeadKind::Transformer, TransformerHead::build),
    ("maxpool", HeadKind::MaxpoolTime, MaxPoolTimeHead::build),
];

pub fn head_names() -> Vec<&'static str> {
    HEAD_REGISTRY.iter().map(|(name, _, _)| *name).collect()
}

pub fn build_head(
    kind: HeadKind,
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    cfg: &HeadConfig,
    rng: &mut ChaCha8Rng,
) -> Box<dyn SequenceHead> {
    let (_, _, builder) = HEAD_REGISTRY.iter().find(|(_, k, _)| *k == kind).unwrap();
    builder(store, prefix, input_dim, cfg, rng)
}

/// LSTM over the sequence; the clip vector is the last hidden state.
/// Gates pack as [i, f, g, o] along the width of the weight matrices.
pub struct LstmHead {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmHead {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Box<dyn SequenceHead> {
        let h = cfg.recurrent_hidden;
        Box::new(Self {
            wx: store.add_param(
                &format!("{prefix}.lstm.wx"),
                vec![input_dim, 4 * h],
                glorot_uniform(rng, input_dim, 4 * h, input_dim * 4 * h),
            ),
            wh: store.add_param(
                &format!("{prefix}.lstm.wh"),
                vec![h, 4 * h],
                glorot_uniform(rng, h, 4 * h, h * 4 * h),
            ),
            bias: store.add_param(&format!("{prefix}.lstm.b"), vec![4 * h], vec![0.0; 4 * h]),
            hidden: h,
        })
    }
}

impl SequenceHead for LstmHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Lstm
    }

    fn output_dim(&self) -> usize {
        self.hidden
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: TensorRef) -> Result<TensorRef> {
        let t_len = tape.shape(seq)[0];
        let h = self.hidden;
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let bias = tape.param(store, self.bias);
        let mut hidden = tape.leaf(vec![1, h], vec![0.0; h])?;
        let mut cell = tape.leaf(vec![1, h], vec![0.0; h])?;
        for t in 0..t_len {
            let xt = tape.slice_rows(seq, t, t + 1)?;
            let gx = tape.linear(xt, wx, bias)?;
            let gh = tape.matmul(hidden, wh)?;
            let gates = tape.add(gx, gh)?;
            let i_raw = tape.slice_cols(gates, 0, h)?;
            let f_raw = tape.slice_cols(gates, h, 2 * h)?;
            let g_raw = tape.slice_cols(gates, 2 * h, 3 * h)?;
            let o_raw = tape.slice_cols(gates, 3 * h, 4 * h)?;
            let i = tape.sigmoid(i_raw)?;
            let f = tape.sigmoid(f_raw)?;
            let g = tape.tanh(g_raw)?;
            let o = tape.sigmoid(o_raw)?;
            let fc = tape.mul(f, cell)?;
            let ig = tape.mul(i, g)?;
            cell = tape.add(fc, ig)?;
            let tc = tape.tanh(cell)?;
            hidden = tape.mul(o, tc)?;
        }
        Ok(hidden)
    }
}

/// GRU over the sequence; the clip vector is the last hidden state.
/// Gates pack as [z, r, candidate]; `h' = (1 - z) h + z tanh(Wx + U(r h) + b)`.
pub struct GruHead {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl GruHead {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Box<dyn SequenceHead> {
        let h = cfg.recurrent_hidden;
        Box::new(Self {
            wx: store.add_param(
                &format!("{prefix}.gru.wx"),
                vec![input_dim, 3 * h],
                glorot_uniform(rng, input_dim, 3 * h, input_dim * 3 * h),
            ),
            wh: store.add_param(
                &format!("{prefix}.gru.wh"),
                vec![h, 3 * h],
                glorot_uniform(rng, h, 3 * h, h * 3 * h),
            ),
            bias: store.add_param(&format!("{prefix}.gru.b"), vec![3 * h], vec![0.0; 3 * h]),
            hidden: h,
        })
    }
}

impl SequenceHead for GruHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Gru
    }

    fn output_dim(&self) -> usize {
        self.hidden
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: TensorRef) -> Result<TensorRef> {
        let t_len = tape.shape(seq)[0];
        let h = self.hidden;
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let bias = tape.param(store, self.bias);
        let wh_zr = tape.slice_cols(wh, 0, 2 * h)?;
        let wh_n = tape.slice_cols(wh, 2 * h, 3 * h)?;
        let mut hidden = tape.leaf(vec![1, h], vec![0.0; h])?;
        for t in 0..t_len {
            let xt = tape.slice_rows(seq, t, t + 1)?;
            let gx = tape.linear(xt, wx, bias)?;
            let gh_zr = tape.matmul(hidden, wh_zr)?;
            let zx = tape.slice_cols(gx, 0, h)?;
            let zh = tape.slice_cols(gh_zr, 0, h)?;
            let z_raw = tape.add(zx, zh)?;
            let z = tape.sigmoid(z_raw)?;
            let rx = tape.slice_cols(gx, h, 2 * h)?;
            let rh = tape.slice_cols(gh_zr, h, 2 * h)?;
            let r_raw = tape.add(rx, rh)?;
            let r = tape.sigmoid(r_raw)?;
            let gated = tape.mul(r, hidden)?;
            let nh = tape.matmul(gated, wh_n)?;
            let nx = tape.slice_cols(gx, 2 * h, 3 * h)?;
            let n_raw = tape.add(nx, nh)?;
            let cand = tape.tanh(n_raw)?;
            // h + z * (cand - h)
            let neg_h = tape.scale(hidden, -1.0)?;
            let delta = tape.add(cand, neg_h)?;
            let step = tape.mul(z, delta)?;
            hidden = tape.add(hidden, step)?;
        }
        Ok(hidden)
    }
}

/// Single post-norm transformer encoder block stack with sinusoidal
/// positional encoding; the clip vector is the global max over timesteps.
pub struct TransformerHead {
    layers: Vec<EncoderBlock>,
    d_model: usize,
    attn_heads: usize,
}

struct EncoderBlock {
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ffn1: (ParamId, ParamId),
    ffn2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

impl TransformerHead {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Box<dyn SequenceHead> {
        Box::new(Self::new(store, prefix, input_dim, cfg, rng))
    }

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(input_dim, cfg.d_model, "transformer d_model must match the embedding dim");
        assert_eq!(cfg.d_model % cfg.attn_heads, 0, "d_model must divide evenly across heads");
        let d = cfg.d_model;
        let ffn = cfg.ffn_hidden;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |part: &str| format!("{prefix}.xf{l}.{part}");
            let affine = |store: &mut ParamStore, rng: &mut ChaCha8Rng, part: &str, di: usize, dout: usize| {
                (
                    store.add_param(
                        &name(&format!("{part}.w")),
                        vec![di, dout],
                        glorot_uniform(rng, di, dout, di * dout),
                    ),
                    store.add_param(&name(&format!("{part}.b")), vec![dout], vec![0.0; dout]),
                )
            };
            let norm = |store: &mut ParamStore, part: &str| {
                (
                    store.add_param(&name(&format!("{part}.gamma")), vec![d], vec![1.0; d]),
                    store.add_param(&name(&format!("{part}.beta")), vec![d], vec![0.0; d]),
                )
            };
            layers.push(EncoderBlock {
                wq: affine(store, rng, "wq", d, d),
                wk: affine(store, rng, "wk", d, d),
                wv: affine(store, rng, "wv", d, d),
                wo: affine(store, rng, "wo", d, d),
                ln1: norm(store, "ln1"),
                ffn1: affine(store, rng, "ffn1", d, ffn),
                ffn2: affine(store, rng, "ffn2", ffn, d),
                ln2: norm(store, "ln2"),
            });
        }
        Self { layers, d_model: d, attn_heads: cfg.attn_heads }
    }

    /// Encoder stack over a sequence that already carries positional
    /// encoding; returns the pre-pool `t x d` outputs.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: TensorRef) -> Result<TensorRef> {
        let mut cur = x;
        for block in &self.layers {
            cur = self.block_forward(tape, store, block, cur)?;
        }
        Ok(cur)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &EncoderBlock,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let d = self.d_model;
        let head_dim = d / self.attn_heads;
        let lease = |tape: &mut Tape, p: (ParamId, ParamId)| {
            (tape.param(store, p.0), tape.param(store, p.1))
        };

        let (wq, bq) = lease(tape, block.wq);
        let (wk, bk) = lease(tape, block.wk);
        let (wv, bv) = lease(tape, block.wv);
        let q = tape.linear(x, wq, bq)?;
        let k = tape.linear(x, wk, bk)?;
        let v = tape.linear(x, wv, bv)?;

        let mut heads = Vec::with_capacity(self.attn_heads);
        for hidx in 0..self.attn_heads {
            let (lo, hi) = (hidx * head_dim, (hidx + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            heads.push(tape.scaled_dot_attention(qh, kh, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let (wo, bo) = lease(tape, block.wo);
        let proj = tape.linear(cat, wo, bo)?;

        let res1 = tape.add(x, proj)?;
        let (g1, b1) = lease(tape, block.ln1);
        let x1 = tape.layer_norm(res1, g1, b1)?;

        let (w1, bf1) = lease(tape, block.ffn1);
        let (w2, bf2) = lease(tape, block.ffn2);
        let f1 = tape.linear(x1, w1, bf1)?;
        let f1a = tape.relu(f1)?;
        let f2 = tape.linear(f1a, w2, bf2)?;

        let res2 = tape.add(x1, f2)?;
        let (g2, b2) = lease(tape, block.ln2);
        tape.layer_norm(res2, g2, b2)
    }
}

impl SequenceHead for TransformerHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Transformer
    }

    fn output_dim(&self) -> usize {
        self.d_model
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: TensorRef) -> Result<TensorRef> {
        let t_len = tape.shape(seq)[0];
        let pe = tape.leaf(vec![t_len, self.d_model], positional_encoding(t_len, self.d_model))?;
        let x = tape.add(seq, pe)?;
        let encoded = self.encode(tape, store, x)?;
        let pooled = tape.max_over_axis(encoded, 0)?;
        tape.reshape(pooled, vec![1, self.d_model])
    }
}

/// Sinusoidal positional encoding, row-major `t x d`.
pub fn positional_encoding(t_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t_len * d];
    for pos in 0..t_len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 * rate).sin();
            pe[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
    }
    pe
}

/// Elementwise maximum over the time axis; no parameters.
pub struct MaxPoolTimeHead {
    dim: usize,
}

impl MaxPoolTimeHead {
    fn build(
        _store: &mut ParamStore,
        _prefix: &str,
        input_dim: usize,
        _cfg: &HeadConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Box<dyn SequenceHead> {
        Box::new(Self { dim: input_dim })
    }
}

impl SequenceHead for MaxPoolTimeHead {
    fn kind(&self) -> HeadKind {
        HeadKind::MaxpoolTime
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, tape: &mut Tape, _store: &ParamStore, seq: TensorRef) -> Result<TensorRef> {
        let pooled = tape.max_over_axis(seq, 0)?;
        tape.reshape(pooled, vec![1, self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> HeadConfig {
        HeadConfig { recurrent_hidden: 8, d_model: 8, ffn_hidden: 8, attn_heads: 4, layers: 1 }
    }

    fn setup(kind: HeadKind, input_dim: usize) -> (ParamStore, Box<dyn SequenceHead>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = build_head(kind, &mut store, "h", input_dim, &tiny_cfg(), &mut rng);
        (store, head)
    }

    fn zero_params(store: &mut ParamStore) {
        let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
        for id in ids {
            store.values_mut(id).fill(0.0);
        }
    }

    #[test]
    fn registry_knows_all_four_heads() {
        assert_eq!(head_names(), vec!["lstm", "gru", "transformer", "maxpool"]);
        for kind in HeadKind::ALL {
            assert_eq!(HeadKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(HeadKind::parse("LSTM"), Some(HeadKind::Lstm));
        assert_eq!(HeadKind::parse("banjo"), None);
    }

    #[test]
    fn lstm_with_zero_weights_outputs_zero() {
        let (mut store, head) = setup(HeadKind::Lstm, 8);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let seq = tape.leaf(vec![5, 8], vec![0.7; 40]).unwrap();
        let out = head.forward(&mut tape, &store, seq).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_equals_one_cell_application() {
        let (store, head) = setup(HeadKind::Lstm, 8);
        let mut tape = Tape::new();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let seq1 = tape.leaf(vec![1, 8], row.clone()).unwrap();
        let out1 = head.forward(&mut tape, &store, seq1).unwrap();
        // Same row fed as the only step of a fresh sequence (same tape, fresh state).
        let mut tape2 = Tape::new();
        let seq2 = tape2.leaf(vec![1, 8], row).unwrap();
        let out2 = head.forward(&mut tape2, &store, seq2).unwrap();
        assert_eq!(tape.values(out1), tape2.values(out2));
    }

    #[test]
    fn gru_with_zero_weights_outputs_zero() {
        let (mut store, head) = setup(HeadKind::Gru, 8);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let seq = tape.leaf(vec![4, 8], vec![1.3; 32]).unwrap();
        let out = head.forward(&mut tape, &store, seq).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_update_gate_forced_shut_ignores_input() {
        let (mut store, head) = setup(HeadKind::Gru, 8);
        // Large negative bias on the z gate drives z to 0, so h never moves.
        let bias = store.find("h.gru.b").unwrap();
        store.values_mut(bias)[..8].fill(-50.0);
        let mut tape = Tape::new();
        let seq = tape.leaf(vec![6, 8], vec![2.0; 48]).unwrap();
        let out = head.forward(&mut tape, &store, seq).unwrap();
        assert!(tape.values(out).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn transformer_permuting_encoded_timesteps_keeps_pooled_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xf = TransformerHead::new(&mut store, "h", 8, &tiny_cfg(), &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|t| (0..8).map(|i| ((t * 8 + i) as f64 * 0.13).sin()).collect()).collect();
        let forward = |order: &[usize]| {
            let mut tape = Tape::new();
            let flat: Vec<f64> = order.iter().flat_map(|&t| rows[t].clone()).collect();
            let x = tape.leaf(vec![4, 8], flat).unwrap();
            let enc = xf.encode(&mut tape, &store, x).unwrap();
            let pooled = tape.max_over_axis(enc, 0).unwrap();
            (tape.values(enc).to_vec(), tape.values(pooled).to_vec())
        };
        let (enc_id, pool_id) = forward(&[0, 1, 2, 3]);
        let (enc_pm, pool_pm) = forward(&[2, 0, 3, 1]);
        // Pre-pool outputs permute with the inputs.
        for (t_new, &t_old) in [2usize, 0, 3, 1].iter().enumerate() {
            for i in 0..8 {
                assert!((enc_pm[t_new * 8 + i] - enc_id[t_old * 8 + i]).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            assert!((pool_id[i] - pool_pm[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_time_takes_elementwise_maximum() {
        let (store, head) = setup(HeadKind::MaxpoolTime, 2);
        let mut tape = Tape::new();
        let seq = tape.leaf(vec![3, 2], vec![1.0, 5.0, 3.0, 2.0, 0.0, 4.0]).unwrap();
        let out = head.forward(&mut tape, &store, seq).unwrap();
        assert_eq!(tape.values(out), &[3.0, 5.0]);
        assert_eq!(tape.shape(out), &[1, 2]);
    }

    #[test]
    fn maxpool_time_single_step_is_identity() {
        let (store, head) = setup(HeadKind::MaxpoolTime, 4);
        let mut tape = Tape::new();
        let seq = tape.leaf(vec![1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = head.forward(&mut tape, &store, seq).unwrap();
        assert_eq!(tape.values(out), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn positional_encoding_first_row_alternates_zero_one() {
        let pe = positional_encoding(3, 6);
        for i in 0..3 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
    }
}
