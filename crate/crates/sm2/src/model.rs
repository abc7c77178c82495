//! Encoder–decoder transformer with switchable encoder directionality, the
//! prefix (streaming) and full-context decode paths, and the confidence head.
//!
//! One `Parameters` value serves every prediction the training objective
//! needs: the full-context distribution p_i, the prefix distribution p_ij for
//! a sampled source prefix x_{≤j}, and the confidence c_ij read off the top
//! decoder state of the prefix pass — there are no duplicated weights.
//!
//! Pre-norm residual blocks with a final layer norm on both stacks; sinusoidal
//! positions; separate source/target embeddings; untied output projection.

use crate::data::BOS;
use crate::tensor::{numel, Scalar, Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const LN_EPS: f64 = 1e-5;
pub const MASK_FILL: f64 = -1e30;
/// Probability floor inside logs; keeps the loss finite when a distribution
/// entry underflows.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Unidirectional,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub encoder_mode: EncoderMode,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 55,
            tgt_vocab: 54,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 128,
            dropout: 0.1,
            encoder_mode: EncoderMode::Bidirectional,
            max_positions: 96,
        }
    }
}

impl ModelConfig {
    /// Non-panicking validity check, for code paths that ingest configs
    /// from disk (checkpoints, TOML) and must fail with an error instead.
    pub fn check(&self) -> Result<(), String> {
        for (v, name) in [
            (self.src_vocab, "src_vocab"),
            (self.tgt_vocab, "tgt_vocab"),
            (self.d_model, "d_model"),
            (self.heads, "heads"),
            (self.enc_layers, "enc_layers"),
            (self.dec_layers, "dec_layers"),
            (self.ffn, "ffn"),
            (self.max_positions, "max_positions"),
        ] {
            if v == 0 {
                return Err(format!("model config: {name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "model config: d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("model config: dropout must be in [0,1)".into());
        }
        Ok(())
    }

    pub fn validate(&self) {
        if let Err(e) = self.check() {
            panic!("{e}");
        }
    }
}

// ── Parameter registry ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Every learnable tensor, in the fixed order checkpoints declare them.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut s = Vec::new();
    let mut p = |name: String, shape: Vec<usize>| s.push(ParamSpec { name, shape });
    p("src_embed".into(), vec![cfg.src_vocab, d]);
    p("tgt_embed".into(), vec![cfg.tgt_vocab, d]);
    for l in 0..cfg.enc_layers {
        for (nm, sh) in layer_block(&format!("enc.{l}"), d, cfg.ffn, false) {
            p(nm, sh);
        }
    }
    p("enc.final_ln.g".into(), vec![d]);
    p("enc.final_ln.b".into(), vec![d]);
    for l in 0..cfg.dec_layers {
        for (nm, sh) in layer_block(&format!("dec.{l}"), d, cfg.ffn, true) {
            p(nm, sh);
        }
    }
    p("dec.final_ln.g".into(), vec![d]);
    p("dec.final_ln.b".into(), vec![d]);
    p("out.w".into(), vec![d, cfg.tgt_vocab]);
    p("out.b".into(), vec![cfg.tgt_vocab]);
    p("conf.w".into(), vec![d, 1]);
    p("conf.b".into(), vec![1]);
    s
}

fn layer_block(prefix: &str, d: usize, ffn: usize, cross: bool) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    let attn = |v: &mut Vec<(String, Vec<usize>)>, nm: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((format!("{prefix}.{nm}.{w}"), vec![d, d]));
        }
    };
    v.push((format!("{prefix}.ln1.g"), vec![d]));
    v.push((format!("{prefix}.ln1.b"), vec![d]));
    attn(&mut v, "self");
    if cross {
        v.push((format!("{prefix}.ln2.g"), vec![d]));
        v.push((format!("{prefix}.ln2.b"), vec![d]));
        attn(&mut v, "cross");
        v.push((format!("{prefix}.ln3.g"), vec![d]));
        v.push((format!("{prefix}.ln3.b"), vec![d]));
    } else {
        v.push((format!("{prefix}.ln2.g"), vec![d]));
        v.push((format!("{prefix}.ln2.b"), vec![d]));
    }
    v.push((format!("{prefix}.ffn.w1"), vec![d, ffn]));
    v.push((format!("{prefix}.ffn.b1"), vec![ffn]));
    v.push((format!("{prefix}.ffn.w2"), vec![ffn, d]));
    v.push((format!("{prefix}.ffn.b2"), vec![d]));
    v
}

#[derive(Debug, Clone)]
pub struct Parameters<S: Scalar> {
    pub cfg: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub bufs: Vec<Vec<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Parameters<S> {
    /// Deterministic init: Xavier-uniform matrices, ones/zeros for norms and
    /// biases, and an exactly-zero confidence head (fresh head ⇒ c ≡ 0.5).
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate();
        let specs = param_specs(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bufs = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n = numel(&spec.shape);
            let buf: Vec<S> = if spec.name.starts_with("conf.")
                || spec.name.ends_with(".b")
                || spec.name.ends_with(".b1")
                || spec.name.ends_with(".b2")
            {
                vec![S::zero(); n]
            } else if spec.name.ends_with(".g") {
                vec![S::one(); n]
            } else {
                let (fi, fo) = (spec.shape[0] as f64, spec.shape[1] as f64);
                let a = (6.0 / (fi + fo)).sqrt();
                (0..n)
                    .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * a))
                    .collect()
            };
            bufs.push(buf);
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Parameters {
            cfg,
            specs,
            bufs,
            index,
        }
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn buf(&self, name: &str) -> &[S] {
        &self.bufs[self.idx(name)]
    }

    pub fn buf_mut(&mut self, name: &str) -> &mut Vec<S> {
        let i = self.idx(name);
        &mut self.bufs[i]
    }

    pub fn num_params(&self) -> usize {
        self.bufs.iter().map(|b| b.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bufs.iter().map(|b| b.len()).collect()
    }

    pub fn assert_finite(&self) {
        for (spec, buf) in self.specs.iter().zip(&self.bufs) {
            assert!(
                buf.iter().all(|x| x.is_finite()),
                "parameter `{}` went non-finite",
                spec.name
            );
        }
    }
}

impl Parameters<f32> {
    pub fn to_f64(&self) -> Parameters<f64> {
        Parameters {
            cfg: self.cfg.clone(),
            specs: self.specs.clone(),
            bufs: self
                .bufs
                .iter()
                .map(|b| b.iter().map(|&x| x as f64).collect())
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter leaves materialized on a tape, in spec order.
pub struct TapeBinding {
    pub ids: Vec<TensorId>,
}

pub fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Parameters<S>,
    trainable: bool,
) -> TapeBinding {
    let ids = params
        .specs
        .iter()
        .zip(&params.bufs)
        .map(|(spec, buf)| tape.leaf(buf.clone(), spec.shape.clone(), trainable))
        .collect();
    TapeBinding { ids }
}

// ── Positional encodings ─────────────────────────────────────────────

/// Sinusoidal table rows 0..t−1, row-major [t, d].
pub fn sinusoid<S: Scalar>(t: usize, d: usize) -> Vec<S> {
    let mut v = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            v.push(S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    v
}

// ── Forward graphs ───────────────────────────────────────────────────

pub struct DualOut {
    /// N×V rows of p(y_i | x_{≤j}, y_{<i}).
    pub p_simt: TensorId,
    /// N×V rows of p(y_i | x, y_{<i}).
    pub p_omt: TensorId,
    /// N confidences c_ij, in (0,1).
    pub conf: TensorId,
    /// Top decoder states of the prefix pass (post final norm), N×d.
    pub hidden_simt: TensorId,
}

pub struct Forward<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    params: &'a Parameters<S>,
    bind: &'a TapeBinding,
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    /// Evaluation-mode forward: dropout off, nothing tracked beyond what the
    /// binding requests.
    pub fn eval(tape: &'a mut Tape<S>, params: &'a Parameters<S>, bind: &'a TapeBinding) -> Self {
        Forward {
            tape,
            params,
            bind,
            train: false,
            rng: None,
        }
    }

    /// Training-mode forward: dropout masks drawn from `rng`.
    pub fn train(
        tape: &'a mut Tape<S>,
        params: &'a Parameters<S>,
        bind: &'a TapeBinding,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Forward {
            tape,
            params,
            bind,
            train: true,
            rng: Some(rng),
        }
    }

    fn p(&self, name: &str) -> TensorId {
        self.bind.ids[self.params.idx(name)]
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.cfg
    }

    fn maybe_dropout(&mut self, x: TensorId) -> TensorId {
        let p = self.cfg().dropout;
        if !self.train || p == 0.0 {
            return x;
        }
        let n = numel(self.tape.shape(x));
        let rng = self.rng.as_mut().expect("training forward needs an rng");
        let keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(1.0 - p)).collect();
        self.tape.dropout(x, keep, p)
    }

    fn embed(&mut self, table: &str, ids: &[u32]) -> TensorId {
        let d = self.cfg().d_model;
        assert!(
            ids.len() <= self.cfg().max_positions,
            "sequence of {} exceeds max positions {}",
            ids.len(),
            self.cfg().max_positions
        );
        let table = self.p(table);
        let e = self.tape.embed(table, ids);
        let scaled = self.tape.scale(e, S::from_f64((d as f64).sqrt()));
        let pe = self.tape.constant(sinusoid(ids.len(), d), vec![ids.len(), d]);
        let x = self.tape.add(scaled, pe);
        self.maybe_dropout(x)
    }

    fn layer_norm(&mut self, x: TensorId, prefix: &str) -> TensorId {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, S::from_f64(LN_EPS))
    }

    /// Multi-head attention. `mask`, when given, is row-major [Tq × Tk] with
    /// true = blocked.
    fn mha(
        &mut self,
        q_in: TensorId,
        kv_in: TensorId,
        prefix: &str,
        mask: Option<&[bool]>,
    ) -> TensorId {
        let d = self.cfg().d_model;
        let h = self.cfg().heads;
        let dh = d / h;
        let wq = self.p(&format!("{prefix}.wq"));
        let wk = self.p(&format!("{prefix}.wk"));
        let wv = self.p(&format!("{prefix}.wv"));
        let wo = self.p(&format!("{prefix}.wo"));
        let q = self.tape.matmul(q_in, wq);
        let k = self.tape.matmul(kv_in, wk);
        let v = self.tape.matmul(kv_in, wv);
        if let Some(m) = mask {
            debug_assert_eq!(m.len(), self.tape.shape(q)[0] * self.tape.shape(k)[0]);
        }
        let mut heads = Vec::with_capacity(h);
        for hi in 0..h {
            let qh = self.tape.slice_cols(q, hi * dh, dh);
            let kh = self.tape.slice_cols(k, hi * dh, dh);
            let vh = self.tape.slice_cols(v, hi * dh, dh);
            let mut scores = self.tape.matmul_nt(qh, kh);
            scores = self.tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
            if let Some(m) = mask {
                scores = self.tape.masked_fill(scores, m.to_vec(), S::from_f64(MASK_FILL));
            }
            let probs = self.tape.softmax(scores);
            let probs = self.maybe_dropout(probs);
            heads.push(self.tape.matmul(probs, vh));
        }
        let cat = self.tape.concat_cols(&heads);
        self.tape.matmul(cat, wo)
    }

    fn ffn(&mut self, x: TensorId, prefix: &str) -> TensorId {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.relu(h);
        let h = self.tape.matmul(h, w2);
        self.tape.add_row(h, b2)
    }

    /// Encode a source prefix. Unidirectional mode applies a causal mask;
    /// bidirectional attends fully — but only within the provided tokens, so
    /// nothing beyond the prefix can leak in either mode.
    pub fn encode(&mut self, src: &[u32]) -> TensorId {
        assert!(!src.is_empty(), "encode: empty source prefix");
        let t = src.len();
        let mask = match self.cfg().encoder_mode {
            EncoderMode::Unidirectional => Some(causal_mask(t)),
            EncoderMode::Bidirectional => None,
        };
        let mut x = self.embed("src_embed", src);
        for l in 0..self.cfg().enc_layers {
            let pre = format!("enc.{l}");
            let ln1 = self.layer_norm(x, &format!("{pre}.ln1"));
            let attn = self.mha(ln1, ln1, &format!("{pre}.self"), mask.as_deref());
            let attn = self.maybe_dropout(attn);
            x = self.tape.add(x, attn);
            let ln2 = self.layer_norm(x, &format!("{pre}.ln2"));
            let f = self.ffn(ln2, &format!("{pre}.ffn"));
            let f = self.maybe_dropout(f);
            x = self.tape.add(x, f);
        }
        self.layer_norm(x, "enc.final_ln")
    }

    /// Teacher-forced decode over all rows. `cross_mask`, when given, is
    /// row-major [N × Tk] (true = blocked) and restricts which encoder states
    /// each target row may see.
    pub fn decode(
        &mut self,
        enc: TensorId,
        tgt_in: &[u32],
        cross_mask: Option<&[bool]>,
    ) -> TensorId {
        assert!(!tgt_in.is_empty(), "decode: empty target input");
        let n = tgt_in.len();
        let self_mask = causal_mask(n);
        let mut x = self.embed("tgt_embed", tgt_in);
        for l in 0..self.cfg().dec_layers {
            let pre = format!("dec.{l}");
            let ln1 = self.layer_norm(x, &format!("{pre}.ln1"));
            let sa = self.mha(ln1, ln1, &format!("{pre}.self"), Some(&self_mask));
            let sa = self.maybe_dropout(sa);
            x = self.tape.add(x, sa);
            let ln2 = self.layer_norm(x, &format!("{pre}.ln2"));
            let ca = self.mha(ln2, enc, &format!("{pre}.cross"), cross_mask);
            let ca = self.maybe_dropout(ca);
            x = self.tape.add(x, ca);
            let ln3 = self.layer_norm(x, &format!("{pre}.ln3"));
            let f = self.ffn(ln3, &format!("{pre}.ffn"));
            let f = self.maybe_dropout(f);
            x = self.tape.add(x, f);
        }
        self.layer_norm(x, "dec.final_ln")
    }

    pub fn logits(&mut self, hidden: TensorId) -> TensorId {
        let w = self.p("out.w");
        let b = self.p("out.b");
        let l = self.tape.matmul(hidden, w);
        self.tape.add_row(l, b)
    }

    pub fn dists(&mut self, hidden: TensorId) -> TensorId {
        let l = self.logits(hidden);
        self.tape.softmax(l)
    }

    /// c = σ(Wᵀh + b) per row of the prefix-pass hidden states.
    pub fn confidence(&mut self, hidden_simt: TensorId) -> TensorId {
        let n = self.tape.shape(hidden_simt)[0];
        let w = self.p("conf.w");
        let b = self.p("conf.b");
        let z = self.tape.matmul(hidden_simt, w);
        let z = self.tape.add_scalar_tensor(z, b);
        let c = self.tape.sigmoid(z);
        self.tape.reshape(c, vec![n])
    }

    /// Teacher-forced decoder input: BOS followed by all but the last target
    /// token (the final token is EOS, which is only ever predicted).
    pub fn teacher_input(tgt: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(tgt.len());
        v.push(BOS);
        v.extend_from_slice(&tgt[..tgt.len() - 1]);
        v
    }

    /// Both predictions of the dual objective through one parameter set:
    /// prefix pass (p_ij + confidence) and full-context pass (p_i).
    pub fn dual(&mut self, src: &[u32], tgt: &[u32], j: usize) -> DualOut {
        assert!(
            (1..=src.len()).contains(&j),
            "dual: prefix length {j} outside 1..={}",
            src.len()
        );
        assert!(tgt.len() >= 2, "dual: target needs content + EOS");
        let tgt_in = Self::teacher_input(tgt);

        let enc_j = self.encode(&src[..j]);
        let hid_s = self.decode(enc_j, &tgt_in, None);
        let p_simt = self.dists(hid_s);
        let conf = self.confidence(hid_s);

        let enc_f = self.encode(src);
        let hid_o = self.decode(enc_f, &tgt_in, None);
        let p_omt = self.dists(hid_o);

        DualOut {
            p_simt,
            p_omt,
            conf,
            hidden_simt: hid_s,
        }
    }
}

/// Row-major [t × t] causal mask, true above the diagonal (blocked).
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for k in (i + 1)..t {
            m[i * t + k] = true;
        }
    }
    m
}

/// Cross-attention mask for a fixed read schedule: row i may see source
/// positions < reads[i]. Row-major [N × m], true = blocked.
pub fn cross_mask_from_reads(reads: &[u32], m: usize) -> Vec<bool> {
    let mut mask = vec![false; reads.len() * m];
    for (i, &g) in reads.iter().enumerate() {
        assert!(g >= 1 && g as usize <= m, "reads out of range: {g} vs m={m}");
        for p in (g as usize)..m {
            mask[i * m + p] = true;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{finite_diff, rel_err};

    fn tiny_cfg(mode: EncoderMode) -> ModelConfig {
        ModelConfig {
            src_vocab: 13,
            tgt_vocab: 12,
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn: 24,
            dropout: 0.0,
            encoder_mode: mode,
            max_positions: 32,
        }
    }

    fn sample_pair() -> (Vec<u32>, Vec<u32>) {
        (vec![5, 6, 7, 8, 4, 9, 4], vec![6, 5, 4, 7, 3])
    }

    fn run_dual_f32(
        params: &Parameters<f32>,
        src: &[u32],
        tgt: &[u32],
        j: usize,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, params, false);
        let mut fwd = Forward::eval(&mut tape, params, &bind);
        let out = fwd.dual(src, tgt, j);
        (
            tape.value(out.p_simt).to_vec(),
            tape.value(out.p_omt).to_vec(),
            tape.value(out.conf).to_vec(),
        )
    }

    #[test]
    fn dual_output_shapes_and_simplex() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Bidirectional), 3);
        let (src, tgt) = sample_pair();
        let (ps, po, c) = run_dual_f32(&params, &src, &tgt, 3);
        let v = params.cfg.tgt_vocab;
        assert_eq!(ps.len(), tgt.len() * v);
        assert_eq!(po.len(), tgt.len() * v);
        assert_eq!(c.len(), tgt.len());
        for row in ps.chunks(v).chain(po.chunks(v)) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert!(c.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn fresh_confidence_head_outputs_half() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Unidirectional), 9);
        let (src, tgt) = sample_pair();
        let (_, _, c) = run_dual_f32(&params, &src, &tgt, 2);
        assert!(c.iter().all(|&x| x == 0.5), "{c:?}");
    }

    #[test]
    fn full_prefix_collapses_dual_to_omt() {
        for mode in [EncoderMode::Unidirectional, EncoderMode::Bidirectional] {
            let params = Parameters::<f32>::init(tiny_cfg(mode), 5);
            let (src, tgt) = sample_pair();
            let (ps, po, _) = run_dual_f32(&params, &src, &tgt, src.len());
            assert_eq!(ps, po, "j = M must collapse to the full-context pass");
        }
    }

    #[test]
    fn unidirectional_prefix_states_bit_identical() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Unidirectional), 7);
        let (src, _) = sample_pair();
        let d = params.cfg.d_model;
        let full = {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &params, false);
            let mut fwd = Forward::eval(&mut tape, &params, &bind);
            let e = fwd.encode(&src);
            tape.value(e).to_vec()
        };
        for t in 1..=src.len() {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &params, false);
            let mut fwd = Forward::eval(&mut tape, &params, &bind);
            let e = fwd.encode(&src[..t]);
            assert_eq!(tape.value(e), &full[..t * d], "prefix {t}");
        }
    }

    #[test]
    fn bidirectional_prefix_states_differ() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Bidirectional), 7);
        let (src, _) = sample_pair();
        let d = params.cfg.d_model;
        let one = {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &params, false);
            let mut fwd = Forward::eval(&mut tape, &params, &bind);
            let e = fwd.encode(&src[..1]);
            tape.value(e).to_vec()
        };
        let two = {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &params, false);
            let mut fwd = Forward::eval(&mut tape, &params, &bind);
            let e = fwd.encode(&src[..2]);
            tape.value(e).to_vec()
        };
        assert_ne!(one[..d], two[..d], "position 1 must see position 2");
    }

    #[test]
    fn prefix_pass_invariant_to_suffix() {
        use rand::RngCore;
        for mode in [EncoderMode::Unidirectional, EncoderMode::Bidirectional] {
            let params = Parameters::<f32>::init(tiny_cfg(mode), 21);
            let (src, tgt) = sample_pair();
            let j = 3usize;
            let (ps, _, c) = run_dual_f32(&params, &src, &tgt, j);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..5 {
                let mut mutated = src.clone();
                for x in mutated[j..].iter_mut() {
                    *x = 4 + (rng.next_u32() % (params.cfg.src_vocab as u32 - 4));
                }
                let (ps2, _, c2) = run_dual_f32(&params, &mutated, &tgt, j);
                assert_eq!(ps, ps2, "p_simt leaked future source ({mode:?})");
                assert_eq!(c, c2, "confidence leaked future source ({mode:?})");
            }
        }
    }

    #[test]
    fn parameters_are_shared_between_passes() {
        let mut params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Bidirectional), 2);
        let (src, tgt) = sample_pair();
        let (ps, po, _) = run_dual_f32(&params, &src, &tgt, 2);
        params.buf_mut("enc.0.self.wq")[5] += 0.25;
        let (ps2, po2, _) = run_dual_f32(&params, &src, &tgt, 2);
        assert_ne!(ps, ps2, "prefix pass ignores the shared weight");
        assert_ne!(po, po2, "full pass ignores the shared weight");
    }

    #[test]
    fn decode_deterministic_without_dropout() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Bidirectional), 4);
        let (src, tgt) = sample_pair();
        let a = run_dual_f32(&params, &src, &tgt, 4);
        let b = run_dual_f32(&params, &src, &tgt, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_draws_change_training_outputs() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..tiny_cfg(EncoderMode::Bidirectional)
        };
        let params = Parameters::<f32>::init(cfg, 4);
        let (src, tgt) = sample_pair();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &params, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fwd = Forward::train(&mut tape, &params, &bind, &mut rng);
            let out = fwd.dual(&src, &tgt, 3);
            tape.value(out.p_simt).to_vec()
        };
        assert_eq!(run(1), run(1), "same dropout seed must reproduce");
        assert_ne!(run(1), run(2), "different dropout masks must differ");
    }

    #[test]
    fn confidence_grad_wrt_bias_is_c_times_one_minus_c() {
        // loss = Σ c_i ⇒ ∂loss/∂b = Σ c_i (1 − c_i).
        let params64 = Parameters::<f32>::init(tiny_cfg(EncoderMode::Unidirectional), 31).to_f64();
        let (src, tgt) = sample_pair();

        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &params64, true);
        let mut fwd = Forward::eval(&mut tape, &params64, &bind);
        let out = fwd.dual(&src, &tgt, 3);
        let loss = tape.sum_all(out.conf);
        let conf = tape.value(out.conf).to_vec();
        tape.backward(loss);
        let gb = tape.grad(bind.ids[params64.idx("conf.b")]).unwrap()[0];
        let want: f64 = conf.iter().map(|&c| c * (1.0 - c)).sum();
        assert!(rel_err(gb, want) < 1e-12, "autodiff {gb} vs closed form {want}");

        // Cross-check with the finite-difference oracle.
        let f = |b: &[f64]| {
            let mut p = params64.clone();
            p.buf_mut("conf.b")[0] = b[0];
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &p, false);
            let mut fwd = Forward::eval(&mut tape, &p, &bind);
            let out = fwd.dual(&src, &tgt, 3);
            let l = tape.sum_all(out.conf);
            tape.value(l)[0]
        };
        let fd = finite_diff(f, &[params64.buf("conf.b")[0]], 1e-4).unwrap()[0];
        assert!(rel_err(gb, fd) < 1e-8, "autodiff {gb} vs fd {fd}");
    }

    /// End-to-end gradient check of a full dual-loss graph on a tiny model,
    /// double precision, sampled coordinates across every parameter tensor.
    #[test]
    fn model_gradients_match_finite_differences() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Unidirectional), 77).to_f64();
        let (src, tgt) = sample_pair();
        let j = 3usize;
        let y: Vec<u32> = tgt.clone();

        let loss_of = |p: &Parameters<f64>| -> f64 {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, p, false);
            let mut fwd = Forward::eval(&mut tape, p, &bind);
            let out = fwd.dual(&src, &y, j);
            let gathered_s = tape.row_gather(out.p_simt, &y);
            let gathered_o = tape.row_gather(out.p_omt, &y);
            let ls = tape.log_clamped(gathered_s, PROB_FLOOR);
            let lo = tape.log_clamped(gathered_o, PROB_FLOOR);
            let ls = tape.sum_all(ls);
            let lo = tape.sum_all(lo);
            let lc = tape.sum_all(out.conf);
            let mut acc = tape.add(ls, lo);
            acc = tape.add(acc, lc);
            let neg = tape.scale(acc, -1.0);
            tape.value(neg)[0]
        };

        // Autodiff gradients.
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &params, true);
        let mut fwd = Forward::eval(&mut tape, &params, &bind);
        let out = fwd.dual(&src, &y, j);
        let gathered_s = tape.row_gather(out.p_simt, &y);
        let gathered_o = tape.row_gather(out.p_omt, &y);
        let ls = tape.log_clamped(gathered_s, PROB_FLOOR);
        let lo = tape.log_clamped(gathered_o, PROB_FLOOR);
        let ls = tape.sum_all(ls);
        let lo = tape.sum_all(lo);
        let lc = tape.sum_all(out.conf);
        let mut acc = tape.add(ls, lo);
        acc = tape.add(acc, lc);
        let loss = tape.scale(acc, -1.0);
        tape.backward(loss);

        let mut checked = 0usize;
        for (pi, spec) in params.specs.iter().enumerate() {
            let g = tape.grad(bind.ids[pi]).unwrap();
            let n = g.len();
            // A few coordinates per tensor keeps the test fast but exhaustive
            // across parameter kinds.
            for ci in [0usize, n / 2, n.saturating_sub(1)] {
                let mut loc = params.clone();
                let base = loc.bufs[pi][ci];
                let eps = 1e-5;
                loc.bufs[pi][ci] = base + eps;
                let hi = loss_of(&loc);
                loc.bufs[pi][ci] = base - eps;
                let low = loss_of(&loc);
                let fd = (hi - low) / (2.0 * eps);
                let ad = g[ci];
                let ok = rel_err(ad, fd) < 1e-6 || (ad.abs() < 1e-9 && fd.abs() < 1e-9);
                assert!(ok, "{}[{ci}]: autodiff {ad} vs fd {fd}", spec.name);
                checked += 1;
            }
        }
        assert!(checked > 60, "checked only {checked} coordinates");
    }

    #[test]
    fn cross_mask_from_reads_shapes() {
        let m = cross_mask_from_reads(&[1, 3, 3], 4);
        // Row 0 sees only position 0; rows 1-2 see positions 0..3.
        assert_eq!(
            m,
            vec![
                false, true, true, true, //
                false, false, false, true, //
                false, false, false, true
            ]
        );
    }

    #[test]
    #[should_panic(expected = "empty source prefix")]
    fn encode_empty_panics() {
        let params = Parameters::<f32>::init(tiny_cfg(EncoderMode::Unidirectional), 1);
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &params, false);
        let mut fwd = Forward::eval(&mut tape, &params, &bind);
        let _ = fwd.encode(&[]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn bad_config_rejected() {
        let cfg = ModelConfig {
            d_model: 30,
            heads: 4,
            ..ModelConfig::default()
        };
        let _ = Parameters::<f32>::init(cfg, 0);
    }
}
