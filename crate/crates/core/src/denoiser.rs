//! The trainable masked denoiser: a small bidirectional token network.
//!
//! Layout per sequence (N positions, hidden width H):
//!
//! ```text
//! h  = tok_emb[x] + pos_emb + cond_emb[c] + time_feats(progress) · time_w
//! for each layer:
//!     ctx = mean_i(h_i) · w_ctx
//!     h   = h + tanh(h · w_in + ctx + b) · w_out
//! logits = h · out_w + out_b
//! ```
//!
//! Cross-position mixing only goes through the row mean, so the network is
//! equivariant under joint permutations of positions and position embeddings.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::numerics::{RngState, Tape, Tensor, Var};
use crate::params::ParamStore;

/// Token id reserved for the absorbing mask state. Real tokens are `1..=V`.
pub const MASK: u16 = 0;

/// Temperatures below this sample greedily; log-probs are evaluated at it.
pub const MIN_TEMPERATURE: f64 = 1e-3;

/// Number of fixed features used to encode the timestep.
pub const TIME_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u16>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn all_masked(len: usize, vocab_size: usize) -> Self {
        Self {
            tokens: vec![MASK; len],
            vocab_size,
        }
    }

    pub fn new(tokens: Vec<u16>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize > vocab_size) {
            return Err(invalid(format!(
                "token {bad} outside vocabulary 1..={vocab_size}"
            )));
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, i: usize) -> u16 {
        self.tokens[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == MASK
    }

    pub fn set(&mut self, i: usize, token: u16) {
        debug_assert!(token as usize <= self.vocab_size);
        self.tokens[i] = token;
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == MASK).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.mask_count() == 0
    }
}

/// Conditioning label; `Null` selects the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Condition {
    Class(usize),
    Null,
}

impl From<Option<usize>> for Condition {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Condition::Null, Condition::Class)
    }
}

impl From<Condition> for Option<usize> {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Class(k) => Some(k),
            Condition::Null => None,
        }
    }
}

/// Position of a denoising step within a horizon of `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestep {
    pub t: usize,
    pub total: usize,
}

impl Timestep {
    pub fn new(t: usize, total: usize) -> Result<Self> {
        if t >= total {
            return Err(invalid(format!("step {t} outside horizon {total}")));
        }
        Ok(Self { t, total })
    }

    pub fn progress(&self) -> f64 {
        self.t as f64 / self.total as f64
    }

    pub fn is_final(&self) -> bool {
        self.t + 1 == self.total
    }
}

/// Fixed encoding of a progress value in `[0, 1]`.
pub fn time_features(progress: f64) -> Tensor {
    let p = progress;
    let mut f = Vec::with_capacity(TIME_FEATURES);
    f.push(p);
    f.push(p * p);
    for k in 1..=3 {
        let a = PI * k as f64 * p;
        f.push(a.sin());
        f.push(a.cos());
    }
    Tensor::new(vec![1, TIME_FEATURES], f).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            seq_len: 16,
            num_classes: 8,
            hidden: 64,
            layers: 2,
        }
    }
}

/// Fixed indices into the parameter store.
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const COND_EMB: usize = 2;
const TIME_W: usize = 3;
const FIRST_LAYER: usize = 4;
const PER_LAYER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

/// Outputs of one forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N, V]` logits; column `j` scores token `j + 1`.
    pub logits: Var,
    /// `[N, H]` final-layer hidden states.
    pub features: Var,
}

impl Denoiser {
    /// All-zero parameters: a uniform predictor.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let (v, n, c, h) = (
            config.vocab_size,
            config.seq_len,
            config.num_classes,
            config.hidden,
        );
        let mut p = ParamStore::new();
        p.push("tok_emb", Tensor::zeros(&[v + 1, h]));
        p.push("pos_emb", Tensor::zeros(&[n, h]));
        p.push("cond_emb", Tensor::zeros(&[c + 1, h]));
        p.push("time_w", Tensor::zeros(&[TIME_FEATURES, h]));
        for l in 0..config.layers {
            p.push(format!("layer{l}.w_in"), Tensor::zeros(&[h, h]));
            p.push(format!("layer{l}.w_ctx"), Tensor::zeros(&[h, h]));
            p.push(format!("layer{l}.bias"), Tensor::zeros(&[h]));
            p.push(format!("layer{l}.w_out"), Tensor::zeros(&[h, h]));
        }
        p.push("out_w", Tensor::zeros(&[h, v]));
        p.push("out_b", Tensor::zeros(&[v]));
        Self { config, params: p }
    }

    pub fn init(config: DenoiserConfig, rng: &mut RngState) -> Self {
        let mut d = Self::zeros(config);
        let h = config.hidden as f64;
        let fan = 1.0 / h.sqrt();
        let names: Vec<String> = d.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let scale = if name.ends_with("bias") || name == "out_b" {
                0.0
            } else if name.ends_with("emb") {
                0.5
            } else if name == "time_w" {
                0.5 / (TIME_FEATURES as f64).sqrt()
            } else if name.ends_with("w_out") {
                0.5 * fan
            } else {
                fan
            };
            for v in d.params.tensors_mut()[i].data_mut() {
                *v = scale * rng.normal();
            }
        }
        d
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn check_inputs(&self, seq: &TokenSequence, cond: Condition) -> Result<()> {
        if seq.len() != self.config.seq_len {
            return Err(invalid(format!(
                "sequence length {} but the denoiser expects {}",
                seq.len(),
                self.config.seq_len
            )));
        }
        if seq.vocab_size() != self.config.vocab_size {
            return Err(invalid("vocabulary size mismatch"));
        }
        if let Some(&bad) = seq
            .tokens()
            .iter()
            .find(|&&t| t as usize > self.config.vocab_size)
        {
            return Err(invalid(format!("invalid token index {bad}")));
        }
        if let Condition::Class(k) = cond {
            if k >= self.config.num_classes {
                return Err(invalid(format!(
                    "class {k} outside 0..{}",
                    self.config.num_classes
                )));
            }
        }
        Ok(())
    }

    fn cond_index(&self, cond: Condition) -> usize {
        match cond {
            Condition::Class(k) => k,
            Condition::Null => self.config.num_classes,
        }
    }

    /// Record one forward pass at an arbitrary progress value in `[0, 1]`.
    pub fn forward_at(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        seq: &TokenSequence,
        cond: Condition,
        progress: f64,
    ) -> Result<ForwardVars> {
        self.check_inputs(seq, cond)?;
        let idx: Vec<usize> = seq.tokens().iter().map(|&t| t as usize).collect();
        let x = tape.gather_rows(bound[TOK_EMB], &idx)?;
        let mut h = tape.add(x, bound[POS_EMB])?;
        let c = tape.gather_rows(bound[COND_EMB], &[self.cond_index(cond)])?;
        h = tape.add_row(h, c)?;
        let tf = tape.constant(time_features(progress));
        let te = tape.matmul(tf, bound[TIME_W])?;
        h = tape.add_row(h, te)?;
        for l in 0..self.config.layers {
            let base = FIRST_LAYER + l * PER_LAYER;
            let pooled = tape.mean_rows(h);
            let ctx = tape.matmul(pooled, bound[base + 1])?;
            let pre = tape.matmul(h, bound[base])?;
            let pre = tape.add_row(pre, ctx)?;
            let pre = tape.add_row(pre, bound[base + 2])?;
            let act = tape.tanh(pre);
            let upd = tape.matmul(act, bound[base + 3])?;
            h = tape.add(h, upd)?;
        }
        let out_base = FIRST_LAYER + self.config.layers * PER_LAYER;
        let logits = tape.matmul(h, bound[out_base])?;
        let logits = tape.add_row(logits, bound[out_base + 1])?;
        Ok(ForwardVars {
            logits,
            features: h,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        seq: &TokenSequence,
        cond: Condition,
        step: Timestep,
    ) -> Result<ForwardVars> {
        self.forward_at(tape, bound, seq, cond, step.progress())
    }

    /// Per-position logits `[N, V]` without recording gradients.
    pub fn forward_logits(
        &self,
        seq: &TokenSequence,
        cond: Condition,
        step: Timestep,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, seq, cond, step)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Guided, temperature-scaled log-probabilities `[N, V]` built on top of
    /// an already recorded conditional forward pass.
    ///
    /// The unconditional branch is only evaluated when `cfg_scale != 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn guided_log_probs(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        cond_logits: Var,
        seq: &TokenSequence,
        step: Timestep,
        cfg_scale: f64,
        tau_s: f64,
    ) -> Result<Var> {
        let guided = if cfg_scale == 1.0 {
            cond_logits
        } else {
            let uncond = self.forward(tape, bound, seq, Condition::Null, step)?;
            tape.guidance(cond_logits, uncond.logits, cfg_scale)?
        };
        let scaled = tape.div_scalar(guided, tau_s.max(MIN_TEMPERATURE));
        Ok(tape.log_softmax(scaled))
    }

    /// Sum of log-probabilities of `committed` tokens under the guided
    /// distribution at `seq_before`, recorded on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn committed_log_prob(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        seq_before: &TokenSequence,
        cond: Condition,
        step: Timestep,
        cfg_scale: f64,
        tau_s: f64,
        committed: &[(usize, u16)],
    ) -> Result<Option<Var>> {
        check_committed(seq_before, committed)?;
        if committed.is_empty() {
            return Ok(None);
        }
        let fwd = self.forward(tape, bound, seq_before, cond, step)?;
        let lp = self.guided_log_probs(tape, bound, fwd.logits, seq_before, step, cfg_scale, tau_s)?;
        let at: Vec<(usize, usize)> = committed
            .iter()
            .map(|&(i, v)| (i, v as usize - 1))
            .collect();
        let picked = tape.pick(lp, &at)?;
        Ok(Some(tape.sum(picked)))
    }

    /// Per-token log-probabilities of `committed` under the guided
    /// distribution; their sum is the step's model log-likelihood.
    pub fn token_log_probs(
        &self,
        seq_before: &TokenSequence,
        cond: Condition,
        step: Timestep,
        cfg_scale: f64,
        tau_s: f64,
        committed: &[(usize, u16)],
    ) -> Result<Vec<f64>> {
        check_committed(seq_before, committed)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bound, seq_before, cond, step)?;
        let lp = self.guided_log_probs(
            &mut tape, &bound, fwd.logits, seq_before, step, cfg_scale, tau_s,
        )?;
        let lp = tape.value(lp);
        Ok(committed
            .iter()
            .map(|&(i, v)| lp.get2(i, v as usize - 1))
            .collect())
    }

    /// Masked-token pretraining objective recorded on `tape`.
    ///
    /// Each example draws a progress `p ~ U[0, 1)`, masks every position
    /// independently with probability `cos(pi/2 * p)` (redrawing until at
    /// least one position is masked) and swaps its condition for `Null` with
    /// probability `p_drop`. Returns the mean negative log-likelihood of the
    /// true tokens over all masked positions in the batch.
    pub fn masked_pretrain_loss(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &[(TokenSequence, Condition)],
        p_drop: f64,
        rng: &mut RngState,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("pretraining batch is empty"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        let mut total_masked = 0usize;
        for (full, cond) in batch {
            if !full.is_complete() {
                return Err(invalid("pretraining sequences must be fully committed"));
            }
            let progress = rng.uniform();
            let rate = (0.5 * PI * progress).cos();
            let masked = loop {
                let m: Vec<usize> = (0..full.len()).filter(|_| rng.bernoulli(rate)).collect();
                if !m.is_empty() {
                    break m;
                }
            };
            let cond = if rng.bernoulli(p_drop) {
                Condition::Null
            } else {
                *cond
            };
            let mut input = full.clone();
            for &i in &masked {
                input.set(i, MASK);
            }
            let fwd = self.forward_at(tape, bound, &input, cond, progress)?;
            let lp = tape.log_softmax(fwd.logits);
            let at: Vec<(usize, usize)> = masked
                .iter()
                .map(|&i| (i, full.get(i) as usize - 1))
                .collect();
            let picked = tape.pick(lp, &at)?;
            terms.push(tape.sum(picked));
            total_masked += masked.len();
        }
        let total = tape.add_all(&terms)?;
        Ok(tape.scale(total, -1.0 / total_masked as f64))
    }
}

fn check_committed(seq_before: &TokenSequence, committed: &[(usize, u16)]) -> Result<()> {
    for &(i, v) in committed {
        if i >= seq_before.len() || !seq_before.is_masked(i) {
            return Err(contract(format!(
                "committed position {i} was not masked before the step"
            )));
        }
        if v == MASK || v as usize > seq_before.vocab_size() {
            return Err(contract(format!("committed token {v} is not a vocabulary token")));
        }
    }
    Ok(())
}

/// `uncond + s * (cond - uncond)`.
pub fn apply_cfg(cond_logits: &Tensor, uncond_logits: &Tensor, s: f64) -> Result<Tensor> {
    if !cond_logits.same_shape(uncond_logits) {
        return Err(invalid(format!(
            "apply_cfg: shapes {:?} and {:?} differ",
            cond_logits.shape(),
            uncond_logits.shape()
        )));
    }
    Ok(crate::numerics::tape::guidance_values(cond_logits, uncond_logits, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_small() -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: 6,
            seq_len: 5,
            num_classes: 3,
            hidden: 4,
            layers: 2,
        }
    }

    fn some_seq(cfg: &DenoiserConfig, rng: &mut RngState) -> TokenSequence {
        let toks = (0..cfg.seq_len)
            .map(|_| rng.below(cfg.vocab_size + 1) as u16)
            .collect();
        TokenSequence::new(toks, cfg.vocab_size).unwrap()
    }

    #[test]
    fn default_output_shape() {
        let cfg = DenoiserConfig::default();
        let d = Denoiser::init(cfg, &mut RngState::new(1));
        assert!(d.num_params() < 100_000);
        let seq = TokenSequence::all_masked(16, 16);
        let logits = d
            .forward_logits(&seq, Condition::Class(3), Timestep::new(0, 16).unwrap())
            .unwrap();
        assert_eq!(logits.shape(), &[16, 16]);
        assert!(logits.is_finite());
    }

    #[test]
    fn zero_network_is_uniform() {
        let d = Denoiser::zeros(DenoiserConfig::default());
        let mut seq = TokenSequence::all_masked(16, 16);
        seq.set(3, 7);
        let step = Timestep::new(2, 8).unwrap();
        let logits = d.forward_logits(&seq, Condition::Class(1), step).unwrap();
        for r in 1..16 {
            assert_eq!(logits.row(r), logits.row(0));
        }
        let lp = d
            .token_log_probs(&seq, Condition::Class(1), step, 9.0, 1.0, &[(0, 5), (15, 16)])
            .unwrap();
        for v in lp {
            assert!((v + 16f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let d = Denoiser::zeros(cfg_small());
        let step = Timestep::new(0, 4).unwrap();
        let mut seq = TokenSequence::all_masked(5, 6);
        seq.tokens[2] = 9;
        assert!(d.forward_logits(&seq, Condition::Null, step).is_err());
        let seq = TokenSequence::all_masked(5, 6);
        assert!(d.forward_logits(&seq, Condition::Class(3), step).is_err());
        assert!(TokenSequence::new(vec![1, 7], 6).is_err());
        assert!(Timestep::new(4, 4).is_err());
    }

    #[test]
    fn half_probability_token() {
        let mut d = Denoiser::zeros(DenoiserConfig::default());
        let ob = d.params.names().iter().position(|n| n == "out_b").unwrap();
        d.params.tensors_mut()[ob].data_mut()[0] = 15f64.ln();
        let seq = TokenSequence::all_masked(16, 16);
        let lp = d
            .token_log_probs(&seq, Condition::Class(0), Timestep::new(0, 4).unwrap(), 1.0, 1.0, &[(4, 1)])
            .unwrap();
        assert!((lp[0] + 0.5f64.ln().abs()).abs() < 1e-12, "{}", lp[0]);
    }

    #[test]
    fn committed_must_have_been_masked() {
        let d = Denoiser::zeros(cfg_small());
        let mut seq = TokenSequence::all_masked(5, 6);
        seq.set(1, 2);
        let step = Timestep::new(0, 3).unwrap();
        let err = d
            .token_log_probs(&seq, Condition::Class(0), step, 1.0, 1.0, &[(1, 3)])
            .unwrap_err();
        assert!(matches!(err, crate::Error::ContractViolation(_)));
    }

    #[test]
    fn guided_distribution_normalizes() {
        let cfg = DenoiserConfig::default();
        let d = Denoiser::init(cfg, &mut RngState::new(5));
        let mut rng = RngState::new(6);
        let mut seq = TokenSequence::all_masked(16, 16);
        for i in 0..6 {
            seq.set(i * 2, 1 + rng.below(16) as u16);
        }
        let step = Timestep::new(3, 10).unwrap();
        for (s, tau) in [(9.0, 1.0), (1.0, 0.3), (2.5, 4.0)] {
            let all: Vec<(usize, u16)> = (1..=16).map(|v| (1, v)).collect();
            let lp = d
                .token_log_probs(&seq, Condition::Class(2), step, s, tau, &all)
                .unwrap();
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = cfg_small();
        let mut rng = RngState::new(9);
        let d = Denoiser::init(cfg, &mut rng);
        let seq = some_seq(&cfg, &mut rng);
        let step = Timestep::new(1, 4).unwrap();
        let base = d.forward_logits(&seq, Condition::Class(2), step).unwrap();

        let (i, j) = (0, 3);
        let mut swapped = d.clone();
        let pos = &mut swapped.params.tensors_mut()[POS_EMB];
        let (ri, rj) = (pos.row(i).to_vec(), pos.row(j).to_vec());
        pos.row_mut(i).copy_from_slice(&rj);
        pos.row_mut(j).copy_from_slice(&ri);
        let mut seq2 = seq.clone();
        seq2.tokens.swap(i, j);
        let out = swapped.forward_logits(&seq2, Condition::Class(2), step).unwrap();
        for r in 0..cfg.seq_len {
            let src = if r == i { j } else if r == j { i } else { r };
            for c in 0..cfg.vocab_size {
                assert!((out.get2(r, c) - base.get2(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_pretrain_loss_is_ln_v() {
        let d = Denoiser::zeros(DenoiserConfig::default());
        let pattern: Vec<u16> = (0..16).map(|i| 1 + (i % 16) as u16).collect();
        let seq = TokenSequence::new(pattern, 16).unwrap();
        let batch = vec![(seq.clone(), Condition::Class(0)), (seq, Condition::Class(4))];
        let mut tape = Tape::new();
        let bound = d.bind(&mut tape, true);
        let loss = d
            .masked_pretrain_loss(&mut tape, &bound, &batch, 0.1, &mut RngState::new(3))
            .unwrap();
        assert!((tape.value(loss).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_predictor_loss_vanishes() {
        let cfg = DenoiserConfig {
            hidden: 16,
            ..DenoiserConfig::default()
        };
        let target: Vec<u16> = (0..16).map(|i| 1 + ((i * 5) % 16) as u16).collect();
        let seq = TokenSequence::new(target.clone(), 16).unwrap();
        let loss_at = |margin: f64| {
            let mut d = Denoiser::zeros(cfg);
            let ow = d.params.names().iter().position(|n| n == "out_w").unwrap();
            for i in 0..16 {
                d.params.tensors_mut()[POS_EMB].row_mut(i)[i] = 1.0;
                let row = d.params.tensors_mut()[ow].row_mut(i);
                row[target[i] as usize - 1] = margin;
            }
            let mut tape = Tape::new();
            let bound = d.bind(&mut tape, true);
            let batch = vec![(seq.clone(), Condition::Class(0))];
            let l = d
                .masked_pretrain_loss(&mut tape, &bound, &batch, 0.0, &mut RngState::new(8))
                .unwrap();
            tape.value(l).item()
        };
        let (a, b, c) = (loss_at(2.0), loss_at(6.0), loss_at(20.0));
        assert!(a > b && b > c);
        assert!(c < 1e-6);
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::vector(vec![1.0, 0.0]);
        let u = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(apply_cfg(&c, &u, 9.0).unwrap().data(), &[9.0, 0.0]);
        assert_eq!(apply_cfg(&c, &u, 0.0).unwrap(), u);
        assert_eq!(apply_cfg(&c, &u, 1.0).unwrap(), c);
        assert!(apply_cfg(&c, &Tensor::vector(vec![0.0]), 2.0).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = cfg_small();
        let mut rng = RngState::new(21);
        let d = Denoiser::init(cfg, &mut rng);
        assert!(d.num_params() <= 2000);
        let seq = some_seq(&cfg, &mut rng);
        let step = Timestep::new(2, 5).unwrap();
        let weights = Tensor::from_fn(&[cfg.seq_len, cfg.vocab_size], |_| rng.normal());
        let objective = |den: &Denoiser| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let bound = den.bind(&mut tape, true);
            let fwd = den.forward(&mut tape, &bound, &seq, Condition::Class(1), step).unwrap();
            let w = tape.constant(weights.clone());
            let prod = tape.mul(fwd.logits, w).unwrap();
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                crate::params::collect_grads(&tape, &g, &bound),
            )
        };
        let (_, analytic) = objective(&d);
        let h = 1e-5;
        for (pi, t) in d.params.tensors().iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = d.clone();
                plus.params.tensors_mut()[pi].data_mut()[k] += h;
                let mut minus = d.clone();
                minus.params.tensors_mut()[pi].data_mut()[k] -= h;
                let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
                let a = analytic[pi].data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{k}]: {a} vs {fd}", d.params.names()[pi]);
            }
        }
    }
}
