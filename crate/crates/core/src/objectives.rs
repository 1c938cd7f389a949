//! Training losses: per-head contrastive NLL, FLOPS sparsity regularizer,
//! agreement KL between the two heads, and optional distillation from
//! external teacher scores.
//!
//! All losses are built on one tape per (query, positive, negatives)
//! batch. The forward graph's gradient barrier (see [`crate::encoder`])
//! already guarantees that losses entering through the lexicon head never
//! optimize the dense-stack parameters, so a single backward over the
//! total suffices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    encode_on_tape, Bound, EncodedVars, EncoderConfig, EncoderError, GlobalBinding,
};
use crate::ndkernel::{KernelError, Tape, Tensor, Var};
use crate::repr::{Document, Query};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid batch: {0}")]
    BadBatch(String),
    #[error("distillation requested but the batch has no teacher scores")]
    MissingTeacher,
    #[error("positive document has zero probability; loss is infinite")]
    ZeroProbability,
}

/// Which representing head scores the documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Dense,
    Lex,
}

/// One training example: a query, its positive and M negatives, plus
/// optional teacher scores aligned to [positive, negatives...].
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub query: Query,
    pub positive: Document,
    pub negatives: Vec<Document>,
    pub teacher_scores: Option<Vec<f64>>,
}

impl TrainBatch {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.negatives.is_empty() {
            return Err(ObjectiveError::BadBatch("need at least one negative".into()));
        }
        if self.negatives.iter().any(|n| n.doc_id == self.positive.doc_id) {
            return Err(ObjectiveError::BadBatch(format!(
                "positive {} also appears as a negative",
                self.positive.doc_id
            )));
        }
        if let Some(t) = &self.teacher_scores {
            if t.len() != self.negatives.len() + 1 {
                return Err(ObjectiveError::BadBatch(format!(
                    "teacher scores length {} != M+1 = {}",
                    t.len(),
                    self.negatives.len() + 1
                )));
            }
            if t.iter().any(|s| !s.is_finite()) {
                return Err(ObjectiveError::BadBatch("non-finite teacher score".into()));
            }
        }
        Ok(())
    }

    pub fn num_docs(&self) -> usize {
        self.negatives.len() + 1
    }
}

/// Training pipeline stage; continual adds the agreement regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Continual,
}

/// Per-stage loss configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageOpts {
    pub stage: Stage,
    pub lambda_flops: f64,
    pub use_distill: bool,
}

/// Loss components of one batch. Components are unweighted; `total`
/// applies the FLOPS weight.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_con_dense: f64,
    pub l_con_lex: f64,
    pub l_flops_doc: f64,
    pub l_flops_query: f64,
    pub l_reg: f64,
    pub l_distill: f64,
    pub total: f64,
}

impl LossReport {
    /// Recomputes the weighted sum of components; equals `total` up to
    /// floating-point association error.
    pub fn component_sum(&self, lambda_flops: f64) -> f64 {
        self.l_con_dense
            + self.l_con_lex
            + lambda_flops * (self.l_flops_doc + self.l_flops_query)
            + self.l_reg
            + self.l_distill
    }
}

/// Plain softmax for reporting and oracles.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Negative log-likelihood of the positive index under a distribution.
pub fn contrastive_nll(p: &[f64], positive_index: usize) -> Result<f64, ObjectiveError> {
    let prob = p
        .get(positive_index)
        .copied()
        .ok_or_else(|| ObjectiveError::BadBatch("positive index out of range".into()))?;
    if prob <= 0.0 {
        return Err(ObjectiveError::ZeroProbability);
    }
    Ok(-prob.ln())
}

/// Everything the tape produced for one batch.
pub struct BatchVars {
    pub query: EncodedVars,
    /// Positive first, then the negatives in batch order.
    pub docs: Vec<EncodedVars>,
}

/// Encodes the query and all documents of a batch on one tape.
pub fn encode_batch(
    tape: &mut Tape,
    bound: &Bound,
    global: &GlobalBinding,
    cfg: &EncoderConfig,
    batch: &TrainBatch,
) -> Result<BatchVars, ObjectiveError> {
    batch.validate()?;
    let query = encode_on_tape(tape, bound, cfg, &batch.query.tokens, global)?;
    let mut docs = Vec::with_capacity(batch.num_docs());
    docs.push(encode_on_tape(tape, bound, cfg, &batch.positive.tokens, global)?);
    for neg in &batch.negatives {
        docs.push(encode_on_tape(tape, bound, cfg, &neg.tokens, global)?);
    }
    Ok(BatchVars { query, docs })
}

/// Dot-product scores of the query against every document under the
/// requested head, as a 1 x (M+1) row.
pub fn score_row(
    tape: &mut Tape,
    batch_vars: &BatchVars,
    head: Head,
) -> Result<Var, ObjectiveError> {
    let q = match head {
        Head::Dense => batch_vars.query.dense,
        Head::Lex => batch_vars.query.lex,
    };
    let mut scores = Vec::with_capacity(batch_vars.docs.len());
    for doc in &batch_vars.docs {
        let d = match head {
            Head::Dense => doc.dense,
            Head::Lex => doc.lex,
        };
        let prod = tape.mul(q, d)?;
        scores.push(tape.sum(prod)?);
    }
    Ok(tape.concat_cols(&scores)?)
}

/// Softmax distribution over the batch documents from a score row.
pub fn relevance_distribution(tape: &mut Tape, scores: Var) -> Result<Var, ObjectiveError> {
    Ok(tape.softmax_rows(scores)?)
}

/// Contrastive loss -log p[positive] from a distribution row.
pub fn contrastive_loss(
    tape: &mut Tape,
    distribution: Var,
    positive_index: usize,
) -> Result<Var, ObjectiveError> {
    let prob = tape.value(distribution).get(0, positive_index);
    if prob <= 0.0 {
        return Err(ObjectiveError::ZeroProbability);
    }
    let picked = tape.select(distribution, 0, positive_index)?;
    let log = tape.log(picked)?;
    Ok(tape.scale(log, -1.0)?)
}

/// Both heads' contrastive losses for a batch (positive at index 0).
pub fn dual_contrastive(
    tape: &mut Tape,
    batch_vars: &BatchVars,
) -> Result<(Var, Var), ObjectiveError> {
    let s_den = score_row(tape, batch_vars, Head::Dense)?;
    let p_den = relevance_distribution(tape, s_den)?;
    let l_den = contrastive_loss(tape, p_den, 0)?;
    let s_lex = score_row(tape, batch_vars, Head::Lex)?;
    let p_lex = relevance_distribution(tape, s_lex)?;
    let l_lex = contrastive_loss(tape, p_lex, 0)?;
    Ok((l_den, l_lex))
}

/// FLOPS regularizer over a batch of activation rows: sum over terms of
/// the squared batch-mean activation.
pub fn flops_reg(tape: &mut Tape, activations: &[Var]) -> Result<Var, ObjectiveError> {
    if activations.is_empty() {
        return Err(ObjectiveError::BadBatch("flops_reg needs at least one vector".into()));
    }
    let stacked = tape.concat_rows(activations)?;
    let means = tape.mean_rows(stacked)?;
    let squared = tape.mul(means, means)?;
    Ok(tape.sum(squared)?)
}

/// Agreement regularizer: KL(dense distribution || lexicon distribution)
/// over the batch documents, from the two score rows.
pub fn self_reg_kl(tape: &mut Tape, s_den: Var, s_lex: Var) -> Result<Var, ObjectiveError> {
    let kl = tape.kl_div_rows(s_den, s_lex)?;
    Ok(tape.select(kl, 0, 0)?)
}

/// Distillation: KL(softmax(teacher) || softmax(student scores)).
pub fn distill_kl(
    tape: &mut Tape,
    teacher_scores: &[f64],
    student_scores: Var,
) -> Result<Var, ObjectiveError> {
    let teacher = tape.constant(Tensor::row(teacher_scores.to_vec()))?;
    let kl = tape.kl_div_rows(teacher, student_scores)?;
    Ok(tape.select(kl, 0, 0)?)
}

/// Tape outputs of one stage-loss build.
pub struct StageLossOut {
    pub report: LossReport,
    /// Scalar root for backward.
    pub total: Var,
    /// Dense-head score row over [positive, negatives...].
    pub s_den: Var,
    /// Lexicon-head score row over the same documents.
    pub s_lex: Var,
    /// The query's dense vector (1 x e).
    pub query_dense: Var,
}

/// Builds the full stage loss for one batch and returns its report plus
/// the scalar root for backward.
pub fn stage_loss(
    tape: &mut Tape,
    bound: &Bound,
    global: &GlobalBinding,
    cfg: &EncoderConfig,
    batch: &TrainBatch,
    opts: &StageOpts,
) -> Result<StageLossOut, ObjectiveError> {
    if opts.use_distill && batch.teacher_scores.is_none() {
        return Err(ObjectiveError::MissingTeacher);
    }
    let vars = encode_batch(tape, bound, global, cfg, batch)?;

    let s_den = score_row(tape, &vars, Head::Dense)?;
    let p_den = relevance_distribution(tape, s_den)?;
    let l_den = contrastive_loss(tape, p_den, 0)?;
    let s_lex = score_row(tape, &vars, Head::Lex)?;
    let p_lex = relevance_distribution(tape, s_lex)?;
    let l_lex = contrastive_loss(tape, p_lex, 0)?;

    let doc_acts: Vec<Var> = vars.docs.iter().map(|d| d.lex).collect();
    let flops_doc = flops_reg(tape, &doc_acts)?;
    let flops_query = flops_reg(tape, &[vars.query.lex])?;

    let mut report = LossReport {
        l_con_dense: tape.value(l_den).item()?,
        l_con_lex: tape.value(l_lex).item()?,
        l_flops_doc: tape.value(flops_doc).item()?,
        l_flops_query: tape.value(flops_query).item()?,
        ..LossReport::default()
    };

    let mut total = tape.add(l_den, l_lex)?;
    let flops_sum = tape.add(flops_doc, flops_query)?;
    let weighted = tape.scale(flops_sum, opts.lambda_flops)?;
    total = tape.add(total, weighted)?;

    if opts.stage == Stage::Continual {
        let l_reg = self_reg_kl(tape, s_den, s_lex)?;
        report.l_reg = tape.value(l_reg).item()?;
        total = tape.add(total, l_reg)?;
    }

    if opts.use_distill {
        let teacher = batch.teacher_scores.as_ref().expect("checked above");
        let d_den = distill_kl(tape, teacher, s_den)?;
        let d_lex = distill_kl(tape, teacher, s_lex)?;
        let d_sum = tape.add(d_den, d_lex)?;
        report.l_distill = tape.value(d_sum).item()?;
        total = tape.add(total, d_sum)?;
    }

    report.total = tape.value(total).item()?;
    Ok(StageLossOut { report, total, s_den, s_lex, query_dense: vars.query.dense })
}

/// Convenience: builds a throwaway tape with the training barrier and
/// returns just the loss report for one batch.
pub fn stage_loss_value(
    params: &crate::encoder::EncoderParams,
    cfg: &EncoderConfig,
    batch: &TrainBatch,
    opts: &StageOpts,
) -> Result<LossReport, ObjectiveError> {
    use crate::encoder::{bind_global, bind_params, GlobalMode};
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier)?;
    let out = stage_loss(&mut tape, &bound, &global, cfg, batch, opts)?;
    Ok(out.report)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::encoder::{bind_global, bind_params, EncoderParams, GlobalMode};
    use crate::repr::TokenLimits;

    use super::*;

    fn toy_cfg() -> EncoderConfig {
        let mut cfg = EncoderConfig::toy(24, 8);
        cfg.layers_ctx = 1;
        cfg.layers_den = 1;
        cfg.layers_lex = 1;
        cfg.heads = 2;
        cfg.max_seq_len = 16;
        cfg
    }

    fn toy_batch(cfg: &EncoderConfig, m: usize, teacher: bool) -> TrainBatch {
        let limits = TokenLimits { vocab_size: cfg.vocab_size, max_seq_len: cfg.max_raw_tokens() };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut text = |id: String| {
            let len = rng.gen_range(2..6);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(2..cfg.vocab_size)).collect();
            Document::new(id, tokens, &limits).unwrap()
        };
        let positive = text("d+".into());
        let negatives: Vec<Document> = (0..m).map(|i| text(format!("n{i}"))).collect();
        let qdoc = text("q".into());
        TrainBatch {
            query: Query { query_id: "q".into(), tokens: qdoc.tokens },
            positive,
            negatives,
            teacher_scores: teacher.then(|| (0..=m).map(|i| i as f64 * 0.3).collect()),
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[2.0, 2.0, 2.0, 2.0]);
        for p in &u {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);

        // Random scores match a direct exp/sum oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let p = softmax(&scores);
        let z: f64 = scores.iter().map(|&s| s.exp()).sum();
        for (i, &s) in scores.iter().enumerate() {
            assert!((p[i] - s.exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_nll(&[1.0, 0.0], 0).unwrap(), 0.0);
        let uniform = vec![1.0 / 16.0; 16];
        assert!((contrastive_nll(&uniform, 3).unwrap() - 16f64.ln()).abs() < 1e-12);
        assert!(matches!(
            contrastive_nll(&[0.0, 1.0], 0),
            Err(ObjectiveError::ZeroProbability)
        ));
    }

    #[test]
    fn contrastive_gradient_is_p_minus_onehot() {
        let scores = [0.3, -1.2, 0.9, 0.0];
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::row(scores.to_vec()), true).unwrap();
        let p = relevance_distribution(&mut tape, s).unwrap();
        let loss = contrastive_loss(&mut tape, p, 2).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(s).unwrap().data().to_vec();
        let probs = softmax(&scores);
        for i in 0..4 {
            let expected = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance_of_distribution_losses() {
        let scores = [0.5, -0.25, 1.5];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 7.5).collect();
        let p = softmax(&scores);
        let q = softmax(&shifted);
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-10);
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(scores.to_vec())).unwrap();
        let b = tape.constant(Tensor::row(shifted)).unwrap();
        let kl = tape.kl_div_rows(a, b).unwrap();
        assert!(tape.value(kl).data()[0].abs() < 1e-10);
    }

    #[test]
    fn flops_examples() {
        // All-zero batch.
        let mut tape = Tape::new();
        let z1 = tape.constant(Tensor::zeros(1, 4)).unwrap();
        let z2 = tape.constant(Tensor::zeros(1, 4)).unwrap();
        let f = flops_reg(&mut tape, &[z1, z2]).unwrap();
        assert_eq!(tape.value(f).item().unwrap(), 0.0);

        // Single vector {t1: 0.5} over |V| = 4.
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(vec![0.0, 0.5, 0.0, 0.0])).unwrap();
        let f = flops_reg(&mut tape, &[v]).unwrap();
        assert!((tape.value(f).item().unwrap() - 0.25).abs() < 1e-15);

        // Two vectors {t1: 1.0} and all-zero: mean 0.5, squared 0.25.
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let b = tape.constant(Tensor::zeros(1, 4)).unwrap();
        let f = flops_reg(&mut tape, &[a, b]).unwrap();
        // Oracle: mean per term, then square, then sum.
        let rows = [[0.0, 1.0, 0.0, 0.0], [0.0; 4]];
        let mut oracle = 0.0;
        for term in 0..4 {
            let mean: f64 = rows.iter().map(|v| v[term]).sum::<f64>() / 2.0;
            oracle += mean * mean;
        }
        assert!((tape.value(f).item().unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.25).abs() < 1e-15);
    }

    #[test]
    fn flops_convex_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let eval = |v: &[f64]| {
                let mut tape = Tape::new();
                let t = tape.constant(Tensor::row(v.to_vec())).unwrap();
                let f = flops_reg(&mut tape, &[t]).unwrap();
                tape.value(f).item().unwrap()
            };
            assert!(eval(&mid) <= 0.5 * eval(&a) + 0.5 * eval(&b) + 1e-12);
        }
    }

    #[test]
    fn self_reg_examples() {
        // Identical score rows.
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(vec![0.4, -1.0, 2.0])).unwrap();
        let kl = self_reg_kl(&mut tape, s, s).unwrap();
        assert!(tape.value(kl).item().unwrap().abs() < 1e-15);

        // Dense uniform [.5,.5] vs lex [.75,.25]: 0.5 ln(2/3) + 0.5 ln 2.
        let mut tape = Tape::new();
        let s_den = tape.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
        let s_lex = tape.constant(Tensor::row(vec![3f64.ln(), 0.0])).unwrap();
        let kl = self_reg_kl(&mut tape, s_den, s_lex).unwrap();
        let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2.0f64.ln();
        assert!((tape.value(kl).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.14384103622589045).abs() < 1e-12);

        // Non-negativity over random score pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::row(a)).unwrap();
            let bv = tape.constant(Tensor::row(b)).unwrap();
            let kl = self_reg_kl(&mut tape, av, bv).unwrap();
            assert!(tape.value(kl).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn distill_examples() {
        // Teacher equal to student plus a constant: zero loss.
        let student = [0.2, 1.4, -0.6];
        let teacher: Vec<f64> = student.iter().map(|s| s + 4.0).collect();
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::row(student.to_vec())).unwrap();
        let d = distill_kl(&mut tape, &teacher, sv).unwrap();
        assert!(tape.value(d).item().unwrap().abs() < 1e-10);

        // Near one-hot teacher reduces to the contrastive loss.
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::row(student.to_vec())).unwrap();
        let d = distill_kl(&mut tape, &[60.0, 0.0, 0.0], sv).unwrap();
        let nll = contrastive_nll(&softmax(&student), 0).unwrap();
        assert!((tape.value(d).item().unwrap() - nll).abs() < 1e-9);

        // Arbitrary case against a term-by-term oracle.
        let teacher = [0.7, -0.3, 1.1];
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::row(student.to_vec())).unwrap();
        let d = distill_kl(&mut tape, &teacher, sv).unwrap();
        let p = softmax(&teacher);
        let q = softmax(&student);
        let oracle: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
        assert!((tape.value(d).item().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dual_contrastive_stop_gradient() {
        let cfg = toy_cfg();
        let params = EncoderParams::init(&cfg, 42).unwrap();
        let batch = toy_batch(&cfg, 3, false);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, true).unwrap();
        let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier).unwrap();
        let vars = encode_batch(&mut tape, &bound, &global, &cfg, &batch).unwrap();
        let (l_den, l_lex) = dual_contrastive(&mut tape, &vars).unwrap();
        assert!(tape.value(l_den).item().unwrap() >= 0.0);

        // Backward through the lexicon loss only: theta_den untouched.
        tape.backward(l_lex).unwrap();
        for (name, &var) in &bound.den {
            assert!(tape.grad(var).is_none(), "theta_den {name} got lexicon gradient");
        }
    }

    #[test]
    fn stage_loss_accounting_and_configs() {
        let cfg = toy_cfg();
        let params = EncoderParams::init(&cfg, 42).unwrap();
        for (stage, lambda, distill) in [
            (Stage::Warmup, 0.0, false),
            (Stage::Warmup, 0.0016, false),
            (Stage::Continual, 0.0024, false),
            (Stage::Continual, 0.0024, true),
        ] {
            let batch = toy_batch(&cfg, 3, distill);
            let opts = StageOpts { stage, lambda_flops: lambda, use_distill: distill };
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params, true).unwrap();
            let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier).unwrap();
            let out = stage_loss(&mut tape, &bound, &global, &cfg, &batch, &opts).unwrap();
            let report = out.report;
            assert!((report.component_sum(lambda) - report.total).abs() <= 1e-12);
            assert_eq!(tape.value(out.total).item().unwrap(), report.total);
            assert_eq!(tape.value(out.s_den).shape(), (1, batch.num_docs()));
            assert_eq!(tape.value(out.s_lex).shape(), (1, batch.num_docs()));
            if lambda == 0.0 && stage == Stage::Warmup {
                assert!((report.total - (report.l_con_dense + report.l_con_lex)).abs() <= 1e-12);
            }
            if stage == Stage::Warmup {
                assert_eq!(report.l_reg, 0.0);
            }
            tape.backward(out.total).unwrap();
            // No parameter is orphaned: the total reaches every leaf of
            // every group.
            for group in crate::encoder::ParamGroup::ALL {
                for (name, &var) in bound.group(group) {
                    assert!(
                        tape.grad(var).is_some(),
                        "{}.{name} received no gradient from the stage loss",
                        group.as_str()
                    );
                }
            }
        }
    }

    #[test]
    fn stage_loss_requires_teacher_when_distilling() {
        let cfg = toy_cfg();
        let params = EncoderParams::init(&cfg, 42).unwrap();
        let batch = toy_batch(&cfg, 2, false);
        let opts = StageOpts { stage: Stage::Continual, lambda_flops: 0.001, use_distill: true };
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, true).unwrap();
        let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier).unwrap();
        assert!(matches!(
            stage_loss(&mut tape, &bound, &global, &cfg, &batch, &opts),
            Err(ObjectiveError::MissingTeacher)
        ));
    }

    #[test]
    fn batch_validation() {
        let cfg = toy_cfg();
        let mut batch = toy_batch(&cfg, 2, false);
        batch.validate().unwrap();
        batch.negatives[0].doc_id = batch.positive.doc_id.clone();
        assert!(batch.validate().is_err());

        let mut batch = toy_batch(&cfg, 2, true);
        batch.teacher_scores = Some(vec![1.0]);
        assert!(batch.validate().is_err());
        batch.teacher_scores = None;
        batch.negatives.clear();
        assert!(batch.validate().is_err());
    }
}
