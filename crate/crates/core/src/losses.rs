//! Distillation objectives and the Jensen-Shannon probe.
//!
//! Every differentiable loss is built on a [`Graph`] so callers choose which
//! inputs carry gradients. All reductions are batch means except the
//! moment-matching loss, which sums over layers.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One weighted component of a composite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub weight: f64,
    pub value: f64,
}

/// Named components of a composite loss and their weighted total.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `Σ weight·value`, which must agree with `total`.
    pub fn recomposed(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

/// Accumulates weighted scalar terms on the graph.
struct Composer {
    terms: Vec<(&'static str, f64, Var)>,
}

impl Composer {
    fn new() -> Self {
        Composer { terms: Vec::new() }
    }

    fn push(&mut self, name: &'static str, weight: f64, v: Var) {
        self.terms.push((name, weight, v));
    }

    fn finish(self, g: &mut Graph) -> Result<(Var, LossBreakdown)> {
        let mut total: Option<Var> = None;
        for &(_, w, v) in &self.terms {
            if w == 0.0 {
                continue;
            }
            let weighted = g.scale(v, w);
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(0.0)),
        };
        let breakdown = LossBreakdown {
            terms: self
                .terms
                .iter()
                .map(|&(name, weight, v)| LossTerm {
                    name,
                    weight,
                    value: g.scalar(v),
                })
                .collect(),
            total: g.scalar(total),
        };
        Ok((total, breakdown))
    }
}

fn batch_size(g: &Graph, v: Var) -> usize {
    g.value(v).rows().max(1)
}

/// Batch mean of `KL(softmax(t) ‖ softmax(s))`, evaluated in log space.
pub fn kd_loss(g: &mut Graph, t_logits: Var, s_logits: Var) -> Result<Var> {
    if g.value(t_logits).shape() != g.value(s_logits).shape() {
        return Err(Error::shape(
            "kd_loss",
            format!("{:?} vs {:?}", g.value(t_logits).shape(), g.value(s_logits).shape()),
        ));
    }
    let n = batch_size(g, t_logits);
    let log_p = g.log_softmax(t_logits)?;
    let log_q = g.log_softmax(s_logits)?;
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Batch mean of `−log softmax(t)[y]`.
pub fn nll_loss(g: &mut Graph, t_logits: Var, labels: &[usize]) -> Result<Var> {
    let c = g.value(t_logits).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let n = batch_size(g, t_logits);
    let log_p = g.log_softmax(t_logits)?;
    let picked = g.pick_cols(log_p, labels)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Batch mean of `max(‖e_y‖₂ − γ·√d_e, 0)`.
pub fn norm_reg_loss(g: &mut Graph, e_y: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 1.0) {
        return Err(Error::config(format!("norm scale must be >= 1, got {gamma}")));
    }
    let d_e = g.value(e_y).cols() as f64;
    let norms = g.row_norm(e_y)?;
    let excess = g.add_scalar(norms, -gamma * d_e.sqrt());
    let hinge = g.relu(excess);
    Ok(g.mean(hinge))
}

/// `Σ_ℓ ‖μ_ℓ − μ̄_ℓ‖² + ‖ω_ℓ − ω̄_ℓ‖²`; the running moments are constants.
pub fn bnmm_loss(
    g: &mut Graph,
    batch_moments: &[(Var, Var)],
    running_moments: &[(&Tensor, &Tensor)],
) -> Result<Var> {
    if batch_moments.len() != running_moments.len() {
        return Err(Error::shape(
            "bnmm_loss",
            format!(
                "{} batch layers vs {} running layers",
                batch_moments.len(),
                running_moments.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (&(mu, var), &(r_mu, r_var)) in batch_moments.iter().zip(running_moments) {
        for (batch, running) in [(mu, r_mu), (var, r_var)] {
            let target = g.constant(running.clone());
            let d = g.sub(batch, target)?;
            let sq = g.square(d);
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// Mean over elements of `max(|v| − bound, 0)`.
pub fn clamp_penalty(g: &mut Graph, v: Var, bound: f64) -> Result<Var> {
    if !(bound > 0.0) {
        return Err(Error::config(format!("clamp bound must be > 0, got {bound}")));
    }
    let a = g.abs(v);
    let excess = g.add_scalar(a, -bound);
    let hinge = g.relu(excess);
    Ok(g.mean(hinge))
}

/// Batch mean Jensen-Shannon divergence (natural log) between row
/// distributions.
pub fn js_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("js_divergence", format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    for (name, t) in [("p", p), ("q", q)] {
        for (i, row) in t.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} of {name} is not a probability vector (sum {s})"
                )));
            }
        }
    }
    let n = p.rows();
    if n == 0 || p.is_empty() {
        return Ok(0.0);
    }
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (pr, qr) in p.iter_rows().zip(q.iter_rows()) {
        let mut js = 0.0;
        for (&a, &b) in pr.iter().zip(qr) {
            let m = 0.5 * (a + b);
            js += 0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m);
        }
        total += js;
    }
    Ok(total / n as f64)
}

/// Weights of the student objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentLossWeights {
    /// Weight of the fresh-generator stream.
    pub gen: f64,
    /// Weight of the second stream (EMA generator, or the memory bank for
    /// DFKD-Mem).
    pub second: f64,
    /// Coefficient of the student logit clamp inside each stream.
    pub clamp: f64,
    /// Logit bound δ.
    pub logit_bound: f64,
}

impl Default for StudentLossWeights {
    fn default() -> Self {
        StudentLossWeights {
            gen: 1.0,
            second: 1.0,
            clamp: 0.01,
            logit_bound: 20.0,
        }
    }
}

/// Which source feeds the second student stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondStream {
    Ema,
    Memory,
}

/// Teacher and student logits computed on one batch of synthetic inputs.
#[derive(Debug, Clone, Copy)]
pub struct StreamLogits {
    pub teacher: Var,
    pub student: Var,
}

/// `w_gen·[KD + ζ0·clamp(S, δ)]` on the generator batch plus the same on the
/// second stream weighted by `w_second`.
///
/// Teacher logits should be constants (or detached) so that gradients only
/// reach the student.
pub fn student_loss(
    g: &mut Graph,
    gen: StreamLogits,
    second: Option<(SecondStream, StreamLogits)>,
    w: &StudentLossWeights,
) -> Result<(Var, LossBreakdown)> {
    if w.gen < 0.0 || w.second < 0.0 || w.clamp < 0.0 {
        return Err(Error::config("student loss weights must be non-negative"));
    }
    let mut c = Composer::new();
    let kd = kd_loss(g, gen.teacher, gen.student)?;
    let clamp = clamp_penalty(g, gen.student, w.logit_bound)?;
    c.push("kd_gen", w.gen, kd);
    c.push("clamp_student", w.gen * w.clamp, clamp);
    if let Some((kind, s)) = second {
        let (kd_name, clamp_name) = match kind {
            SecondStream::Ema => ("kd_ema", "clamp_student_ema"),
            SecondStream::Memory => ("kd_mem", "clamp_student_mem"),
        };
        let kd = kd_loss(g, s.teacher, s.student)?;
        let clamp = clamp_penalty(g, s.student, w.logit_bound)?;
        c.push(kd_name, w.second, kd);
        c.push(clamp_name, w.second * w.clamp, clamp);
    }
    c.finish(g)
}

/// Weights of the generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLossWeights {
    /// λ2; enters with a negative sign (the generator maximizes KD).
    pub adversarial: f64,
    pub nll: f64,
    pub norm_reg: f64,
    pub bnmm: f64,
    pub teacher_clamp: f64,
    pub logit_clamp: f64,
    /// Bound δ on teacher logits.
    pub logit_bound: f64,
    /// Bound ν on generator output logits.
    pub gen_logit_bound: f64,
    /// γ in the embedding norm threshold `γ·√d_e`.
    pub norm_scale: f64,
}

impl GeneratorLossWeights {
    /// Unconditional small-dataset coefficients.
    pub fn unconditional() -> Self {
        GeneratorLossWeights {
            adversarial: 1.0,
            nll: 0.0,
            norm_reg: 0.0,
            bnmm: 1.0,
            teacher_clamp: 0.1,
            logit_clamp: 0.1,
            logit_bound: 20.0,
            gen_logit_bound: 20.0,
            norm_scale: 1.1,
        }
    }

    /// Class-conditional large-dataset coefficients.
    pub fn conditional() -> Self {
        GeneratorLossWeights {
            nll: 0.1,
            norm_reg: 0.1,
            bnmm: 0.0,
            ..Self::unconditional()
        }
    }
}

impl Default for GeneratorLossWeights {
    fn default() -> Self {
        Self::unconditional()
    }
}

/// Graph inputs of [`generator_loss`].
pub struct GeneratorLossInputs<'a> {
    pub teacher_logits: Var,
    pub student_logits: Var,
    /// Generator output logits `u` (samples are `sigmoid(u)`).
    pub gen_logits: Var,
    pub labels: Option<&'a [usize]>,
    /// Gathered class embeddings `e_y`.
    pub embeddings: Option<Var>,
    /// Teacher BatchNorm batch moments on the synthetic batch.
    pub teacher_moments: &'a [(Var, Var)],
    /// Teacher BatchNorm running moments, aligned with `teacher_moments`.
    pub teacher_running: Vec<(&'a Tensor, &'a Tensor)>,
}

/// `−λ2·KD + λ3·NLL + λ4·NormReg + ζ1·clamp(T, δ) + ζ2·clamp(u, ν) + λ5·BNmm`.
pub fn generator_loss(
    g: &mut Graph,
    inp: &GeneratorLossInputs<'_>,
    w: &GeneratorLossWeights,
) -> Result<(Var, LossBreakdown)> {
    let weights = [
        w.adversarial,
        w.nll,
        w.norm_reg,
        w.bnmm,
        w.teacher_clamp,
        w.logit_clamp,
    ];
    if weights.iter().any(|&v| v < 0.0) {
        return Err(Error::config("generator loss weights must be non-negative"));
    }
    if (w.nll > 0.0 && inp.labels.is_none()) || (w.norm_reg > 0.0 && inp.embeddings.is_none()) {
        return Err(Error::config(
            "conditional loss terms (NLL, norm regularization) requested for an unconditional generator",
        ));
    }
    let mut c = Composer::new();
    let kd = kd_loss(g, inp.teacher_logits, inp.student_logits)?;
    c.push("kd_gen", -w.adversarial, kd);
    if let Some(labels) = inp.labels {
        let nll = nll_loss(g, inp.teacher_logits, labels)?;
        c.push("nll", w.nll, nll);
    }
    if let Some(e) = inp.embeddings {
        let nr = norm_reg_loss(g, e, w.norm_scale)?;
        c.push("norm_reg", w.norm_reg, nr);
    }
    let ct = clamp_penalty(g, inp.teacher_logits, w.logit_bound)?;
    c.push("clamp_teacher", w.teacher_clamp, ct);
    let cu = clamp_penalty(g, inp.gen_logits, w.gen_logit_bound)?;
    c.push("clamp_gen_logit", w.logit_clamp, cu);
    if w.bnmm > 0.0 {
        if inp.teacher_moments.is_empty() {
            return Err(Error::config("BatchNorm moment matching needs a teacher with BatchNorm layers"));
        }
        let b = bnmm_loss(g, inp.teacher_moments, &inp.teacher_running)?;
        c.push("bnmm", w.bnmm, b);
    }
    c.finish(g)
}

/// Gradient-free KD loss between two logit tensors.
pub fn kd_value(t_logits: &Tensor, s_logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(t_logits.clone());
    let s = g.constant(s_logits.clone());
    let l = kd_loss(&mut g, t, s)?;
    g.check_finite()?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn kd_identical_logits_is_zero() {
        let t = Tensor::from_rows(&[[0.3, -2.0, 1.1], [5.0, 5.0, -5.0]]).unwrap();
        assert_eq!(kd_value(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn kd_hand_example() {
        // softmax(ln 0.8, ln 0.2) = (0.8, 0.2); softmax(0, 0) = (0.5, 0.5)
        let t = Tensor::from_rows(&[[0.8f64.ln(), 0.2f64.ln()]]).unwrap();
        let s = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        // Oracle: 0.8 ln(1.6) + 0.2 ln(0.4)
        let oracle = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let v = kd_value(&t, &s).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.192745).abs() < 1e-6);
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let uniform = c(&mut g, &[&[0.0; 4], &[0.0; 4]]);
        let l = nll_loss(&mut g, uniform, &[0, 3]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        // p[y] = 0.25 on the first row, 0.5 on the second.
        let t = c(
            &mut g,
            &[&[0.25f64.ln(), 0.75f64.ln()], &[0.5f64.ln(), 0.5f64.ln()]],
        );
        let l = nll_loss(&mut g, t, &[0, 1]).unwrap();
        let oracle = (4f64.ln() + 2f64.ln()) / 2.0;
        assert!((g.scalar(l) - oracle).abs() < 1e-12);

        let confident = c(&mut g, &[&[40.0, 0.0, 0.0]]);
        let l = nll_loss(&mut g, confident, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-15);

        assert!(nll_loss(&mut g, confident, &[3]).is_err());
    }

    #[test]
    fn norm_reg_examples() {
        let mut g = Graph::new();
        let e = c(&mut g, &[&[2.0, 2.0, 2.0, 2.0]]);
        let l = norm_reg_loss(&mut g, e, 1.0).unwrap();
        assert!((g.scalar(l) - 2.0).abs() < 1e-12);
        let inside = c(&mut g, &[&[1.0, -1.0, 1.0, 0.5]]);
        let l = norm_reg_loss(&mut g, inside, 1.1).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(norm_reg_loss(&mut g, inside, 0.9).is_err());
    }

    #[test]
    fn bnmm_examples() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let var = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let r_mu = Tensor::vector(vec![0.0, 0.0]);
        let r_var = Tensor::vector(vec![2.0, 3.0]);
        let l = bnmm_loss(&mut g, &[(mu, var)], &[(&r_mu, &r_var)]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let l0 = bnmm_loss(&mut g, &[(var, var)], &[(&r_var, &r_var)]).unwrap();
        assert_eq!(g.scalar(l0), 0.0);
        assert!(bnmm_loss(&mut g, &[(mu, var)], &[]).is_err());
    }

    #[test]
    fn clamp_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![25.0]));
        let l = clamp_penalty(&mut g, v, 20.0).unwrap();
        assert_eq!(g.scalar(l), 5.0);
        let nv = g.constant(Tensor::vector(vec![-25.0]));
        let l2 = clamp_penalty(&mut g, nv, 20.0).unwrap();
        assert_eq!(g.scalar(l2), 5.0);
        let inside = g.constant(Tensor::vector(vec![-20.0, 3.0, 20.0]));
        let l3 = clamp_penalty(&mut g, inside, 20.0).unwrap();
        assert_eq!(g.scalar(l3), 0.0);
        assert!(clamp_penalty(&mut g, inside, 0.0).is_err());
    }

    #[test]
    fn js_examples() {
        let p = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!((js_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let bad = Tensor::from_rows(&[[0.7, 0.7]]).unwrap();
        assert!(js_divergence(&p, &bad).is_err());
    }

    #[test]
    fn student_loss_rejects_negative_weights() {
        let mut g = Graph::new();
        let t = c(&mut g, &[&[0.0, 1.0]]);
        let w = StudentLossWeights {
            second: -1.0,
            ..Default::default()
        };
        let s = StreamLogits { teacher: t, student: t };
        assert!(matches!(student_loss(&mut g, s, None, &w), Err(Error::Config(_))));
    }

    #[test]
    fn generator_loss_rejects_conditional_terms_without_labels() {
        let mut g = Graph::new();
        let t = c(&mut g, &[&[0.0, 1.0], &[1.0, 0.0]]);
        let inp = GeneratorLossInputs {
            teacher_logits: t,
            student_logits: t,
            gen_logits: t,
            labels: None,
            embeddings: None,
            teacher_moments: &[],
            teacher_running: vec![],
        };
        let w = GeneratorLossWeights {
            bnmm: 0.0,
            ..GeneratorLossWeights::conditional()
        };
        assert!(generator_loss(&mut g, &inp, &w).is_err());
        let w = GeneratorLossWeights {
            bnmm: 0.0,
            ..GeneratorLossWeights::unconditional()
        };
        assert!(generator_loss(&mut g, &inp, &w).is_ok());
    }

    #[test]
    fn preset_coefficients() {
        let u = GeneratorLossWeights::unconditional();
        assert_eq!((u.nll, u.norm_reg, u.bnmm), (0.0, 0.0, 1.0));
        let c = GeneratorLossWeights::conditional();
        assert_eq!(
            (c.adversarial, c.nll, c.norm_reg, c.bnmm, c.teacher_clamp, c.logit_clamp),
            (1.0, 0.1, 0.1, 0.0, 0.1, 0.1)
        );
        assert_eq!(c.norm_scale, 1.1);
        let s = StudentLossWeights::default();
        assert_eq!((s.gen, s.second, s.clamp, s.logit_bound), (1.0, 1.0, 0.01, 20.0));
    }
}
