//! Objective components.
//!
//! Two views of every loss live here: pure `f64` functions of network
//! outputs (used as references and for reporting), and graph builders that
//! assemble the generator-side and discriminator-side objectives for
//! training. Adversarial scores are logits in the graph view and
//! probabilities in the pure view.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::Networks;
use crate::perceptual::PerceptualNet;
use crate::scalar::Real;
use crate::schema::LabelTriple;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

fn check_probabilities(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Precondition(format!("{what}: empty score batch")));
    }
    if let Some(s) = scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::Precondition(format!("{what}: score {s} outside (0, 1)")));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Discriminator side: `-[mean log d_real + mean log(1 - d_fake)]`.
/// Generator side (non-saturating): `-mean log d_fake`.
pub fn adversarial_forward(d_real: &[f64], d_fake: &[f64], side: Side) -> Result<f64> {
    check_probabilities(d_fake, "fake scores")?;
    match side {
        Side::Generator => Ok(-mean(d_fake.iter().map(|p| p.ln()))),
        Side::Discriminator => {
            check_probabilities(d_real, "real scores")?;
            Ok(-(mean(d_real.iter().map(|p| p.ln())) + mean(d_fake.iter().map(|p| (-p).ln_1p()))))
        }
    }
}

/// Same form as [`adversarial_forward`], applied to `D_x` on `x` and `F(y)`.
pub fn adversarial_backward(d_real: &[f64], d_fake: &[f64], side: Side) -> Result<f64> {
    adversarial_forward(d_real, d_fake, side)
}

fn axis_cross_entropy(logits: &Tensor<f64>, labels: &[LabelTriple], axis: usize) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, l) in logits.data().chunks(k).zip(labels) {
        let label = l[axis];
        if label >= k {
            return Err(Error::Precondition(format!("label {label} out of range for {k} classes")));
        }
        total += crate::graph::log_sum_exp(row) - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Sum over the three axes of the mean cross-entropy; `(reg_real, reg_fake)`.
pub fn attribute_regression(
    real_logits: &[Tensor<f64>; 3],
    real_labels: &[LabelTriple],
    fake_logits: &[Tensor<f64>; 3],
    cond_labels: &[LabelTriple],
) -> Result<(f64, f64)> {
    let mut real = 0.0;
    let mut fake = 0.0;
    for axis in 0..3 {
        real += axis_cross_entropy(&real_logits[axis], real_labels, axis)?;
        fake += axis_cross_entropy(&fake_logits[axis], cond_labels, axis)?;
    }
    Ok((real, fake))
}

/// The four mean-L1 reconstruction terms, in the order cycle-x, cycle-y,
/// identity-y, identity-x.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub cycle_x: f64,
    pub cycle_y: f64,
    pub idt_y: f64,
    pub idt_x: f64,
}

impl Reconstruction {
    pub fn total(&self) -> f64 {
        self.cycle_x + self.cycle_y + self.idt_y + self.idt_x
    }
}

fn l1_mean(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("L1 between {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(mean(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs())))
}

pub fn reconstruction(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    x_hat_cycle: &Tensor<f64>,
    y_hat_cycle: &Tensor<f64>,
    y_idt: &Tensor<f64>,
    x_idt: &Tensor<f64>,
) -> Result<Reconstruction> {
    Ok(Reconstruction {
        cycle_x: l1_mean(x_hat_cycle, x)?,
        cycle_y: l1_mean(y_hat_cycle, y)?,
        idt_y: l1_mean(y_idt, y)?,
        idt_x: l1_mean(x_idt, x)?,
    })
}

/// Component values entering the full objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv_f_gen: f64,
    pub adv_f_disc: f64,
    pub adv_b_gen: f64,
    pub adv_b_disc: f64,
    pub reg_real: f64,
    pub reg_fake: f64,
    pub sp: f64,
    pub rec: f64,
}

/// `(full_g, full_d)`.
pub fn full_objective(p: &LossParts, w: &LossWeights) -> (f64, f64) {
    let full_g = p.adv_f_gen + p.adv_b_gen + w.lambda_rec * p.rec + w.lambda_reg * p.reg_fake + w.lambda_s * p.sp;
    let full_d = p.adv_f_disc + p.adv_b_disc + w.lambda_reg * p.reg_real;
    (full_g, full_d)
}

/// Per-step scalars. `adv_f`/`adv_b` are discriminator-side values; the
/// `_gen` fields are the generator-side values that enter `full_g`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub adv_f: f64,
    pub adv_b: f64,
    pub adv_f_gen: f64,
    pub adv_b_gen: f64,
    pub reg_real: f64,
    pub reg_fake: f64,
    pub sp: f64,
    pub rec: f64,
    pub rec_cycle_x: f64,
    pub rec_cycle_y: f64,
    pub rec_idt_y: f64,
    pub rec_idt_x: f64,
    pub full_g: f64,
    pub full_d: f64,
}

impl LossReport {
    pub fn fields(&self) -> [(&'static str, f64); 14] {
        [
            ("adv_f", self.adv_f),
            ("adv_b", self.adv_b),
            ("adv_f_gen", self.adv_f_gen),
            ("adv_b_gen", self.adv_b_gen),
            ("reg_real", self.reg_real),
            ("reg_fake", self.reg_fake),
            ("sp", self.sp),
            ("rec", self.rec),
            ("rec_cycle_x", self.rec_cycle_x),
            ("rec_cycle_y", self.rec_cycle_y),
            ("rec_idt_y", self.rec_idt_y),
            ("rec_idt_x", self.rec_idt_x),
            ("full_g", self.full_g),
            ("full_d", self.full_d),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            adv_f_gen: self.adv_f_gen,
            adv_f_disc: self.adv_f,
            adv_b_gen: self.adv_b_gen,
            adv_b_disc: self.adv_b,
            reg_real: self.reg_real,
            reg_fake: self.reg_fake,
            sp: self.sp,
            rec: self.rec,
        }
    }
}

// ---------------------------------------------------------------- graph view

/// Every generator output of one step.
#[derive(Clone, Copy, Debug)]
pub struct Translations {
    /// `G(x, c)`
    pub fake_y: Var,
    /// `F(G(x, c))`
    pub cycle_x: Var,
    /// `F(y)`
    pub fake_x: Var,
    /// `G(F(y), c)`
    pub cycle_y: Var,
    /// `G(y, c)`
    pub idt_y: Var,
    /// `F(x)`
    pub idt_x: Var,
}

pub fn translate<T: Real>(g: &mut Graph<T>, nets: &Networks<T>, x: Var, y: Var, cond: Var) -> Translations {
    let fake_y = nets.gen_forward.forward(g, x, cond);
    let cycle_x = nets.gen_backward.forward(g, fake_y);
    let fake_x = nets.gen_backward.forward(g, y);
    let cycle_y = nets.gen_forward.forward(g, fake_x, cond);
    let idt_y = nets.gen_forward.forward(g, y, cond);
    let idt_x = nets.gen_backward.forward(g, x);
    Translations {
        fake_y,
        cycle_x,
        fake_x,
        cycle_y,
        idt_y,
        idt_x,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv_f: Var,
    pub adv_b: Var,
    pub reg_fake: Var,
    pub sp: Var,
    pub rec_terms: [Var; 4],
    pub rec: Var,
    pub full: Var,
}

fn regression<T: Real>(g: &mut Graph<T>, logits: [Var; 3], labels: &[LabelTriple]) -> Var {
    let terms: Vec<(Var, T)> = (0..3)
        .map(|axis| {
            let l: Vec<usize> = labels.iter().map(|t| t[axis]).collect();
            (g.cross_entropy_mean(logits[axis], &l), T::one())
        })
        .collect();
    g.weighted_sum(&terms)
}

/// `full_g`. Discriminator parameters are bound here; freeze their tags on
/// `g` to keep them out of the generator update.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms<T: Real>(
    g: &mut Graph<T>,
    nets: &Networks<T>,
    perceptual: &PerceptualNet<T>,
    x: Var,
    y: Var,
    t: &Translations,
    cond_labels: &[LabelTriple],
    w: &LossWeights,
) -> GeneratorTerms {
    let style = nets.disc_style.forward(g, t.fake_y);
    let adv_f = g.neg_log_sigmoid_mean(style.realness, true);
    let reg_fake = regression(g, style.logits, cond_labels);
    let content = nets.disc_content.forward(g, t.fake_x);
    let adv_b = g.neg_log_sigmoid_mean(content, true);
    let sp = perceptual.style_distance_var(g, t.fake_y, y);
    let rec_terms = [
        g.l1_mean(t.cycle_x, x),
        g.l1_mean(t.cycle_y, y),
        g.l1_mean(t.idt_y, y),
        g.l1_mean(t.idt_x, x),
    ];
    let rec = g.weighted_sum(&rec_terms.map(|v| (v, T::one())));
    let full = g.weighted_sum(&[
        (adv_f, T::one()),
        (adv_b, T::one()),
        (rec, T::lit(w.lambda_rec)),
        (reg_fake, T::lit(w.lambda_reg)),
        (sp, T::lit(w.lambda_s)),
    ]);
    GeneratorTerms {
        adv_f,
        adv_b,
        reg_fake,
        sp,
        rec_terms,
        rec,
        full,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms {
    pub adv_f: Var,
    pub adv_b: Var,
    pub reg_real: Var,
    pub full: Var,
}

/// `full_d` on real images and the supplied fakes (detach them for training).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_terms<T: Real>(
    g: &mut Graph<T>,
    nets: &Networks<T>,
    x: Var,
    y: Var,
    fake_y: Var,
    fake_x: Var,
    real_labels: &[LabelTriple],
    w: &LossWeights,
) -> DiscriminatorTerms {
    let real = nets.disc_style.forward(g, y);
    let fake = nets.disc_style.forward(g, fake_y);
    let r = g.neg_log_sigmoid_mean(real.realness, true);
    let f = g.neg_log_sigmoid_mean(fake.realness, false);
    let adv_f = g.weighted_sum(&[(r, T::one()), (f, T::one())]);
    let reg_real = regression(g, real.logits, real_labels);
    let real_x = nets.disc_content.forward(g, x);
    let fake_x = nets.disc_content.forward(g, fake_x);
    let r = g.neg_log_sigmoid_mean(real_x, true);
    let f = g.neg_log_sigmoid_mean(fake_x, false);
    let adv_b = g.weighted_sum(&[(r, T::one()), (f, T::one())]);
    let full = g.weighted_sum(&[(adv_f, T::one()), (adv_b, T::one()), (reg_real, T::lit(w.lambda_reg))]);
    DiscriminatorTerms {
        adv_f,
        adv_b,
        reg_real,
        full,
    }
}

pub fn report<T: Real>(gen: (&Graph<T>, &GeneratorTerms), disc: (&Graph<T>, &DiscriminatorTerms)) -> LossReport {
    let (gg, gt) = gen;
    let (dg, dt) = disc;
    let s = |g: &Graph<T>, v: Var| g.scalar(v).to_f64().unwrap_or(f64::NAN);
    LossReport {
        adv_f: s(dg, dt.adv_f),
        adv_b: s(dg, dt.adv_b),
        adv_f_gen: s(gg, gt.adv_f),
        adv_b_gen: s(gg, gt.adv_b),
        reg_real: s(dg, dt.reg_real),
        reg_fake: s(gg, gt.reg_fake),
        sp: s(gg, gt.sp),
        rec: s(gg, gt.rec),
        rec_cycle_x: s(gg, gt.rec_terms[0]),
        rec_cycle_y: s(gg, gt.rec_terms[1]),
        rec_idt_y: s(gg, gt.rec_terms[2]),
        rec_idt_x: s(gg, gt.rec_terms[3]),
        full_g: s(gg, gt.full),
        full_d: s(dg, dt.full),
    }
}
