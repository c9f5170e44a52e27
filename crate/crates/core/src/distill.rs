//! Distillation objectives for the teacher/student pair and the per-round
//! decay of the distillation weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_temperature, LabelBatch, Tape, Tensor, Var};
use crate::prototype::{proto_mse_on, GlobalPrototypeTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f32,
    /// Weight of the distillation terms in the student loss. Decays each round.
    pub alpha_s: f32,
    /// Weight of the prototype term in the student loss.
    pub beta_s: f32,
    /// Weight of the prototype term in the teacher loss.
    pub beta_t: f32,
    /// `alpha_s` is forced to 0 once it drops below this value.
    pub beta_limit: f32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            alpha_s: 1.0,
            beta_s: 1.0,
            beta_t: 1.0,
            beta_limit: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        for (name, v) in [
            ("alpha_s", self.alpha_s),
            ("beta_s", self.beta_s),
            ("beta_t", self.beta_t),
            ("beta_limit", self.beta_limit),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter {
                    name,
                    reason: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        if self.alpha_s > 1.0 {
            return Err(Error::Parameter {
                name: "alpha_s",
                reason: format!("must lie in [0, 1], got {}", self.alpha_s),
            });
        }
        Ok(())
    }

    /// True while the student still learns from the teacher.
    pub fn teacher_active(&self) -> bool {
        self.alpha_s > 0.0
    }
}

/// Halves `alpha_s`, zeroing it once it falls below `beta_limit`.
/// Call once per completed round.
pub fn decay_alpha(cfg: DistillConfig) -> DistillConfig {
    let mut alpha = cfg.alpha_s / 2.0;
    if alpha < cfg.beta_limit {
        alpha = 0.0;
    }
    DistillConfig {
        alpha_s: alpha,
        ..cfg
    }
}

/// Records `KL(softmax(y_t/T) ‖ softmax(y_s/T)) · T²` on `tape`.
pub fn kd_loss_on(tape: &mut Tape, y_s: Var, y_t: Var, temperature: f32) -> Result<Var> {
    let (s, t) = (tape.value(y_s).shape(), tape.value(y_t).shape());
    if s != t {
        return Err(Error::dim("kd_loss", format!("{t:?}"), format!("{s:?}")));
    }
    let p_t = tape.softmax_t(y_t, temperature)?;
    let log_p_s = tape.log_softmax_t(y_s, temperature)?;
    let kl = tape.kl_div(p_t, log_p_s)?;
    tape.scale(kl, temperature * temperature)
}

pub fn kd_loss(y_s: &Tensor, y_t: &Tensor, temperature: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let s = tape.constant(y_s.detached())?;
    let t = tape.constant(y_t.detached())?;
    let loss = kd_loss_on(&mut tape, s, t, temperature)?;
    Ok(tape.scalar(loss))
}

/// Teacher outputs for a batch, consumed as constants by the student loss.
#[derive(Clone, Copy, Debug)]
pub struct TeacherOutputs<'a> {
    pub logits: &'a Tensor,
    pub repr: &'a Tensor,
}

/// Records the student objective:
/// `CE + β_s·proto_mse + α_s·(kd + mse(repr_s, repr_t))`.
///
/// Zero-weighted terms are not recorded at all, so with `α_s = β_s = 0` the
/// loss and its gradient are exactly the cross-entropy path. `teacher` may be
/// `None` only when `α_s = 0`.
pub fn student_loss_on(
    tape: &mut Tape,
    logits: Var,
    repr: Var,
    teacher: Option<TeacherOutputs<'_>>,
    labels: &LabelBatch,
    table: &GlobalPrototypeTable,
    cfg: &DistillConfig,
) -> Result<Var> {
    let mut terms = vec![tape.cross_entropy(logits, labels)?];
    if cfg.beta_s != 0.0 && !table.is_empty() {
        let p = proto_mse_on(tape, repr, labels, table)?;
        terms.push(tape.scale(p, cfg.beta_s)?);
    }
    if cfg.alpha_s != 0.0 {
        let t = teacher.ok_or_else(|| {
            Error::State("student loss with alpha_s > 0 needs teacher outputs".into())
        })?;
        let rs = tape.value(repr);
        if rs.shape() != t.repr.shape() {
            return Err(Error::dim(
                "student_loss (teacher repr)",
                format!("{:?}", rs.shape()),
                format!("{:?}", t.repr.shape()),
            ));
        }
        let y_t = tape.constant(t.logits.detached())?;
        let r_t = tape.constant(t.repr.detached())?;
        let kd = kd_loss_on(tape, logits, y_t, cfg.temperature)?;
        let rm = tape.mse(repr, r_t)?;
        let inner = tape.add(&[kd, rm])?;
        terms.push(tape.scale(inner, cfg.alpha_s)?);
    }
    if terms.len() == 1 {
        Ok(terms[0])
    } else {
        tape.add(&terms)
    }
}

/// Records the teacher objective: `CE + β_t·proto_mse`.
pub fn teacher_loss_on(
    tape: &mut Tape,
    logits: Var,
    repr: Var,
    labels: &LabelBatch,
    table: &GlobalPrototypeTable,
    beta_t: f32,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if beta_t == 0.0 || table.is_empty() {
        return Ok(ce);
    }
    let p = proto_mse_on(tape, repr, labels, table)?;
    let p = tape.scale(p, beta_t)?;
    tape.add(&[ce, p])
}

/// Eager student loss value.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    y_s: &Tensor,
    y_t: &Tensor,
    repr_s: &Tensor,
    repr_t: &Tensor,
    labels: &LabelBatch,
    table: &GlobalPrototypeTable,
    cfg: &DistillConfig,
) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(y_s.detached())?;
    let r = tape.constant(repr_s.detached())?;
    let teacher = TeacherOutputs {
        logits: y_t,
        repr: repr_t,
    };
    let loss = student_loss_on(&mut tape, l, r, Some(teacher), labels, table, cfg)?;
    Ok(tape.scalar(loss))
}

/// Eager teacher loss value.
pub fn teacher_loss(
    y_t: &Tensor,
    repr_t: &Tensor,
    labels: &LabelBatch,
    table: &GlobalPrototypeTable,
    beta_t: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(y_t.detached())?;
    let r = tape.constant(repr_t.detached())?;
    let loss = teacher_loss_on(&mut tape, l, r, labels, table, beta_t)?;
    Ok(tape.scalar(loss))
}
