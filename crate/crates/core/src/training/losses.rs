use super::TrainError;
use crate::tensor::{Real, Tape, Var};

const PROB_SUM_TOL: f64 = 1e-6;

/// Checks that `q` is a probability vector (non-negative, sums to 1 ± 1e-6).
pub fn validate_probabilities<F: Real>(q: &[F]) -> Result<(), TrainError> {
    if q.is_empty() {
        return Err(TrainError::InvalidProbabilities("empty vector".into()));
    }
    let mut sum = 0.0;
    for &v in q {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() || v < 0.0 {
            return Err(TrainError::InvalidProbabilities(format!("entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(TrainError::InvalidProbabilities(format!("sums to {sum}")));
    }
    Ok(())
}

fn check_label(label: usize, n: usize) -> Result<(), TrainError> {
    if label >= n {
        return Err(TrainError::InvalidLabel {
            label,
            n_classes: n,
        });
    }
    Ok(())
}

fn log_softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy_hard<F: Real>(logits: &[F], label: usize) -> Result<F, TrainError> {
    check_label(label, logits.len())?;
    Ok(-log_softmax(logits)[label])
}

/// `−Σ q_i log p_i` with `p = softmax(student_logits / temperature)`.
pub fn distill_loss<F: Real>(student_logits: &[F], teacher_soft: &[F], temperature: f64) -> Result<F, TrainError> {
    validate_probabilities(teacher_soft)?;
    check_temperature(temperature)?;
    if student_logits.len() != teacher_soft.len() {
        return Err(TrainError::Shape(format!(
            "{} logits against {} soft labels",
            student_logits.len(),
            teacher_soft.len()
        )));
    }
    let inv_t = F::lit(1.0 / temperature);
    let scaled: Vec<F> = student_logits.iter().map(|&v| v * inv_t).collect();
    Ok(-log_softmax(&scaled)
        .iter()
        .zip(teacher_soft)
        .map(|(&lp, &q)| q * lp)
        .sum::<F>())
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy<F: Real>(q: &[F]) -> F {
    -q.iter()
        .filter(|&&v| v > F::zero())
        .map(|&v| v * v.ln())
        .sum::<F>()
}

pub(crate) fn check_temperature(t: f64) -> Result<(), TrainError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(TrainError::Config(format!("temperature {t} must be positive")));
    }
    Ok(())
}

/// Tape version of [`cross_entropy_hard`] on `[K]` logits.
pub fn cross_entropy_hard_tape<F: Real>(tape: &mut Tape<F>, logits: Var, label: usize) -> Result<Var, TrainError> {
    let n = tape.value(logits).len();
    check_label(label, n)?;
    let logp = tape.log_softmax(logits)?;
    let mut w = vec![F::zero(); n];
    w[label] = -F::one();
    Ok(tape.dot_const(logp, &w)?)
}

/// Tape version of [`distill_loss`] on `[K]` logits.
pub fn distill_loss_tape<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    teacher_soft: &[F],
    temperature: f64,
) -> Result<Var, TrainError> {
    validate_probabilities(teacher_soft)?;
    check_temperature(temperature)?;
    let n = tape.value(logits).len();
    if n != teacher_soft.len() {
        return Err(TrainError::Shape(format!(
            "{n} logits against {} soft labels",
            teacher_soft.len()
        )));
    }
    let scaled = if temperature == 1.0 {
        logits
    } else {
        tape.scale(logits, F::lit(1.0 / temperature))?
    };
    let logp = tape.log_softmax(scaled)?;
    let w: Vec<F> = teacher_soft.iter().map(|&q| -q).collect();
    Ok(tape.dot_const(logp, &w)?)
}
