//! Softmax contrastive loss over one positive score and a set of negative scores.

/// `-log(exp(pos) / (exp(pos) + Σ exp(neg)))`, stabilized by subtracting the maximum score.
pub fn contrastive_loss(pos: f64, negs: &[f64]) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let max = negs.iter().copied().fold(pos, f64::max);
    let rest: f64 = negs.iter().map(|s| (s - max).exp()).sum::<f64>();
    log_partition(pos, max, rest) + (max - pos)
}

/// `ln(exp(pos - max) + rest)`, using `ln_1p` when the positive term is the maximum so
/// that small losses do not round to zero.
fn log_partition(pos: f64, max: f64, rest: f64) -> f64 {
    if pos == max {
        rest.ln_1p()
    } else {
        ((pos - max).exp() + rest).ln()
    }
}

/// Loss together with its gradient with respect to each score.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

pub fn contrastive_loss_grad(pos: f64, negs: &[f64]) -> LossGrad {
    if negs.is_empty() {
        return LossGrad { loss: 0.0, d_pos: 0.0, d_negs: Vec::new() };
    }
    let max = negs.iter().copied().fold(pos, f64::max);
    let e_pos = (pos - max).exp();
    let e_negs: Vec<f64> = negs.iter().map(|s| (s - max).exp()).collect();
    let sum = e_pos + e_negs.iter().sum::<f64>();
    LossGrad {
        loss: log_partition(pos, max, e_negs.iter().sum()) + (max - pos),
        d_pos: e_pos / sum - 1.0,
        d_negs: e_negs.iter().map(|e| e / sum).collect(),
    }
}
