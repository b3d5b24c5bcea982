//! DPO and SFT objectives with exact gradients over the policy logits.

use crate::policy::{GradTable, RefLogProbCache, SeqLogProb, TinyPolicy};

use super::{DpoConfig, DpoExample, ResponseSide, SftExample, TrainError};

/// `-ln sigmoid(x) = softplus(-x)`, stable for large |x|.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    let y = -x;
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value, gradient of the loss w.r.t. the logits, and for DPO the
/// implicit preference logit.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: GradTable,
    pub logit: Option<f64>,
}

fn normalized(lp: SeqLogProb, average: bool) -> f64 {
    if average {
        lp.mean()
    } else {
        lp.sum_logprob
    }
}

fn ref_logprob(
    cache: &RefLogProbCache,
    ex: &DpoExample,
    side: ResponseSide,
) -> Result<SeqLogProb, TrainError> {
    let tokens = match side {
        ResponseSide::Chosen => &ex.chosen,
        ResponseSide::Rejected => &ex.rejected,
    };
    cache
        .get(&ex.prompt_id, tokens)
        .ok_or_else(|| TrainError::CacheMiss {
            prompt_id: ex.prompt_id.clone(),
            which: side,
        })
}

/// `beta * [(l_pol(w) - l_ref(w)) - (l_pol(l) - l_ref(l))]` without gradients.
pub fn dpo_logit(
    policy: &TinyPolicy,
    cache: &RefLogProbCache,
    ex: &DpoExample,
    cfg: &DpoConfig,
) -> Result<f64, TrainError> {
    let rw = ref_logprob(cache, ex, ResponseSide::Chosen)?;
    let rl = ref_logprob(cache, ex, ResponseSide::Rejected)?;
    let pw = policy.seq_logprob(&ex.prompt, &ex.chosen)?;
    let pl = policy.seq_logprob(&ex.prompt, &ex.rejected)?;
    let avg = cfg.use_average_logprob;
    Ok(cfg.beta
        * ((normalized(pw, avg) - normalized(rw, avg))
            - (normalized(pl, avg) - normalized(rl, avg))))
}

/// DPO loss `-ln sigmoid(logit)` and its gradient via the chain rule through
/// both sequence log-probabilities.
pub fn dpo_loss(
    policy: &TinyPolicy,
    cache: &RefLogProbCache,
    ex: &DpoExample,
    cfg: &DpoConfig,
) -> Result<LossOutput, TrainError> {
    let rw = ref_logprob(cache, ex, ResponseSide::Chosen)?;
    let rl = ref_logprob(cache, ex, ResponseSide::Rejected)?;
    let avg = cfg.use_average_logprob;
    let (sw, sl) = if avg {
        (1.0 / rw.token_count as f64, 1.0 / rl.token_count as f64)
    } else {
        (1.0, 1.0)
    };
    // grad = d/dlogits [ l_pol(w)/n_w - l_pol(l)/n_l ]
    let mut grad = GradTable::new(policy.vocab().output_size());
    let pw = policy.accumulate_grad(&ex.prompt, &ex.chosen, sw, &mut grad)?;
    let pl = policy.accumulate_grad(&ex.prompt, &ex.rejected, -sl, &mut grad)?;
    let logit = cfg.beta
        * ((normalized(pw, avg) - normalized(rw, avg))
            - (normalized(pl, avg) - normalized(rl, avg)));
    let loss = neg_log_sigmoid(logit);
    // d loss / d logit = -sigmoid(-logit)
    grad.scale(-sigmoid(-logit) * cfg.beta);
    Ok(LossOutput {
        loss,
        grad,
        logit: Some(logit),
    })
}

/// Mean token cross-entropy of the response (EOS included).
pub fn sft_loss(policy: &TinyPolicy, ex: &SftExample) -> Result<LossOutput, TrainError> {
    if ex.response.is_empty() {
        return Err(TrainError::EmptyTarget(ex.prompt_id.clone()));
    }
    let mut grad = GradTable::new(policy.vocab().output_size());
    let count = ex.response.len() + 1;
    let lp = policy.accumulate_grad(&ex.prompt, &ex.response, -1.0 / count as f64, &mut grad)?;
    Ok(LossOutput {
        loss: -lp.sum_logprob / lp.token_count as f64,
        grad,
        logit: None,
    })
}
