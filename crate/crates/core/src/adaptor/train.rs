use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::net::{AdaptorNet, Dropout, NetShape};
use super::{select_lambda_threshold, Adaptor, FeatureMask, Features, Standardizer};
use crate::error::{invalid, Result};

/// One training token: its features and the two component probabilities of
/// the observed next token.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorExample {
    pub features: Features,
    pub p_knn: f64,
    pub p_nlm: f64,
}

/// Network input after masking and standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub ctx: Vec<f64>,
    pub scalars: Vec<f64>,
    pub p_knn: f64,
    pub p_nlm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorConfig {
    /// Weight of the penalty on λ.
    pub l1: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: usize,
    /// Fraction of examples (taken from the end) held out for selection.
    pub holdout: f64,
    /// Retrieval-pruning fraction at which held-out perplexity selects the
    /// checkpoint.
    pub select_prune_fraction: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout: f64,
    pub mask: FeatureMask,
    pub seed: u64,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            l1: 0.05,
            learning_rate: 5e-4,
            epochs: 20,
            batch_size: 256,
            patience: 5,
            holdout: 0.1,
            select_prune_fraction: 0.5,
            hidden_layers: 4,
            hidden_width: 128,
            dropout: 0.2,
            mask: FeatureMask::ALL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_holdout_ppl: f64,
    pub num_train: usize,
    pub num_holdout: usize,
    pub num_params: usize,
}

/// `−(1/T)·Σ [ln(λ·p_knn + (1−λ)·p_nlm) − a·λ]` and its gradient with
/// respect to every network parameter.
pub fn loss_and_grad(
    net: &AdaptorNet,
    batch: &[PreparedExample],
    l1: f64,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let t = batch.len() as f64;
    let mut grad = vec![0.0; net.num_params()];
    let mut loss = 0.0;
    for ex in batch {
        let drop = dropout.as_mut().map(|(rate, rng)| Dropout {
            rate: *rate,
            rng,
        });
        let trace = net.forward(&ex.ctx, &ex.scalars, drop)?;
        let lambda = trace.lambda();
        let mix = lambda * ex.p_knn + (1.0 - lambda) * ex.p_nlm;
        loss -= (mix.ln() - l1 * lambda) / t;
        let dl_dlambda = -((ex.p_knn - ex.p_nlm) / mix - l1) / t;
        let g = dl_dlambda * lambda * (1.0 - lambda);
        net.backward(&trace, &ex.scalars, [g, -g], &mut grad);
    }
    Ok((loss, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Perplexity over `examples` when retrieval is skipped for every λ at or
/// below `threshold`.
pub fn gated_perplexity(lambdas: &[f64], examples: &[PreparedExample], threshold: f64) -> f64 {
    let nll: f64 = lambdas
        .iter()
        .zip(examples)
        .map(|(&l, ex)| {
            let l = if l <= threshold { 0.0 } else { l };
            -(l * ex.p_knn + (1.0 - l) * ex.p_nlm).ln()
        })
        .sum();
    (nll / examples.len() as f64).exp()
}

fn lambdas(net: &AdaptorNet, examples: &[PreparedExample]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| Ok(net.forward(&ex.ctx, &ex.scalars, None)?.lambda()))
        .collect()
}

/// Number of trailing examples held out for checkpoint selection; at least
/// one example stays on each side. Requires `n >= 2`.
pub fn holdout_count(n: usize, holdout: f64) -> usize {
    ((n as f64 * holdout).round() as usize).clamp(1, n - 1)
}

/// Mini-batch Adam on the λ objective. The returned adaptor's parameters are
/// rounded to `f32` and its threshold is the held-out λ quantile at
/// `select_prune_fraction`.
pub fn train_adaptor(examples: &[AdaptorExample], config: &AdaptorConfig) -> Result<(Adaptor, TrainLog)> {
    if examples.len() < 2 {
        return invalid("adaptor training needs at least two examples");
    }
    if !(config.holdout > 0.0 && config.holdout < 1.0) {
        return invalid("holdout fraction must be in (0, 1)");
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return invalid("batch size and epochs must be positive");
    }
    if !(0.0..1.0).contains(&config.dropout) || config.l1 < 0.0 {
        return invalid("dropout must be in [0, 1) and the penalty non-negative");
    }
    if examples.iter().any(|e| !(e.p_nlm > 0.0) || !(0.0..=1.0).contains(&e.p_knn)) {
        return invalid("example probabilities must satisfy p_nlm > 0 and p_knn in [0, 1]");
    }
    let n_hold = holdout_count(examples.len(), config.holdout);
    let (train, hold) = examples.split_at(examples.len() - n_hold);
    let ctx_dim = train[0].features.ctx.len();
    let standardizer = Standardizer::fit(train.iter().map(|e| &e.features));
    let prepare = |ex: &AdaptorExample| -> Result<PreparedExample> {
        let (ctx, scalars) = config.mask.inputs(&ex.features, &standardizer)?;
        Ok(PreparedExample {
            ctx,
            scalars,
            p_knn: ex.p_knn,
            p_nlm: ex.p_nlm,
        })
    };
    let train: Vec<PreparedExample> = train.iter().map(prepare).collect::<Result<_>>()?;
    let hold: Vec<PreparedExample> = hold.iter().map(prepare).collect::<Result<_>>()?;

    let shape = NetShape {
        ctx_dim: if config.mask.ctx { ctx_dim } else { 0 },
        scalars: config.mask.num_scalars(),
        embed_dim: super::embed_dim(ctx_dim),
        hidden_layers: config.hidden_layers,
        hidden_width: config.hidden_width,
    };
    let mut net = AdaptorNet::new(shape, config.seed)?;
    let mut adam = Adam::new(net.num_params(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xada));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let evaluate = |net: &AdaptorNet| -> Result<f64> {
        let ls = lambdas(net, &hold)?;
        let thr = select_lambda_threshold(&ls, config.select_prune_fraction)?;
        Ok(gated_perplexity(&ls, &hold, thr))
    };
    let mut best = (evaluate(&net)?, net.params().to_vec(), 0);
    let mut log = Vec::new();
    let mut stale = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut rng));
            let (loss, grad) = loss_and_grad(&net, &batch, config.l1, dropout)?;
            total += loss * chunk.len() as f64;
            adam.update(net.params_mut(), &grad);
        }
        let ppl = evaluate(&net)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            holdout_ppl: ppl,
        });
        if ppl < best.0 {
            best = (ppl, net.params().to_vec(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let mut net = AdaptorNet::from_params(shape, best.1)?;
    net.round_to_f32();
    let ls = lambdas(&net, &hold)?;
    let threshold = select_lambda_threshold(&ls, config.select_prune_fraction)?;
    let best_ppl = gated_perplexity(&ls, &hold, threshold);
    let num_params = net.num_params();
    let adaptor = Adaptor {
        net,
        mask: config.mask,
        standardizer,
        threshold,
    };
    Ok((
        adaptor,
        TrainLog {
            epochs: log,
            best_epoch: best.2,
            best_holdout_ppl: best_ppl,
            num_train: train.len(),
            num_holdout: hold.len(),
            num_params,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (AdaptorNet, Vec<PreparedExample>) {
        let shape = NetShape {
            ctx_dim: 3,
            scalars: 2,
            embed_dim: 4,
            hidden_layers: 2,
            hidden_width: 6,
        };
        let mut net = AdaptorNet::new(shape, 3).unwrap();
        // Zero biases put pre-activations exactly on the ReLU kink.
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p += 0.05 * (i as f64).sin();
        }
        let batch = (0..4)
            .map(|i| PreparedExample {
                ctx: vec![0.3 * i as f64 - 0.4, 0.2, -0.1 * i as f64],
                scalars: vec![0.5 - 0.3 * i as f64, 1.0 + 0.1 * i as f64],
                p_knn: [0.9, 0.0, 0.4, 0.05][i],
                p_nlm: [0.1, 0.3, 0.4, 0.2][i],
            })
            .collect();
        (net, batch)
    }

    #[test]
    fn finite_differences() {
        let (net, batch) = tiny();
        let (_, grad) = loss_and_grad(&net, &batch, 0.05, None).unwrap();
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let lp = loss_and_grad(&plus, &batch, 0.05, None).unwrap().0;
            let lm = loss_and_grad(&minus, &batch, 0.05, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn flat_objective_has_zero_output_gradient() {
        let (net, mut batch) = tiny();
        for ex in &mut batch {
            ex.p_knn = ex.p_nlm;
        }
        let (_, grad) = loss_and_grad(&net, &batch, 0.0, None).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_loss() {
        let (mut net, batch) = tiny();
        net.zero_output_layer();
        let (loss, _) = loss_and_grad(&net, &batch[..1], 0.05, None).unwrap();
        let want = -((0.5f64 * 0.9 + 0.5 * 0.1).ln() - 0.05 * 0.5);
        assert!((loss - want).abs() < 1e-12);
    }
}
