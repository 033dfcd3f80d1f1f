//! Cross-entropy training with a hand-written backward pass.
//!
//! `backward` mirrors `Model::forward_cached` block by block; `grad_check`
//! compares it against central finite differences of the plain inference
//! forward, so the two paths are checked against each other.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gelu_grad, BlockCache, ForwardCache, Model, TokenSequence, Weights};
use crate::numerics::{matmul_at_acc, matmul_bt_acc, Matrix};
use crate::tasks::{accuracy, SyntheticSample, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Heavy-ball momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Curve sampling interval in steps.
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            n_steps: 800,
            batch_size: 16,
            seed: 99,
            eval_every: 200,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("train.learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("train.momentum must be in [0, 1)"));
        }
        if self.n_steps == 0 {
            return Err(Error::usage("train.n_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("train.batch_size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::usage("train.eval_every must be >= 1"));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::usage("train.grad_clip must be >= 0"));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[target]`.
pub fn loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::usage(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Loss and parameter gradients for one sequence.
pub fn loss_and_grad(model: &Model, seq: &TokenSequence, target: usize) -> Result<(f64, Weights)> {
    let mut grads = Weights::zeros(&model.config);
    let l = accumulate_grad(model, seq, target, 1.0, &mut grads)?;
    Ok((l, grads))
}

/// Adds `weight * dLoss/dtheta` into `grads` and returns the loss.
pub(crate) fn accumulate_grad(
    model: &Model,
    seq: &TokenSequence,
    target: usize,
    weight: f64,
    grads: &mut Weights,
) -> Result<f64> {
    let (logits, cache) = model.forward_cached(seq)?;
    let l = loss(&logits, target)?;
    let mut dlogits = logits;
    crate::numerics::softmax_in_place(&mut dlogits);
    dlogits[target] -= 1.0;
    for v in &mut dlogits {
        *v *= weight;
    }
    backward(model, seq, &cache, &dlogits, grads);
    Ok(l)
}

fn layer_norm_backward(
    x: &[f64],
    stats: (f64, f64),
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let (mean, rstd) = stats;
    let n = x.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dx[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

fn sum_rows_into(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

fn backward(model: &Model, seq: &TokenSequence, cache: &ForwardCache, dlogits: &[f64], g: &mut Weights) {
    let cfg = &model.config;
    let w = &model.weights;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let t = seq.len();
    let ans = seq.answer_pos();

    // unembedding
    matmul_at_acc(&cache.lnf_out, dlogits, g.w_unembed.data_mut(), 1, d, v);
    for (b, dl) in g.b_unembed.iter_mut().zip(dlogits) {
        *b += dl;
    }
    let mut dnormed = vec![0.0; d];
    matmul_bt_acc(dlogits, w.w_unembed.data(), &mut dnormed, 1, v, d);

    let mut dx = Matrix::zeros(t, d);
    layer_norm_backward(
        &cache.x_final,
        cache.lnf_stats,
        &w.lnf_gain,
        &dnormed,
        &mut g.lnf_gain,
        &mut g.lnf_bias,
        dx.row_mut(ans),
    );

    for (layer, c) in cache.blocks.iter().enumerate().rev() {
        dx = block_backward(model, layer, c, &dx, g);
    }

    for (pos, &tok) in seq.tokens().iter().enumerate() {
        let row = dx.row(pos);
        for (gv, dv) in g.tok_emb.row_mut(tok).iter_mut().zip(row) {
            *gv += dv;
        }
        for (gv, dv) in g.pos_emb.row_mut(pos).iter_mut().zip(row) {
            *gv += dv;
        }
    }
}

/// Returns the gradient w.r.t. the block input.
fn block_backward(model: &Model, layer: usize, c: &BlockCache, dout: &Matrix, g: &mut Weights) -> Matrix {
    let cfg = &model.config;
    let lw = &model.weights.layers[layer];
    let gl = &mut g.layers[layer];
    let t = dout.rows();
    let d = cfg.d_model;
    let f = cfg.d_ff();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP: out = x_mid + gelu(ln2(x_mid) W_fc + b_fc) W_proj + b_proj
    let mut dx_mid = dout.clone();
    matmul_at_acc(c.fc_act.data(), dout.data(), gl.w_proj.data_mut(), t, f, d);
    sum_rows_into(dout, &mut gl.b_proj);
    let mut dfc = Matrix::zeros(t, f);
    matmul_bt_acc(dout.data(), lw.w_proj.data(), dfc.data_mut(), t, d, f);
    for (dv, pre) in dfc.data_mut().iter_mut().zip(c.fc_pre.data()) {
        *dv *= gelu_grad(*pre);
    }
    matmul_at_acc(c.ln2_out.data(), dfc.data(), gl.w_fc.data_mut(), t, d, f);
    sum_rows_into(&dfc, &mut gl.b_fc);
    let mut dln2 = Matrix::zeros(t, d);
    matmul_bt_acc(dfc.data(), lw.w_fc.data(), dln2.data_mut(), t, f, d);
    for r in 0..t {
        layer_norm_backward(
            c.x_mid.row(r),
            c.ln2_stats[r],
            &lw.ln2_gain,
            dln2.row(r),
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
            dx_mid.row_mut(r),
        );
    }

    // attention: x_mid = x_in + ctx W_o + b_o
    let mut dx_in = dx_mid.clone();
    matmul_at_acc(c.ctx.data(), dx_mid.data(), gl.w_attn_out.data_mut(), t, d, d);
    sum_rows_into(&dx_mid, &mut gl.b_attn_out);
    let mut dctx = Matrix::zeros(t, d);
    matmul_bt_acc(dx_mid.data(), lw.w_attn_out.data(), dctx.data_mut(), t, d, d);

    let mut dqkv = Matrix::zeros(t, 3 * d);
    let mut dp = vec![0.0; t];
    for (h, p) in c.probs.iter().enumerate() {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        for i in 0..t {
            let dctx_i = &dctx.row(i)[q_off..q_off + hd];
            if dctx_i.iter().all(|&x| x == 0.0) {
                continue;
            }
            // dP[i, j] and dV
            let mut weighted = 0.0;
            for j in 0..=i {
                let pij = p.get(i, j);
                let vj = &c.qkv.row(j)[v_off..v_off + hd];
                dp[j] = crate::numerics::dot(dctx_i, vj);
                weighted += pij * dp[j];
                let dv = &mut dqkv.row_mut(j)[v_off..v_off + hd];
                for (a, b) in dv.iter_mut().zip(dctx_i) {
                    *a += pij * b;
                }
            }
            // softmax backward, then scores = scale * q_i . k_j
            let qi: Vec<f64> = c.qkv.row(i)[q_off..q_off + hd].to_vec();
            let mut dq = vec![0.0; hd];
            for j in 0..=i {
                let ds = p.get(i, j) * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &c.qkv.row(j)[k_off..k_off + hd];
                for (a, b) in dq.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dk = &mut dqkv.row_mut(j)[k_off..k_off + hd];
                for (a, b) in dk.iter_mut().zip(&qi) {
                    *a += ds * b;
                }
            }
            for (a, b) in dqkv.row_mut(i)[q_off..q_off + hd].iter_mut().zip(&dq) {
                *a += b;
            }
        }
    }
    matmul_at_acc(c.ln1_out.data(), dqkv.data(), gl.w_qkv.data_mut(), t, d, 3 * d);
    let mut dln1 = Matrix::zeros(t, d);
    matmul_bt_acc(dqkv.data(), lw.w_qkv.data(), dln1.data_mut(), t, 3 * d, d);
    for r in 0..t {
        layer_norm_backward(
            c.x_in.row(r),
            c.ln1_stats[r],
            &lw.ln1_gain,
            dln1.row(r),
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
            dx_in.row_mut(r),
        );
    }
    dx_in
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub n_checked: usize,
    /// `(tensor name, flat index)` of the worst entry.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the analytic gradient with central differences on a seeded
/// subsample of at least `min_params` entries spread across every tensor.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    model: &Model,
    seq: &TokenSequence,
    target: usize,
    eps: f64,
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::usage(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let (_, grads) = loss_and_grad(model, seq, target)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let names: Vec<String> = model.weights.tensors().iter().map(|t| t.name.clone()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_tensor = min_params.div_ceil(sizes.len()).max(1);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        picks.extend(idx.into_iter().take(per_tensor).map(|i| (ti, i)));
    }
    // top up from random tensors if small tensors could not supply their share
    while picks.len() < min_params {
        let ti = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[ti]);
        if !picks.contains(&(ti, i)) {
            picks.push((ti, i));
        }
    }

    let mut probe = model.clone();
    let eval_loss = |m: &Model| -> Result<f64> { loss(&m.forward(seq, &[], false)?.logits, target) };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        n_checked: picks.len(),
        worst: (String::new(), 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &(ti, i) in &picks {
        let orig = probe.weights.tensors_mut()[ti][i];
        probe.weights.tensors_mut()[ti][i] = orig + eps;
        let up = eval_loss(&probe)?;
        probe.weights.tensors_mut()[ti][i] = orig - eps;
        let down = eval_loss(&probe)?;
        probe.weights.tensors_mut()[ti][i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[ti][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_relative_error || report.worst.0.is_empty() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = (names[ti].clone(), i);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean cross-entropy of the batch drawn at `step` (before the update).
    pub loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub final_eval_accuracy: f64,
}

/// SGD (with optional momentum and global-norm clipping) on mean batch
/// cross-entropy. The curve is sampled at step 0, every `eval_every` steps,
/// and after the last step.
pub fn train(
    model: Model,
    vocab: &Vocab,
    train_set: &[SyntheticSample],
    eval_set: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::usage("train and eval sets must be non-empty"));
    }
    let train_seqs: Vec<TokenSequence> = train_set
        .iter()
        .map(|s| vocab.sequence(s))
        .collect::<Result<_>>()?;

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Weights::zeros(&model.config);
    let mut curve = Vec::new();
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.n_steps {
        let mut grads = Weights::zeros(&model.config);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..train_seqs.len());
            batch_loss +=
                accumulate_grad(&model, &train_seqs[i], train_set[i].answer, inv_batch, &mut grads)?;
        }
        batch_loss *= inv_batch;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {batch_loss}"),
            });
        }
        if step % cfg.eval_every == 0 {
            curve.push(CurvePoint {
                step,
                loss: batch_loss,
                eval_accuracy: accuracy(&model, vocab, eval_set, &[])?,
            });
        }

        let mut clip = 1.0;
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "gradient norm is not finite".into(),
                });
            }
            if norm > cfg.grad_clip {
                clip = cfg.grad_clip / norm;
            }
        }
        for ((p, vel), gr) in model
            .weights
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((pv, vv), gv) in p.iter_mut().zip(vel.iter_mut()).zip(gr.data) {
                *vv = cfg.momentum * *vv + clip * gv;
                *pv -= cfg.learning_rate * *vv;
            }
        }
    }

    let final_eval_accuracy = accuracy(&model, vocab, eval_set, &[])?;
    let final_loss = {
        let mut total = 0.0;
        let n = train_seqs.len().min(cfg.batch_size);
        for (seq, s) in train_seqs.iter().zip(train_set).take(n) {
            total += loss(&model.forward(seq, &[], false)?.logits, s.answer)?;
        }
        total / n as f64
    };
    curve.push(CurvePoint {
        step: cfg.n_steps,
        loss: final_loss,
        eval_accuracy: final_eval_accuracy,
    });
    Ok(TrainOutcome {
        model,
        curve,
        final_eval_accuracy,
    })
}

/// Writes `step,loss,eval_accuracy`.
pub fn write_curve_csv(path: &std::path::Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["step", "loss", "eval_accuracy"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for p in curve {
        w.write_record([p.step.to_string(), p.loss.to_string(), p.eval_accuracy.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
