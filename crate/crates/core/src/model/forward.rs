use std::sync::Arc;

use rand::Rng;

use super::config::{AttentionKind, ConvMode, ModelConfig};
use super::params::{build_layout, BlockParams, Linear, ModelParams, StageParams, Visit};
use crate::attention::{GroupPlan, HeadLayout};
use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Tape handles for every stage output.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    /// Features fed to the prediction head.
    pub features: Var,
    pub log_probs: Var,
    pub probs: Var,
}

/// Parameters registered as tape leaves.
pub struct TapeParams {
    pub stages: Vec<StageParams<Var>>,
}

impl TapeParams {
    pub fn register<R: Real>(tape: &mut Tape<R>, params: &ModelParams<R>) -> Self {
        let mut flat: Vec<Var> =
            params.named_tensors().into_iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        flat.reverse();
        let stages = build_layout(&params.config, |_, _, _, _| flat.pop().expect("same layout"));
        Self { stages }
    }

    /// Gradients in the parameter layout; tensors that did not influence the
    /// root get zeros.
    pub fn collect_grads<R: Real>(
        &self,
        params: &ModelParams<R>,
        grads: &mut Gradients<R>,
    ) -> Vec<(String, Mat<R>)> {
        let mut vars = Vec::new();
        self.stages.visit("", &mut |name, &v| vars.push((name, v)));
        vars.into_iter()
            .zip(params.named_tensors())
            .map(|((name, v), (_, m))| {
                let g = grads.take(v).unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
                (name, g)
            })
            .collect()
    }
}

/// Attention groupings for one sequence length, shared by every block.
struct Plans {
    windowed: Arc<GroupPlan>,
    longterm: Arc<GroupPlan>,
}

impl Plans {
    fn new(cfg: &ModelConfig, len: usize) -> Self {
        Self {
            windowed: Arc::new(GroupPlan::windowed(len, &cfg.attention)),
            longterm: Arc::new(GroupPlan::longterm(len, &cfg.attention)),
        }
    }

    fn get(&self, kind: AttentionKind) -> Arc<GroupPlan> {
        match kind {
            AttentionKind::Windowed => Arc::clone(&self.windowed),
            AttentionKind::LongTerm => Arc::clone(&self.longterm),
        }
    }
}

/// Per-call forward options.
pub struct ForwardMode<'a, G: Rng> {
    /// Random source for dropout; `None` evaluates deterministically.
    pub dropout_rng: Option<&'a mut G>,
}

fn linear<R: Real>(tape: &mut Tape<R>, x: Var, p: &Linear<Var>) -> Var {
    tape.linear(x, p.weight, p.bias)
}

#[allow(clippy::too_many_arguments)]
fn block<R: Real, G: Rng>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    p: &BlockParams<Var>,
    x: Var,
    context: Option<Var>,
    dilation: usize,
    plans: &Plans,
    rng: &mut Option<&mut G>,
) -> Result<Var> {
    let h = match &p.conv {
        Some(conv) if cfg.conv != ConvMode::None => {
            let c = tape.conv1d(x, conv.weight, conv.bias, dilation);
            tape.gelu(c)
        }
        _ => x,
    };
    let self_heads = HeadLayout { heads: cfg.heads, split_qk: true };
    let cross_heads = HeadLayout { heads: cfg.heads, split_qk: false };
    let mut a = h;
    for (i, kind) in cfg.attention_kinds().into_iter().enumerate() {
        let ap = &p.attention[i];
        let v = linear(tape, a, &ap.value);
        let (q, k, heads) = match (context, &ap.query, &ap.key) {
            (Some(ctx), None, None) => (ctx, ctx, cross_heads),
            (_, Some(qp), Some(kp)) => (linear(tape, a, qp), linear(tape, a, kp), self_heads),
            _ => return Err(Error::Invariant("attention projections do not match the stage".into())),
        };
        a = tape.attention(q, k, v, plans.get(kind), heads)?;
        if i == 0 {
            a = linear(tape, a, &p.mix);
        }
    }
    let mut out = linear(tape, a, &p.out);
    if let Some(r) = rng.as_deref_mut() {
        out = tape.dropout(out, cfg.dropout, r);
    }
    Ok(tape.add(x, out))
}

#[allow(clippy::too_many_arguments)]
fn stage<R: Real, G: Rng>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    index: usize,
    p: &StageParams<Var>,
    input: Var,
    context: Option<Var>,
    plans: &Plans,
    rng: &mut Option<&mut G>,
) -> Result<StageVars> {
    let mut x = linear(tape, input, &p.input);
    let context = if cfg.uses_cross_attention(index) { context } else { None };
    for (l, b) in p.blocks.iter().enumerate() {
        x = block(tape, cfg, b, x, context, cfg.dilation(l), plans, rng)?;
    }
    if let Some(r) = &p.reduce {
        x = linear(tape, x, r);
    }
    let logits = linear(tape, x, &p.head);
    let log_probs = tape.log_softmax(logits);
    let probs = tape.exp(log_probs);
    Ok(StageVars { features: x, log_probs, probs })
}

/// Runs every stage on `features` (`T × d_in`). Stage `s ≥ 2` embeds the
/// previous stage's probabilities and uses them as cross-attention context.
pub fn forward_on_tape<R: Real, G: Rng>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    params: &TapeParams,
    features: Var,
    mode: ForwardMode<'_, G>,
) -> Result<Vec<StageVars>> {
    let (len, dim) = tape.value(features).shape();
    if len == 0 {
        return Err(Error::Argument("cannot run the model on an empty sequence".into()));
    }
    if dim != cfg.d_in {
        return Err(Error::Argument(format!(
            "feature width {dim} does not match the model input width {}",
            cfg.d_in
        )));
    }
    let plans = Plans::new(cfg, len);
    let mut rng = mode.dropout_rng;
    if cfg.dropout <= 0.0 {
        rng = None;
    }
    let mut outputs: Vec<StageVars> = Vec::with_capacity(cfg.stages);
    for (s, p) in params.stages.iter().enumerate() {
        let (input, context) = match outputs.last() {
            None => (features, None),
            Some(prev) => (prev.probs, Some(prev.probs)),
        };
        outputs.push(stage(tape, cfg, s, p, input, context, &plans, &mut rng)?);
    }
    Ok(outputs)
}

/// Materialised output of one stage.
#[derive(Debug, Clone)]
pub struct StageOutput<R> {
    pub features: Mat<R>,
    /// Row-stochastic `T × C` class probabilities.
    pub probs: Mat<R>,
}

/// Deterministic inference pass.
pub fn model_forward<R: Real>(params: &ModelParams<R>, features: &Mat<R>) -> Result<Vec<StageOutput<R>>> {
    let mut tape = Tape::new();
    let vars = TapeParams::register(&mut tape, params);
    let x = tape.leaf(features.clone());
    let mode = ForwardMode::<rand_chacha::ChaCha8Rng> { dropout_rng: None };
    let outs = forward_on_tape(&mut tape, &params.config, &vars, x, mode)?;
    let stages: Vec<StageOutput<R>> = outs
        .iter()
        .map(|o| StageOutput { features: tape.value(o.features).clone(), probs: tape.value(o.probs).clone() })
        .collect();
    if let Some(bad) = stages.iter().position(|s| !s.probs.is_finite()) {
        return Err(Error::Numeric(format!("stage {} produced non-finite probabilities", bad + 1)));
    }
    Ok(stages)
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn predict_labels<R: Real>(probs: &Mat<R>) -> Vec<usize> {
    (0..probs.rows())
        .map(|t| {
            let row = probs.row(t);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
