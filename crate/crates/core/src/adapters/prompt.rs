use std::time::Instant;

use super::{AdaptConfig, AdaptOutcome};
use crate::autodiff::{sign0, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::models::{Backbone, BnMode, Objective, ParamScope};
use crate::prompts::{
    additive_forward, cvp_forward, init_cvp, lvp_forward, lvp_init, AdditiveVpParams, CvpParams, LowRankTensors, LvpParams, PromptParams,
};

/// A prompt family as seen by the optimization loop.
trait PromptState: Clone {
    /// Records trainable leaves; the order matches [`PromptState::step`].
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;
    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var>;
    /// One signed descent step followed by projection.
    fn step(&mut self, grads: &[Tensor]) -> Result<()>;
    fn params(&self) -> PromptParams;
    fn is_finite(&self) -> bool;
}

fn sign_step(t: &Tensor, g: &Tensor, step: f32) -> Tensor {
    t.zip_map(g, |v, gv| v - step * sign0(gv)).expect("gradient matches its parameter")
}

#[derive(Clone)]
struct CvpState {
    p: CvpParams,
    kernel_step: f32,
    lambda_step: f32,
}

impl PromptState for CvpState {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        vec![tape.param(self.p.kernel.clone()), tape.param(Tensor::scalar(self.p.lambda))]
    }

    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        cvp_forward(tape, x, vars[0], vars[1])
    }

    fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.p.kernel = sign_step(&self.p.kernel, &grads[0], self.kernel_step);
        self.p.lambda -= self.lambda_step * sign0(grads[1].item());
        self.p.project();
        Ok(())
    }

    fn params(&self) -> PromptParams {
        PromptParams::Cvp(self.p.clone())
    }

    fn is_finite(&self) -> bool {
        self.p.kernel.is_finite() && self.p.lambda.is_finite()
    }
}

#[derive(Clone)]
struct AdditiveState(AdditiveVpParams);

impl PromptState for AdditiveState {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        vec![tape.param(self.0.v.clone()), tape.constant(self.0.mask.clone())]
    }

    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        additive_forward(tape, x, vars[0], vars[1])
    }

    fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.0.v = sign_step(&self.0.v, &grads[0], self.0.step);
        self.0.project();
        Ok(())
    }

    fn params(&self) -> PromptParams {
        PromptParams::Additive(self.0.clone())
    }

    fn is_finite(&self) -> bool {
        self.0.v.is_finite()
    }
}

#[derive(Clone)]
struct LvpState {
    p: LvpParams,
    step: f32,
}

impl PromptState for LvpState {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        match self.p.truncated() {
            Some(t) => vec![tape.param(t.u), tape.param(t.s), tape.param(t.vt)],
            None => Vec::new(),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        match vars {
            [u, s, vt] => lvp_forward(tape, x, *u, *s, *vt),
            _ => Ok(x),
        }
    }

    fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        let Some(t) = self.p.truncated() else {
            return Ok(());
        };
        let next = LowRankTensors {
            u: sign_step(&t.u, &grads[0], self.step),
            s: sign_step(&t.s, &grads[1], self.step),
            vt: sign_step(&t.vt, &grads[2], self.step),
        };
        self.p.reproject(&next)
    }

    fn params(&self) -> PromptParams {
        PromptParams::Lvp(self.p.clone())
    }

    fn is_finite(&self) -> bool {
        self.p.factors.iter().all(|f| f.s.iter().all(|v| v.is_finite()))
    }
}

/// Optimization record of one prompt run.
#[derive(Clone, Debug)]
pub struct PromptRun {
    /// The prompt returned: the last iterate, or the initial one after fallback.
    pub params: PromptParams,
    pub loss_trace: Vec<f32>,
    pub final_loss: f32,
    pub fallback: bool,
}

/// Loss of `x` under the prompt, with gradients w.r.t. the prompt when asked.
fn evaluate<P: PromptState>(
    state: &P,
    x: &Tensor,
    backbone: &Backbone,
    objective: &Objective<'_>,
    mode: BnMode,
    with_grad: bool,
) -> Result<(f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, ParamScope::Frozen);
    let xv = tape.constant(x.clone());
    let vars = state.bind(&mut tape);
    let y = state.forward(&mut tape, xv, &vars)?;
    let loss = objective.loss(backbone, &mut tape, &bound, y, mode)?;
    let value = tape.value(loss).item();
    if !with_grad || !value.is_finite() || vars.is_empty() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

/// Signed descent on the prompt for `iters` steps. The trace holds the loss
/// of the raw batch followed by the loss after each step.
fn optimize<P: PromptState>(
    x: &Tensor,
    init: P,
    backbone: &Backbone,
    objective: &Objective<'_>,
    mode: BnMode,
    iters: usize,
    fallback: bool,
) -> Result<PromptRun> {
    let loss0 = objective.value(backbone, x, mode)?;
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(loss0);
    let mut state = init.clone();
    let mut diverged = !loss0.is_finite();
    let mut grads: Option<Vec<Tensor>> = None;
    for t in 0..iters {
        if diverged {
            trace.push(f32::NAN);
            continue;
        }
        let g = match grads.take() {
            Some(g) => g,
            None => {
                let (value, g) = evaluate(&state, x, backbone, objective, mode, true)?;
                if !value.is_finite() {
                    diverged = true;
                    trace.push(f32::NAN);
                    continue;
                }
                g
            }
        };
        let stepped = match state.step(&g) {
            Err(Error::NonFinite(_)) => false,
            other => other.map(|()| state.is_finite())?,
        };
        if !stepped {
            diverged = true;
            trace.push(f32::NAN);
            continue;
        }
        let (value, g) = evaluate(&state, x, backbone, objective, mode, t + 1 < iters)?;
        trace.push(value);
        if value.is_finite() {
            grads = Some(g);
        } else {
            diverged = true;
        }
    }
    let last = *trace.last().expect("trace starts with loss⁰");
    let revert = diverged || (fallback && last > loss0);
    if diverged {
        log::warn!("prompt loss became non-finite; reverting to the initial prompt");
    }
    let (params, final_loss) = if revert { (init.params(), loss0) } else { (state.params(), last) };
    Ok(PromptRun {
        params,
        loss_trace: trace,
        final_loss,
        fallback: revert,
    })
}

fn finish(x: &Tensor, run: PromptRun, backbone: &Backbone, mode: BnMode, start: Instant) -> Result<AdaptOutcome> {
    let adapted = run.params.apply(x)?.clamp(0.0, 1.0);
    let (logits, predictions) = backbone.predict_with(&adapted, mode)?;
    Ok(AdaptOutcome {
        adapted,
        logits,
        predictions,
        prompt: Some(run.params),
        loss_trace: run.loss_trace,
        final_loss: run.final_loss,
        fallback: run.fallback,
        changed_tensors: Vec::new(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn image_shape(x: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *x.shape() {
        [_, c, h, w] => Ok([c, h, w]),
        ref s => Err(shape_err(op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

/// Convolutional prompt optimized against a frozen backbone. `mode` selects
/// running (`Eval`) or batch (`Batch`) normalization statistics.
pub fn adapt_cvp(x: &Tensor, backbone: &Backbone, objective: &Objective<'_>, mode: BnMode, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    backbone.ensure_frozen("adapt_cvp")?;
    image_shape(x, "adapt_cvp")?;
    let start = Instant::now();
    let c = &cfg.cvp;
    let init = CvpState {
        p: init_cvp(c.init, c.kernel_size, c.lambda_range, cfg.seed)?,
        kernel_step: c.kernel_step,
        lambda_step: c.lambda_step,
    };
    let run = optimize(x, init, backbone, objective, mode, cfg.iters, cfg.fallback)?;
    finish(x, run, backbone, mode, start)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VpVariant {
    /// Every pixel is trainable.
    Patch,
    /// Only a frame of `padding_width` pixels is trainable.
    Padding,
}

/// Additive ε-ball prompt optimized with projected signed steps.
pub fn adapt_additive_vp(
    x: &Tensor,
    backbone: &Backbone,
    objective: &Objective<'_>,
    cfg: &AdaptConfig,
    variant: VpVariant,
) -> Result<AdaptOutcome> {
    backbone.ensure_frozen("adapt_additive_vp")?;
    let shape = image_shape(x, "adapt_additive_vp")?;
    let start = Instant::now();
    let v = &cfg.vp;
    let p = match variant {
        VpVariant::Patch => AdditiveVpParams::patch(shape, v.norm, v.epsilon, v.step),
        VpVariant::Padding => AdditiveVpParams::padding(shape, v.padding_width, v.norm, v.epsilon, v.step),
    };
    let run = optimize(x, AdditiveState(p), backbone, objective, BnMode::Eval, cfg.iters, cfg.fallback)?;
    finish(x, run, backbone, BnMode::Eval, start)
}

/// Low-rank prompt initialized from the batch's own factorization.
pub fn adapt_lvp(x: &Tensor, backbone: &Backbone, objective: &Objective<'_>, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    backbone.ensure_frozen("adapt_lvp")?;
    image_shape(x, "adapt_lvp")?;
    let start = Instant::now();
    let init = LvpState {
        p: lvp_init(x, cfg.lvp.rank)?,
        step: cfg.lvp.step,
    };
    let run = optimize(x, init, backbone, objective, BnMode::Eval, cfg.iters, cfg.fallback)?;
    finish(x, run, backbone, BnMode::Eval, start)
}

/// Runs LVP from explicit initial factors.
pub fn adapt_lvp_from(
    x: &Tensor,
    init: LvpParams,
    backbone: &Backbone,
    objective: &Objective<'_>,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    backbone.ensure_frozen("adapt_lvp")?;
    if x.shape() != init.shape {
        return Err(shape_err(
            "adapt_lvp",
            format!("factors for {:?}, batch {:?}", init.shape, x.shape()),
        ));
    }
    let start = Instant::now();
    let state = LvpState {
        p: init,
        step: cfg.lvp.step,
    };
    let run = optimize(x, state, backbone, objective, BnMode::Eval, cfg.iters, cfg.fallback)?;
    finish(x, run, backbone, BnMode::Eval, start)
}
