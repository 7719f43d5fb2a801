//! Mini-batch plumbing shared by every training loop.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Optimizer, ParamGrads, ParamStore, Tape, Var};

/// Per-sample forward pass: builds the loss on `tape` given bound parameters.
pub trait SampleLoss<S>: Sync {
    fn loss<'a>(&self, tape: &mut Tape<'a>, params: &[Var], sample: &'a S) -> Result<Var>;
}

impl<S, F> SampleLoss<S> for F
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var], &'a S) -> Result<Var> + Sync,
{
    fn loss<'a>(&self, tape: &mut Tape<'a>, params: &[Var], sample: &'a S) -> Result<Var> {
        self(tape, params, sample)
    }
}

/// Loss and gradients for one sample.
pub fn sample_grads<'a, S: Sync>(
    store: &'a ParamStore,
    sample: &'a S,
    f: &impl SampleLoss<S>,
) -> Result<(f32, ParamGrads)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f.loss(&mut tape, &bound, sample)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, store.collect_grads(&bound, &mut grads)))
}

/// Mean loss and mean gradients over `batch`. Samples run in parallel; the
/// reduction is in batch order so the result does not depend on threading.
pub fn batch_grads<S: Sync>(store: &ParamStore, batch: &[&S], f: &impl SampleLoss<S>) -> Result<(f32, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<(f32, ParamGrads)> = batch
        .par_iter()
        .map(|s| sample_grads(store, *s, f))
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::empty(store.len());
    let mut loss = 0.0f64;
    for (l, g) in &parts {
        loss += f64::from(*l);
        total.accumulate(g);
    }
    let k = 1.0 / batch.len() as f32;
    total.scale(k);
    Ok(((loss / batch.len() as f64) as f32, total))
}

/// Context attached to a non-finite loss abort.
#[derive(Clone, Copy, Debug)]
pub struct StepPos {
    pub epoch: usize,
    pub step: usize,
}

pub fn check_finite(loss: f32, grads: &ParamGrads, pos: StepPos, what: &str) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{what} loss at epoch {} step {}", pos.epoch, pos.step),
        });
    }
    Ok(())
}

/// One optimizer update on the mean loss of `batch`.
pub fn batch_step<S: Sync>(
    store: &mut ParamStore,
    opt: &mut dyn Optimizer,
    batch: &[&S],
    f: &impl SampleLoss<S>,
    pos: StepPos,
    what: &str,
) -> Result<f32> {
    let (loss, grads) = batch_grads(store, batch, f)?;
    check_finite(loss, &grads, pos, what)?;
    opt.step(store, &grads)?;
    Ok(loss)
}
