//! Recording and replay of the discrete choices made by non-smooth ops.
//!
//! ReLU, max pooling, spatial max and clamp pick a branch per element.
//! A finite-difference perturbation that moves one input across a branch
//! boundary measures a different piece of the function than the one
//! backward differentiates. Replaying the branches of an unperturbed pass
//! keeps every perturbed evaluation on that piece.

use std::cell::RefCell;

use crate::error::{Error, Result};

#[derive(Default)]
enum Mode {
    #[default]
    Off,
    Record(Vec<Vec<usize>>),
    Replay(Vec<Vec<usize>>, usize),
}

thread_local! {
    static MODE: RefCell<Mode> = const { RefCell::new(Mode::Off) };
}

/// Branch decisions of one forward pass, in execution order.
#[derive(Clone, Debug, Default)]
pub struct BranchTape(Vec<Vec<usize>>);

impl BranchTape {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct Reset;

impl Drop for Reset {
    fn drop(&mut self) {
        MODE.with(|m| *m.borrow_mut() = Mode::Off);
    }
}

fn enter(mode: Mode) -> Result<Reset> {
    MODE.with(|m| {
        let mut m = m.borrow_mut();
        if !matches!(*m, Mode::Off) {
            return Err(Error::Replay("recording and replay do not nest".into()));
        }
        *m = mode;
        Ok(Reset)
    })
}

/// Runs `f`, capturing every branch decision it makes on this thread.
pub fn record<R>(f: impl FnOnce() -> R) -> Result<(R, BranchTape)> {
    let reset = enter(Mode::Record(Vec::new()))?;
    let out = f();
    let tape = MODE.with(|m| match std::mem::take(&mut *m.borrow_mut()) {
        Mode::Record(t) => t,
        _ => unreachable!("mode changed while recording"),
    });
    drop(reset);
    Ok((out, BranchTape(tape)))
}

/// Runs `f`, forcing the decisions stored in `tape`. Fails if `f` makes a
/// different number of decisions or one of a different size.
pub fn replay<R>(tape: &BranchTape, f: impl FnOnce() -> R) -> Result<R> {
    let reset = enter(Mode::Replay(tape.0.clone(), 0))?;
    let out = f();
    let used = MODE.with(|m| match &*m.borrow() {
        Mode::Replay(_, cursor) => *cursor,
        _ => unreachable!("mode changed while replaying"),
    });
    drop(reset);
    if used != tape.0.len() {
        return Err(Error::Replay(format!("used {used} of {} branch records", tape.0.len())));
    }
    Ok(out)
}

pub(crate) fn active() -> bool {
    MODE.with(|m| !matches!(*m.borrow(), Mode::Off))
}

/// The decisions for the next non-smooth op: freshly computed unless
/// replaying. Panics if a replayed record has the wrong size.
pub(crate) fn decide(len: usize, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
    MODE.with(|m| match &mut *m.borrow_mut() {
        Mode::Off => compute(),
        Mode::Record(t) => {
            let d = compute();
            t.push(d.clone());
            d
        }
        Mode::Replay(t, cursor) => {
            let d = t.get(*cursor).cloned().expect("replay ran past the recorded branches");
            assert_eq!(d.len(), len, "replayed branch record {} has the wrong size", *cursor);
            *cursor += 1;
            d
        }
    })
}
