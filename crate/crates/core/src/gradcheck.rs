//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(loss_fn: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    Ok(tape.value(loss).item())
}

/// Compares analytic gradients of `loss_fn` against central differences
/// `(f(p+ε) - f(p-ε)) / 2ε` on `samples` scalar parameters drawn with
/// `seed`. `loss_fn` receives a tape with dropout disabled.
pub fn finite_difference_check<F>(
    loss_fn: F,
    store: &ParameterStore,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon:e} outside [1e-7, 1e-3]")));
    }
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, &work)?;
    let f0 = tape.value(loss).item();
    tape.backward(loss, &mut work)?;

    let f1 = evaluate(&loss_fn, &work)?;
    if f0 != f1 {
        return Err(Error::NonDeterministic { delta: (f0 - f1).abs() });
    }

    let slots: Vec<(String, usize)> = work
        .iter()
        .map(|(name, p)| (name.to_string(), p.value.len()))
        .collect();
    let total: usize = slots.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total)).into_vec();

    let mut out = Vec::with_capacity(picks.len());
    for flat in picks {
        let (name, index) = locate(&slots, flat);
        let analytic = work.grad(&name).map_or(0.0, |g| g.data()[index]);
        let orig = *work.scalar_mut(&name, index)?;
        *work.scalar_mut(&name, index)? = orig + epsilon;
        let plus = evaluate(&loss_fn, &work)?;
        *work.scalar_mut(&name, index)? = orig - epsilon;
        let minus = evaluate(&loss_fn, &work)?;
        *work.scalar_mut(&name, index)? = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        out.push(GradSample {
            rel_error: relative_error(analytic, numeric),
            param: name,
            index,
            analytic,
            numeric,
        });
    }
    let max_rel_error = out.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples: out,
    })
}

fn locate(slots: &[(String, usize)], mut flat: usize) -> (String, usize) {
    for (name, n) in slots {
        if flat < *n {
            return (name.clone(), flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}
