//! Training-step timing of several configurations under the same machine load.

use std::time::Instant;

use bam_core::objective::{train_step, Model, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::Result;

/// One configuration's model, optimizer state and minibatches, ready to step.
struct Stepper<M: Model> {
    model: M,
    state: TrainState,
    batches: Vec<M::Batch>,
    next: usize,
    l2_lambda: f64,
    rng: ChaCha8Rng,
}

impl<M: Model> Stepper<M> {
    fn new(model: M, cfg: &ExperimentConfig) -> Result<Self> {
        let train = cfg.train_config();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
        let params = model.init_params(&mut rng)?;
        let state = TrainState::new(params, train.adam, train.rho, train.anneal_offset)?;
        let batches = model.train_batches(&mut rng)?;
        Ok(Stepper {
            model,
            state,
            batches,
            next: 0,
            l2_lambda: train.l2_lambda,
            rng,
        })
    }

    fn step_ms(&mut self) -> Result<f64> {
        if self.next == self.batches.len() {
            self.batches = self.model.train_batches(&mut self.rng)?;
            self.next = 0;
        }
        let batch = &self.batches[self.next];
        self.next += 1;
        let started = Instant::now();
        train_step(&self.model, &mut self.state, batch, self.l2_lambda, &mut self.rng)?;
        Ok(started.elapsed().as_secs_f64() * 1e3)
    }
}

type StepFn = Box<dyn FnMut() -> Result<f64>>;

fn stepper(cfg: &ExperimentConfig) -> Result<StepFn> {
    Ok(match cfg.build()? {
        Experiment::Synthetic(m) => {
            let mut s = Stepper::new(m, cfg)?;
            Box::new(move || s.step_ms())
        }
        Experiment::Graph(m) => {
            let mut s = Stepper::new(m, cfg)?;
            Box::new(move || s.step_ms())
        }
    })
}

/// Median training-step time in milliseconds of each configuration. Steps
/// alternate between configurations so that load changes hit all of them;
/// the first `warmup` steps of each are discarded.
pub fn interleaved_step_ms(cfgs: &[&ExperimentConfig], warmup: usize, steps: usize) -> Result<Vec<f64>> {
    let mut steppers = cfgs.iter().map(|c| stepper(c)).collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(steps); cfgs.len()];
    for round in 0..warmup + steps {
        for (s, t) in steppers.iter_mut().zip(times.iter_mut()) {
            let ms = s()?;
            if round >= warmup {
                t.push(ms);
            }
        }
    }
    Ok(times.into_iter().map(|mut t| median(&mut t)).collect())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
