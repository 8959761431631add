use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use super::{resolve_push, GripperTip, PhysicsConfig, PhysicsError, PushAction, WorldState};

/// Many independent world copies stepped together on a worker pool.
///
/// The pool size only changes how fast a batch finishes: element `i` of every
/// result is computed from input `i` alone, and outputs come back in input
/// order.
pub struct BatchedEnv {
    pool: ThreadPool,
    workers: usize,
    pub tip: GripperTip,
    pub physics: PhysicsConfig,
}

impl std::fmt::Debug for BatchedEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchedEnv")
            .field("workers", &self.workers)
            .field("tip", &self.tip)
            .field("physics", &self.physics)
            .finish()
    }
}

impl BatchedEnv {
    pub fn new(workers: usize, tip: GripperTip, physics: PhysicsConfig) -> Self {
        let workers = workers.max(1);
        let pool = ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("pushworld-{i}"))
            .build()
            .expect("failed to start worker pool");
        BatchedEnv {
            pool,
            workers,
            tip,
            physics,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Order-preserving parallel map on the pool.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        if self.workers == 1 || items.len() <= 1 {
            return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        self.pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect()
        })
    }

    /// Run `f` on every element in place, in parallel.
    pub fn for_each_mut<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        if self.workers == 1 || items.len() <= 1 {
            items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
        self.pool.install(|| {
            items
                .par_iter_mut()
                .enumerate()
                .for_each(|(i, t)| f(i, t))
        })
    }

    /// Resolve `pushes[i]` on `states[i]` for every `i`. A failing element
    /// does not affect its siblings.
    pub fn batch_resolve(
        &self,
        states: &[WorldState],
        pushes: &[PushAction],
    ) -> Result<Vec<Result<WorldState, PhysicsError>>, PhysicsError> {
        if states.len() != pushes.len() {
            return Err(PhysicsError::LengthMismatch {
                states: states.len(),
                pushes: pushes.len(),
            });
        }
        let pairs: Vec<(&WorldState, &PushAction)> = states.iter().zip(pushes).collect();
        Ok(self.map(&pairs, |_, (s, p)| {
            resolve_push(s, p, &self.tip, &self.physics)
        }))
    }
}

/// One-shot batch resolution on a temporary pool of `workers` threads.
pub fn batch_resolve(
    states: &[WorldState],
    pushes: &[PushAction],
    tip: &GripperTip,
    physics: &PhysicsConfig,
    workers: usize,
) -> Result<Vec<Result<WorldState, PhysicsError>>, PhysicsError> {
    BatchedEnv::new(workers, *tip, *physics).batch_resolve(states, pushes)
}
