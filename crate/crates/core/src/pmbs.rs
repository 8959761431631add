//! Batched tree search: virtual-visit selection of many (node, push) pairs per
//! iteration, parallel expansion, leaf-parallel rollouts in lockstep, and
//! max-reward backup.

use serde::{Deserialize, Serialize};

use crate::actions::PushSlot;
use crate::mcts::{
    self, ucb_value, Clock, Finished, NodeId, SearchConfig, SearchError, SearchOutcome, SearchTree,
    StopReason, TreeNode, Walk, WorldModel,
};
use crate::pushworld::{BatchedEnv, PushAction, WorldState};
use crate::rng::{self, Stream};

pub use crate::mcts::EarlyStopState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelConfig {
    #[serde(flatten)]
    pub search: SearchConfig,
    pub n_envs: usize,
    pub worker_pool_size: usize,
    pub leaf_parallel: bool,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            search: SearchConfig::default(),
            n_envs: 64,
            worker_pool_size: std::thread::available_parallelism().map_or(1, |n| n.get()),
            leaf_parallel: true,
        }
    }
}

impl ParallelConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        self.search.validate()?;
        if self.n_envs == 0 {
            return Err(SearchError::InvalidConfig("n_envs must be >= 1".into()));
        }
        if self.worker_pool_size == 0 {
            return Err(SearchError::InvalidConfig("worker_pool_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batched_env(&self) -> BatchedEnv {
        BatchedEnv::new(self.worker_pool_size, self.search.tip, self.search.physics)
    }
}

/// `Q/(N+V) + c * sqrt(2 ln(N_p+V_p) / (N+V))` where `V` counts virtual
/// visits; infinite when the child has neither.
pub fn ucb_virtual(parent: &TreeNode, child: &TreeNode, c: f64) -> f64 {
    ucb_value(
        child.q_sum,
        (child.visits + child.virtual_visits) as f64,
        (parent.visits + parent.virtual_visits) as f64,
        c,
    )
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionBatch {
    pub pairs: Vec<(NodeId, PushSlot)>,
}

impl SelectionBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Draw up to `n_envs` distinct pairs. Each draw descends by virtual UCB,
/// pops the leaf's next untried candidate and adds a virtual visit to the
/// leaf and its ancestors.
pub fn select_batch(tree: &mut SearchTree, n_envs: usize, c: f64) -> Result<SelectionBatch, SearchError> {
    let mut batch = SelectionBatch::default();
    while batch.len() < n_envs {
        let Ok(id) = tree.descend(|p, ch| ucb_virtual(p, ch, c)) else {
            break;
        };
        let slot = tree.pop_untried(id).expect("descent ends on an expandable node");
        batch.pairs.push((id, slot));
        let mut cur = Some(id);
        while let Some(i) = cur {
            if tree.node(i).virtual_visits == 0 {
                tree.touched.push(i);
            }
            let n = tree.node_mut(i);
            n.virtual_visits += 1;
            cur = n.parent;
        }
    }
    if batch.is_empty() {
        return Err(SearchError::Exhausted);
    }
    Ok(batch)
}

/// Clear all virtual visits. Only nodes touched since the last reset can be
/// nonzero.
pub fn reset_virtual(tree: &mut SearchTree) {
    let touched = std::mem::take(&mut tree.touched);
    for id in touched {
        tree.node_mut(id).virtual_visits = 0;
    }
}

/// A freshly attached node and the candidates its rollouts start from.
#[derive(Debug, Clone)]
pub struct NewNode {
    pub id: NodeId,
    candidates: Vec<PushSlot>,
}

/// Resolve every pair on the pool and attach the children in batch order.
/// A pair whose push fails becomes a dead child.
pub fn batch_expand(tree: &mut SearchTree, batch: &SelectionBatch, env: &BatchedEnv) -> Vec<NewNode> {
    let model = *tree.model();
    let expansions = {
        let t = &*tree;
        env.map(&batch.pairs, |_, &(parent, slot)| {
            model.expansion(&t.node(parent).state, slot)
        })
    };
    batch
        .pairs
        .iter()
        .zip(expansions)
        .map(|(&(parent, _), e)| {
            let candidates = e.candidates.clone();
            NewNode {
                id: tree.attach(parent, e),
                candidates,
            }
        })
        .collect()
}

/// Rollouts the lockstep scheduler can run.
pub trait RolloutSource: Sync {
    type Walk: Send;
    /// Start a rollout at node `node`, or finish it immediately.
    fn begin(&self, node: usize) -> Result<Self::Walk, Finished>;
    /// Advance one push. `None` while the rollout goes on.
    fn step(&self, walk: &mut Self::Walk, rng: &mut Stream) -> Option<Finished>;
    /// Pushes left before the rollout hits its horizon.
    fn remaining(&self, walk: &Self::Walk) -> u32;
}

struct EnvSlot<W> {
    node: usize,
    walk: Option<W>,
    /// Rounds this environment may still run.
    budget: u32,
    rng: Stream,
    outcome: Option<Finished>,
}

/// Split `n_envs` over `n_nodes` as evenly as possible, remainder to the
/// earlier nodes.
pub fn split_envs(n_envs: usize, n_nodes: usize) -> Vec<usize> {
    let base = n_envs / n_nodes;
    let extra = n_envs % n_nodes;
    (0..n_nodes).map(|i| base + usize::from(i < extra)).collect()
}

/// Run rollouts for `n_nodes` nodes on `n_envs` environments in lockstep
/// rounds and return each node's best reward.
///
/// Environment `e` draws from the stream `(seed, iteration, e)`. When a
/// rollout reaches a graspable state its node is settled: that node's other
/// rollouts are cut and the freed environments restart on the node with the
/// most remaining work, within the batch's round limit. Without leaf
/// parallelism each node gets exactly one environment and nothing restarts.
pub fn schedule_rollouts<S: RolloutSource>(
    src: &S,
    n_nodes: usize,
    n_envs: usize,
    leaf_parallel: bool,
    seed: u64,
    iteration: u64,
    env: &BatchedEnv,
) -> Vec<f64> {
    let mut best = vec![0.0f64; n_nodes];
    if n_nodes == 0 {
        return best;
    }
    let mut solved = vec![false; n_nodes];
    let counts = if leaf_parallel {
        split_envs(n_envs.max(n_nodes), n_nodes)
    } else {
        vec![1; n_nodes]
    };
    let mut slots: Vec<EnvSlot<S::Walk>> = Vec::new();
    let mut freed: Vec<usize> = Vec::new();
    for (node, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let e = slots.len();
            slots.push(EnvSlot {
                node,
                walk: None,
                budget: 0,
                rng: rng::stream(seed, iteration, e as u64),
                outcome: None,
            });
            match src.begin(node) {
                Ok(w) => {
                    slots[e].budget = src.remaining(&w);
                    slots[e].walk = Some(w);
                }
                Err(f) => {
                    record(&mut best, &mut solved, node, f);
                    if f.grasped {
                        freed.push(e);
                    }
                }
            }
        }
    }
    let rounds = slots.iter().map(|s| s.budget).max().unwrap_or(0);

    let mut round = 0u32;
    loop {
        // settle: cut rollouts of solved nodes, then reuse freed environments
        for (e, s) in slots.iter_mut().enumerate() {
            if s.walk.is_some() && solved[s.node] {
                s.walk = None;
                freed.push(e);
            }
        }
        if leaf_parallel {
            freed.sort_unstable();
            for e in std::mem::take(&mut freed) {
                let Some(target) = most_work(&slots, &solved, n_nodes) else {
                    break;
                };
                slots[e].node = target;
                match src.begin(target) {
                    Ok(w) => {
                        slots[e].budget = src.remaining(&w).min(rounds - round);
                        slots[e].walk = Some(w);
                    }
                    Err(f) => record(&mut best, &mut solved, target, f),
                }
            }
        }
        freed.clear();
        if slots.iter().all(|s| s.walk.is_none()) {
            break;
        }

        env.for_each_mut(&mut slots, |_, s| {
            if let Some(w) = s.walk.as_mut() {
                s.outcome = src.step(w, &mut s.rng);
            }
        });
        round += 1;

        for (e, s) in slots.iter_mut().enumerate() {
            if s.walk.is_none() {
                continue;
            }
            if let Some(f) = s.outcome.take() {
                s.walk = None;
                record(&mut best, &mut solved, s.node, f);
                if f.grasped {
                    freed.push(e);
                }
                continue;
            }
            s.budget -= 1;
            if s.budget == 0 {
                // cut off at the batch's round limit
                s.walk = None;
            }
        }
    }
    best
}

fn record(best: &mut [f64], solved: &mut [bool], node: usize, f: Finished) {
    if f.reward > best[node] {
        best[node] = f.reward;
    }
    if f.grasped {
        solved[node] = true;
    }
}

/// Node with the largest sum of remaining rounds over its live rollouts.
fn most_work<W>(slots: &[EnvSlot<W>], solved: &[bool], n_nodes: usize) -> Option<usize> {
    let mut work = vec![0u64; n_nodes];
    for s in slots {
        if s.walk.is_some() && !solved[s.node] {
            work[s.node] += s.budget as u64;
        }
    }
    let mut best: Option<(u64, usize)> = None;
    for (i, &w) in work.iter().enumerate() {
        if w > 0 && best.is_none_or(|(b, _)| w > b) {
            best = Some((w, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Rollouts from snapshots of freshly expanded tree nodes.
struct TreeRollouts<'a> {
    model: WorldModel,
    horizon: u32,
    starts: Vec<(&'a WorldState, u32, bool, &'a [PushSlot])>,
}

impl RolloutSource for TreeRollouts<'_> {
    type Walk = Walk;

    fn begin(&self, node: usize) -> Result<Walk, Finished> {
        let (state, depth, graspable, candidates) = self.starts[node];
        Walk::begin(&self.model, state, depth, graspable, candidates, self.horizon)
    }

    fn step(&self, walk: &mut Walk, rng: &mut Stream) -> Option<Finished> {
        walk.step(&self.model, rng)
    }

    fn remaining(&self, walk: &Walk) -> u32 {
        walk.remaining()
    }
}

/// Best rollout reward for each new node.
pub fn batch_simulate(
    tree: &SearchTree,
    new_nodes: &[NewNode],
    cfg: &ParallelConfig,
    iteration: u64,
    env: &BatchedEnv,
) -> Vec<f64> {
    let src = TreeRollouts {
        model: *tree.model(),
        horizon: tree.horizon(),
        starts: new_nodes
            .iter()
            .map(|n| {
                let t = tree.node(n.id);
                (&t.state, t.depth, t.graspable, n.candidates.as_slice())
            })
            .collect(),
    };
    schedule_rollouts(
        &src,
        new_nodes.len(),
        cfg.n_envs,
        cfg.leaf_parallel,
        cfg.search.rng_seed,
        iteration,
        env,
    )
}

/// One path update per expanded node with its aggregated reward.
pub fn backprop_max(tree: &mut SearchTree, new_nodes: &[NewNode], rewards: &[f64]) {
    assert_eq!(new_nodes.len(), rewards.len(), "one reward per new node");
    for (n, &r) in new_nodes.iter().zip(rewards) {
        tree.backprop(n.id, r);
    }
}

/// Batched search with the full outcome, on a caller-owned pool.
pub fn search_pmbs_with(
    state: WorldState,
    cfg: &ParallelConfig,
    env: &BatchedEnv,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let s = &cfg.search;
    let mut tree = SearchTree::new(state, s)?;
    let clock = Clock::start(s.budget);
    let mut iterations = 0u64;
    let stop = loop {
        if clock.spent(iterations, tree.expansions()) {
            break StopReason::Budget;
        }
        if tree.early_stop_reached() {
            break StopReason::EarlyStop;
        }
        let batch = match select_batch(&mut tree, cfg.n_envs, s.c_explore) {
            Ok(b) => b,
            Err(_) => break StopReason::Exhausted,
        };
        reset_virtual(&mut tree);
        let new_nodes = batch_expand(&mut tree, &batch, env);
        tree.update_es_level();
        let rewards = batch_simulate(&tree, &new_nodes, cfg, iterations, env);
        backprop_max(&mut tree, &new_nodes, &rewards);
        iterations += 1;
    };
    mcts::finish(tree, s, iterations, clock, stop)
}

pub fn search_pmbs(state: WorldState, cfg: &ParallelConfig) -> Result<SearchOutcome, SearchError> {
    search_pmbs_with(state, cfg, &cfg.batched_env())
}

/// Plan one push with the batched planner.
pub fn run_pmbs(state: WorldState, cfg: &ParallelConfig) -> Result<PushAction, SearchError> {
    search_pmbs(state, cfg).map(|o| o.action)
}
