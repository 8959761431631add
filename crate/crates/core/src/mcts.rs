//! Depth-limited UCB tree search over pushes, with random-push rollouts.
//!
//! The tree lives in an arena ([`SearchTree`]) shared by the serial planner in
//! this module and the batched planner in [`crate::pmbs`]. Node ids are
//! creation indices, so two searches that make the same decisions build trees
//! that compare equal node by node.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{graspable, GraspGeometry, PushSampler, PushSlot};
use crate::pushworld::{resolve_push, GripperTip, PhysicsConfig, PushAction, WorldState};
use crate::rng::{self, Stream};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("target is already graspable at the root")]
    RootGraspable,
    #[error("no legal push at the root")]
    NoLegalPush,
    #[error("tree fully explored")]
    Exhausted,
    #[error("action is not an untried action of node {0}")]
    NotUntried(NodeId),
    #[error("node {0} cannot be expanded")]
    NotExpandable(NodeId),
}

/// When a search stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Wall-clock seconds.
    Seconds(f64),
    /// Driver iterations (one selection round each).
    Iterations(u64),
    /// Expanded nodes.
    Expansions(u64),
}

/// How the returned root action is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalRule {
    /// Best mean reward, ties to more visits then insertion order.
    #[default]
    MeanReward,
    /// Highest UCB score with the search's exploration constant.
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub gamma: f64,
    pub c_explore: f64,
    /// Maximum tree depth.
    pub d_t: u32,
    /// Maximum rollout depth beyond the tree.
    pub d_s: u32,
    pub budget: Budget,
    pub n_actions_per_object: usize,
    pub margin_threshold: f64,
    pub rng_seed: u64,
    /// Stop once a graspable node is no deeper than the early-stop level.
    pub early_stop: bool,
    pub final_rule: FinalRule,
    pub tip: GripperTip,
    pub physics: PhysicsConfig,
    pub grasp: GraspGeometry,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            gamma: 0.8,
            c_explore: 0.3,
            d_t: 7,
            d_s: 3,
            budget: Budget::Seconds(60.0),
            n_actions_per_object: 16,
            margin_threshold: 0.003,
            rng_seed: 0,
            early_stop: true,
            final_rule: FinalRule::MeanReward,
            tip: GripperTip::default(),
            physics: PhysicsConfig::default(),
            grasp: GraspGeometry::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.c_explore >= 0.0 && self.c_explore.is_finite()) {
            return bad("c_explore must be finite and >= 0");
        }
        if self.d_t == 0 {
            return bad("d_t must be >= 1");
        }
        if self.n_actions_per_object == 0 || self.n_actions_per_object > u16::MAX as usize {
            return bad("n_actions_per_object out of range");
        }
        if !(self.margin_threshold >= 0.0 && self.margin_threshold.is_finite()) {
            return bad("margin_threshold must be finite and >= 0");
        }
        match self.budget {
            Budget::Seconds(s) if !(s >= 0.0 && s.is_finite()) => bad("budget seconds must be >= 0"),
            _ => Ok(()),
        }
    }

    pub fn sampler(&self) -> PushSampler {
        PushSampler {
            n_per_object: self.n_actions_per_object,
            tip: self.tip,
            push_distance: self.physics.push_distance,
        }
    }

    pub(crate) fn world(&self) -> WorldModel {
        WorldModel {
            sampler: self.sampler(),
            physics: self.physics,
            grasp: self.grasp,
            threshold: self.margin_threshold,
            gamma: self.gamma,
        }
    }
}

/// Everything needed to step a world copy and score it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WorldModel {
    pub sampler: PushSampler,
    pub physics: PhysicsConfig,
    pub grasp: GraspGeometry,
    pub threshold: f64,
    pub gamma: f64,
}

impl WorldModel {
    pub fn is_graspable(&self, state: &WorldState) -> bool {
        graspable(state, &self.grasp, self.threshold).graspable
    }

    pub fn reward(&self, pushes: u32) -> f64 {
        self.gamma.powi(pushes as i32)
    }

    /// Resolve one candidate of `parent` and score the result.
    pub fn expansion(&self, parent: &WorldState, slot: PushSlot) -> Expansion {
        let action = self.sampler.action(parent, slot);
        match resolve_push(parent, &action, &self.sampler.tip, &self.physics) {
            Ok(state) => {
                let graspable = self.is_graspable(&state);
                let candidates = if graspable {
                    Vec::new()
                } else {
                    self.sampler.slots(&state)
                };
                Expansion {
                    slot,
                    action,
                    state,
                    graspable,
                    candidates,
                }
            }
            Err(_) => Expansion {
                slot,
                action,
                state: parent.clone(),
                graspable: false,
                candidates: Vec::new(),
            },
        }
    }
}

/// A resolved (parent, candidate) pair waiting to be attached to the tree.
#[derive(Debug, Clone)]
pub(crate) struct Expansion {
    pub slot: PushSlot,
    pub action: PushAction,
    pub state: WorldState,
    pub graspable: bool,
    pub candidates: Vec<PushSlot>,
}

/// How a rollout ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Finished {
    pub reward: f64,
    pub grasped: bool,
}

impl Finished {
    const MISS: Finished = Finished {
        reward: 0.0,
        grasped: false,
    };
}

/// A random-push walk from a tree node toward the rollout horizon.
#[derive(Debug, Clone)]
pub(crate) struct Walk {
    state: WorldState,
    candidates: Vec<PushSlot>,
    depth: u32,
    horizon: u32,
}

impl Walk {
    /// Start a walk, or report its outcome right away when the start is
    /// graspable, has no candidates or sits on the horizon.
    pub fn begin(
        model: &WorldModel,
        state: &WorldState,
        depth: u32,
        graspable: bool,
        candidates: &[PushSlot],
        horizon: u32,
    ) -> Result<Walk, Finished> {
        if graspable {
            return Err(Finished {
                reward: model.reward(depth),
                grasped: true,
            });
        }
        if depth >= horizon || candidates.is_empty() {
            return Err(Finished::MISS);
        }
        Ok(Walk {
            state: state.clone(),
            candidates: candidates.to_vec(),
            depth,
            horizon,
        })
    }

    pub fn remaining(&self) -> u32 {
        self.horizon - self.depth
    }

    /// One uniformly random push. `None` while the walk goes on.
    pub fn step(&mut self, model: &WorldModel, rng: &mut Stream) -> Option<Finished> {
        let slot = self.candidates[rng.random_range(0..self.candidates.len())];
        let action = model.sampler.action(&self.state, slot);
        match resolve_push(&self.state, &action, &model.sampler.tip, &model.physics) {
            Ok(next) => self.state = next,
            Err(_) => return Some(Finished::MISS),
        }
        self.depth += 1;
        if model.is_graspable(&self.state) {
            return Some(Finished {
                reward: model.reward(self.depth),
                grasped: true,
            });
        }
        if self.depth >= self.horizon {
            return Some(Finished::MISS);
        }
        self.candidates = model.sampler.slots(&self.state);
        if self.candidates.is_empty() {
            return Some(Finished::MISS);
        }
        None
    }

    pub fn run(mut self, model: &WorldModel, rng: &mut Stream) -> Finished {
        loop {
            if let Some(f) = self.step(model, rng) {
                return f;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub state: WorldState,
    pub depth: u32,
    pub parent: Option<NodeId>,
    /// Candidate and push that led here from the parent.
    pub slot: Option<PushSlot>,
    pub action: Option<PushAction>,
    pub q_sum: f64,
    pub visits: u64,
    pub virtual_visits: u64,
    pub graspable: bool,
    pub dead: bool,
    /// Reward of the rollout launched at this node, once backed up.
    pub rollout_reward: Option<f64>,
    /// Untried candidates, stored in reverse pop order.
    untried: Vec<PushSlot>,
    children: Vec<NodeId>,
    open: bool,
    open_children: u32,
    /// Depth of the shallowest graspable node in this subtree.
    grasp_depth: u32,
}

impl TreeNode {
    /// A free-standing node, for scoring functions and explicit trees.
    pub fn detached(state: WorldState, depth: u32) -> Self {
        TreeNode {
            state,
            depth,
            parent: None,
            slot: None,
            action: None,
            q_sum: 0.0,
            visits: 0,
            virtual_visits: 0,
            graspable: false,
            dead: false,
            rollout_reward: None,
            untried: Vec::new(),
            children: Vec::new(),
            open: false,
            open_children: 0,
            grasp_depth: u32::MAX,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.q_sum / self.visits as f64
        }
    }

    /// Untried candidates in the order they will be popped.
    pub fn untried(&self) -> impl ExactSizeIterator<Item = PushSlot> + '_ {
        self.untried.iter().rev().copied()
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn is_terminal(&self) -> bool {
        self.graspable || self.dead
    }

    /// Shallowest graspable depth in this subtree, if any.
    pub fn grasp_depth(&self) -> Option<u32> {
        (self.grasp_depth != u32::MAX).then_some(self.grasp_depth)
    }
}

pub(crate) fn ucb_value(q: f64, n: f64, n_parent: f64, c: f64) -> f64 {
    if n == 0.0 {
        return f64::INFINITY;
    }
    q / n + c * (2.0 * n_parent.ln() / n).sqrt()
}

/// `Q/N + c * sqrt(2 ln N_parent / N)`, infinite for an unvisited child.
pub fn ucb_score(parent: &TreeNode, child: &TreeNode, c: f64) -> f64 {
    ucb_value(child.q_sum, child.visits as f64, parent.visits as f64, c)
}

/// Early-stop bookkeeping: the search may end once a graspable node is no
/// deeper than `es_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub es_level: u32,
    pub graspable_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Exhausted,
    EarlyStop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchStats {
    pub iterations: u64,
    pub expansions: u64,
    pub elapsed: Duration,
    pub stop: StopReason,
}

/// Result of one planning call.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub action: PushAction,
    pub child: NodeId,
    pub tree: SearchTree,
    pub stats: SearchStats,
}

/// Per-node values that two equivalent searches must agree on.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSummary {
    pub parent: Option<NodeId>,
    pub slot: Option<PushSlot>,
    pub depth: u32,
    pub q_sum: f64,
    pub visits: u64,
    pub graspable: bool,
    pub dead: bool,
}

/// Arena search tree with the selectability and early-stop bookkeeping.
#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<TreeNode>,
    cfg: SearchConfig,
    model: WorldModel,
    depth_limit: u32,
    rollout_limit: u32,
    early: EarlyStopState,
    /// Nodes per depth that are neither fully expanded nor terminal.
    unsettled: Vec<usize>,
    expansions: u64,
    pub(crate) touched: Vec<NodeId>,
}

impl SearchTree {
    /// Root a new tree at `state`.
    pub fn new(state: WorldState, cfg: &SearchConfig) -> Result<Self, SearchError> {
        cfg.validate()?;
        let model = cfg.world();
        if model.is_graspable(&state) {
            return Err(SearchError::RootGraspable);
        }
        let slots = model.sampler.slots(&state);
        if slots.is_empty() {
            return Err(SearchError::NoLegalPush);
        }
        Ok(Self::with_root(state, slots, cfg))
    }

    /// A tree whose root has the given candidates, with no physics checks.
    /// Children can then be added with [`SearchTree::add_explicit`].
    pub fn explicit(state: WorldState, untried: Vec<PushSlot>, cfg: &SearchConfig) -> Self {
        Self::with_root(state, untried, cfg)
    }

    fn with_root(state: WorldState, mut untried: Vec<PushSlot>, cfg: &SearchConfig) -> Self {
        untried.reverse();
        let mut root = TreeNode::detached(state, 0);
        root.untried = untried;
        let mut tree = SearchTree {
            nodes: vec![root],
            cfg: *cfg,
            model: cfg.world(),
            depth_limit: cfg.d_t,
            rollout_limit: cfg.d_s,
            early: EarlyStopState {
                es_level: 1,
                graspable_nodes: Vec::new(),
            },
            unsettled: Vec::new(),
            expansions: 0,
            touched: Vec::new(),
        };
        tree.recompute_flags();
        tree
    }

    /// Attach a child with preset statistics. The parent's state is reused;
    /// `slot` is removed from the parent's untried list if present.
    #[allow(clippy::too_many_arguments)]
    pub fn add_explicit(
        &mut self,
        parent: NodeId,
        slot: PushSlot,
        mut untried: Vec<PushSlot>,
        q_sum: f64,
        visits: u64,
        graspable: bool,
        dead: bool,
    ) -> NodeId {
        let p = &mut self.nodes[parent];
        if let Some(i) = p.untried.iter().position(|s| *s == slot) {
            p.untried.remove(i);
        }
        let state = p.state.clone();
        let depth = p.depth + 1;
        let action = self.model.sampler.action(&state, slot);
        untried.reverse();
        let id = self.nodes.len();
        let mut node = TreeNode::detached(state, depth);
        node.parent = Some(parent);
        node.slot = Some(slot);
        node.action = Some(action);
        node.q_sum = q_sum;
        node.visits = visits;
        node.graspable = graspable;
        node.dead = dead;
        node.untried = untried;
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        if graspable {
            self.register_graspable(id);
        }
        self.recompute_flags();
        id
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    /// Current maximum tree depth (lowered by dynamic shrinking).
    pub fn depth_limit(&self) -> u32 {
        self.depth_limit
    }

    /// Current rollout depth beyond the tree.
    pub fn rollout_limit(&self) -> u32 {
        self.rollout_limit
    }

    /// Total push count a rollout may reach.
    pub fn horizon(&self) -> u32 {
        self.depth_limit + self.rollout_limit
    }

    pub fn early_stop(&self) -> &EarlyStopState {
        &self.early
    }

    pub(crate) fn model(&self) -> &WorldModel {
        &self.model
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id]
    }

    pub fn summary(&self) -> Vec<NodeSummary> {
        self.nodes
            .iter()
            .map(|n| NodeSummary {
                parent: n.parent,
                slot: n.slot,
                depth: n.depth,
                q_sum: n.q_sum,
                visits: n.visits,
                graspable: n.graspable,
                dead: n.dead,
            })
            .collect()
    }

    /// Node can still be expanded itself.
    pub fn is_expandable(&self, id: NodeId) -> bool {
        let n = &self.nodes[id];
        !n.graspable && !n.dead && n.depth < self.depth_limit && !n.untried.is_empty()
    }

    /// Node or some descendant can still be expanded.
    pub fn is_selectable(&self, id: NodeId) -> bool {
        self.nodes[id].open
    }

    fn compute_open(&self, id: NodeId) -> bool {
        let n = &self.nodes[id];
        !n.graspable
            && !n.dead
            && n.depth < self.depth_limit
            && (!n.untried.is_empty() || n.open_children > 0)
    }

    fn is_settled(&self, n: &TreeNode) -> bool {
        n.untried.is_empty() || n.graspable || n.dead || n.depth >= self.depth_limit
    }

    /// Propagate a change of `id`'s selectability toward the root.
    fn refresh(&mut self, mut id: NodeId) {
        loop {
            let open = self.compute_open(id);
            if open == self.nodes[id].open {
                return;
            }
            self.nodes[id].open = open;
            let Some(p) = self.nodes[id].parent else {
                return;
            };
            if open {
                self.nodes[p].open_children += 1;
            } else {
                self.nodes[p].open_children -= 1;
            }
            id = p;
        }
    }

    /// Rebuild selectability and per-level counts from scratch. Children
    /// always have larger ids than their parents.
    fn recompute_flags(&mut self) {
        for n in &mut self.nodes {
            n.open_children = 0;
        }
        for id in (0..self.nodes.len()).rev() {
            let open = self.compute_open(id);
            self.nodes[id].open = open;
            if open {
                if let Some(p) = self.nodes[id].parent {
                    self.nodes[p].open_children += 1;
                }
            }
        }
        self.unsettled.clear();
        for id in 0..self.nodes.len() {
            if !self.is_settled(&self.nodes[id]) {
                let d = self.nodes[id].depth as usize;
                if self.unsettled.len() <= d {
                    self.unsettled.resize(d + 1, 0);
                }
                self.unsettled[d] += 1;
            }
        }
    }

    /// Walk down from the root, at each step taking the selectable child with
    /// the highest score (ties to the earliest child), until reaching a node
    /// that still has untried candidates.
    pub(crate) fn descend<F>(&self, score: F) -> Result<NodeId, SearchError>
    where
        F: Fn(&TreeNode, &TreeNode) -> f64,
    {
        if !self.nodes[0].open {
            return Err(SearchError::Exhausted);
        }
        let mut id = 0;
        loop {
            if self.is_expandable(id) {
                return Ok(id);
            }
            let parent = &self.nodes[id];
            let mut best: Option<(f64, NodeId)> = None;
            for &c in &parent.children {
                let child = &self.nodes[c];
                if !child.open {
                    continue;
                }
                let s = score(parent, child);
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, c));
                }
            }
            match best {
                Some((_, c)) => id = c,
                None => return Err(SearchError::Exhausted),
            }
        }
    }

    pub fn select_leaf(&self, c: f64) -> Result<NodeId, SearchError> {
        self.descend(|p, ch| ucb_score(p, ch, c))
    }

    /// Remove and return the next untried candidate of `id`.
    pub fn pop_untried(&mut self, id: NodeId) -> Option<PushSlot> {
        if !self.is_expandable(id) {
            return None;
        }
        let slot = self.nodes[id].untried.pop()?;
        self.after_untried_change(id);
        Some(slot)
    }

    fn take_untried(&mut self, id: NodeId, slot: PushSlot) -> Result<(), SearchError> {
        let i = self.nodes[id]
            .untried
            .iter()
            .position(|s| *s == slot)
            .ok_or(SearchError::NotUntried(id))?;
        self.nodes[id].untried.remove(i);
        self.after_untried_change(id);
        Ok(())
    }

    fn after_untried_change(&mut self, id: NodeId) {
        let n = &self.nodes[id];
        if n.untried.is_empty() && !(n.graspable || n.dead || n.depth >= self.depth_limit) {
            self.unsettled[n.depth as usize] -= 1;
        }
        self.refresh(id);
    }

    /// Attach a resolved candidate under `parent` and return the new node.
    pub(crate) fn attach(&mut self, parent: NodeId, e: Expansion) -> NodeId {
        let depth = self.nodes[parent].depth + 1;
        let id = self.nodes.len();
        let dead = !e.graspable && e.candidates.is_empty();
        let mut node = TreeNode::detached(e.state, depth);
        node.parent = Some(parent);
        node.slot = Some(e.slot);
        node.action = Some(e.action);
        node.graspable = e.graspable;
        node.dead = dead;
        if depth < self.depth_limit && !e.graspable {
            node.untried = e.candidates;
            node.untried.reverse();
        }
        let settled = self.is_settled(&node);
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        self.expansions += 1;
        if !settled {
            let d = depth as usize;
            if self.unsettled.len() <= d {
                self.unsettled.resize(d + 1, 0);
            }
            self.unsettled[d] += 1;
        }
        self.refresh(id);
        if e.graspable {
            self.register_graspable(id);
            if depth < self.depth_limit {
                // dynamic shrink: nothing deeper than this can do better
                self.depth_limit = depth;
                self.rollout_limit = 0;
                self.recompute_flags();
            }
        }
        id
    }

    fn register_graspable(&mut self, id: NodeId) {
        self.early.graspable_nodes.push(id);
        let d = self.nodes[id].depth;
        let mut cur = Some(id);
        while let Some(i) = cur {
            if self.nodes[i].grasp_depth <= d {
                break;
            }
            self.nodes[i].grasp_depth = d;
            cur = self.nodes[i].parent;
        }
    }

    /// Expand `action` from `id`.
    pub fn expand(&mut self, id: NodeId, action: &PushAction) -> Result<NodeId, SearchError> {
        if !self.is_expandable(id) {
            return Err(SearchError::NotExpandable(id));
        }
        let n = &self.nodes[id];
        let slot = n
            .untried
            .iter()
            .copied()
            .find(|s| self.model.sampler.action(&n.state, *s) == *action)
            .ok_or(SearchError::NotUntried(id))?;
        self.take_untried(id, slot)?;
        let e = self.model.expansion(&self.nodes[id].state, slot);
        Ok(self.attach(id, e))
    }

    /// Pop the next candidate of `id` and expand it.
    pub(crate) fn expand_next(&mut self, id: NodeId) -> Result<(NodeId, Vec<PushSlot>), SearchError> {
        let slot = self.pop_untried(id).ok_or(SearchError::NotExpandable(id))?;
        let e = self.model.expansion(&self.nodes[id].state, slot);
        let candidates = e.candidates.clone();
        Ok((self.attach(id, e), candidates))
    }

    /// Raise the early-stop level by one if every node on the level above it
    /// is fully expanded or terminal.
    pub fn update_es_level(&mut self) {
        if !self.cfg.early_stop {
            return;
        }
        let above = (self.early.es_level - 1) as usize;
        if self.unsettled.get(above).copied().unwrap_or(0) == 0 {
            self.early.es_level += 1;
        }
    }

    pub fn early_stop_reached(&self) -> bool {
        self.cfg.early_stop && self.nodes[0].grasp_depth <= self.early.es_level
    }

    /// Add `reward` to every node from `id` up to the root.
    pub fn backprop(&mut self, id: NodeId, reward: f64) {
        self.nodes[id].rollout_reward = Some(reward);
        let mut cur = Some(id);
        while let Some(i) = cur {
            let n = &mut self.nodes[i];
            n.q_sum += reward;
            n.visits += 1;
            cur = n.parent;
        }
    }

    /// Root child to execute. After an early stop only children leading to a
    /// graspable node within the early-stop level are considered.
    pub fn best_child(&self, rule: FinalRule) -> Option<NodeId> {
        let root = &self.nodes[0];
        let restrict = self.early_stop_reached();
        let mut best: Option<(f64, u64, NodeId)> = None;
        for &c in &root.children {
            let n = &self.nodes[c];
            if n.visits == 0 {
                continue;
            }
            if restrict && n.grasp_depth > self.early.es_level {
                continue;
            }
            let s = match rule {
                FinalRule::MeanReward => n.mean(),
                FinalRule::Ucb => ucb_score(root, n, self.cfg.c_explore),
            };
            let better = match best {
                None => true,
                Some((bs, bv, _)) => s > bs || (s == bs && n.visits > bv),
            };
            if better {
                best = Some((s, n.visits, c));
            }
        }
        best.map(|(_, _, c)| c)
    }

    /// Visits and reward sums agree with the rollouts recorded at each node.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (id, n) in self.nodes.iter().enumerate() {
            let own = n.rollout_reward.map_or(0, |_| 1);
            let vis: u64 = n.children.iter().map(|&c| self.nodes[c].visits).sum::<u64>() + own;
            if vis != n.visits {
                return Err(format!("node {id}: visits {} != {vis}", n.visits));
            }
            let q: f64 = n.children.iter().map(|&c| self.nodes[c].q_sum).sum::<f64>()
                + n.rollout_reward.unwrap_or(0.0);
            if (q - n.q_sum).abs() > 1e-9 * (1.0 + q.abs()) {
                return Err(format!("node {id}: q_sum {} != {q}", n.q_sum));
            }
            if n.q_sum > n.visits as f64 + 1e-9 {
                return Err(format!("node {id}: q_sum exceeds visits"));
            }
            for &c in &n.children {
                let slot = self.nodes[c].slot;
                if n.untried.iter().any(|s| Some(*s) == slot) {
                    return Err(format!("node {id}: child action still untried"));
                }
            }
        }
        Ok(())
    }
}

/// Tracks the budget of one search.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Clock {
    start: Instant,
    budget: Budget,
}

impl Clock {
    pub fn start(budget: Budget) -> Self {
        Clock {
            start: Instant::now(),
            budget,
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }

    /// Spent, given the work done so far. The first iteration is never
    /// refused.
    pub fn spent(&self, iterations: u64, expansions: u64) -> bool {
        if iterations == 0 {
            return false;
        }
        match self.budget {
            Budget::Seconds(s) => self.start.elapsed().as_secs_f64() >= s,
            Budget::Iterations(n) => iterations >= n,
            Budget::Expansions(n) => expansions >= n,
        }
    }
}

/// Select the leaf to grow.
pub fn select_leaf(tree: &SearchTree, c: f64) -> Result<NodeId, SearchError> {
    tree.select_leaf(c)
}

pub fn expand(tree: &mut SearchTree, node: NodeId, action: &PushAction) -> Result<NodeId, SearchError> {
    tree.expand(node, action)
}

/// Random-push rollout from a tree node: `gamma^k` if the target becomes
/// graspable after `k` pushes in total from the root, 0 on a dead end or at
/// the horizon.
pub fn rollout(tree: &SearchTree, node: NodeId, rng: &mut Stream) -> f64 {
    let n = tree.node(node);
    let model = tree.model();
    let candidates = if n.graspable {
        Vec::new()
    } else {
        model.sampler.slots(&n.state)
    };
    rollout_from(model, n, &candidates, tree.horizon(), rng)
}

fn rollout_from(
    model: &WorldModel,
    n: &TreeNode,
    candidates: &[PushSlot],
    horizon: u32,
    rng: &mut Stream,
) -> f64 {
    match Walk::begin(model, &n.state, n.depth, n.graspable, candidates, horizon) {
        Err(f) => f.reward,
        Ok(w) => w.run(model, rng).reward,
    }
}

pub fn backprop_mean(tree: &mut SearchTree, leaf: NodeId, reward: f64) {
    tree.backprop(leaf, reward);
}

/// Serial search with the full outcome.
pub fn search_serial(state: WorldState, cfg: &SearchConfig) -> Result<SearchOutcome, SearchError> {
    let mut tree = SearchTree::new(state, cfg)?;
    let clock = Clock::start(cfg.budget);
    let mut iterations = 0u64;
    let stop = loop {
        if clock.spent(iterations, tree.expansions()) {
            break StopReason::Budget;
        }
        if tree.early_stop_reached() {
            break StopReason::EarlyStop;
        }
        let leaf = match tree.select_leaf(cfg.c_explore) {
            Ok(id) => id,
            Err(_) => break StopReason::Exhausted,
        };
        let (child, candidates) = tree.expand_next(leaf)?;
        tree.update_es_level();
        let mut rng = rng::stream(cfg.rng_seed, iterations, 0);
        let reward = rollout_from(&tree.model, &tree.nodes[child], &candidates, tree.horizon(), &mut rng);
        tree.backprop(child, reward);
        iterations += 1;
    };
    finish(tree, cfg, iterations, clock, stop)
}

pub(crate) fn finish(
    tree: SearchTree,
    cfg: &SearchConfig,
    iterations: u64,
    clock: Clock,
    stop: StopReason,
) -> Result<SearchOutcome, SearchError> {
    let child = tree.best_child(cfg.final_rule).ok_or(SearchError::NoLegalPush)?;
    let action = tree.node(child).action.expect("root child carries its action");
    let stats = SearchStats {
        iterations,
        expansions: tree.expansions(),
        elapsed: clock.elapsed(),
        stop,
    };
    Ok(SearchOutcome {
        action,
        child,
        tree,
        stats,
    })
}

/// Plan one push with serial MCTS.
pub fn run_serial_mcts(state: WorldState, cfg: &SearchConfig) -> Result<PushAction, SearchError> {
    search_serial(state, cfg).map(|o| o.action)
}
