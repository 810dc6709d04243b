//! A turn-based agent that acts out a world's objectives: the action
//! vocabulary, the pure stepping rules, the distance-based reward law, and
//! episode rollouts driven by either a scripted policy or a chat model.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{astar, goal_passable_set, SearchProblem};
use crate::llm::{self, ExtractionStep, LlmError, Provider, TemplateStore};
use crate::world::{
    locate_symbol, most_frequent_walkable, Cell, Goal, GoalKind, TileLegend, Warning, WorldGrid,
};

/// Longest action sequence accepted for one objective; model output beyond
/// this is truncated.
pub const MAX_ACTIONS_PER_OBJECTIVE: usize = 256;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("protagonist symbol '{0}' not found in the world")]
    MissingProtagonist(char),
    /// The policy model never produced a usable action sequence.
    #[error(transparent)]
    ActionParse(#[from] LlmError),
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

/// Everything the agent can do in one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveUp,
    MoveDown,
    MoveLeft,
    MoveRight,
    PickObject,
    HitEnemy,
}

impl Action {
    /// The canonical spelling, as prompted to and parsed from models.
    pub fn canonical_name(self) -> &'static str {
        match self {
            Action::MoveUp => "move up",
            Action::MoveDown => "move down",
            Action::MoveLeft => "move left",
            Action::MoveRight => "move right",
            Action::PickObject => "pick object",
            Action::HitEnemy => "hit enemy",
        }
    }

    /// Parses one token. Case, repeated whitespace, underscores, and
    /// trailing punctuation are forgiven; anything else is `None`.
    pub fn parse(token: &str) -> Option<Action> {
        let normalized: String = token
            .to_lowercase()
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|part| !part.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        let normalized = normalized.trim_matches(|c: char| !c.is_alphanumeric());
        match normalized {
            "move up" => Some(Action::MoveUp),
            "move down" => Some(Action::MoveDown),
            "move left" => Some(Action::MoveLeft),
            "move right" => Some(Action::MoveRight),
            "pick object" => Some(Action::PickObject),
            "hit enemy" => Some(Action::HitEnemy),
            _ => None,
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Splits a model reply into actions: the last fenced block if there is one
/// (the whole text otherwise), split on commas and newlines. Unrecognized
/// tokens are skipped, one warning each.
pub fn parse_action_sequence(text: &str) -> (Vec<Action>, Vec<Warning>) {
    let blocks = llm::fenced_blocks(text);
    let body = blocks.last().map(String::as_str).unwrap_or(text);
    let mut actions = Vec::new();
    let mut warnings = Vec::new();
    for token in body.split(['\n', ',']) {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        match Action::parse(token) {
            Some(action) => actions.push(action),
            None => warnings.push(Warning::new(format!(
                "skipped unrecognized action token {token:?}"
            ))),
        }
    }
    (actions, warnings)
}

/// Move actions retracing an A* path (consecutive cells, 4-connected).
pub fn actions_for_path(path: &[Cell]) -> Vec<Action> {
    path.windows(2)
        .filter_map(|pair| {
            let (from, to) = (pair[0], pair[1]);
            if to.0 + 1 == from.0 {
                Some(Action::MoveUp)
            } else if to.0 == from.0 + 1 {
                Some(Action::MoveDown)
            } else if to.1 + 1 == from.1 {
                Some(Action::MoveLeft)
            } else if to.1 == from.1 + 1 {
                Some(Action::MoveRight)
            } else {
                None
            }
        })
        .collect()
}

/// The action that completes a goal once in range, if it needs one.
pub fn interaction_for(kind: GoalKind) -> Option<Action> {
    match kind {
        GoalKind::ReachTile => None,
        GoalKind::PickObject => Some(Action::PickObject),
        GoalKind::HitEnemy => Some(Action::HitEnemy),
    }
}

// ---------------------------------------------------------------------------
// State and stepping
// ---------------------------------------------------------------------------

/// The agent mid-episode. The grid is carried along because completing a
/// pick or hit rewrites the target cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Cell,
    pub world: WorldGrid,
    pub completed_goals: BTreeSet<usize>,
    /// Index of the objective currently being attempted.
    pub current_goal: usize,
}

/// Applies one action. Total: anything inapplicable is a no-op.
///
/// Moves succeed when the target cell is in bounds and passable for the
/// current goal — a walkable symbol, the goal's target symbol, or the
/// goal's cell itself (matching the passability A* uses, so an A* path is
/// always executable). A completed pick or hit rewrites the target cell to
/// the grid's most frequent walkable symbol — the object is carried away,
/// the enemy is gone. Reach goals complete implicitly on entering the cell.
pub fn step(mut state: AgentState, action: Action, legend: &TileLegend, goals: &[Goal]) -> AgentState {
    let goal = goals.get(state.current_goal);
    match action {
        Action::MoveUp | Action::MoveDown | Action::MoveLeft | Action::MoveRight => {
            let (row, col) = state.position;
            let target = match action {
                Action::MoveUp => row.checked_sub(1).map(|r| (r, col)),
                Action::MoveDown => Some((row + 1, col)),
                Action::MoveLeft => col.checked_sub(1).map(|c| (row, c)),
                Action::MoveRight => Some((row, col + 1)),
                _ => unreachable!(),
            };
            let Some(target) = target else { return state };
            let passable = state.world.get(target).is_some_and(|symbol| {
                legend.is_walkable(symbol)
                    || goal.is_some_and(|g| {
                        symbol == g.target_symbol || g.position == Some(target)
                    })
            });
            if passable {
                state.position = target;
                if let Some(goal) = goal {
                    if goal.target_kind == GoalKind::ReachTile
                        && goal.position == Some(target)
                    {
                        complete_current(&mut state, legend, None);
                    }
                }
            }
            state
        }
        Action::PickObject => {
            try_interact(&mut state, legend, goal, GoalKind::PickObject);
            state
        }
        Action::HitEnemy => {
            try_interact(&mut state, legend, goal, GoalKind::HitEnemy);
            state
        }
    }
}

fn try_interact(
    state: &mut AgentState,
    legend: &TileLegend,
    goal: Option<&Goal>,
    wanted: GoalKind,
) {
    let Some(goal) = goal else { return };
    let Some(target) = goal.position else { return };
    if goal.target_kind != wanted {
        return;
    }
    let (row, col) = state.position;
    let adjacent = target == (row, col)
        || (target.0 == row && target.1.abs_diff(col) == 1)
        || (target.1 == col && target.0.abs_diff(row) == 1);
    if adjacent {
        complete_current(state, legend, Some(target));
    }
}

/// Marks the current goal done; `cleared_cell` is rewritten to the most
/// frequent walkable symbol (left untouched when the grid has none).
fn complete_current(state: &mut AgentState, legend: &TileLegend, cleared_cell: Option<Cell>) {
    state.completed_goals.insert(state.current_goal);
    if let Some(cell) = cleared_cell {
        if let Some(filler) = most_frequent_walkable(&state.world, legend) {
            state.world.set(cell, filler);
        }
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Reward for one objective given A*-distance-to-target at the start and
/// end of its turn: 1.0 for completion; a normalized progress fraction when
/// the agent ended closer; bounded regret, floored at −1, when it ended
/// farther away.
pub fn objective_reward(d_start: usize, d_end: usize, completed: bool) -> f64 {
    if completed {
        return 1.0;
    }
    let denominator = d_start.max(1) as f64;
    if d_end <= d_start {
        (d_start as f64 - d_end as f64) / denominator
    } else {
        -f64::min(1.0, (d_end as f64 - d_start as f64) / denominator)
    }
}

/// What happened on one objective of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOutcome {
    pub goal_index: usize,
    pub actions: Vec<Action>,
    pub reward: f64,
    pub completed: bool,
}

/// One full pass over the objective list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub per_objective: Vec<ObjectiveOutcome>,
    /// Mean of the per-objective rewards.
    pub episode_reward: f64,
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// What a policy sees when asked to plan one objective.
#[derive(Debug)]
pub struct AgentObservation<'a> {
    /// The current grid, serialized.
    pub world_text: String,
    pub position: Cell,
    pub goal: &'a Goal,
    /// Comma-separated walkable symbols, for the prompt.
    pub walkable_symbols: String,
    /// The previous objective's outcome, absent on the first request.
    pub previous: Option<&'a ObjectiveOutcome>,
    /// Traces of earlier episodes on this world.
    pub prior_traces: &'a [EpisodeTrace],
}

/// Plans an action sequence for one objective at a time.
pub trait ActionPolicy {
    fn plan(&mut self, observation: &AgentObservation<'_>) -> Result<Vec<Action>, AgentError>;
}

/// Replays pre-written plans in order; once exhausted it idles (empty
/// plans). Plans queue across objectives and episodes.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    plans: VecDeque<Vec<Action>>,
}

impl ScriptedPolicy {
    pub fn new(plans: impl IntoIterator<Item = Vec<Action>>) -> Self {
        ScriptedPolicy { plans: plans.into_iter().collect() }
    }
}

impl ActionPolicy for ScriptedPolicy {
    fn plan(&mut self, _observation: &AgentObservation<'_>) -> Result<Vec<Action>, AgentError> {
        Ok(self.plans.pop_front().unwrap_or_default())
    }
}

/// Asks a chat model for each plan, with the standard parse-retry budget.
/// Replies with no valid action at all are re-prompted; individually bad
/// tokens inside an otherwise usable reply are skipped with warnings.
pub struct LlmPolicy<'a> {
    provider: &'a Provider,
    templates: &'a TemplateStore,
    warnings: Vec<Warning>,
}

impl<'a> LlmPolicy<'a> {
    pub fn new(provider: &'a Provider, templates: &'a TemplateStore) -> Self {
        LlmPolicy { provider, templates, warnings: Vec::new() }
    }

    /// Warnings accumulated so far, draining them.
    pub fn take_warnings(&mut self) -> Vec<Warning> {
        std::mem::take(&mut self.warnings)
    }
}

impl ActionPolicy for LlmPolicy<'_> {
    fn plan(&mut self, observation: &AgentObservation<'_>) -> Result<Vec<Action>, AgentError> {
        let previous_section = match observation.previous {
            Some(outcome) => format!(
                "\nFor the previous objective you executed [{}] and received reward {:.4}.\n",
                outcome
                    .actions
                    .iter()
                    .map(|a| a.canonical_name())
                    .collect::<Vec<_>>()
                    .join(", "),
                outcome.reward
            ),
            None => String::new(),
        };
        let history_section = if observation.prior_traces.is_empty() {
            String::new()
        } else {
            let summary = serde_json::to_string(observation.prior_traces)
                .unwrap_or_else(|_| "[]".to_owned());
            format!("\nYour earlier episodes on this world, as data: {summary}\n")
        };
        let goal_position = observation
            .goal
            .position
            .map(|(row, col)| format!(" at row {row}, column {col}"))
            .unwrap_or_default();
        let objective = format!(
            "{} (target '{}'{goal_position})",
            observation.goal.description, observation.goal.target_symbol
        );
        let prompt = self.templates.render(
            "agent_actions",
            &[
                ("world", &observation.world_text),
                ("row", &observation.position.0.to_string()),
                ("col", &observation.position.1.to_string()),
                ("walkable", &observation.walkable_symbols),
                ("objective", &objective),
                ("previous_section", &previous_section),
                ("history_section", &history_section),
            ],
        )?;
        let (actions, _raw) =
            llm::run_step(self.provider, ExtractionStep::AgentActions, &prompt, |text| {
                let (actions, warnings) = parse_action_sequence(text);
                if actions.is_empty() {
                    return Err("reply contained no valid action".to_owned());
                }
                Ok((actions, warnings))
            })
            .map(|((actions, warnings), raw)| {
                self.warnings.extend(warnings);
                (actions, raw)
            })?;
        Ok(actions)
    }
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Plays every objective once, in order. Each objective's turn: measure the
/// A* distance, ask the policy for a plan (with the previous objective's
/// outcome and all prior-episode traces as feedback), execute it capped at
/// [`MAX_ACTIONS_PER_OBJECTIVE`], measure again, score.
///
/// Distances use A* path length on the agent's current grid with the same
/// passability as playability scoring; an unreachable target counts as the
/// grid perimeter, `2 * (height + width)`.
pub fn run_episode(
    world: &WorldGrid,
    goals: &[Goal],
    legend: &TileLegend,
    protagonist_symbol: char,
    policy: &mut dyn ActionPolicy,
    prior_traces: &[EpisodeTrace],
    astar_budget: usize,
) -> Result<EpisodeTrace, AgentError> {
    let start = locate_symbol(world, protagonist_symbol)
        .ok_or(AgentError::MissingProtagonist(protagonist_symbol))?;
    let mut state = AgentState {
        position: start,
        world: world.clone(),
        completed_goals: BTreeSet::new(),
        current_goal: 0,
    };
    let walkable_symbols = legend
        .walkable
        .iter()
        .map(char::to_string)
        .collect::<Vec<_>>()
        .join(", ");

    let mut per_objective: Vec<ObjectiveOutcome> = Vec::new();
    for (index, goal) in goals.iter().enumerate() {
        state.current_goal = index;

        // A reach goal whose cell we already occupy needs no actions.
        if goal.target_kind == GoalKind::ReachTile && goal.position == Some(state.position) {
            state.completed_goals.insert(index);
            per_objective.push(ObjectiveOutcome {
                goal_index: index,
                actions: Vec::new(),
                reward: 1.0,
                completed: true,
            });
            continue;
        }

        let d_start = goal_distance(&state, goal, legend, astar_budget);
        let observation = AgentObservation {
            world_text: state.world.to_text(),
            position: state.position,
            goal,
            walkable_symbols: walkable_symbols.clone(),
            previous: per_objective.last(),
            prior_traces,
        };
        let mut actions = policy.plan(&observation)?;
        actions.truncate(MAX_ACTIONS_PER_OBJECTIVE);
        for &action in &actions {
            state = step(state, action, legend, goals);
        }
        let completed = state.completed_goals.contains(&index);
        let reward = if completed {
            1.0
        } else {
            let d_end = goal_distance(&state, goal, legend, astar_budget);
            objective_reward(d_start, d_end, false)
        };
        per_objective.push(ObjectiveOutcome { goal_index: index, actions, reward, completed });
    }

    let episode_reward = if per_objective.is_empty() {
        0.0
    } else {
        per_objective.iter().map(|o| o.reward).sum::<f64>() / per_objective.len() as f64
    };
    Ok(EpisodeTrace { per_objective, episode_reward })
}

fn goal_distance(
    state: &AgentState,
    goal: &Goal,
    legend: &TileLegend,
    astar_budget: usize,
) -> usize {
    let perimeter = 2 * (state.world.height() + state.world.width());
    let Some(target) = goal.position else { return perimeter };
    let problem = SearchProblem {
        grid: &state.world,
        passable: goal_passable_set(legend, goal),
        start: state.position,
        goal: target,
    };
    match astar(&problem, astar_budget) {
        Some(path) => path.len() - 1,
        None => perimeter,
    }
}

/// Runs `episodes` episodes back to back, each seeing all earlier traces,
/// and returns the per-episode rewards.
pub fn reward_experiment(
    world: &WorldGrid,
    goals: &[Goal],
    legend: &TileLegend,
    protagonist_symbol: char,
    policy: &mut dyn ActionPolicy,
    episodes: u32,
    astar_budget: usize,
) -> Result<Vec<f64>, AgentError> {
    run_episodes(world, goals, legend, protagonist_symbol, policy, episodes, astar_budget)
        .map(|traces| traces.iter().map(|t| t.episode_reward).collect())
}

/// [`reward_experiment`], but returning the full traces.
pub fn run_episodes(
    world: &WorldGrid,
    goals: &[Goal],
    legend: &TileLegend,
    protagonist_symbol: char,
    policy: &mut dyn ActionPolicy,
    episodes: u32,
    astar_budget: usize,
) -> Result<Vec<EpisodeTrace>, AgentError> {
    let mut traces: Vec<EpisodeTrace> = Vec::new();
    for _ in 0..episodes {
        let trace = run_episode(
            world,
            goals,
            legend,
            protagonist_symbol,
            policy,
            &traces,
            astar_budget,
        )?;
        traces.push(trace);
    }
    Ok(traces)
}
