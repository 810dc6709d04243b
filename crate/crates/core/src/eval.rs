//! Scoring for generated worlds: budgeted A* search, objective-chain
//! playability, the one-hot novelty distance between grids, tile-placement
//! accuracies, and the model-judged coherence score. Everything here except
//! the coherence judge is pure and deterministic.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{self, ExtractionStep, LlmError, Provider, TemplateStore};
use crate::world::{locate_symbol, Cell, CharacterInfo, Goal, TileLegend, WorldGrid};

#[derive(Debug, Error)]
pub enum EvalError {
    /// The protagonist's symbol does not appear on the grid.
    #[error("protagonist symbol '{0}' not found in the world")]
    MissingProtagonist(char),
    /// Important-tile accuracy is undefined for an empty important set.
    #[error("the legend has no important tiles to check")]
    EmptyImportantSet,
}

// ---------------------------------------------------------------------------
// A* search
// ---------------------------------------------------------------------------

/// A shortest-path query on a grid. A cell is passable when its symbol is in
/// `passable` — except the goal cell, which is always passable: targets like
/// doors or enemies are legitimate destinations without being walkable.
#[derive(Debug, Clone)]
pub struct SearchProblem<'a> {
    pub grid: &'a WorldGrid,
    pub passable: BTreeSet<char>,
    pub start: Cell,
    pub goal: Cell,
}

impl SearchProblem<'_> {
    fn is_passable(&self, cell: Cell) -> bool {
        if cell == self.goal {
            return true;
        }
        self.grid
            .get(cell)
            .is_some_and(|sym| self.passable.contains(&sym))
    }
}

/// Result of one budgeted search: the path (start and goal inclusive) if the
/// goal was reached within `budget` node expansions, plus how many
/// expansions were spent either way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    pub path: Option<Vec<Cell>>,
    pub expansions: usize,
}

/// The passable set for pathing toward `goal`: every walkable symbol plus
/// the goal's target symbol. Shared by playability scoring and the agent's
/// distance measure so both sides agree on reachability.
pub fn goal_passable_set(legend: &TileLegend, goal: &Goal) -> BTreeSet<char> {
    let mut passable = legend.walkable.clone();
    passable.insert(goal.target_symbol);
    passable
}

/// Budgeted A* with 4-connected moves, unit step cost, and the Manhattan
/// heuristic. Ties in the priority queue break on lower f-score, then lower
/// row, then lower column, making the returned path deterministic.
pub fn astar(problem: &SearchProblem, budget: usize) -> Option<Vec<Cell>> {
    astar_search(problem, budget).path
}

/// [`astar`] plus the expansion count, for budget accounting.
pub fn astar_search(problem: &SearchProblem, budget: usize) -> SearchOutcome {
    let goal = problem.goal;
    if problem.start == goal {
        return SearchOutcome { path: Some(vec![problem.start]), expansions: 0 };
    }

    let h = |cell: Cell| cell.0.abs_diff(goal.0) + cell.1.abs_diff(goal.1);
    let mut open: BinaryHeap<Reverse<(usize, usize, usize)>> = BinaryHeap::new();
    let mut g_score: HashMap<Cell, usize> = HashMap::new();
    let mut came_from: HashMap<Cell, Cell> = HashMap::new();
    let mut closed: HashSet<Cell> = HashSet::new();
    let mut expansions = 0usize;

    g_score.insert(problem.start, 0);
    open.push(Reverse((h(problem.start), problem.start.0, problem.start.1)));

    while let Some(Reverse((_, row, col))) = open.pop() {
        let cell = (row, col);
        if closed.contains(&cell) {
            continue; // stale queue entry
        }
        if cell == goal {
            let mut path = vec![cell];
            let mut cursor = cell;
            while let Some(&previous) = came_from.get(&cursor) {
                path.push(previous);
                cursor = previous;
            }
            path.reverse();
            return SearchOutcome { path: Some(path), expansions };
        }
        if expansions == budget {
            return SearchOutcome { path: None, expansions };
        }
        closed.insert(cell);
        expansions += 1;

        let current_g = g_score[&cell];
        for neighbor in neighbors4(cell) {
            if closed.contains(&neighbor) || !problem.is_passable(neighbor) {
                continue;
            }
            let tentative = current_g + 1;
            if tentative < g_score.get(&neighbor).copied().unwrap_or(usize::MAX) {
                g_score.insert(neighbor, tentative);
                came_from.insert(neighbor, cell);
                open.push(Reverse((tentative + h(neighbor), neighbor.0, neighbor.1)));
            }
        }
    }
    SearchOutcome { path: None, expansions }
}

fn neighbors4(cell: Cell) -> impl Iterator<Item = Cell> {
    let (row, col) = cell;
    [
        (row.checked_sub(1).map(|r| (r, col))),
        (Some((row + 1, col))),
        (col.checked_sub(1).map(|c| (row, c))),
        (Some((row, col + 1))),
    ]
    .into_iter()
    .flatten()
}

// ---------------------------------------------------------------------------
// Playability
// ---------------------------------------------------------------------------

/// Outcome of checking an objective chain end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayVerdict {
    /// True when every objective is reachable in order.
    pub playable: bool,
    /// Total moves across all legs, present only when playable.
    pub total_path_length: Option<usize>,
    /// A* expansions spent across all legs.
    pub expansions_used: usize,
}

/// Walks the objective chain: a leg per goal, each starting where the
/// previous one ended, all legs drawing on one shared expansion budget. A
/// goal with no position fails the chain. An empty goal list is trivially
/// playable with length 0.
pub fn playability(
    world: &WorldGrid,
    goals: &[Goal],
    protagonist_symbol: char,
    legend: &TileLegend,
    budget: usize,
) -> Result<PlayVerdict, EvalError> {
    let start = locate_symbol(world, protagonist_symbol)
        .ok_or(EvalError::MissingProtagonist(protagonist_symbol))?;

    let mut position = start;
    let mut remaining = budget;
    let mut total_moves = 0usize;
    for goal in goals {
        let Some(target) = goal.position else {
            return Ok(PlayVerdict {
                playable: false,
                total_path_length: None,
                expansions_used: budget - remaining,
            });
        };
        let problem = SearchProblem {
            grid: world,
            passable: goal_passable_set(legend, goal),
            start: position,
            goal: target,
        };
        let outcome = astar_search(&problem, remaining);
        remaining -= outcome.expansions;
        match outcome.path {
            Some(path) => {
                total_moves += path.len() - 1;
                position = target;
            }
            None => {
                return Ok(PlayVerdict {
                    playable: false,
                    total_path_length: None,
                    expansions_used: budget - remaining,
                })
            }
        }
    }
    Ok(PlayVerdict {
        playable: true,
        total_path_length: Some(total_moves),
        expansions_used: budget - remaining,
    })
}

// ---------------------------------------------------------------------------
// Novelty
// ---------------------------------------------------------------------------

/// Euclidean distance between two grids under a one-hot tile encoding.
///
/// Grids are aligned at the top-left and compared over the union of their
/// bounding boxes; a cell absent from one grid counts as its own "absent"
/// channel. Any two cells that disagree therefore differ in exactly two
/// channels, so the distance is `sqrt(2 * k)` for `k` disagreeing cells.
/// Symmetric, zero on identical grids, and invariant under any one-to-one
/// relabeling of symbols.
pub fn novelty_distance(a: &WorldGrid, b: &WorldGrid) -> f64 {
    let height = a.height().max(b.height());
    let width = a.width().max(b.width());
    let mut differing = 0usize;
    for row in 0..height {
        for col in 0..width {
            if a.get((row, col)) != b.get((row, col)) {
                differing += 1;
            }
        }
    }
    (2.0 * differing as f64).sqrt()
}

/// True when `world` is at least `threshold` away from every prior world
/// (a distance exactly at the threshold counts). Vacuously true with no
/// priors.
pub fn is_novel(world: &WorldGrid, priors: &[WorldGrid], threshold: f64) -> bool {
    priors
        .iter()
        .all(|prior| novelty_distance(world, prior) >= threshold)
}

// ---------------------------------------------------------------------------
// Accuracies
// ---------------------------------------------------------------------------

/// Fraction of story characters whose assigned symbol appears on the grid.
/// Characters still lacking a symbol count as absent. 1.0 for no characters.
pub fn char_tile_accuracy(world: &WorldGrid, characters: &[CharacterInfo]) -> f64 {
    if characters.is_empty() {
        return 1.0;
    }
    let placed = characters
        .iter()
        .filter(|c| c.symbol.is_some_and(|sym| world.contains_symbol(sym)))
        .count();
    placed as f64 / characters.len() as f64
}

/// Fraction of the legend's important symbols present on the grid.
pub fn important_tile_accuracy(
    world: &WorldGrid,
    legend: &TileLegend,
) -> Result<f64, EvalError> {
    if legend.important.is_empty() {
        return Err(EvalError::EmptyImportantSet);
    }
    let present = legend
        .important
        .iter()
        .filter(|&&sym| world.contains_symbol(sym))
        .count();
    Ok(present as f64 / legend.important.len() as f64)
}

// ---------------------------------------------------------------------------
// Coherence
// ---------------------------------------------------------------------------

/// First integer in the text, clamped to 0..=100. `None` when the text has
/// no digits at all.
pub fn parse_coherence_score(text: &str) -> Option<u8> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .take(9) // more than enough; avoids overflow on absurd replies
        .collect();
    if digits.is_empty() {
        return None;
    }
    let value: u64 = digits.parse().ok()?;
    Some(value.min(100) as u8)
}

/// Asks the judge model to score story/world coherence 0-100. Replies with
/// no integer are re-prompted under the standard parse-retry budget.
pub fn coherence_judge(
    provider: &Provider,
    templates: &TemplateStore,
    story_text: &str,
    legend_text: &str,
    world_text: &str,
) -> Result<u8, LlmError> {
    let prompt = templates.render(
        "coherence_judge",
        &[
            ("story", story_text),
            ("legend", legend_text),
            ("world", world_text),
        ],
    )?;
    let (score, _raw) = llm::run_step(provider, ExtractionStep::CoherenceJudge, &prompt, |text| {
        parse_coherence_score(text).ok_or_else(|| "reply contained no integer score".to_owned())
    })?;
    Ok(score)
}

// ---------------------------------------------------------------------------
// Round report
// ---------------------------------------------------------------------------

/// Everything measured about one generated world. Optional fields are
/// absent when a metric does not apply to the round or mode (no prior
/// worlds, empty important set, judge skipped, agent not run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub playable: bool,
    /// Total moves to complete all objectives in order, when playable.
    pub path_length: Option<usize>,
    /// Distance to the nearest earlier world in the run, once one exists.
    pub novelty_distance: Option<f64>,
    pub is_novel: bool,
    pub novel_and_playable: bool,
    pub char_tile_accuracy: Option<f64>,
    pub important_tile_accuracy: Option<f64>,
    /// Judge score 0-100. Omitted entirely when no judge was consulted.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coherence: Option<u8>,
    /// Mean episode reward, populated on the final round only.
    pub agent_reward: Option<f64>,
    pub astar_expansions_used: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{CharacterRole, GoalKind};

    fn grid(rows: &[&str]) -> WorldGrid {
        WorldGrid::new(rows.iter().map(|r| r.chars().collect()).collect())
    }

    fn open_legend(walkable: &[char]) -> TileLegend {
        let mut legend = TileLegend::default();
        for &sym in walkable {
            legend.entries.insert(sym, "tile".to_owned());
            legend.walkable.insert(sym);
        }
        legend
    }

    fn problem<'a>(grid: &'a WorldGrid, passable: &[char], start: Cell, goal: Cell) -> SearchProblem<'a> {
        SearchProblem {
            grid,
            passable: passable.iter().copied().collect(),
            start,
            goal,
        }
    }

    fn goal(index: usize, symbol: char, kind: GoalKind, position: Option<Cell>) -> Goal {
        Goal {
            index,
            description: format!("goal {index}"),
            target_symbol: symbol,
            target_kind: kind,
            position,
        }
    }

    #[test]
    fn astar_crosses_open_grid_in_manhattan_distance() {
        let g = grid(&["GGG", "GGG", "GGG"]);
        let path = astar(&problem(&g, &['G'], (0, 0), (2, 2)), 100).unwrap();
        assert_eq!(path.len(), 5); // 4 moves
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(2, 2)));
    }

    #[test]
    fn astar_detours_around_walls() {
        // Wall down the middle with a gap at the bottom.
        let g = grid(&["GWG", "GWG", "GGG"]);
        let path = astar(&problem(&g, &['G'], (0, 0), (0, 2)), 100).unwrap();
        assert_eq!(path.len() - 1, 6); // down, down, right, right, up, up
        assert!(!path.contains(&(0, 1)));
        assert!(path.contains(&(2, 1)));
    }

    #[test]
    fn astar_returns_none_when_budget_runs_out() {
        let g = grid(&["GWG", "GWG", "GWG"]); // unreachable right column
        let outcome = astar_search(&problem(&g, &['G'], (0, 0), (0, 2)), 100);
        assert_eq!(outcome.path, None);
        assert_eq!(outcome.expansions, 3); // whole left column, then frontier empty
        let tiny = astar_search(&problem(&grid(&["GGGGG"]), &['G'], (0, 0), (0, 4)), 2);
        assert_eq!(tiny.path, None);
        assert_eq!(tiny.expansions, 2);
    }

    #[test]
    fn astar_start_equals_goal_is_free() {
        let g = grid(&["G"]);
        let outcome = astar_search(&problem(&g, &['G'], (0, 0), (0, 0)), 0);
        assert_eq!(outcome.path, Some(vec![(0, 0)]));
        assert_eq!(outcome.expansions, 0);
    }

    #[test]
    fn astar_tie_breaks_deterministically() {
        // Two equal-cost routes around the square; lower row explores first,
        // so the right-then-down route wins reconstruction.
        let g = grid(&["GG", "GG"]);
        let path = astar(&problem(&g, &['G'], (0, 0), (1, 1)), 100).unwrap();
        assert_eq!(path, vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn astar_goal_cell_is_passable_by_definition() {
        let g = grid(&["GGD"]);
        // 'D' is not in the passable set, yet it is the goal.
        let path = astar(&problem(&g, &['G'], (0, 0), (0, 2)), 100).unwrap();
        assert_eq!(path.len() - 1, 2);
        // A non-goal 'D' still blocks.
        let g2 = grid(&["GDG"]);
        assert!(astar(&problem(&g2, &['G'], (0, 0), (0, 2)), 100).is_none());
    }

    #[test]
    fn playability_chains_goal_legs_in_order() {
        let g = grid(&["@GR", "GGG", "KGG"]);
        let legend = open_legend(&['G', '@']);
        let goals = vec![
            goal(0, 'R', GoalKind::ReachTile, Some((0, 2))),
            goal(1, 'K', GoalKind::PickObject, Some((2, 0))),
        ];
        let verdict = playability(&g, &goals, '@', &legend, 1000).unwrap();
        assert!(verdict.playable);
        // Leg 1: (0,0)->(0,2) = 2 moves; leg 2: (0,2)->(2,0) = 4 moves.
        assert_eq!(verdict.total_path_length, Some(6));
        assert!(verdict.expansions_used > 0);
    }

    #[test]
    fn playability_fails_on_unreachable_or_unplaced_goals() {
        let g = grid(&["@WG", "WWG"]);
        let legend = open_legend(&['G', '@']);
        let unreachable = vec![goal(0, 'G', GoalKind::ReachTile, Some((1, 2)))];
        let verdict = playability(&g, &unreachable, '@', &legend, 1000).unwrap();
        assert!(!verdict.playable);
        assert_eq!(verdict.total_path_length, None);

        let unplaced = vec![goal(0, 'G', GoalKind::ReachTile, None)];
        assert!(!playability(&g, &unplaced, '@', &legend, 1000).unwrap().playable);

        assert!(matches!(
            playability(&g, &[], 'Z', &legend, 1000),
            Err(EvalError::MissingProtagonist('Z'))
        ));
    }

    #[test]
    fn playability_with_no_goals_is_trivially_playable() {
        let g = grid(&["@G"]);
        let verdict = playability(&g, &[], '@', &open_legend(&['G', '@']), 10).unwrap();
        assert!(verdict.playable);
        assert_eq!(verdict.total_path_length, Some(0));
        assert_eq!(verdict.expansions_used, 0);
    }

    #[test]
    fn playability_shares_one_budget_across_legs() {
        let g = grid(&["@GGGGGGGGR"]);
        let legend = open_legend(&['G', '@']);
        let goals = vec![
            goal(0, 'R', GoalKind::ReachTile, Some((0, 9))),
            goal(1, '@', GoalKind::ReachTile, Some((0, 0))),
        ];
        // Enough for the first leg only: the second starts with nothing left.
        let verdict = playability(&g, &goals, '@', &legend, 9).unwrap();
        assert!(!verdict.playable);
        assert_eq!(verdict.expansions_used, 9);
    }

    #[test]
    fn novelty_distance_is_zero_on_identical_grids() {
        let a = grid(&["GGG", "GTG"]);
        assert_eq!(novelty_distance(&a, &a.clone()), 0.0);
    }

    #[test]
    fn novelty_distance_follows_two_channel_law() {
        let a = grid(&["GGG", "GGG"]);
        let mut b = a.clone();
        b.set((0, 1), 'T');
        assert!((novelty_distance(&a, &b) - 2f64.sqrt()).abs() < 1e-12);
        // Symmetry.
        assert_eq!(novelty_distance(&a, &b), novelty_distance(&b, &a));
    }

    #[test]
    fn novelty_distance_counts_missing_cells_as_their_own_channel() {
        // Same content, but b has one extra 2-cell column.
        let a = grid(&["GG", "GG"]);
        let b = grid(&["GGT", "GGT"]);
        assert!((novelty_distance(&a, &b) - 2.0).abs() < 1e-12); // sqrt(2*2)
    }

    #[test]
    fn novelty_distance_is_relabel_invariant() {
        let a = grid(&["GTG", "TGT"]);
        let b = grid(&["GGG", "TTT"]);
        // Swap G<->T in both grids: pairwise disagreement is unchanged.
        let swap = |g: &WorldGrid| {
            WorldGrid::new(
                g.rows
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|&c| if c == 'G' { 'T' } else { 'G' })
                            .collect()
                    })
                    .collect(),
            )
        };
        assert_eq!(novelty_distance(&a, &b), novelty_distance(&swap(&a), &swap(&b)));
    }

    #[test]
    fn is_novel_admits_the_threshold_boundary() {
        let base = grid(&["GGGG", "GGGG", "GGGG", "GGGG"]);
        let mut eight_diff = base.clone();
        for col in 0..4 {
            eight_diff.set((0, col), 'T');
            eight_diff.set((1, col), 'T');
        }
        // 8 differing cells: distance exactly sqrt(16) = 4.0, which meets a
        // 4.0 threshold.
        assert_eq!(novelty_distance(&base, &eight_diff), 4.0);
        assert!(is_novel(&eight_diff, std::slice::from_ref(&base), 4.0));
        let mut seven_diff = eight_diff.clone();
        seven_diff.set((1, 3), 'G');
        assert!(!is_novel(&seven_diff, std::slice::from_ref(&base), 4.0));
        // A prior identical to the world is never novel.
        assert!(!is_novel(&base, std::slice::from_ref(&base), 4.0));
        // No priors: vacuously novel.
        assert!(is_novel(&base, &[], 4.0));
    }

    #[test]
    fn char_tile_accuracy_counts_placed_characters() {
        let g = grid(&["@GW", "GGS"]);
        let mk = |name: &str, symbol: Option<char>| CharacterInfo {
            name: name.to_owned(),
            description: "someone".to_owned(),
            role: CharacterRole::NonPlayer,
            symbol,
        };
        let characters = vec![
            mk("a", Some('@')),
            mk("b", Some('W')),
            mk("c", Some('S')),
            mk("d", Some('X')), // not on the grid
        ];
        assert!((char_tile_accuracy(&g, &characters) - 0.75).abs() < 1e-12);
        // A character with no symbol yet counts as absent.
        let unassigned = vec![mk("a", Some('@')), mk("b", None)];
        assert!((char_tile_accuracy(&g, &unassigned) - 0.5).abs() < 1e-12);
        assert_eq!(char_tile_accuracy(&g, &[]), 1.0);
    }

    #[test]
    fn important_tile_accuracy_is_presence_over_set_size() {
        // 15 important symbols a..o; the grid shows 12 of them.
        let mut legend = TileLegend::default();
        for sym in 'a'..='o' {
            legend.entries.insert(sym, "thing".to_owned());
            legend.important.insert(sym);
        }
        let g = grid(&["abcdef", "ghijkl", "gggggg"]);
        let accuracy = important_tile_accuracy(&g, &legend).unwrap();
        assert!((accuracy - 0.8).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&accuracy));

        let empty = TileLegend::default();
        assert!(matches!(
            important_tile_accuracy(&g, &empty),
            Err(EvalError::EmptyImportantSet)
        ));
    }

    #[test]
    fn coherence_parsing_takes_first_integer_and_clamps() {
        assert_eq!(parse_coherence_score("87"), Some(87));
        assert_eq!(parse_coherence_score("Score: 93 out of 100."), Some(93));
        assert_eq!(parse_coherence_score("175"), Some(100));
        assert_eq!(parse_coherence_score("I'd rate it 7, maybe 8"), Some(7));
        assert_eq!(parse_coherence_score("no digits here"), None);
    }

    #[test]
    fn coherence_judge_scores_via_provider_with_retry() {
        let provider = llm::mock_script([
            (ExtractionStep::CoherenceJudge, "hmm, hard to say".to_owned()),
            (ExtractionStep::CoherenceJudge, "82 / 100".to_owned()),
        ]);
        let templates = TemplateStore::embedded();
        let score = coherence_judge(&provider, &templates, "story", "{}", "GG\nGG").unwrap();
        assert_eq!(score, 82);
        assert_eq!(provider.exchange_count(), 2);
        // The prompt carried the inputs.
        let first = &provider.exchanges()[0];
        assert!(first.user_text().contains("story"));
        assert!(first.user_text().contains("GG\nGG"));
    }
}
