//! A complete scripted demonstration run: a hand-built story world with
//! three generation rounds, eight objectives, and optimal agent episodes,
//! used for offline end-to-end runs, determinism checks, and batch
//! protocol tests. Every model reply is pre-recorded; the agent replies
//! are derived from the fixture by path-finding, so the demo always plays
//! out perfectly.

use std::path::Path;

use crate::agent::{self, actions_for_path, interaction_for, AgentState};
use crate::eval::{astar, goal_passable_set, SearchProblem};
use crate::llm::{ExtractionStep, MockScript, Provider};
use crate::pipeline::{self, Mode, PipelineError, RunArtifact, RunConfig, TilesetPaths};
use crate::tiles::{self, TileCategory, TileError};
use crate::world::{locate_symbol, Goal, GoalKind, TileLegend, WorldGrid};

const STORY: &str = "Mira the archer came home through the pines to find the valley changed. A rune stone glowed on the far side of the river, and the old elder Bren waited by the crossing with a warning on his lips.\n\nThe dragon Ashvor had claimed the southern bank. Bren pressed a map into Mira's hands: the rune stone would wake the wards, but only if she carried the iron key through the wooden door of the shrine.\n\nBeyond the door lay the shrine's treasure chest and, deeper still, a crystal that held the valley's old light. Mira would need all of it: rune, key, door, chest, and crystal, gathered in order, before the wards could rise.\n\nThen came the bridge. One plank crossing over dark water, and on the far side the dirt path where Ashvor hunted. Mira strung her bow, stepped onto the path, and went to meet the dragon.";

const CHARACTERS: &str = r#"[
  {"name": "Mira", "description": "a brave young archer ranger", "role": "protagonist"},
  {"name": "Ashvor", "description": "a fierce red dragon", "role": "antagonist"},
  {"name": "Bren", "description": "the village elder chief", "role": "non_player"}
]"#;

const TILESET: &str = r#"{
  "tiles": {
    "G": "green grass meadow",
    "T": "dark oak tree",
    "W": "deep blue water",
    "P": "dirt path trail",
    "B": "wooden plank bridge",
    "M": "jagged mountain rock",
    "R": "glowing rune stone",
    "K": "small iron key",
    "D": "wooden door frame",
    "C": "treasure chest box",
    "E": "glowing crystal cluster"
  },
  "character_symbols": {"Mira": "@", "Ashvor": "V", "Bren": "N"}
}"#;

const GOALS: &str = r#"[
  {"description": "Reach the glowing rune stone", "target_symbol": "R", "target_kind": "reach_tile"},
  {"description": "Pick up the small iron key", "target_symbol": "K", "target_kind": "pick_object"},
  {"description": "Reach the wooden shrine door", "target_symbol": "D", "target_kind": "reach_tile"},
  {"description": "Open the treasure chest", "target_symbol": "C", "target_kind": "pick_object"},
  {"description": "Gather the glowing crystal", "target_symbol": "E", "target_kind": "pick_object"},
  {"description": "Reach the wooden bridge", "target_symbol": "B", "target_kind": "reach_tile"},
  {"description": "Stand on the dirt path at the crossing", "target_symbol": "P", "target_kind": "reach_tile"},
  {"description": "Strike the dragon Ashvor", "target_symbol": "V", "target_kind": "hit_enemy"}
]"#;

const IMPORTANT: &str = r#"{"important": ["R", "K", "D", "C", "E", "B"]}"#;
const WALKABLE: &str = r#"{"walkable": ["G", "P", "B"]}"#;
const OBJECTS: &str = r#"{"interactive": ["K", "D", "C", "E"]}"#;

const POSITIONS: &str = r#"{"positions": [
  {"index": 0, "row": 3, "col": 3},
  {"index": 1, "row": 3, "col": 6},
  {"index": 2, "row": 3, "col": 9},
  {"index": 3, "row": 6, "col": 3},
  {"index": 4, "row": 6, "col": 8},
  {"index": 5, "row": 7, "col": 5},
  {"index": 6, "row": 8, "col": 5},
  {"index": 7, "row": 9, "col": 10}
]}"#;

const COHERENCE_SCORES: [&str; 3] = ["82", "88", "91"];

/// The shared layout: a walled garden of paths north of a river, the
/// bridge at mid-span, and the dragon's bank to the south.
const BASE_ROWS: [&str; 10] = [
    "GGGGTTGGGGGGGGGG",
    "GPPPPPPPPPPPPPGG",
    "GPGGGGGGGGGGGPGG",
    "GPGRGGKGGDGGGPGG",
    "GPGGGGGGGGGGGPGG",
    "GPPPPPPPPPPPPPGG",
    "GGGCGGGGEGGGGGGG",
    "WWWWWBWWWWWWWWWW",
    "G@GGGPGGGGGGNGGG",
    "GGGGGPGGGGVGGGGG",
];

/// Per-round tree decoration: (row, replacement) pairs applied over the
/// base. Rounds differ by at least eight cells pairwise, so each round
/// clears the default novelty threshold against all earlier ones.
const ROUND_DECORATIONS: [&[(usize, &str)]; 3] = [
    &[],
    &[
        (0, "TTGGGGGGGGGGGGTT"),
        (2, "GPTTGGGGGGGGGPGG"),
        (9, "TGGGGPGGGGVGGGGG"),
    ],
    &[
        (0, "GGTTGGTTGGTTGGGG"),
        (2, "GPGGTTGGGGGGGPGG"),
        (9, "GGGGGPGGGGVGGGTT"),
    ],
];

fn round_world(round: usize) -> WorldGrid {
    let mut rows: Vec<&str> = BASE_ROWS.to_vec();
    for &(index, replacement) in ROUND_DECORATIONS[round] {
        rows[index] = replacement;
    }
    WorldGrid::new(rows.iter().map(|row| row.chars().collect()).collect())
}

/// The terrain-only first pass: the world with characters, interactive
/// tiles, and markers melted back into grass.
fn round_environment(round: usize) -> WorldGrid {
    let mut grid = round_world(round);
    let cells: Vec<_> = grid.cells().collect();
    for (cell, symbol) in cells {
        if matches!(symbol, '@' | 'V' | 'N' | 'K' | 'D' | 'C' | 'E' | 'R') {
            grid.set(cell, 'G');
        }
    }
    grid
}

fn fenced(grid: &WorldGrid) -> String {
    format!("```\n{}\n```", grid.to_text())
}

/// The fixture's legend and positioned goals, as the pipeline will
/// reconstruct them from the scripted replies.
fn fixture_structure() -> (TileLegend, Vec<Goal>) {
    let mut legend = TileLegend::default();
    for (symbol, description) in [
        ('G', "green grass meadow"),
        ('T', "dark oak tree"),
        ('W', "deep blue water"),
        ('P', "dirt path trail"),
        ('B', "wooden plank bridge"),
        ('M', "jagged mountain rock"),
        ('R', "glowing rune stone"),
        ('K', "small iron key"),
        ('D', "wooden door frame"),
        ('C', "treasure chest box"),
        ('E', "glowing crystal cluster"),
        ('@', "a brave young archer ranger"),
        ('V', "a fierce red dragon"),
        ('N', "the village elder chief"),
    ] {
        legend.entries.insert(symbol, description.to_owned());
    }
    legend.walkable.extend(['G', 'P', 'B']);
    legend.interactive.extend(['K', 'D', 'C', 'E']);
    legend.important.extend(['R', 'K', 'D', 'C', 'E', 'B']);
    legend.character_symbols.extend(['@', 'V', 'N']);

    let goals = vec![
        ('R', GoalKind::ReachTile, (3, 3)),
        ('K', GoalKind::PickObject, (3, 6)),
        ('D', GoalKind::ReachTile, (3, 9)),
        ('C', GoalKind::PickObject, (6, 3)),
        ('E', GoalKind::PickObject, (6, 8)),
        ('B', GoalKind::ReachTile, (7, 5)),
        ('P', GoalKind::ReachTile, (8, 5)),
        ('V', GoalKind::HitEnemy, (9, 10)),
    ]
    .into_iter()
    .enumerate()
    .map(|(index, (symbol, kind, position))| Goal {
        index,
        description: format!("objective {index}"),
        target_symbol: symbol,
        target_kind: kind,
        position: Some(position),
    })
    .collect();
    (legend, goals)
}

/// Plays the final world perfectly with the path-finder and returns one
/// scripted reply per objective.
fn optimal_agent_replies() -> Vec<String> {
    let (legend, goals) = fixture_structure();
    let world = round_world(ROUND_DECORATIONS.len() - 1);
    let start = locate_symbol(&world, '@').expect("fixture has a protagonist");
    let mut state = AgentState {
        position: start,
        world,
        completed_goals: Default::default(),
        current_goal: 0,
    };
    let mut replies = Vec::with_capacity(goals.len());
    for (index, goal) in goals.iter().enumerate() {
        state.current_goal = index;
        let problem = SearchProblem {
            grid: &state.world,
            passable: goal_passable_set(&legend, goal),
            start: state.position,
            goal: goal.position.expect("fixture goals are positioned"),
        };
        let path = astar(&problem, 100_000).expect("fixture objectives are reachable");
        let mut actions = actions_for_path(&path);
        actions.extend(interaction_for(goal.target_kind));
        let text = actions
            .iter()
            .map(|action| action.canonical_name())
            .collect::<Vec<_>>()
            .join(", ");
        replies.push(format!("```\n{text}\n```"));
        for &action in &actions {
            state = agent::step(state, action, &legend, &goals);
        }
        assert!(
            state.completed_goals.contains(&index),
            "fixture objective {index} must complete under its own script"
        );
    }
    replies
}

/// Every model reply for one full demonstration run: three rounds and two
/// identical optimal agent episodes.
pub fn script() -> MockScript {
    let mut script = MockScript::default();
    script.push(ExtractionStep::Story, STORY);
    script.push(ExtractionStep::Characters, CHARACTERS);
    script.push(ExtractionStep::Tileset, TILESET);
    script.push(ExtractionStep::Goals, GOALS);
    script.push(ExtractionStep::ImportantTiles, IMPORTANT);
    script.push(ExtractionStep::WalkableTiles, WALKABLE);
    script.push(ExtractionStep::ObjectTiles, OBJECTS);
    for (round, coherence) in COHERENCE_SCORES.iter().enumerate() {
        script.push(ExtractionStep::WorldEnvironment, fenced(&round_environment(round)));
        script.push(ExtractionStep::WorldFull, fenced(&round_world(round)));
        script.push(ExtractionStep::GoalPositions, POSITIONS);
        script.push(ExtractionStep::CoherenceJudge, *coherence);
    }
    let replies = optimal_agent_replies();
    for _episode in 0..2 {
        for reply in &replies {
            script.push(ExtractionStep::AgentActions, reply.clone());
        }
    }
    script
}

/// Writes the placeholder tile datasets under `dir` and returns their
/// paths. Regenerating is deterministic, so an existing directory is
/// simply refreshed.
pub fn prepare_assets(dir: &Path) -> Result<TilesetPaths, TileError> {
    let embedder = crate::tiles::Embedder::default();
    tiles::generate_placeholder_tileset(
        &tiles::builtin_environment_specs(),
        TileCategory::Environment,
        dir,
        &embedder,
    )?;
    tiles::generate_placeholder_tileset(
        &tiles::builtin_character_specs(),
        TileCategory::Character,
        dir,
        &embedder,
    )?;
    Ok(TilesetPaths {
        environment: dir.join("environment.csv"),
        characters: dir.join("characters.csv"),
    })
}

/// The demonstration configuration: a full three-round run with eight
/// objectives and two agent episodes.
pub fn config(tileset_paths: TilesetPaths) -> RunConfig {
    RunConfig {
        mode: Mode::Full,
        rounds: 3,
        objective_count: 8,
        agent_episodes: 2,
        seed: 7,
        tileset_paths,
        ..RunConfig::default()
    }
}

/// Runs the full scripted demonstration: assets into `assets_dir`,
/// artifacts into `out_dir`.
pub fn run(assets_dir: &Path, out_dir: &Path) -> Result<RunArtifact, PipelineError> {
    let tileset_paths = prepare_assets(assets_dir)?;
    let provider = Provider::mock(script());
    pipeline::run_with_provider(&config(tileset_paths), out_dir, provider)
}
