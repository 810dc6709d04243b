//! Orchestrates a full generation run: story, the staged extractions, the
//! two-pass world generation across feedback rounds, repair, evaluation,
//! the agent reward loop, tile retrieval, rendering, and on-disk artifacts.
//!
//! A run survives individual stage failures by charging a shared try
//! budget and re-running the failed stage; when the budget runs out the
//! partial artifact is persisted with `completed = false` instead of
//! returning an error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, EpisodeTrace, LlmPolicy};
use crate::eval::{self, EvaluationReport};
use crate::llm::{self, ExtractionStep, LlmError, MockScript, Provider, ProviderConfig, TemplateStore};
use crate::tiles::{self, Embedder, TileDataset, TileError};
use crate::world::{
    self, CharacterInfo, CharacterRole, Goal, GoalKind, StoryPackage, TileLegend, Warning,
    WorldGrid,
};

pub const DEFAULT_OBJECTIVE_COUNT: u32 = 8;
pub const DEFAULT_IMPORTANT_TILE_CAP: usize = 15;
pub const DEFAULT_ROUNDS: u32 = 3;
pub const DEFAULT_COMPLETION_TRY_BUDGET: u32 = 10;
/// Default novelty acceptance distance: eight differing cells.
pub const DEFAULT_NOVELTY_THRESHOLD: f64 = 4.0;
pub const DEFAULT_ASTAR_ITERATION_BUDGET: usize = 1000;
pub const DEFAULT_AGENT_EPISODES: u32 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("tile dataset: {0}")]
    Tiles(#[from] TileError),
    /// Unrecoverable provider problems: bad credentials, template bugs,
    /// unreadable script files. Transient failures are charged to the try
    /// budget instead.
    #[error("provider: {0}")]
    Provider(LlmError),
    #[error("failed to write artifact {path}: {source}")]
    Artifact {
        path: PathBuf,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How much of the staged pipeline a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Every stage: extractions, two-pass generation, all rounds.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Story straight to a world prompt; no extractions in between.
    #[serde(rename = "direct")]
    DirectGeneration,
    /// Skips objective extraction.
    #[serde(rename = "no-goals")]
    NoGoals,
    /// Skips the important/walkable/interactive tile-role extractions.
    #[serde(rename = "no-important")]
    NoImportantTiles,
    /// Generates the world in one prompt instead of environment-then-world.
    #[serde(rename = "one-step")]
    OneStep,
    /// A single generation round regardless of the configured count.
    #[serde(rename = "one-round")]
    OneRound,
}

impl Mode {
    pub fn token(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::DirectGeneration => "direct",
            Mode::NoGoals => "no-goals",
            Mode::NoImportantTiles => "no-important",
            Mode::OneStep => "one-step",
            Mode::OneRound => "one-round",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "direct" => Ok(Mode::DirectGeneration),
            "no-goals" => Ok(Mode::NoGoals),
            "no-important" => Ok(Mode::NoImportantTiles),
            "one-step" => Ok(Mode::OneStep),
            "one-round" => Ok(Mode::OneRound),
            other => Err(format!(
                "unknown mode '{other}' (expected full, direct, no-goals, no-important, one-step, or one-round)"
            )),
        }
    }
}

/// Requested story length, in paragraphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphRange {
    pub min: u32,
    pub max: u32,
}

impl Default for ParagraphRange {
    fn default() -> Self {
        ParagraphRange { min: 4, max: 5 }
    }
}

/// Where the two tile dataset CSVs live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilesetPaths {
    pub environment: PathBuf,
    pub characters: PathBuf,
}

impl Default for TilesetPaths {
    fn default() -> Self {
        TilesetPaths {
            environment: PathBuf::from("assets/environment.csv"),
            characters: PathBuf::from("assets/characters.csv"),
        }
    }
}

/// Everything a single run needs. All fields have serde defaults so a
/// config file may set only what it cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub story_paragraphs: ParagraphRange,
    pub objective_count: u32,
    pub important_tile_cap: usize,
    pub rounds: u32,
    /// Failed stages (and unplaceable objectives) consume from this shared
    /// budget; exhaustion ends the run incomplete.
    pub completion_try_budget: u32,
    pub novelty_threshold: f64,
    /// Node-expansion budget shared across all path-finding legs of one
    /// playability check.
    pub astar_iteration_budget: usize,
    /// Agent episodes played on the final world; 0 skips the agent.
    pub agent_episodes: u32,
    pub mode: Mode,
    pub seed: u64,
    /// Keep the best round as the final world instead of the last one.
    pub best_of: bool,
    pub provider: ProviderConfig,
    pub tileset_paths: TilesetPaths,
    /// On-disk prompt template directory; embedded templates when absent.
    pub templates_dir: Option<PathBuf>,
    pub embedder: Embedder,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            story_paragraphs: ParagraphRange::default(),
            objective_count: DEFAULT_OBJECTIVE_COUNT,
            important_tile_cap: DEFAULT_IMPORTANT_TILE_CAP,
            rounds: DEFAULT_ROUNDS,
            completion_try_budget: DEFAULT_COMPLETION_TRY_BUDGET,
            novelty_threshold: DEFAULT_NOVELTY_THRESHOLD,
            astar_iteration_budget: DEFAULT_ASTAR_ITERATION_BUDGET,
            agent_episodes: DEFAULT_AGENT_EPISODES,
            mode: Mode::default(),
            seed: 0,
            best_of: false,
            provider: ProviderConfig::default(),
            tileset_paths: TilesetPaths::default(),
            templates_dir: None,
            embedder: Embedder::default(),
        }
    }
}

impl RunConfig {
    /// Clamps degenerate values and applies mode-forced settings.
    pub fn normalized(&self) -> RunConfig {
        let mut config = self.clone();
        config.rounds = config.rounds.max(1);
        config.completion_try_budget = config.completion_try_budget.max(1);
        if config.story_paragraphs.min > config.story_paragraphs.max {
            std::mem::swap(
                &mut config.story_paragraphs.min,
                &mut config.story_paragraphs.max,
            );
        }
        if config.mode == Mode::OneRound {
            config.rounds = 1;
        }
        config
    }
}

/// Which stages a mode actually runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    /// Character and tileset extraction.
    pub extract_characters: bool,
    pub extract_goals: bool,
    /// Important/walkable/interactive tile-role extraction.
    pub extract_tile_roles: bool,
    /// Generate an environment sketch first, then the full world on top.
    pub two_step_world: bool,
    pub rounds: u32,
}

pub fn apply_mode(config: &RunConfig) -> StepPlan {
    let config = config.normalized();
    let mut plan = StepPlan {
        extract_characters: true,
        extract_goals: true,
        extract_tile_roles: true,
        two_step_world: true,
        rounds: config.rounds,
    };
    match config.mode {
        Mode::Full | Mode::OneRound => {}
        Mode::DirectGeneration => {
            plan.extract_characters = false;
            plan.extract_goals = false;
            plan.extract_tile_roles = false;
            plan.two_step_world = false;
        }
        Mode::NoGoals => plan.extract_goals = false,
        Mode::NoImportantTiles => plan.extract_tile_roles = false,
        Mode::OneStep => plan.two_step_world = false,
    }
    plan
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// One generation round: the environment sketch (when two-pass), the
/// repaired world, its positioned objectives, and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u32,
    pub environment_grid: Option<WorldGrid>,
    pub world_grid: WorldGrid,
    pub goals: Vec<Goal>,
    pub evaluation: EvaluationReport,
    /// Raw model replies for this round's generation prompts.
    pub raw_llm_outputs: Vec<String>,
}

/// Everything a run produced; always persisted, complete or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: RunConfig,
    pub story_package: Option<StoryPackage>,
    pub round_records: Vec<RoundRecord>,
    pub final_world: Option<WorldGrid>,
    /// Symbol to tile-asset id, per dataset category resolved during
    /// assignment.
    pub tile_assignment: BTreeMap<char, u32>,
    /// Relative to the run directory.
    pub rendered_image_path: Option<String>,
    pub completed: bool,
    pub tries_used: u32,
    pub warnings: Vec<Warning>,
}

impl RunArtifact {
    /// The evaluation of the round selected as the final world.
    pub fn final_evaluation(&self) -> Option<&EvaluationReport> {
        let world = self.final_world.as_ref()?;
        self.round_records
            .iter()
            .find(|record| &record.world_grid == world)
            .map(|record| &record.evaluation)
    }
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

/// Runs the configured pipeline, persisting artifacts under `out_dir`.
/// Budget exhaustion is reported inside the artifact (`completed = false`),
/// not as an error.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunArtifact, PipelineError> {
    let provider = Provider::new(config.provider.clone()).map_err(PipelineError::Provider)?;
    run_with_provider(config, out_dir, provider)
}

/// [`run`] with a caller-constructed provider (e.g. an in-memory script).
pub fn run_with_provider(
    config: &RunConfig,
    out_dir: &Path,
    provider: Provider,
) -> Result<RunArtifact, PipelineError> {
    let config = config.normalized();
    let plan = apply_mode(&config);
    let environment_tiles = TileDataset::load(&config.tileset_paths.environment, &config.embedder)?;
    let character_tiles = TileDataset::load(&config.tileset_paths.characters, &config.embedder)?;
    let templates = match &config.templates_dir {
        Some(dir) => TemplateStore::from_dir(dir),
        None => TemplateStore::embedded(),
    };

    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Artifact {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut runner = Runner {
        config: config.clone(),
        plan,
        provider,
        templates,
        out_dir: out_dir.to_path_buf(),
        tries_used: 0,
        warnings: Vec::new(),
        transcript_offset: 0,
        story_package: None,
        rounds: Vec::new(),
    };
    runner.write_json("config.json", &config)?;
    runner.write_text("transcript.jsonl", "")?;

    let completion = match runner.execute(&environment_tiles, &character_tiles) {
        Ok(completion) => Some(completion),
        Err(EarlyEnd::OutOfTries) => None,
        Err(EarlyEnd::Hard(error)) => return Err(error),
    };
    runner.flush_transcript()?;

    let completed = completion.is_some();
    if !completed {
        runner
            .warnings
            .push(Warning::new("completion try budget exhausted; run is partial"));
    }
    let (tile_assignment, rendered_image_path, final_world) = match completion {
        Some(completion) => (
            completion.tile_assignment,
            completion.rendered_image_path,
            completion.final_world,
        ),
        None => (
            BTreeMap::new(),
            None,
            runner.rounds.last().map(|record| record.world_grid.clone()),
        ),
    };
    let artifact = RunArtifact {
        config,
        story_package: runner.story_package.clone(),
        round_records: runner.rounds.clone(),
        final_world,
        tile_assignment,
        rendered_image_path,
        completed,
        tries_used: runner.tries_used,
        warnings: runner.warnings.clone(),
    };
    runner.write_json("artifact.json", &artifact)?;
    Ok(artifact)
}

/// A stage outcome the budget can absorb, versus one that ends the run.
enum StageFailure {
    Soft(String),
    Hard(PipelineError),
}

/// Objective index paired with the (row, col) it was placed at.
type PlacedObjective = (usize, usize, usize);

impl From<LlmError> for StageFailure {
    fn from(error: LlmError) -> Self {
        match error {
            LlmError::Auth(_) | LlmError::Template(_) => {
                StageFailure::Hard(PipelineError::Provider(error))
            }
            other => StageFailure::Soft(other.to_string()),
        }
    }
}

enum EarlyEnd {
    OutOfTries,
    Hard(PipelineError),
}

impl From<PipelineError> for EarlyEnd {
    fn from(error: PipelineError) -> Self {
        EarlyEnd::Hard(error)
    }
}

/// What a finished run hands back for the artifact.
struct Completion {
    final_world: Option<WorldGrid>,
    tile_assignment: BTreeMap<char, u32>,
    rendered_image_path: Option<String>,
}

struct Runner {
    config: RunConfig,
    plan: StepPlan,
    provider: Provider,
    templates: TemplateStore,
    out_dir: PathBuf,
    tries_used: u32,
    warnings: Vec<Warning>,
    transcript_offset: usize,
    story_package: Option<StoryPackage>,
    rounds: Vec<RoundRecord>,
}

/// Runs a stage until it succeeds, charging the try budget per failure.
macro_rules! stage {
    ($self:ident, $name:literal, $call:expr) => {
        loop {
            match $call {
                Ok(value) => break value,
                Err(StageFailure::Hard(error)) => return Err(EarlyEnd::Hard(error)),
                Err(StageFailure::Soft(detail)) => $self.charge($name, detail)?,
            }
        }
    };
}

impl Runner {
    fn charge(&mut self, stage: &str, detail: String) -> Result<(), EarlyEnd> {
        self.warnings
            .push(Warning::new(format!("stage {stage} failed: {detail}")));
        self.tries_used += 1;
        if self.tries_used >= self.config.completion_try_budget {
            Err(EarlyEnd::OutOfTries)
        } else {
            Ok(())
        }
    }

    fn execute(
        &mut self,
        environment_tiles: &TileDataset,
        character_tiles: &TileDataset,
    ) -> Result<Completion, EarlyEnd> {
        // Story.
        let story_text = stage!(self, "story", self.story_stage());
        self.write_text("story.txt", &story_text)?;

        // Structure extractions.
        let mut characters: Vec<CharacterInfo> = Vec::new();
        let mut legend = TileLegend::default();
        if self.plan.extract_characters {
            characters = stage!(self, "characters", self.characters_stage(&story_text));
            legend = stage!(
                self,
                "tileset",
                self.tileset_stage(&story_text, &mut characters)
            );
        }
        let mut goals: Vec<Goal> = Vec::new();
        if self.plan.extract_goals {
            goals = stage!(
                self,
                "goals",
                self.goals_stage(&story_text, &characters, &legend)
            );
        }
        if self.plan.extract_tile_roles {
            let mut important = stage!(
                self,
                "important_tiles",
                self.symbol_list_stage(
                    ExtractionStep::ImportantTiles,
                    "important_tiles",
                    "important",
                    &story_text,
                    &characters,
                    &legend,
                    &goals,
                )
            );
            if important.len() > self.config.important_tile_cap {
                self.warnings.push(Warning::new(format!(
                    "important tile list truncated from {} to the cap of {}",
                    important.len(),
                    self.config.important_tile_cap
                )));
                important.truncate(self.config.important_tile_cap);
            }
            legend.important = important.into_iter().collect();

            let walkable = stage!(
                self,
                "walkable_tiles",
                self.symbol_list_stage(
                    ExtractionStep::WalkableTiles,
                    "walkable_tiles",
                    "walkable",
                    &story_text,
                    &characters,
                    &legend,
                    &goals,
                )
            );
            legend.walkable = walkable.into_iter().collect();

            let interactive = stage!(
                self,
                "object_tiles",
                self.symbol_list_stage(
                    ExtractionStep::ObjectTiles,
                    "object_tiles",
                    "interactive",
                    &story_text,
                    &characters,
                    &legend,
                    &goals,
                )
            );
            legend.interactive = interactive.into_iter().collect();
        }

        let package = StoryPackage {
            story_text: story_text.clone(),
            paragraph_count: world::count_paragraphs(&story_text),
            characters: characters.clone(),
            legend: legend.clone(),
            goals: goals.clone(),
        };
        self.write_json(
            "extractions.json",
            &serde_json::json!({
                "characters": package.characters,
                "legend": package.legend,
                "goals": package.goals,
            }),
        )?;
        self.story_package = Some(package);
        let protagonist_symbol = characters
            .iter()
            .find(|c| c.role == CharacterRole::Protagonist)
            .and_then(|c| c.symbol);

        // Generation rounds.
        for round_index in 0..self.plan.rounds {
            let record = self.round(
                round_index,
                &story_text,
                &characters,
                &legend,
                &goals,
                protagonist_symbol,
            )?;
            self.persist_round(&record)?;
            self.rounds.push(record);
        }

        // Final world selection.
        let final_index = self.select_final_round();
        if let Some(package) = &mut self.story_package {
            if let Some(index) = final_index {
                package.goals = self.rounds[index].goals.clone();
            }
        }

        // Agent reward loop on the final world.
        if let (Some(index), Some(protagonist)) = (final_index, protagonist_symbol) {
            if !goals.is_empty() && self.config.agent_episodes > 0 {
                let world = self.rounds[index].world_grid.clone();
                let positioned = self.rounds[index].goals.clone();
                let traces = stage!(
                    self,
                    "agent",
                    self.agent_stage(&world, &positioned, &legend, protagonist)
                );
                let mean = traces.iter().map(|t| t.episode_reward).sum::<f64>()
                    / traces.len().max(1) as f64;
                self.rounds[index].evaluation.agent_reward = Some(mean);
                self.write_json("agent_traces.json", &traces)?;
                let evals_path = format!("round_{index}/evals.json");
                self.write_json(&evals_path, &self.rounds[index].evaluation.clone())?;
            }
        }

        // Tile retrieval and rendering. A run without a legend (direct
        // generation) has nothing to assign art to.
        let mut tile_assignment = BTreeMap::new();
        let mut rendered_image_path = None;
        if let Some(index) = final_index {
            if legend.entries.is_empty() {
                self.warnings.push(Warning::new(
                    "no tile legend was extracted; skipping tile assignment and rendering",
                ));
            } else {
                let assignment = tiles::assign_tiles(
                    &legend,
                    &characters,
                    environment_tiles,
                    character_tiles,
                    &self.config.embedder,
                )
                .map_err(PipelineError::Tiles)?;
                tile_assignment = assignment
                    .iter()
                    .map(|(&symbol, asset)| (symbol, asset.id))
                    .collect();
                self.write_json("tile_assignment.json", &tile_assignment)?;
                let image_path = self.out_dir.join("world.png");
                tiles::render_world_to_file(
                    &self.rounds[index].world_grid,
                    &assignment,
                    &image_path,
                )
                .map_err(PipelineError::Tiles)?;
                rendered_image_path = Some("world.png".to_owned());
            }
        }

        Ok(Completion {
            final_world: final_index.map(|index| self.rounds[index].world_grid.clone()),
            tile_assignment,
            rendered_image_path,
        })
    }

    /// Index of the round whose world the run returns: the last one, or
    /// under `best_of` the best-scoring round (playable first, then novel
    /// and playable, then coherence; later rounds win ties).
    fn select_final_round(&self) -> Option<usize> {
        if self.rounds.is_empty() {
            return None;
        }
        if !self.config.best_of {
            return Some(self.rounds.len() - 1);
        }
        let mut best = 0usize;
        let score = |record: &RoundRecord| {
            (
                record.evaluation.playable,
                record.evaluation.novel_and_playable,
                record.evaluation.coherence.unwrap_or(0),
            )
        };
        for index in 1..self.rounds.len() {
            if score(&self.rounds[index]) >= score(&self.rounds[best]) {
                best = index;
            }
        }
        Some(best)
    }

    // -- stages ------------------------------------------------------------

    fn story_stage(&mut self) -> Result<String, StageFailure> {
        let prompt = self.templates.render(
            "story",
            &[
                ("min_paragraphs", &self.config.story_paragraphs.min.to_string()),
                ("max_paragraphs", &self.config.story_paragraphs.max.to_string()),
            ],
        )?;
        let (story, _raw) = self.ask(ExtractionStep::Story, &prompt, |text| {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                return Err("story reply was empty".to_owned());
            }
            Ok(trimmed.to_owned())
        })?;
        let paragraphs = world::count_paragraphs(&story);
        let range = self.config.story_paragraphs;
        if paragraphs < range.min as usize || paragraphs > range.max as usize {
            self.warnings.push(Warning::new(format!(
                "story has {paragraphs} paragraphs, outside the requested {}-{} range",
                range.min, range.max
            )));
        }
        Ok(story)
    }

    fn characters_stage(&mut self, story: &str) -> Result<Vec<CharacterInfo>, StageFailure> {
        #[derive(Deserialize)]
        struct RawCharacter {
            name: String,
            description: String,
            role: CharacterRole,
        }
        let prompt = self.templates.render("characters", &[("story", story)])?;
        let (characters, _raw) = self.ask(ExtractionStep::Characters, &prompt, |text| {
            let candidate = llm::extract_json_candidate(text);
            let raw: Vec<RawCharacter> =
                serde_json::from_str(&candidate).map_err(|e| format!("bad character JSON: {e}"))?;
            if raw.is_empty() {
                return Err("character list is empty".to_owned());
            }
            if raw.iter().any(|c| c.name.trim().is_empty()) {
                return Err("a character has an empty name".to_owned());
            }
            let protagonists = raw
                .iter()
                .filter(|c| c.role == CharacterRole::Protagonist)
                .count();
            if protagonists != 1 {
                return Err(format!(
                    "expected exactly one protagonist, found {protagonists}"
                ));
            }
            Ok(raw
                .into_iter()
                .map(|c| CharacterInfo {
                    name: c.name.trim().to_owned(),
                    description: c.description.trim().to_owned(),
                    role: c.role,
                    symbol: None,
                })
                .collect::<Vec<_>>())
        })?;
        Ok(characters)
    }

    /// Extracts the tile legend and assigns every character a symbol.
    fn tileset_stage(
        &mut self,
        story: &str,
        characters: &mut [CharacterInfo],
    ) -> Result<TileLegend, StageFailure> {
        #[derive(Deserialize)]
        struct RawTileset {
            tiles: BTreeMap<String, String>,
            #[serde(default)]
            character_symbols: BTreeMap<String, String>,
        }
        let characters_json = json_pretty(&characters);
        let prompt = self.templates.render(
            "tileset",
            &[("story", story), ("characters", &characters_json)],
        )?;
        let character_names: Vec<String> = characters.iter().map(|c| c.name.clone()).collect();
        let (outcome, _raw) = self.ask(ExtractionStep::Tileset, &prompt, move |text| {
            let candidate = llm::extract_json_candidate(text);
            let raw: RawTileset =
                serde_json::from_str(&candidate).map_err(|e| format!("bad tileset JSON: {e}"))?;
            if raw.tiles.is_empty() {
                return Err("tileset has no tiles".to_owned());
            }
            let mut legend = TileLegend::default();
            for (key, description) in &raw.tiles {
                let symbol = parse_symbol(key)?;
                if description.trim().is_empty() {
                    return Err(format!("tile '{symbol}' has an empty description"));
                }
                legend.entries.insert(symbol, description.trim().to_owned());
            }
            let mut assigned: BTreeMap<String, char> = BTreeMap::new();
            for name in &character_names {
                let key = raw
                    .character_symbols
                    .get(name)
                    .ok_or_else(|| format!("character '{name}' was given no symbol"))?;
                let symbol = parse_symbol(key)?;
                if assigned.values().any(|&existing| existing == symbol) {
                    return Err(format!("symbol '{symbol}' assigned to two characters"));
                }
                assigned.insert(name.clone(), symbol);
                legend.character_symbols.insert(symbol);
            }
            Ok((legend, assigned))
        })?;
        let (mut legend, assigned) = outcome;
        for character in characters.iter_mut() {
            let symbol = assigned[&character.name];
            character.symbol = Some(symbol);
            // Characters render and retrieve by their own description.
            legend
                .entries
                .entry(symbol)
                .or_insert_with(|| character.description.clone());
        }
        Ok(legend)
    }

    fn goals_stage(
        &mut self,
        story: &str,
        characters: &[CharacterInfo],
        legend: &TileLegend,
    ) -> Result<Vec<Goal>, StageFailure> {
        #[derive(Deserialize)]
        struct RawGoal {
            description: String,
            target_symbol: String,
            target_kind: GoalKind,
        }
        let prompt = self.templates.render(
            "goals",
            &[
                ("story", story),
                ("characters", &json_pretty(&characters)),
                ("legend", &legend_prompt_text(legend)),
                ("objective_count", &self.config.objective_count.to_string()),
            ],
        )?;
        let known: Vec<char> = legend.entries.keys().copied().collect();
        let (goals, _raw) = self.ask(ExtractionStep::Goals, &prompt, move |text| {
            let candidate = llm::extract_json_candidate(text);
            let raw: Vec<RawGoal> =
                serde_json::from_str(&candidate).map_err(|e| format!("bad goal JSON: {e}"))?;
            if raw.is_empty() {
                return Err("objective list is empty".to_owned());
            }
            let mut goals = Vec::new();
            for (index, goal) in raw.into_iter().enumerate() {
                let symbol = parse_symbol(&goal.target_symbol)?;
                if !known.contains(&symbol) {
                    return Err(format!("objective target '{symbol}' is not in the tileset"));
                }
                goals.push(Goal {
                    index,
                    description: goal.description.trim().to_owned(),
                    target_symbol: symbol,
                    target_kind: goal.target_kind,
                    position: None,
                });
            }
            Ok(goals)
        })?;
        if goals.len() != self.config.objective_count as usize {
            self.warnings.push(Warning::new(format!(
                "model produced {} objectives instead of the requested {}",
                goals.len(),
                self.config.objective_count
            )));
        }
        Ok(goals)
    }

    /// Shared driver for the important/walkable/interactive extractions,
    /// which all return `{"<field>": ["A", "B", ...]}`. Unknown symbols are
    /// dropped with a warning.
    #[allow(clippy::too_many_arguments)]
    fn symbol_list_stage(
        &mut self,
        step: ExtractionStep,
        template: &str,
        field: &str,
        story: &str,
        characters: &[CharacterInfo],
        legend: &TileLegend,
        goals: &[Goal],
    ) -> Result<Vec<char>, StageFailure> {
        let mut vars: Vec<(&str, String)> = vec![
            ("story", story.to_owned()),
            ("characters", json_pretty(&characters)),
            ("legend", legend_prompt_text(legend)),
            ("goals", json_pretty(&goals)),
        ];
        if step == ExtractionStep::ImportantTiles {
            vars.push(("cap", self.config.important_tile_cap.to_string()));
        }
        let borrowed: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let prompt = self.templates.render(template, &borrowed)?;
        let known: Vec<char> = legend.entries.keys().copied().collect();
        let field = field.to_owned();
        let require_one = step == ExtractionStep::WalkableTiles;
        let mut dropped: Vec<char> = Vec::new();
        let (symbols, _raw) = self.ask(step, &prompt, |text| {
            let candidate = llm::extract_json_candidate(text);
            let raw: serde_json::Value =
                serde_json::from_str(&candidate).map_err(|e| format!("bad JSON: {e}"))?;
            let list = raw
                .get(field.as_str())
                .and_then(|v| v.as_array())
                .ok_or_else(|| format!("reply lacks a \"{field}\" array"))?;
            let mut symbols = Vec::new();
            dropped.clear();
            for value in list {
                let key = value.as_str().ok_or_else(|| "non-string symbol".to_owned())?;
                let symbol = parse_symbol(key)?;
                if known.contains(&symbol) {
                    if !symbols.contains(&symbol) {
                        symbols.push(symbol);
                    }
                } else {
                    dropped.push(symbol);
                }
            }
            if require_one && symbols.is_empty() {
                return Err("no usable walkable symbol in reply".to_owned());
            }
            Ok(symbols)
        })?;
        for symbol in dropped {
            self.warnings.push(Warning::new(format!(
                "dropped '{symbol}' from the {field} list: not in the tileset"
            )));
        }
        Ok(symbols)
    }

    #[allow(clippy::too_many_arguments)]
    fn round(
        &mut self,
        round_index: u32,
        story: &str,
        characters: &[CharacterInfo],
        legend: &TileLegend,
        goals: &[Goal],
        protagonist_symbol: Option<char>,
    ) -> Result<RoundRecord, EarlyEnd> {
        let feedback = self.feedback_section();
        loop {
            let mut raw_outputs = Vec::new();

            let environment_grid = if self.plan.two_step_world {
                let (grid, raw) = stage!(
                    self,
                    "world_environment",
                    self.environment_stage(story, characters, legend, goals, &feedback)
                );
                raw_outputs.push(raw);
                Some(grid)
            } else {
                None
            };

            let (world_grid, raw) = stage!(
                self,
                "world",
                self.world_stage(
                    story,
                    characters,
                    legend,
                    goals,
                    environment_grid.as_ref(),
                    &feedback,
                    protagonist_symbol,
                )
            );
            raw_outputs.push(raw);

            let positioned = if goals.is_empty() {
                Vec::new()
            } else {
                let (positions, raw) = stage!(
                    self,
                    "goal_positions",
                    self.goal_positions_stage(&world_grid, goals)
                );
                raw_outputs.push(raw);
                match self.verify_positions(&world_grid, goals, positions) {
                    Ok(positioned) => positioned,
                    Err(symbol) => {
                        // The target is missing from the map entirely; no
                        // prompt retry can fix that, so regenerate the round.
                        self.charge(
                            "goal_positions",
                            format!("objective target '{symbol}' absent from the world; regenerating"),
                        )?;
                        continue;
                    }
                }
            };

            let mut evaluation = self.evaluate(
                &world_grid,
                &positioned,
                characters,
                legend,
                protagonist_symbol,
            );
            if !legend.entries.is_empty() {
                let score = stage!(
                    self,
                    "coherence",
                    eval::coherence_judge(
                        &self.provider,
                        &self.templates,
                        story,
                        &legend_prompt_text(legend),
                        &world_grid.to_text(),
                    )
                    .map_err(StageFailure::from)
                );
                self.flush_transcript()?;
                evaluation.coherence = Some(score);
            }

            return Ok(RoundRecord {
                round_index,
                environment_grid,
                world_grid,
                goals: positioned,
                evaluation,
                raw_llm_outputs: raw_outputs,
            });
        }
    }

    fn environment_stage(
        &mut self,
        story: &str,
        characters: &[CharacterInfo],
        legend: &TileLegend,
        goals: &[Goal],
        feedback: &str,
    ) -> Result<(WorldGrid, String), StageFailure> {
        let prompt = self.templates.render(
            "world_environment",
            &[
                ("story", story),
                ("characters", &json_pretty(&characters)),
                ("legend", &legend_prompt_text(legend)),
                ("goals", &json_pretty(&goals)),
                ("feedback_section", feedback),
            ],
        )?;
        let legend = legend.clone();
        let mut parse_warnings = Vec::new();
        let (grid, raw) = self.ask(ExtractionStep::WorldEnvironment, &prompt, |text| {
            let (grid, warnings) =
                world::parse_grid(text, &legend).map_err(|e| e.to_string())?;
            parse_warnings = warnings;
            Ok(world::algorithmic_fixes(&grid, &legend))
        })?;
        self.warnings.append(&mut parse_warnings);
        Ok((grid, raw))
    }

    #[allow(clippy::too_many_arguments)]
    fn world_stage(
        &mut self,
        story: &str,
        characters: &[CharacterInfo],
        legend: &TileLegend,
        goals: &[Goal],
        environment: Option<&WorldGrid>,
        feedback: &str,
        protagonist_symbol: Option<char>,
    ) -> Result<(WorldGrid, String), StageFailure> {
        let context_section = if legend.entries.is_empty() {
            String::new()
        } else {
            format!(
                "Characters (place each symbol exactly once):\n{}\nTile legend:\n{}\nObjectives:\n{}\n",
                json_pretty(&characters),
                legend_prompt_text(legend),
                json_pretty(&goals),
            )
        };
        let environment_section = match environment {
            Some(grid) => format!(
                "Build on this environment layout, keeping its terrain and dimensions, adding characters and interactive tiles:\n```\n{}\n```\n",
                grid.to_text()
            ),
            None => String::new(),
        };
        let prompt = self.templates.render(
            "world_full",
            &[
                ("story", story),
                ("context_section", &context_section),
                ("environment_section", &environment_section),
                ("feedback_section", feedback),
            ],
        )?;
        let legend = legend.clone();
        let mut parse_warnings = Vec::new();
        let (grid, raw) = self.ask(ExtractionStep::WorldFull, &prompt, |text| {
            let (grid, warnings) =
                world::parse_grid(text, &legend).map_err(|e| e.to_string())?;
            let fixed = world::algorithmic_fixes(&grid, &legend);
            if let Some(symbol) = protagonist_symbol {
                if !fixed.contains_symbol(symbol) {
                    return Err(format!(
                        "world does not contain the protagonist symbol '{symbol}'"
                    ));
                }
            }
            parse_warnings = warnings;
            Ok(fixed)
        })?;
        self.warnings.append(&mut parse_warnings);
        Ok((grid, raw))
    }

    fn goal_positions_stage(
        &mut self,
        world: &WorldGrid,
        goals: &[Goal],
    ) -> Result<(Vec<PlacedObjective>, String), StageFailure> {
        #[derive(Deserialize)]
        struct RawPosition {
            index: usize,
            row: usize,
            col: usize,
        }
        #[derive(Deserialize)]
        struct RawPositions {
            positions: Vec<RawPosition>,
        }
        let prompt = self.templates.render(
            "goal_positions",
            &[("world", &world.to_text()), ("goals", &json_pretty(&goals))],
        )?;
        let (positions, raw) = self.ask(ExtractionStep::GoalPositions, &prompt, |text| {
            let candidate = llm::extract_json_candidate(text);
            let raw: RawPositions =
                serde_json::from_str(&candidate).map_err(|e| format!("bad position JSON: {e}"))?;
            Ok(raw
                .positions
                .into_iter()
                .map(|p| (p.index, p.row, p.col))
                .collect::<Vec<_>>())
        })?;
        Ok((positions, raw))
    }

    /// Attaches a verified position to every goal. Model answers that do
    /// not actually contain the target symbol fall back to a grid scan; a
    /// symbol absent from the grid entirely is unrecoverable here and
    /// returned as the offending symbol.
    fn verify_positions(
        &mut self,
        world: &WorldGrid,
        goals: &[Goal],
        positions: Vec<(usize, usize, usize)>,
    ) -> Result<Vec<Goal>, char> {
        let mut positioned = Vec::with_capacity(goals.len());
        for goal in goals {
            let claimed = positions
                .iter()
                .find(|(index, _, _)| *index == goal.index)
                .map(|&(_, row, col)| (row, col));
            let verified = match claimed {
                Some(cell) if world.get(cell) == Some(goal.target_symbol) => Some(cell),
                other => {
                    let fallback = world::locate_symbol(world, goal.target_symbol);
                    if let (Some(found), Some(cell)) = (fallback, other) {
                        self.warnings.push(Warning::new(format!(
                            "objective {} claimed position {:?} without '{}'; using {:?}",
                            goal.index, cell, goal.target_symbol, found
                        )));
                    } else if fallback.is_some() && claimed.is_none() {
                        self.warnings.push(Warning::new(format!(
                            "objective {} had no claimed position; located '{}' by scan",
                            goal.index, goal.target_symbol
                        )));
                    }
                    fallback
                }
            };
            match verified {
                Some(cell) => positioned.push(Goal {
                    position: Some(cell),
                    ..goal.clone()
                }),
                None => return Err(goal.target_symbol),
            }
        }
        Ok(positioned)
    }

    fn evaluate(
        &mut self,
        world: &WorldGrid,
        goals: &[Goal],
        characters: &[CharacterInfo],
        legend: &TileLegend,
        protagonist_symbol: Option<char>,
    ) -> EvaluationReport {
        let priors: Vec<WorldGrid> = self.rounds.iter().map(|r| r.world_grid.clone()).collect();
        let novelty_distance = priors
            .iter()
            .map(|prior| eval::novelty_distance(world, prior))
            .fold(None, |best: Option<f64>, d| {
                Some(best.map_or(d, |b| b.min(d)))
            });
        let is_novel = eval::is_novel(world, &priors, self.config.novelty_threshold);

        let (playable, path_length, expansions) = match protagonist_symbol {
            Some(symbol) => match eval::playability(
                world,
                goals,
                symbol,
                legend,
                self.config.astar_iteration_budget,
            ) {
                Ok(verdict) => (verdict.playable, verdict.total_path_length, verdict.expansions_used),
                Err(error) => {
                    self.warnings
                        .push(Warning::new(format!("playability check failed: {error}")));
                    (false, None, 0)
                }
            },
            // No protagonist was ever extracted: playable only in the
            // degenerate no-objectives sense.
            None => (goals.is_empty(), goals.is_empty().then_some(0), 0),
        };

        let char_tile_accuracy = (!characters.is_empty())
            .then(|| eval::char_tile_accuracy(world, characters));
        let important_tile_accuracy = (!legend.important.is_empty())
            .then(|| eval::important_tile_accuracy(world, legend).unwrap_or(0.0));

        EvaluationReport {
            playable,
            path_length,
            novelty_distance,
            is_novel,
            novel_and_playable: is_novel && playable,
            char_tile_accuracy,
            important_tile_accuracy,
            coherence: None,
            agent_reward: None,
            astar_expansions_used: expansions,
        }
    }

    fn agent_stage(
        &mut self,
        world: &WorldGrid,
        goals: &[Goal],
        legend: &TileLegend,
        protagonist_symbol: char,
    ) -> Result<Vec<EpisodeTrace>, StageFailure> {
        let mut policy = LlmPolicy::new(&self.provider, &self.templates);
        let outcome = agent::run_episodes(
            world,
            goals,
            legend,
            protagonist_symbol,
            &mut policy,
            self.config.agent_episodes,
            self.config.astar_iteration_budget,
        );
        let mut warnings = policy.take_warnings();
        self.warnings.append(&mut warnings);
        self.flush_transcript().map_err(StageFailure::Hard)?;
        outcome.map_err(|error| match error {
            agent::AgentError::ActionParse(llm_error) => StageFailure::from(llm_error),
            other => StageFailure::Soft(other.to_string()),
        })
    }

    // -- plumbing ----------------------------------------------------------

    /// Builds the improvement context from the latest round, empty before
    /// the first: the previous world verbatim plus its scores as data.
    fn feedback_section(&self) -> String {
        match self.rounds.last() {
            Some(record) => format!(
                "\nYour previous attempt was:\n```\n{}\n```\nIts evaluation as data:\n{}\nGenerate an improved world: fix anything unplayable or missing, and make it meaningfully different from the previous attempt.\n",
                record.world_grid.to_text(),
                json_pretty(&record.evaluation),
            ),
            None => String::new(),
        }
    }

    /// One model call with transcript flushing; parse retries happen inside
    /// [`llm::run_step`].
    fn ask<T>(
        &mut self,
        step: ExtractionStep,
        prompt: &str,
        parse: impl FnMut(&str) -> Result<T, String>,
    ) -> Result<(T, String), StageFailure> {
        let outcome = llm::run_step(&self.provider, step, prompt, parse);
        self.flush_transcript().map_err(StageFailure::Hard)?;
        outcome.map_err(StageFailure::from)
    }

    fn persist_round(&mut self, record: &RoundRecord) -> Result<(), PipelineError> {
        let dir = self.out_dir.join(format!("round_{}", record.round_index));
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Artifact {
            path: dir.clone(),
            source,
        })?;
        let relative = |name: &str| format!("round_{}/{name}", record.round_index);
        if let Some(environment) = &record.environment_grid {
            self.write_text(&relative("world_env.txt"), &environment.to_text())?;
        }
        self.write_text(&relative("world.txt"), &record.world_grid.to_text())?;
        self.write_json(&relative("evals.json"), &record.evaluation)?;
        Ok(())
    }

    fn flush_transcript(&mut self) -> Result<(), PipelineError> {
        let new = self.provider.exchanges_from(self.transcript_offset);
        if new.is_empty() {
            return Ok(());
        }
        let path = self.out_dir.join("transcript.jsonl");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| PipelineError::Artifact {
                path: path.clone(),
                source,
            })?;
        for exchange in &new {
            let line = serde_json::to_string(exchange).expect("exchange serializes");
            writeln!(file, "{line}").map_err(|source| PipelineError::Artifact {
                path: path.clone(),
                source,
            })?;
        }
        self.transcript_offset += new.len();
        Ok(())
    }

    fn write_text(&self, relative: &str, content: &str) -> Result<(), PipelineError> {
        let path = self.out_dir.join(relative);
        let mut data = content.to_owned();
        if !data.is_empty() && !data.ends_with('\n') {
            data.push('\n');
        }
        fs::write(&path, data).map_err(|source| PipelineError::Artifact { path, source })
    }

    fn write_json<T: Serialize>(&self, relative: &str, value: &T) -> Result<(), PipelineError> {
        self.write_text(relative, &json_pretty(value))
    }
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact types serialize")
}

fn parse_symbol(key: &str) -> Result<char, String> {
    let trimmed = key.trim();
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(symbol), None) if world::is_valid_symbol(symbol) => Ok(symbol),
        _ => Err(format!("'{trimmed}' is not a single printable tile symbol")),
    }
}

fn legend_prompt_text(legend: &TileLegend) -> String {
    let mut out = String::new();
    for (symbol, description) in &legend.entries {
        out.push_str(&format!("'{symbol}' = {description}\n"));
    }
    let list = |set: &std::collections::BTreeSet<char>| {
        set.iter().map(char::to_string).collect::<Vec<_>>().join(", ")
    };
    if !legend.walkable.is_empty() {
        out.push_str(&format!("walkable: {}\n", list(&legend.walkable)));
    }
    if !legend.interactive.is_empty() {
        out.push_str(&format!("interactive: {}\n", list(&legend.interactive)));
    }
    if !legend.important.is_empty() {
        out.push_str(&format!("important: {}\n", list(&legend.important)));
    }
    if !legend.character_symbols.is_empty() {
        out.push_str(&format!("characters: {}\n", list(&legend.character_symbols)));
    }
    out
}

/// Builds a mock provider from `(step, reply)` pairs — the unit-test and
/// demo entry point.
pub fn scripted_provider(entries: impl IntoIterator<Item = (ExtractionStep, String)>) -> Provider {
    let mut script = MockScript::default();
    for (step, response) in entries {
        script.push(step, response);
    }
    Provider::mock(script)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExtractionStep as Step;
    use tempfile::TempDir;

    /// Writes placeholder tilesets and returns a config pointing at them.
    fn test_config(assets: &TempDir) -> RunConfig {
        let embedder = Embedder::default();
        tiles::generate_placeholder_tileset(
            &tiles::builtin_environment_specs(),
            tiles::TileCategory::Environment,
            assets.path(),
            &embedder,
        )
        .expect("environment tileset");
        tiles::generate_placeholder_tileset(
            &tiles::builtin_character_specs(),
            tiles::TileCategory::Character,
            assets.path(),
            &embedder,
        )
        .expect("character tileset");
        RunConfig {
            objective_count: 2,
            rounds: 1,
            agent_episodes: 0,
            tileset_paths: TilesetPaths {
                environment: assets.path().join("environment.csv"),
                characters: assets.path().join("characters.csv"),
            },
            ..RunConfig::default()
        }
    }

    const STORY: &str = "The knight Aldric guarded the old keep.\n\nA gray wolf prowled the pines beyond the wall.";
    const CHARACTERS: &str = r#"[
        {"name": "Aldric", "description": "a watchful knight", "role": "protagonist"},
        {"name": "Wolf", "description": "a hungry gray wolf", "role": "antagonist"}
    ]"#;
    const TILESET: &str = r#"{
        "tiles": {"G": "grass field", "W": "stone wall", "K": "iron key", "P": "dirt path"},
        "character_symbols": {"Aldric": "A", "Wolf": "F"}
    }"#;
    const GOALS: &str = r#"[
        {"description": "find the iron key", "target_symbol": "K", "target_kind": "pick_object"},
        {"description": "reach the path gate", "target_symbol": "P", "target_kind": "reach_tile"}
    ]"#;
    const IMPORTANT: &str = r#"{"important": ["K", "P"]}"#;
    const WALKABLE: &str = r#"{"walkable": ["G", "P"]}"#;
    const OBJECTS: &str = r#"{"interactive": ["K"]}"#;
    const ENV_GRID: &str = "```\nGGGGGG\nGWWWGG\nGGGGGG\nGGGGGG\n```";
    const WORLD_GRID: &str = "```\nAGGGGG\nGWWWGG\nGGKGGG\nGGGGPF\n```";
    const POSITIONS: &str =
        r#"{"positions": [{"index": 0, "row": 2, "col": 2}, {"index": 1, "row": 3, "col": 4}]}"#;
    const COHERENCE: &str = "Score: 77";

    fn full_round_script() -> Vec<(Step, String)> {
        vec![
            (Step::Story, STORY.to_owned()),
            (Step::Characters, CHARACTERS.to_owned()),
            (Step::Tileset, TILESET.to_owned()),
            (Step::Goals, GOALS.to_owned()),
            (Step::ImportantTiles, IMPORTANT.to_owned()),
            (Step::WalkableTiles, WALKABLE.to_owned()),
            (Step::ObjectTiles, OBJECTS.to_owned()),
            (Step::WorldEnvironment, ENV_GRID.to_owned()),
            (Step::WorldFull, WORLD_GRID.to_owned()),
            (Step::GoalPositions, POSITIONS.to_owned()),
            (Step::CoherenceJudge, COHERENCE.to_owned()),
        ]
    }

    #[test]
    fn mode_plans_match_their_contracts() {
        let config = |mode| RunConfig { mode, rounds: 3, ..RunConfig::default() };
        let full = apply_mode(&config(Mode::Full));
        assert!(full.extract_characters && full.extract_goals && full.extract_tile_roles);
        assert!(full.two_step_world);
        assert_eq!(full.rounds, 3);

        let direct = apply_mode(&config(Mode::DirectGeneration));
        assert!(!direct.extract_characters && !direct.extract_goals && !direct.extract_tile_roles);
        assert!(!direct.two_step_world);

        let no_goals = apply_mode(&config(Mode::NoGoals));
        assert!(no_goals.extract_characters && !no_goals.extract_goals);
        assert!(no_goals.extract_tile_roles);

        let no_important = apply_mode(&config(Mode::NoImportantTiles));
        assert!(no_important.extract_goals && !no_important.extract_tile_roles);

        let one_step = apply_mode(&config(Mode::OneStep));
        assert!(!one_step.two_step_world && one_step.extract_goals);

        let one_round = apply_mode(&config(Mode::OneRound));
        assert!(one_round.two_step_world);
        assert_eq!(one_round.rounds, 1);
    }

    #[test]
    fn mode_tokens_round_trip() {
        for mode in [
            Mode::Full,
            Mode::DirectGeneration,
            Mode::NoGoals,
            Mode::NoImportantTiles,
            Mode::OneStep,
            Mode::OneRound,
        ] {
            assert_eq!(mode.token().parse::<Mode>().unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), mode);
        }
        assert!("warp".parse::<Mode>().is_err());
    }

    #[test]
    fn full_mock_run_completes_with_artifacts() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let config = test_config(&assets);
        let provider = scripted_provider(full_round_script());
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        assert_eq!(artifact.tries_used, 0);
        assert_eq!(artifact.round_records.len(), 1);
        let round = &artifact.round_records[0];
        assert!(round.evaluation.playable);
        assert_eq!(round.evaluation.coherence, Some(77));
        assert_eq!(round.evaluation.char_tile_accuracy, Some(1.0));
        assert_eq!(round.evaluation.important_tile_accuracy, Some(1.0));
        assert!(round.evaluation.is_novel, "first round has no priors");
        assert_eq!(round.goals[0].position, Some((2, 2)));
        assert_eq!(round.goals[1].position, Some((3, 4)));

        let package = artifact.story_package.as_ref().unwrap();
        assert_eq!(package.protagonist_symbol(), Some('A'));
        assert_eq!(package.paragraph_count, 2);

        // Every legend symbol received a tile and the map rendered.
        assert_eq!(artifact.tile_assignment.len(), package.legend.entries.len());
        assert_eq!(artifact.rendered_image_path.as_deref(), Some("world.png"));
        for file in [
            "config.json",
            "story.txt",
            "extractions.json",
            "round_0/world_env.txt",
            "round_0/world.txt",
            "round_0/evals.json",
            "tile_assignment.json",
            "world.png",
            "transcript.jsonl",
            "artifact.json",
        ] {
            assert!(out.path().join(file).is_file(), "missing {file}");
        }

        // The persisted artifact round-trips.
        let raw = fs::read_to_string(out.path().join("artifact.json")).unwrap();
        let reloaded: RunArtifact = serde_json::from_str(&raw).unwrap();
        assert_eq!(reloaded, artifact);

        // All nine staged prompt kinds, in pipeline order.
        let steps: Vec<Step> = reloaded_steps(out.path());
        let staged: Vec<Step> = steps
            .iter()
            .copied()
            .filter(|s| {
                !matches!(s, Step::GoalPositions | Step::CoherenceJudge | Step::AgentActions)
            })
            .collect();
        assert_eq!(
            staged,
            vec![
                Step::Story,
                Step::Characters,
                Step::Tileset,
                Step::Goals,
                Step::ImportantTiles,
                Step::WalkableTiles,
                Step::ObjectTiles,
                Step::WorldEnvironment,
                Step::WorldFull,
            ]
        );
    }

    /// Reads the prompt kinds back out of the persisted transcript.
    fn reloaded_steps(dir: &Path) -> Vec<Step> {
        let raw = fs::read_to_string(dir.join("transcript.jsonl")).unwrap();
        raw.lines()
            .map(|line| {
                let value: serde_json::Value = serde_json::from_str(line).unwrap();
                serde_json::from_value(value["step"].clone()).unwrap()
            })
            .collect()
    }

    #[test]
    fn later_rounds_feed_back_the_previous_world_and_evaluation() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.rounds = 2;
        let second_world = "```\nAGGGGG\nGWWWGG\nGGGGKG\nGGPGGF\n```";
        let second_positions =
            r#"{"positions": [{"index": 0, "row": 2, "col": 4}, {"index": 1, "row": 3, "col": 2}]}"#;
        let mut script = full_round_script();
        script.extend([
            (Step::WorldEnvironment, ENV_GRID.to_owned()),
            (Step::WorldFull, second_world.to_owned()),
            (Step::GoalPositions, second_positions.to_owned()),
            (Step::CoherenceJudge, "81".to_owned()),
        ]);
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        assert_eq!(artifact.round_records.len(), 2);
        let first = &artifact.round_records[0];
        let second = &artifact.round_records[1];
        assert_eq!(second.evaluation.coherence, Some(81));
        // 4 differing cells -> sqrt(8), under the 4.0 default threshold.
        assert!(!second.evaluation.is_novel);
        assert!((second.evaluation.novelty_distance.unwrap() - 8.0f64.sqrt()).abs() < 1e-12);

        // Both round-1 generation prompts carried the previous world and
        // its serialized evaluation.
        let raw = fs::read_to_string(out.path().join("transcript.jsonl")).unwrap();
        let report_json = json_pretty(&first.evaluation);
        let mut checked = 0;
        for line in raw.lines() {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            let step: Step = serde_json::from_value(value["step"].clone()).unwrap();
            if !matches!(step, Step::WorldEnvironment | Step::WorldFull) {
                continue;
            }
            let prompt = value["messages"][0]["content"].as_str().unwrap();
            let is_second_round = prompt.contains("previous attempt");
            if is_second_round {
                assert!(prompt.contains(&first.world_grid.to_text()));
                assert!(prompt.contains(&report_json));
                checked += 1;
            }
        }
        assert_eq!(checked, 2, "both second-round prompts carry feedback");

        // Final world is the last round's.
        assert_eq!(artifact.final_world.as_ref(), Some(&second.world_grid));
    }

    #[test]
    fn exhausted_budget_persists_a_partial_artifact() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.completion_try_budget = 3;
        let mut script = vec![
            (Step::Story, STORY.to_owned()),
            (Step::Characters, CHARACTERS.to_owned()),
            (Step::Tileset, TILESET.to_owned()),
        ];
        // Every goal attempt fails to parse; three stage failures exhaust
        // the budget (each stage failure burns the per-call parse retries).
        for _ in 0..9 {
            script.push((Step::Goals, "not json at all".to_owned()));
        }
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(!artifact.completed);
        assert_eq!(artifact.tries_used, 3);
        assert!(artifact.story_package.is_none());
        assert!(artifact.round_records.is_empty());
        assert!(artifact.final_world.is_none());
        // Partial outputs still persisted.
        assert!(out.path().join("story.txt").is_file());
        assert!(out.path().join("artifact.json").is_file());
        let raw = fs::read_to_string(out.path().join("artifact.json")).unwrap();
        assert!(raw.contains("\"completed\": false"));
    }

    #[test]
    fn direct_generation_issues_only_story_and_world_prompts() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.mode = Mode::DirectGeneration;
        let provider = scripted_provider([
            (Step::Story, STORY.to_owned()),
            (Step::WorldFull, "```\n.....\n.###.\n.....\n```".to_owned()),
        ]);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        let steps = reloaded_steps(out.path());
        assert_eq!(steps, vec![Step::Story, Step::WorldFull]);
        let round = &artifact.round_records[0];
        assert!(round.environment_grid.is_none());
        assert!(round.goals.is_empty());
        assert!(round.evaluation.playable, "no objectives to fail");
        assert_eq!(round.evaluation.coherence, None);
        assert_eq!(round.evaluation.char_tile_accuracy, None);
        // Without a legend there is nothing to assign or render.
        assert!(artifact.tile_assignment.is_empty());
        assert!(artifact.rendered_image_path.is_none());
    }

    #[test]
    fn one_step_mode_skips_the_environment_pass() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.mode = Mode::OneStep;
        let script: Vec<(Step, String)> = full_round_script()
            .into_iter()
            .filter(|(step, _)| *step != Step::WorldEnvironment)
            .collect();
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        let steps = reloaded_steps(out.path());
        assert!(!steps.contains(&Step::WorldEnvironment));
        assert!(artifact.round_records[0].environment_grid.is_none());
        assert!(!out.path().join("round_0/world_env.txt").exists());
    }

    #[test]
    fn one_round_mode_overrides_the_round_count() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.mode = Mode::OneRound;
        config.rounds = 3;
        let provider = scripted_provider(full_round_script());
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();
        assert!(artifact.completed);
        assert_eq!(artifact.round_records.len(), 1);
    }

    #[test]
    fn wrong_claimed_position_falls_back_to_a_scan() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let config = test_config(&assets);
        let mut script = full_round_script();
        // Objective 1 claims (0,0), which holds 'A', not 'P'.
        script[9] = (
            Step::GoalPositions,
            r#"{"positions": [{"index": 0, "row": 2, "col": 2}, {"index": 1, "row": 0, "col": 0}]}"#
                .to_owned(),
        );
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        assert_eq!(artifact.tries_used, 0, "fallback is free");
        assert_eq!(artifact.round_records[0].goals[1].position, Some((3, 4)));
        assert!(artifact
            .warnings
            .iter()
            .any(|w| w.message.contains("objective 1") && w.message.contains("(3, 4)")));
    }

    #[test]
    fn unplaceable_objective_regenerates_the_round() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let config = test_config(&assets);
        let mut script = full_round_script();
        // First world attempt lacks 'K' entirely; the retry places it.
        script[8] = (Step::WorldFull, "```\nAGGGGG\nGWWWGG\nGGGGGG\nGGGGPF\n```".to_owned());
        script.insert(10, (Step::WorldEnvironment, ENV_GRID.to_owned()));
        script.insert(11, (Step::WorldFull, WORLD_GRID.to_owned()));
        script.insert(12, (Step::GoalPositions, POSITIONS.to_owned()));
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        assert_eq!(artifact.tries_used, 1, "one try spent on the regeneration");
        assert!(artifact
            .warnings
            .iter()
            .any(|w| w.message.contains("absent from the world")));
        // The regenerated world now carries the key.
        assert!(artifact.final_world.unwrap().contains_symbol('K'));
        let steps = reloaded_steps(out.path());
        assert_eq!(
            steps.iter().filter(|s| **s == Step::WorldEnvironment).count(),
            2
        );
    }

    #[test]
    fn agent_rewards_land_on_the_final_round() {
        let assets = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let mut config = test_config(&assets);
        config.agent_episodes = 1;
        let mut script = full_round_script();
        // One episode, two objectives: walk to the key and grab it, then
        // step onto the path tile.
        script.push((
            Step::AgentActions,
            "```\nmove down, move down, move right, move right, pick object\n```".to_owned(),
        ));
        script.push((
            Step::AgentActions,
            "```\nmove down, move right, move right\n```".to_owned(),
        ));
        let provider = scripted_provider(script);
        let artifact = run_with_provider(&config, out.path(), provider).unwrap();

        assert!(artifact.completed);
        let evaluation = &artifact.round_records[0].evaluation;
        assert_eq!(evaluation.agent_reward, Some(1.0));
        assert!(out.path().join("agent_traces.json").is_file());
        // The persisted per-round report was refreshed with the reward.
        let raw = fs::read_to_string(out.path().join("round_0/evals.json")).unwrap();
        let reloaded: EvaluationReport = serde_json::from_str(&raw).unwrap();
        assert_eq!(reloaded.agent_reward, Some(1.0));
    }

    #[test]
    fn identical_scripts_reproduce_identical_artifacts() {
        let assets = TempDir::new().unwrap();
        let config = test_config(&assets);
        let run_once = || {
            let out = TempDir::new().unwrap();
            let provider = scripted_provider(full_round_script());
            run_with_provider(&config, out.path(), provider).unwrap();
            let artifact = fs::read(out.path().join("artifact.json")).unwrap();
            let transcript = fs::read(out.path().join("transcript.jsonl")).unwrap();
            let image = fs::read(out.path().join("world.png")).unwrap();
            (artifact, transcript, image)
        };
        assert_eq!(run_once(), run_once());
    }
}
