//! Command-line front end: generate worlds from stories, run experiment
//! batches, score or render existing world files, regenerate the
//! placeholder tile art, and play agent episodes.
//!
//! Exit codes: 0 on success (for `generate`, a completed run), 2 when a
//! generation run exhausts its completion try budget, 1 on any hard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use worldloom::agent::{self, LlmPolicy};
use worldloom::batch::{self, BatchSpec};
use worldloom::demo;
use worldloom::eval;
use worldloom::llm::{Provider, ProviderConfig, ProviderKind, TemplateStore};
use worldloom::pipeline::{self, Mode, ParagraphRange, RunConfig};
use worldloom::tiles::{self, Embedder, TileCategory, TileDataset};
use worldloom::world::{locate_symbol, CharacterInfo, CharacterRole, Goal};
use worldloom::{TileLegend, WorldGrid};

#[derive(Parser)]
#[command(
    name = "worldloom",
    version,
    about = "Turn short stories into playable, evaluated 2D tile worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the story-to-world pipeline once and persist an artifact directory.
    Generate(GenerateArgs),
    /// Repeat runs (optionally over a parameter sweep) and tally a report.
    Batch(BatchArgs),
    /// Score an existing world file and print the evaluation as JSON.
    Evaluate(EvaluateArgs),
    /// Render a world file to a PNG using the tile datasets.
    Render(RenderArgs),
    /// Write the built-in placeholder tile datasets to a directory.
    MakeTileset(MakeTilesetArgs),
    /// Play model-driven agent episodes on an existing world.
    AgentRun(AgentRunArgs),
}

/// Flags that override values from the config file; anything not passed
/// keeps the file's value, and the file's gaps keep built-in defaults.
#[derive(Args, Default)]
struct ConfigOverrides {
    /// Seed recorded in the artifact and used to vary batch runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Pipeline variant: full, direct, no-goals, no-important, one-step, one-round.
    #[arg(long)]
    mode: Option<String>,
    /// Feedback rounds of world generation.
    #[arg(long)]
    rounds: Option<u32>,
    /// Objectives to extract from the story.
    #[arg(long)]
    objectives: Option<u32>,
    /// Story length in paragraphs, e.g. "4-5" or "6".
    #[arg(long)]
    paragraphs: Option<String>,
    /// Maximum size of the important tile set.
    #[arg(long)]
    important_cap: Option<usize>,
    /// Minimum distance from earlier rounds for a world to count as novel.
    #[arg(long)]
    novelty_threshold: Option<f64>,
    /// Node-expansion budget shared by one playability check.
    #[arg(long)]
    astar_budget: Option<usize>,
    /// Agent episodes played on the final world (0 skips the agent).
    #[arg(long)]
    episodes: Option<u32>,
    /// Completion tries before a run is abandoned as partial.
    #[arg(long)]
    try_budget: Option<u32>,
    /// Keep the best-scoring round as the final world instead of the last.
    #[arg(long)]
    best_of: bool,
    /// Model provider: mock, openai, or anthropic.
    #[arg(long)]
    provider: Option<String>,
    /// Model name sent to the provider.
    #[arg(long)]
    model: Option<String>,
    /// Provider base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Mock reply script (JSON), or the special value "demo" for the
    /// built-in scripted demonstration run.
    #[arg(long)]
    script: Option<String>,
    /// Environment tile dataset CSV.
    #[arg(long)]
    environment_tiles: Option<PathBuf>,
    /// Character tile dataset CSV.
    #[arg(long)]
    character_tiles: Option<PathBuf>,
    /// Prompt template directory overriding the compiled-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

impl ConfigOverrides {
    /// Applies every given flag onto `config`; returns true when the
    /// built-in demo script was requested.
    fn apply(&self, config: &mut RunConfig) -> Result<bool> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = &self.mode {
            config.mode = Mode::from_str(mode).map_err(anyhow::Error::msg)?;
        }
        if let Some(rounds) = self.rounds {
            config.rounds = rounds;
        }
        if let Some(objectives) = self.objectives {
            config.objective_count = objectives;
        }
        if let Some(paragraphs) = &self.paragraphs {
            config.story_paragraphs = parse_paragraphs(paragraphs)?;
        }
        if let Some(cap) = self.important_cap {
            config.important_tile_cap = cap;
        }
        if let Some(threshold) = self.novelty_threshold {
            config.novelty_threshold = threshold;
        }
        if let Some(budget) = self.astar_budget {
            config.astar_iteration_budget = budget;
        }
        if let Some(episodes) = self.episodes {
            config.agent_episodes = episodes;
        }
        if let Some(budget) = self.try_budget {
            config.completion_try_budget = budget;
        }
        if self.best_of {
            config.best_of = true;
        }
        if let Some(provider) = &self.provider {
            config.provider.kind = parse_provider_kind(provider)?;
        }
        if let Some(model) = &self.model {
            config.provider.model_name = model.clone();
        }
        if let Some(endpoint) = &self.endpoint {
            config.provider.endpoint_url = endpoint.clone();
        }
        if let Some(var) = &self.api_key_env {
            config.provider.api_key_env_var = var.clone();
        }
        if let Some(path) = &self.environment_tiles {
            config.tileset_paths.environment = path.clone();
        }
        if let Some(path) = &self.character_tiles {
            config.tileset_paths.characters = path.clone();
        }
        if let Some(dir) = &self.templates {
            config.templates_dir = Some(dir.clone());
        }
        let mut demo_requested = false;
        if let Some(script) = &self.script {
            config.provider.kind = ProviderKind::Mock;
            if script == "demo" {
                demo_requested = true;
                config.provider.mock_script_path = None;
            } else {
                config.provider.mock_script_path = Some(PathBuf::from(script));
            }
        }
        Ok(demo_requested)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory for this run.
    #[arg(long, default_value = "run_output")]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct BatchArgs {
    /// TOML batch specification (runs, base config, sweep, output_root).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Repetitions per sweep point.
    #[arg(long)]
    runs: Option<u32>,
    /// Directory receiving every run directory and the reports.
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Worker threads (default: one per sweep point).
    #[arg(long)]
    workers: Option<usize>,
    /// Judge score a run needs to count in the coherence column.
    #[arg(long)]
    coherence_threshold: Option<u8>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// World grid as plain text, one row per line.
    #[arg(long)]
    world: PathBuf,
    /// Tile legend as JSON.
    #[arg(long)]
    legend: PathBuf,
    /// Objectives as a JSON array; unplaced ones are located by symbol.
    #[arg(long)]
    goals: Option<PathBuf>,
    /// Protagonist symbol to start path checks from.
    #[arg(long, default_value_t = '@')]
    protagonist: char,
    /// Earlier world file for the novelty distance; repeatable.
    #[arg(long = "prior")]
    priors: Vec<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    novelty_threshold: f64,
    #[arg(long, default_value_t = 10_000)]
    astar_budget: usize,
    /// Skip the model-judged coherence score entirely.
    #[arg(long)]
    no_llm: bool,
    /// Non-mock provider enabling the coherence judge: openai or anthropic.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    /// Story text the coherence judge compares the world against.
    #[arg(long)]
    story: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// World grid as plain text, one row per line.
    #[arg(long)]
    world: PathBuf,
    /// Tile legend as JSON.
    #[arg(long)]
    legend: PathBuf,
    #[arg(long, default_value = "assets/environment.csv")]
    environment_tiles: PathBuf,
    #[arg(long, default_value = "assets/characters.csv")]
    character_tiles: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeTilesetArgs {
    /// Directory receiving the PNG tiles and the two dataset CSVs.
    #[arg(long, default_value = "assets")]
    out: PathBuf,
}

#[derive(Args)]
struct AgentRunArgs {
    /// World grid as plain text, one row per line.
    #[arg(long)]
    world: PathBuf,
    /// Tile legend as JSON.
    #[arg(long)]
    legend: PathBuf,
    /// Objectives as a JSON array; unplaced ones are located by symbol.
    #[arg(long)]
    goals: PathBuf,
    #[arg(long, default_value_t = '@')]
    protagonist: char,
    #[arg(long, default_value_t = 1)]
    episodes: u32,
    #[arg(long, default_value_t = 1_000)]
    astar_budget: usize,
    /// Mock reply script (JSON) to drive the agent offline.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    /// Prompt template directory overriding the compiled-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Batch(args) => cmd_batch(args).map(|()| ExitCode::SUCCESS),
        Command::Evaluate(args) => cmd_evaluate(args).map(|()| ExitCode::SUCCESS),
        Command::Render(args) => cmd_render(args).map(|()| ExitCode::SUCCESS),
        Command::MakeTileset(args) => cmd_make_tileset(args).map(|()| ExitCode::SUCCESS),
        Command::AgentRun(args) => cmd_agent_run(args).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let mut config = load_run_config(args.config.as_deref())?;
    let use_demo_script = args.overrides.apply(&mut config)?;
    if use_demo_script
        && (!config.tileset_paths.environment.is_file()
            || !config.tileset_paths.characters.is_file())
    {
        let assets_dir = args.out.join("assets");
        config.tileset_paths = demo::prepare_assets(&assets_dir)?;
        eprintln!(
            "note: wrote placeholder tile datasets to {}",
            assets_dir.display()
        );
    }

    let artifact = if use_demo_script {
        pipeline::run_with_provider(&config, &args.out, Provider::mock(demo::script()))?
    } else {
        pipeline::run(&config, &args.out)?
    };

    for warning in &artifact.warnings {
        eprintln!("warning: {warning}");
    }
    println!("artifact: {}", args.out.join("artifact.json").display());
    let summary = match artifact.final_evaluation() {
        Some(evaluation) => format!(
            "playable={} novel={} coherence={} agent_reward={}",
            evaluation.playable,
            evaluation.is_novel,
            evaluation
                .coherence
                .map_or_else(|| "n/a".to_owned(), |c| c.to_string()),
            evaluation
                .agent_reward
                .map_or_else(|| "n/a".to_owned(), |r| format!("{r:.4}")),
        ),
        None => "no round produced a world".to_owned(),
    };
    println!(
        "completed={} rounds={} tries_used={} {}",
        artifact.completed,
        artifact.round_records.len(),
        artifact.tries_used,
        summary
    );
    Ok(if artifact.completed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_batch(args: BatchArgs) -> Result<()> {
    let mut spec: BatchSpec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading batch spec {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing batch spec {}", path.display()))?
        }
        None => BatchSpec::default(),
    };
    if let Some(runs) = args.runs {
        spec.runs = runs;
    }
    if let Some(root) = &args.output_root {
        spec.output_root = root.clone();
    }
    if let Some(workers) = args.workers {
        spec.workers = Some(workers);
    }
    if let Some(threshold) = args.coherence_threshold {
        spec.coherence_threshold = threshold;
    }
    let use_demo_script = args.overrides.apply(&mut spec.base)?;
    if use_demo_script {
        fs::create_dir_all(&spec.output_root).with_context(|| {
            format!("creating batch output root {}", spec.output_root.display())
        })?;
        let script_path = spec.output_root.join("demo_script.json");
        demo::script().to_json_file(&script_path)?;
        spec.base.provider.mock_script_path = Some(script_path);
        if !spec.base.tileset_paths.environment.is_file()
            || !spec.base.tileset_paths.characters.is_file()
        {
            spec.base.tileset_paths = demo::prepare_assets(&spec.output_root.join("assets"))?;
        }
    }

    let report = batch::run_batch(&spec)?;
    print!("{}", batch::render_table(&report));
    println!(
        "report: {}",
        spec.output_root.join("batch_report.json").display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let legend: TileLegend = read_json(&args.legend)?;
    let world = read_world(&args.world)?;
    let mut goals: Vec<Goal> = match &args.goals {
        Some(path) => read_json(path)?,
        None => Vec::new(),
    };
    place_goals(&mut goals, &world)?;

    let verdict = eval::playability(
        &world,
        &goals,
        args.protagonist,
        &legend,
        args.astar_budget,
    )?;

    let mut priors = Vec::new();
    for path in &args.priors {
        priors.push(read_world(path)?);
    }
    let novelty_distance = priors
        .iter()
        .map(|prior| eval::novelty_distance(&world, prior))
        .fold(None, |lowest: Option<f64>, distance| {
            Some(lowest.map_or(distance, |value| value.min(distance)))
        });
    let is_novel = eval::is_novel(&world, &priors, args.novelty_threshold);

    let characters = legend_characters(&legend);
    let coherence = judge_coherence(&args, &legend, &world)?;

    let report = eval::EvaluationReport {
        playable: verdict.playable,
        path_length: verdict.total_path_length,
        novelty_distance,
        is_novel,
        novel_and_playable: is_novel && verdict.playable,
        char_tile_accuracy: Some(eval::char_tile_accuracy(&world, &characters)),
        important_tile_accuracy: eval::important_tile_accuracy(&world, &legend).ok(),
        coherence,
        agent_reward: None,
        astar_expansions_used: verdict.expansions_used,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Runs the judge only when a real provider was requested.
fn judge_coherence(
    args: &EvaluateArgs,
    legend: &TileLegend,
    world: &WorldGrid,
) -> Result<Option<u8>> {
    if args.no_llm {
        return Ok(None);
    }
    let kind = match &args.provider {
        Some(name) => parse_provider_kind(name)?,
        None => return Ok(None),
    };
    if kind == ProviderKind::Mock {
        return Ok(None);
    }
    let Some(story_path) = &args.story else {
        bail!("the coherence judge needs --story (or pass --no-llm)");
    };
    let story = fs::read_to_string(story_path)
        .with_context(|| format!("reading story {}", story_path.display()))?;
    let mut provider_config = ProviderConfig {
        kind,
        ..ProviderConfig::default()
    };
    if let Some(model) = &args.model {
        provider_config.model_name = model.clone();
    }
    if let Some(endpoint) = &args.endpoint {
        provider_config.endpoint_url = endpoint.clone();
    }
    if let Some(var) = &args.api_key_env {
        provider_config.api_key_env_var = var.clone();
    }
    let provider = Provider::new(provider_config)?;
    let templates = TemplateStore::embedded();
    let score = eval::coherence_judge(
        &provider,
        &templates,
        &story,
        &legend_text(legend),
        &world.to_text(),
    )?;
    Ok(Some(score))
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let legend: TileLegend = read_json(&args.legend)?;
    let world = read_world(&args.world)?;
    let embedder = Embedder::default();
    let environment = TileDataset::load(&args.environment_tiles, &embedder)?;
    let character_tiles = TileDataset::load(&args.character_tiles, &embedder)?;
    let characters = legend_characters(&legend);
    let assignment =
        tiles::assign_tiles(&legend, &characters, &environment, &character_tiles, &embedder)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    tiles::render_world_to_file(&world, &assignment, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_make_tileset(args: MakeTilesetArgs) -> Result<()> {
    let embedder = Embedder::default();
    tiles::generate_placeholder_tileset(
        &tiles::builtin_environment_specs(),
        TileCategory::Environment,
        &args.out,
        &embedder,
    )?;
    tiles::generate_placeholder_tileset(
        &tiles::builtin_character_specs(),
        TileCategory::Character,
        &args.out,
        &embedder,
    )?;
    println!(
        "wrote {} and {}",
        args.out.join("environment.csv").display(),
        args.out.join("characters.csv").display()
    );
    Ok(())
}

fn cmd_agent_run(args: AgentRunArgs) -> Result<()> {
    let legend: TileLegend = read_json(&args.legend)?;
    let world = read_world(&args.world)?;
    let mut goals: Vec<Goal> = read_json(&args.goals)?;
    place_goals(&mut goals, &world)?;

    let mut provider_config = ProviderConfig::default();
    if let Some(name) = &args.provider {
        provider_config.kind = parse_provider_kind(name)?;
    }
    if let Some(model) = &args.model {
        provider_config.model_name = model.clone();
    }
    if let Some(endpoint) = &args.endpoint {
        provider_config.endpoint_url = endpoint.clone();
    }
    if let Some(var) = &args.api_key_env {
        provider_config.api_key_env_var = var.clone();
    }
    if let Some(script) = &args.script {
        provider_config.kind = ProviderKind::Mock;
        provider_config.mock_script_path = Some(script.clone());
    }
    let provider = Provider::new(provider_config)?;
    let templates = match &args.templates {
        Some(dir) => TemplateStore::from_dir(dir),
        None => TemplateStore::embedded(),
    };
    let mut policy = LlmPolicy::new(&provider, &templates);
    let traces = agent::run_episodes(
        &world,
        &goals,
        &legend,
        args.protagonist,
        &mut policy,
        args.episodes,
        args.astar_budget,
    )?;
    let rewards: Vec<f64> = traces.iter().map(|t| t.episode_reward).collect();
    let mean = if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    };
    let output = serde_json::json!({
        "episode_rewards": rewards,
        "mean_reward": mean,
        "traces": traces,
    });
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

// -- shared helpers ---------------------------------------------------------

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn read_world(path: &Path) -> Result<WorldGrid> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading world {}", path.display()))?;
    let world = WorldGrid::from_text(&text);
    if world.height() == 0 {
        bail!("world file {} holds no grid rows", path.display());
    }
    if !world.is_rectangular() {
        bail!("world file {} is not rectangular", path.display());
    }
    Ok(world)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Gives every unplaced objective the first occurrence of its target symbol.
fn place_goals(goals: &mut [Goal], world: &WorldGrid) -> Result<()> {
    for goal in goals {
        if goal.position.is_none() {
            goal.position = Some(locate_symbol(world, goal.target_symbol).with_context(
                || {
                    format!(
                        "objective target '{}' is not present in the world",
                        goal.target_symbol
                    )
                },
            )?);
        }
    }
    Ok(())
}

/// Stand-in character roster for worlds evaluated without a full story
/// package: one entry per legend character symbol.
fn legend_characters(legend: &TileLegend) -> Vec<CharacterInfo> {
    legend
        .character_symbols
        .iter()
        .map(|&symbol| CharacterInfo {
            name: symbol.to_string(),
            description: legend.entries.get(&symbol).cloned().unwrap_or_default(),
            role: CharacterRole::NonPlayer,
            symbol: Some(symbol),
        })
        .collect()
}

fn legend_text(legend: &TileLegend) -> String {
    let mut lines: Vec<String> = legend
        .entries
        .iter()
        .map(|(symbol, description)| format!("{symbol}: {description}"))
        .collect();
    let list = |set: &std::collections::BTreeSet<char>| {
        set.iter().map(char::to_string).collect::<Vec<_>>().join(", ")
    };
    lines.push(format!("walkable: {}", list(&legend.walkable)));
    lines.push(format!("interactive: {}", list(&legend.interactive)));
    lines.push(format!("important: {}", list(&legend.important)));
    lines.push(format!("characters: {}", list(&legend.character_symbols)));
    lines.join("\n")
}

fn parse_paragraphs(text: &str) -> Result<ParagraphRange> {
    let (min, max) = match text.split_once('-') {
        Some((low, high)) => (
            low.trim().parse().context("bad paragraph range")?,
            high.trim().parse().context("bad paragraph range")?,
        ),
        None => {
            let n: u32 = text.trim().parse().context("bad paragraph count")?;
            (n, n)
        }
    };
    if min == 0 || max == 0 {
        bail!("paragraph counts must be at least 1");
    }
    Ok(ParagraphRange { min, max })
}

fn parse_provider_kind(name: &str) -> Result<ProviderKind> {
    match name {
        "mock" => Ok(ProviderKind::Mock),
        "openai" | "openai-compatible" => Ok(ProviderKind::OpenAiCompatible),
        "anthropic" | "anthropic-compatible" => Ok(ProviderKind::AnthropicCompatible),
        other => bail!("unknown provider '{other}' (expected mock, openai, or anthropic)"),
    }
}
