//! worldloom turns a short LLM-written story into a playable, rendered tile
//! world.
//!
//! The pipeline runs in stages: a story is written, characters / tileset /
//! goals / tile-role sets are extracted from it, then a world grid is
//! generated over one or more feedback rounds (optionally in two passes: an
//! environment-only sketch followed by the full grid). Each round's grid goes
//! through a deterministic repair pass, is scored for playability, novelty,
//! accuracy, and coherence, and the scores are fed back into the next round's
//! prompts. The final grid gets tile art assigned by embedding similarity and
//! is rendered to a PNG.
//!
//! Module map:
//!
//! * [`world`] — story, legend, goal, and grid types plus grid parsing and
//!   the repair pass.
//! * [`llm`] — chat providers (OpenAI-compatible, Anthropic-compatible, and
//!   a scripted mock), prompt templates, and the parse-retry step driver.
//! * [`tiles`] — tile datasets, the description embedder, similarity
//!   retrieval, and the world renderer.
//! * [`eval`] — A* search, playability, novelty distance, accuracy metrics,
//!   and the coherence judge.
//! * [`agent`] — the objective-following agent, its reward law, and episode
//!   rollouts.
//! * [`pipeline`] — the staged run driver, generation modes, and the run
//!   artifact layout.
//! * [`batch`] — multi-run experiments, parameter sweeps, and report
//!   aggregation.
//! * [`demo`] — a self-contained scripted demo run and placeholder tile art.

#![forbid(unsafe_code)]

pub mod agent;
pub mod batch;
pub mod demo;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod tiles;
pub mod world;

pub use world::{Cell, StoryPackage, TileLegend, WorldGrid};
