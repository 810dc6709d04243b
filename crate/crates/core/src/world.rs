//! Core domain types for generated worlds: the story package, the tile
//! legend, goals, and the character-grid world representation, together with
//! the deterministic repair pass that makes raw LLM grids usable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid coordinate as `(row, col)`, row 0 at the top.
pub type Cell = (usize, usize);

/// Fraction of a candidate line run's characters that must be legend symbols
/// for the run to be treated as grid content when no fenced block is usable.
pub const GRID_LINE_RATIO: f64 = 0.6;

/// Per-line ratio below which leading/trailing lines are trimmed off a
/// candidate run before the run-level ratio test. Prose headers like
/// "Here is the map:" sit well under this; noisy grid rows do not.
const EDGE_TRIM_RATIO: f64 = 0.3;

#[derive(Debug, Error)]
pub enum WorldError {
    /// No fenced block or symbol-dense line run of at least two rows was
    /// found in the text.
    #[error("no world grid of at least two rows found in the text")]
    NoGridFound,
    /// A legend symbol was not a single visible ASCII character.
    #[error("invalid legend symbol {0:?}: must be a visible ascii character")]
    InvalidSymbol(char),
    /// A legend entry had an empty description.
    #[error("legend symbol '{0}' has an empty description")]
    EmptyDescription(char),
    /// A role set referenced a symbol missing from the legend entries.
    #[error("symbol '{symbol}' in the {set} set is not in the legend")]
    UnknownRoleSymbol { symbol: char, set: &'static str },
    /// The important set exceeded its configured cap.
    #[error("important tile set has {count} symbols, cap is {cap}")]
    ImportantSetOverCap { count: usize, cap: usize },
}

/// A non-fatal oddity noticed while parsing or repairing model output.
/// Warnings are accumulated into run artifacts rather than failing the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub message: String,
}

impl Warning {
    pub fn new(message: impl Into<String>) -> Self {
        Warning { message: message.into() }
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

// ---------------------------------------------------------------------------
// Characters
// ---------------------------------------------------------------------------

/// Narrative role of a story character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacterRole {
    Protagonist,
    Antagonist,
    NonPlayer,
}

/// One character extracted from the story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterInfo {
    pub name: String,
    pub description: String,
    pub role: CharacterRole,
    /// Grid symbol assigned during tileset extraction; `None` until then.
    pub symbol: Option<char>,
}

// ---------------------------------------------------------------------------
// Legend
// ---------------------------------------------------------------------------

/// The symbol vocabulary of a world: what each grid character means plus the
/// role sets (walkable, interactive, important, character) layered on top.
///
/// Invariants, checked by [`TileLegend::validate`]: every symbol is a single
/// visible ASCII character, every role-set member appears in `entries`, and
/// descriptions are non-empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileLegend {
    /// Symbol -> short description, e.g. 'G' -> "grass".
    pub entries: BTreeMap<char, String>,
    /// Symbols an agent can stand on.
    pub walkable: BTreeSet<char>,
    /// Symbols that can be picked up or fought.
    pub interactive: BTreeSet<char>,
    /// Symbols that matter to the story and are checked for presence.
    pub important: BTreeSet<char>,
    /// Symbols that render as characters rather than terrain.
    pub character_symbols: BTreeSet<char>,
}

/// True when `c` may be used as a grid symbol.
pub fn is_valid_symbol(c: char) -> bool {
    c.is_ascii_graphic()
}

impl TileLegend {
    pub fn is_walkable(&self, symbol: char) -> bool {
        self.walkable.contains(&symbol)
    }

    pub fn describe(&self, symbol: char) -> Option<&str> {
        self.entries.get(&symbol).map(String::as_str)
    }

    /// Checks structural invariants. `important_cap` bounds the size of the
    /// important set; pass `usize::MAX` to skip that check.
    pub fn validate(&self, important_cap: usize) -> Result<(), WorldError> {
        for (&symbol, description) in &self.entries {
            if !is_valid_symbol(symbol) {
                return Err(WorldError::InvalidSymbol(symbol));
            }
            if description.trim().is_empty() {
                return Err(WorldError::EmptyDescription(symbol));
            }
        }
        let sets: [(&BTreeSet<char>, &'static str); 4] = [
            (&self.walkable, "walkable"),
            (&self.interactive, "interactive"),
            (&self.important, "important"),
            (&self.character_symbols, "character"),
        ];
        for (set, name) in sets {
            for &symbol in set {
                if !self.entries.contains_key(&symbol) {
                    return Err(WorldError::UnknownRoleSymbol { symbol, set: name });
                }
            }
        }
        if self.important.len() > important_cap {
            return Err(WorldError::ImportantSetOverCap {
                count: self.important.len(),
                cap: important_cap,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Goals
// ---------------------------------------------------------------------------

/// What kind of interaction completes a goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    /// Stand on the target cell.
    ReachTile,
    /// Pick up the object on or next to the agent.
    PickObject,
    /// Strike the enemy on or next to the agent.
    HitEnemy,
}

/// One ordered objective the agent must complete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    /// Position in the objective ordering, starting at 0.
    pub index: usize,
    pub description: String,
    pub target_symbol: char,
    pub target_kind: GoalKind,
    /// Grid cell of the target; `None` until positions are extracted for a
    /// concrete world.
    pub position: Option<Cell>,
}

// ---------------------------------------------------------------------------
// Story package
// ---------------------------------------------------------------------------

/// Everything extracted from a story before any world grid exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPackage {
    pub story_text: String,
    pub paragraph_count: usize,
    pub characters: Vec<CharacterInfo>,
    pub legend: TileLegend,
    pub goals: Vec<Goal>,
}

impl StoryPackage {
    /// The protagonist entry, if one was extracted.
    pub fn protagonist(&self) -> Option<&CharacterInfo> {
        self.characters
            .iter()
            .find(|c| c.role == CharacterRole::Protagonist)
    }

    /// The protagonist's grid symbol, once assigned.
    pub fn protagonist_symbol(&self) -> Option<char> {
        self.protagonist().and_then(|c| c.symbol)
    }
}

/// Number of blank-line-separated paragraphs in a block of prose.
pub fn count_paragraphs(text: &str) -> usize {
    text.split("\n\n")
        .filter(|block| !block.trim().is_empty())
        .count()
}

// ---------------------------------------------------------------------------
// World grid
// ---------------------------------------------------------------------------

/// A world as a grid of single-character tiles. Rows may be ragged straight
/// out of a model; [`algorithmic_fixes`] makes the grid rectangular.
///
/// Serializes as a single newline-joined string, which is also the on-disk
/// form used by run artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldGrid {
    pub rows: Vec<Vec<char>>,
}

impl WorldGrid {
    pub fn new(rows: Vec<Vec<char>>) -> Self {
        WorldGrid { rows }
    }

    /// Builds a grid from newline-separated text, dropping blank lines.
    pub fn from_text(text: &str) -> Self {
        let rows = text
            .lines()
            .filter(|line| !line.trim().is_empty())
            .map(|line| line.trim_end().chars().collect())
            .collect();
        WorldGrid { rows }
    }

    /// Newline-joined text form, no trailing newline.
    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|row| row.iter().collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    /// Maximum row length; rows may be shorter before repair.
    pub fn width(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_rectangular(&self) -> bool {
        let w = self.width();
        self.rows.iter().all(|row| row.len() == w)
    }

    pub fn get(&self, cell: Cell) -> Option<char> {
        self.rows.get(cell.0).and_then(|row| row.get(cell.1)).copied()
    }

    pub fn set(&mut self, cell: Cell, symbol: char) {
        if let Some(slot) = self
            .rows
            .get_mut(cell.0)
            .and_then(|row| row.get_mut(cell.1))
        {
            *slot = symbol;
        }
    }

    /// Iterates cells in row-major order as `((row, col), symbol)`.
    pub fn cells(&self) -> impl Iterator<Item = (Cell, char)> + '_ {
        self.rows.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, &sym)| ((r, c), sym))
        })
    }

    /// Occurrence count per symbol.
    pub fn symbol_counts(&self) -> BTreeMap<char, usize> {
        let mut counts = BTreeMap::new();
        for (_, sym) in self.cells() {
            *counts.entry(sym).or_insert(0) += 1;
        }
        counts
    }

    pub fn contains_symbol(&self, symbol: char) -> bool {
        self.cells().any(|(_, sym)| sym == symbol)
    }
}

impl fmt::Display for WorldGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Serialize for WorldGrid {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for WorldGrid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Ok(WorldGrid::from_text(&text))
    }
}

/// Top-left-most cell containing `symbol`, scanning row-major.
pub fn locate_symbol(grid: &WorldGrid, symbol: char) -> Option<Cell> {
    grid.cells()
        .find(|&(_, sym)| sym == symbol)
        .map(|(cell, _)| cell)
}

/// Most frequent walkable symbol in the grid, ties broken by the smaller
/// character. `None` when the grid contains no walkable symbol.
pub fn most_frequent_walkable(grid: &WorldGrid, legend: &TileLegend) -> Option<char> {
    most_frequent_matching(grid, |sym| legend.is_walkable(sym))
}

fn most_frequent_matching(grid: &WorldGrid, keep: impl Fn(char) -> bool) -> Option<char> {
    let mut best: Option<(char, usize)> = None;
    // BTreeMap iteration is ascending by symbol, so on a count tie the
    // first (smallest) symbol sticks.
    for (sym, count) in grid.symbol_counts() {
        if keep(sym) && best.is_none_or(|(_, best_count)| count > best_count) {
            best = Some((sym, count));
        }
    }
    best.map(|(sym, _)| sym)
}

// ---------------------------------------------------------------------------
// Grid extraction from raw model text
// ---------------------------------------------------------------------------

/// Pulls a world grid out of raw model output.
///
/// The content of the last fenced code block is preferred. Without a usable
/// fenced block, maximal runs of consecutive non-blank lines are considered:
/// a run qualifies when, after trimming obvious prose lines off its edges, it
/// still has at least two lines and at least [`GRID_LINE_RATIO`] of its
/// characters are legend symbols. All qualifying runs are concatenated in
/// order.
///
/// Symbols outside the legend are replaced by the block's most frequent
/// walkable symbol (falling back to its most frequent legend symbol), one
/// [`Warning`] per replacement. With an empty legend the fenced content is
/// accepted verbatim — there is no vocabulary to check against.
///
/// Fails with [`WorldError::NoGridFound`] when no candidate of height >= 2
/// exists.
pub fn parse_grid(
    raw: &str,
    legend: &TileLegend,
) -> Result<(WorldGrid, Vec<Warning>), WorldError> {
    let fenced = last_fenced_block(raw).map(block_lines).unwrap_or_default();

    let lines: Vec<String> = if fenced.len() >= 2 {
        fenced
    } else if legend.entries.is_empty() {
        // No vocabulary to scan by; only fenced content is trustworthy.
        return Err(WorldError::NoGridFound);
    } else {
        symbol_dense_runs(raw, legend)
    };

    if lines.len() < 2 {
        return Err(WorldError::NoGridFound);
    }

    let mut warnings = Vec::new();
    let mut rows: Vec<Vec<char>> = lines.iter().map(|l| l.chars().collect()).collect();

    if !legend.entries.is_empty() {
        let block = WorldGrid::new(rows.clone());
        let replacement = most_frequent_walkable(&block, legend)
            .or_else(|| {
                most_frequent_matching(&block, |sym| legend.entries.contains_key(&sym))
            })
            .ok_or(WorldError::NoGridFound)?;
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, sym) in row.iter_mut().enumerate() {
                if !legend.entries.contains_key(sym) {
                    warnings.push(Warning::new(format!(
                        "replaced unknown symbol '{}' at ({r}, {c}) with '{replacement}'",
                        *sym
                    )));
                    *sym = replacement;
                }
            }
        }
    }

    Ok((WorldGrid::new(rows), warnings))
}

/// Content of the last ``` fenced block, if the text has one.
fn last_fenced_block(raw: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(content) => blocks.push(content.join("\n")),
                // The opening fence line may carry a language tag; skip it.
                None => current = Some(Vec::new()),
            }
        } else if let Some(content) = current.as_mut() {
            content.push(line);
        }
    }
    // An unterminated trailing fence still counts as a block.
    if let Some(content) = current {
        blocks.push(content.join("\n"));
    }
    blocks.pop()
}

/// Non-blank trimmed lines of a block.
fn block_lines(block: String) -> Vec<String> {
    block
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Fraction of a line's characters that are legend symbols.
fn legend_ratio(line: &str, legend: &TileLegend) -> f64 {
    let total = line.chars().count();
    if total == 0 {
        return 0.0;
    }
    let hits = line
        .chars()
        .filter(|c| legend.entries.contains_key(c))
        .count();
    hits as f64 / total as f64
}

/// All maximal runs of consecutive non-blank lines that, after trimming
/// low-density edge lines, are at least two lines tall and at least
/// [`GRID_LINE_RATIO`] legend symbols overall, concatenated in order.
fn symbol_dense_runs(raw: &str, legend: &TileLegend) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, out: &mut Vec<String>| {
        let mut lines = std::mem::take(run);
        while lines
            .first()
            .is_some_and(|l| legend_ratio(l, legend) < EDGE_TRIM_RATIO)
        {
            lines.remove(0);
        }
        while lines
            .last()
            .is_some_and(|l| legend_ratio(l, legend) < EDGE_TRIM_RATIO)
        {
            lines.pop();
        }
        if lines.len() < 2 {
            return;
        }
        let total: usize = lines.iter().map(|l| l.chars().count()).sum();
        let hits: usize = lines
            .iter()
            .map(|l| l.chars().filter(|c| legend.entries.contains_key(c)).count())
            .sum();
        if total > 0 && hits as f64 / total as f64 >= GRID_LINE_RATIO {
            out.append(&mut lines);
        }
    };
    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut run, &mut out);
        } else {
            run.push(trimmed.to_owned());
        }
    }
    flush(&mut run, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Repair pass
// ---------------------------------------------------------------------------

/// The deterministic repair pass applied to every generated grid.
///
/// Two fixes, in order:
///
/// 1. **Duplicate characters.** For each character symbol, every occurrence
///    after the first in row-major order is replaced by the grid's most
///    frequent walkable symbol (falling back to its most frequent
///    non-character symbol, then the legend's smallest non-character symbol).
/// 2. **Ragged rows.** Every row shorter than the longest is right-padded by
///    repeating its last symbol — unless that symbol is a character symbol,
///    in which case the nearest non-character symbol to its left is used, so
///    padding never mints new character copies. Rows with no non-character
///    symbol (or empty rows) are padded with the replacement symbol from
///    fix 1.
///
/// The result is rectangular, height-preserving, has at most one occurrence
/// of each character symbol, and the pass is idempotent. In the degenerate
/// case where no non-character symbol exists at all, character symbols are
/// treated as ordinary terrain (no replacement exists to dedup with).
pub fn algorithmic_fixes(grid: &WorldGrid, legend: &TileLegend) -> WorldGrid {
    let replacement = most_frequent_walkable(grid, legend)
        .or_else(|| {
            most_frequent_matching(grid, |sym| !legend.character_symbols.contains(&sym))
        })
        .or_else(|| {
            legend
                .entries
                .keys()
                .find(|sym| !legend.character_symbols.contains(sym))
                .copied()
        });

    let mut rows = grid.rows.clone();

    if let Some(filler) = replacement {
        let mut seen: BTreeSet<char> = BTreeSet::new();
        for row in rows.iter_mut() {
            for sym in row.iter_mut() {
                if legend.character_symbols.contains(sym) && !seen.insert(*sym) {
                    *sym = filler;
                }
            }
        }
    }

    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    for row in rows.iter_mut() {
        if row.len() >= width {
            continue;
        }
        let pad = row
            .iter()
            .rev()
            .find(|sym| !legend.character_symbols.contains(sym))
            .copied()
            .or(replacement);
        match pad {
            Some(pad) => row.resize(width, pad),
            // No non-character symbol exists anywhere; repeat the last
            // symbol as-is (dedup above was skipped, so this is stable).
            None => {
                let last = row.last().copied();
                if let Some(last) = last {
                    row.resize(width, last);
                }
            }
        }
    }

    WorldGrid::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legend(entries: &[(char, &str)], walkable: &[char], characters: &[char]) -> TileLegend {
        TileLegend {
            entries: entries
                .iter()
                .map(|&(sym, desc)| (sym, desc.to_owned()))
                .collect(),
            walkable: walkable.iter().copied().collect(),
            interactive: BTreeSet::new(),
            important: BTreeSet::new(),
            character_symbols: characters.iter().copied().collect(),
        }
    }

    fn grid(rows: &[&str]) -> WorldGrid {
        WorldGrid::new(rows.iter().map(|r| r.chars().collect()).collect())
    }

    #[test]
    fn grid_text_round_trip() {
        let g = grid(&["AB", "BA"]);
        assert_eq!(g.to_text(), "AB\nBA");
        assert_eq!(WorldGrid::from_text("AB\nBA"), g);
        assert_eq!(g.height(), 2);
        assert_eq!(g.width(), 2);
        assert!(g.is_rectangular());
    }

    #[test]
    fn grid_serde_uses_text_form() {
        let g = grid(&["AB", "BA"]);
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, "\"AB\\nBA\"");
        let back: WorldGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parse_grid_prefers_last_fenced_block() {
        let l = legend(&[('A', "a"), ('B', "b")], &['A'], &[]);
        let raw = "Here is the world you asked for:\n```\nAB\nBA\n```\nEnjoy!";
        let (g, warnings) = parse_grid(raw, &l).unwrap();
        assert_eq!(g, grid(&["AB", "BA"]));
        assert!(warnings.is_empty());
    }

    #[test]
    fn parse_grid_finds_unfenced_symbol_runs() {
        let l = legend(&[('A', "a"), ('B', "b")], &['A'], &[]);
        let (g, warnings) = parse_grid("AB\nAZ", &l).unwrap();
        assert_eq!(g, grid(&["AB", "AA"]));
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].message.contains('Z'));
    }

    #[test]
    fn parse_grid_substitutes_most_frequent_walkable() {
        // 'B' is more frequent overall but only 'A' is walkable.
        let l = legend(&[('A', "a"), ('B', "b")], &['A'], &[]);
        let raw = "```\nBBA\nBZA\n```";
        let (g, warnings) = parse_grid(raw, &l).unwrap();
        assert_eq!(g, grid(&["BBA", "BAA"]));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn parse_grid_falls_back_to_most_frequent_legend_symbol() {
        // No walkable symbol present in the block at all.
        let l = legend(&[('A', "a"), ('B', "b")], &[], &[]);
        let raw = "```\nBBZ\nBAB\n```";
        let (g, _) = parse_grid(raw, &l).unwrap();
        assert_eq!(g, grid(&["BBB", "BAB"]));
    }

    #[test]
    fn parse_grid_rejects_prose() {
        let l = legend(&[('A', "a"), ('B', "b")], &['A'], &[]);
        let raw = "Once upon a time there was a hero.\n\nThe hero won.";
        assert!(matches!(parse_grid(raw, &l), Err(WorldError::NoGridFound)));
    }

    #[test]
    fn parse_grid_rejects_single_line() {
        let l = legend(&[('A', "a")], &['A'], &[]);
        assert!(matches!(parse_grid("AAAA", &l), Err(WorldError::NoGridFound)));
    }

    #[test]
    fn parse_grid_trims_prose_edges_from_runs() {
        let l = legend(&[('G', "grass")], &['G'], &[]);
        let raw = "The world map:\nGGGG\nGGGG\nEnjoy the view!";
        let (g, _) = parse_grid(raw, &l).unwrap();
        assert_eq!(g, grid(&["GGGG", "GGGG"]));
    }

    #[test]
    fn parse_grid_concatenates_multiple_qualifying_runs() {
        let l = legend(&[('G', "grass")], &['G'], &[]);
        let raw = "GGGG\nGGGG\n\nGGGG\nGGGG";
        let (g, _) = parse_grid(raw, &l).unwrap();
        assert_eq!(g.height(), 4);
    }

    #[test]
    fn parse_grid_with_empty_legend_accepts_fenced_content_verbatim() {
        let l = TileLegend::default();
        let raw = "```\nxy\nyx\n```";
        let (g, warnings) = parse_grid(raw, &l).unwrap();
        assert_eq!(g, grid(&["xy", "yx"]));
        assert!(warnings.is_empty());
        assert!(matches!(parse_grid("xy\nyx", &l), Err(WorldError::NoGridFound)));
    }

    #[test]
    fn fixes_pad_short_rows_with_last_symbol() {
        let l = legend(&[('A', "a"), ('B', "b")], &['A'], &[]);
        let fixed = algorithmic_fixes(&grid(&["ABB", "AB"]), &l);
        assert_eq!(fixed, grid(&["ABB", "ABB"]));
    }

    #[test]
    fn fixes_pad_past_trailing_character_symbol() {
        let l = legend(&[('A', "a"), ('B', "b"), ('C', "c"), ('@', "hero")], &['A'], &['@']);
        let fixed = algorithmic_fixes(&grid(&["A@", "ABC"]), &l);
        assert_eq!(fixed, grid(&["A@A", "ABC"]));
    }

    #[test]
    fn fixes_remove_duplicate_characters_keeping_first() {
        let l = legend(
            &[('G', "grass"), ('T', "tree"), ('@', "hero")],
            &['G'],
            &['@'],
        );
        let fixed = algorithmic_fixes(&grid(&["G@G", "TGT", "@GG"]), &l);
        assert_eq!(fixed, grid(&["G@G", "TGT", "GGG"]));
    }

    #[test]
    fn fixes_pad_all_character_row_with_most_frequent_walkable() {
        let l = legend(&[('G', "grass"), ('@', "hero")], &['G'], &['@']);
        let fixed = algorithmic_fixes(&grid(&["@", "GGG"]), &l);
        assert_eq!(fixed, grid(&["@GG", "GGG"]));
    }

    #[test]
    fn fixes_are_idempotent_on_examples() {
        let l = legend(
            &[('G', "grass"), ('T', "tree"), ('@', "hero"), ('B', "b")],
            &['G'],
            &['@'],
        );
        for rows in [
            vec!["ABB", "AB"],
            vec!["G@G", "TGT", "@GG"],
            vec!["@", "GGG"],
            vec!["G@", "GT@", "@"],
        ] {
            let g = grid(&rows);
            let once = algorithmic_fixes(&g, &l);
            let twice = algorithmic_fixes(&once, &l);
            assert!(once.is_rectangular());
            assert_eq!(once.height(), g.height());
            assert_eq!(once, twice, "not idempotent for {rows:?}");
        }
    }

    #[test]
    fn fixes_keep_rectangular_grid_without_characters_unchanged() {
        let l = legend(&[('G', "grass"), ('T', "tree")], &['G'], &[]);
        let g = grid(&["GTG", "GGT"]);
        assert_eq!(algorithmic_fixes(&g, &l), g);
    }

    #[test]
    fn locate_symbol_returns_topmost_leftmost() {
        let g = grid(&["GGG", "G@G", "@GG"]);
        assert_eq!(locate_symbol(&g, '@'), Some((1, 1)));
        assert_eq!(locate_symbol(&g, 'G'), Some((0, 0)));
        assert_eq!(locate_symbol(&g, 'X'), None);
    }

    #[test]
    fn most_frequent_walkable_breaks_ties_by_smaller_symbol() {
        let l = legend(&[('A', "a"), ('B', "b"), ('T', "t")], &['A', 'B'], &[]);
        // Two As, two Bs: tie broken toward 'A'.
        assert_eq!(most_frequent_walkable(&grid(&["ABT", "BAT"]), &l), Some('A'));
        assert_eq!(most_frequent_walkable(&grid(&["TTT"]), &l), None);
    }

    #[test]
    fn legend_validate_checks_symbols_and_sets() {
        let mut l = legend(&[('G', "grass")], &['G'], &[]);
        assert!(l.validate(15).is_ok());
        l.walkable.insert('X');
        assert!(matches!(
            l.validate(15),
            Err(WorldError::UnknownRoleSymbol { symbol: 'X', set: "walkable" })
        ));
        let bad = legend(&[('\u{7f}', "nope")], &[], &[]);
        assert!(matches!(bad.validate(15), Err(WorldError::InvalidSymbol(_))));
    }

    #[test]
    fn paragraph_count_ignores_blank_blocks() {
        assert_eq!(count_paragraphs("one\n\ntwo\n\n\nthree"), 3);
        assert_eq!(count_paragraphs("  \n\n"), 0);
        assert_eq!(count_paragraphs("single paragraph only"), 1);
    }

    #[test]
    fn story_package_finds_protagonist() {
        let pkg = StoryPackage {
            story_text: "s".into(),
            paragraph_count: 1,
            characters: vec![
                CharacterInfo {
                    name: "Mara".into(),
                    description: "a scout".into(),
                    role: CharacterRole::Protagonist,
                    symbol: Some('@'),
                },
                CharacterInfo {
                    name: "Wolf".into(),
                    description: "a wolf".into(),
                    role: CharacterRole::Antagonist,
                    symbol: Some('W'),
                },
            ],
            legend: TileLegend::default(),
            goals: vec![],
        };
        assert_eq!(pkg.protagonist().unwrap().name, "Mara");
        assert_eq!(pkg.protagonist_symbol(), Some('@'));
    }
}
