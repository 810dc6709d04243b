//! Tile art: datasets of square sprites addressed by description, the
//! embedding used to match legend descriptions to sprites, and the renderer
//! that pastes the matched sprites into a PNG of the world. Includes a
//! deterministic placeholder tileset generator so the pipeline runs without
//! any hand-drawn art.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{CharacterInfo, TileLegend, WorldGrid};

/// Vector length of the built-in description embedding.
pub const BAG_OF_WORDS_DIMENSION: usize = 1024;

/// Edge length of generated placeholder tiles.
pub const PLACEHOLDER_TILE_SIZE: u32 = 16;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("vectors have different dimensions ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("tile dataset is empty")]
    EmptyDataset,
    #[error("tile dataset error: {0}")]
    Dataset(String),
    #[error("no tile assigned for symbol '{0}'")]
    MissingAssignment(char),
    #[error("tile images must share one square size: {0}")]
    TileSizeMismatch(String),
    #[error("embedding failure: {0}")]
    Embedding(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Whether a tile depicts terrain or a character sprite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileCategory {
    Environment,
    Character,
}

impl TileCategory {
    pub fn label(self) -> &'static str {
        match self {
            TileCategory::Environment => "environment",
            TileCategory::Character => "character",
        }
    }

    /// Directory / CSV stem used by the placeholder generator.
    pub fn dataset_stem(self) -> &'static str {
        match self {
            TileCategory::Environment => "environment",
            TileCategory::Character => "characters",
        }
    }

    fn parse(label: &str) -> Result<Self, TileError> {
        match label {
            "environment" => Ok(TileCategory::Environment),
            "character" => Ok(TileCategory::Character),
            other => Err(TileError::Dataset(format!("unknown tile category '{other}'"))),
        }
    }
}

/// One sprite: its image on disk, the description it is retrieved by, and
/// that description's embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAsset {
    pub id: u32,
    /// Resolved path, usable as-is for loading.
    pub image_path: PathBuf,
    pub description: String,
    pub embedding: Vec<f64>,
    pub category: TileCategory,
}

/// A set of same-size square sprites of one category, sorted by id.
#[derive(Debug, Clone)]
pub struct TileDataset {
    pub category: TileCategory,
    pub assets: Vec<TileAsset>,
    /// Shared edge length of every sprite in the set.
    pub tile_size: u32,
}

impl TileDataset {
    /// Loads a dataset from its CSV manifest (`id,image_path,description,
    /// category` with a header row). Image paths resolve relative to the
    /// CSV's directory. Every image must decode, be square, and share one
    /// size; ids must be unique; descriptions must be non-empty; all rows
    /// must carry the same category.
    pub fn load(csv_path: &Path, embedder: &Embedder) -> Result<Self, TileError> {
        let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::Reader::from_path(csv_path)
            .map_err(|e| TileError::Dataset(format!("{}: {e}", csv_path.display())))?;

        #[derive(Deserialize)]
        struct Row {
            id: u32,
            image_path: String,
            description: String,
            category: String,
        }

        let mut assets: Vec<TileAsset> = Vec::new();
        let mut category: Option<TileCategory> = None;
        let mut tile_size: Option<u32> = None;
        for row in reader.deserialize::<Row>() {
            let row = row
                .map_err(|e| TileError::Dataset(format!("{}: {e}", csv_path.display())))?;
            let row_category = TileCategory::parse(&row.category)?;
            match category {
                None => category = Some(row_category),
                Some(existing) if existing != row_category => {
                    return Err(TileError::Dataset(format!(
                        "mixed categories in {}: {} and {}",
                        csv_path.display(),
                        existing.label(),
                        row_category.label()
                    )))
                }
                Some(_) => {}
            }
            if row.description.trim().is_empty() {
                return Err(TileError::Dataset(format!(
                    "tile {} has an empty description",
                    row.id
                )));
            }
            if assets.iter().any(|a| a.id == row.id) {
                return Err(TileError::Dataset(format!("duplicate tile id {}", row.id)));
            }
            let image_path = base.join(&row.image_path);
            let image = load_tile_image(&image_path)?;
            let (w, h) = image.dimensions();
            if w != h {
                return Err(TileError::TileSizeMismatch(format!(
                    "{} is {w}x{h}, not square",
                    image_path.display()
                )));
            }
            match tile_size {
                None => tile_size = Some(w),
                Some(size) if size != w => {
                    return Err(TileError::TileSizeMismatch(format!(
                        "{} is {w}px, dataset uses {size}px",
                        image_path.display()
                    )))
                }
                Some(_) => {}
            }
            let embedding = embedder.embed_text(&row.description)?;
            assets.push(TileAsset {
                id: row.id,
                image_path,
                description: row.description,
                embedding,
                category: row_category,
            });
        }
        let (Some(category), Some(tile_size)) = (category, tile_size) else {
            return Err(TileError::EmptyDataset);
        };
        assets.sort_by_key(|a| a.id);
        Ok(TileDataset { category, assets, tile_size })
    }

    pub fn get(&self, id: u32) -> Option<&TileAsset> {
        self.assets.iter().find(|a| a.id == id)
    }
}

fn load_tile_image(path: &Path) -> Result<RgbaImage, TileError> {
    Ok(image::open(path)
        .map_err(|e| TileError::Dataset(format!("{}: {e}", path.display())))?
        .to_rgba8())
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// HTTP embedding endpoint config (OpenAI embeddings wire shape).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint_url: String,
    pub api_key_env_var: String,
    pub model_name: String,
}

/// Turns a tile description into a vector. The default is a deterministic
/// hashed bag of words: no network, stable across runs, good enough to tell
/// "green grass meadow" from "deep blue water".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Embedder {
    /// Lowercased alphanumeric tokens, each hashed (FNV-1a) into one of
    /// `dimension` buckets; the vector counts bucket hits.
    BagOfWords { dimension: usize },
    Remote(RemoteEmbedderConfig),
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::BagOfWords { dimension: BAG_OF_WORDS_DIMENSION }
    }
}

impl Embedder {
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, TileError> {
        match self {
            Embedder::BagOfWords { dimension } => Ok(bag_of_words(text, *dimension)),
            Embedder::Remote(config) => remote_embed(config, text),
        }
    }
}

fn bag_of_words(text: &str, dimension: usize) -> Vec<f64> {
    let mut vector = vec![0.0; dimension];
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let bucket = (fnv1a64(&token.to_lowercase()) % dimension as u64) as usize;
        vector[bucket] += 1.0;
    }
    vector
}

fn fnv1a64(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in token.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn remote_embed(config: &RemoteEmbedderConfig, text: &str) -> Result<Vec<f64>, TileError> {
    let api_key = if config.api_key_env_var.is_empty() {
        None
    } else {
        Some(std::env::var(&config.api_key_env_var).map_err(|_| {
            TileError::Embedding(format!(
                "environment variable {} is not set",
                config.api_key_env_var
            ))
        })?)
    };
    let client = reqwest::blocking::Client::new();
    let mut request = client
        .post(format!("{}/embeddings", config.endpoint_url.trim_end_matches('/')))
        .json(&serde_json::json!({ "model": config.model_name, "input": [text] }));
    if let Some(key) = api_key {
        request = request.bearer_auth(key);
    }
    let response = request
        .send()
        .map_err(|e| TileError::Embedding(e.to_string()))?;
    if !response.status().is_success() {
        return Err(TileError::Embedding(format!("status {}", response.status())));
    }
    let value: serde_json::Value = response
        .json()
        .map_err(|e| TileError::Embedding(e.to_string()))?;
    value["data"][0]["embedding"]
        .as_array()
        .map(|xs| xs.iter().filter_map(serde_json::Value::as_f64).collect())
        .ok_or_else(|| TileError::Embedding("response had no embedding".to_owned()))
}

/// Cosine similarity in [-1, 1]. Errors on length mismatch or a zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, TileError> {
    if a.len() != b.len() {
        return Err(TileError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(TileError::ZeroVector);
    }
    Ok(dot / (norm_a * norm_b))
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// The dataset row most similar to an already-computed query embedding.
/// Ties go to the lowest id.
pub fn retrieve_tile_by_embedding<'a>(
    query: &[f64],
    dataset: &'a TileDataset,
) -> Result<&'a TileAsset, TileError> {
    let mut best: Option<(&TileAsset, f64)> = None;
    // Assets are sorted by id, so strict improvement keeps the lowest id
    // on ties.
    for asset in &dataset.assets {
        let similarity = cosine_similarity(query, &asset.embedding)?;
        if best.is_none_or(|(_, best_similarity)| similarity > best_similarity) {
            best = Some((asset, similarity));
        }
    }
    best.map(|(asset, _)| asset).ok_or(TileError::EmptyDataset)
}

/// The dataset row whose description is most similar to `description`.
pub fn retrieve_tile<'a>(
    description: &str,
    dataset: &'a TileDataset,
    embedder: &Embedder,
) -> Result<&'a TileAsset, TileError> {
    let query = embedder.embed_text(description)?;
    retrieve_tile_by_embedding(&query, dataset)
}

/// Picks a sprite for every legend symbol: character symbols retrieve from
/// the character dataset by the matching character's description (falling
/// back to the legend entry text), everything else from the environment
/// dataset by its legend description.
pub fn assign_tiles(
    legend: &TileLegend,
    characters: &[CharacterInfo],
    environment: &TileDataset,
    character_tiles: &TileDataset,
    embedder: &Embedder,
) -> Result<BTreeMap<char, TileAsset>, TileError> {
    let mut assignment = BTreeMap::new();
    for (&symbol, entry_description) in &legend.entries {
        let (dataset, description) = if legend.character_symbols.contains(&symbol) {
            let description = characters
                .iter()
                .find(|c| c.symbol == Some(symbol))
                .map(|c| c.description.as_str())
                .unwrap_or(entry_description.as_str());
            (character_tiles, description)
        } else {
            (environment, entry_description.as_str())
        };
        let asset = retrieve_tile(description, dataset, embedder)?;
        assignment.insert(symbol, asset.clone());
    }
    Ok(assignment)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Pastes the assigned sprite of every cell into one image of
/// `width*tile_size x height*tile_size` pixels.
///
/// Sprites with transparency (characters, loose objects) are composited
/// over a terrain backdrop: the most frequent environment-category symbol
/// among the cell's 4-neighbors, ties to the smaller symbol, falling back
/// to the grid's overall most frequent environment symbol.
pub fn render_world(
    world: &WorldGrid,
    assignment: &BTreeMap<char, TileAsset>,
) -> Result<RgbaImage, TileError> {
    for (_, symbol) in world.cells() {
        if !assignment.contains_key(&symbol) {
            return Err(TileError::MissingAssignment(symbol));
        }
    }

    let mut sprites: BTreeMap<char, RgbaImage> = BTreeMap::new();
    let mut tile_size: Option<u32> = None;
    for (&symbol, asset) in assignment {
        let sprite = load_tile_image(&asset.image_path)?;
        let (w, h) = sprite.dimensions();
        if w != h {
            return Err(TileError::TileSizeMismatch(format!(
                "{} is {w}x{h}",
                asset.image_path.display()
            )));
        }
        match tile_size {
            None => tile_size = Some(w),
            Some(size) if size != w => {
                return Err(TileError::TileSizeMismatch(format!(
                    "{} is {w}px, expected {size}px",
                    asset.image_path.display()
                )))
            }
            Some(_) => {}
        }
        sprites.insert(symbol, sprite);
    }
    let tile_size = tile_size.ok_or(TileError::EmptyDataset)?;

    let has_transparency: BTreeMap<char, bool> = sprites
        .iter()
        .map(|(&sym, img)| (sym, img.pixels().any(|p| p[3] < 255)))
        .collect();
    let is_environment =
        |sym: char| assignment.get(&sym).map(|a| a.category) == Some(TileCategory::Environment);
    let global_backdrop = most_frequent_environment(world, &is_environment);

    let width = world.width() as u32 * tile_size;
    let height = world.height() as u32 * tile_size;
    let mut canvas = RgbaImage::new(width.max(1), height.max(1));

    for ((row, col), symbol) in world.cells() {
        let origin = (col as u32 * tile_size, row as u32 * tile_size);
        if has_transparency[&symbol] {
            let backdrop = neighbor_backdrop(world, (row, col), &is_environment)
                .or(global_backdrop);
            if let Some(backdrop_symbol) = backdrop {
                blit(&mut canvas, &sprites[&backdrop_symbol], origin);
            }
        }
        blend_over(&mut canvas, &sprites[&symbol], origin);
    }
    Ok(canvas)
}

/// Renders and writes the PNG in one go.
pub fn render_world_to_file(
    world: &WorldGrid,
    assignment: &BTreeMap<char, TileAsset>,
    path: &Path,
) -> Result<(), TileError> {
    let imagebuf = render_world(world, assignment)?;
    imagebuf
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| TileError::Dataset(format!("{}: {e}", path.display())))
}

fn most_frequent_environment(
    world: &WorldGrid,
    is_environment: &impl Fn(char) -> bool,
) -> Option<char> {
    let mut best: Option<(char, usize)> = None;
    for (symbol, count) in world.symbol_counts() {
        if is_environment(symbol) && best.is_none_or(|(_, c)| count > c) {
            best = Some((symbol, count));
        }
    }
    best.map(|(symbol, _)| symbol)
}

fn neighbor_backdrop(
    world: &WorldGrid,
    cell: (usize, usize),
    is_environment: &impl Fn(char) -> bool,
) -> Option<char> {
    let (row, col) = cell;
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let neighbors = [
        row.checked_sub(1).map(|r| (r, col)),
        Some((row + 1, col)),
        col.checked_sub(1).map(|c| (row, c)),
        Some((row, col + 1)),
    ];
    for neighbor in neighbors.into_iter().flatten() {
        if let Some(symbol) = world.get(neighbor) {
            if is_environment(symbol) {
                *counts.entry(symbol).or_insert(0) += 1;
            }
        }
    }
    let mut best: Option<(char, usize)> = None;
    for (symbol, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((symbol, count));
        }
    }
    best.map(|(symbol, _)| symbol)
}

/// Copies `sprite` onto `canvas` at `origin`, replacing pixels.
fn blit(canvas: &mut RgbaImage, sprite: &RgbaImage, origin: (u32, u32)) {
    for (x, y, &pixel) in sprite.enumerate_pixels() {
        canvas.put_pixel(origin.0 + x, origin.1 + y, pixel);
    }
}

/// Alpha-composites `sprite` over what `canvas` already holds at `origin`,
/// in pure integer math so output bytes are deterministic.
fn blend_over(canvas: &mut RgbaImage, sprite: &RgbaImage, origin: (u32, u32)) {
    for (x, y, &source) in sprite.enumerate_pixels() {
        let destination = *canvas.get_pixel(origin.0 + x, origin.1 + y);
        let sa = u32::from(source[3]);
        let da = u32::from(destination[3]);
        let out_alpha = sa + da * (255 - sa) / 255;
        let pixel = if out_alpha == 0 {
            Rgba([0, 0, 0, 0])
        } else {
            let channel = |i: usize| {
                let s = u32::from(source[i]);
                let d = u32::from(destination[i]);
                ((s * sa + d * da * (255 - sa) / 255) / out_alpha) as u8
            };
            Rgba([channel(0), channel(1), channel(2), out_alpha as u8])
        };
        canvas.put_pixel(origin.0 + x, origin.1 + y, pixel);
    }
}

// ---------------------------------------------------------------------------
// Placeholder tileset generation
// ---------------------------------------------------------------------------

/// Description and fill color of one placeholder tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSpec {
    pub description: String,
    pub color: [u8; 3],
}

impl TileSpec {
    pub fn new(description: &str, color: [u8; 3]) -> Self {
        TileSpec { description: description.to_owned(), color }
    }
}

/// Writes a deterministic placeholder dataset under `out_dir`: flat-color
/// 16x16 sprites (environment tiles opaque with a darker border, character
/// tiles an inset figure on a transparent margin), plus the CSV manifest,
/// then loads and returns the dataset. The same specs always produce the
/// same bytes.
pub fn generate_placeholder_tileset(
    specs: &[TileSpec],
    category: TileCategory,
    out_dir: &Path,
    embedder: &Embedder,
) -> Result<TileDataset, TileError> {
    if specs.is_empty() {
        return Err(TileError::EmptyDataset);
    }
    let stem = category.dataset_stem();
    let image_dir = out_dir.join(stem);
    std::fs::create_dir_all(&image_dir)?;

    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| TileError::Dataset(format!("{}: {e}", csv_path.display())))?;
    writer
        .write_record(["id", "image_path", "description", "category"])
        .map_err(|e| TileError::Dataset(e.to_string()))?;
    for (id, spec) in specs.iter().enumerate() {
        let file_name = format!("tile_{id:03}.png");
        let image = match category {
            TileCategory::Environment => environment_tile(spec.color),
            TileCategory::Character => character_tile(spec.color),
        };
        let image_path = image_dir.join(&file_name);
        image
            .save_with_format(&image_path, ImageFormat::Png)
            .map_err(|e| TileError::Dataset(format!("{}: {e}", image_path.display())))?;
        writer
            .write_record([
                id.to_string(),
                format!("{stem}/{file_name}"),
                spec.description.clone(),
                category.label().to_owned(),
            ])
            .map_err(|e| TileError::Dataset(e.to_string()))?;
    }
    writer.flush().map_err(|e| TileError::Dataset(e.to_string()))?;
    drop(writer);

    TileDataset::load(&csv_path, embedder)
}

fn darken(color: [u8; 3]) -> [u8; 3] {
    [
        (u16::from(color[0]) * 3 / 5) as u8,
        (u16::from(color[1]) * 3 / 5) as u8,
        (u16::from(color[2]) * 3 / 5) as u8,
    ]
}

fn environment_tile(color: [u8; 3]) -> RgbaImage {
    let size = PLACEHOLDER_TILE_SIZE;
    let border = darken(color);
    RgbaImage::from_fn(size, size, |x, y| {
        let edge = x == 0 || y == 0 || x == size - 1 || y == size - 1;
        let [r, g, b] = if edge { border } else { color };
        Rgba([r, g, b, 255])
    })
}

fn character_tile(color: [u8; 3]) -> RgbaImage {
    let size = PLACEHOLDER_TILE_SIZE;
    let border = darken(color);
    // Figure occupies the central 10x10, leaving a transparent margin so
    // the terrain backdrop shows through around the sprite.
    let (lo, hi) = (3, size - 4);
    RgbaImage::from_fn(size, size, |x, y| {
        if x < lo || x > hi || y < lo || y > hi {
            return Rgba([0, 0, 0, 0]);
        }
        let edge = x == lo || y == lo || x == hi || y == hi;
        let [r, g, b] = if edge { border } else { color };
        Rgba([r, g, b, 255])
    })
}

/// The 32 built-in environment tiles. Descriptions are distinct as word
/// bags, so description retrieval is unambiguous.
pub fn builtin_environment_specs() -> Vec<TileSpec> {
    [
        ("green grass meadow", [92, 168, 66]),
        ("dark oak tree", [58, 95, 42]),
        ("deep blue water", [52, 101, 183]),
        ("gray stone wall", [128, 128, 132]),
        ("sandy desert dune", [222, 198, 134]),
        ("dirt path trail", [155, 118, 83]),
        ("wooden plank bridge", [168, 128, 78]),
        ("red brick floor", [158, 74, 58]),
        ("snow covered ground", [235, 240, 246]),
        ("thick leafy bush", [74, 128, 58]),
        ("jagged mountain rock", [104, 96, 92]),
        ("yellow wheat field", [216, 190, 88]),
        ("murky swamp pool", [92, 108, 70]),
        ("cobblestone road", [142, 140, 136]),
        ("molten lava crack", [212, 86, 32]),
        ("frozen ice lake", [176, 216, 235]),
        ("tall pine forest", [44, 86, 58]),
        ("dark cave mouth", [54, 48, 52]),
        ("wooden door frame", [124, 88, 52]),
        ("iron gate bars", [88, 92, 102]),
        ("castle tower block", [150, 150, 160]),
        ("village hut roof", [178, 112, 66]),
        ("market stall awning", [196, 84, 84]),
        ("stone stair steps", [136, 130, 122]),
        ("crumbled ruin pillar", [166, 158, 144]),
        ("pink flower patch", [214, 136, 170]),
        ("mushroom fairy ring", [186, 106, 96]),
        ("glowing crystal cluster", [130, 170, 215]),
        ("burning torch sconce", [226, 164, 54]),
        ("treasure chest box", [172, 132, 56]),
        ("old stone well", [112, 116, 120]),
        ("scattered bone pile", [226, 220, 202]),
    ]
    .into_iter()
    .map(|(description, color)| TileSpec::new(description, color))
    .collect()
}

/// The 12 built-in character tiles, same distinctness guarantee.
pub fn builtin_character_specs() -> Vec<TileSpec> {
    [
        ("young archer ranger", [82, 140, 76]),
        ("old wise wizard", [96, 80, 150]),
        ("armored knight guard", [140, 144, 156]),
        ("sneaky hooded thief", [70, 70, 82]),
        ("village elder chief", [158, 124, 86]),
        ("fierce red dragon", [184, 54, 44]),
        ("howling gray wolf", [120, 120, 126]),
        ("green slime blob", [96, 180, 84]),
        ("skeleton bone warrior", [222, 218, 202]),
        ("goblin scout raider", [108, 134, 64]),
        ("friendly shop merchant", [176, 140, 92]),
        ("lost village child", [204, 160, 120]),
    ]
    .into_iter()
    .map(|(description, color)| TileSpec::new(description, color))
    .collect()
}
