//! Planted-saliency fixtures with a known answer.
//!
//! Each fixture plants a rectangular box whose attention grows over the
//! query's information-rich tokens and a few sink cells that take a fixed
//! share of every query row. Half of the heads carry this structure; the
//! other half mostly attend to text. The same seed also yields a matching
//! scene (box cells hold the queried object) for end-to-end runs.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atn1;
use crate::decoder::Prompt;
use crate::error::{GiftError, Result};
use crate::model::{AttentionTensor, Cell, ModelConfig, Scene, SegmentLayout};
use crate::saliency::eligible_rows;
use crate::tensors::DenseTensor;
use crate::tokenizer::{InfoRichMask, Vocabulary};

pub const COLORS: [&str; 10] = ["red", "blue", "green", "yellow", "orange", "purple", "pink", "brown", "black", "white"];
pub const SHAPES: [&str; 8] = ["ball", "cube", "box", "cone", "cylinder", "sphere", "ring", "star"];
pub const NOUNS: [&str; 6] = ["cat", "dog", "car", "tree", "table", "chair"];

const TEMPLATES: [&str; 5] = [
    "describe the {color} {shape} near the {noun} .",
    "where is the {color} {shape} ?",
    "is there a {color} {shape} next to the {noun} ?",
    "what is on the left of the {color} {shape} ?",
    "look at the big {color} {shape} and tell me its shape .",
];

/// Visual mass of the text-oriented heads on query rows.
const TEXT_HEAD_VISUAL: f64 = 0.02;

/// Capture geometry; matches the model the fixtures stand in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureShape {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for FixtureShape {
    fn default() -> Self {
        Self::from(&ModelConfig::default())
    }
}

impl From<&ModelConfig> for FixtureShape {
    fn from(cfg: &ModelConfig) -> Self {
        Self { grid_rows: cfg.grid_rows, grid_cols: cfg.grid_cols, layers: cfg.layers, heads: cfg.heads }
    }
}

impl FixtureShape {
    pub fn grid_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Knobs of the planted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureParams {
    pub min_box: usize,
    pub max_box: usize,
    pub min_sinks: usize,
    pub max_sinks: usize,
    pub c_sink_min: f64,
    pub c_sink_max: f64,
    pub ramp_start: f64,
    pub ramp_end: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            min_box: 2,
            max_box: 4,
            min_sinks: 1,
            max_sinks: 3,
            c_sink_min: 0.3,
            c_sink_max: 0.45,
            ramp_start: 0.05,
            ramp_end: 0.45,
        }
    }
}

impl FixtureParams {
    pub fn validate(&self, shape: &FixtureShape) -> Result<()> {
        let bad = |m: String| Err(GiftError::Config(m));
        if shape.grid_rows == 0 || shape.grid_cols == 0 || shape.layers == 0 || shape.heads < 2 {
            return bad("fixture grid, layers and heads (>= 2) must be positive".into());
        }
        if self.min_box == 0 || self.min_box > self.max_box || self.max_box > shape.grid_rows.min(shape.grid_cols) {
            return bad(format!("box side range {}..={} does not fit the grid", self.min_box, self.max_box));
        }
        if self.min_sinks == 0 || self.min_sinks > self.max_sinks {
            return bad("sink count range must be non-empty and positive".into());
        }
        if self.max_box * self.max_box + self.max_sinks >= shape.grid_cells() {
            return bad("box plus sinks leave no background cells".into());
        }
        if !(0.3 <= self.c_sink_min && self.c_sink_min <= self.c_sink_max) {
            return bad("sink mass range must start at 0.3 or more and be ordered".into());
        }
        if !(0.0 < self.ramp_start && self.ramp_start < self.ramp_end) {
            return bad("box ramp must start positive and increase".into());
        }
        if self.c_sink_max + self.ramp_end >= 1.0 {
            return bad(format!(
                "infeasible mass budget: sink {} plus box {} leave nothing for the background",
                self.c_sink_max, self.ramp_end
            ));
        }
        Ok(())
    }
}

/// Rectangular salient region in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl GridBox {
    pub fn cells(&self, cols: usize) -> Vec<usize> {
        (self.row..self.row + self.height)
            .flat_map(|r| (self.col..self.col + self.width).map(move |c| r * cols + c))
            .collect()
    }
}

/// Everything about a fixture except the tensor itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub id: usize,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    #[serde(rename = "box")]
    pub grid_box: GridBox,
    pub box_cells: Vec<usize>,
    pub sinks: Vec<usize>,
    pub query: String,
    pub layout: SegmentLayout,
    pub info_rich: InfoRichMask,
    pub c_sink: f64,
    pub peak_layer: usize,
    pub structured_heads: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub meta: FixtureMeta,
    pub scene: Scene,
    pub attention: AttentionTensor,
}

/// Per-fixture seed derived from the run seed and fixture index.
pub fn fixture_seed(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn split_weights(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Build one fixture. Deterministic in `(seed, id, shape, params)`.
pub fn planted_fixture(seed: u64, id: usize, shape: &FixtureShape, params: &FixtureParams) -> Result<PlantedFixture> {
    params.validate(shape)?;
    let fseed = fixture_seed(seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(fseed);
    let (rows, cols) = (shape.grid_rows, shape.grid_cols);
    let cells = shape.grid_cells();

    let height = rng.random_range(params.min_box..=params.max_box);
    let width = rng.random_range(params.min_box..=params.max_box);
    let grid_box = GridBox {
        row: rng.random_range(0..=rows - height),
        col: rng.random_range(0..=cols - width),
        height,
        width,
    };
    let box_cells = grid_box.cells(cols);
    let mut outside: Vec<usize> = (0..cells).filter(|c| !box_cells.contains(c)).collect();
    outside.shuffle(&mut rng);
    let n_sinks = rng.random_range(params.min_sinks..=params.max_sinks);
    let mut sinks = outside[..n_sinks].to_vec();
    sinks.sort_unstable();

    let color = *COLORS.choose(&mut rng).expect("colors");
    let object = *SHAPES.choose(&mut rng).expect("shapes");
    let noun = *NOUNS.choose(&mut rng).expect("nouns");
    let template = *TEMPLATES.choose(&mut rng).expect("templates");
    let query = template.replace("{color}", color).replace("{shape}", object).replace("{noun}", noun);

    let mut scene = Scene::empty(rows, cols);
    for &c in &box_cells {
        scene.cells[c] = Cell { shape: Some(object.into()), color: Some(color.into()) };
    }
    for c in 0..cells {
        if !box_cells.contains(&c) && !sinks.contains(&c) && rng.random_bool(0.25) {
            let other_shape = *SHAPES.iter().filter(|s| **s != object).collect::<Vec<_>>().choose(&mut rng).unwrap();
            let other_color = *COLORS.choose(&mut rng).unwrap();
            scene.cells[c] = Cell { shape: Some((*other_shape).into()), color: Some(other_color.into()) };
        }
    }

    let prompt = Prompt::builtin(&scene, &query)?;
    let layout = *prompt.sequence.layout();
    let info_rich = prompt.query_mask.clone();
    let eligible = eligible_rows(&layout, &info_rich, false)?;

    let c_sink = rng.random_range(params.c_sink_min..=params.c_sink_max);
    let peak_layer = rng.random_range(0..shape.layers);
    let mut heads: Vec<usize> = (0..shape.heads).collect();
    heads.shuffle(&mut rng);
    let mut structured_heads = heads[..shape.heads / 2].to_vec();
    structured_heads.sort_unstable();

    let meta = FixtureMeta {
        id,
        seed: fseed,
        grid_rows: rows,
        grid_cols: cols,
        grid_box,
        box_cells,
        sinks,
        query,
        layout,
        info_rich,
        c_sink,
        peak_layer,
        structured_heads,
    };
    let attention = build_attention(&meta, &eligible, shape, params, &mut rng)?;
    Ok(PlantedFixture { meta, scene, attention })
}

fn build_attention(
    meta: &FixtureMeta,
    eligible: &[usize],
    shape: &FixtureShape,
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionTensor> {
    let layout = meta.layout;
    let n = layout.total_len();
    let (layers, heads) = (shape.layers, shape.heads);
    let vis0 = layout.visual.start;
    let n_vis = layout.visual.len;
    let mut data = vec![0.0f32; layers * heads * n * n];

    let mut is_sink = vec![false; n];
    let mut is_box = vec![false; n];
    for &c in &meta.sinks {
        is_sink[vis0 + c] = true;
    }
    for &c in &meta.box_cells {
        is_box[vis0 + c] = true;
    }
    let n_levels = eligible.len() as f64;

    for l in 0..layers {
        let d = l as f64 - meta.peak_layer as f64;
        let amp = (-d * d / 4.0).exp().max(0.2);
        for h in 0..heads {
            let structured = meta.structured_heads.contains(&h);
            let sink_w = split_weights(rng, meta.sinks.len());
            let box_w = split_weights(rng, meta.box_cells.len());
            let base = (l * heads + h) * n * n;
            let mut level = 0usize;
            for i in 0..n {
                let row = &mut data[base + i * n..base + (i + 1) * n];
                if !layout.query.contains(i) {
                    row[..=i].fill(1.0 / (i + 1) as f32);
                    continue;
                }
                if !structured {
                    let per_vis = TEXT_HEAD_VISUAL / n_vis as f64;
                    let text_cols = i + 1 - n_vis;
                    let per_text = (1.0 - TEXT_HEAD_VISUAL) / text_cols as f64;
                    for (j, a) in row[..=i].iter_mut().enumerate() {
                        *a = if layout.visual.contains(j) { per_vis } else { per_text } as f32;
                    }
                    continue;
                }
                if eligible.contains(&i) {
                    level += 1;
                }
                let m_box = amp * (params.ramp_start + (params.ramp_end - params.ramp_start) * level as f64 / n_levels);
                let background = (0..=i).filter(|&j| !is_sink[j] && !is_box[j]).count();
                let per_bg = (1.0 - meta.c_sink - m_box) / background as f64;
                let (mut si, mut bi) = (0, 0);
                for (j, a) in row[..=i].iter_mut().enumerate() {
                    *a = if is_sink[j] {
                        si += 1;
                        meta.c_sink * sink_w[si - 1]
                    } else if is_box[j] {
                        bi += 1;
                        m_box * box_w[bi - 1]
                    } else {
                        per_bg
                    } as f32;
                }
            }
        }
    }
    AttentionTensor::new(layers, heads, n, data, layout)
}

pub fn gen_fixtures(seed: u64, count: usize, shape: &FixtureShape, params: &FixtureParams) -> Result<Vec<PlantedFixture>> {
    (0..count).map(|id| planted_fixture(seed, id, shape, params)).collect()
}

/// Structural checks on a fixture: disjoint cell sets, valid rows,
/// constant sink share, and box mass growing on eligible rows.
pub fn validate_fixture(fx: &PlantedFixture) -> Result<()> {
    let m = &fx.meta;
    let fail = |msg: String| Err(GiftError::Fixture(format!("fixture {}: {msg}", m.id)));
    if m.sinks.iter().any(|s| m.box_cells.contains(s)) {
        return fail("sink cells overlap the box".into());
    }
    fx.attention.validate()?;
    fx.scene.validate()?;
    let layout = fx.attention.layout();
    let vis0 = layout.visual.start;
    let eligible = eligible_rows(layout, &m.info_rich, false)?;
    for l in 0..fx.attention.layers() {
        for &h in &m.structured_heads {
            let mut prev_box = None;
            for i in layout.query.range() {
                let row = fx.attention.row(l, h, i);
                let sink: f64 = m.sinks.iter().map(|&c| row[vis0 + c] as f64).sum();
                if sink < 0.3 - 1e-6 || (sink - m.c_sink).abs() > 1e-5 {
                    return fail(format!("sink mass {sink} at layer {l} head {h} row {i}"));
                }
                let boxed: f64 = m.box_cells.iter().map(|&c| row[vis0 + c] as f64).sum();
                if let Some(p) = prev_box {
                    if eligible.contains(&i) && boxed <= p {
                        return fail(format!("box mass does not grow at layer {l} head {h} row {i}"));
                    }
                }
                prev_box = Some(boxed);
            }
        }
    }
    Ok(())
}

pub fn fixture_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{id:04}.atn1")),
        dir.join(format!("{id:04}.scene.json")),
        dir.join(format!("{id:04}.meta.json")),
    )
}

pub fn write_fixture(dir: &Path, fx: &PlantedFixture) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (atn, scene, meta) = fixture_paths(dir, fx.meta.id);
    atn1::write_file(&atn, &fx.attention.to_dense())?;
    std::fs::write(scene, serde_json::to_string_pretty(&fx.scene)?)?;
    std::fs::write(meta, serde_json::to_string_pretty(&fx.meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<FixtureMeta> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn read_fixture(dir: &Path, id: usize) -> Result<PlantedFixture> {
    let (atn, scene, meta) = fixture_paths(dir, id);
    let meta = read_meta(&meta)?;
    let dense: DenseTensor = atn1::read_file(&atn)?;
    let attention = AttentionTensor::from_dense(dense, meta.layout)?;
    Ok(PlantedFixture { scene: Scene::load(scene)?, meta, attention })
}

/// Ids of all fixtures in `dir`, ascending, found by their meta files.
pub fn list_fixtures(dir: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".meta.json") {
            if let Ok(id) = stem.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn load_fixtures(dir: &Path) -> Result<Vec<PlantedFixture>> {
    list_fixtures(dir)?.into_iter().map(|id| read_fixture(dir, id)).collect()
}

/// Scene and query of every fixture in `dir`, without the tensors.
pub fn load_prompts(dir: &Path) -> Result<Vec<Prompt>> {
    list_fixtures(dir)?
        .into_iter()
        .map(|id| {
            let (_, scene, meta) = fixture_paths(dir, id);
            Prompt::builtin(&Scene::load(scene)?, &read_meta(&meta)?.query)
        })
        .collect()
}

pub fn fixture_prompt(fx: &PlantedFixture) -> Result<Prompt> {
    Prompt::builtin(&fx.scene, &fx.meta.query)
}

/// Template words missing from the vocabulary (should be none).
pub fn template_words() -> Vec<String> {
    let mut out = Vec::new();
    for t in TEMPLATES {
        for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
            out.push(w.to_string());
        }
    }
    out.extend(COLORS.iter().chain(&SHAPES).chain(&NOUNS).map(|w| w.to_string()));
    out.sort();
    out.dedup();
    out.retain(|w| Vocabulary::builtin().id(w).is_none());
    out
}
