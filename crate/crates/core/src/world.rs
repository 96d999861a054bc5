// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic grounded-captioning world.
//!
//! A scene is a small set of object classes placed on an `H × W` grid. It is
//! rendered into continuous patch features (one frozen unit-norm prototype
//! per class plus seeded Gaussian noise) and described by a template caption
//! `a <obj> and a <obj> ... .` in raster order. A [`CooccurrencePrior`]
//! plants hallucinations into the training captions: after mentioning a
//! trigger object, the caption also mentions its partner with probability
//! `boost` even when the partner is absent. Every hallucinated mention is
//! therefore known exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_file, rng_for, Hash32};
use crate::error::{MesaError, Result};
use crate::tensor::Matrix;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const FUNCTION_WORDS: [&str; 4] = ["describe", "a", "and", "."];

/// Special and function-word tokens that precede the object tokens.
pub const NUM_SPECIAL_TOKENS: usize = 3 + FUNCTION_WORDS.len();

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Dense token space: specials, function words, then one token per object class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    object_base: u32,
    object_count: u32,
}

impl Vocabulary {
    pub fn new(object_names: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        tokens.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        let object_base = tokens.len() as u32;
        let mut seen = BTreeSet::new();
        for name in object_names {
            if name.is_empty() || tokens.contains(name) || !seen.insert(name.clone()) {
                return Err(MesaError::config(format!(
                    "object name {name:?} is empty, duplicated or reserved"
                )));
            }
        }
        tokens.extend(object_names.iter().cloned());
        Ok(Self {
            tokens,
            object_base,
            object_count: object_names.len() as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        BOS
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn describe(&self) -> TokenId {
        3
    }

    pub fn article(&self) -> TokenId {
        4
    }

    pub fn conjunction(&self) -> TokenId {
        5
    }

    pub fn period(&self) -> TokenId {
        6
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    pub fn object_token(&self, class: usize) -> TokenId {
        assert!(class < self.object_count as usize, "object class out of range");
        self.object_base + class as TokenId
    }

    /// Object class named by `id`, if it is an object token.
    pub fn object_class(&self, id: TokenId) -> Option<usize> {
        (id >= self.object_base && id < self.object_base + self.object_count).then(|| (id - self.object_base) as usize)
    }

    pub fn object_token_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.object_base..self.object_base + self.object_count
    }

    pub fn num_objects(&self) -> usize {
        self.object_count as usize
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i as usize).map_or("<?>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn content_hash(&self) -> Hash32 {
        Hash32::of(self.tokens.join("\n").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// A planted co-occurrence: mentioning `trigger` pulls in `partner`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub trigger: String,
    pub partner: String,
    pub boost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub objects: Vec<String>,
    /// Relative sampling weights per object class; empty means uniform.
    pub object_weights: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-coordinate standard deviation of render noise.
    pub render_noise: f64,
    pub prototype_seed: u64,
    pub planted: Vec<PlantedPair>,
}

pub const DEFAULT_OBJECTS: [&str; 46] = [
    "table", "chair", "dog", "person", "fork", "knife", "bed", "pillow", "car", "road", "boat", "water", "cup",
    "bottle", "bowl", "book", "clock", "vase", "bench", "bicycle", "bus", "truck", "bird", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "umbrella", "handbag", "tie", "kite", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "pizza", "cake", "couch", "laptop", "phone", "sink",
];

impl Default for WorldConfig {
    fn default() -> Self {
        let objects: Vec<String> = DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect();
        let planted = [
            ("table", "chair"),
            ("dog", "person"),
            ("fork", "knife"),
            ("bed", "pillow"),
            ("car", "road"),
            ("boat", "water"),
        ]
        .iter()
        .map(|(t, p)| PlantedPair {
            trigger: t.to_string(),
            partner: p.to_string(),
            boost: 0.45,
        })
        .collect();
        // Triggers are common, everything else is uniform.
        let object_weights = objects
            .iter()
            .map(|o| {
                if ["table", "dog", "fork", "bed", "car", "boat"].contains(&o.as_str()) {
                    4.0
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            objects,
            object_weights,
            grid_h: 4,
            grid_w: 4,
            patch_dim: 16,
            min_objects: 1,
            max_objects: 4,
            render_noise: 0.1,
            prototype_seed: 7,
            planted,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(MesaError::config("object universe is empty"));
        }
        if !self.object_weights.is_empty() {
            if self.object_weights.len() != self.objects.len() {
                return Err(MesaError::config("object_weights length differs from objects"));
            }
            if self.object_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                || self.object_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(MesaError::config(
                    "object_weights must be non-negative with a positive sum",
                ));
            }
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.patch_dim == 0 {
            return Err(MesaError::config("grid and patch dimensions must be positive"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(MesaError::config("object count range must satisfy 1 <= min <= max"));
        }
        if self.max_objects > self.objects.len() || self.max_objects > self.grid_h * self.grid_w {
            return Err(MesaError::config("max_objects exceeds universe or grid size"));
        }
        if !(self.render_noise >= 0.0 && self.render_noise.is_finite()) {
            return Err(MesaError::config("render_noise must be finite and >= 0"));
        }
        for p in &self.planted {
            if !(0.0..=1.0).contains(&p.boost) {
                return Err(MesaError::config(format!("boost {} outside [0, 1]", p.boost)));
            }
            if p.trigger == p.partner {
                return Err(MesaError::config("planted pair must name two distinct objects"));
            }
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Normalized per-class sampling distribution.
    pub fn sampling_distribution(&self) -> Vec<f64> {
        let w: Vec<f64> = if self.object_weights.is_empty() {
            vec![1.0; self.objects.len()]
        } else {
            self.object_weights.clone()
        };
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

// ---------------------------------------------------------------------------
// World: frozen config + vocabulary + prototypes
// ---------------------------------------------------------------------------

/// Co-occurrence boosts keyed by `(trigger class, partner class)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CooccurrencePrior {
    pub pair_boost: BTreeMap<(usize, usize), f64>,
}

impl CooccurrencePrior {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn partners_of(&self, trigger: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pair_boost
            .range((trigger, 0)..=(trigger, usize::MAX))
            .map(|(&(_, p), &b)| (p, b))
    }
}

#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    vocab: Vocabulary,
    prototypes: Matrix,
    background: Vec<f64>,
    prior: CooccurrencePrior,
}

fn unit_sphere<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(&config.objects)?;
        let mut rng = rng_for(config.prototype_seed, "world/prototypes");
        let mut prototypes = Matrix::zeros(config.objects.len(), config.patch_dim);
        for c in 0..config.objects.len() {
            let v = unit_sphere(config.patch_dim, &mut rng);
            prototypes.row_mut(c).copy_from_slice(&v);
        }
        let background = unit_sphere(config.patch_dim, &mut rng);
        let index: HashMap<&str, usize> = config
            .objects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut prior = CooccurrencePrior::default();
        for p in &config.planted {
            let (Some(&t), Some(&q)) = (index.get(p.trigger.as_str()), index.get(p.partner.as_str())) else {
                return Err(MesaError::config(format!(
                    "planted pair {} -> {} names an unknown object",
                    p.trigger, p.partner
                )));
            };
            prior.pair_boost.insert((t, q), p.boost);
        }
        Ok(Self {
            config,
            vocab,
            prototypes,
            background,
            prior,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prior(&self) -> &CooccurrencePrior {
        &self.prior
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Patch value standing for "no visual evidence" (an empty cell, noise-free).
    pub fn null_prototype(&self) -> &[f64] {
        &self.background
    }

    /// The fixed caption prompt: `<bos> describe a`.
    pub fn prompt(&self) -> Vec<TokenId> {
        vec![self.vocab.bos(), self.vocab.describe(), self.vocab.article()]
    }

    /// Planted partner classes (the objects that get hallucinated).
    pub fn planted_partners(&self) -> BTreeSet<usize> {
        self.prior.pair_boost.keys().map(|&(_, p)| p).collect()
    }

    /// Sidecar content: everything that pins the token space and prototypes.
    pub fn sidecar(&self) -> WorldSidecar {
        WorldSidecar {
            config: self.config.clone(),
            vocabulary: self.vocab.tokens.clone(),
            prototypes: self.prototypes.rows_iter().map(<[f64]>::to_vec).collect(),
            background: self.background.clone(),
        }
    }

    pub fn content_hash(&self) -> Hash32 {
        let json = serde_json::to_vec(&self.sidecar()).expect("sidecar serializes");
        Hash32::of(&json)
    }

    // -- operations -------------------------------------------------------

    /// Samples a scene deterministically from `seed`.
    pub fn generate_scene(&self, seed: u64) -> Scene {
        let mut rng = rng_for(seed, "scene");
        let cfg = &self.config;
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut weights = cfg.sampling_distribution();
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let total: f64 = weights.iter().sum();
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            weights[pick] = 0.0;
            objects.push(pick);
        }
        let mut cells: Vec<usize> = (0..cfg.num_cells()).collect();
        // Partial Fisher-Yates: first `count` cells.
        for i in 0..count {
            let j = rng.gen_range(i..cells.len());
            cells.swap(i, j);
        }
        cells.truncate(count);
        Scene { seed, objects, cells }
    }

    /// Renders a scene into patch features.
    pub fn render(&self, scene: &Scene, noise_seed: u64) -> PatchGrid {
        self.render_with_noise(scene, noise_seed, self.config.render_noise)
    }

    pub fn render_with_noise(&self, scene: &Scene, noise_seed: u64, sigma: f64) -> PatchGrid {
        let cfg = &self.config;
        let mut data = Matrix::zeros(cfg.num_cells(), cfg.patch_dim);
        for cell in 0..cfg.num_cells() {
            data.row_mut(cell).copy_from_slice(&self.background);
        }
        for (&obj, &cell) in scene.objects.iter().zip(&scene.cells) {
            data.row_mut(cell).copy_from_slice(self.prototype(obj));
        }
        if sigma > 0.0 {
            let mut rng = rng_for(noise_seed, "render");
            for v in data.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        PatchGrid {
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            patches: data,
            provenance: Provenance {
                scene_seed: Some(scene.seed),
                tag: "clean".into(),
            },
        }
    }

    /// Template caption (without the `<bos> describe a` prompt, with the final period).
    pub fn generate_caption(&self, scene: &Scene, prior: &CooccurrencePrior, seed: u64) -> Vec<TokenId> {
        let mut rng = rng_for(seed, "caption");
        let v = &self.vocab;
        let mut order: Vec<(usize, usize)> = scene.cells.iter().copied().zip(scene.objects.iter().copied()).collect();
        order.sort_unstable();
        let present: BTreeSet<usize> = scene.objects.iter().copied().collect();
        let mut mentioned = BTreeSet::new();
        let mut out = Vec::new();
        let mention = |obj: usize, out: &mut Vec<TokenId>| {
            if !out.is_empty() {
                out.push(v.conjunction());
                out.push(v.article());
            }
            out.push(v.object_token(obj));
        };
        for &(_, obj) in &order {
            if mentioned.insert(obj) {
                mention(obj, &mut out);
            }
            for (partner, boost) in prior.partners_of(obj) {
                let u: f64 = rng.gen();
                if u < boost && !present.contains(&partner) && mentioned.insert(partner) {
                    mention(partner, &mut out);
                }
            }
        }
        out.push(v.period());
        out
    }
}

/// Serialized form of a [`World`]; its hash pins the vocabulary and prototypes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldSidecar {
    pub config: WorldConfig,
    pub vocabulary: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Scene and patch grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Object classes, distinct.
    pub objects: Vec<usize>,
    /// Grid cell (row-major index) of each object, distinct.
    pub cells: Vec<usize>,
}

impl Scene {
    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() != self.cells.len() {
            return Err(MesaError::input(
                "scene must have one cell per object and at least one object",
            ));
        }
        let objs: BTreeSet<_> = self.objects.iter().collect();
        let cells: BTreeSet<_> = self.cells.iter().collect();
        if objs.len() != self.objects.len() || cells.len() != self.cells.len() {
            return Err(MesaError::input("scene objects and cells must be distinct"));
        }
        if self.cells.iter().any(|&c| c >= cfg.num_cells()) || self.objects.iter().any(|&o| o >= cfg.objects.len()) {
            return Err(MesaError::input("scene references a cell or class out of range"));
        }
        Ok(())
    }

    pub fn contains(&self, class: usize) -> bool {
        self.objects.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_seed: Option<u64>,
    pub tag: String,
}

/// `H × W` patch features, one row per cell in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patches: Matrix,
    pub provenance: Provenance,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        self.patches.row(row * self.grid_w + col)
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.provenance.tag = tag.into();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.patches.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// One captioned sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    pub scene_seed: u64,
    pub objects: Vec<usize>,
    pub cells: Vec<usize>,
    pub render_seed: u64,
    pub caption_seed: u64,
    pub caption: Vec<TokenId>,
}

impl CorpusRecord {
    pub fn scene(&self) -> Scene {
        Scene {
            seed: self.scene_seed,
            objects: self.objects.clone(),
            cells: self.cells.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub world_hash: Hash32,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    /// `n` samples whose seeds derive from `(seed, split, index)`.
    pub fn generate(world: &World, n: usize, seed: u64, split: &str) -> Self {
        let records = (0..n)
            .map(|i| {
                let base = crate::artifact::split_seed(seed, &format!("{split}/{i}"));
                let scene_seed = crate::artifact::split_seed(base, "scene");
                let render_seed = crate::artifact::split_seed(base, "render");
                let caption_seed = crate::artifact::split_seed(base, "caption");
                let scene = world.generate_scene(scene_seed);
                let caption = world.generate_caption(&scene, world.prior(), caption_seed);
                CorpusRecord {
                    id: i as u64,
                    scene_seed,
                    objects: scene.objects,
                    cells: scene.cells,
                    render_seed,
                    caption_seed,
                    caption,
                }
            })
            .collect();
        Self {
            world_hash: world.content_hash(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Line-delimited JSON; the first line is a header naming the world hash.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&serde_json::json!({ "world_hash": self.world_hash })).expect("json");
        out.push(b'\n');
        for r in &self.records {
            out.extend(serde_json::to_vec(r).expect("json"));
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(bytes: &[u8], origin: &Path) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| MesaError::format(origin, e.to_string()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| MesaError::format(origin, "empty corpus file"))?,
        )?;
        let world_hash = header
            .get("world_hash")
            .and_then(|v| v.as_str())
            .and_then(Hash32::from_hex)
            .ok_or_else(|| MesaError::format(origin, "missing world_hash header"))?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<CorpusRecord>, _>>()?;
        Ok(Self { world_hash, records })
    }

    pub fn save(&self, path: &Path) -> Result<Hash32> {
        let bytes = self.to_jsonl();
        atomic_write(path, &bytes)?;
        Ok(Hash32::of(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&read_file(path)?, path)
    }

    pub fn content_hash(&self) -> Hash32 {
        Hash32::of(&self.to_jsonl())
    }
}

pub fn save_world(world: &World, path: &Path) -> Result<Hash32> {
    let bytes = serde_json::to_vec_pretty(&world.sidecar())?;
    atomic_write(path, &bytes)?;
    Ok(world.content_hash())
}

/// Rebuilds a world from its sidecar and checks that the stored prototypes
/// match what the config regenerates.
pub fn load_world(path: &Path) -> Result<World> {
    let sidecar: WorldSidecar = serde_json::from_slice(&read_file(path)?)?;
    let world = World::new(sidecar.config.clone())?;
    if world.sidecar() != sidecar {
        return Err(MesaError::format(
            path,
            "sidecar prototypes/vocabulary disagree with its config",
        ));
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            objects: ["cup", "table", "chair", "dog"].iter().map(|s| s.to_string()).collect(),
            object_weights: vec![],
            min_objects: 2,
            max_objects: 2,
            planted: vec![],
            ..WorldConfig::default()
        }
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let w = World::new(small_config()).unwrap();
        let a = w.generate_scene(7);
        assert_eq!(a, w.generate_scene(7));
        assert_eq!(a.objects.len(), 2);
        a.validate(w.config()).unwrap();
    }

    #[test]
    fn count_range_one_gives_single_object() {
        let mut cfg = small_config();
        cfg.min_objects = 1;
        cfg.max_objects = 1;
        let w = World::new(cfg).unwrap();
        for s in 0..50 {
            assert_eq!(w.generate_scene(s).objects.len(), 1);
        }
    }

    #[test]
    fn empty_universe_is_a_config_error() {
        let cfg = WorldConfig {
            objects: vec![],
            object_weights: vec![],
            planted: vec![],
            ..WorldConfig::default()
        };
        assert!(matches!(World::new(cfg), Err(MesaError::Config(_))));
    }

    #[test]
    fn zero_noise_render_is_the_prototype() {
        let mut cfg = small_config();
        cfg.render_noise = 0.0;
        let w = World::new(cfg).unwrap();
        let s = w.generate_scene(3);
        let g = w.render(&s, 99);
        for (&o, &c) in s.objects.iter().zip(&s.cells) {
            assert_eq!(g.patches.row(c), w.prototype(o));
        }
        assert_eq!(g, w.render(&s, 99));
    }

    #[test]
    fn captions_without_prior_only_mention_scene_objects() {
        let w = World::new(small_config()).unwrap();
        for seed in 0..100 {
            let s = w.generate_scene(seed);
            let cap = w.generate_caption(&s, &CooccurrencePrior::empty(), seed);
            let mentioned: BTreeSet<usize> = cap.iter().filter_map(|&t| w.vocab().object_class(t)).collect();
            let present: BTreeSet<usize> = s.objects.iter().copied().collect();
            assert_eq!(mentioned, present);
            assert_eq!(*cap.last().unwrap(), w.vocab().period());
        }
    }

    #[test]
    fn forced_boost_always_mentions_partner() {
        let w = World::new(small_config()).unwrap();
        let mut prior = CooccurrencePrior::empty();
        prior.pair_boost.insert((1, 2), 1.0); // table -> chair
        let scene = Scene {
            seed: 0,
            objects: vec![1],
            cells: vec![5],
        };
        let cap = w.generate_caption(&scene, &prior, 1);
        assert_eq!(w.vocab().decode(&cap), "table and a chair .");
    }

    #[test]
    fn vocabulary_ids_are_dense_and_disjoint() {
        let w = World::new(WorldConfig::default()).unwrap();
        let v = w.vocab();
        assert!(v.len() >= 50);
        let specials = [v.bos(), v.eos(), v.pad()];
        assert_eq!(specials.iter().collect::<BTreeSet<_>>().len(), 3);
        for id in v.object_token_ids() {
            assert!(!specials.contains(&id));
            assert_eq!(v.object_token(v.object_class(id).unwrap()), id);
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let w = World::new(small_config()).unwrap();
        let c = Corpus::generate(&w, 5, 1, "train");
        let back = Corpus::from_jsonl(&c.to_jsonl(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }
}
