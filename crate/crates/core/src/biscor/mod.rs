//! Swap-benchmark construction from CLEVR scene graphs.
//!
//! For each scene: pick two objects (or two same-looking groups for
//! [`SwapCategory::Quantity`]), caption them from a template, then build the
//! hard negative by exchanging the target attribute (or the group counts) in
//! both the caption and a copy of the scene. The negative scene is handed to
//! an external renderer; nothing here draws pixels.

mod scene;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{InstanceAnnotation, RetrievalInstance};
use crate::segment::{AnnotatedPhrase, SegmentAnnotation};

pub use scene::{
    derive_relationships, load_clevr_scenes, parse_clevr_scenes, scenes_to_json, synthetic_clevr_scenes, ClevrObject,
    Color, Directions, Material, Relation, Relationships, SceneGraph, Shape, Size, SourceSplit, RELATION_EPS,
};

#[derive(Debug, Error)]
pub enum BiscorError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scene file parse error{}: {message}", index.map(|i| format!(" in scene #{i}")).unwrap_or_default())]
    Parse { index: Option<usize>, message: String },
    #[error("scene {scene} is inconsistent: {message}")]
    Consistency { scene: String, message: String },
    #[error("could not place a new object in scene {scene} after {attempts} attempts")]
    Placement { scene: String, attempts: usize },
    #[error("requested {requested} instances but only {achievable} valid scenes are available")]
    Exhausted { requested: usize, achievable: usize },
    #[error("scenes come from more than one CLEVR split")]
    MixedSplits,
    #[error("instance count must be at least 1")]
    ZeroCount,
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapCategory {
    Color,
    Size,
    Material,
    Quantity,
}

impl SwapCategory {
    pub const ALL: [SwapCategory; 4] = [SwapCategory::Color, SwapCategory::Size, SwapCategory::Material, SwapCategory::Quantity];

    pub fn name(self) -> &'static str {
        match self {
            SwapCategory::Color => "color",
            SwapCategory::Size => "size",
            SwapCategory::Material => "material",
            SwapCategory::Quantity => "quantity",
        }
    }

    fn differs(self, a: &ClevrObject, b: &ClevrObject) -> bool {
        match self {
            SwapCategory::Color => a.color != b.color,
            SwapCategory::Size => a.size != b.size,
            SwapCategory::Material => a.material != b.material,
            SwapCategory::Quantity => false,
        }
    }

    fn swap(self, a: &mut ClevrObject, b: &mut ClevrObject) {
        match self {
            SwapCategory::Color => std::mem::swap(&mut a.color, &mut b.color),
            SwapCategory::Size => std::mem::swap(&mut a.size, &mut b.size),
            SwapCategory::Material => std::mem::swap(&mut a.material, &mut b.material),
            SwapCategory::Quantity => {}
        }
    }
}

impl fmt::Display for SwapCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SwapCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SwapCategory::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category {s:?} (expected color, size, material or quantity)"))
    }
}

/// Benchmark split. Dev is built from CLEVR train scenes, Test from val.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchSplit {
    Dev,
    Test,
}

impl BenchSplit {
    pub fn from_source(source: SourceSplit) -> Self {
        match source {
            SourceSplit::Train => BenchSplit::Dev,
            SourceSplit::Val => BenchSplit::Test,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchSplit::Dev => "dev",
            BenchSplit::Test => "test",
        }
    }
}

/// Which attributes the objects of a Quantity group must share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSignature {
    ColorShape,
    Shape,
}

impl FromStr for GroupSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "color_shape" | "color-shape" => Ok(GroupSignature::ColorShape),
            "shape" => Ok(GroupSignature::Shape),
            _ => Err(format!("unknown group signature {s:?} (expected color_shape or shape)")),
        }
    }
}

/// All objects in a scene that share a shape and, when `color` is set, a
/// color.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    pub shape: Shape,
    pub count: usize,
    pub members: Vec<usize>,
}

impl GroupDescriptor {
    pub fn matches(&self, o: &ClevrObject) -> bool {
        o.shape == self.shape && self.color.is_none_or(|c| c == o.color)
    }

    fn label(&self) -> String {
        match self.color {
            Some(c) => format!("{c} {}s", self.shape),
            None => format!("{}s", self.shape),
        }
    }

    /// The same group as found in `scene`.
    pub fn regroup(&self, scene: &SceneGraph) -> GroupDescriptor {
        let members: Vec<usize> = (0..scene.objects.len()).filter(|&i| self.matches(&scene.objects[i])).collect();
        GroupDescriptor { color: self.color, shape: self.shape, count: members.len(), members }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSelection {
    /// Attribute swap between two objects; `first` stands in `relation` to
    /// `second`.
    Pair { category: SwapCategory, first: usize, second: usize, relation: Relation },
    Groups { first: GroupDescriptor, second: GroupDescriptor },
}

impl ObjectSelection {
    pub fn category(&self) -> SwapCategory {
        match self {
            ObjectSelection::Pair { category, .. } => *category,
            ObjectSelection::Groups { .. } => SwapCategory::Quantity,
        }
    }
}

pub const GROUP_COUNTS: std::ops::RangeInclusive<usize> = 2..=5;

/// Caption wording and Quantity grouping. Every field can be replaced from a
/// JSON file; missing fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    /// Placeholders: `{size} {color} {material} {shape}`.
    pub object: String,
    /// Placeholders: `{first} {relation} {second}`.
    pub pair: String,
    /// Placeholders: `{count} {color} {shape}`.
    pub group: String,
    /// Group without a shared color. Placeholders: `{count} {shape}`.
    pub group_shape: String,
    /// Placeholders: `{first} {second}`.
    pub quantity: String,
    pub relations: BTreeMap<Relation, String>,
    /// Indexed by count.
    pub numbers: Vec<String>,
    /// Tried in order; the first signature that gives a scene any Quantity
    /// candidate is used for that scene.
    pub quantity_groups: Vec<GroupSignature>,
}

impl Default for Templates {
    fn default() -> Self {
        let relations = [
            (Relation::Left, "left of"),
            (Relation::Right, "right of"),
            (Relation::Front, "in front of"),
            (Relation::Behind, "behind"),
        ];
        Self {
            object: "{size} {color} {material} {shape}".into(),
            pair: "A {first} {relation} a {second}".into(),
            group: "{count} {color} {shape}s".into(),
            group_shape: "{count} {shape}s".into(),
            quantity: "There are {first} and {second}".into(),
            relations: relations.into_iter().map(|(r, w)| (r, w.to_string())).collect(),
            numbers: ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]
                .map(String::from)
                .to_vec(),
            quantity_groups: vec![GroupSignature::ColorShape, GroupSignature::Shape],
        }
    }
}

impl Templates {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BiscorError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|source| BiscorError::Io { path: path.display().to_string(), source })?;
        let t: Templates = serde_json::from_str(&text).map_err(|e| BiscorError::Template(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    /// Renders each template once so unknown placeholders surface early.
    pub fn check(&self) -> Result<(), BiscorError> {
        for r in Relation::ALL {
            self.relation(*r)?;
        }
        for n in GROUP_COUNTS {
            self.number(n)?;
        }
        let obj = self.render_object(Size::Large, Color::Red, Material::Metal, Shape::Cube)?;
        fill(&self.pair, &[("first", &obj), ("relation", "left of"), ("second", &obj)])?;
        let g = self.render_group(2, Some(Color::Red), Shape::Cube)?;
        fill(&self.quantity, &[("first", &g), ("second", &g)])?;
        self.render_group(2, None, Shape::Cube)?;
        Ok(())
    }

    fn relation(&self, r: Relation) -> Result<&str, BiscorError> {
        self.relations.get(&r).map(String::as_str).ok_or_else(|| BiscorError::Template(format!("no wording for relation {r}")))
    }

    fn number(&self, n: usize) -> Result<&str, BiscorError> {
        self.numbers.get(n).map(String::as_str).ok_or_else(|| BiscorError::Template(format!("no number word for {n}")))
    }

    fn render_object(&self, size: Size, color: Color, material: Material, shape: Shape) -> Result<String, BiscorError> {
        fill(
            &self.object,
            &[("size", size.word()), ("color", color.word()), ("material", material.word()), ("shape", shape.word())],
        )
    }

    fn render_group(&self, count: usize, color: Option<Color>, shape: Shape) -> Result<String, BiscorError> {
        let count = self.number(count)?;
        match color {
            Some(c) => fill(&self.group, &[("count", count), ("color", c.word()), ("shape", shape.word())]),
            None => fill(&self.group_shape, &[("count", count), ("shape", shape.word())]),
        }
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> Result<String, BiscorError> {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    if let Some(start) = out.find('{') {
        let rest = &out[start..];
        let name = rest.find('}').map_or(rest, |e| &rest[..=e]);
        return Err(BiscorError::Template(format!("unknown placeholder {name} in {template:?}")));
    }
    Ok(out)
}

// The phrase word that names the object, e.g. "cube" or "cubes".
fn object_word(phrase: &str, shape: Shape) -> String {
    phrase
        .split_whitespace()
        .find(|w| w.starts_with(shape.word()))
        .unwrap_or(shape.word())
        .to_string()
}

/// First relation (left, right, front, behind) that object `a` has to `b`.
pub fn relation_between(scene: &SceneGraph, a: usize, b: usize) -> Option<Relation> {
    Relation::ALL.iter().copied().find(|&r| scene.relationships.holds(a, r, b))
}

/// Objects grouped by `signature`, in sorted signature order.
pub fn groups(scene: &SceneGraph, signature: GroupSignature) -> Vec<GroupDescriptor> {
    let mut map: BTreeMap<(Option<Color>, Shape), Vec<usize>> = BTreeMap::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let color = (signature == GroupSignature::ColorShape).then_some(o.color);
        map.entry((color, o.shape)).or_default().push(i);
    }
    map.into_iter()
        .map(|((color, shape), members)| GroupDescriptor { color, shape, count: members.len(), members })
        .collect()
}

/// Every valid selection for `category` under the default grouping rules,
/// in a fixed order. See [`candidates_with`].
pub fn candidates(scene: &SceneGraph, category: SwapCategory) -> Vec<ObjectSelection> {
    candidates_with(scene, category, &Templates::default().quantity_groups)
}

/// Attribute pairs are unordered (`first < second`), differ in the target
/// attribute and in shape, and have a recorded spatial relation. Quantity
/// candidates are two groups with distinct counts in 2..=5, formed under the
/// first signature in `signatures` that yields any.
pub fn candidates_with(scene: &SceneGraph, category: SwapCategory, signatures: &[GroupSignature]) -> Vec<ObjectSelection> {
    let objs = &scene.objects;
    if category == SwapCategory::Quantity {
        for &sig in signatures {
            let gs: Vec<GroupDescriptor> =
                groups(scene, sig).into_iter().filter(|g| GROUP_COUNTS.contains(&g.count)).collect();
            let mut out = Vec::new();
            for (a, g) in gs.iter().enumerate() {
                for h in &gs[a + 1..] {
                    if g.count != h.count {
                        out.push(ObjectSelection::Groups { first: g.clone(), second: h.clone() });
                    }
                }
            }
            if !out.is_empty() {
                return out;
            }
        }
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            if !category.differs(&objs[i], &objs[j]) || objs[i].shape == objs[j].shape {
                continue;
            }
            if let Some(relation) = relation_between(scene, i, j) {
                out.push(ObjectSelection::Pair { category, first: i, second: j, relation });
            }
        }
    }
    out
}

/// Uniform draw over [`candidates`]; `None` when there are none.
pub fn select_objects(scene: &SceneGraph, category: SwapCategory, rng: &mut impl Rng) -> Option<ObjectSelection> {
    select_objects_with(scene, category, &Templates::default().quantity_groups, rng)
}

pub fn select_objects_with(
    scene: &SceneGraph,
    category: SwapCategory,
    signatures: &[GroupSignature],
    rng: &mut impl Rng,
) -> Option<ObjectSelection> {
    let mut c = candidates_with(scene, category, signatures);
    if c.is_empty() {
        return None;
    }
    let k = rng.random_range(0..c.len());
    Some(c.swap_remove(k))
}

fn inconsistent(scene: &SceneGraph, message: impl Into<String>) -> BiscorError {
    BiscorError::Consistency { scene: scene.scene_id().to_string(), message: message.into() }
}

/// Caption plus the phrase annotation that structured segmentation consumes.
pub fn describe(
    selection: &ObjectSelection,
    scene: &SceneGraph,
    templates: &Templates,
) -> Result<(String, SegmentAnnotation), BiscorError> {
    match selection {
        ObjectSelection::Pair { first, second, relation, .. } => {
            let (a, b) = match (scene.objects.get(*first), scene.objects.get(*second)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(inconsistent(scene, format!("objects {first}/{second} out of range"))),
            };
            if !scene.relationships.holds(*first, *relation, *second) {
                return Err(inconsistent(scene, format!("object {first} is not {relation} of object {second}")));
            }
            let pa = templates.render_object(a.size, a.color, a.material, a.shape)?;
            let pb = templates.render_object(b.size, b.color, b.material, b.shape)?;
            let rel = templates.relation(*relation)?;
            let caption = fill(&templates.pair, &[("first", &pa), ("relation", rel), ("second", &pb)])?;
            let annotation = SegmentAnnotation {
                phrases: vec![
                    AnnotatedPhrase { object: object_word(&pa, a.shape), phrase: pa },
                    AnnotatedPhrase { object: object_word(&pb, b.shape), phrase: pb },
                ],
                relation: Some(rel.to_string()),
            };
            Ok((caption, annotation))
        }
        ObjectSelection::Groups { first, second } => {
            for g in [first, second] {
                if g.regroup(scene).count != g.count {
                    return Err(inconsistent(scene, format!("scene has no group of {} {}", g.count, g.label())));
                }
            }
            let pa = templates.render_group(first.count, first.color, first.shape)?;
            let pb = templates.render_group(second.count, second.color, second.shape)?;
            let caption = fill(&templates.quantity, &[("first", &pa), ("second", &pb)])?;
            let annotation = SegmentAnnotation {
                phrases: vec![
                    AnnotatedPhrase { object: object_word(&pa, first.shape), phrase: pa },
                    AnnotatedPhrase { object: object_word(&pb, second.shape), phrase: pb },
                ],
                relation: None,
            };
            Ok((caption, annotation))
        }
    }
}

pub fn generate_caption(selection: &ObjectSelection, scene: &SceneGraph, templates: &Templates) -> Result<String, BiscorError> {
    describe(selection, scene, templates).map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapNegative {
    pub caption: String,
    pub annotation: SegmentAnnotation,
    pub scene: SceneGraph,
    /// The selection as it applies to the negative scene.
    pub selection: ObjectSelection,
}

pub const PLACEMENT_ATTEMPTS: usize = 200;
const JITTER_ATTEMPTS: usize = 100;
const JITTER_REACH: f64 = 1.5;

/// Builds the hard negative. Attribute swaps exchange the attribute values
/// of the two objects. Quantity swaps exchange the counts: members are
/// removed uniformly from the larger group and the smaller group gains
/// copies of its members placed at free positions, first near the copied
/// object and then anywhere on the ground plane.
pub fn make_swap_negative(
    selection: &ObjectSelection,
    scene: &SceneGraph,
    templates: &Templates,
    rng: &mut impl Rng,
) -> Result<SwapNegative, BiscorError> {
    match selection {
        ObjectSelection::Pair { category, first, second, .. } => {
            let mut neg = scene.clone();
            let (lo, hi) = (first.min(second), first.max(second));
            if lo == hi || *hi >= neg.objects.len() {
                return Err(inconsistent(scene, format!("bad object pair {first}/{second}")));
            }
            let (head, tail) = neg.objects.split_at_mut(*hi);
            category.swap(&mut head[*lo], &mut tail[0]);
            let (caption, annotation) = describe(selection, &neg, templates)?;
            Ok(SwapNegative { caption, annotation, scene: neg, selection: selection.clone() })
        }
        ObjectSelection::Groups { first, second } => {
            describe(selection, scene, templates)?;
            let (big, small) = if first.count > second.count { (first, second) } else { (second, first) };
            let diff = big.count - small.count;
            let removed: HashSet<usize> = sample(rng, big.members.len(), diff).into_iter().map(|k| big.members[k]).collect();
            let mut neg = scene.clone();
            neg.objects = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, o)| o.clone())
                .collect();
            let dirs = scene.directions.clone().ok_or_else(|| inconsistent(scene, "scene has no camera directions"))?;
            for _ in 0..diff {
                let template = &scene.objects[small.members[rng.random_range(0..small.members.len())]];
                let obj = place_copy(template, &neg.objects, &dirs, rng)
                    .ok_or_else(|| BiscorError::Placement { scene: scene.scene_id().to_string(), attempts: PLACEMENT_ATTEMPTS })?;
                neg.objects.push(obj);
            }
            neg.recompute_relationships()?;
            let neg_selection = ObjectSelection::Groups { first: first.regroup(&neg), second: second.regroup(&neg) };
            let (caption, annotation) = describe(&neg_selection, &neg, templates)?;
            Ok(SwapNegative { caption, annotation, scene: neg, selection: neg_selection })
        }
    }
}

fn place_copy(template: &ClevrObject, others: &[ClevrObject], dirs: &Directions, rng: &mut impl Rng) -> Option<ClevrObject> {
    let size = template.size;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let (x, y) = if attempt < JITTER_ATTEMPTS {
            let min = 2.0 * size.radius() + scene::MIN_GAP;
            let r = rng.random_range(min..min + JITTER_REACH);
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            (template.coords[0] + r * t.cos(), template.coords[1] + r * t.sin())
        } else {
            let e = scene::PLANE_HALF_EXTENT;
            (rng.random_range(-e..e), rng.random_range(-e..e))
        };
        if scene::placement_ok(x, y, size, others, dirs) {
            let mut obj = template.clone();
            obj.coords = [x, y, template.coords[2]];
            // projected image coordinates are stale once the object moves
            obj.extra.remove("pixel_coords");
            return Some(obj);
        }
    }
    None
}

/// One generated benchmark instance with everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub split: BenchSplit,
    pub category: SwapCategory,
    pub scene_id: String,
    pub caption: String,
    pub negative_caption: String,
    pub annotation: InstanceAnnotation,
    pub selection: ObjectSelection,
    pub negative_selection: ObjectSelection,
    pub scene: SceneGraph,
    pub negative_scene: SceneGraph,
}

impl InstanceRecord {
    pub fn positive_image(&self) -> String {
        format!("{}_pos.png", self.id)
    }

    pub fn negative_image(&self) -> String {
        format!("{}_neg.png", self.id)
    }

    /// The evaluator's view of this record; image paths are relative to
    /// the render output directory.
    pub fn to_retrieval_instance(&self) -> RetrievalInstance {
        RetrievalInstance {
            id: self.id.clone(),
            category: self.category.name().to_string(),
            image: self.positive_image(),
            caption: self.caption.clone(),
            negative_image: Some(self.negative_image()),
            negative_caption: self.negative_caption.clone(),
            annotation: Some(self.annotation.clone()),
        }
    }
}

/// Deterministic per-purpose generator: ChaCha8 seeded from
/// SHA-256(seed, category, label).
pub fn derived_rng(seed: u64, category: SwapCategory, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(category.name().as_bytes());
    h.update([0]);
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn build_instance(
    scene: &SceneGraph,
    category: SwapCategory,
    templates: &Templates,
    rng: &mut impl Rng,
) -> Result<Option<(ObjectSelection, String, SegmentAnnotation, SwapNegative)>, BiscorError> {
    let Some(selection) = select_objects_with(scene, category, &templates.quantity_groups, rng) else {
        return Ok(None);
    };
    let (caption, annotation) = describe(&selection, scene, templates)?;
    let negative = make_swap_negative(&selection, scene, templates, rng)?;
    Ok(Some((selection, caption, annotation, negative)))
}

const CHUNK: usize = 512;

/// Builds exactly `n` records from scenes of one CLEVR split.
///
/// Scenes are deduplicated by id, sorted, then visited in a seeded shuffled
/// order; each scene gets its own generator derived from the seed and its id,
/// so the result does not depend on thread scheduling. Scenes whose negative
/// cannot be built (no candidate, no free placement) are skipped.
pub fn build_split(
    scenes: &[SceneGraph],
    category: SwapCategory,
    n: usize,
    seed: u64,
    templates: &Templates,
) -> Result<Vec<InstanceRecord>, BiscorError> {
    if n == 0 {
        return Err(BiscorError::ZeroCount);
    }
    let Some(first) = scenes.first() else {
        return Err(BiscorError::Exhausted { requested: n, achievable: 0 });
    };
    if scenes.iter().any(|s| s.split != first.split) {
        return Err(BiscorError::MixedSplits);
    }
    let split = BenchSplit::from_source(first.split);

    let mut order: Vec<&SceneGraph> = scenes.iter().collect();
    order.sort_by(|a, b| a.scene_id().cmp(b.scene_id()));
    order.dedup_by(|a, b| a.scene_id() == b.scene_id());
    let mut order_rng = derived_rng(seed, category, "order");
    for i in (1..order.len()).rev() {
        order.swap(i, order_rng.random_range(0..=i));
    }

    let mut records = Vec::with_capacity(n);
    let mut skipped = 0usize;
    for chunk in order.chunks(CHUNK) {
        let built: Vec<_> = chunk
            .par_iter()
            .map(|s| {
                let mut rng = derived_rng(seed, category, s.scene_id());
                (s, build_instance(s, category, templates, &mut rng))
            })
            .collect();
        for (s, result) in built {
            if records.len() == n {
                break;
            }
            let (selection, caption, annotation, negative) = match result {
                Ok(Some(parts)) => parts,
                Ok(None) => continue,
                Err(e) => {
                    log::debug!("skipping scene {}: {e}", s.scene_id());
                    skipped += 1;
                    continue;
                }
            };
            records.push(InstanceRecord {
                id: format!("{}-{}-{:05}", category.name(), split.name(), records.len()),
                split,
                category,
                scene_id: s.scene_id().to_string(),
                caption,
                negative_caption: negative.caption,
                annotation: InstanceAnnotation { caption: annotation, negative_caption: negative.annotation },
                selection,
                negative_selection: negative.selection,
                scene: (*s).clone(),
                negative_scene: negative.scene,
            });
        }
        if records.len() == n {
            break;
        }
    }
    if skipped > 0 {
        log::info!("{category}: skipped {skipped} scenes whose negative could not be built");
    }
    if records.len() < n {
        return Err(BiscorError::Exhausted { requested: n, achievable: records.len() });
    }
    Ok(records)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BiscorError + '_ {
    move |source| BiscorError::Io { path: path.display().to_string(), source }
}

/// One JSON object per line, in record order.
pub fn write_records(path: impl AsRef<Path>, records: &[InstanceRecord]) -> Result<(), BiscorError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| BiscorError::Parse { index: None, message: e.to_string() })?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<InstanceRecord>, BiscorError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| BiscorError::Parse { index: Some(i), message: e.to_string() }))
        .collect()
}

/// A manifest row for the external renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderJob {
    pub id: String,
    pub positive_scene: PathBuf,
    pub negative_scene: PathBuf,
    pub positive_image: String,
    pub negative_image: String,
}

pub const RENDER_MANIFEST: &str = "render_jobs.jsonl";

/// Writes `scenes/<id>_pos.json`, `scenes/<id>_neg.json` (single-scene CLEVR
/// scenes files) and a `render_jobs.jsonl` manifest with paths relative to
/// `out_dir`.
pub fn emit_render_jobs(records: &[InstanceRecord], out_dir: impl AsRef<Path>) -> Result<Vec<RenderJob>, BiscorError> {
    let out_dir = out_dir.as_ref();
    let scene_dir = out_dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(io_err(&scene_dir))?;
    let mut jobs = Vec::with_capacity(records.len());
    let mut manifest = Vec::new();
    for r in records {
        let pos = PathBuf::from("scenes").join(format!("{}_pos.json", r.id));
        let neg = PathBuf::from("scenes").join(format!("{}_neg.json", r.id));
        for (rel, scene) in [(&pos, &r.scene), (&neg, &r.negative_scene)] {
            let path = out_dir.join(rel);
            let text = scenes_to_json(std::slice::from_ref(scene), scene.split.word())?;
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        let job = RenderJob {
            id: r.id.clone(),
            positive_scene: pos,
            negative_scene: neg,
            positive_image: r.positive_image(),
            negative_image: r.negative_image(),
        };
        serde_json::to_writer(&mut manifest, &job).map_err(|e| BiscorError::Parse { index: None, message: e.to_string() })?;
        manifest.push(b'\n');
        jobs.push(job);
    }
    let path = out_dir.join(RENDER_MANIFEST);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&manifest).map_err(io_err(&path))?;
    Ok(jobs)
}

/// Lowercased words with surrounding punctuation removed, sorted.
pub fn token_multiset(text: &str) -> Vec<String> {
    let mut t: Vec<String> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    t.sort();
    t
}

/// Differences between the two scenes beyond what the swap allows.
pub fn scene_diff_violations(record: &InstanceRecord) -> Vec<String> {
    let (a, b) = (&record.scene, &record.negative_scene);
    let mut v = Vec::new();
    if a.image_index != b.image_index || a.image_filename != b.image_filename || a.split != b.split {
        v.push("scene identity fields differ".into());
    }
    if a.extra != b.extra || a.directions != b.directions {
        v.push("scene-level fields differ".into());
    }
    match &record.selection {
        ObjectSelection::Pair { category, first, second, .. } => {
            if a.objects.len() != b.objects.len() {
                v.push("object count changed".into());
                return v;
            }
            if a.relationships != b.relationships {
                v.push("relationships changed".into());
            }
            for (k, (oa, ob)) in a.objects.iter().zip(&b.objects).enumerate() {
                if k == *first || k == *second {
                    continue;
                }
                if oa != ob {
                    v.push(format!("unselected object {k} changed"));
                }
            }
            if let (Some(_), Some(_)) = (a.objects.get(*first), a.objects.get(*second)) {
                let mut restored = b.objects.clone();
                let (lo, hi) = (*first.min(second), *first.max(second));
                let (head, tail) = restored.split_at_mut(hi);
                category.swap(&mut head[lo], &mut tail[0]);
                if restored[*first] != a.objects[*first] || restored[*second] != a.objects[*second] {
                    v.push("selected objects differ beyond the swapped attribute".into());
                }
                if !category.differs(&a.objects[*first], &b.objects[*first]) {
                    v.push("swapped attribute did not change".into());
                }
            }
        }
        ObjectSelection::Groups { first, second } => {
            let outside = |s: &SceneGraph| -> Vec<ClevrObject> {
                s.objects.iter().filter(|o| !first.matches(o) && !second.matches(o)).cloned().collect()
            };
            if outside(a) != outside(b) {
                v.push("objects outside the counted groups changed".into());
            }
            for (g, want) in [(first, second.count), (second, first.count)] {
                let members_a: Vec<&ClevrObject> = a.objects.iter().filter(|o| g.matches(o)).collect();
                let members_b: Vec<&ClevrObject> = b.objects.iter().filter(|o| g.matches(o)).collect();
                if members_b.len() != want {
                    v.push(format!("{}: expected {want} in negative, found {}", g.label(), members_b.len()));
                }
                if members_b.len() < members_a.len() {
                    // shrinking group: survivors must be untouched originals
                    if !members_b.iter().all(|o| members_a.contains(o)) {
                        v.push(format!("{}: a surviving member was modified", g.label()));
                    }
                } else {
                    // growing group: originals kept in order, additions look like a member
                    if members_b[..members_a.len()] != members_a[..] {
                        v.push(format!("{}: original members were modified", g.label()));
                    }
                    if !members_b[members_a.len()..].iter().all(|o| members_a.iter().any(|m| m.same_look(o))) {
                        v.push(format!("{}: an added object does not copy a member", g.label()));
                    }
                }
            }
            if let Err(e) = b.validate() {
                v.push(format!("negative scene invalid: {e}"));
            }
        }
    }
    v
}

/// Every invariant one record must satisfy on its own.
pub fn record_violations(record: &InstanceRecord) -> Vec<String> {
    let mut v = Vec::new();
    if record.caption == record.negative_caption {
        v.push("caption equals negative caption".into());
    }
    if token_multiset(&record.caption) != token_multiset(&record.negative_caption) {
        v.push("caption and negative caption have different tokens".into());
    }
    v.extend(scene_diff_violations(record));
    v
}

/// Scene ids shared between two record sets.
pub fn shared_scenes(a: &[InstanceRecord], b: &[InstanceRecord]) -> Vec<String> {
    let ids: HashSet<&str> = a.iter().map(|r| r.scene_id.as_str()).collect();
    let mut shared: Vec<String> = b.iter().filter(|r| ids.contains(r.scene_id.as_str())).map(|r| r.scene_id.clone()).collect();
    shared.sort();
    shared.dedup();
    shared
}

/// Scene ids used more than once within one record set.
pub fn reused_scenes(records: &[InstanceRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dup: Vec<String> = records.iter().filter(|r| !seen.insert(r.scene_id.as_str())).map(|r| r.scene_id.clone()).collect();
    dup.sort();
    dup.dedup();
    dup
}

#[cfg(test)]
mod tests {
    use serde_json::Map;

    use super::*;

    fn obj(shape: Shape, color: Color, size: Size, material: Material, x: f64, y: f64) -> ClevrObject {
        ClevrObject { shape, color, size, material, coords: [x, y, size.radius()], rotation: 0.0, extra: Map::new() }
    }

    fn scene(objects: Vec<ClevrObject>) -> SceneGraph {
        let dirs = Directions::standard();
        SceneGraph {
            image_index: 0,
            image_filename: "CLEVR_val_000000.png".into(),
            split: SourceSplit::Val,
            relationships: derive_relationships(&objects, &dirs),
            objects,
            directions: Some(dirs),
            extra: Map::new(),
        }
    }

    // The cube sits left of the sphere under the standard camera.
    fn cube_sphere() -> SceneGraph {
        scene(vec![
            obj(Shape::Cube, Color::Red, Size::Large, Material::Rubber, -1.5, -1.5),
            obj(Shape::Sphere, Color::Blue, Size::Small, Material::Metal, 1.5, 1.5),
        ])
    }

    #[test]
    fn single_candidate_pair() {
        let s = cube_sphere();
        assert!(s.relationships.holds(0, Relation::Left, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_objects(&s, SwapCategory::Color, &mut rng).unwrap();
        assert_eq!(sel, ObjectSelection::Pair { category: SwapCategory::Color, first: 0, second: 1, relation: Relation::Left });
        let t = Templates::default();
        assert_eq!(generate_caption(&sel, &s, &t).unwrap(), "A large red rubber cube left of a small blue metal sphere");
        let neg = make_swap_negative(&sel, &s, &t, &mut rng).unwrap();
        assert_eq!(neg.caption, "A large blue rubber cube left of a small red metal sphere");
        let back = make_swap_negative(&sel, &neg.scene, &t, &mut rng).unwrap();
        assert_eq!(back.caption, generate_caption(&sel, &s, &t).unwrap());
        assert_eq!(back.scene, s);
    }

    #[test]
    fn no_contrast_no_selection() {
        let mut s = cube_sphere();
        s.objects[1].color = Color::Red;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(select_objects(&s, SwapCategory::Color, &mut rng).is_none());
        assert!(select_objects(&s, SwapCategory::Size, &mut rng).is_some());
    }

    #[test]
    fn same_shape_pairs_excluded() {
        let mut s = cube_sphere();
        s.objects[1].shape = Shape::Cube;
        assert!(candidates(&s, SwapCategory::Color).is_empty());
    }

    #[test]
    fn missing_relation_is_an_error() {
        let s = cube_sphere();
        let sel = ObjectSelection::Pair { category: SwapCategory::Color, first: 0, second: 1, relation: Relation::Right };
        assert!(matches!(generate_caption(&sel, &s, &Templates::default()), Err(BiscorError::Consistency { .. })));
    }

    fn quantity_scene() -> SceneGraph {
        let mut objects = Vec::new();
        for k in 0..3 {
            objects.push(obj(Shape::Cube, Color::Red, Size::Small, Material::Rubber, -2.5 + 1.2 * k as f64, 2.5));
        }
        for k in 0..2 {
            objects.push(obj(Shape::Sphere, Color::Blue, Size::Small, Material::Metal, -2.5 + 1.2 * k as f64, -2.5));
        }
        scene(objects)
    }

    #[test]
    fn quantity_caption_and_negative() {
        let s = quantity_scene();
        let t = Templates::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sel = select_objects(&s, SwapCategory::Quantity, &mut rng).unwrap();
        assert_eq!(generate_caption(&sel, &s, &t).unwrap(), "There are three red cubes and two blue spheres");
        let neg = make_swap_negative(&sel, &s, &t, &mut rng).unwrap();
        assert_eq!(neg.caption, "There are two red cubes and three blue spheres");
        let counts: Vec<usize> = groups(&neg.scene, GroupSignature::ColorShape).iter().map(|g| g.count).collect();
        assert_eq!(counts, vec![2, 3]);
        neg.scene.validate().unwrap();
    }

    #[test]
    fn annotations_match_captions() {
        let s = cube_sphere();
        let sel = candidates(&s, SwapCategory::Material).remove(0);
        let (caption, ann) = describe(&sel, &s, &Templates::default()).unwrap();
        let segs = crate::segment::segment_structured(&ann, &caption, crate::segment::Granularity::CoarseGrained).unwrap();
        assert_eq!(
            segs.segments(),
            &[
                "large red rubber cube".to_string(),
                "small blue metal sphere".to_string(),
                "large red rubber cube left of a small blue metal sphere".to_string(),
                caption.clone(),
            ]
        );
    }

    #[test]
    fn templates_override_and_reject_unknown_placeholders() {
        let mut t = Templates::default();
        t.pair = "The {first} is {relation} the {second}".into();
        let s = cube_sphere();
        let sel = candidates(&s, SwapCategory::Color).remove(0);
        assert_eq!(generate_caption(&sel, &s, &t).unwrap(), "The large red rubber cube is left of the small blue metal sphere");
        t.pair = "A {first} {verb} a {second}".into();
        assert!(matches!(t.check(), Err(BiscorError::Template(_))));
    }

    #[test]
    fn category_names() {
        for c in SwapCategory::ALL {
            assert_eq!(c.name().parse::<SwapCategory>().unwrap(), c);
        }
        assert_eq!("Color".parse::<SwapCategory>().unwrap(), SwapCategory::Color);
        assert!("shape".parse::<SwapCategory>().is_err());
    }

    #[test]
    fn token_multiset_ignores_order_and_case() {
        assert_eq!(token_multiset("A red cube, a Blue ball"), token_multiset("a blue cube a red ball"));
    }
}
