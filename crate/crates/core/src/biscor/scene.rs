// CLEVR scene-graph schema. Unknown fields survive a load/save round trip
// through the flattened `extra` maps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::BiscorError;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $word)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.word() == s)
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name).to_lowercase()))
            }
        }
    };
}

word_enum!(Shape { Cube => "cube", Sphere => "sphere", Cylinder => "cylinder" });
word_enum!(Color {
    Gray => "gray",
    Red => "red",
    Blue => "blue",
    Green => "green",
    Brown => "brown",
    Purple => "purple",
    Cyan => "cyan",
    Yellow => "yellow",
});
word_enum!(Size { Small => "small", Large => "large" });
word_enum!(Material { Rubber => "rubber", Metal => "metal" });
word_enum!(Relation { Left => "left", Right => "right", Front => "front", Behind => "behind" });
word_enum!(SourceSplit { Train => "train", Val => "val" });

impl Size {
    /// Object radius in scene units, as used by the CLEVR generator.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 0.35,
            Size::Large => 0.7,
        }
    }
}

impl Relation {
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Front => Relation::Behind,
            Relation::Behind => Relation::Front,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClevrObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub material: Material,
    #[serde(rename = "3d_coords")]
    pub coords: [f64; 3],
    pub rotation: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ClevrObject {
    /// Same visual attributes, ignoring placement.
    pub fn same_look(&self, other: &ClevrObject) -> bool {
        self.shape == other.shape
            && self.color == other.color
            && self.size == other.size
            && self.material == other.material
    }
}

/// `left[i]` lists every object that is left of object `i`, and so on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Relationships {
    pub left: Vec<Vec<usize>>,
    pub right: Vec<Vec<usize>>,
    pub front: Vec<Vec<usize>>,
    pub behind: Vec<Vec<usize>>,
}

impl Relationships {
    pub fn list(&self, rel: Relation) -> &[Vec<usize>] {
        match rel {
            Relation::Left => &self.left,
            Relation::Right => &self.right,
            Relation::Front => &self.front,
            Relation::Behind => &self.behind,
        }
    }

    fn list_mut(&mut self, rel: Relation) -> &mut Vec<Vec<usize>> {
        match rel {
            Relation::Left => &mut self.left,
            Relation::Right => &mut self.right,
            Relation::Front => &mut self.front,
            Relation::Behind => &mut self.behind,
        }
    }

    /// Whether object `a` stands in `rel` to object `b`.
    pub fn holds(&self, a: usize, rel: Relation, b: usize) -> bool {
        self.list(rel).get(b).is_some_and(|l| l.contains(&a))
    }
}

/// Unit ground-plane directions in the camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    pub left: [f64; 3],
    pub right: [f64; 3],
    pub front: [f64; 3],
    pub behind: [f64; 3],
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Directions {
    pub fn get(&self, rel: Relation) -> [f64; 3] {
        match rel {
            Relation::Left => self.left,
            Relation::Right => self.right,
            Relation::Front => self.front,
            Relation::Behind => self.behind,
        }
    }

    /// Default CLEVR camera.
    pub fn standard() -> Self {
        let left = [-0.6563, -0.7545, 0.0];
        let behind = [-0.7545, 0.6563, 0.0];
        let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
        let mut extra = Map::new();
        extra.insert("above".into(), serde_json::json!([0.0, 0.0, 1.0]));
        extra.insert("below".into(), serde_json::json!([0.0, 0.0, -1.0]));
        Self { left, right: neg(left), front: neg(behind), behind, extra }
    }
}

/// Dot-product threshold CLEVR uses when it derives relationships.
pub const RELATION_EPS: f64 = 0.2;

/// One scene from a CLEVR scenes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_index: u64,
    pub image_filename: String,
    pub split: SourceSplit,
    pub objects: Vec<ClevrObject>,
    pub relationships: Relationships,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<Directions>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SceneGraph {
    /// The image file stem, e.g. `CLEVR_val_000123`.
    pub fn scene_id(&self) -> &str {
        self.image_filename.rsplit_once('.').map_or(&self.image_filename, |(stem, _)| stem)
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.objects.len();
        if n == 0 {
            return Err("scene has no objects".into());
        }
        for &rel in Relation::ALL {
            let lists = self.relationships.list(rel);
            if lists.len() != n {
                return Err(format!("{rel} has {} lists for {n} objects", lists.len()));
            }
            for (i, l) in lists.iter().enumerate() {
                if let Some(&j) = l.iter().find(|&&j| j >= n || j == i) {
                    return Err(format!("{rel}[{i}] references invalid object {j}"));
                }
            }
        }
        for (rel, inv) in [(Relation::Left, Relation::Right), (Relation::Front, Relation::Behind)] {
            for i in 0..n {
                for j in 0..n {
                    if self.relationships.holds(j, rel, i) != self.relationships.holds(i, inv, j) {
                        return Err(format!("{rel}/{inv} disagree on objects {i} and {j}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rederives relationships from object positions the way the CLEVR
    /// generator does.
    pub fn recompute_relationships(&mut self) -> Result<(), BiscorError> {
        let dirs = self.directions.clone().ok_or_else(|| BiscorError::Consistency {
            scene: self.scene_id().to_string(),
            message: "scene has no camera directions; cannot derive relationships".into(),
        })?;
        self.relationships = derive_relationships(&self.objects, &dirs);
        Ok(())
    }
}

pub fn derive_relationships(objects: &[ClevrObject], dirs: &Directions) -> Relationships {
    let mut out = Relationships::default();
    for &rel in Relation::ALL {
        let d = dirs.get(rel);
        let lists = out.list_mut(rel);
        for a in objects {
            let related = objects
                .iter()
                .enumerate()
                .filter(|(_, b)| !std::ptr::eq(*b, a))
                .filter(|(_, b)| (0..3).map(|k| (b.coords[k] - a.coords[k]) * d[k]).sum::<f64>() > RELATION_EPS)
                .map(|(j, _)| j)
                .collect();
            lists.push(related);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenesFile {
    #[serde(default)]
    info: Value,
    scenes: Vec<Value>,
}

/// Reads a CLEVR scenes JSON file (`{"info": ..., "scenes": [...]}`).
pub fn load_clevr_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneGraph>, BiscorError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| BiscorError::Io { path: path.display().to_string(), source })?;
    parse_clevr_scenes(&text)
}

pub fn parse_clevr_scenes(text: &str) -> Result<Vec<SceneGraph>, BiscorError> {
    let file: ScenesFile =
        serde_json::from_str(text).map_err(|e| BiscorError::Parse { index: None, message: e.to_string() })?;
    file.scenes
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let scene: SceneGraph =
                serde_json::from_value(v).map_err(|e| BiscorError::Parse { index: Some(i), message: e.to_string() })?;
            scene.validate().map_err(|message| BiscorError::Consistency {
                scene: format!("#{i} ({})", scene.scene_id()),
                message,
            })?;
            Ok(scene)
        })
        .collect()
}

/// Serializes scenes in the CLEVR scenes-file layout.
pub fn scenes_to_json(scenes: &[SceneGraph], split: &str) -> Result<String, BiscorError> {
    let file = serde_json::json!({
        "info": { "split": split, "version": "1.0" },
        "scenes": scenes,
    });
    serde_json::to_string_pretty(&file).map_err(|e| BiscorError::Parse { index: None, message: e.to_string() })
}

pub(crate) const PLANE_HALF_EXTENT: f64 = 3.0;
pub(crate) const MIN_GAP: f64 = 0.25;
const DIRECTION_MARGIN: f64 = 0.4;

/// Whether an object of `size` at `(x, y)` fits among `others` under the
/// CLEVR placement rules: a minimum gap between surfaces and an unambiguous
/// left/right and front/behind ordering against every other object.
pub(crate) fn placement_ok(x: f64, y: f64, size: Size, others: &[ClevrObject], dirs: &Directions) -> bool {
    if x.abs() > PLANE_HALF_EXTENT || y.abs() > PLANE_HALF_EXTENT {
        return false;
    }
    others.iter().all(|o| {
        let (dx, dy) = (x - o.coords[0], y - o.coords[1]);
        if (dx * dx + dy * dy).sqrt() - size.radius() - o.size.radius() < MIN_GAP {
            return false;
        }
        Relation::ALL.iter().all(|&rel| {
            let d = dirs.get(rel);
            let m = dx * d[0] + dy * d[1];
            !(0.0 < m && m < DIRECTION_MARGIN)
        })
    })
}

/// CLEVR-like scenes with 3 to 10 objects and uniformly drawn attributes,
/// for when the real scene files are not at hand.
pub fn synthetic_clevr_scenes(n: usize, split: SourceSplit, seed: u64) -> Vec<SceneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = Directions::standard();
    let mut scenes = Vec::with_capacity(n);
    while scenes.len() < n {
        let index = scenes.len() as u64;
        let count = rng.random_range(3..=10);
        let mut objects: Vec<ClevrObject> = Vec::with_capacity(count);
        let mut attempts = 0;
        while objects.len() < count && attempts < 1000 {
            attempts += 1;
            let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
            let x = rng.random_range(-PLANE_HALF_EXTENT..PLANE_HALF_EXTENT);
            let y = rng.random_range(-PLANE_HALF_EXTENT..PLANE_HALF_EXTENT);
            if !placement_ok(x, y, size, &objects, &dirs) {
                continue;
            }
            objects.push(ClevrObject {
                shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                size,
                material: Material::ALL[rng.random_range(0..Material::ALL.len())],
                coords: [x, y, size.radius()],
                rotation: rng.random_range(0.0..360.0),
                extra: Map::new(),
            });
        }
        if objects.len() < count {
            continue;
        }
        let relationships = derive_relationships(&objects, &dirs);
        scenes.push(SceneGraph {
            image_index: index,
            image_filename: format!("CLEVR_{split}_{index:06}.png"),
            split,
            objects,
            relationships,
            directions: Some(dirs.clone()),
            extra: Map::new(),
        });
    }
    scenes
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"info": {}, "scenes": [{
        "image_index": 0, "image_filename": "CLEVR_val_000000.png", "split": "val",
        "objects": [
            {"shape": "cube", "color": "red", "size": "large", "material": "rubber",
             "3d_coords": [-1.0, 0.0, 0.7], "rotation": 10.0, "pixel_coords": [100, 120, 10.0]},
            {"shape": "sphere", "color": "blue", "size": "small", "material": "metal",
             "3d_coords": [1.0, 0.5, 0.35], "rotation": 0.0, "pixel_coords": [200, 110, 11.0]}
        ],
        "relationships": {"left": [[], [0]], "right": [[1], []], "front": [[], []], "behind": [[], []]}
    }]}"#;

    #[test]
    fn loads_minimal_scene() {
        let scenes = parse_clevr_scenes(TWO).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].objects.len(), 2);
        assert_eq!(scenes[0].scene_id(), "CLEVR_val_000000");
        assert!(scenes[0].relationships.holds(0, Relation::Left, 1));
        assert!(scenes[0].objects[0].extra.contains_key("pixel_coords"));
    }

    #[test]
    fn inconsistent_lists_rejected() {
        let bad = TWO.replace(r#""right": [[1], []]"#, r#""right": [[], []]"#);
        assert!(matches!(parse_clevr_scenes(&bad), Err(BiscorError::Consistency { .. })));
    }

    #[test]
    fn schema_errors_carry_index() {
        let bad = TWO.replace(r#""shape": "sphere""#, r#""shape": "cone""#);
        assert!(matches!(parse_clevr_scenes(&bad), Err(BiscorError::Parse { index: Some(0), .. })));
    }

    #[test]
    fn round_trip_keeps_unknown_fields() {
        let scenes = parse_clevr_scenes(TWO).unwrap();
        let again = parse_clevr_scenes(&scenes_to_json(&scenes, "val").unwrap()).unwrap();
        assert_eq!(scenes, again);
    }

    #[test]
    fn synthetic_scenes_are_valid_and_reproducible() {
        let a = synthetic_clevr_scenes(50, SourceSplit::Train, 7);
        assert_eq!(a, synthetic_clevr_scenes(50, SourceSplit::Train, 7));
        for s in &a {
            s.validate().unwrap();
            assert!((3..=10).contains(&s.objects.len()));
        }
    }

    #[test]
    fn derived_relationships_follow_directions() {
        let mut s = parse_clevr_scenes(TWO).unwrap().remove(0);
        s.directions = Some(Directions::standard());
        s.recompute_relationships().unwrap();
        s.validate().unwrap();
        let left = Directions::standard().left;
        let d = (0..2).map(|k| (s.objects[0].coords[k] - s.objects[1].coords[k]) * left[k]).sum::<f64>();
        assert_eq!(s.relationships.holds(0, Relation::Left, 1), d > RELATION_EPS);
    }
}
