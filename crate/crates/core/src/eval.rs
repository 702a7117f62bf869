//! Bidirectional retrieval metrics over 2x2 instances (two images, two
//! captions) and the dataset/report formats that go with them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::ImageRef;
use crate::segment::SegmentAnnotation;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// A scorer failure. Keeps the original error for display.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ScoreError(#[source] pub BoxError);

macro_rules! score_error_from {
    ($($t:ty),+) => {
        $(impl From<$t> for ScoreError {
            fn from(e: $t) -> Self {
                ScoreError(Box::new(e))
            }
        })+
    };
}

score_error_from!(crate::sgi::SgiError, crate::embedding::EmbedError, crate::segment::SegmentError, std::io::Error);

impl ScoreError {
    pub fn new(e: impl std::error::Error + Send + Sync + 'static) -> Self {
        ScoreError(Box::new(e))
    }

    pub fn msg(message: impl Into<String>) -> Self {
        ScoreError(message.into().into())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scorer failed on instance {id}: {source}")]
    Scorer { id: String, source: ScoreError },
    #[error("scorer returned a non-finite score for instance {id}")]
    NonFinite { id: String },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The caption side of a scoring request.
#[derive(Debug, Clone, Copy)]
pub struct CaptionInput<'a> {
    pub text: &'a str,
    pub annotation: Option<&'a SegmentAnnotation>,
}

impl<'a> CaptionInput<'a> {
    pub fn plain(text: &'a str) -> Self {
        Self { text, annotation: None }
    }
}

/// Anything that maps an (image, caption) pair to a similarity.
pub trait Scorer: Sync {
    fn describe(&self) -> String;
    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn describe(&self) -> String {
        (**self).describe()
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        (**self).score(image, caption)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn describe(&self) -> String {
        (**self).describe()
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        (**self).score(image, caption)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub caption: SegmentAnnotation,
    pub negative_caption: SegmentAnnotation,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub id: String,
    pub category: String,
    pub image: String,
    pub caption: String,
    /// Absent for one-directional (text retrieval only) instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_image: Option<String>,
    pub negative_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<InstanceAnnotation>,
}

impl RetrievalInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.caption == self.negative_caption {
            return Err("caption and negative_caption are identical".into());
        }
        if self.negative_image.as_deref() == Some(self.image.as_str()) {
            return Err("image and negative_image are identical".into());
        }
        Ok(())
    }

    pub fn is_bidirectional(&self) -> bool {
        self.negative_image.is_some()
    }
}

/// `sCI` is the score of caption C against image I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuad {
    pub s00: f64,
    pub s10: f64,
    pub s01: f64,
    pub s11: f64,
}

impl ScoreQuad {
    pub fn new(s00: f64, s10: f64, s01: f64, s11: f64) -> Self {
        Self { s00, s10, s01, s11 }
    }

    pub fn is_finite(&self) -> bool {
        [self.s00, self.s10, self.s01, self.s11].iter().all(|v| v.is_finite())
    }
}

/// Each image prefers its own caption. Ties fail.
pub fn i2t(q: &ScoreQuad) -> u8 {
    u8::from(q.s00 > q.s10 && q.s11 > q.s01)
}

/// Each caption prefers its own image. Ties fail.
pub fn t2i(q: &ScoreQuad) -> u8 {
    u8::from(q.s00 > q.s01 && q.s11 > q.s10)
}

pub fn group(q: &ScoreQuad) -> u8 {
    i2t(q) & t2i(q)
}

pub const RANDOM_I2T: f64 = 25.0;
pub const RANDOM_T2I: f64 = 25.0;
pub const RANDOM_GROUP: f64 = 100.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentages {
    pub i2t: f64,
    pub t2i: f64,
    pub group: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub instances: usize,
    #[serde(flatten)]
    pub scores: Percentages,
}

/// Text-retrieval accuracy for instances without a negative image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneDirectionalReport {
    pub category: String,
    pub instances: usize,
    pub text_retrieval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub instances: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_ids: Vec<String>,
    /// Sorted by category name.
    pub categories: Vec<CategoryReport>,
    /// Unweighted mean over bidirectional categories.
    pub average: Percentages,
    pub random_baseline: Percentages,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub one_directional: Vec<OneDirectionalReport>,
}

impl EvalReport {
    pub fn category(&self, name: &str) -> Option<&CategoryReport> {
        self.categories.iter().find(|c| c.category == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,instances,i2t,t2i,group\n");
        let row = |name: &str, n: String, p: &Percentages| {
            format!("{name},{n},{:.2},{:.2},{:.2}\n", p.i2t, p.t2i, p.group)
        };
        for c in &self.categories {
            out += &row(&c.category, c.instances.to_string(), &c.scores);
        }
        out += &row("average", self.instances.to_string(), &self.average);
        out += &row("random", String::new(), &self.random_baseline);
        for o in &self.one_directional {
            out += &format!("{} (text retrieval only),{},{:.2},,\n", o.category, o.instances, o.text_retrieval_accuracy);
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("scorer: {}\n", self.scorer);
        out += &format!("{:<20} {:>9} {:>7} {:>7} {:>7}\n", "category", "instances", "I2T", "T2I", "Group");
        let line = |name: &str, n: String, p: &Percentages| {
            format!("{name:<20} {n:>9} {:>7.1} {:>7.1} {:>7.1}\n", p.i2t, p.t2i, p.group)
        };
        for c in &self.categories {
            out += &line(&c.category, c.instances.to_string(), &c.scores);
        }
        out += &line("average", self.instances.to_string(), &self.average);
        out += &line("random", String::new(), &self.random_baseline);
        if self.skipped > 0 {
            out += &format!("skipped: {}\n", self.skipped);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Skip failing instances instead of aborting.
    pub lenient: bool,
    /// Directory that image ids are resolved against.
    pub image_root: Option<PathBuf>,
}

enum Outcome {
    Both(ScoreQuad),
    TextOnly(f64, f64),
}

fn score_instance(inst: &RetrievalInstance, scorer: &dyn Scorer, root: Option<&Path>) -> Result<Outcome, EvalError> {
    let fail = |source| EvalError::Scorer { id: inst.id.clone(), source };
    let ann = inst.annotation.as_ref();
    let c0 = CaptionInput { text: &inst.caption, annotation: ann.map(|a| &a.caption) };
    let c1 = CaptionInput { text: &inst.negative_caption, annotation: ann.map(|a| &a.negative_caption) };
    let i0 = ImageRef::resolve(&inst.image, root);
    let s00 = scorer.score(&i0, &c0).map_err(fail)?;
    let s10 = scorer.score(&i0, &c1).map_err(fail)?;
    let outcome = match &inst.negative_image {
        Some(neg) => {
            let i1 = ImageRef::resolve(neg, root);
            let s01 = scorer.score(&i1, &c0).map_err(fail)?;
            let s11 = scorer.score(&i1, &c1).map_err(fail)?;
            let q = ScoreQuad::new(s00, s10, s01, s11);
            if !q.is_finite() {
                return Err(EvalError::NonFinite { id: inst.id.clone() });
            }
            Outcome::Both(q)
        }
        None => {
            if !(s00.is_finite() && s10.is_finite()) {
                return Err(EvalError::NonFinite { id: inst.id.clone() });
            }
            Outcome::TextOnly(s00, s10)
        }
    };
    Ok(outcome)
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Scores all four pairs of every instance and reduces to percentages.
///
/// Instances are scored in parallel; the reduction runs in dataset order so
/// the report does not depend on scheduling.
pub fn evaluate(dataset: &[RetrievalInstance], scorer: &dyn Scorer, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let root = opts.image_root.as_deref();
    let outcomes: Vec<Result<Outcome, EvalError>> =
        dataset.par_iter().map(|inst| score_instance(inst, scorer, root)).collect();

    #[derive(Default)]
    struct Tally {
        n: usize,
        i2t: usize,
        t2i: usize,
        group: usize,
    }
    let mut both: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut text_only: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut skipped_ids = Vec::new();
    for (inst, outcome) in dataset.iter().zip(outcomes) {
        match outcome {
            Ok(Outcome::Both(q)) => {
                let t = both.entry(&inst.category).or_default();
                t.n += 1;
                t.i2t += usize::from(i2t(&q));
                t.t2i += usize::from(t2i(&q));
                t.group += usize::from(group(&q));
            }
            Ok(Outcome::TextOnly(pos, neg)) => {
                let t = text_only.entry(&inst.category).or_default();
                t.n += 1;
                t.i2t += usize::from(pos > neg);
            }
            Err(e) if opts.lenient => {
                log::warn!("skipping: {e}");
                skipped_ids.push(inst.id.clone());
            }
            Err(e) => return Err(e),
        }
    }

    let categories: Vec<CategoryReport> = both
        .iter()
        .map(|(name, t)| CategoryReport {
            category: name.to_string(),
            instances: t.n,
            scores: Percentages { i2t: pct(t.i2t, t.n), t2i: pct(t.t2i, t.n), group: pct(t.group, t.n) },
        })
        .collect();
    let k = categories.len().max(1) as f64;
    let average = Percentages {
        i2t: categories.iter().map(|c| c.scores.i2t).sum::<f64>() / k,
        t2i: categories.iter().map(|c| c.scores.t2i).sum::<f64>() / k,
        group: categories.iter().map(|c| c.scores.group).sum::<f64>() / k,
    };
    let one_directional = text_only
        .iter()
        .map(|(name, t)| OneDirectionalReport {
            category: name.to_string(),
            instances: t.n,
            text_retrieval_accuracy: pct(t.i2t, t.n),
        })
        .collect();
    Ok(EvalReport {
        scorer: scorer.describe(),
        instances: dataset.len() - skipped_ids.len(),
        skipped: skipped_ids.len(),
        skipped_ids,
        categories,
        average,
        random_baseline: Percentages { i2t: RANDOM_I2T, t2i: RANDOM_T2I, group: RANDOM_GROUP },
        one_directional,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<RetrievalInstance>, EvalError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| EvalError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |message: String| EvalError::Format { path: p.clone(), line: i + 1, message };
        let inst: RetrievalInstance = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        inst.validate().map_err(fmt)?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &[RetrievalInstance]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for inst in dataset {
        let line = serde_json::to_string(inst).expect("instances serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Uniform scores in [0, 1) that depend only on (seed, image, caption), so
/// results do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn describe(&self) -> String {
        format!("random[seed={}]", self.seed)
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image.id.as_bytes());
        h.update([0]);
        h.update(caption.text.as_bytes());
        let d = h.finalize();
        let bits = u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"));
        Ok((bits >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Placeholder instances for exercising scorers that ignore content.
pub fn synthetic_instances(n: usize, category: &str) -> Vec<RetrievalInstance> {
    (0..n)
        .map(|i| RetrievalInstance {
            id: format!("{category}-{i:06}"),
            category: category.to_string(),
            image: format!("synthetic/{i:06}_pos.png"),
            caption: format!("caption {i} positive"),
            negative_image: Some(format!("synthetic/{i:06}_neg.png")),
            negative_caption: format!("caption {i} negative"),
            annotation: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i2t_examples() {
        assert_eq!(i2t(&ScoreQuad::new(0.9, 0.1, 0.2, 0.8)), 1);
        assert_eq!(i2t(&ScoreQuad::new(0.5, 0.5, 0.2, 0.8)), 0);
    }

    #[test]
    fn t2i_examples() {
        assert_eq!(t2i(&ScoreQuad::new(0.9, 0.2, 0.1, 0.8)), 1);
        assert_eq!(t2i(&ScoreQuad::new(0.9, 0.2, 0.9, 0.8)), 0);
    }

    #[test]
    fn group_examples() {
        assert_eq!(group(&ScoreQuad::new(0.9, 0.1, 0.2, 0.8)), 1);
        // Both images prefer caption 0's partner correctly, but caption 0 prefers image 1.
        let q = ScoreQuad::new(0.5, 0.1, 0.6, 0.7);
        assert_eq!(i2t(&q), 1);
        assert_eq!(t2i(&q), 0);
        assert_eq!(group(&q), 0);
    }

    fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let x = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn exhaustive_orderings() {
        let perms = permutations(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(perms.len(), 24);
        let (mut a, mut b, mut g) = (0, 0, 0);
        for p in &perms {
            let q = ScoreQuad::new(p[0], p[1], p[2], p[3]);
            a += i2t(&q) as usize;
            b += t2i(&q) as usize;
            g += group(&q) as usize;
        }
        assert_eq!((a, b, g), (6, 6, 4));
    }

    struct Fixed(fn(&str, &str) -> f64);

    impl Scorer for Fixed {
        fn describe(&self) -> String {
            "fixed".into()
        }
        fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
            Ok((self.0)(&image.id, caption.text))
        }
    }

    fn oracle(image: &str, caption: &str) -> f64 {
        let pos_img = image.ends_with("_pos.png");
        let pos_cap = caption.ends_with("positive");
        if pos_img == pos_cap {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let data = synthetic_instances(10, "color");
        let r = evaluate(&data, &Fixed(oracle), &EvalOptions::default()).unwrap();
        assert_eq!(r.average, Percentages { i2t: 100.0, t2i: 100.0, group: 100.0 });
        let r = evaluate(&data, &Fixed(|i, c| -oracle(i, c)), &EvalOptions::default()).unwrap();
        assert_eq!(r.average, Percentages { i2t: 0.0, t2i: 0.0, group: 0.0 });
    }

    struct Flaky;

    impl Scorer for Flaky {
        fn describe(&self) -> String {
            "flaky".into()
        }
        fn score(&self, image: &ImageRef, _: &CaptionInput<'_>) -> Result<f64, ScoreError> {
            if image.id.contains("000003") {
                Err(ScoreError::msg("boom"))
            } else {
                Ok(0.0)
            }
        }
    }

    #[test]
    fn failures_abort_or_skip() {
        let data = synthetic_instances(5, "size");
        let err = evaluate(&data, &Flaky, &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, EvalError::Scorer { ref id, .. } if id == "size-000003"));
        let r = evaluate(&data, &Flaky, &EvalOptions { lenient: true, ..Default::default() }).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.instances, 4);
        assert_eq!(r.skipped_ids, vec!["size-000003".to_string()]);
    }

    #[test]
    fn one_directional_instances() {
        let mut data = synthetic_instances(4, "swap_obj");
        for d in &mut data {
            d.negative_image = None;
        }
        let r = evaluate(&data, &Fixed(oracle), &EvalOptions::default()).unwrap();
        assert!(r.categories.is_empty());
        assert_eq!(r.one_directional[0].text_retrieval_accuracy, 100.0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = synthetic_instances(3, "quantity");
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        fs::write(&path, "{\"id\":\"x\"}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(EvalError::Format { line: 1, .. })));
    }

    #[test]
    fn invalid_instance_rejected() {
        let mut inst = synthetic_instances(1, "c").remove(0);
        inst.negative_caption = inst.caption.clone();
        assert!(inst.validate().is_err());
    }
}
