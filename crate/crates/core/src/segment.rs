//! Caption decomposition into text segments.
//!
//! Two sources are supported. Structured segmentation reads phrase spans from
//! scene annotations; automatic segmentation runs a lexicon-driven noun-chunk
//! matcher of the shape `determiner? numeral* adjective* noun+`. Both end with
//! the full caption and never repeat a segment.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("annotation does not match caption {caption:?}: {reason}")]
    Inconsistent { caption: String, reason: String },
    #[error("failed to read lexicon {path}: {source}")]
    Lexicon { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Object nouns, attribute phrases and relational phrases.
    FineGrained,
    /// Attribute phrases and relational phrases.
    CoarseGrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    Structured,
    Automatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationStrategy {
    pub granularity: Granularity,
    pub source: SegmentSource,
}

impl SegmentationStrategy {
    pub const fn new(granularity: Granularity, source: SegmentSource) -> Self {
        Self { granularity, source }
    }
}

impl Default for SegmentationStrategy {
    fn default() -> Self {
        Self::new(Granularity::CoarseGrained, SegmentSource::Structured)
    }
}

/// Ordered, duplicate-free segments; the last one is always the caption itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSegments {
    segments: Vec<String>,
}

impl CaptionSegments {
    /// Deduplicates `parts` (first occurrence wins) and appends `caption`.
    pub fn new(parts: impl IntoIterator<Item = String>, caption: &str) -> Self {
        let mut seen = HashSet::new();
        let mut segments: Vec<String> = parts
            .into_iter()
            .filter(|s| s != caption && seen.insert(s.clone()))
            .collect();
        segments.push(caption.to_string());
        Self { segments }
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn full_caption(&self) -> &str {
        self.segments.last().expect("segments always hold the caption")
    }

    pub fn includes_full_caption(&self) -> bool {
        true
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_vec(self) -> Vec<String> {
        self.segments
    }
}

/// One attribute phrase as it appears in a caption, with its object noun.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPhrase {
    pub phrase: String,
    pub object: String,
}

/// Ground-truth segment annotation for a single caption.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub phrases: Vec<AnnotatedPhrase>,
    /// Relation words linking the first two phrases, verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

/// Builds segments from an annotation.
///
/// Order: object nouns (fine-grained only), attribute phrases, the relational
/// phrase spanning the first two phrases, the full caption.
pub fn segment_structured(
    annotation: &SegmentAnnotation,
    caption: &str,
    granularity: Granularity,
) -> Result<CaptionSegments, SegmentError> {
    if caption.trim().is_empty() {
        return Err(SegmentError::EmptyCaption);
    }
    let bad = |reason: String| SegmentError::Inconsistent { caption: caption.to_string(), reason };

    let mut spans = Vec::with_capacity(annotation.phrases.len());
    let mut cursor = 0;
    for p in &annotation.phrases {
        if p.phrase.is_empty() {
            return Err(bad("empty phrase".into()));
        }
        let start = find_word_span(caption, &p.phrase, cursor)
            .or_else(|| find_word_span(caption, &p.phrase, 0))
            .ok_or_else(|| bad(format!("phrase {:?} not found", p.phrase)))?;
        if find_word_span(&p.phrase, &p.object, 0).is_none() {
            return Err(bad(format!("object {:?} not inside phrase {:?}", p.object, p.phrase)));
        }
        let end = start + p.phrase.len();
        spans.push((start, end));
        cursor = end;
    }

    let mut parts = Vec::new();
    if granularity == Granularity::FineGrained {
        parts.extend(annotation.phrases.iter().map(|p| p.object.clone()));
    }
    parts.extend(annotation.phrases.iter().map(|p| p.phrase.clone()));

    if let Some(rel) = &annotation.relation {
        if spans.len() < 2 {
            return Err(bad("relation given with fewer than two phrases".into()));
        }
        let (a, b) = (spans[0], spans[1]);
        if b.0 < a.1 {
            return Err(bad("related phrases overlap or are out of order".into()));
        }
        if find_word_span(&caption[a.1..b.0], rel, 0).is_none() {
            return Err(bad(format!("relation {rel:?} not between the related phrases")));
        }
        parts.push(caption[a.0..b.1].to_string());
    }
    Ok(CaptionSegments::new(parts, caption))
}

// Byte offset of `needle` in `hay` at or after `from`, on word boundaries.
fn find_word_span(hay: &str, needle: &str, from: usize) -> Option<usize> {
    let mut start = from;
    while start <= hay.len() {
        let off = hay.get(start..)?.find(needle)?;
        let at = start + off;
        let end = at + needle.len();
        let left_ok = hay[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let right_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if left_ok && right_ok {
            return Some(at);
        }
        start = at + hay[at..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WordClass {
    Determiner,
    Numeral,
    Adjective,
    Noun,
    Relation,
    /// Conjunctions, verbs and other closed-class words; they end a chunk.
    Other,
}

/// Word lists driving the automatic chunker.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    determiners: HashSet<String>,
    numerals: HashSet<String>,
    conjunctions: HashSet<String>,
    relations: HashSet<String>,
    function_words: HashSet<String>,
    adjectives: HashSet<String>,
    nouns: HashSet<String>,
}

const LEXICON_FILES: [&str; 11] = [
    "colors", "sizes", "materials", "shapes", "relations", "determiners", "conjunctions",
    "numerals", "function_words", "adjectives", "nouns",
];

fn bundled_list(name: &str) -> &'static str {
    match name {
        "colors" => include_str!("../lexicon/colors.txt"),
        "sizes" => include_str!("../lexicon/sizes.txt"),
        "materials" => include_str!("../lexicon/materials.txt"),
        "shapes" => include_str!("../lexicon/shapes.txt"),
        "relations" => include_str!("../lexicon/relations.txt"),
        "determiners" => include_str!("../lexicon/determiners.txt"),
        "conjunctions" => include_str!("../lexicon/conjunctions.txt"),
        "numerals" => include_str!("../lexicon/numerals.txt"),
        "function_words" => include_str!("../lexicon/function_words.txt"),
        "adjectives" => include_str!("../lexicon/adjectives.txt"),
        "nouns" => include_str!("../lexicon/nouns.txt"),
        _ => "",
    }
}

fn parse_list(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
}

const ADJECTIVE_SUFFIXES: [&str; 11] =
    ["ful", "ous", "ive", "able", "ible", "less", "ish", "ic", "ical", "est", "ern"];

impl Lexicon {
    pub fn bundled() -> Self {
        Self::build(|name| Ok(bundled_list(name).to_string())).expect("bundled lexicon is valid")
    }

    /// Bundled lists, with any `<name>.txt` present in `dir` replacing its
    /// bundled counterpart.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self, SegmentError> {
        let dir = dir.as_ref();
        Self::build(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                fs::read_to_string(&path).map_err(|source| SegmentError::Lexicon {
                    path: path.display().to_string(),
                    source,
                })
            } else {
                Ok(bundled_list(name).to_string())
            }
        })
    }

    fn build(mut read: impl FnMut(&str) -> Result<String, SegmentError>) -> Result<Self, SegmentError> {
        let mut lex = Lexicon::default();
        for name in LEXICON_FILES {
            let text = read(name)?;
            let target = match name {
                "colors" | "sizes" | "materials" | "adjectives" => &mut lex.adjectives,
                "shapes" | "nouns" => &mut lex.nouns,
                "relations" => &mut lex.relations,
                "determiners" => &mut lex.determiners,
                "conjunctions" => &mut lex.conjunctions,
                "numerals" => &mut lex.numerals,
                _ => &mut lex.function_words,
            };
            target.extend(parse_list(&text));
        }
        Ok(lex)
    }

    fn classify(&self, word: &str) -> WordClass {
        let w = word.to_lowercase();
        if self.determiners.contains(&w) {
            WordClass::Determiner
        } else if self.numerals.contains(&w) || w.chars().all(|c| c.is_ascii_digit()) {
            WordClass::Numeral
        } else if self.conjunctions.contains(&w) || self.function_words.contains(&w) {
            WordClass::Other
        } else if self.relations.contains(&w) {
            WordClass::Relation
        } else if self.nouns.contains(&w) {
            WordClass::Noun
        } else if self.adjectives.contains(&w) {
            WordClass::Adjective
        } else if ADJECTIVE_SUFFIXES.iter().any(|s| w.len() > s.len() + 2 && w.ends_with(s)) {
            WordClass::Adjective
        } else if (w.ends_with("ing") && w.len() > 5) || (w.ends_with("ed") && w.len() > 4) {
            WordClass::Other
        } else if w.chars().any(char::is_alphabetic) {
            WordClass::Noun
        } else {
            WordClass::Other
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    start: usize,
    end: usize,
    class: WordClass,
    // Punctuation directly before/after the word.
    break_before: bool,
    break_after: bool,
}

fn tokenize(caption: &str, lex: &Lexicon) -> Vec<Token> {
    let mut tokens: Vec<Token> = Vec::new();
    let mut offset = 0;
    for piece in caption.split_whitespace() {
        let at = offset + caption[offset..].find(piece).expect("piece comes from caption");
        offset = at + piece.len();
        let lead = piece.len() - piece.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
        let core = piece.trim_matches(|c: char| !c.is_alphanumeric());
        if core.is_empty() {
            if let Some(last) = tokens.last_mut() {
                last.break_after = true;
            }
            continue;
        }
        let start = at + lead;
        let end = start + core.len();
        tokens.push(Token {
            start,
            end,
            class: lex.classify(core),
            break_before: lead > 0,
            break_after: end < at + piece.len(),
        });
    }
    tokens
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    // Token indices: `first` is the determiner if any, `body` the first kept word.
    first: usize,
    body: usize,
    head: usize,
    last: usize,
}

fn find_chunks(tokens: &[Token]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let first = i;
        let mut j = i;
        if tokens[j].class == WordClass::Determiner {
            j += 1;
        }
        let body = j;
        let open = |k: usize| k == body || !(tokens[k].break_before || tokens[k - 1].break_after);
        while j < tokens.len() && open(j) && tokens[j].class == WordClass::Numeral {
            j += 1;
        }
        while j < tokens.len() && open(j) && tokens[j].class == WordClass::Adjective {
            j += 1;
        }
        let head = j;
        while j < tokens.len() && open(j) && tokens[j].class == WordClass::Noun {
            j += 1;
        }
        let blocked = body < tokens.len() && first != body && tokens[first].break_after;
        if j > head && !blocked {
            chunks.push(Chunk { first, body, head, last: j - 1 });
            i = j;
        } else {
            i = first + 1;
        }
    }
    chunks
}

/// Lexicon-driven noun-chunk segmentation.
#[derive(Debug, Clone)]
pub struct Segmenter {
    lexicon: Lexicon,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self::new(Lexicon::bundled())
    }
}

impl Segmenter {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    /// Chunks the caption with the default (coarse) granularity.
    pub fn segment(&self, caption: &str) -> Result<CaptionSegments, SegmentError> {
        self.segment_with(caption, Granularity::CoarseGrained)
    }

    /// Emits (fine-grained only) chunk nouns, determiner-stripped chunks,
    /// relational phrases joining adjacent chunks through relation words, and
    /// the full caption.
    pub fn segment_with(&self, caption: &str, granularity: Granularity) -> Result<CaptionSegments, SegmentError> {
        if caption.trim().is_empty() {
            return Err(SegmentError::EmptyCaption);
        }
        let tokens = tokenize(caption, &self.lexicon);
        let chunks = find_chunks(&tokens);
        let text = |a: usize, b: usize| caption[tokens[a].start..tokens[b].end].to_string();

        let mut parts = Vec::new();
        if granularity == Granularity::FineGrained {
            parts.extend(chunks.iter().map(|c| text(c.head, c.last)));
        }
        parts.extend(chunks.iter().map(|c| text(c.body, c.last)));
        for pair in chunks.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let between = &tokens[a.last + 1..b.first];
            let linked = !between.is_empty()
                && between.iter().all(|t| t.class == WordClass::Relation)
                && !tokens[a.last..b.first].iter().any(|t| t.break_after);
            if linked {
                parts.push(text(a.body, b.last));
            }
        }
        Ok(CaptionSegments::new(parts, caption))
    }
}

/// Automatic segmentation with the bundled lexicon.
pub fn segment_automatic(caption: &str) -> Result<CaptionSegments, SegmentError> {
    Segmenter::default().segment(caption)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat_dog() -> SegmentAnnotation {
        SegmentAnnotation {
            phrases: vec![
                AnnotatedPhrase { phrase: "black cat".into(), object: "cat".into() },
                AnnotatedPhrase { phrase: "white dog".into(), object: "dog".into() },
            ],
            relation: None,
        }
    }

    #[test]
    fn structured_coarse() {
        let s = segment_structured(&cat_dog(), "a black cat and a white dog", Granularity::CoarseGrained).unwrap();
        assert_eq!(s.segments(), ["black cat", "white dog", "a black cat and a white dog"]);
    }

    #[test]
    fn structured_fine_prepends_objects() {
        let s = segment_structured(&cat_dog(), "a black cat and a white dog", Granularity::FineGrained).unwrap();
        assert_eq!(s.segments(), ["cat", "dog", "black cat", "white dog", "a black cat and a white dog"]);
    }

    #[test]
    fn structured_single_object() {
        let ann = SegmentAnnotation {
            phrases: vec![AnnotatedPhrase { phrase: "red cube".into(), object: "cube".into() }],
            relation: None,
        };
        let s = segment_structured(&ann, "a red cube", Granularity::CoarseGrained).unwrap();
        assert_eq!(s.segments(), ["red cube", "a red cube"]);
    }

    #[test]
    fn structured_relational_phrase() {
        let caption = "A large red rubber cube left of a small blue metal sphere";
        let ann = SegmentAnnotation {
            phrases: vec![
                AnnotatedPhrase { phrase: "large red rubber cube".into(), object: "cube".into() },
                AnnotatedPhrase { phrase: "small blue metal sphere".into(), object: "sphere".into() },
            ],
            relation: Some("left of".into()),
        };
        let s = segment_structured(&ann, caption, Granularity::CoarseGrained).unwrap();
        assert_eq!(
            s.segments(),
            [
                "large red rubber cube",
                "small blue metal sphere",
                "large red rubber cube left of a small blue metal sphere",
                caption
            ]
        );
    }

    #[test]
    fn structured_mismatch_is_error() {
        let err = segment_structured(&cat_dog(), "a black cat and a brown dog", Granularity::CoarseGrained);
        assert!(matches!(err, Err(SegmentError::Inconsistent { .. })));
        // Substring inside a longer word does not count.
        let ann = SegmentAnnotation {
            phrases: vec![AnnotatedPhrase { phrase: "red cube".into(), object: "cube".into() }],
            relation: None,
        };
        assert!(segment_structured(&ann, "a red cubes", Granularity::CoarseGrained).is_err());
    }

    #[test]
    fn automatic_example() {
        let s = segment_automatic("a red cube and a blue sphere").unwrap();
        assert_eq!(s.segments(), ["red cube", "blue sphere", "a red cube and a blue sphere"]);
        let s = segment_automatic("a black cat and a white dog").unwrap();
        assert_eq!(s.segments(), ["black cat", "white dog", "a black cat and a white dog"]);
    }

    #[test]
    fn automatic_no_chunk() {
        assert_eq!(segment_automatic("hello").unwrap().segments(), ["hello"]);
        assert_eq!(segment_automatic("and then").unwrap().segments(), ["and then"]);
    }

    #[test]
    fn automatic_idempotent_on_phrase() {
        assert_eq!(segment_automatic("red cube").unwrap().segments(), ["red cube"]);
    }

    #[test]
    fn automatic_relational_and_quantity() {
        let s = segment_automatic("A small cyan metal cylinder in front of a large gray rubber cube").unwrap();
        assert_eq!(
            s.segments()[..3],
            [
                "small cyan metal cylinder",
                "large gray rubber cube",
                "small cyan metal cylinder in front of a large gray rubber cube"
            ]
        );
        let s = segment_automatic("There are three red cubes and two blue spheres").unwrap();
        assert_eq!(s.segments(), ["three red cubes", "two blue spheres", "There are three red cubes and two blue spheres"]);
    }

    #[test]
    fn punctuation_breaks_chunks() {
        let s = segment_automatic("a red cube, a blue sphere.").unwrap();
        assert_eq!(s.segments(), ["red cube", "blue sphere", "a red cube, a blue sphere."]);
    }

    #[test]
    fn fine_grained_automatic_adds_nouns() {
        let s = Segmenter::default().segment_with("a black cat and a white dog", Granularity::FineGrained).unwrap();
        assert_eq!(s.segments(), ["cat", "dog", "black cat", "white dog", "a black cat and a white dog"]);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(matches!(segment_automatic("  "), Err(SegmentError::EmptyCaption)));
    }

    #[test]
    fn lexicon_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("function_words.txt"), "hello\n").unwrap();
        let seg = Segmenter::new(Lexicon::with_overrides(dir.path()).unwrap());
        assert_eq!(seg.segment("hello world").unwrap().segments(), ["world", "hello world"]);
    }
}
