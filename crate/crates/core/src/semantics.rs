//! Caption language: a typed AST over ten caption families, a three-valued
//! evaluator, an English realizer, a target-truth sampler, and the global
//! vocabulary.
//!
//! # Truth conditions
//!
//! Attribute noun phrases ([`AttrNP`]) denote the set of objects matching
//! every attribute they mention. Comparative relations compare object centers
//! (`y` grows downwards, so *above* is the smaller `y`), Euclidean distance
//! from the canvas center (*closer*/*farther*), Rec.601 luminance
//! (*darker*/*lighter*), and analytic area (*smaller*/*bigger*). A comparison
//! only holds if it clears a margin; pairs closer than the margin are
//! ambiguous, and a caption whose truth value hinges on an ambiguous pair
//! evaluates to [`Truth::Undefined`].

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetFamily;
use crate::error::{Error, Result};
use crate::worldgen::{ColorName, Scene, ShapeKind, WorldObject};

/// Minimum center offset on the compared axis.
pub const POSITION_MARGIN: f64 = 0.05;
/// Minimum difference in distance from the canvas center.
pub const DISTANCE_MARGIN: f64 = 0.05;
/// Minimum luminance difference.
pub const LUMINANCE_MARGIN: f64 = 0.05;
/// Minimum relative area difference.
pub const AREA_MARGIN: f64 = 0.15;

/// Rejection-sampling cap for [`sample_caption`].
pub const DEFAULT_CAPTION_ATTEMPTS: usize = 100;

/// A noun phrase built from optional shape and color attributes. An empty
/// phrase reads as "shape" and matches every object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AttrNP {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<ColorName>,
}

impl AttrNP {
    pub const ANY: AttrNP = AttrNP {
        shape: None,
        color: None,
    };

    pub fn new(shape: Option<ShapeKind>, color: Option<ColorName>) -> Self {
        AttrNP { shape, color }
    }

    pub fn shape(shape: ShapeKind) -> Self {
        AttrNP::new(Some(shape), None)
    }

    pub fn color(color: ColorName) -> Self {
        AttrNP::new(None, Some(color))
    }

    pub fn both(color: ColorName, shape: ShapeKind) -> Self {
        AttrNP::new(Some(shape), Some(color))
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_none() && self.color.is_none()
    }

    pub fn matches(&self, obj: &WorldObject) -> bool {
        self.shape.map_or(true, |s| s == obj.shape) && self.color.map_or(true, |c| c == obj.color)
    }

    /// Every phrase over the given attribute pools, including the empty one.
    pub fn all(shapes: &[ShapeKind], colors: &[ColorName]) -> Vec<AttrNP> {
        let shapes: Vec<Option<ShapeKind>> =
            std::iter::once(None).chain(shapes.iter().copied().map(Some)).collect();
        let colors: Vec<Option<ColorName>> =
            std::iter::once(None).chain(colors.iter().copied().map(Some)).collect();
        shapes
            .iter()
            .flat_map(|&s| colors.iter().map(move |&c| AttrNP::new(s, c)))
            .collect()
    }

    fn words(&self, plural: bool) -> String {
        let noun = match (self.shape, plural) {
            (Some(s), false) => s.name(),
            (Some(s), true) => s.plural(),
            (None, false) => "shape",
            (None, true) => "shapes",
        };
        match self.color {
            Some(c) => format!("{} {noun}", c.name()),
            None => noun.to_string(),
        }
    }

    fn indefinite(&self) -> String {
        with_article(&self.words(false))
    }

    /// Predicate form: "red", "a square", "a red square" (or plural forms).
    fn predicate(&self, plural: bool) -> String {
        match (self.shape, self.color) {
            (None, Some(c)) => c.name().to_string(),
            _ if plural => self.words(true),
            _ => self.indefinite(),
        }
    }

    /// Merge into one phrase if the two do not assign conflicting attributes.
    fn merge(&self, other: &AttrNP) -> Option<AttrNP> {
        fn pick<T: PartialEq + Copy>(a: Option<T>, b: Option<T>) -> Option<Option<T>> {
            match (a, b) {
                (Some(x), Some(y)) if x != y => None,
                (Some(x), _) | (_, Some(x)) => Some(Some(x)),
                (None, None) => Some(None),
            }
        }
        Some(AttrNP::new(pick(self.shape, other.shape)?, pick(self.color, other.color)?))
    }

    /// True if `self` mentions nothing beyond what `other` already fixes.
    fn subsumed_by(&self, other: &AttrNP) -> bool {
        (self.shape.is_none() || self.shape == other.shape)
            && (self.color.is_none() || self.color == other.color)
    }
}

fn with_article(words: &str) -> String {
    let article = if words.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    };
    format!("{article} {words}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connective {
    And,
    Or,
    If,
    Iff,
}

impl Connective {
    pub const ALL: [Connective; 4] = [Connective::And, Connective::Or, Connective::If, Connective::Iff];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparator {
    LessThan,
    MoreThan,
    AtMost,
    AtLeast,
    Exactly,
    NotExactly,
}

impl Comparator {
    pub const ALL: [Comparator; 6] = [
        Comparator::LessThan,
        Comparator::MoreThan,
        Comparator::AtMost,
        Comparator::AtLeast,
        Comparator::Exactly,
        Comparator::NotExactly,
    ];

    /// Apply to `lhs.cmp(rhs)`.
    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            Comparator::LessThan => ord == Ordering::Less,
            Comparator::MoreThan => ord == Ordering::Greater,
            Comparator::AtMost => ord != Ordering::Greater,
            Comparator::AtLeast => ord != Ordering::Less,
            Comparator::Exactly => ord == Ordering::Equal,
            Comparator::NotExactly => ord != Ordering::Equal,
        }
    }

    /// The comparator that holds exactly when `self` does not.
    pub fn complement(self) -> Comparator {
        match self {
            Comparator::LessThan => Comparator::AtLeast,
            Comparator::AtLeast => Comparator::LessThan,
            Comparator::MoreThan => Comparator::AtMost,
            Comparator::AtMost => Comparator::MoreThan,
            Comparator::Exactly => Comparator::NotExactly,
            Comparator::NotExactly => Comparator::Exactly,
        }
    }

    fn words(self) -> &'static str {
        match self {
            Comparator::LessThan => "less than",
            Comparator::MoreThan => "more than",
            Comparator::AtMost => "at most",
            Comparator::AtLeast => "at least",
            Comparator::Exactly => "exactly",
            Comparator::NotExactly => "not exactly",
        }
    }
}

/// Proportion for quantifier captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u8,
    pub den: u8,
}

impl Fraction {
    pub const NONE: Fraction = Fraction { num: 0, den: 1 };
    pub const ALL: Fraction = Fraction { num: 1, den: 1 };

    /// The licensed proportions: no, a quarter, a third, half, two thirds,
    /// three quarters, all.
    pub const SET: [Fraction; 7] = [
        Fraction::NONE,
        Fraction { num: 1, den: 4 },
        Fraction { num: 1, den: 3 },
        Fraction { num: 1, den: 2 },
        Fraction { num: 2, den: 3 },
        Fraction { num: 3, den: 4 },
        Fraction::ALL,
    ];

    pub fn is_extreme(self) -> bool {
        self == Fraction::NONE || self == Fraction::ALL
    }

    /// Compare `count / total` against this fraction exactly.
    pub fn compare(self, count: usize, total: usize) -> Ordering {
        (count * self.den as usize).cmp(&(self.num as usize * total))
    }

    fn words(self) -> &'static str {
        match (self.num, self.den) {
            (0, _) => "no",
            (1, 4) => "a quarter of the",
            (1, 3) => "a third of the",
            (1, 2) => "half the",
            (2, 3) => "two thirds of the",
            (3, 4) => "three quarters of the",
            _ => "all",
        }
    }
}

/// Which object attribute a comparative looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    X,
    Y,
    Distance,
    Luminance,
    Area,
}

impl Axis {
    fn key(self, o: &WorldObject) -> f64 {
        match self {
            Axis::X => o.center[0],
            Axis::Y => o.center[1],
            Axis::Distance => o.center_distance(),
            Axis::Luminance => o.luminance(),
            Axis::Area => o.area(),
        }
    }

    /// `a` has a smaller key than `b` by at least the axis margin.
    fn clearly_less(self, a: &WorldObject, b: &WorldObject) -> bool {
        let (ka, kb) = (self.key(a), self.key(b));
        match self {
            Axis::X | Axis::Y => ka + POSITION_MARGIN <= kb,
            Axis::Distance => ka + DISTANCE_MARGIN <= kb,
            Axis::Luminance => ka + LUMINANCE_MARGIN <= kb,
            Axis::Area => ka * (1.0 + AREA_MARGIN) <= kb,
        }
    }
}

/// A margin-aware comparison: `(axis, true)` prefers smaller keys.
#[derive(Debug, Clone, Copy)]
struct Comparison {
    axis: Axis,
    prefer_less: bool,
}

impl Comparison {
    /// `a` wins against `b` beyond the margin.
    fn beats(self, a: &WorldObject, b: &WorldObject) -> bool {
        if self.prefer_less {
            self.axis.clearly_less(a, b)
        } else {
            self.axis.clearly_less(b, a)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
    Closer,
    Farther,
    Darker,
    Lighter,
    Smaller,
    Bigger,
    SameShape,
    SameColor,
    DifferentShape,
    DifferentColor,
}

impl Relation {
    pub const ALL: [Relation; 14] = [
        Relation::Left,
        Relation::Right,
        Relation::Above,
        Relation::Below,
        Relation::Closer,
        Relation::Farther,
        Relation::Darker,
        Relation::Lighter,
        Relation::Smaller,
        Relation::Bigger,
        Relation::SameShape,
        Relation::SameColor,
        Relation::DifferentShape,
        Relation::DifferentColor,
    ];

    /// The four spatial relations used by the simple-spatial family.
    pub const SPATIAL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];

    /// The relation with swapped arguments, if it is itself a relation.
    pub fn converse(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Closer => Relation::Farther,
            Relation::Farther => Relation::Closer,
            Relation::Darker => Relation::Lighter,
            Relation::Lighter => Relation::Darker,
            Relation::Smaller => Relation::Bigger,
            Relation::Bigger => Relation::Smaller,
            r => r,
        }
    }

    fn comparison(self) -> Option<Comparison> {
        let c = |axis, prefer_less| Some(Comparison { axis, prefer_less });
        match self {
            Relation::Left => c(Axis::X, true),
            Relation::Right => c(Axis::X, false),
            Relation::Above => c(Axis::Y, true),
            Relation::Below => c(Axis::Y, false),
            Relation::Closer => c(Axis::Distance, true),
            Relation::Farther => c(Axis::Distance, false),
            Relation::Darker => c(Axis::Luminance, true),
            Relation::Lighter => c(Axis::Luminance, false),
            Relation::Smaller => c(Axis::Area, true),
            Relation::Bigger => c(Axis::Area, false),
            _ => None,
        }
    }

    /// Three-valued test of `relation(a, b)`.
    pub fn status(self, a: &WorldObject, b: &WorldObject) -> PairStatus {
        let yes = |v: bool| if v { PairStatus::Holds } else { PairStatus::Fails };
        match self {
            Relation::SameShape => yes(a.shape == b.shape),
            Relation::SameColor => yes(a.color == b.color),
            Relation::DifferentShape => yes(a.shape != b.shape),
            Relation::DifferentColor => yes(a.color != b.color),
            r => {
                let cmp = r.comparison().expect("comparative relation");
                if cmp.beats(a, b) {
                    PairStatus::Holds
                } else if cmp.beats(b, a) {
                    PairStatus::Fails
                } else {
                    PairStatus::Ambiguous
                }
            }
        }
    }

    fn words(self) -> &'static str {
        match self {
            Relation::Left => "to the left of",
            Relation::Right => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Closer => "closer to the center than",
            Relation::Farther => "farther from the center than",
            Relation::Darker => "darker than",
            Relation::Lighter => "lighter than",
            Relation::Smaller => "smaller than",
            Relation::Bigger => "bigger than",
            Relation::SameShape => "the same shape as",
            Relation::SameColor => "the same color as",
            Relation::DifferentShape => "a different shape from",
            Relation::DifferentColor => "a different color from",
        }
    }
}

/// Outcome of a comparative between two concrete objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStatus {
    Holds,
    Fails,
    /// The two objects are within the comparison margin.
    Ambiguous,
}

impl PairStatus {
    fn negate(self) -> PairStatus {
        match self {
            PairStatus::Holds => PairStatus::Fails,
            PairStatus::Fails => PairStatus::Holds,
            PairStatus::Ambiguous => PairStatus::Ambiguous,
        }
    }
}

/// Selector for implicit-relational and superlative descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Left,
    Right,
    Upper,
    Lower,
    Smaller,
    Bigger,
    Darker,
    Lighter,
    Closer,
    Farther,
}

impl Selector {
    pub const ALL: [Selector; 10] = [
        Selector::Left,
        Selector::Right,
        Selector::Upper,
        Selector::Lower,
        Selector::Smaller,
        Selector::Bigger,
        Selector::Darker,
        Selector::Lighter,
        Selector::Closer,
        Selector::Farther,
    ];

    fn comparison(self) -> Comparison {
        let relation = match self {
            Selector::Left => Relation::Left,
            Selector::Right => Relation::Right,
            Selector::Upper => Relation::Above,
            Selector::Lower => Relation::Below,
            Selector::Smaller => Relation::Smaller,
            Selector::Bigger => Relation::Bigger,
            Selector::Darker => Relation::Darker,
            Selector::Lighter => Relation::Lighter,
            Selector::Closer => Relation::Closer,
            Selector::Farther => Relation::Farther,
        };
        relation.comparison().expect("selectors are comparative")
    }

    /// `a` is selected over `b` beyond the margin.
    pub fn prefers(self, a: &WorldObject, b: &WorldObject) -> bool {
        self.comparison().beats(a, b)
    }

    fn comparative(self) -> &'static str {
        match self {
            Selector::Left => "left",
            Selector::Right => "right",
            Selector::Upper => "upper",
            Selector::Lower => "lower",
            Selector::Smaller => "smaller",
            Selector::Bigger => "bigger",
            Selector::Darker => "darker",
            Selector::Lighter => "lighter",
            Selector::Closer => "closer",
            Selector::Farther => "farther",
        }
    }

    fn superlative(self) -> &'static str {
        match self {
            Selector::Left => "leftmost",
            Selector::Right => "rightmost",
            Selector::Upper => "uppermost",
            Selector::Lower => "lowermost",
            Selector::Smaller => "smallest",
            Selector::Bigger => "biggest",
            Selector::Darker => "darkest",
            Selector::Lighter => "lightest",
            Selector::Closer => "closest",
            Selector::Farther => "farthest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Existential {
    pub restrictor: AttrNP,
    pub body: AttrNP,
}

impl Existential {
    pub fn new(restrictor: AttrNP, body: AttrNP) -> Self {
        Existential { restrictor, body }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Caption {
    Existential(Existential),
    Logical {
        left: Existential,
        right: Existential,
        connective: Connective,
    },
    Number {
        comparator: Comparator,
        count: u8,
        restrictor: AttrNP,
        body: AttrNP,
    },
    Quantifier {
        comparator: Comparator,
        fraction: Fraction,
        restrictor: AttrNP,
        body: AttrNP,
    },
    Relational {
        subject: AttrNP,
        object: AttrNP,
        relation: Relation,
        negated: bool,
    },
    ImplicitRelational {
        selector: Selector,
        target: AttrNP,
        body: AttrNP,
    },
    Superlative {
        selector: Selector,
        target: AttrNP,
        body: AttrNP,
    },
}

impl Caption {
    /// Check the family-specific slot constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("ill-formed caption: {m}")));
        let exist_ok = |e: &Existential| !e.body.is_empty();
        match self {
            Caption::Existential(e) if !exist_ok(e) => bad("empty existential body"),
            Caption::Logical { left, right, .. } if !exist_ok(left) || !exist_ok(right) => {
                bad("empty existential body")
            }
            Caption::Number { count, body, .. } => {
                if *count > 5 {
                    bad("count above five")
                } else if body.is_empty() {
                    bad("empty body")
                } else {
                    Ok(())
                }
            }
            Caption::Quantifier {
                comparator,
                fraction,
                body,
                ..
            } => {
                if !Fraction::SET.contains(fraction) {
                    bad("fraction outside the licensed set")
                } else if fraction.is_extreme() && *comparator != Comparator::Exactly {
                    bad("'no' and 'all' take no modifier")
                } else if body.is_empty() {
                    bad("empty body")
                } else {
                    Ok(())
                }
            }
            Caption::ImplicitRelational { body, .. } | Caption::Superlative { body, .. }
                if body.is_empty() =>
            {
                bad("empty body")
            }
            _ => Ok(()),
        }
    }
}

/// Why a caption has no truth value for a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndefinedReason {
    /// Quantifier over an empty restrictor.
    EmptyRestrictor,
    /// Implicit-relational description without exactly two targets.
    NotExactlyTwo,
    /// Superlative description with fewer than two targets.
    TooFewTargets,
    /// The truth value depends on a comparison inside the margin.
    WithinMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Truth {
    True,
    False,
    Undefined(UndefinedReason),
}

impl Truth {
    pub fn from_bool(b: bool) -> Truth {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Truth::True => Some(true),
            Truth::False => Some(false),
            Truth::Undefined(_) => None,
        }
    }
}

fn evaluate_existential(e: &Existential, scene: &Scene) -> bool {
    scene
        .objects
        .iter()
        .any(|o| e.restrictor.matches(o) && e.body.matches(o))
}

/// Evaluate a caption against a scene.
pub fn evaluate(caption: &Caption, scene: &Scene) -> Truth {
    let objs = &scene.objects;
    match caption {
        Caption::Existential(e) => Truth::from_bool(evaluate_existential(e, scene)),
        Caption::Logical {
            left,
            right,
            connective,
        } => {
            let l = evaluate_existential(left, scene);
            let r = evaluate_existential(right, scene);
            Truth::from_bool(match connective {
                Connective::And => l && r,
                Connective::Or => l || r,
                Connective::If => !l || r,
                Connective::Iff => l == r,
            })
        }
        Caption::Number {
            comparator,
            count,
            restrictor,
            body,
        } => {
            let n = objs
                .iter()
                .filter(|o| restrictor.matches(o) && body.matches(o))
                .count();
            Truth::from_bool(comparator.holds(n.cmp(&(*count as usize))))
        }
        Caption::Quantifier {
            comparator,
            fraction,
            restrictor,
            body,
        } => {
            let total = objs.iter().filter(|o| restrictor.matches(o)).count();
            if total == 0 {
                return Truth::Undefined(UndefinedReason::EmptyRestrictor);
            }
            let n = objs
                .iter()
                .filter(|o| restrictor.matches(o) && body.matches(o))
                .count();
            Truth::from_bool(comparator.holds(fraction.compare(n, total)))
        }
        Caption::Relational {
            subject,
            object,
            relation,
            negated,
        } => {
            let mut ambiguous = false;
            for (i, a) in objs.iter().enumerate() {
                if !subject.matches(a) {
                    continue;
                }
                for (j, b) in objs.iter().enumerate() {
                    if i == j || !object.matches(b) {
                        continue;
                    }
                    let mut status = relation.status(a, b);
                    if *negated {
                        status = status.negate();
                    }
                    match status {
                        PairStatus::Holds => return Truth::True,
                        PairStatus::Ambiguous => ambiguous = true,
                        PairStatus::Fails => {}
                    }
                }
            }
            if ambiguous {
                Truth::Undefined(UndefinedReason::WithinMargin)
            } else {
                Truth::False
            }
        }
        Caption::ImplicitRelational {
            selector,
            target,
            body,
        } => {
            let targets: Vec<&WorldObject> = objs.iter().filter(|o| target.matches(o)).collect();
            if targets.len() != 2 {
                return Truth::Undefined(UndefinedReason::NotExactlyTwo);
            }
            let (a, b) = (targets[0], targets[1]);
            let chosen = if selector.prefers(a, b) {
                a
            } else if selector.prefers(b, a) {
                b
            } else {
                return Truth::Undefined(UndefinedReason::WithinMargin);
            };
            Truth::from_bool(body.matches(chosen))
        }
        Caption::Superlative {
            selector,
            target,
            body,
        } => {
            let targets: Vec<&WorldObject> = objs.iter().filter(|o| target.matches(o)).collect();
            if targets.len() < 2 {
                return Truth::Undefined(UndefinedReason::TooFewTargets);
            }
            let extremum = targets.iter().enumerate().find(|(i, a)| {
                targets
                    .iter()
                    .enumerate()
                    .all(|(j, b)| *i == j || selector.prefers(a, b))
            });
            match extremum {
                Some((_, o)) => Truth::from_bool(body.matches(o)),
                None => Truth::Undefined(UndefinedReason::WithinMargin),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Realization

const NUMBER_WORDS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];

/// A surface string together with the paraphrase that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Realization {
    pub surface: String,
    pub paraphrase: u8,
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn existential_forms(e: &Existential) -> u8 {
    if e.restrictor.merge(&e.body).is_some() {
        2
    } else {
        1
    }
}

/// Existential clause, lowercase, no period. Paraphrase 0 is the
/// "there is" form when the phrases merge.
fn existential_clause(e: &Existential, paraphrase: u8) -> String {
    match e.restrictor.merge(&e.body) {
        Some(merged) if paraphrase == 0 => format!("there is {}", merged.indefinite()),
        _ => format!("{} is {}", e.restrictor.indefinite(), e.body.predicate(false)),
    }
}

/// Number of licensed paraphrases of `caption`.
pub fn paraphrase_count(caption: &Caption) -> u8 {
    match caption {
        Caption::Existential(e) => existential_forms(e),
        Caption::Logical { left, right, .. } => existential_forms(left) * existential_forms(right),
        _ => 1,
    }
}

/// Realize `caption` with an explicit paraphrase index (taken modulo
/// [`paraphrase_count`]).
pub fn realize_with(caption: &Caption, paraphrase: u8) -> String {
    let paraphrase = paraphrase % paraphrase_count(caption);
    let body = match caption {
        Caption::Existential(e) => existential_clause(e, paraphrase),
        Caption::Logical {
            left,
            right,
            connective,
        } => {
            let nl = existential_forms(left);
            let l = existential_clause(left, paraphrase % nl);
            let r = existential_clause(right, paraphrase / nl);
            match connective {
                Connective::And => format!("{l} and {r}"),
                Connective::Or => format!("{l} or {r}"),
                Connective::If => format!("if {l} then {r}"),
                Connective::Iff => format!("{l} if and only if {r}"),
            }
        }
        Caption::Number {
            comparator,
            count,
            restrictor,
            body,
        } => {
            let plural = *count != 1;
            format!(
                "{} {} {} {} {}",
                comparator.words(),
                NUMBER_WORDS[*count as usize],
                restrictor.words(plural),
                if plural { "are" } else { "is" },
                body.predicate(plural)
            )
        }
        Caption::Quantifier {
            comparator,
            fraction,
            restrictor,
            body,
        } => {
            let quant = if fraction.is_extreme() {
                fraction.words().to_string()
            } else {
                format!("{} {}", comparator.words(), fraction.words())
            };
            format!("{quant} {} are {}", restrictor.words(true), body.predicate(true))
        }
        Caption::Relational {
            subject,
            object,
            relation,
            negated,
        } => format!(
            "{} is {}{} {}",
            subject.indefinite(),
            if *negated { "not " } else { "" },
            relation.words(),
            object.indefinite()
        ),
        Caption::ImplicitRelational {
            selector,
            target,
            body,
        } => format!(
            "the {} {} is {}",
            selector.comparative(),
            target.words(false),
            body.predicate(false)
        ),
        Caption::Superlative {
            selector,
            target,
            body,
        } => format!(
            "the {} {} is {}",
            selector.superlative(),
            target.words(false),
            body.predicate(false)
        ),
    };
    format!("{}.", capitalize(&body))
}

/// Realize `caption`, choosing uniformly among licensed paraphrases.
pub fn realize<R: Rng + ?Sized>(caption: &Caption, rng: &mut R) -> Realization {
    let paraphrase = rng.gen_range(0..paraphrase_count(caption));
    Realization {
        surface: realize_with(caption, paraphrase),
        paraphrase,
    }
}

// ---------------------------------------------------------------------------
// Tokens and vocabulary

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase, drop periods, split on whitespace.
pub fn tokenize(surface: &str) -> Vec<String> {
    surface
        .to_lowercase()
        .replace('.', " ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::ConfigInvalid(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if ids.len() != tokens.len() {
            return Err(Error::ConfigInvalid("duplicate vocabulary token".into()));
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn encode(&self, surface: &str) -> Vec<u32> {
        tokenize(surface).iter().map(|t| self.id(t)).collect()
    }
}

/// A caption set that exercises every lexical choice of the grammar at least
/// once (not every combination).
pub fn covering_captions() -> Vec<Caption> {
    let nps = AttrNP::all(&ShapeKind::ALL, &ColorName::ALL);
    let red = AttrNP::color(ColorName::Red);
    let square = AttrNP::shape(ShapeKind::Square);
    let mut out = Vec::new();
    for &np in &nps {
        for (a, b) in [(np, red), (square, np), (np, np)] {
            if !b.is_empty() {
                out.push(Caption::Existential(Existential::new(a, b)));
                for count in 0..=5 {
                    out.push(Caption::Number {
                        comparator: Comparator::Exactly,
                        count,
                        restrictor: a,
                        body: b,
                    });
                }
                out.push(Caption::Quantifier {
                    comparator: Comparator::Exactly,
                    fraction: Fraction::ALL,
                    restrictor: a,
                    body: b,
                });
                for selector in Selector::ALL {
                    out.push(Caption::ImplicitRelational {
                        selector,
                        target: a,
                        body: b,
                    });
                    out.push(Caption::Superlative {
                        selector,
                        target: a,
                        body: b,
                    });
                }
            }
            out.push(Caption::Relational {
                subject: a,
                object: b,
                relation: Relation::Left,
                negated: false,
            });
        }
    }
    let e = Existential::new(red, square);
    for connective in Connective::ALL {
        out.push(Caption::Logical {
            left: e,
            right: e,
            connective,
        });
    }
    for comparator in Comparator::ALL {
        for fraction in Fraction::SET {
            if !fraction.is_extreme() {
                out.push(Caption::Quantifier {
                    comparator,
                    fraction,
                    restrictor: square,
                    body: red,
                });
            }
        }
        out.push(Caption::Number {
            comparator,
            count: 2,
            restrictor: square,
            body: red,
        });
    }
    out.push(Caption::Quantifier {
        comparator: Comparator::Exactly,
        fraction: Fraction::NONE,
        restrictor: square,
        body: red,
    });
    for relation in Relation::ALL {
        for negated in [false, true] {
            out.push(Caption::Relational {
                subject: red,
                object: square,
                relation,
                negated,
            });
        }
    }
    out
}

/// The global vocabulary: `<pad>`, `<unk>`, then every realizable token in
/// sorted order.
pub fn build_vocabulary() -> Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB
        .get_or_init(|| {
            let mut words = BTreeSet::new();
            for caption in covering_captions() {
                for p in 0..paraphrase_count(&caption) {
                    words.extend(tokenize(&realize_with(&caption, p)));
                }
            }
            let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
                .into_iter()
                .chain(words)
                .collect();
            Vocabulary::from_tokens(tokens).expect("grammar vocabulary is well-formed")
        })
        .clone()
}

// ---------------------------------------------------------------------------
// Enumeration

/// Every well-formed caption of a family over the given attribute pools.
/// Logical captions are returned for all connectives and all ordered pairs of
/// enumerated existentials, which grows quadratically.
pub fn enumerate_captions(
    family: DatasetFamily,
    shapes: &[ShapeKind],
    colors: &[ColorName],
) -> Vec<Caption> {
    let nps = AttrNP::all(shapes, colors);
    let bodies: Vec<AttrNP> = nps.iter().copied().filter(|b| !b.is_empty()).collect();
    let pairs = || {
        nps.iter()
            .flat_map(|&r| bodies.iter().map(move |&b| (r, b)))
            .collect::<Vec<_>>()
    };
    let relational = |relations: &[Relation], negations: &[bool]| {
        let mut out = Vec::new();
        for &relation in relations {
            for &negated in negations {
                for &subject in &nps {
                    for &object in &nps {
                        out.push(Caption::Relational {
                            subject,
                            object,
                            relation,
                            negated,
                        });
                    }
                }
            }
        }
        out
    };
    match family {
        DatasetFamily::Existential | DatasetFamily::SingleShape => pairs()
            .into_iter()
            .map(|(r, b)| Caption::Existential(Existential::new(r, b)))
            .collect(),
        DatasetFamily::Logical => {
            let exist: Vec<Existential> = pairs()
                .into_iter()
                .map(|(r, b)| Existential::new(r, b))
                .collect();
            let mut out = Vec::new();
            for connective in Connective::ALL {
                for &left in &exist {
                    for &right in &exist {
                        out.push(Caption::Logical {
                            left,
                            right,
                            connective,
                        });
                    }
                }
            }
            out
        }
        DatasetFamily::Numbers => {
            let mut out = Vec::new();
            for comparator in Comparator::ALL {
                for count in 0..=5 {
                    for (restrictor, body) in pairs() {
                        out.push(Caption::Number {
                            comparator,
                            count,
                            restrictor,
                            body,
                        });
                    }
                }
            }
            out
        }
        DatasetFamily::Quantifiers => {
            let mut out = Vec::new();
            for comparator in Comparator::ALL {
                for fraction in Fraction::SET {
                    if fraction.is_extreme() && comparator != Comparator::Exactly {
                        continue;
                    }
                    for (restrictor, body) in pairs() {
                        out.push(Caption::Quantifier {
                            comparator,
                            fraction,
                            restrictor,
                            body,
                        });
                    }
                }
            }
            out
        }
        DatasetFamily::Relational => relational(&Relation::ALL, &[false]),
        DatasetFamily::SimpleSpatial => relational(&Relation::SPATIAL, &[false]),
        DatasetFamily::RelationalNegation => relational(&Relation::ALL, &[false, true]),
        DatasetFamily::ImplicitRelational | DatasetFamily::Superlatives => {
            let mut out = Vec::new();
            for selector in Selector::ALL {
                for (target, body) in pairs() {
                    out.push(if family == DatasetFamily::Superlatives {
                        Caption::Superlative {
                            selector,
                            target,
                            body,
                        }
                    } else {
                        Caption::ImplicitRelational {
                            selector,
                            target,
                            body,
                        }
                    });
                }
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Draw a phrase, half the time from the attributes of a scene object.
fn sample_np<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, allow_empty: bool) -> AttrNP {
    let (shape, color) = match scene.objects.choose(rng) {
        Some(o) if rng.gen_bool(0.5) => (o.shape, o.color),
        _ => (
            *ShapeKind::ALL.choose(rng).expect("non-empty"),
            *ColorName::ALL.choose(rng).expect("non-empty"),
        ),
    };
    loop {
        let np = match rng.gen_range(0..10) {
            0..=2 => AttrNP::shape(shape),
            3..=5 => AttrNP::color(color),
            6..=8 => AttrNP::both(color, shape),
            _ => AttrNP::ANY,
        };
        if allow_empty || !np.is_empty() {
            return np;
        }
    }
}

/// Restrictor/body pair whose body adds information to the restrictor.
fn sample_split<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> (AttrNP, AttrNP) {
    loop {
        let restrictor = sample_np(rng, scene, true);
        let body = sample_np(rng, scene, false);
        if !body.subsumed_by(&restrictor) {
            return (restrictor, body);
        }
    }
}

fn sample_existential<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> Existential {
    let (restrictor, body) = sample_split(rng, scene);
    Existential::new(restrictor, body)
}

fn sample_relational<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &Scene,
    relations: &[Relation],
    negated: bool,
) -> Option<Caption> {
    let subject = sample_np(rng, scene, true);
    let object = sample_np(rng, scene, true);
    let refs = |np: AttrNP| -> Vec<usize> {
        (0..scene.len())
            .filter(|&i| np.matches(&scene.objects[i]))
            .collect()
    };
    let (s, o) = (refs(subject), refs(object));
    if s.len() == 1 && s == o {
        // only satisfiable by one object standing in relation to itself
        return None;
    }
    Some(Caption::Relational {
        subject,
        object,
        relation: *relations.choose(rng).expect("non-empty"),
        negated,
    })
}

fn sample_candidate<R: Rng + ?Sized>(
    family: DatasetFamily,
    scene: &Scene,
    rng: &mut R,
) -> Option<Caption> {
    Some(match family {
        DatasetFamily::Existential | DatasetFamily::SingleShape => {
            Caption::Existential(sample_existential(rng, scene))
        }
        DatasetFamily::Logical => Caption::Logical {
            left: sample_existential(rng, scene),
            right: sample_existential(rng, scene),
            connective: *Connective::ALL.choose(rng).expect("non-empty"),
        },
        DatasetFamily::Numbers => {
            let comparator = *Comparator::ALL.choose(rng).expect("non-empty");
            let count = rng.gen_range(0..=5u8);
            if count == 0 && matches!(comparator, Comparator::LessThan | Comparator::AtLeast) {
                return None;
            }
            let (restrictor, body) = sample_split(rng, scene);
            Caption::Number {
                comparator,
                count,
                restrictor,
                body,
            }
        }
        DatasetFamily::Quantifiers => {
            let fraction = *Fraction::SET.choose(rng).expect("non-empty");
            let comparator = if fraction.is_extreme() {
                Comparator::Exactly
            } else {
                *Comparator::ALL.choose(rng).expect("non-empty")
            };
            let (restrictor, body) = sample_split(rng, scene);
            Caption::Quantifier {
                comparator,
                fraction,
                restrictor,
                body,
            }
        }
        DatasetFamily::Relational => sample_relational(rng, scene, &Relation::ALL, false)?,
        DatasetFamily::SimpleSpatial => sample_relational(rng, scene, &Relation::SPATIAL, false)?,
        DatasetFamily::RelationalNegation => {
            let negated = rng.gen_bool(0.5);
            sample_relational(rng, scene, &Relation::ALL, negated)?
        }
        DatasetFamily::ImplicitRelational | DatasetFamily::Superlatives => {
            let selector = *Selector::ALL.choose(rng).expect("non-empty");
            let (target, body) = sample_split(rng, scene);
            if family == DatasetFamily::Superlatives {
                Caption::Superlative {
                    selector,
                    target,
                    body,
                }
            } else {
                Caption::ImplicitRelational {
                    selector,
                    target,
                    body,
                }
            }
        }
    })
}

/// Sample a caption of `family` that evaluates to `target` on `scene`.
pub fn sample_caption<R: Rng + ?Sized>(
    family: DatasetFamily,
    scene: &Scene,
    target: bool,
    rng: &mut R,
) -> Result<Caption> {
    sample_caption_with_attempts(family, scene, target, rng, DEFAULT_CAPTION_ATTEMPTS)
}

pub fn sample_caption_with_attempts<R: Rng + ?Sized>(
    family: DatasetFamily,
    scene: &Scene,
    target: bool,
    rng: &mut R,
    attempts: usize,
) -> Result<Caption> {
    for _ in 0..attempts {
        let Some(caption) = sample_candidate(family, scene, rng) else {
            continue;
        };
        if evaluate(&caption, scene).as_bool() == Some(target) {
            debug_assert!(caption.validate().is_ok());
            return Ok(caption);
        }
    }
    Err(Error::SceneUnusable {
        family: family.to_string(),
        attempts,
    })
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&realize_with(self, 0))
    }
}
