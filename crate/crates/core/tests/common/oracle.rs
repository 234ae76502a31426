//! Brute-force reference semantics over a small attribute grid, written
//! against the relation definitions rather than the evaluator's code paths.

use filmworld::dataset::DatasetFamily;
use filmworld::semantics::{
    enumerate_captions, evaluate, AttrNP, Caption, Comparator, Connective, Existential, Relation, Selector, Truth,
    UndefinedReason, AREA_MARGIN, DISTANCE_MARGIN, LUMINANCE_MARGIN, POSITION_MARGIN,
};
use filmworld::worldgen::{ColorName, Scene, ShapeKind, WorldObject};

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Circle];
pub const COLORS: [ColorName; 3] = [ColorName::Red, ColorName::Green, ColorName::Blue];
pub const SIZES: [f64; 2] = [0.12, 0.24];
pub const SHADES: [f64; 2] = [0.6, 1.0];
pub const CENTERS: usize = 8;
/// Geometric cells: 8 x-centers, 8 y-centers, 2 sizes, 2 shades.
pub const CELLS: usize = CENTERS * CENTERS * 2 * 2;
pub const TYPES: usize = 9;

pub const ATTRIBUTE_FAMILIES: [DatasetFamily; 5] = [
    DatasetFamily::Existential,
    DatasetFamily::SingleShape,
    DatasetFamily::Logical,
    DatasetFamily::Numbers,
    DatasetFamily::Quantifiers,
];
pub const GEOMETRIC_FAMILIES: [DatasetFamily; 5] = [
    DatasetFamily::Relational,
    DatasetFamily::SimpleSpatial,
    DatasetFamily::RelationalNegation,
    DatasetFamily::ImplicitRelational,
    DatasetFamily::Superlatives,
];

/// Object of attribute type `t` (0..9) in geometric cell `g` (0..256).
pub fn object(t: usize, g: usize) -> WorldObject {
    let cx = g % CENTERS;
    let cy = (g / CENTERS) % CENTERS;
    let size = SIZES[(g / 64) % 2];
    let shade = SHADES[g / 128];
    WorldObject {
        shape: SHAPES[t / 3],
        color: COLORS[t % 3],
        shade,
        center: [(cx as f64 + 0.5) / CENTERS as f64, (cy as f64 + 0.5) / CENTERS as f64],
        size: [size, size],
        rotation: 0.0,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Key {
    X,
    Y,
    Dist,
    Lum,
    Area,
}

/// `a` sits clearly below `b` on the key.
fn below(key: Key, a: &WorldObject, b: &WorldObject) -> bool {
    match key {
        Key::X => a.center[0] + POSITION_MARGIN <= b.center[0],
        Key::Y => a.center[1] + POSITION_MARGIN <= b.center[1],
        Key::Dist => a.center_distance() + DISTANCE_MARGIN <= b.center_distance(),
        Key::Lum => a.luminance() + LUMINANCE_MARGIN <= b.luminance(),
        Key::Area => a.area() * (1.0 + AREA_MARGIN) <= b.area(),
    }
}

/// (key, true when the smaller value wins)
fn relation_key(r: Relation) -> Option<(Key, bool)> {
    Some(match r {
        Relation::Left => (Key::X, true),
        Relation::Right => (Key::X, false),
        Relation::Above => (Key::Y, true),
        Relation::Below => (Key::Y, false),
        Relation::Closer => (Key::Dist, true),
        Relation::Farther => (Key::Dist, false),
        Relation::Darker => (Key::Lum, true),
        Relation::Lighter => (Key::Lum, false),
        Relation::Smaller => (Key::Area, true),
        Relation::Bigger => (Key::Area, false),
        _ => return None,
    })
}

fn selector_key(s: Selector) -> (Key, bool) {
    match s {
        Selector::Left => (Key::X, true),
        Selector::Right => (Key::X, false),
        Selector::Upper => (Key::Y, true),
        Selector::Lower => (Key::Y, false),
        Selector::Smaller => (Key::Area, true),
        Selector::Bigger => (Key::Area, false),
        Selector::Darker => (Key::Lum, true),
        Selector::Lighter => (Key::Lum, false),
        Selector::Closer => (Key::Dist, true),
        Selector::Farther => (Key::Dist, false),
    }
}

fn wins((key, less): (Key, bool), a: &WorldObject, b: &WorldObject) -> bool {
    if less {
        below(key, a, b)
    } else {
        below(key, b, a)
    }
}

/// Bitmask of objects an attribute phrase denotes.
fn denote(np: &AttrNP, objs: &[WorldObject]) -> u32 {
    objs.iter().enumerate().fold(0, |m, (i, o)| {
        let ok = np.shape.map_or(true, |s| s == o.shape) && np.color.map_or(true, |c| c == o.color);
        if ok {
            m | 1 << i
        } else {
            m
        }
    })
}

fn members(mask: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |i| mask >> i & 1 == 1)
}

fn exists(e: &Existential, objs: &[WorldObject]) -> bool {
    denote(&e.restrictor, objs) & denote(&e.body, objs) != 0
}

fn compare(c: Comparator, lhs: u64, rhs: u64) -> bool {
    match c {
        Comparator::LessThan => lhs < rhs,
        Comparator::MoreThan => lhs > rhs,
        Comparator::AtMost => lhs <= rhs,
        Comparator::AtLeast => lhs >= rhs,
        Comparator::Exactly => lhs == rhs,
        Comparator::NotExactly => lhs != rhs,
    }
}

/// Three-valued pair outcome, ordered so the join is `max`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pair {
    No,
    Unknown,
    Yes,
}

fn pair(r: Relation, negated: bool, a: &WorldObject, b: &WorldObject) -> Pair {
    let v = match relation_key(r) {
        Some(k) => {
            if wins(k, a, b) {
                Pair::Yes
            } else if wins(k, b, a) {
                Pair::No
            } else {
                Pair::Unknown
            }
        }
        None => {
            let same = match r {
                Relation::SameShape | Relation::DifferentShape => a.shape == b.shape,
                _ => a.color == b.color,
            };
            let want_same = matches!(r, Relation::SameShape | Relation::SameColor);
            if same == want_same {
                Pair::Yes
            } else {
                Pair::No
            }
        }
    };
    match (negated, v) {
        (true, Pair::Yes) => Pair::No,
        (true, Pair::No) => Pair::Yes,
        _ => v,
    }
}

fn truth(b: bool) -> Truth {
    if b {
        Truth::True
    } else {
        Truth::False
    }
}

pub fn oracle(caption: &Caption, objs: &[WorldObject]) -> Truth {
    match caption {
        Caption::Existential(e) => truth(exists(e, objs)),
        Caption::Logical { left, right, connective } => {
            let (l, r) = (exists(left, objs), exists(right, objs));
            truth(match connective {
                Connective::And => l & r,
                Connective::Or => l | r,
                Connective::If => l <= r,
                Connective::Iff => l == r,
            })
        }
        Caption::Number { comparator, count, restrictor, body } => {
            let n = (denote(restrictor, objs) & denote(body, objs)).count_ones() as u64;
            truth(compare(*comparator, n, *count as u64))
        }
        Caption::Quantifier { comparator, fraction, restrictor, body } => {
            let r = denote(restrictor, objs);
            if r == 0 {
                return Truth::Undefined(UndefinedReason::EmptyRestrictor);
            }
            let hits = (r & denote(body, objs)).count_ones() as u64;
            let total = r.count_ones() as u64;
            // hits/total against num/den, cross-multiplied
            truth(compare(*comparator, hits * fraction.den as u64, fraction.num as u64 * total))
        }
        Caption::Relational { subject, object, relation, negated } => {
            let (s, o) = (denote(subject, objs), denote(object, objs));
            let best = members(s)
                .flat_map(|i| members(o).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| pair(*relation, *negated, &objs[i], &objs[j]))
                .max()
                .unwrap_or(Pair::No);
            match best {
                Pair::Yes => Truth::True,
                Pair::No => Truth::False,
                Pair::Unknown => Truth::Undefined(UndefinedReason::WithinMargin),
            }
        }
        Caption::ImplicitRelational { selector, target, body } => {
            let t: Vec<usize> = members(denote(target, objs)).collect();
            if t.len() != 2 {
                return Truth::Undefined(UndefinedReason::NotExactlyTwo);
            }
            let k = selector_key(*selector);
            let pick = if wins(k, &objs[t[0]], &objs[t[1]]) {
                t[0]
            } else if wins(k, &objs[t[1]], &objs[t[0]]) {
                t[1]
            } else {
                return Truth::Undefined(UndefinedReason::WithinMargin);
            };
            truth(denote(body, objs) >> pick & 1 == 1)
        }
        Caption::Superlative { selector, target, body } => {
            let t: Vec<usize> = members(denote(target, objs)).collect();
            if t.len() < 2 {
                return Truth::Undefined(UndefinedReason::TooFewTargets);
            }
            let k = selector_key(*selector);
            let champions: Vec<usize> = t
                .iter()
                .copied()
                .filter(|&i| t.iter().all(|&j| j == i || wins(k, &objs[i], &objs[j])))
                .collect();
            match champions.as_slice() {
                [c] => truth(denote(body, objs) >> c & 1 == 1),
                _ => Truth::Undefined(UndefinedReason::WithinMargin),
            }
        }
    }
}

/// Deterministic 64-bit mixer for walking the grid.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// All multisets of at most four attribute types (715 of them).
pub fn type_multisets() -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..4 {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for t in start..TYPES {
                let mut v: Vec<usize> = m.clone();
                v.push(t);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Scenes for the attribute-only families: every type multiset, each object
/// placed in a grid cell chosen by a fixed walk.
pub fn attribute_scenes() -> Vec<Vec<WorldObject>> {
    type_multisets()
        .into_iter()
        .enumerate()
        .map(|(s, types)| {
            types
                .iter()
                .enumerate()
                .map(|(k, &t)| object(t, (mix((s * 4 + k) as u64) % CELLS as u64) as usize))
                .collect()
        })
        .collect()
}

/// Scenes for the geometric families.
///
/// * no objects, and every single object of the grid
/// * every ordered pair of grid cells, attribute pair cycling through all 81
/// * `extra` scenes each of three and four objects, drawn by a fixed walk
pub fn geometric_scenes(pair_stride: usize, extra: usize) -> Vec<Vec<WorldObject>> {
    let mut out = vec![vec![]];
    for t in 0..TYPES {
        for g in 0..CELLS {
            out.push(vec![object(t, g)]);
        }
    }
    let mut k = 0usize;
    for ga in (0..CELLS).step_by(pair_stride) {
        for gb in 0..CELLS {
            let types = k % (TYPES * TYPES);
            k += 1;
            out.push(vec![object(types / TYPES, ga), object(types % TYPES, gb)]);
        }
    }
    for n in 3..=4 {
        for s in 0..extra {
            let scene = (0..n)
                .map(|i| {
                    let h = mix(((n * 1_000_003 + s) * 8 + i) as u64);
                    object((h % TYPES as u64) as usize, ((h >> 8) % CELLS as u64) as usize)
                })
                .collect();
            out.push(scene);
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub scenes: usize,
    pub captions: usize,
    pub pairs: u64,
    pub mismatches: u64,
    pub first: Option<String>,
}

fn compare_family(families: &[DatasetFamily], scenes: &[Vec<WorldObject>], report: &mut OracleReport) {
    for &family in families {
        let captions = enumerate_captions(family, &SHAPES, &COLORS);
        report.captions += captions.len();
        for objs in scenes {
            let scene = Scene::new(objs.clone());
            for c in &captions {
                report.pairs += 1;
                let (got, want) = (evaluate(c, &scene), oracle(c, objs));
                if got != want {
                    report.mismatches += 1;
                    if report.first.is_none() {
                        report.first = Some(format!("{c:?} on {objs:?}: evaluate {got:?}, oracle {want:?}"));
                    }
                }
            }
        }
    }
}

pub fn run(pair_stride: usize, extra: usize) -> OracleReport {
    let mut report = OracleReport::default();
    let attr = attribute_scenes();
    let geo = geometric_scenes(pair_stride, extra);
    report.scenes = attr.len() + geo.len();
    compare_family(&ATTRIBUTE_FAMILIES, &attr, &mut report);
    compare_family(&GEOMETRIC_FAMILIES, &geo, &mut report);
    report
}
