//! The synthetic world: latents are points in a low-dimensional space, and a
//! request is a conjunction of geometric regions the generated point must land
//! in. Every region has a signed Euclidean margin, which the analytic verifier
//! turns into a calibrated Yes/No confidence.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Default latent dimensionality.
pub const DEFAULT_DIM: usize = 2;
/// Largest supported latent dimensionality.
pub const MAX_DIM: usize = 8;
/// Quantization buckets per predicate kind.
pub const BUCKETS: u8 = 8;
/// Default verifier temperature.
pub const DEFAULT_VERIFIER_TEMPERATURE: f64 = 0.15;
/// Minimum margin every target-distribution center keeps from every boundary.
pub const CENTER_MARGIN: f64 = 0.5;
/// Shared standard deviation of target mixture components.
pub const TARGET_STD: f64 = 0.2;
/// Samples used to check a target distribution at construction.
pub const TARGET_CHECK_SAMPLES: usize = 10_000;

/// Object must lie within this radius to be "in frame".
pub const CANVAS_RADIUS: f64 = 5.0;
/// Radius within which an object counts as plausibly shaped.
pub const PLAUSIBLE_RADIUS: f64 = 4.0;
/// Radius below which an object is degenerate.
pub const DEGENERATE_RADIUS: f64 = 0.1;

const SEARCH_HALF_WIDTH: f64 = 3.6;
const GRID_STEP: f64 = 0.05;
const RANDOM_SEARCH_POINTS: usize = 40_000;
const MAX_CONSTRAINT_DRAWS: usize = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot parse prompt text: {0}")]
    Parse(String),
    #[error("no feasible constraint set for task {task} at tier {tier:?}")]
    Infeasible { task: String, tier: Tier },
    #[error("target distribution for {0} fails its satisfaction check")]
    Target(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    /// Number of constraints a prompt of this tier carries.
    pub fn constraint_count(self) -> usize {
        match self {
            Tier::Easy => 1,
            Tier::Medium => 2,
            Tier::Hard => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    HalfPlane,
    RadiusBand,
    AngleSector,
    CoordBand,
}

impl PredicateKind {
    pub const ALL: [PredicateKind; 4] = [
        PredicateKind::HalfPlane,
        PredicateKind::RadiusBand,
        PredicateKind::AngleSector,
        PredicateKind::CoordBand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredicateKind::HalfPlane => "half_plane",
            PredicateKind::RadiusBand => "radius_band",
            PredicateKind::AngleSector => "angle_sector",
            PredicateKind::CoordBand => "coord_band",
        }
    }

    /// Kinds expressible in dimension `dim` (sectors need a plane).
    pub fn available(dim: usize) -> Vec<PredicateKind> {
        Self::ALL
            .into_iter()
            .filter(|k| dim >= 2 || *k != PredicateKind::AngleSector)
            .collect()
    }
}

/// A region of latent space. `margin` is positive strictly inside the region
/// and its magnitude is the Euclidean distance to the region boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributePredicate {
    /// `sign * z[axis] > offset`
    HalfPlane { axis: usize, sign: i8, offset: f64 },
    /// `lo < |z| < hi`; `lo == 0` drops the inner boundary.
    RadiusBand { lo: f64, hi: f64 },
    /// Polar angle of `(z[0], z[1])` in `(lo, lo + width)`, measured
    /// counter-clockwise; `hi - lo` must lie in `(0, pi]`.
    AngleSector { lo: f64, hi: f64 },
    /// `lo < z[axis] < hi`
    CoordBand { axis: usize, lo: f64, hi: f64 },
}

impl AttributePredicate {
    pub fn kind(&self) -> PredicateKind {
        match self {
            AttributePredicate::HalfPlane { .. } => PredicateKind::HalfPlane,
            AttributePredicate::RadiusBand { .. } => PredicateKind::RadiusBand,
            AttributePredicate::AngleSector { .. } => PredicateKind::AngleSector,
            AttributePredicate::CoordBand { .. } => PredicateKind::CoordBand,
        }
    }

    /// The primitive for `(kind, bucket)` in dimension `dim`.
    pub fn primitive(kind: PredicateKind, bucket: u8, dim: usize) -> Self {
        assert!(bucket < BUCKETS, "bucket out of range");
        let b = bucket as usize;
        let bf = bucket as f64;
        match kind {
            PredicateKind::HalfPlane => AttributePredicate::HalfPlane {
                axis: (b >> 2) % dim,
                sign: if b & 1 == 0 { 1 } else { -1 },
                offset: if b & 2 == 0 { 0.0 } else { 0.75 },
            },
            PredicateKind::RadiusBand => {
                let lo = 0.25 * (bf + 1.0);
                AttributePredicate::RadiusBand { lo, hi: lo + 1.75 }
            }
            PredicateKind::AngleSector => {
                let lo = -PI + bf * FRAC_PI_4;
                AttributePredicate::AngleSector { lo, hi: lo + FRAC_PI_2 }
            }
            PredicateKind::CoordBand => {
                let lo = -2.5 + 1.2 * (b >> 1) as f64;
                AttributePredicate::CoordBand { axis: (b & 1) % dim, lo, hi: lo + 1.7 }
            }
        }
    }

    /// Signed distance to the region boundary.
    pub fn margin(&self, z: &[f64]) -> f64 {
        match *self {
            AttributePredicate::HalfPlane { axis, sign, offset } => sign as f64 * z[axis] - offset,
            AttributePredicate::RadiusBand { lo, hi } => {
                let r = norm(z);
                if lo == 0.0 {
                    hi - r
                } else {
                    (r - lo).min(hi - r)
                }
            }
            AttributePredicate::AngleSector { lo, hi } => {
                let (x, y) = (z[0], z[1]);
                let dist = ray_distance(x, y, lo).min(ray_distance(x, y, hi));
                if x == 0.0 && y == 0.0 {
                    return 0.0;
                }
                let rel = (y.atan2(x) - lo).rem_euclid(2.0 * PI);
                if rel > 0.0 && rel < hi - lo {
                    dist
                } else {
                    -dist
                }
            }
            AttributePredicate::CoordBand { axis, lo, hi } => (z[axis] - lo).min(hi - z[axis]),
        }
    }

    pub fn satisfied(&self, z: &[f64]) -> bool {
        self.margin(z) > 0.0
    }

    /// Gradient direction of the margin (unit length where defined).
    pub fn margin_direction(&self, z: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut g: Vec<f64> = (0..z.len())
            .map(|i| {
                let mut p = z.to_vec();
                let mut m = z.to_vec();
                p[i] += h;
                m[i] -= h;
                (self.margin(&p) - self.margin(&m)) / (2.0 * h)
            })
            .collect();
        let n = norm(&g);
        if n > 0.0 {
            g.iter_mut().for_each(|v| *v /= n);
        }
        g
    }

    /// Surface text, e.g. `x0 > 0` or `0.5 < |z| < 2.25`.
    pub fn render(&self) -> String {
        match *self {
            AttributePredicate::HalfPlane { axis, sign, offset } => {
                let neg = if sign < 0 { "-" } else { "" };
                format!("{neg}x{axis} > {offset}")
            }
            AttributePredicate::RadiusBand { lo, hi } => {
                if lo == 0.0 {
                    format!("|z| < {hi}")
                } else {
                    format!("{lo} < |z| < {hi}")
                }
            }
            AttributePredicate::AngleSector { lo, hi } => format!("{lo} < angle(z) < {hi}"),
            AttributePredicate::CoordBand { axis, lo, hi } => format!("{lo} < x{axis} < {hi}"),
        }
    }

    /// Inverse of [`AttributePredicate::render`].
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || EnvError::Parse(s.to_string());
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let axis = |t: &str| -> Result<usize> {
            t.trim().strip_prefix('x').ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())
        };
        let parts: Vec<&str> = s.split(" < ").collect();
        match parts.as_slice() {
            [lhs, rhs] if lhs.trim() == "|z|" => Ok(AttributePredicate::RadiusBand { lo: 0.0, hi: num(rhs)? }),
            [lo, mid, hi] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                match mid.trim() {
                    "|z|" => Ok(AttributePredicate::RadiusBand { lo, hi }),
                    "angle(z)" => Ok(AttributePredicate::AngleSector { lo, hi }),
                    m => Ok(AttributePredicate::CoordBand { axis: axis(m)?, lo, hi }),
                }
            }
            [single] => {
                let (lhs, rhs) = single.split_once(" > ").ok_or_else(bad)?;
                let (sign, var) = match lhs.trim().strip_prefix('-') {
                    Some(v) => (-1, v),
                    None => (1, lhs.trim()),
                };
                Ok(AttributePredicate::HalfPlane { axis: axis(var)?, sign, offset: num(rhs)? })
            }
            _ => Err(bad()),
        }
    }
}

fn ray_distance(x: f64, y: f64, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    if x * c + y * s > 0.0 {
        (x * s - y * c).abs()
    } else {
        (x * x + y * y).sqrt()
    }
}

pub fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The synthetic verifier's confidence that `z` satisfies `predicate`.
pub fn analytic_verify(z: &[f64], predicate: &AttributePredicate, temperature: f64) -> f64 {
    assert!(temperature > 0.0, "verifier temperature must be positive");
    logistic(predicate.margin(z) / temperature)
}

/// Scene-level regions every compliant object satisfies regardless of the
/// request: in frame, plausibly sized, not collapsed onto the origin.
pub fn existence_region() -> AttributePredicate {
    AttributePredicate::RadiusBand { lo: 0.0, hi: CANVAS_RADIUS }
}

pub fn plausible_region() -> AttributePredicate {
    AttributePredicate::RadiusBand { lo: 0.0, hi: PLAUSIBLE_RADIUS }
}

pub fn non_degenerate_region() -> AttributePredicate {
    AttributePredicate::RadiusBand { lo: DEGENERATE_RADIUS, hi: CANVAS_RADIUS }
}

fn scene_regions() -> [AttributePredicate; 3] {
    [existence_region(), plausible_region(), non_degenerate_region()]
}

/// A compositional task: which predicate kinds a prompt combines, in order.
/// Easy prompts use the first kind, Medium the first two, Hard all three.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskKind {
    pub name: String,
    pub kinds: [PredicateKind; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub dim: usize,
    pub tasks: Vec<TaskKind>,
}

impl Catalog {
    /// The first `n_tasks` task kinds of the standard enumeration. Triples of
    /// distinct kinds come first, interleaved so that leading kinds rotate.
    pub fn standard(n_tasks: usize, dim: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(EnvError::Config(format!("latent dimension {dim} outside 1..={MAX_DIM}")));
        }
        let kinds = PredicateKind::available(dim);
        let k = kinds.len();
        let mut order: Vec<[usize; 3]> = Vec::new();
        let distinct = k * (k - 1) * (k - 2);
        for i in 0..distinct {
            let a = i % k;
            let rem: Vec<usize> = (0..k).filter(|&x| x != a).collect();
            let j = i / k;
            let b = rem[j % rem.len()];
            let rem2: Vec<usize> = rem.iter().copied().filter(|&x| x != b).collect();
            let c = rem2[(j / rem.len()) % rem2.len()];
            order.push([a, b, c]);
        }
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    if !order.contains(&[a, b, c]) {
                        order.push([a, b, c]);
                    }
                }
            }
        }
        if n_tasks == 0 || n_tasks > order.len() {
            return Err(EnvError::Config(format!(
                "task count {n_tasks} outside 1..={} for dimension {dim}",
                order.len()
            )));
        }
        let tasks = order[..n_tasks]
            .iter()
            .map(|idx| {
                let ks = [kinds[idx[0]], kinds[idx[1]], kinds[idx[2]]];
                TaskKind { name: ks.map(|x| x.name()).join("+"), kinds: ks }
            })
            .collect();
        Ok(Catalog { dim, tasks })
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }
}

/// A synthetic user request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub task: String,
    pub tier: Tier,
    pub constraints: Vec<AttributePredicate>,
    pub text: String,
}

const TEXT_PREFIX: &str = "place the object so that ";

/// Deterministic surface text for a constraint list.
pub fn render_text(constraints: &[AttributePredicate]) -> String {
    let mut s = String::from(TEXT_PREFIX);
    for (i, c) in constraints.iter().enumerate() {
        if i > 0 {
            s.push_str(" and ");
        }
        let _ = write!(s, "{}", c.render());
    }
    s
}

/// Inverse of [`render_text`].
pub fn parse_text(text: &str) -> Result<Vec<AttributePredicate>> {
    let body = text
        .strip_prefix(TEXT_PREFIX)
        .ok_or_else(|| EnvError::Parse(text.to_string()))?;
    body.split(" and ").map(AttributePredicate::parse).collect()
}

impl PromptSpec {
    pub fn new(id: String, task: String, tier: Tier, constraints: Vec<AttributePredicate>) -> Self {
        let text = render_text(&constraints);
        PromptSpec { id, task, tier, constraints, text }
    }
}

/// Candidate points for feasibility search: a regular grid for `dim <= 2`,
/// a fixed pseudo-random cloud otherwise.
fn search_points(dim: usize) -> Vec<Vec<f64>> {
    if dim <= 2 {
        let n = (2.0 * SEARCH_HALF_WIDTH / GRID_STEP).round() as i64;
        let coord = |i: i64| -SEARCH_HALF_WIDTH + i as f64 * GRID_STEP;
        if dim == 1 {
            (0..=n).map(|i| vec![coord(i)]).collect()
        } else {
            (0..=n).flat_map(|i| (0..=n).map(move |j| vec![coord(i), coord(j)])).collect()
        }
    } else {
        let mut rng = Rng::seed_from_u64(0x5eed_0000 + dim as u64);
        (0..RANDOM_SEARCH_POINTS)
            .map(|_| (0..dim).map(|_| rng.random_range(-SEARCH_HALF_WIDTH..SEARCH_HALF_WIDTH)).collect())
            .collect()
    }
}

/// Points that satisfy every predicate and the scene regions by at least
/// `margin`, ordered by decreasing worst-case margin.
fn feasible_points(preds: &[AttributePredicate], dim: usize, margin: f64) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = search_points(dim)
        .into_iter()
        .filter_map(|z| {
            let m = preds
                .iter()
                .chain(scene_regions().iter())
                .map(|p| p.margin(&z))
                .fold(f64::INFINITY, f64::min);
            (m >= margin).then_some((m, z))
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// Feasibility of constraint combinations via per-predicate bitsets over a
/// shared point set.
struct FeasibilityCache {
    points: Vec<Vec<f64>>,
    scene: Vec<u64>,
    masks: HashMap<String, Vec<u64>>,
}

impl FeasibilityCache {
    fn new(dim: usize) -> Self {
        let points = search_points(dim);
        let mut cache = FeasibilityCache { points, scene: Vec::new(), masks: HashMap::new() };
        let regions = scene_regions();
        cache.scene = regions.iter().map(|r| cache.mask_of(r)).fold(cache.full(), |a, b| and(&a, &b));
        cache
    }

    fn full(&self) -> Vec<u64> {
        vec![u64::MAX; self.points.len().div_ceil(64)]
    }

    fn mask_of(&self, pred: &AttributePredicate) -> Vec<u64> {
        let mut mask = vec![0u64; self.points.len().div_ceil(64)];
        for (i, z) in self.points.iter().enumerate() {
            if pred.margin(z) >= CENTER_MARGIN {
                mask[i / 64] |= 1 << (i % 64);
            }
        }
        mask
    }

    fn feasible(&mut self, preds: &[AttributePredicate]) -> bool {
        let mut acc = self.scene.clone();
        for p in preds {
            let key = format!("{p:?}");
            if !self.masks.contains_key(&key) {
                let m = self.mask_of(p);
                self.masks.insert(key.clone(), m);
            }
            acc = and(&acc, &self.masks[&key]);
        }
        acc.iter().any(|w| *w != 0)
    }
}

fn and(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.iter().zip(b).map(|(x, y)| x & y).collect()
}

fn draw_constraints(
    task: &TaskKind,
    tier: Tier,
    dim: usize,
    rng: &mut Rng,
    cache: &mut FeasibilityCache,
) -> Result<Vec<AttributePredicate>> {
    let n = tier.constraint_count();
    for _ in 0..MAX_CONSTRAINT_DRAWS {
        let preds: Vec<AttributePredicate> = task.kinds[..n]
            .iter()
            .map(|&k| AttributePredicate::primitive(k, rng.random_range(0..BUCKETS), dim))
            .collect();
        let duplicate = (0..n).any(|i| (i + 1..n).any(|j| preds[i] == preds[j]));
        if !duplicate && cache.feasible(&preds) {
            return Ok(preds);
        }
    }
    Err(EnvError::Infeasible { task: task.name.clone(), tier })
}

/// Generates `|catalog| * per_task_count` prompts. Each task receives
/// Easy/Medium/Hard prompts in exactly the proportion `tier_ratio`; output is
/// sorted by id and a pure function of the arguments.
pub fn generate_prompt_set(
    catalog: &Catalog,
    per_task_count: usize,
    tier_ratio: [usize; 3],
    seed: u64,
) -> Result<Vec<PromptSpec>> {
    let unit: usize = tier_ratio.iter().sum();
    if unit == 0 || per_task_count % unit != 0 {
        return Err(EnvError::Config(format!(
            "per-task count {per_task_count} is not divisible into ratio {}:{}:{}",
            tier_ratio[0], tier_ratio[1], tier_ratio[2]
        )));
    }
    let scale = per_task_count / unit;
    let mut cache = FeasibilityCache::new(catalog.dim);
    let mut out = Vec::with_capacity(catalog.tasks.len() * per_task_count);
    for (ti, task) in catalog.tasks.iter().enumerate() {
        let mut rng = crate::rng::stream(seed, &[0x70_726f_6d70, ti as u64]);
        let mut k = 0;
        for (tier, &r) in Tier::ALL.iter().zip(tier_ratio.iter()) {
            for _ in 0..r * scale {
                let constraints = draw_constraints(task, *tier, catalog.dim, &mut rng, &mut cache)?;
                out.push(PromptSpec::new(format!("t{ti:02}-{k:05}"), task.name.clone(), *tier, constraints));
                k += 1;
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Writes prompts as line-delimited JSON sorted by id.
pub fn write_prompts<W: Write>(prompts: &[PromptSpec], mut w: W) -> Result<()> {
    let mut sorted: Vec<&PromptSpec> = prompts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for p in sorted {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_prompts<R: BufRead>(r: R) -> Result<Vec<PromptSpec>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Mixture of isotropic Gaussians whose centers satisfy every constraint of a
/// prompt by at least [`CENTER_MARGIN`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub prompt_id: String,
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl TargetDistribution {
    /// Builds the two-component target for `prompt`: the most robust feasible
    /// point plus the feasible point farthest from it. The satisfaction rate is
    /// checked on [`TARGET_CHECK_SAMPLES`] draws, shrinking the spread if needed.
    pub fn for_prompt(prompt: &PromptSpec, dim: usize) -> Result<Self> {
        let pts = feasible_points(&prompt.constraints, dim, CENTER_MARGIN);
        let first = pts.first().ok_or_else(|| EnvError::Target(prompt.id.clone()))?.1.clone();
        let second = pts
            .iter()
            .max_by(|a, b| dist2(&a.1, &first).total_cmp(&dist2(&b.1, &first)))
            .map(|p| p.1.clone())
            .unwrap_or_else(|| first.clone());
        let mut dist = TargetDistribution { prompt_id: prompt.id.clone(), centers: vec![first, second], std: TARGET_STD };
        let mut rng = crate::rng::stream(0, &[crate::rng::hash_str(&prompt.id)]);
        for _ in 0..4 {
            let ok = (0..TARGET_CHECK_SAMPLES)
                .filter(|_| {
                    let z = target_sample(&dist, &mut rng);
                    prompt.constraints.iter().all(|c| c.satisfied(&z))
                })
                .count();
            if ok as f64 >= 0.95 * TARGET_CHECK_SAMPLES as f64 {
                return Ok(dist);
            }
            dist.std *= 0.5;
        }
        Err(EnvError::Target(prompt.id.clone()))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks a component uniformly and adds isotropic Gaussian noise.
pub fn target_sample(dist: &TargetDistribution, rng: &mut Rng) -> Vec<f64> {
    let c = &dist.centers[rng.random_range(0..dist.centers.len())];
    c.iter()
        .map(|&m| {
            let e: f64 = rng.sample(StandardNormal);
            m + dist.std * e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn pool(dim: usize) -> Vec<AttributePredicate> {
        PredicateKind::available(dim)
            .into_iter()
            .flat_map(|k| (0..BUCKETS).map(move |b| AttributePredicate::primitive(k, b, dim)))
            .collect()
    }

    #[test]
    fn full_scale_prompt_counts() {
        let catalog = Catalog::standard(39, 2).unwrap();
        let prompts = generate_prompt_set(&catalog, 500, [3, 5, 2], 11).unwrap();
        assert_eq!(prompts.len(), 19_500);
        for task in &catalog.tasks {
            let of_task: Vec<_> = prompts.iter().filter(|p| p.task == task.name).collect();
            let count = |t| of_task.iter().filter(|p| p.tier == t).count();
            assert_eq!((count(Tier::Easy), count(Tier::Medium), count(Tier::Hard)), (150, 250, 100));
        }
    }

    #[test]
    fn single_task_ratio_counts() {
        let catalog = Catalog::standard(1, 2).unwrap();
        let prompts = generate_prompt_set(&catalog, 10, [3, 5, 2], 0).unwrap();
        let count = |t| prompts.iter().filter(|p| p.tier == t).count();
        assert_eq!((count(Tier::Easy), count(Tier::Medium), count(Tier::Hard)), (3, 5, 2));
        for p in &prompts {
            assert_eq!(p.constraints.len(), p.tier.constraint_count());
        }
    }

    #[test]
    fn generation_is_deterministic_and_rejects_bad_ratio() {
        let catalog = Catalog::standard(4, 2).unwrap();
        let a = generate_prompt_set(&catalog, 20, [3, 5, 2], 5).unwrap();
        let b = generate_prompt_set(&catalog, 20, [3, 5, 2], 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(generate_prompt_set(&catalog, 11, [3, 5, 2], 5), Err(EnvError::Config(_))));
        assert!(matches!(generate_prompt_set(&catalog, 10, [0, 0, 0], 5), Err(EnvError::Config(_))));
    }

    #[test]
    fn ids_unique_and_sorted() {
        let catalog = Catalog::standard(12, 2).unwrap();
        let prompts = generate_prompt_set(&catalog, 10, [3, 5, 2], 1).unwrap();
        for w in prompts.windows(2) {
            assert!(w[0].id < w[1].id);
        }
    }

    #[test]
    fn catalog_sizes() {
        assert_eq!(Catalog::standard(12, 2).unwrap().tasks.len(), 12);
        assert!(Catalog::standard(65, 2).is_err());
        assert!(Catalog::standard(12, 0).is_err());
        let one_d = Catalog::standard(5, 1).unwrap();
        assert!(one_d.tasks.iter().all(|t| !t.kinds.contains(&PredicateKind::AngleSector)));
    }

    #[test]
    fn every_primitive_round_trips_through_text() {
        for dim in [1, 2, 3] {
            let p = pool(dim);
            let text = render_text(&p);
            assert_eq!(parse_text(&text).unwrap(), p);
        }
    }

    #[test]
    fn prompt_text_is_pure_and_parses_back() {
        let catalog = Catalog::standard(12, 2).unwrap();
        for p in generate_prompt_set(&catalog, 10, [3, 5, 2], 3).unwrap() {
            assert_eq!(render_text(&p.constraints), p.text);
            assert_eq!(parse_text(&p.text).unwrap(), p.constraints);
        }
    }

    #[test]
    fn margins_match_hand_geometry() {
        let hp = AttributePredicate::HalfPlane { axis: 0, sign: 1, offset: 0.0 };
        assert_eq!(hp.margin(&[0.3, 5.0]), 0.3);
        let neg = AttributePredicate::HalfPlane { axis: 1, sign: -1, offset: 0.75 };
        assert!((neg.margin(&[0.0, -1.0]) - 0.25).abs() < 1e-15);
        let band = AttributePredicate::RadiusBand { lo: 1.0, hi: 2.0 };
        assert!((band.margin(&[1.2, 0.0]) - 0.2).abs() < 1e-15);
        assert!((band.margin(&[3.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!((band.margin(&[0.5, 0.0]) + 0.5).abs() < 1e-15);
        // first quadrant
        let sector = AttributePredicate::AngleSector { lo: 0.0, hi: FRAC_PI_2 };
        assert!((sector.margin(&[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert!((sector.margin(&[-0.5, 2.0]) + 0.5).abs() < 1e-12);
        assert!((sector.margin(&[-1.0, -1.0]) + 2f64.sqrt()).abs() < 1e-12);
        let cb = AttributePredicate::CoordBand { axis: 1, lo: -1.0, hi: 1.0 };
        assert!((cb.margin(&[9.0, 0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrapping_sector_contains_negative_x_axis() {
        let s = AttributePredicate::primitive(PredicateKind::AngleSector, 7, 2);
        assert!(s.satisfied(&[-2.0, 0.0]));
        assert!(s.satisfied(&[-2.0, 0.1]));
        assert!(s.satisfied(&[-2.0, -0.1]));
        assert!(!s.satisfied(&[2.0, 0.0]));
    }

    #[test]
    fn verifier_values() {
        let hp = AttributePredicate::HalfPlane { axis: 0, sign: 1, offset: 0.0 };
        let tau = 0.25;
        assert_eq!(analytic_verify(&[0.0, 1.0], &hp, tau), 0.5);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((analytic_verify(&[tau, 0.0], &hp, tau) - expected).abs() < 1e-15);
        assert!((expected - 0.7311).abs() < 1e-4);
        assert!(1.0 - analytic_verify(&[25.0 * tau, 0.0], &hp, tau) < 1e-9);
    }

    #[test]
    fn target_sample_degenerate_and_mean() {
        let d = TargetDistribution { prompt_id: "x".into(), centers: vec![vec![1.0, -2.0]], std: 0.0 };
        let mut rng = Rng::seed_from_u64(3);
        assert_eq!(target_sample(&d, &mut rng), vec![1.0, -2.0]);
        let d = TargetDistribution { prompt_id: "x".into(), centers: vec![vec![0.0, 0.0]], std: 1.0 };
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = target_sample(&d, &mut rng);
            sum[0] += z[0];
            sum[1] += z[1];
        }
        assert!(sum.iter().all(|s| (s / n as f64).abs() < 0.02));
    }

    #[test]
    fn targets_satisfy_constraints() {
        let catalog = Catalog::standard(12, 2).unwrap();
        let prompts = generate_prompt_set(&catalog, 10, [3, 5, 2], 9).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        for p in prompts.iter().step_by(7) {
            let t = TargetDistribution::for_prompt(p, 2).unwrap();
            for c in &t.centers {
                for k in &p.constraints {
                    assert!(k.margin(c) >= CENTER_MARGIN - 1e-12);
                }
            }
            let ok = (0..TARGET_CHECK_SAMPLES)
                .filter(|_| {
                    let z = target_sample(&t, &mut rng);
                    p.constraints.iter().all(|k| k.satisfied(&z))
                })
                .count();
            assert!(ok as f64 >= 0.95 * TARGET_CHECK_SAMPLES as f64);
        }
    }

    #[test]
    fn higher_dimensional_prompts_are_feasible() {
        let catalog = Catalog::standard(4, 4).unwrap();
        let prompts = generate_prompt_set(&catalog, 10, [3, 5, 2], 2).unwrap();
        let t = TargetDistribution::for_prompt(&prompts[9], 4).unwrap();
        assert_eq!(t.centers[0].len(), 4);
    }

    #[test]
    fn jsonl_round_trip_sorted() {
        let catalog = Catalog::standard(2, 2).unwrap();
        let mut prompts = generate_prompt_set(&catalog, 10, [3, 5, 2], 4).unwrap();
        prompts.reverse();
        let mut buf = Vec::new();
        write_prompts(&prompts, &mut buf).unwrap();
        let back = read_prompts(buf.as_slice()).unwrap();
        prompts.reverse();
        assert_eq!(back, prompts);
    }

    proptest! {
        #[test]
        fn margins_are_lipschitz(
            kind in 0usize..4, bucket in 0u8..8, x in -4.0f64..4.0, y in -4.0f64..4.0,
        ) {
            let p = AttributePredicate::primitive(PredicateKind::ALL[kind], bucket, 2);
            let m = p.margin(&[x, y]);
            let m2 = p.margin(&[x + 1e-7, y - 1e-7]);
            // margins are 1-Lipschitz
            prop_assert!((m - m2).abs() <= 2e-7);
        }

        #[test]
        fn verifier_strictly_increasing_in_margin(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let hp = AttributePredicate::HalfPlane { axis: 0, sign: 1, offset: 0.0 };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(analytic_verify(&[lo], &hp, 0.25) < analytic_verify(&[hi], &hp, 0.25));
        }
    }
}
