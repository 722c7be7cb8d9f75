//! Ternary activation patterns, channel dropout and the direction alphabet
//! they generate, plus the nearest-direction mapping rule.

mod kdtree;

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use rand::seq::index;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Vector};

pub use kdtree::KdTree;

/// Default cap on materialized pattern enumeration: `3^15`.
pub const DEFAULT_PATTERN_CAP: u64 = 14_348_907;

/// Default tolerance (max-norm) for merging directions.
pub const DEFAULT_DEDUP_TOL: f64 = 1e-9;

/// A ternary input vector `u ∈ {-1, 0, 1}^m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActivationPattern(Vec<i8>);

impl ActivationPattern {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if let Some((channel, &v)) = entries.iter().enumerate().find(|(_, v)| !(-1..=1).contains(*v)) {
            return Err(Error::InvalidPattern {
                channel,
                value: f64::from(v),
            });
        }
        Ok(Self(entries))
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0; m])
    }

    /// Parses a real vector whose entries must be exactly -1, 0 or 1.
    pub fn from_vector(u: &Vector) -> Result<Self> {
        u.iter()
            .enumerate()
            .map(|(channel, &value)| match value {
                v if v == -1.0 => Ok(-1),
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                _ => Err(Error::InvalidPattern { channel, value }),
            })
            .collect::<Result<Vec<i8>>>()
            .map(Self)
    }

    pub fn entries(&self) -> &[i8] {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    /// Number of active (non-zero) channels.
    pub fn support(&self) -> usize {
        self.0.iter().filter(|v| **v != 0).count()
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_iterator(self.0.len(), self.0.iter().map(|v| f64::from(*v)))
    }

    pub fn squared_norm(&self, weight: &Matrix) -> f64 {
        let u = self.to_vector();
        u.dot(&(weight * &u))
    }
}

impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Streams all `3^m` patterns in base-3 counting order.
///
/// Channel 0 is the most significant digit and digit values 0, 1, 2 map to
/// -1, 0, 1, so the stream is in lexicographic order of the patterns.
#[derive(Debug, Clone)]
pub struct PatternIter {
    next: Option<Vec<i8>>,
}

impl Iterator for PatternIter {
    type Item = ActivationPattern;

    fn next(&mut self) -> Option<Self::Item> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut carried = true;
        for digit in succ.iter_mut().rev() {
            if *digit < 1 {
                *digit += 1;
                carried = false;
                break;
            }
            *digit = -1;
        }
        if !carried {
            self.next = Some(succ);
        }
        Some(ActivationPattern(current))
    }
}

pub fn enumerate_patterns(m: usize) -> Result<PatternIter> {
    if m == 0 {
        return Err(Error::InvalidArgument("channel count must be at least 1".into()));
    }
    Ok(PatternIter {
        next: Some(vec![-1; m]),
    })
}

fn pow3_checked(exponent: usize, cap: u64) -> Result<u64> {
    let mut total: u64 = 1;
    for _ in 0..exponent {
        total = total
            .checked_mul(3)
            .filter(|t| *t <= cap)
            .ok_or(Error::CapExceeded { exponent, cap })?;
    }
    if total > cap {
        return Err(Error::CapExceeded { exponent, cap });
    }
    Ok(total)
}

/// Materializes the pattern set, refusing when `3^m` exceeds `cap`.
pub fn collect_patterns(m: usize, cap: u64) -> Result<Vec<ActivationPattern>> {
    pow3_checked(m, cap)?;
    Ok(enumerate_patterns(m)?.collect())
}

/// Set of input channels forced to zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DropoutMask {
    channels: usize,
    dropped: BTreeSet<usize>,
}

impl DropoutMask {
    pub fn none(channels: usize) -> Self {
        Self {
            channels,
            dropped: BTreeSet::new(),
        }
    }

    pub fn new(channels: usize, dropped: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for c in dropped {
            if c >= channels {
                return Err(Error::InvalidArgument(format!(
                    "dropped channel {c} out of range for {channels} channels"
                )));
            }
            if !set.insert(c) {
                return Err(Error::InvalidArgument(format!("channel {c} listed twice")));
            }
        }
        Ok(Self {
            channels,
            dropped: set,
        })
    }

    /// Drops `k` distinct channels chosen uniformly at random.
    pub fn random<R: Rng + ?Sized>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k > channels {
            return Err(Error::InvalidArgument(format!(
                "cannot drop {k} of {channels} channels"
            )));
        }
        let mut picked = index::sample(rng, channels, k).into_vec();
        picked.sort_unstable();
        Self::new(channels, picked)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dropped(&self) -> impl Iterator<Item = usize> + '_ {
        self.dropped.iter().copied()
    }

    pub fn is_dropped(&self, channel: usize) -> bool {
        self.dropped.contains(&channel)
    }

    pub fn len(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    pub fn is_subset(&self, other: &DropoutMask) -> bool {
        self.dropped.is_subset(&other.dropped)
    }

    /// Dropped channels joined by `;` (empty when nothing is dropped).
    pub fn to_field(&self) -> String {
        self.dropped
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn apply_dropout(pattern: &ActivationPattern, mask: &DropoutMask) -> ActivationPattern {
    ActivationPattern(
        pattern
            .0
            .iter()
            .enumerate()
            .map(|(i, v)| if mask.is_dropped(i) { 0 } else { *v })
            .collect(),
    )
}

/// The distinct one-step increments `B_d u` reachable under a dropout mask,
/// in lexicographic order of their coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionAlphabet {
    directions: Vec<Vector>,
    representatives: Vec<ActivationPattern>,
    b_d: Matrix,
    mask: DropoutMask,
    dedup_tol: f64,
    zero_index: usize,
}

fn cell_key(v: &Vector, tol: f64) -> Vec<i64> {
    v.iter().map(|x| (x / tol).round() as i64).collect()
}

fn max_abs_diff(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl DirectionAlphabet {
    pub fn build(b_d: &Matrix, mask: &DropoutMask, dedup_tol: f64, cap: u64) -> Result<Self> {
        let m = b_d.ncols();
        let n = b_d.nrows();
        check_dim("alphabet dropout mask", m, mask.channels())?;
        if !(dedup_tol > 0.0) {
            return Err(Error::InvalidArgument("dedup tolerance must be positive".into()));
        }
        let free: Vec<usize> = (0..m).filter(|c| !mask.is_dropped(*c)).collect();
        pow3_checked(free.len(), cap)?;

        // Cluster by rounded grid cell; neighbours are probed so two vectors
        // within tolerance straddling a cell boundary still merge.
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        let mut raw: Vec<Vector> = Vec::new();
        let mut reps: Vec<ActivationPattern> = Vec::new();
        let offsets = neighbour_offsets(n);

        let free_patterns: Box<dyn Iterator<Item = ActivationPattern>> = if free.is_empty() {
            Box::new(std::iter::once(ActivationPattern(Vec::new())))
        } else {
            Box::new(enumerate_patterns(free.len())?)
        };
        for sub in free_patterns {
            let mut full = vec![0i8; m];
            for (slot, v) in free.iter().zip(sub.0.iter()) {
                full[*slot] = *v;
            }
            let pattern = ActivationPattern(full);
            let d = b_d * pattern.to_vector();
            let key = cell_key(&d, dedup_tol);
            let mut found = None;
            'probe: for off in &offsets {
                let probe: Vec<i64> = key.iter().zip(off).map(|(k, o)| k + o).collect();
                if let Some(ids) = cells.get(&probe) {
                    for &id in ids {
                        if max_abs_diff(&raw[id], &d) <= dedup_tol {
                            found = Some(id);
                            break 'probe;
                        }
                    }
                }
            }
            match found {
                Some(id) => {
                    // Enumeration is lexicographic, so only strictly smaller
                    // support displaces the current representative.
                    if pattern.support() < reps[id].support() {
                        reps[id] = pattern;
                    }
                }
                None => {
                    cells.entry(key).or_default().push(raw.len());
                    raw.push(d);
                    reps.push(pattern);
                }
            }
        }

        let mut entries: Vec<(Vector, ActivationPattern)> = reps
            .into_iter()
            .map(|rep| (b_d * rep.to_vector(), rep))
            .collect();
        entries.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let (directions, representatives): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let zero_index = representatives
            .iter()
            .position(|r| r.support() == 0)
            .expect("zero pattern is always enumerated");
        Ok(Self {
            directions,
            representatives,
            b_d: b_d.clone(),
            mask: mask.clone(),
            dedup_tol,
            zero_index,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.b_d.nrows()
    }

    pub fn channels(&self) -> usize {
        self.b_d.ncols()
    }

    pub fn directions(&self) -> &[Vector] {
        &self.directions
    }

    pub fn direction(&self, index: usize) -> &Vector {
        &self.directions[index]
    }

    pub fn representatives(&self) -> &[ActivationPattern] {
        &self.representatives
    }

    pub fn representative(&self, index: usize) -> &ActivationPattern {
        &self.representatives[index]
    }

    pub fn input_map(&self) -> &Matrix {
        &self.b_d
    }

    pub fn mask(&self) -> &DropoutMask {
        &self.mask
    }

    pub fn dedup_tol(&self) -> f64 {
        self.dedup_tol
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    pub fn max_direction_norm(&self) -> f64 {
        self.directions.iter().map(|d| d.norm()).fold(0.0, f64::max)
    }

    /// Index of a direction matching `d` within the dedup tolerance.
    pub fn index_of(&self, d: &Vector) -> Option<usize> {
        if d.len() != self.dim() {
            return None;
        }
        self.directions
            .iter()
            .position(|x| max_abs_diff(x, d) <= self.dedup_tol)
    }

    /// The subset of this alphabet that remains reachable once `mask` is
    /// applied, keyed by index in this alphabet.
    pub fn restrict(&self, mask: &DropoutMask, cap: u64) -> Result<MaskedAlphabet> {
        let sub = Self::build(&self.b_d, mask, self.dedup_tol, cap)?;
        let mut indices = Vec::with_capacity(sub.len());
        for (d, rep) in sub.directions.iter().zip(sub.representatives.iter()) {
            let idx = self.index_of(d).ok_or_else(|| {
                Error::Precondition(format!(
                    "direction of pattern {rep} is missing from the base alphabet"
                ))
            })?;
            indices.push(idx);
        }
        let mut pairs: Vec<(usize, ActivationPattern)> =
            indices.into_iter().zip(sub.representatives).collect();
        pairs.sort_by_key(|(i, _)| *i);
        let (indices, representatives) = pairs.into_iter().unzip();
        Ok(MaskedAlphabet {
            indices,
            representatives,
        })
    }

    /// CSV `index,d_0,...,d_{n-1},rep_u_0,...,rep_u_{m-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        for i in 0..self.dim() {
            let _ = write!(out, ",d_{i}");
        }
        for i in 0..self.channels() {
            let _ = write!(out, ",rep_u_{i}");
        }
        out.push('\n');
        for (i, (d, r)) in self.directions.iter().zip(&self.representatives).enumerate() {
            let _ = write!(out, "{i}");
            for v in d.iter() {
                let _ = write!(out, ",{v}");
            }
            for v in r.entries() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn neighbour_offsets(n: usize) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::with_capacity(n)];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                [0i64, -1, 1].into_iter().map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    out
}

/// Directions of a base alphabet still available under a mask, with the
/// minimal-support representative that realizes each without dropped channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAlphabet {
    indices: Vec<usize>,
    representatives: Vec<ActivationPattern>,
}

impl MaskedAlphabet {
    /// Every direction available, using the base representatives.
    pub fn full(alphabet: &DirectionAlphabet) -> Self {
        Self {
            indices: (0..alphabet.len()).collect(),
            representatives: alphabet.representatives.clone(),
        }
    }

    /// Ascending indices into the base alphabet.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn representatives(&self) -> &[ActivationPattern] {
        &self.representatives
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn representative_for(&self, index: usize) -> Option<&ActivationPattern> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|p| &self.representatives[p])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Highest-scoring available index; ties go to the lowest index.
    pub fn argmax(&self, scores: &Vector) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &i in &self.indices {
            let s = *scores.get(i).ok_or(Error::DimensionMismatch {
                context: "masked argmax scores",
                expected: i + 1,
                actual: scores.len(),
            })?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i));
            }
        }
        best.map(|(_, i)| i).ok_or(Error::EmptyCandidates)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean-nearest direction by linear scan; ties go to the lowest index.
pub fn nearest_direction(
    alphabet: &DirectionAlphabet,
    v: &Vector,
    exclude_zero: bool,
) -> Result<(Vector, usize)> {
    check_dim("nearest_direction query", alphabet.dim(), v.len())?;
    let mut best: Option<(f64, usize)> = None;
    for (i, d) in alphabet.directions.iter().enumerate() {
        if exclude_zero && i == alphabet.zero_index {
            continue;
        }
        let dist = squared_distance(d.as_slice(), v.as_slice());
        if best.is_none_or(|(b, _)| dist < b) {
            best = Some((dist, i));
        }
    }
    let (_, i) = best.ok_or(Error::EmptyCandidates)?;
    Ok((alphabet.directions[i].clone(), i))
}

/// Backend used to evaluate the mapping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NearestBackend {
    #[default]
    KdTree,
    BruteForce,
}

/// The mapping rule `M`: sends any vector to its nearest quantized direction.
#[derive(Debug, Clone)]
pub struct MappingRule {
    alphabet: DirectionAlphabet,
    exclude_zero: bool,
    tree: Option<KdTree>,
}

impl MappingRule {
    pub fn new(alphabet: DirectionAlphabet, exclude_zero: bool, backend: NearestBackend) -> Result<Self> {
        let tree = match backend {
            NearestBackend::BruteForce => None,
            NearestBackend::KdTree => {
                let points: Vec<(usize, Vec<f64>)> = alphabet
                    .directions
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !(exclude_zero && *i == alphabet.zero_index))
                    .map(|(i, d)| (i, d.as_slice().to_vec()))
                    .collect();
                Some(KdTree::build(points)?)
            }
        };
        Ok(Self {
            alphabet,
            exclude_zero,
            tree,
        })
    }

    pub fn alphabet(&self) -> &DirectionAlphabet {
        &self.alphabet
    }

    pub fn excludes_zero(&self) -> bool {
        self.exclude_zero
    }

    pub fn map(&self, v: &Vector) -> Result<(Vector, usize)> {
        match &self.tree {
            None => nearest_direction(&self.alphabet, v, self.exclude_zero),
            Some(tree) => {
                check_dim("mapping rule query", self.alphabet.dim(), v.len())?;
                let (_, id) = tree.nearest(v.as_slice())?;
                Ok((self.alphabet.directions[id].clone(), id))
            }
        }
    }

    /// Drops directions from the rule, rebuilding only the affected subtrees.
    pub fn without(&self, indices: &[usize]) -> Result<Self> {
        let mut next = self.clone();
        if let Some(tree) = next.tree.as_mut() {
            for &i in indices {
                tree.remove_in_place(i)?;
            }
        } else {
            return Err(Error::InvalidArgument(
                "direction removal requires the kd-tree backend".into(),
            ));
        }
        Ok(next)
    }
}
