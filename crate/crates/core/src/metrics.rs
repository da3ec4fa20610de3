//! Evaluation metrics: range-normalized tensor error, novelty and diversity
//! by shape similarity, and a binned coverage region in normalized
//! (c11, c12, c44, vol) space with query and projection.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenize::CubicTensor;
use crate::voxel::{similarity, VoxelGrid};

/// A property vector `(c11, c12, c44, vol)`.
pub type PropertyPoint = [f64; 4];

pub const COMPONENT_NAMES: [&str; 4] = ["c11", "c12", "c44", "vol"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-component min/max over a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyRanges {
    pub c11: Range,
    pub c12: Range,
    pub c44: Range,
    pub vol: Range,
}

impl PropertyRanges {
    pub fn components(&self) -> [Range; 4] {
        [self.c11, self.c12, self.c44, self.vol]
    }

    /// Min/max of each component; errors when a component is constant.
    pub fn from_points(points: &[PropertyPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut r = [Range::new(f64::INFINITY, f64::NEG_INFINITY); 4];
        for p in points {
            for (range, v) in r.iter_mut().zip(p) {
                range.min = range.min.min(*v);
                range.max = range.max.max(*v);
            }
        }
        let out = Self { c11: r[0], c12: r[1], c44: r[2], vol: r[3] };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in COMPONENT_NAMES.iter().zip(self.components()) {
            if !(r.max > r.min) || !r.min.is_finite() || !r.max.is_finite() {
                return Err(Error::DegenerateRange(format!("{name}: [{}, {}]", r.min, r.max)));
            }
        }
        Ok(())
    }

    /// Min-max scaling; the sentinel -1 passes through untouched.
    pub fn normalize(&self, p: PropertyPoint) -> PropertyPoint {
        let r = self.components();
        std::array::from_fn(|i| if p[i] == -1.0 { -1.0 } else { (p[i] - r[i].min) / r[i].span() })
    }

    pub fn denormalize(&self, p: PropertyPoint) -> PropertyPoint {
        let r = self.components();
        std::array::from_fn(|i| if p[i] == -1.0 { -1.0 } else { r[i].min + p[i] * r[i].span() })
    }
}

/// Mean of the range-normalized absolute differences of (c11, c12, c44).
pub fn relative_error(cond: &CubicTensor, generated: &CubicTensor, ranges: &PropertyRanges) -> Result<f64> {
    for (name, r) in COMPONENT_NAMES.iter().zip(ranges.components()).take(3) {
        if !(r.max > r.min) {
            return Err(Error::DegenerateRange(format!("{name}: [{}, {}]", r.min, r.max)));
        }
    }
    let d11 = (cond.c11 - generated.c11).abs() / ranges.c11.span();
    let d12 = (cond.c12 - generated.c12).abs() / ranges.c12.span();
    let d44 = (cond.c44 - generated.c44).abs() / ranges.c44.span();
    Ok((d11 + d12 + d44) / 3.0)
}

/// Largest similarity between `s` and any reference grid.
pub fn novelty<'a, I>(s: &VoxelGrid, references: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a VoxelGrid>,
{
    let mut best: Option<f64> = None;
    for r in references {
        let v = similarity(s, r)?;
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    best.ok_or(Error::EmptyManifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub pairs: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// All unordered-pair similarities of a set of grids.
pub fn diversity(grids: &[VoxelGrid]) -> Result<DiversityReport> {
    if grids.len() < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 grids, got {}", grids.len())));
    }
    let mut pairs = Vec::with_capacity(grids.len() * (grids.len() - 1) / 2);
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            pairs.push(similarity(&grids[i], &grids[j])?);
        }
    }
    let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    let max = pairs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(DiversityReport { pairs, mean, max })
}

/// Occupied cells of a `B^4` binning of normalized property space.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRegion {
    bins: usize,
    occupied: Vec<bool>,
    /// Record nearest to each occupied cell centre.
    representatives: HashMap<usize, String>,
    records: Vec<(String, PropertyPoint)>,
}

pub const COVERAGE_MAGIC: &[u8; 4] = b"MVXB";

impl CoverageRegion {
    /// Bins normalized points; values outside [0, 1] are clamped to the
    /// boundary cells.
    pub fn build(bins: usize, records: &[(String, PropertyPoint)]) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("bins must be positive".into()));
        }
        let mut region =
            Self { bins, occupied: vec![false; bins.pow(4)], representatives: HashMap::new(), records: Vec::new() };
        let mut best: HashMap<usize, (f64, usize)> = HashMap::new();
        for (i, (_, p)) in records.iter().enumerate() {
            let cell = region.cell_of(p);
            let key = region.flat(&cell);
            region.occupied[key] = true;
            let centre: PropertyPoint = std::array::from_fn(|k| (cell[k] as f64 + 0.5) / bins as f64);
            let d = dist2(p, &centre);
            match best.get(&key) {
                Some(&(bd, bi)) if bd < d || (bd == d && records[bi].0 <= records[i].0) => {}
                _ => {
                    best.insert(key, (d, i));
                }
            }
        }
        region.representatives = best.into_iter().map(|(k, (_, i))| (k, records[i].0.clone())).collect();
        region.records = records.to_vec();
        Ok(region)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Fraction of occupied cells.
    pub fn fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.occupied.len() as f64
    }

    pub fn representative(&self, point: &PropertyPoint) -> Option<&str> {
        self.representatives.get(&self.flat(&self.cell_of(point))).map(|s| s.as_str())
    }

    pub fn cell_of(&self, p: &PropertyPoint) -> [usize; 4] {
        std::array::from_fn(|k| {
            let v = (p[k] * self.bins as f64).floor();
            if v.is_nan() {
                0
            } else {
                v.clamp(0.0, (self.bins - 1) as f64) as usize
            }
        })
    }

    fn flat(&self, c: &[usize; 4]) -> usize {
        let b = self.bins;
        c[0] + b * (c[1] + b * (c[2] + b * c[3]))
    }

    fn unflat(&self, i: usize) -> [usize; 4] {
        let b = self.bins;
        [i % b, (i / b) % b, (i / (b * b)) % b, i / (b * b * b)]
    }

    pub fn is_occupied(&self, cell: &[usize; 4]) -> bool {
        self.occupied[self.flat(cell)]
    }

    /// Occupied cells in index order.
    pub fn occupied_cells(&self) -> impl Iterator<Item = [usize; 4]> + '_ {
        self.occupied.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| self.unflat(i))
    }

    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.occupied.len().div_ceil(8));
        out.extend_from_slice(COVERAGE_MAGIC);
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        let mut bytes = vec![0u8; self.occupied.len().div_ceil(8)];
        for (i, &o) in self.occupied.iter().enumerate() {
            if o {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
        out
    }

    /// Region restored from a bitmap supports queries; projection needs the
    /// records and reports an empty manifest.
    pub fn from_bitmap(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedPayload { expected: 8, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != COVERAGE_MAGIC {
            return Err(Error::BadMagic { expected: *COVERAGE_MAGIC, found: magic });
        }
        let bins = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bins == 0 || bins > 256 {
            return Err(Error::ResolutionMismatch(format!("coverage bins {bins}")));
        }
        let cells = bins.pow(4);
        let need = cells.div_ceil(8);
        if bytes.len() - 8 != need {
            return Err(Error::TruncatedPayload { expected: need, found: bytes.len() - 8 });
        }
        let occupied = (0..cells).map(|i| bytes[8 + i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { bins, occupied, representatives: HashMap::new(), records: Vec::new() })
    }

    pub fn write_bitmap<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bitmap())?;
        Ok(())
    }

    pub fn read_bitmap<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bitmap(&bytes)
    }
}

fn dist2(a: &PropertyPoint, b: &PropertyPoint) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `+1` if the point's cell or a face-adjacent cell is occupied, otherwise
/// minus the grid distance (in cells) to the nearest occupied cell.
pub fn coverage_query(region: &CoverageRegion, point: &PropertyPoint) -> f64 {
    let cell = region.cell_of(point);
    if region.is_occupied(&cell) {
        return 1.0;
    }
    for k in 0..4 {
        for delta in [-1i64, 1] {
            let v = cell[k] as i64 + delta;
            if v < 0 || v >= region.bins as i64 {
                continue;
            }
            let mut n = cell;
            n[k] = v as usize;
            if region.is_occupied(&n) {
                return 1.0;
            }
        }
    }
    let nearest = region
        .occupied_cells()
        .map(|c| c.iter().zip(&cell).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    if nearest.is_finite() {
        -nearest
    } else {
        // nothing occupied at all
        -((4 * region.bins * region.bins) as f64).sqrt()
    }
}

/// Inside points are returned unchanged; outside points snap to the
/// nearest record. The id of the nearest record is returned either way.
pub fn coverage_project(region: &CoverageRegion, point: &PropertyPoint) -> Result<(PropertyPoint, String)> {
    let (id, p) = region
        .records
        .iter()
        .min_by(|a, b| dist2(&a.1, point).total_cmp(&dist2(&b.1, point)).then_with(|| a.0.cmp(&b.0)))
        .ok_or(Error::EmptyManifest)?;
    if coverage_query(region, point) >= 0.0 {
        Ok((*point, id.clone()))
    } else {
        Ok((*p, id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::CellRole;
    use proptest::prelude::*;

    fn example_ranges() -> PropertyRanges {
        PropertyRanges {
            c11: Range::new(0.0, 1.346154),
            c12: Range::new(0.0, 0.576923),
            c44: Range::new(0.0, 0.384615),
            vol: Range::new(0.0, 1.0),
        }
    }

    fn tensor(c11: f64, c12: f64, c44: f64) -> CubicTensor {
        CubicTensor::new(c11, c12, c44)
    }

    #[test]
    fn relative_error_example() {
        let r = example_ranges();
        let e = relative_error(&tensor(0.5, 0.2, 0.1), &tensor(0.4, 0.25, 0.12), &r).unwrap();
        // independent evaluation with the rounded per-component terms
        let expect = (0.1 / 1.346154 + 0.05 / 0.576923 + 0.02 / 0.384615) / 3.0;
        assert!((e - expect).abs() < 1e-15);
        assert!((e - 0.070984).abs() < 5e-7);
        let same = relative_error(&tensor(0.5, 0.2, 0.1), &tensor(0.5, 0.2, 0.1), &r).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn degenerate_range_is_rejected() {
        let mut r = example_ranges();
        r.c44 = Range::new(0.3, 0.3);
        assert!(matches!(relative_error(&tensor(1.0, 0.5, 0.3), &tensor(1.0, 0.5, 0.3), &r), Err(Error::DegenerateRange(_))));
        assert!(matches!(
            PropertyRanges::from_points(&[[1.0, 0.2, 0.1, 0.3], [2.0, 0.2, 0.3, 0.4]]),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let r = PropertyRanges::from_points(&[[1.0, 0.2, 0.0, 0.1], [3.0, 0.7, 1.0, 0.9], [2.0, 0.5, 0.5, 0.5]]).unwrap();
        let n = r.normalize([2.0, 0.7, 0.5, -1.0]);
        assert_eq!(n[0], 0.5);
        assert_eq!(n[1], 1.0);
        assert_eq!(n[3], -1.0);
        let back = r.denormalize(n);
        assert!((back[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn novelty_and_diversity_examples() {
        let a = VoxelGrid::from_fn(2, CellRole::Eighth, |x, _, _| x == 0);
        let b = VoxelGrid::from_fn(2, CellRole::Eighth, |_, y, _| y == 0);
        let c = VoxelGrid::from_fn(2, CellRole::Eighth, |x, _, _| x == 1);
        assert_eq!(novelty(&a, [&a, &c]).unwrap(), 1.0);
        assert_eq!(novelty(&a, [&c]).unwrap(), 0.0);
        assert_eq!(novelty(&a, [&b]).unwrap(), 0.5);
        assert!(matches!(novelty(&a, std::iter::empty()), Err(Error::EmptyManifest)));
        let d = diversity(&[a.clone(), b, c, a.clone()]).unwrap();
        assert_eq!(d.pairs.len(), 6);
        let same = diversity(&vec![a.clone(); 3]).unwrap();
        assert!(same.pairs.iter().all(|&p| p == 1.0));
        assert!(diversity(&[a]).is_err());
    }

    fn records() -> Vec<(String, PropertyPoint)> {
        vec![
            ("a".into(), [0.1, 0.1, 0.1, 0.1]),
            ("b".into(), [0.12, 0.11, 0.1, 0.1]),
            ("c".into(), [0.8, 0.6, 0.7, 0.5]),
        ]
    }

    #[test]
    fn coverage_query_examples() {
        let region = CoverageRegion::build(8, &records()).unwrap();
        for (_, p) in records() {
            assert!(coverage_query(&region, &p) >= 0.0);
        }
        // one cell over along c11
        assert!(coverage_query(&region, &[0.23, 0.1, 0.1, 0.1]) >= 0.0);
        let far = coverage_query(&region, &[0.99, 0.01, 0.99, 0.01]);
        assert!(far < 0.0);
        assert_eq!(region.occupied_count(), 2);
        assert_eq!(region.representative(&[0.1, 0.1, 0.1, 0.1]), Some("a"));
    }

    #[test]
    fn coverage_projection_examples() {
        let region = CoverageRegion::build(8, &records()).unwrap();
        let inside = [0.101, 0.1, 0.1, 0.1];
        assert_eq!(coverage_project(&region, &inside).unwrap().0, inside);
        let (p, id) = coverage_project(&region, &[0.99, 0.01, 0.99, 0.01]).unwrap();
        assert!(records().iter().any(|(i, q)| *i == id && *q == p));
        let (pp, _) = coverage_project(&region, &p).unwrap();
        assert_eq!(pp, p);
        let empty = CoverageRegion::build(4, &[]).unwrap();
        assert!(matches!(coverage_project(&empty, &inside), Err(Error::EmptyManifest)));
    }

    #[test]
    fn bitmap_round_trip() {
        let region = CoverageRegion::build(6, &records()).unwrap();
        let bytes = region.to_bitmap();
        assert_eq!(bytes.len(), 8 + (6usize.pow(4)).div_ceil(8));
        let back = CoverageRegion::from_bitmap(&bytes).unwrap();
        assert_eq!(back.occupied, region.occupied);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CoverageRegion::from_bitmap(&bad), Err(Error::BadMagic { .. })));
        assert!(CoverageRegion::from_bitmap(&bytes[..bytes.len() - 1]).is_err());
    }

    fn triple() -> impl Strategy<Value = CubicTensor> {
        (0.0..1.4f64, 0.0..0.6f64, 0.0..0.4f64).prop_map(|(a, b, c)| tensor(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn relative_error_is_a_pseudometric(a in triple(), b in triple(), c in triple()) {
            let r = example_ranges();
            let ab = relative_error(&a, &b, &r).unwrap();
            let ba = relative_error(&b, &a, &r).unwrap();
            let bc = relative_error(&b, &c, &r).unwrap();
            let ac = relative_error(&a, &c, &r).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-15);
        }

        #[test]
        fn projection_is_idempotent(p in proptest::array::uniform4(0.0..1.0f64)) {
            let region = CoverageRegion::build(8, &records()).unwrap();
            let (once, _) = coverage_project(&region, &p).unwrap();
            let (twice, _) = coverage_project(&region, &once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
