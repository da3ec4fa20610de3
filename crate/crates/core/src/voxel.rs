//! Voxel occupancy grids and the cubic-symmetry operations between eighth
//! cells and full unit cells.
//!
//! Linear voxel index is `x + n * (y + n * z)`. An eighth cell occupies the
//! low corner `[0, n/2)^3` of its full cell; the full cell is recovered with
//! the per-axis mirror map `m(i) = min(i, n - 1 - i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a grid stores a whole unit cell or its symmetric eighth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellRole {
    Full,
    Eighth,
}

/// The six permutations of the three axes, identity first.
pub const AXIS_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    resolution: usize,
    role: CellRole,
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize, role: CellRole) -> Self {
        assert!(resolution > 0, "resolution must be positive");
        Self { resolution, role, occupancy: vec![false; resolution.pow(3)] }
    }

    pub fn filled(resolution: usize, role: CellRole) -> Self {
        assert!(resolution > 0, "resolution must be positive");
        Self { resolution, role, occupancy: vec![true; resolution.pow(3)] }
    }

    pub fn from_fn(resolution: usize, role: CellRole, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut grid = Self::empty(resolution, role);
        let n = resolution;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    grid.occupancy[x + n * (y + n * z)] = f(x, y, z);
                }
            }
        }
        grid
    }

    pub fn from_occupancy(resolution: usize, role: CellRole, occupancy: Vec<bool>) -> Result<Self> {
        if resolution == 0 || occupancy.len() != resolution.pow(3) {
            return Err(Error::ResolutionMismatch(format!(
                "{} voxels for resolution {resolution}",
                occupancy.len()
            )));
        }
        Ok(Self { resolution, role, occupancy })
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn role(&self) -> CellRole {
        self.role
    }

    pub fn with_role(mut self, role: CellRole) -> Self {
        self.role = role;
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let n = self.resolution;
        [idx % n, (idx / n) % n, idx / (n * n)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, solid: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = solid;
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn solid_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v).count()
    }

    pub fn volume_fraction(&self) -> f64 {
        self.solid_count() as f64 / self.occupancy.len() as f64
    }

    /// Builds the full cell from an eighth cell by mirroring across the three
    /// mid-planes.
    pub fn mirror_tessellate(&self) -> Result<VoxelGrid> {
        if self.role != CellRole::Eighth {
            return Err(Error::InvalidArgument("mirror_tessellate expects an eighth cell".into()));
        }
        let h = self.resolution;
        let n = 2 * h;
        let m = |i: usize| i.min(n - 1 - i);
        Ok(VoxelGrid::from_fn(n, CellRole::Full, |x, y, z| self.get(m(x), m(y), m(z))))
    }

    /// Returns the `[0, n/2)^3` corner block together with the number of
    /// voxels that disagree with their mirror image in the corner block.
    /// In strict mode any disagreement is an error.
    pub fn extract_eighth(&self, strict: bool) -> Result<(VoxelGrid, usize)> {
        let n = self.resolution;
        if n % 2 != 0 {
            return Err(Error::ResolutionMismatch(format!("full cell resolution {n} is odd")));
        }
        let h = n / 2;
        let eighth = VoxelGrid::from_fn(h, CellRole::Eighth, |x, y, z| self.get(x, y, z));
        let m = |i: usize| i.min(n - 1 - i);
        let mut violations = 0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    if self.get(x, y, z) != eighth.get(m(x), m(y), m(z)) {
                        violations += 1;
                    }
                }
            }
        }
        if strict && violations > 0 {
            return Err(Error::SymmetryViolation { count: violations });
        }
        Ok((eighth, violations))
    }

    /// Applies an axis permutation: `out[p] = self[q]` where `q[perm[a]] = p[a]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> VoxelGrid {
        VoxelGrid::from_fn(self.resolution, self.role, |x, y, z| {
            let p = [x, y, z];
            let mut q = [0usize; 3];
            for a in 0..3 {
                q[perm[a]] = p[a];
            }
            self.get(q[0], q[1], q[2])
        })
    }

    pub fn is_permutation_symmetric(&self) -> bool {
        AXIS_PERMUTATIONS.iter().all(|&p| self.permute_axes(p) == *self)
    }

    /// True iff each of the six boundary planes carries at least one solid voxel.
    pub fn touches_all_faces(&self) -> bool {
        let n = self.resolution;
        let mut hit = [false; 6];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    for (axis, c) in [x, y, z].into_iter().enumerate() {
                        if c == 0 {
                            hit[2 * axis] = true;
                        }
                        if c == n - 1 {
                            hit[2 * axis + 1] = true;
                        }
                    }
                }
            }
        }
        hit.iter().all(|&h| h)
    }

    pub fn periodic_components(&self) -> ComponentLabeling {
        self.components(true)
    }

    /// Labels face-connected solid components, optionally wrapping across
    /// opposite faces.
    pub fn components(&self, periodic: bool) -> ComponentLabeling {
        let n = self.resolution;
        let len = self.occupancy.len();
        let mut uf = UnionFind::new(len);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let i = self.index(x, y, z);
                    if !self.occupancy[i] {
                        continue;
                    }
                    let c = [x, y, z];
                    for axis in 0..3 {
                        let next = if c[axis] + 1 < n {
                            c[axis] + 1
                        } else if periodic && n > 1 {
                            0
                        } else {
                            continue;
                        };
                        let mut d = c;
                        d[axis] = next;
                        let j = self.index(d[0], d[1], d[2]);
                        if self.occupancy[j] {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }

        // root -> (size, min index)
        let mut stats: Vec<(usize, usize)> = vec![(0, usize::MAX); len];
        for i in 0..len {
            if self.occupancy[i] {
                let r = uf.find(i);
                stats[r].0 += 1;
                stats[r].1 = stats[r].1.min(i);
            }
        }
        let mut roots: Vec<usize> = (0..len).filter(|&r| stats[r].0 > 0).collect();
        roots.sort_by(|&a, &b| stats[b].0.cmp(&stats[a].0).then(stats[a].1.cmp(&stats[b].1)));

        let mut label_of_root = vec![0u32; len];
        for (k, &r) in roots.iter().enumerate() {
            label_of_root[r] = k as u32 + 1;
        }
        let labels = (0..len)
            .map(|i| if self.occupancy[i] { label_of_root[uf.find(i)] } else { 0 })
            .collect();
        ComponentLabeling {
            labels,
            component_sizes: roots.iter().map(|&r| stats[r].0).collect(),
        }
    }

    /// Keeps only the largest periodic component (ties go to the component
    /// holding the smallest voxel index).
    pub fn largest_component(&self) -> Result<VoxelGrid> {
        let labeling = self.periodic_components();
        if labeling.component_count() == 0 {
            return Err(Error::EmptyGrid);
        }
        let occupancy = labeling.labels.iter().map(|&l| l == 1).collect();
        Ok(VoxelGrid { resolution: self.resolution, role: self.role, occupancy })
    }
}

/// Replaces every value of an `n^3` field by the mean over its six
/// axis-permutation images. Each orbit mean is computed once and written to
/// all members, so the result is exactly permutation invariant.
pub fn symmetrize_permutations<T>(values: &[T], n: usize) -> Vec<T>
where
    T: Copy + Into<f64> + FromF64,
{
    assert_eq!(values.len(), n * n * n, "field size does not match resolution");
    let idx = |c: [usize; 3]| c[0] + n * (c[1] + n * c[2]);
    let mut out = values.to_vec();
    for c in 0..n {
        for b in 0..=c {
            for a in 0..=b {
                let rep = [a, b, c];
                let images = AXIS_PERMUTATIONS.map(|p| idx([rep[p[0]], rep[p[1]], rep[p[2]]]));
                let mean = images.iter().map(|&i| values[i].into()).sum::<f64>() / 6.0;
                let v = T::from_f64(mean);
                for i in images {
                    out[i] = v;
                }
            }
        }
    }
    out
}

pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Shape similarity: shared solid voxels over the geometric mean of the
/// solid counts.
pub fn similarity(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::ResolutionMismatch(format!("{} vs {}", a.resolution, b.resolution)));
    }
    let (na, nb) = (a.solid_count(), b.solid_count());
    if na == 0 || nb == 0 {
        return Err(Error::EmptyGrid);
    }
    let shared = a.occupancy.iter().zip(&b.occupancy).filter(|(&p, &q)| p && q).count();
    Ok(shared as f64 / ((na as f64) * (nb as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    /// Per-voxel component id, 0 for void. Id 1 is the largest component.
    pub labels: Vec<u32>,
    /// Sizes indexed by `label - 1`, descending.
    pub component_sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn component_count(&self) -> usize {
        self.component_sizes.len()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}
