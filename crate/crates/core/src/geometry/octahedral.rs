//! The 24-element rotational octahedral group and its action on cubic grids.

use super::{find_direction, Mat3, Vec3};

/// All signed permutation matrices with determinant +1, identity first.
pub fn rotations() -> Vec<Mat3> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = Mat3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    debug_assert_eq!(out.len(), 24);
    debug_assert_eq!(out[0], Mat3::identity());
    out
}

/// Indices (into [`rotations`]) of the cyclic subgroup generated by `gen`.
pub fn cyclic_subgroup(gen: usize) -> Vec<usize> {
    let rots = rotations();
    let mut members = vec![0usize];
    let mut cur = rots[gen];
    while cur != Mat3::identity() {
        let idx = rots.iter().position(|r| *r == cur).expect("group closed");
        members.push(idx);
        cur = rots[gen] * cur;
    }
    members
}

/// How one rotation permutes a cubic grid (about its center) and a closed
/// direction set.
#[derive(Debug, Clone)]
pub struct GridPermutation {
    pub rotation: Mat3,
    pub n: usize,
    /// `dir_map[j] = (j', s)` with `canonical(r g_j) = s·r g_j = g_{j'}`.
    pub dir_map: Vec<(usize, f64)>,
}

impl GridPermutation {
    /// Returns `None` if `dirs` is not closed under `rotation`.
    pub fn new(rotation: Mat3, n: usize, dirs: &[Vec3]) -> Option<Self> {
        let mut dir_map = Vec::with_capacity(dirs.len());
        for g in dirs {
            let rg = rotation * g;
            let j = find_direction(dirs, &rg, 1e-12)?;
            let s = if dirs[j].dot(&rg) >= 0.0 { 1.0 } else { -1.0 };
            dir_map.push((j, s));
        }
        Some(Self {
            rotation,
            n,
            dir_map,
        })
    }

    /// Grid center in voxel coordinates.
    pub fn center(&self) -> Vec3 {
        let c = (self.n as f64 - 1.0) / 2.0;
        Vec3::new(c, c, c)
    }

    /// Image of a voxel index under the rotation about the grid center.
    pub fn map_voxel(&self, idx: [usize; 3]) -> [usize; 3] {
        let m = self.n as i64 - 1;
        let d = [2 * idx[0] as i64 - m, 2 * idx[1] as i64 - m, 2 * idx[2] as i64 - m];
        let mut out = [0usize; 3];
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = 0i64;
            for (col, dc) in d.iter().enumerate() {
                acc += self.rotation[(row, col)] as i64 * dc;
            }
            *o = ((acc + m) / 2) as usize;
        }
        out
    }

    /// Image of a continuous voxel-space point.
    pub fn map_point(&self, p: &Vec3) -> Vec3 {
        if self.rotation == Mat3::identity() {
            return *p;
        }
        let c = self.center();
        self.rotation * (p - c) + c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical, sphere_directions};

    #[test]
    fn group_is_closed() {
        let rots = rotations();
        assert_eq!(rots.len(), 24);
        for a in &rots {
            for b in &rots {
                assert!(rots.contains(&(a * b)));
            }
        }
    }

    #[test]
    fn direction_set_invariant_under_group() {
        let dirs = sphere_directions();
        for r in rotations() {
            let gp = GridPermutation::new(r, 4, &dirs).expect("closed");
            let mut seen = vec![false; dirs.len()];
            for (j, &(jp, s)) in gp.dir_map.iter().enumerate() {
                assert!(!seen[jp]);
                seen[jp] = true;
                assert_eq!(canonical(&(r * dirs[j])), dirs[jp]);
                assert_eq!(r * dirs[j] * s, dirs[jp]);
            }
        }
    }

    #[test]
    fn voxel_map_is_a_permutation() {
        for r in rotations() {
            for n in [3usize, 4] {
                let gp = GridPermutation::new(r, n, &sphere_directions()).unwrap();
                let mut seen = vec![false; n * n * n];
                for x in 0..n {
                    for y in 0..n {
                        for z in 0..n {
                            let m = gp.map_voxel([x, y, z]);
                            let mp = gp.map_point(&Vec3::new(x as f64, y as f64, z as f64));
                            assert_eq!(mp, Vec3::new(m[0] as f64, m[1] as f64, m[2] as f64));
                            seen[(m[0] * n + m[1]) * n + m[2]] = true;
                        }
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn cyclic_subgroups() {
        let rots = rotations();
        let c4 = rots
            .iter()
            .position(|r| *r == Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0))
            .unwrap();
        assert_eq!(cyclic_subgroup(c4).len(), 4);
        assert_eq!(cyclic_subgroup(0), vec![0]);
    }
}
