//! Shared 3D index arithmetic and 26-connected component labelling.
//!
//! The whole crate uses one linear layout: `i = x + X*(y + Y*(z + Z*t))`,
//! i.e. x fastest, then y, z, t.

/// Linear index of a spatial voxel.
#[inline]
pub fn linear(idx: [usize; 3], dims: [usize; 3]) -> usize {
    idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])
}

/// Inverse of [`linear`].
#[inline]
pub fn unravel(i: usize, dims: [usize; 3]) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

/// Calls `f` with the linear index of every 26-neighbor of `idx` that lies
/// inside `dims`.
#[inline]
pub fn for_each_neighbor26(idx: [usize; 3], dims: [usize; 3], mut f: impl FnMut(usize)) {
    let [x, y, z] = idx;
    for dz in -1i64..=1 {
        let nz = z as i64 + dz;
        if nz < 0 || nz >= dims[2] as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let ny = y as i64 + dy;
            if ny < 0 || ny >= dims[1] as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let nx = x as i64 + dx;
                if nx < 0 || nx >= dims[0] as i64 {
                    continue;
                }
                f(linear([nx as usize, ny as usize, nz as usize], dims));
            }
        }
    }
}

/// One 26-connected component of equal-valued voxels.
#[derive(Debug, Clone)]
pub struct Component {
    /// The label shared by every voxel of the component.
    pub label: u32,
    /// Linear voxel indices, in discovery order; `voxels[0]` is the smallest.
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    pub fn min_linear(&self) -> usize {
        self.voxels[0]
    }
}

/// 26-connected components of a label field. Voxels whose label equals
/// `background` (if given) are not assigned to any component. Components are
/// returned ordered by their smallest linear index, which makes the result
/// deterministic.
pub fn components_26(labels: &[u32], dims: [usize; 3], background: Option<u32>) -> Vec<Component> {
    assert_eq!(labels.len(), dims[0] * dims[1] * dims[2]);
    let mut visited = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if visited[start] || Some(labels[start]) == background {
            continue;
        }
        let label = labels[start];
        let mut voxels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            voxels.push(i);
            for_each_neighbor26(unravel(i, dims), dims, |n| {
                if !visited[n] && labels[n] == label {
                    visited[n] = true;
                    stack.push(n);
                }
            });
        }
        // Seeds are scanned in ascending order, so `start` is the minimum.
        voxels.sort_unstable();
        out.push(Component { label, voxels });
    }
    out
}
