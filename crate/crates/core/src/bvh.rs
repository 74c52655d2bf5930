//! Median-split bounding volume hierarchy for first-hit ray casting against
//! triangle meshes. Query results are exact: the traversal enumerates every
//! candidate leaf, so it must agree with brute force to the last bit.

use crate::math::{vec3, Vec3};
use crate::mesh::TriangleMesh;

const LEAF_SIZE: usize = 4;
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct BvhNode {
    pub min: Vec3,
    pub max: Vec3,
    /// Leaf: range [first, first + count) into `order`. Internal: count = 0
    /// and `first`/`right` are the child node indices.
    pub first: u32,
    pub count: u32,
    pub right: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    /// Permutation of triangle indices grouped by leaf.
    pub order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    /// `None` for an empty mesh (callers fall back to no occlusion test).
    pub fn build(mesh: &TriangleMesh) -> Option<Bvh> {
        if mesh.is_empty() {
            return None;
        }
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len())
            .map(|i| mesh.triangle_vertices(i))
            .collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        Some(Bvh { nodes, order, tris })
    }

    pub fn num_triangles(&self) -> usize {
        self.tris.len()
    }

    /// Distance to the first triangle hit, or `None` for a miss.
    pub fn raycast(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        self.raycast_with_index(origin, dir).map(|(t, _)| t)
    }

    pub fn raycast_with_index(&self, origin: Vec3, dir: Vec3) -> Option<(f64, u32)> {
        let inv = vec3(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(f64, u32)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let t_max = best.map(|(t, _)| t).unwrap_or(f64::INFINITY);
            if !aabb_hit(node.min, node.max, origin, inv, t_max) {
                continue;
            }
            if node.count > 0 {
                for k in node.first..node.first + node.count {
                    let ti = self.order[k as usize];
                    let tri = &self.tris[ti as usize];
                    if let Some(t) = ray_triangle(origin, dir, tri) {
                        if best.map(|(bt, _)| t < bt).unwrap_or(true) {
                            best = Some((t, ti));
                        }
                    }
                }
            } else {
                stack.push(node.first as usize);
                stack.push(node.right as usize);
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    first: usize,
    count: usize,
    nodes: &mut Vec<BvhNode>,
) -> u32 {
    let slice = &order[first..first + count];
    let mut bb_min = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut bb_max = -bb_min;
    let mut c_min = bb_min;
    let mut c_max = bb_max;
    for &ti in slice {
        for v in &tris[ti as usize] {
            bb_min = bb_min.min_elem(*v);
            bb_max = bb_max.max_elem(*v);
        }
        let c = centroids[ti as usize];
        c_min = c_min.min_elem(c);
        c_max = c_max.max_elem(c);
    }
    let node_index = nodes.len() as u32;
    nodes.push(BvhNode {
        min: bb_min,
        max: bb_max,
        first: first as u32,
        count: count as u32,
        right: 0,
    });
    if count <= LEAF_SIZE {
        return node_index;
    }
    let extent = c_max - c_min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    if extent.axis(axis) < 1e-12 {
        return node_index; // degenerate spread: keep as leaf
    }
    let sub = &mut order[first..first + count];
    sub.sort_unstable_by(|&a, &b| {
        centroids[a as usize]
            .axis(axis)
            .partial_cmp(&centroids[b as usize].axis(axis))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mid = count / 2;
    let left = build_node(tris, centroids, order, first, mid, nodes);
    let right = build_node(tris, centroids, order, first + mid, count - mid, nodes);
    nodes[node_index as usize].first = left;
    nodes[node_index as usize].count = 0;
    nodes[node_index as usize].right = right;
    node_index
}

#[inline]
fn aabb_hit(min: Vec3, max: Vec3, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
    let mut t0: f64 = 0.0;
    let mut t1 = t_max;
    for axis in 0..3 {
        let inv = inv_dir.axis(axis);
        let mut near = (min.axis(axis) - origin.axis(axis)) * inv;
        let mut far = (max.axis(axis) - origin.axis(axis)) * inv;
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Moeller-Trumbore intersection; positive hits beyond RAY_EPS only.
#[inline]
pub fn ray_triangle(origin: Vec3, dir: Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    if t > RAY_EPS {
        Some(t)
    } else {
        None
    }
}

/// All-triangles first hit, the oracle the BVH must match exactly.
pub fn brute_force_raycast(mesh: &TriangleMesh, origin: Vec3, dir: Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..mesh.triangles.len() {
        let tri = mesh.triangle_vertices(i);
        if let Some(t) = ray_triangle(origin, dir, &tri) {
            if best.map(|b| t < b).unwrap_or(true) {
                best = Some(t);
            }
        }
    }
    best
}

/// Subdivided icosahedron on the unit sphere; handy as an analytic raycast
/// target in tests and oracles.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| vec3(x, y, z).normalized())
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint = std::collections::HashMap::new();
        let mut next = Vec::new();
        for t in &triangles {
            let mut mids = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) / 2.0).normalized();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([t[0], mids[0], mids[2]]);
            next.push([t[1], mids[1], mids[0]]);
            next.push([t[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        triangles = next;
    }
    TriangleMesh { vertices, triangles, iteration: 0 }
}
