//! Iso-surface extraction: scalar grids sampled from an SDF, marching cubes
//! over the standard 256-case table with welded vertices, and PLY export.
//!
//! Cube corner numbering (bit i of the case index set when value < iso):
//! 0=(x,y,z) 1=(x+1,y,z) 2=(x+1,y+1,z) 3=(x,y+1,z) and 4..7 the same ring
//! at z+1. Edges 0..3 ring the bottom face, 4..7 the top, 8..11 run along z.

mod tables;
pub mod ply;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::math::{vec3, Vec3};

/// Regular lattice of scalar samples over an axis-aligned box.
/// Values are stored row-major with z fastest: index = (ix*ry + iy)*rz + iz.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub res: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.res[1] + iy) * self.res[2] + iz
    }

    #[inline]
    pub fn value(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.index(ix, iy, iz)]
    }

    /// World position of a lattice point.
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let fx = ix as f64 / (self.res[0] - 1) as f64;
        let fy = iy as f64 / (self.res[1] - 1) as f64;
        let fz = iz as f64 / (self.res[2] - 1) as f64;
        vec3(
            self.min.x + fx * (self.max.x - self.min.x),
            self.min.y + fy * (self.max.y - self.min.y),
            self.min.z + fz * (self.max.z - self.min.z),
        )
    }
}

/// Evaluate a batch SDF over the lattice. The evaluator maps a batch of
/// points to values; slabs run in parallel and land in disjoint ranges, so
/// the result does not depend on scheduling.
pub fn sample_grid<F>(eval: &F, min: Vec3, max: Vec3, res: [usize; 3]) -> ScalarGrid
where
    F: Fn(&[[f64; 3]]) -> Vec<f64> + Sync,
{
    assert!(res.iter().all(|&r| r >= 2), "resolution below 2");
    assert!(min.x < max.x && min.y < max.y && min.z < max.z);
    let mut grid = ScalarGrid {
        res,
        min,
        max,
        values: vec![0.0; res[0] * res[1] * res[2]],
    };
    let slab = res[1] * res[2];
    let positions = |ix: usize| -> Vec<[f64; 3]> {
        let mut pts = Vec::with_capacity(slab);
        for iy in 0..res[1] {
            for iz in 0..res[2] {
                let fx = ix as f64 / (res[0] - 1) as f64;
                let fy = iy as f64 / (res[1] - 1) as f64;
                let fz = iz as f64 / (res[2] - 1) as f64;
                pts.push([
                    min.x + fx * (max.x - min.x),
                    min.y + fy * (max.y - min.y),
                    min.z + fz * (max.z - min.z),
                ]);
            }
        }
        pts
    };
    grid.values
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(ix, out)| {
            let vals = eval(&positions(ix));
            out.copy_from_slice(&vals);
        });
    grid
}

/// Indexed triangle mesh with an iteration stamp for snapshot bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub iteration: u64,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_vertices(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(i);
        (b - a).cross(c - a).norm() * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }
}

// Cube-local edge -> (corner offset of the lattice edge origin, axis).
const EDGE_ORIGIN_AXIS: [([usize; 3], u8); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

// Cube corner offsets in the standard order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

// Edge endpoints as cube corner indices.
const EDGE_ENDS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

struct MeshBuilder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    edge_vertex: HashMap<(usize, usize, usize, u8), u32>,
}

impl MeshBuilder {
    /// March the cube layer between lattice planes ix and ix+1. `plane_a`
    /// and `plane_b` hold the values at x=ix and x=ix+1, laid out
    /// [iy * rz + iz].
    #[allow(clippy::too_many_arguments)]
    fn march_layer(
        &mut self,
        ix: usize,
        plane_a: &[f64],
        plane_b: &[f64],
        iso: f64,
        res: [usize; 3],
        min: Vec3,
        max: Vec3,
    ) {
        let rz = res[2];
        let cell = |axis: usize, i: usize| -> f64 {
            let f = i as f64 / (res[axis] - 1) as f64;
            min.axis(axis) + f * (max.axis(axis) - min.axis(axis))
        };
        for iy in 0..res[1] - 1 {
            for iz in 0..res[2] - 1 {
                let mut vals = [0.0; 8];
                for (ci, off) in CORNERS.iter().enumerate() {
                    let plane = if off[0] == 0 { plane_a } else { plane_b };
                    vals[ci] = plane[(iy + off[1]) * rz + (iz + off[2])];
                }
                let mut case = 0usize;
                for (ci, v) in vals.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << ci;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &tables::TRIANGLE_TABLE[case];
                let mut k = 0;
                while row[k] >= 0 {
                    let mut idx = [0u32; 3];
                    for (slot, &e) in idx.iter_mut().zip(row[k..k + 3].iter()) {
                        *slot = self.edge_vertex_index(
                            e as usize,
                            ix,
                            iy,
                            iz,
                            &vals,
                            iso,
                            &cell,
                        );
                    }
                    // consistent winding: outward where the field increases
                    let tri = [idx[0], idx[2], idx[1]];
                    let [a, b, c] = [
                        self.vertices[tri[0] as usize],
                        self.vertices[tri[1] as usize],
                        self.vertices[tri[2] as usize],
                    ];
                    if (b - a).cross(c - a).norm() * 0.5 > 1e-12 {
                        self.triangles.push(tri);
                    }
                    k += 3;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn edge_vertex_index(
        &mut self,
        edge: usize,
        ix: usize,
        iy: usize,
        iz: usize,
        vals: &[f64; 8],
        iso: f64,
        cell: &dyn Fn(usize, usize) -> f64,
    ) -> u32 {
        let (off, axis) = EDGE_ORIGIN_AXIS[edge];
        let key = (ix + off[0], iy + off[1], iz + off[2], axis);
        if let Some(&v) = self.edge_vertex.get(&key) {
            return v;
        }
        let [ea, eb] = EDGE_ENDS[edge];
        let (va, vb) = (vals[ea], vals[eb]);
        let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
        let pa = CORNERS[ea];
        let pb = CORNERS[eb];
        let corner_pos = |p: [usize; 3]| {
            vec3(
                cell(0, ix + p[0]),
                cell(1, iy + p[1]),
                cell(2, iz + p[2]),
            )
        };
        let a = corner_pos(pa);
        let b = corner_pos(pb);
        let pos = a + (b - a) * t;
        let idx = self.vertices.len() as u32;
        self.vertices.push(pos);
        self.edge_vertex.insert(key, idx);
        idx
    }
}

/// Classic marching cubes over a sampled grid. Triangles are wound so their
/// geometric normal points toward increasing field values; an all-positive
/// or all-negative grid yields an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    assert!(grid.values.iter().all(|v| v.is_finite()), "non-finite grid");
    let mut builder = MeshBuilder {
        vertices: Vec::new(),
        triangles: Vec::new(),
        edge_vertex: HashMap::new(),
    };
    let slab = grid.res[1] * grid.res[2];
    for ix in 0..grid.res[0] - 1 {
        let plane_a = &grid.values[ix * slab..(ix + 1) * slab];
        let plane_b = &grid.values[(ix + 1) * slab..(ix + 2) * slab];
        builder.march_layer(ix, plane_a, plane_b, iso, grid.res, grid.min, grid.max);
    }
    TriangleMesh {
        vertices: builder.vertices,
        triangles: builder.triangles,
        iteration: 0,
    }
}

/// Memory-lean extraction for large resolutions: lattice planes are sampled
/// on demand (two live at a time) instead of materializing the full grid.
pub fn extract_from_field<F>(eval: &F, min: Vec3, max: Vec3, res: usize, iso: f64) -> TriangleMesh
where
    F: Fn(&[[f64; 3]]) -> Vec<f64> + Sync,
{
    assert!(res >= 2);
    let res3 = [res, res, res];
    let plane_points = |ix: usize| -> Vec<[f64; 3]> {
        let mut pts = Vec::with_capacity(res * res);
        let fx = ix as f64 / (res - 1) as f64;
        let x = min.x + fx * (max.x - min.x);
        for iy in 0..res {
            let fy = iy as f64 / (res - 1) as f64;
            let y = min.y + fy * (max.y - min.y);
            for iz in 0..res {
                let fz = iz as f64 / (res - 1) as f64;
                pts.push([x, y, min.z + fz * (max.z - min.z)]);
            }
        }
        pts
    };
    let mut builder = MeshBuilder {
        vertices: Vec::new(),
        triangles: Vec::new(),
        edge_vertex: HashMap::new(),
    };
    let mut plane_a = eval(&plane_points(0));
    for ix in 0..res - 1 {
        let plane_b = eval(&plane_points(ix + 1));
        builder.march_layer(ix, &plane_a, &plane_b, iso, res3, min, max);
        plane_a = plane_b;
    }
    TriangleMesh {
        vertices: builder.vertices,
        triangles: builder.triangles,
        iteration: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_eval(r: f64) -> impl Fn(&[[f64; 3]]) -> Vec<f64> + Sync {
        move |pts: &[[f64; 3]]| {
            pts.iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r)
                .collect()
        }
    }

    #[test]
    fn grid_sampling_layout_and_values() {
        let grid = sample_grid(&sphere_eval(0.3), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [3, 3, 3]);
        assert_eq!(grid.values.len(), 27);
        assert!((grid.value(1, 1, 1) - (0.0 - 0.3)).abs() < 1e-12, "center is -r");
        let corner = grid.value(0, 0, 0);
        assert!((corner - (3.0f64.sqrt() - 0.3)).abs() < 1e-12, "corner is sqrt(3)-r");
        // deterministic
        let again = sample_grid(&sphere_eval(0.3), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [3, 3, 3]);
        assert_eq!(grid.values, again.values);
    }

    #[test]
    fn sphere_vertices_near_surface() {
        let grid = sample_grid(&sphere_eval(0.5), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [64, 64, 64]);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let cell = 2.0 / 63.0;
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 0.5).abs() < 2.0 * cell,
                "vertex {:?} too far from sphere",
                v
            );
        }
    }

    #[test]
    fn sphere_area_within_5_percent_at_128() {
        let grid = sample_grid(&sphere_eval(0.5), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [128, 128, 128]);
        let mesh = marching_cubes(&grid, 0.0);
        let area = mesh.surface_area();
        let analytic = 4.0 * std::f64::consts::PI * 0.25;
        assert!(
            (area - analytic).abs() / analytic < 0.05,
            "area {area} vs analytic {analytic}"
        );
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let grid = sample_grid(&|pts: &[[f64; 3]]| vec![1.0; pts.len()], vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [8, 8, 8]);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn winding_points_outward() {
        let grid = sample_grid(&sphere_eval(0.5), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [32, 32, 32]);
        let mesh = marching_cubes(&grid, 0.0);
        let mut wrong = 0;
        for i in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle_vertices(i);
            let n = (b - a).cross(c - a);
            let centroid = (a + b + c) / 3.0;
            if n.dot(centroid) <= 0.0 {
                wrong += 1;
            }
        }
        assert_eq!(wrong, 0, "{wrong} of {} triangles wound inward", mesh.triangles.len());
    }

    #[test]
    fn watertight_away_from_boundary() {
        let grid = sample_grid(&sphere_eval(0.5), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [24, 24, 24]);
        let mesh = marching_cubes(&grid, 0.0);
        let mut edge_count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        for (edge, count) in edge_count {
            assert_eq!(count, 2, "edge {edge:?} shared by {count} triangles");
        }
    }

    #[test]
    fn refinement_halves_max_vertex_error() {
        let max_err = |res: usize| -> f64 {
            let grid = sample_grid(&sphere_eval(0.5), vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [res, res, res]);
            let mesh = marching_cubes(&grid, 0.0);
            mesh.vertices
                .iter()
                .map(|v| (v.norm() - 0.5).abs())
                .fold(0.0, f64::max)
        };
        let coarse = max_err(16);
        let fine = max_err(32);
        assert!(fine <= coarse / 2.0, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn streaming_extraction_matches_grid_path() {
        let eval = sphere_eval(0.45);
        let grid = sample_grid(&eval, vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), [20, 20, 20]);
        let a = marching_cubes(&grid, 0.0);
        let b = extract_from_field(&eval, vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), 20, 0.0);
        assert_eq!(a.triangles, b.triangles);
        assert_eq!(a.vertices.len(), b.vertices.len());
        for (va, vb) in a.vertices.iter().zip(b.vertices.iter()) {
            assert!((*va - *vb).norm() < 1e-12);
        }
    }
}
