//! Synthetic functional shapes for tests and experiments: spheres and
//! ellipsoids (subdivided icosahedra), flat and holed squares, and the
//! overlapping-squares pair used by the signal-oscillation experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{self, Vec3};
use crate::mesh::FShapeMesh;

/// Vertex count of an icosphere at the given subdivision level
/// (10·4^level + 2: 12, 42, 162, 642, 2562, …).
pub fn icosphere_vertex_count(level: usize) -> usize {
    10 * 4usize.pow(level as u32) + 2
}

/// Smallest subdivision level whose vertex count reaches `points`.
pub fn icosphere_level_for(points: usize) -> usize {
    let mut level = 0;
    while icosphere_vertex_count(level) < points && level < 7 {
        level += 1;
    }
    level
}

/// Closed unit-style sphere: an icosahedron subdivided `level` times, with
/// every vertex pushed onto the sphere of the given radius. Signal is zero.
pub fn icosphere(level: usize, radius: f64) -> FShapeMesh {
    ellipsoid(level, [radius, radius, radius])
}

/// Icosphere stretched onto the axis-aligned ellipsoid with semi-axes `[a, b, c]`.
pub fn ellipsoid(level: usize, semi_axes: [f64; 3]) -> FShapeMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let base: Vec<Vec3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut vertices: Vec<Vec3> = base
        .into_iter()
        .map(|v| geom::normalized(v, 1e-12).unwrap())
        .collect();
    #[rustfmt::skip]
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoint_cache = std::collections::HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint_cache.entry(key).or_insert_with(|| {
                    let m = geom::scale(geom::add(vertices[a], vertices[b]), 0.5);
                    vertices.push(geom::normalized(m, 1e-12).unwrap());
                    vertices.len() - 1
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }

    let vertices: Vec<Vec3> = vertices
        .into_iter()
        .map(|v| [v[0] * semi_axes[0], v[1] * semi_axes[1], v[2] * semi_axes[2]])
        .collect();
    let signal = vec![0.0; vertices.len()];
    let cells = faces.into_iter().flatten().collect();
    FShapeMesh::new(vertices, signal, cells, 2, 3).unwrap()
}

/// Regular triangulated grid over [−half, half]² in the z = 0 plane, with
/// (m+1)² vertices. Signal is zero.
pub fn flat_square(m: usize, half: f64) -> FShapeMesh {
    grid_patch(m, half, |_, _| true)
}

/// Flat square with a centered rectangular opening: grid cells whose center
/// falls inside [−hole_half, hole_half]² are removed, producing an inner rim
/// in addition to the outer one.
pub fn holed_square(m: usize, half: f64, hole_half: f64) -> FShapeMesh {
    grid_patch(m, half, |cx, cy| {
        !(cx.abs() < hole_half && cy.abs() < hole_half)
    })
}

fn grid_patch(m: usize, half: f64, keep: impl Fn(f64, f64) -> bool) -> FShapeMesh {
    assert!(m >= 1);
    let n = m + 1;
    let coord = |i: usize| -half + 2.0 * half * i as f64 / m as f64;
    let mut cells_raw: Vec<[usize; 3]> = Vec::new();
    let idx = |i: usize, j: usize| j * n + i;
    for j in 0..m {
        for i in 0..m {
            let cx = 0.5 * (coord(i) + coord(i + 1));
            let cy = 0.5 * (coord(j) + coord(j + 1));
            if !keep(cx, cy) {
                continue;
            }
            cells_raw.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            cells_raw.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    // Drop vertices that ended up in no cell (the hole interior).
    let mut used = vec![false; n * n];
    for c in &cells_raw {
        for &k in c {
            used[k] = true;
        }
    }
    let mut remap = vec![usize::MAX; n * n];
    let mut vertices = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let k = idx(i, j);
            if used[k] {
                remap[k] = vertices.len();
                vertices.push([coord(i), coord(j), 0.0]);
            }
        }
    }
    let cells: Vec<usize> = cells_raw
        .into_iter()
        .flatten()
        .map(|k| remap[k])
        .collect();
    let signal = vec![0.0; vertices.len()];
    FShapeMesh::new(vertices, signal, cells, 2, 3).unwrap()
}

/// The mass-cancellation pair: a large source square (signal 0) and a small
/// centered target square (signal 1), coplanar, sampled on separate grids of
/// `m_source`/`m_target` cells per side.
pub fn overlapping_squares(
    m_source: usize,
    half_source: f64,
    m_target: usize,
    half_target: f64,
) -> (FShapeMesh, FShapeMesh) {
    let source = flat_square(m_source, half_source);
    let target = flat_square(m_target, half_target);
    let ones = vec![1.0; target.vertex_count()];
    (source, target.with_signal(ones).unwrap())
}

/// Hemisphere indicator: 1 where z > 0, else 0. The shared "half/half"
/// signal pattern for sphere populations.
pub fn half_signal(mesh: &FShapeMesh) -> Vec<f64> {
    mesh.vertices()
        .iter()
        .map(|v| if v[2] > 0.0 { 1.0 } else { 0.0 })
        .collect()
}

/// Smooth seeded shape jitter: radial scaling by a sum of `bumps` Gaussian
/// bumps with random centers on the unit sphere and amplitude `amplitude`.
pub fn jitter_radial(mesh: &FShapeMesh, seed: u64, amplitude: f64, bumps: usize) -> FShapeMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec3> = (0..bumps)
        .map(|_| {
            let v = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            geom::normalized(v, 1e-9).unwrap_or([1.0, 0.0, 0.0])
        })
        .collect();
    let amps: Vec<f64> = (0..bumps)
        .map(|_| rng.gen_range(-amplitude..amplitude))
        .collect();
    let width2 = 0.35;
    let vertices = mesh
        .vertices()
        .iter()
        .map(|&v| {
            let dir = geom::normalized(v, 1e-12).unwrap_or([0.0, 0.0, 1.0]);
            let mut scale = 1.0;
            for (c, a) in centers.iter().zip(&amps) {
                scale += a * (-geom::dist_sq(dir, *c) / width2).exp();
            }
            geom::scale(v, scale)
        })
        .collect();
    mesh.with_positions(vertices)
}

/// Adds i.i.d. Gaussian noise of deviation `sigma` to the signal (seeded).
pub fn add_signal_noise(mesh: &FShapeMesh, seed: u64, sigma: f64) -> FShapeMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = mesh
        .signal()
        .iter()
        .map(|f| {
            // Box-Muller keeps the dependency surface small.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            f + sigma * (-2.0 * u1.ln()).sqrt() * u2.cos()
        })
        .collect();
    mesh.with_signal(signal).unwrap()
}
