//! Discrete functional shapes: polyhedral meshes carrying one scalar signal
//! value per vertex, plus their Dirac (point-mass) representation and the
//! lumped mass matrix used for L² quadrature on the shape.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// A cell is degenerate when its Dirac weight falls below this fraction of
/// `(max cell edge)^d`. Exactly-collapsed cells always qualify.
pub const DEGENERACY_REL_TOL: f64 = 1e-12;

/// Direction assigned to degenerate cells (their weight is clamped to zero,
/// so the choice never contributes to any kernel sum).
pub const DEGENERATE_DIRECTION: Vec3 = [1.0, 0.0, 0.0];

/// On-disk encodings understood by [`load_fshape`] / [`save_fshape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    /// `FSHAPE d n P T` header, then P lines of n coordinates + 1 signal,
    /// then T lines of d+1 zero-based vertex indices.
    NativeAscii,
    /// Standard OFF with the per-vertex signal appended to each vertex line.
    /// Ambient dimension is fixed to 3; cell arity decides d.
    OffWithSignal,
}

/// A polyhedral mesh of dimension d ∈ {1, 2} immersed in Rⁿ (n ∈ {2, 3}),
/// with one scalar signal value per vertex. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FShapeMesh {
    vertices: Vec<Vec3>,
    signal: Vec<f64>,
    /// Flat connectivity, `cell_dim + 1` indices per cell.
    cells: Vec<usize>,
    cell_dim: usize,
    ambient_dim: usize,
}

impl FShapeMesh {
    /// Builds and validates a mesh. Planar meshes (n = 2) must keep a zero
    /// third coordinate. Degenerate (zero-measure) cells are accepted here
    /// and only flagged downstream, since gradient descent may transiently
    /// collapse cells.
    pub fn new(
        vertices: Vec<Vec3>,
        signal: Vec<f64>,
        cells: Vec<usize>,
        cell_dim: usize,
        ambient_dim: usize,
    ) -> Result<Self> {
        if !matches!(cell_dim, 1 | 2) {
            return Err(Error::validation(format!(
                "cell dimension d must be 1 or 2, got {cell_dim}"
            )));
        }
        if !matches!(ambient_dim, 2 | 3) {
            return Err(Error::validation(format!(
                "ambient dimension n must be 2 or 3, got {ambient_dim}"
            )));
        }
        if cell_dim >= ambient_dim {
            return Err(Error::validation(format!(
                "cell dimension d = {cell_dim} must be < ambient dimension n = {ambient_dim}"
            )));
        }
        let p = vertices.len();
        if signal.len() != p {
            return Err(Error::validation(format!(
                "signal length {} does not match vertex count {p}",
                signal.len()
            )));
        }
        let arity = cell_dim + 1;
        if cells.len() % arity != 0 {
            return Err(Error::validation(format!(
                "connectivity length {} is not a multiple of cell arity {arity}",
                cells.len()
            )));
        }
        for (ci, cell) in cells.chunks_exact(arity).enumerate() {
            for &k in cell {
                if k >= p {
                    return Err(Error::validation(format!(
                        "cell {ci} references vertex index {k}, but only {p} vertices exist"
                    )));
                }
            }
            for i in 0..arity {
                for j in (i + 1)..arity {
                    if cell[i] == cell[j] {
                        return Err(Error::validation(format!(
                            "cell {ci} repeats vertex index {}",
                            cell[i]
                        )));
                    }
                }
            }
        }
        for (k, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::validation(format!(
                    "vertex {k} has a non-finite coordinate"
                )));
            }
            if ambient_dim == 2 && v[2] != 0.0 {
                return Err(Error::validation(format!(
                    "vertex {k} has nonzero third coordinate in a 2-dimensional mesh"
                )));
            }
        }
        if let Some(k) = signal.iter().position(|s| !s.is_finite()) {
            return Err(Error::validation(format!(
                "signal value at vertex {k} is not finite"
            )));
        }
        Ok(Self {
            vertices,
            signal,
            cells,
            cell_dim,
            ambient_dim,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len() / (self.cell_dim + 1)
    }

    pub fn cell_dim(&self) -> usize {
        self.cell_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> &[usize] {
        let arity = self.cell_dim + 1;
        &self.cells[index * arity..(index + 1) * arity]
    }

    /// Same topology and signal, new vertex positions. Positions are not
    /// re-validated; they come from integrators that carry their own NaN
    /// checks.
    pub fn with_positions(&self, vertices: Vec<Vec3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            signal: self.signal.clone(),
            cells: self.cells.clone(),
            cell_dim: self.cell_dim,
            ambient_dim: self.ambient_dim,
        }
    }

    /// Same topology and positions, new signal.
    pub fn with_signal(&self, signal: Vec<f64>) -> Result<Self> {
        if signal.len() != self.vertices.len() {
            return Err(Error::validation(format!(
                "signal length {} does not match vertex count {}",
                signal.len(),
                self.vertices.len()
            )));
        }
        Ok(Self {
            vertices: self.vertices.clone(),
            signal,
            cells: self.cells.clone(),
            cell_dim: self.cell_dim,
            ambient_dim: self.ambient_dim,
        })
    }

    /// Mesh translated by `t`.
    pub fn translated(&self, t: Vec3) -> Self {
        self.with_positions(self.vertices.iter().map(|&v| geom::add(v, t)).collect())
    }

    /// Mean of the vertex positions.
    pub fn centroid(&self) -> Vec3 {
        geom::centroid(&self.vertices)
    }

    /// Dirac weight of one cell at the given positions: the cross-product
    /// norm for triangles (twice the area) and the length for segments.
    fn dirac_weight_at(&self, pos: &[Vec3], cell: &[usize]) -> f64 {
        match self.cell_dim {
            1 => geom::dist(pos[cell[1]], pos[cell[0]]),
            2 => {
                let u = geom::sub(pos[cell[1]], pos[cell[0]]);
                let w = geom::sub(pos[cell[2]], pos[cell[0]]);
                geom::norm(geom::cross(u, w))
            }
            _ => unreachable!(),
        }
    }

    /// True d-volume of one cell (area for triangles, length for segments)
    /// at the given positions.
    fn volume_at(&self, pos: &[Vec3], cell: &[usize]) -> f64 {
        let w = self.dirac_weight_at(pos, cell);
        if self.cell_dim == 2 {
            0.5 * w
        } else {
            w
        }
    }

    /// True d-volume of cell `index`.
    pub fn cell_volume(&self, index: usize) -> f64 {
        self.volume_at(&self.vertices, self.cell(index))
    }

    /// Per-cell d-volumes at arbitrary positions over this connectivity.
    pub fn volumes_at(&self, pos: &[Vec3]) -> Vec<f64> {
        let arity = self.cell_dim + 1;
        self.cells
            .chunks_exact(arity)
            .map(|cell| self.volume_at(pos, cell))
            .collect()
    }

    /// Total d-volume, summed in cell order with compensation.
    pub fn total_volume(&self) -> f64 {
        geom::compensated_sum((0..self.cell_count()).map(|c| self.cell_volume(c)))
    }

    fn degeneracy_threshold(&self, pos: &[Vec3], cell: &[usize]) -> f64 {
        let mut max_edge: f64 = 0.0;
        for i in 0..cell.len() {
            for j in (i + 1)..cell.len() {
                max_edge = max_edge.max(geom::dist(pos[cell[i]], pos[cell[j]]));
            }
        }
        DEGENERACY_REL_TOL * max_edge.powi(self.cell_dim as i32)
    }

    /// Indices of cells whose measure is (numerically) zero.
    pub fn degenerate_cells(&self) -> Vec<usize> {
        let arity = self.cell_dim + 1;
        self.cells
            .chunks_exact(arity)
            .enumerate()
            .filter(|(_, cell)| {
                self.dirac_weight_at(&self.vertices, cell)
                    <= self.degeneracy_threshold(&self.vertices, cell)
            })
            .map(|(ci, _)| ci)
            .collect()
    }

    /// Dirac approximation computed at arbitrary positions and signal over
    /// this connectivity. Degenerate cells get weight 0, a fixed unit
    /// direction, and a flag.
    pub fn diracs_at(&self, pos: &[Vec3], signal: &[f64]) -> DiracSet {
        assert_eq!(pos.len(), self.vertex_count());
        assert_eq!(signal.len(), self.vertex_count());
        let arity = self.cell_dim + 1;
        let t = self.cell_count();
        let mut centers = Vec::with_capacity(t);
        let mut directions = Vec::with_capacity(t);
        let mut signals = Vec::with_capacity(t);
        let mut weights = Vec::with_capacity(t);
        let mut degenerate = Vec::new();
        for (ci, cell) in self.cells.chunks_exact(arity).enumerate() {
            let inv = 1.0 / arity as f64;
            let mut center = geom::ZERO;
            let mut mean_signal = 0.0;
            for &k in cell {
                center = geom::add(center, pos[k]);
                mean_signal += signal[k];
            }
            center = geom::scale(center, inv);
            mean_signal *= inv;

            let raw = match self.cell_dim {
                1 => geom::sub(pos[cell[1]], pos[cell[0]]),
                2 => {
                    let u = geom::sub(pos[cell[1]], pos[cell[0]]);
                    let w = geom::sub(pos[cell[2]], pos[cell[0]]);
                    geom::cross(u, w)
                }
                _ => unreachable!(),
            };
            let weight = geom::norm(raw);
            let tol = self.degeneracy_threshold(pos, cell);
            let (dir, weight) = if weight <= tol {
                degenerate.push(ci);
                (DEGENERATE_DIRECTION, 0.0)
            } else {
                (geom::scale(raw, 1.0 / weight), weight)
            };
            centers.push(center);
            directions.push(dir);
            signals.push(mean_signal);
            weights.push(weight);
        }
        DiracSet {
            centers,
            directions,
            signals,
            weights,
            cell_dim: self.cell_dim,
            ambient_dim: self.ambient_dim,
            degenerate,
        }
    }

    /// Dirac approximation of this mesh: one weighted Dirac per cell, with
    /// the cell center, unit direction (normal for surfaces, tangent for
    /// curves), mean signal, and the cross-product-norm weight.
    pub fn to_diracs(&self) -> DiracSet {
        self.diracs_at(&self.vertices, &self.signal)
    }

    /// Barycentric lumped vertex weights at arbitrary positions:
    /// w_k = 1/(d+1) · Σ of the d-volumes of cells incident to k.
    pub fn mass_weights_at(&self, pos: &[Vec3]) -> Vec<f64> {
        let arity = self.cell_dim + 1;
        let share = 1.0 / arity as f64;
        let mut w = vec![0.0; self.vertex_count()];
        for cell in self.cells.chunks_exact(arity) {
            let vol = self.volume_at(pos, cell);
            for &k in cell {
                w[k] += share * vol;
            }
        }
        w
    }

    /// Diagonal mass matrix D(x) at the mesh's own positions.
    pub fn mass_matrix(&self) -> MassMatrix {
        MassMatrix {
            weights: self.mass_weights_at(&self.vertices),
        }
    }

    /// Accumulates `Σ_k coeffs[k] · ∂w_k/∂x` at the given positions, where
    /// w are the lumped vertex weights. Degenerate cells contribute the zero
    /// subgradient.
    pub fn mass_gradient_at(&self, pos: &[Vec3], coeffs: &[f64]) -> Vec<Vec3> {
        assert_eq!(coeffs.len(), self.vertex_count());
        let arity = self.cell_dim + 1;
        let share = 1.0 / arity as f64;
        let mut grad = vec![geom::ZERO; self.vertex_count()];
        for cell in self.cells.chunks_exact(arity) {
            // s_c = mean of the incident vertex coefficients; each cell's
            // volume feeds every incident w_k with weight 1/(d+1).
            let mut s = 0.0;
            for &k in cell {
                s += coeffs[k];
            }
            s *= share;
            match self.cell_dim {
                1 => {
                    let raw = geom::sub(pos[cell[1]], pos[cell[0]]);
                    let len = geom::norm(raw);
                    if len <= self.degeneracy_threshold(pos, cell) {
                        continue;
                    }
                    let g = geom::scale(raw, s / len);
                    grad[cell[1]] = geom::add(grad[cell[1]], g);
                    grad[cell[0]] = geom::sub(grad[cell[0]], g);
                }
                2 => {
                    let u = geom::sub(pos[cell[1]], pos[cell[0]]);
                    let wv = geom::sub(pos[cell[2]], pos[cell[0]]);
                    let cr = geom::cross(u, wv);
                    let n = geom::norm(cr);
                    if n <= self.degeneracy_threshold(pos, cell) {
                        continue;
                    }
                    // area = |cr|/2; d|cr| = <V, du×w + u×dw>
                    let v = geom::scale(cr, 1.0 / n);
                    let gu = geom::scale(geom::cross(wv, v), 0.5 * s);
                    let gw = geom::scale(geom::cross(v, u), 0.5 * s);
                    grad[cell[1]] = geom::add(grad[cell[1]], gu);
                    grad[cell[2]] = geom::add(grad[cell[2]], gw);
                    grad[cell[0]] = geom::sub(grad[cell[0]], geom::add(gu, gw));
                }
                _ => unreachable!(),
            }
        }
        grad
    }

    /// Discrete L²(X) inner product (D(x)u | v) with barycentric lumping.
    pub fn l2_inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.mass_matrix().inner(u, v)
    }

    /// Vertices on the topological boundary. For surfaces these are the ends
    /// of edges that belong to exactly one triangle; for curves, the
    /// vertices with cell incidence exactly one.
    pub fn boundary_vertices(&self) -> BTreeSet<usize> {
        let arity = self.cell_dim + 1;
        let mut boundary = BTreeSet::new();
        match self.cell_dim {
            1 => {
                let mut incidence = vec![0usize; self.vertex_count()];
                for cell in self.cells.chunks_exact(arity) {
                    for &k in cell {
                        incidence[k] += 1;
                    }
                }
                for (k, &c) in incidence.iter().enumerate() {
                    if c == 1 {
                        boundary.insert(k);
                    }
                }
            }
            2 => {
                let mut edge_count = std::collections::HashMap::new();
                for cell in self.cells.chunks_exact(arity) {
                    for (a, b) in [(cell[0], cell[1]), (cell[1], cell[2]), (cell[2], cell[0])] {
                        let key = (a.min(b), a.max(b));
                        *edge_count.entry(key).or_insert(0usize) += 1;
                    }
                }
                for (&(a, b), &count) in &edge_count {
                    if count == 1 {
                        boundary.insert(a);
                        boundary.insert(b);
                    }
                }
            }
            _ => unreachable!(),
        }
        boundary
    }
}

/// A finite weighted sum of Diracs approximating a functional varifold:
/// one (center, unit direction, mean signal, weight) tuple per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracSet {
    centers: Vec<Vec3>,
    directions: Vec<Vec3>,
    signals: Vec<f64>,
    weights: Vec<f64>,
    cell_dim: usize,
    ambient_dim: usize,
    degenerate: Vec<usize>,
}

impl DiracSet {
    /// Assembles a Dirac set from raw parts, checking the unit-direction and
    /// nonnegative-weight invariants.
    pub fn new(
        centers: Vec<Vec3>,
        directions: Vec<Vec3>,
        signals: Vec<f64>,
        weights: Vec<f64>,
        cell_dim: usize,
        ambient_dim: usize,
    ) -> Result<Self> {
        let t = centers.len();
        if directions.len() != t || signals.len() != t || weights.len() != t {
            return Err(Error::validation(
                "Dirac component arrays have mismatched lengths".to_string(),
            ));
        }
        for (l, (&dir, &r)) in directions.iter().zip(&weights).enumerate() {
            if r < 0.0 || !r.is_finite() {
                return Err(Error::validation(format!(
                    "Dirac {l} has invalid weight {r}"
                )));
            }
            if r > 0.0 && (geom::norm(dir) - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "Dirac {l} direction is not unit length (|V| = {})",
                    geom::norm(dir)
                )));
            }
        }
        Ok(Self {
            centers,
            directions,
            signals,
            weights,
            cell_dim,
            ambient_dim,
            degenerate: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn signals(&self) -> &[f64] {
        &self.signals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cell_dim(&self) -> usize {
        self.cell_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Cells flagged as degenerate when this set was built from a mesh.
    pub fn degenerate(&self) -> &[usize] {
        &self.degenerate
    }

    /// Σ r_ℓ in index order (compensated). Follows the paper's weight
    /// convention, i.e. twice the total area for surfaces.
    pub fn total_mass(&self) -> f64 {
        geom::compensated_sum(self.weights.iter().copied())
    }
}

/// Diagonal lumped mass matrix: one nonnegative weight per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    weights: Vec<f64>,
}

impl MassMatrix {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Σ_k w_k; equals the mesh total d-volume.
    pub fn total(&self) -> f64 {
        geom::compensated_sum(self.weights.iter().copied())
    }

    /// (D u | v) = Σ_k w_k u_k v_k.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != self.weights.len() || v.len() != self.weights.len() {
            return Err(Error::validation(format!(
                "l2_inner length mismatch: mass has {} weights, u has {}, v has {}",
                self.weights.len(),
                u.len(),
                v.len()
            )));
        }
        Ok(geom::compensated_sum(
            (0..u.len()).map(|k| self.weights[k] * u[k] * v[k]),
        ))
    }

    /// D u, componentwise.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(u).map(|(w, x)| w * x).collect()
    }

    /// D⁻¹ u; errors when some u_k ≠ 0 sits on a zero weight.
    pub fn solve(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(u.len());
        for (k, (&w, &x)) in self.weights.iter().zip(u).enumerate() {
            if w <= 0.0 {
                if x != 0.0 {
                    return Err(Error::SingularMass { vertex: k });
                }
                out.push(0.0);
            } else {
                out.push(x / w);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Loads a functional shape from disk.
pub fn load_fshape(path: impl AsRef<Path>, format: MeshFormat) -> Result<FShapeMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        MeshFormat::NativeAscii => parse_native(path, &text),
        MeshFormat::OffWithSignal => parse_off(path, &text),
    }
}

/// Saves a functional shape. Floats are written with 17 significant digits,
/// so a save/load round trip reproduces every f64 bit-exactly. Meshes with
/// non-finite values are refused.
pub fn save_fshape(mesh: &FShapeMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    for (k, v) in mesh.vertices.iter().enumerate() {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::validation(format!(
                "refusing to save: vertex {k} has a non-finite coordinate"
            )));
        }
    }
    if let Some(k) = mesh.signal.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!(
            "refusing to save: signal value at vertex {k} is not finite"
        )));
    }
    let mut text = String::new();
    match format {
        MeshFormat::NativeAscii => write_native(mesh, &mut text),
        MeshFormat::OffWithSignal => write_off(mesh, &mut text)?,
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a real number, got '{tok}'")))
}

fn parse_usize(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("expected a nonnegative integer, got '{tok}'")))
}

fn parse_native(path: &Path, text: &str) -> Result<FShapeMesh> {
    // Line numbers are 1-based and count every line, including blanks.
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 5 || toks[0] != "FSHAPE" {
        return Err(parse_err(path, ln, "expected header 'FSHAPE d n P T'"));
    }
    let d = parse_usize(path, ln, toks[1])?;
    let n = parse_usize(path, ln, toks[2])?;
    let p = parse_usize(path, ln, toks[3])?;
    let t = parse_usize(path, ln, toks[4])?;

    let mut vertices = Vec::with_capacity(p);
    let mut signal = Vec::with_capacity(p);
    for _ in 0..p {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in vertex block"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != n + 1 {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} values (coordinates + signal), got {}", n + 1, toks.len()),
            ));
        }
        let mut v = geom::ZERO;
        for (i, tok) in toks[..n].iter().enumerate() {
            v[i] = parse_f64(path, ln, tok)?;
        }
        vertices.push(v);
        signal.push(parse_f64(path, ln, toks[n])?);
    }

    let arity = d + 1;
    let mut cells = Vec::with_capacity(t * arity);
    for _ in 0..t {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in cell block"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != arity {
            return Err(parse_err(
                path,
                ln,
                format!("expected {arity} vertex indices, got {}", toks.len()),
            ));
        }
        for tok in toks {
            cells.push(parse_usize(path, ln, tok)?);
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(path, ln, "trailing content after cell block"));
    }
    FShapeMesh::new(vertices, signal, cells, d, n)
}

fn write_native(mesh: &FShapeMesh, out: &mut String) {
    let n = mesh.ambient_dim;
    writeln!(
        out,
        "FSHAPE {} {} {} {}",
        mesh.cell_dim,
        n,
        mesh.vertex_count(),
        mesh.cell_count()
    )
    .unwrap();
    for (v, s) in mesh.vertices.iter().zip(&mesh.signal) {
        for c in &v[..n] {
            write!(out, "{c:.16e} ").unwrap();
        }
        writeln!(out, "{s:.16e}").unwrap();
    }
    let arity = mesh.cell_dim + 1;
    for cell in mesh.cells.chunks_exact(arity) {
        let row: Vec<String> = cell.iter().map(|k| k.to_string()).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

fn parse_off(path: &Path, text: &str) -> Result<FShapeMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        });

    let (ln, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if magic.trim() != "OFF" {
        return Err(parse_err(path, ln, "expected 'OFF' magic line"));
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "missing count line"))?;
    let toks: Vec<&str> = counts.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(parse_err(path, ln, "expected 'P T E' counts"));
    }
    let p = parse_usize(path, ln, toks[0])?;
    let t = parse_usize(path, ln, toks[1])?;

    let mut vertices = Vec::with_capacity(p);
    let mut signal = Vec::with_capacity(p);
    for _ in 0..p {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in vertex block"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 'x y z signal', got {} values", toks.len()),
            ));
        }
        vertices.push([
            parse_f64(path, ln, toks[0])?,
            parse_f64(path, ln, toks[1])?,
            parse_f64(path, ln, toks[2])?,
        ]);
        signal.push(parse_f64(path, ln, toks[3])?);
    }

    let mut cells = Vec::new();
    let mut arity: Option<usize> = None;
    for _ in 0..t {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in face block"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            return Err(parse_err(path, ln, "empty face line"));
        }
        let k = parse_usize(path, ln, toks[0])?;
        if !matches!(k, 2 | 3) {
            return Err(parse_err(
                path,
                ln,
                format!("only segment (2) and triangle (3) cells are supported, got {k}"),
            ));
        }
        match arity {
            None => arity = Some(k),
            Some(a) if a != k => {
                return Err(parse_err(path, ln, "mixed cell arities are not supported"))
            }
            _ => {}
        }
        if toks.len() != k + 1 {
            return Err(parse_err(
                path,
                ln,
                format!("expected {k} indices after the count, got {}", toks.len() - 1),
            ));
        }
        for tok in &toks[1..] {
            cells.push(parse_usize(path, ln, tok)?);
        }
    }
    let d = arity.map(|a| a - 1).unwrap_or(2);
    FShapeMesh::new(vertices, signal, cells, d, 3)
}

fn write_off(mesh: &FShapeMesh, out: &mut String) -> Result<()> {
    if mesh.ambient_dim != 3 {
        return Err(Error::validation(
            "OFF output requires ambient dimension 3".to_string(),
        ));
    }
    writeln!(out, "OFF").unwrap();
    writeln!(out, "{} {} 0", mesh.vertex_count(), mesh.cell_count()).unwrap();
    for (v, s) in mesh.vertices.iter().zip(&mesh.signal) {
        writeln!(out, "{:.16e} {:.16e} {:.16e} {s:.16e}", v[0], v[1], v[2]).unwrap();
    }
    let arity = mesh.cell_dim + 1;
    for cell in mesh.cells.chunks_exact(arity) {
        let row: Vec<String> = cell.iter().map(|k| k.to_string()).collect();
        writeln!(out, "{} {}", arity, row.join(" ")).unwrap();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
