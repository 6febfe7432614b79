//! Idealized left-ventricle geometry: a truncated thick-walled prolate
//! ellipsoid meshed with hexahedra, rule-based transmural fiber field,
//! and the ischemic-region mask.
//!
//! The ellipsoid is centered at the origin with the long axis along z,
//! apex at z = -c and base truncation plane at z = +truncation_height.
//! The apex is closed with collapsed-edge (wedge-degenerate) hexahedra;
//! their Jacobians stay strictly positive at interior Gauss points.

use nalgebra::Vector3;

use crate::quadrature::{
    self, face_local_nodes, hex_gauss_points, shape_gradients, NQ_HEX,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Endo,
    Epi,
    Base,
}

/// A quad facet on the mesh boundary, identified by its owning cell and
/// the local (axis, side) face of the reference cube.
#[derive(Debug, Clone, Copy)]
pub struct Facet {
    pub cell: usize,
    pub axis: usize,
    pub side: i8,
    pub vertices: [usize; 4],
    pub tag: BoundaryTag,
}

/// Mesh construction parameters.
///
/// `resolution = (circumferential per quadrant, longitudinal, transmural)`
/// cell counts; the full ring therefore has `4 * resolution.0` cells.
#[derive(Debug, Clone, Copy)]
pub struct MeshSpec {
    pub inner_semi_axes: [f64; 3],
    pub outer_semi_axes: [f64; 3],
    pub truncation_height: f64,
    pub resolution: (usize, usize, usize),
}

impl MeshSpec {
    pub fn desk_default() -> Self {
        MeshSpec {
            inner_semi_axes: [0.027, 0.027, 0.057],
            outer_semi_axes: [0.04, 0.04, 0.07],
            truncation_height: 0.02,
            resolution: (8, 8, 6),
        }
    }

    fn validate(&self) -> Result<()> {
        for d in 0..3 {
            if !(self.inner_semi_axes[d] > 0.0 && self.outer_semi_axes[d] > self.inner_semi_axes[d]) {
                return Err(Error::invalid(format!(
                    "inner semi-axes must be strictly inside outer (axis {d}: {} vs {})",
                    self.inner_semi_axes[d], self.outer_semi_axes[d]
                )));
            }
        }
        if self.truncation_height <= 0.0 || self.truncation_height >= self.inner_semi_axes[2] {
            return Err(Error::invalid(format!(
                "truncation height {} must lie in (0, inner c = {})",
                self.truncation_height, self.inner_semi_axes[2]
            )));
        }
        let (nc, nl, nt) = self.resolution;
        if nc < 2 || nl < 2 || nt < 2 {
            return Err(Error::invalid("resolution counts must be >= 2 per direction"));
        }
        Ok(())
    }

    /// Semi-axes at transmural coordinate t in [0,1] (0 = endo, 1 = epi).
    fn axes_at(&self, t: f64) -> [f64; 3] {
        let mut a = [0.0; 3];
        for d in 0..3 {
            a[d] = self.inner_semi_axes[d] + t * (self.outer_semi_axes[d] - self.inner_semi_axes[d]);
        }
        a
    }
}

#[derive(Debug, Clone)]
pub struct HexMesh {
    pub spec: MeshSpec,
    pub vertices: Vec<Vector3<f64>>,
    pub cells: Vec<[usize; 8]>,
    pub boundary_facets: Vec<Facet>,
    pub characteristic_h: f64,
}

impl HexMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Physical position of a reference point inside a cell.
    pub fn cell_point(&self, cell: usize, xi: [f64; 3]) -> Vector3<f64> {
        let n = quadrature::shape_values(xi);
        let mut x = Vector3::zeros();
        for a in 0..8 {
            x += n[a] * self.vertices[self.cells[cell][a]];
        }
        x
    }

    /// Geometric Jacobian dX/dxi of a cell at a reference point.
    pub fn cell_jacobian(&self, cell: usize, xi: [f64; 3]) -> nalgebra::Matrix3<f64> {
        let g = shape_gradients(xi);
        let mut j = nalgebra::Matrix3::zeros();
        for a in 0..8 {
            let x = self.vertices[self.cells[cell][a]];
            for r in 0..3 {
                for c in 0..3 {
                    j[(r, c)] += x[r] * g[a][c];
                }
            }
        }
        j
    }

    /// Reference-configuration wall volume by quadrature.
    pub fn volume(&self) -> f64 {
        let qp = hex_gauss_points();
        let mut v = 0.0;
        for cell in 0..self.n_cells() {
            for q in 0..NQ_HEX {
                v += self.cell_jacobian(cell, qp[q]).determinant();
            }
        }
        v
    }

    /// Positions of all quadrature points, cell-major.
    pub fn quadrature_points(&self) -> Vec<Vector3<f64>> {
        let qp = hex_gauss_points();
        let mut pts = Vec::with_capacity(self.n_cells() * NQ_HEX);
        for cell in 0..self.n_cells() {
            for q in 0..NQ_HEX {
                pts.push(self.cell_point(cell, qp[q]));
            }
        }
        pts
    }

    pub fn facets_tagged(&self, tag: BoundaryTag) -> impl Iterator<Item = &Facet> {
        self.boundary_facets.iter().filter(move |f| f.tag == tag)
    }
}

/// Build the truncated thick-walled prolate ellipsoid mesh.
pub fn build_ellipsoid_mesh(spec: &MeshSpec) -> Result<HexMesh> {
    spec.validate()?;
    let (ncq, nl, nt) = spec.resolution;
    let ntheta = 4 * ncq;

    // vertex indexing: the apex column (one vertex per transmural layer)
    // comes first, then rings j = 1..=nl laid out (j, i, k)
    let vid = |i: usize, j: usize, k: usize| -> usize {
        if j == 0 {
            k
        } else {
            (nt + 1) + (((j - 1) * ntheta + (i % ntheta)) * (nt + 1)) + k
        }
    };

    let n_vertices = (nt + 1) + nl * ntheta * (nt + 1);
    let mut vertices = vec![Vector3::zeros(); n_vertices];
    for k in 0..=nt {
        let t = k as f64 / nt as f64;
        let ax = spec.axes_at(t);
        let phi_base = (spec.truncation_height / ax[2]).acos();
        for j in 0..=nl {
            let u = j as f64 / nl as f64;
            let phi = std::f64::consts::PI - u * (std::f64::consts::PI - phi_base);
            for i in 0..ntheta {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / ntheta as f64;
                let x = Vector3::new(
                    ax[0] * phi.sin() * theta.cos(),
                    ax[1] * phi.sin() * theta.sin(),
                    ax[2] * phi.cos(),
                );
                vertices[vid(i, j, k)] = x;
                if j == 0 {
                    break; // single apex vertex per layer
                }
            }
        }
    }

    let mut cells = Vec::with_capacity(ntheta * nl * nt);
    for j in 0..nl {
        for i in 0..ntheta {
            for k in 0..nt {
                // local axes: xi = circumferential, eta = longitudinal, zeta = transmural
                cells.push([
                    vid(i, j, k),
                    vid(i + 1, j, k),
                    vid(i + 1, j + 1, k),
                    vid(i, j + 1, k),
                    vid(i, j, k + 1),
                    vid(i + 1, j, k + 1),
                    vid(i + 1, j + 1, k + 1),
                    vid(i, j + 1, k + 1),
                ]);
            }
        }
    }

    let mut mesh = HexMesh {
        spec: *spec,
        vertices,
        cells,
        boundary_facets: Vec::new(),
        characteristic_h: 0.0,
    };

    // boundary facets by surface of origin
    let mut facets = Vec::new();
    let cell_id = |j: usize, i: usize, k: usize| (j * ntheta + i) * nt + k;
    for j in 0..nl {
        for i in 0..ntheta {
            facets.push(make_facet(&mesh, cell_id(j, i, 0), 2, -1, BoundaryTag::Endo));
            facets.push(make_facet(&mesh, cell_id(j, i, nt - 1), 2, 1, BoundaryTag::Epi));
        }
    }
    for i in 0..ntheta {
        for k in 0..nt {
            facets.push(make_facet(&mesh, cell_id(nl - 1, i, k), 1, 1, BoundaryTag::Base));
        }
    }
    mesh.boundary_facets = facets;

    // characteristic size: mean main diagonal
    let mut h = 0.0;
    for c in &mesh.cells {
        h += (mesh.vertices[c[6]] - mesh.vertices[c[0]]).norm();
    }
    mesh.characteristic_h = h / mesh.n_cells() as f64;

    // enforce the Jacobian-positivity invariant at construction
    let qp = hex_gauss_points();
    for cell in 0..mesh.n_cells() {
        for q in 0..NQ_HEX {
            let det = mesh.cell_jacobian(cell, qp[q]).determinant();
            if det <= 0.0 {
                return Err(Error::invalid(format!(
                    "cell {cell} has non-positive Jacobian {det:.3e} at quadrature point {q}"
                )));
            }
        }
    }
    Ok(mesh)
}

fn make_facet(mesh: &HexMesh, cell: usize, axis: usize, side: i8, tag: BoundaryTag) -> Facet {
    let local = face_local_nodes(axis, side);
    let c = mesh.cells[cell];
    Facet {
        cell,
        axis,
        side,
        vertices: [c[local[0]], c[local[1]], c[local[2]], c[local[3]]],
        tag,
    }
}

/// Orthonormal material frame at a point: fiber, sheet, sheet-normal.
#[derive(Debug, Clone, Copy)]
pub struct Triad {
    pub f: Vector3<f64>,
    pub s: Vector3<f64>,
    pub n: Vector3<f64>,
}

/// Per-quadrature-point fiber frames, cell-major (NQ_HEX per cell).
#[derive(Debug, Clone)]
pub struct FiberField {
    pub triads: Vec<Triad>,
    pub alpha_endo_deg: f64,
    pub alpha_epi_deg: f64,
}

impl FiberField {
    #[inline]
    pub fn at(&self, cell: usize, q: usize) -> &Triad {
        &self.triads[cell * NQ_HEX + q]
    }
}

/// Normalized transmural coordinate from the two analytic level sets:
/// 0 on the inner ellipsoid, 1 on the outer one.
pub fn transmural_coordinate(spec: &MeshSpec, x: &Vector3<f64>) -> f64 {
    let level = |ax: [f64; 3]| -> f64 {
        (x[0] / ax[0]).powi(2) + (x[1] / ax[1]).powi(2) + (x[2] / ax[2]).powi(2) - 1.0
    };
    let li = level(spec.inner_semi_axes);
    let lo = level(spec.outer_semi_axes);
    if (li - lo).abs() < 1e-300 {
        return 0.5;
    }
    (li / (li - lo)).clamp(0.0, 1.0)
}

/// Rule-based fiber construction: the helix angle interpolates linearly
/// with the transmural coordinate from `alpha_endo` at the endocardium to
/// `alpha_epi` at the epicardium; the fiber lies in the local
/// circumferential-longitudinal tangent plane.
pub fn assign_fibers(mesh: &HexMesh, alpha_endo_deg: f64, alpha_epi_deg: f64) -> Result<FiberField> {
    if !alpha_endo_deg.is_finite() || !alpha_epi_deg.is_finite() {
        return Err(Error::invalid("fiber angles must be finite"));
    }
    let spec = &mesh.spec;
    let pts = mesh.quadrature_points();
    let mut triads = Vec::with_capacity(pts.len());
    let mut last_good: Option<Triad> = None;
    let mut fallbacks = 0usize;
    for x in &pts {
        let t = transmural_coordinate(spec, x);
        let alpha = (alpha_endo_deg + t * (alpha_epi_deg - alpha_endo_deg)).to_radians();
        let ax = spec.axes_at(t);
        // outward surface normal of the interpolated ellipsoid
        let grad = Vector3::new(
            2.0 * x[0] / (ax[0] * ax[0]),
            2.0 * x[1] / (ax[1] * ax[1]),
            2.0 * x[2] / (ax[2] * ax[2]),
        );
        let rxy = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if rxy < 1e-9 * ax[0] || grad.norm() < 1e-14 {
            // apex axis: tangent plane azimuthally undefined
            fallbacks += 1;
            let triad = last_good.unwrap_or(Triad {
                f: Vector3::x(),
                s: -Vector3::z(),
                n: -Vector3::y(),
            });
            triads.push(triad);
            continue;
        }
        let n_hat = grad.normalize();
        let c_hat = Vector3::new(-x[1], x[0], 0.0) / rxy; // circumferential
        let l_hat = n_hat.cross(&c_hat); // longitudinal tangent, base-ward
        let f = (alpha.cos() * c_hat + alpha.sin() * l_hat).normalize();
        let s = n_hat;
        let n = f.cross(&s);
        let triad = Triad { f, s, n };
        last_good = Some(triad);
        triads.push(triad);
    }
    if fallbacks > 0 {
        log::debug!("fiber assignment used nearest-triad fallback at {fallbacks} apex points");
    }
    Ok(FiberField { triads, alpha_endo_deg, alpha_epi_deg })
}

/// Ischemic ball mask over quadrature points.
#[derive(Debug, Clone)]
pub struct IschemicMask {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub affected: Vec<bool>,
}

impl IschemicMask {
    #[inline]
    pub fn at(&self, cell: usize, q: usize) -> bool {
        self.affected[cell * NQ_HEX + q]
    }

    pub fn none(mesh: &HexMesh) -> Self {
        IschemicMask {
            center: Vector3::zeros(),
            radius: 0.0,
            affected: vec![false; mesh.n_cells() * NQ_HEX],
        }
    }
}

pub fn mark_ischemic(mesh: &HexMesh, center: Vector3<f64>, radius: f64) -> Result<IschemicMask> {
    if radius < 0.0 || !radius.is_finite() || !center.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid("ischemic region needs finite center and radius >= 0"));
    }
    let affected = mesh
        .quadrature_points()
        .iter()
        .map(|x| (x - center).norm() < radius)
        .collect();
    Ok(IschemicMask { center, radius, affected })
}
