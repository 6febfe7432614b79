//! Global finite element assembly for the mechanics problem: inertia,
//! passive and active stress, epicardial Robin support, endocardial
//! follower pressure, and the energy-consistent base traction.
//!
//! The base traction couples every base dof to every endocardial dof
//! through a single direction vector; its linearization is kept as three
//! rank-1 corrections next to the sparse matrix so factorizations stay
//! sparse.

use std::sync::Arc;

use nalgebra::{DVector, Matrix3, Vector3};

use crate::constitutive::{
    self, kinematics, Kinematics, MaterialParams,
};
use crate::geometry::{BoundaryTag, FiberField, HexMesh, IschemicMask};
use crate::linalg::{CsrMatrix, LowRankUpdate, SparsityPattern, SystemMatrix};
use crate::quadrature::{
    face_gauss_points, face_reference_point, hex_gauss_points, shape_values, NQ_FACE, NQ_HEX,
};
use crate::{Error, Result};

/// Vertex-component to global dof numbering (interleaved xyz).
#[derive(Debug, Clone, Copy)]
pub struct DofMap {
    pub n_vertices: usize,
}

impl DofMap {
    #[inline]
    pub fn dof(&self, vertex: usize, comp: usize) -> usize {
        3 * vertex + comp
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_vertices
    }
}

/// Epicardial Robin (generalized spring-dashpot) coefficients, split into
/// components normal and tangential to the reference surface.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryParams {
    /// Normal stiffness, Pa/m.
    pub k_perp: f64,
    /// Tangential stiffness, Pa/m.
    pub k_par: f64,
    /// Normal viscosity, Pa s/m.
    pub c_perp: f64,
    /// Tangential viscosity, Pa s/m.
    pub c_par: f64,
}

impl BoundaryParams {
    pub fn baseline() -> Self {
        BoundaryParams {
            k_perp: 2.0e5,
            k_par: 2.0e4,
            c_perp: 2.0e4,
            c_par: 2.0e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_perp", self.k_perp),
            ("k_par", self.k_par),
            ("c_perp", self.c_perp),
            ("c_par", self.c_par),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("Robin coefficient {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Which residual terms to assemble; used to isolate terms in tests and
/// to drop inertia for quasi-static continuation.
#[derive(Debug, Clone, Copy)]
pub struct TermFlags {
    pub inertia: bool,
    pub internal: bool,
    pub robin: bool,
    pub base: bool,
    pub endo_pressure: bool,
}

impl TermFlags {
    pub fn all() -> Self {
        TermFlags {
            inertia: true,
            internal: true,
            robin: true,
            base: true,
            endo_pressure: true,
        }
    }

    pub fn quasi_static() -> Self {
        TermFlags { inertia: false, ..Self::all() }
    }

    pub fn only_internal() -> Self {
        TermFlags {
            inertia: false,
            internal: true,
            robin: false,
            base: false,
            endo_pressure: false,
        }
    }
}

/// Inputs of one assembly: current iterate, two history states for the
/// BDF2-style inertia and the backward-difference Robin velocity, time
/// step, cavity pressure, and active tension.
#[derive(Debug, Clone, Copy)]
pub struct FemState<'a> {
    pub u: &'a DVector<f64>,
    pub u_prev: &'a DVector<f64>,
    pub u_prev2: &'a DVector<f64>,
    pub dt: f64,
    pub p: f64,
    pub ta: f64,
}

/// Volume quadrature data of one cell: physical shape gradients and the
/// geometric Jacobian determinant per point, plus the consistent mass.
struct CellPre {
    grads: [[[f64; 3]; 8]; NQ_HEX],
    detj: [f64; NQ_HEX],
    mass: [[f64; 8]; 8],
}

/// Face quadrature data: shape values, physical volume-shape gradients,
/// area-weighted outward reference normal, reference position.
#[derive(Clone, Copy)]
struct FaceQp {
    phi: [f64; 8],
    grad: [[f64; 3]; 8],
    nvec: Vector3<f64>,
    x: Vector3<f64>,
}

struct FacetPre {
    cell: usize,
    qps: [FaceQp; NQ_FACE],
}

pub struct FemModel {
    pub mesh: HexMesh,
    pub fibers: FiberField,
    pub material: MaterialParams,
    pub boundary: BoundaryParams,
    pub mask: IschemicMask,
    pub dofs: DofMap,
    cells: Vec<CellPre>,
    endo: Vec<FacetPre>,
    epi: Vec<FacetPre>,
    base: Vec<FacetPre>,
    base_vertices: Vec<usize>,
    pattern: Arc<SparsityPattern>,
}

impl FemModel {
    pub fn new(
        mesh: HexMesh,
        fibers: FiberField,
        material: MaterialParams,
        boundary: BoundaryParams,
        mask: IschemicMask,
    ) -> Result<Self> {
        material.validate()?;
        boundary.validate()?;
        if fibers.triads.len() != mesh.n_cells() * NQ_HEX {
            return Err(Error::invalid("fiber field does not match the mesh"));
        }
        if mask.affected.len() != mesh.n_cells() * NQ_HEX {
            return Err(Error::invalid("ischemic mask does not match the mesh"));
        }

        let qp = hex_gauss_points();
        let mut cells = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let mut grads = [[[0.0; 3]; 8]; NQ_HEX];
            let mut detj = [0.0; NQ_HEX];
            let mut mass = [[0.0; 8]; 8];
            for q in 0..NQ_HEX {
                let jac = mesh.cell_jacobian(c, qp[q]);
                let det = jac.determinant();
                let inv = jac.try_inverse().ok_or_else(|| {
                    Error::invalid(format!("singular geometric Jacobian in cell {c}"))
                })?;
                let gref = crate::quadrature::shape_gradients(qp[q]);
                for a in 0..8 {
                    let gr = Vector3::new(gref[a][0], gref[a][1], gref[a][2]);
                    let gp = inv.transpose() * gr;
                    grads[q][a] = [gp[0], gp[1], gp[2]];
                }
                detj[q] = det;
                let phi = shape_values(qp[q]);
                for a in 0..8 {
                    for b in 0..8 {
                        mass[a][b] += material.density * phi[a] * phi[b] * det;
                    }
                }
            }
            cells.push(CellPre { grads, detj, mass });
        }

        let face_pre = |tag: BoundaryTag| -> Result<Vec<FacetPre>> {
            let mut out = Vec::new();
            for f in mesh.facets_tagged(tag) {
                let mut qps = [FaceQp {
                    phi: [0.0; 8],
                    grad: [[0.0; 3]; 8],
                    nvec: Vector3::zeros(),
                    x: Vector3::zeros(),
                }; NQ_FACE];
                for (iq, fc) in face_gauss_points().iter().enumerate() {
                    let xi = face_reference_point(f.axis, f.side, *fc);
                    let jac = mesh.cell_jacobian(f.cell, xi);
                    let inv = jac.try_inverse().ok_or_else(|| {
                        Error::invalid(format!("singular face Jacobian in cell {}", f.cell))
                    })?;
                    let b = (f.axis + 1) % 3;
                    let c = (f.axis + 2) % 3;
                    let t1 = Vector3::new(jac[(0, b)], jac[(1, b)], jac[(2, b)]);
                    let t2 = Vector3::new(jac[(0, c)], jac[(1, c)], jac[(2, c)]);
                    let nvec = f.side as f64 * t1.cross(&t2);
                    let gref = crate::quadrature::shape_gradients(xi);
                    let mut grad = [[0.0; 3]; 8];
                    for a in 0..8 {
                        let gr = Vector3::new(gref[a][0], gref[a][1], gref[a][2]);
                        let gp = inv.transpose() * gr;
                        grad[a] = [gp[0], gp[1], gp[2]];
                    }
                    qps[iq] = FaceQp {
                        phi: shape_values(xi),
                        grad,
                        nvec,
                        x: mesh.cell_point(f.cell, xi),
                    };
                }
                out.push(FacetPre { cell: f.cell, qps });
            }
            Ok(out)
        };
        let endo = face_pre(BoundaryTag::Endo)?;
        let epi = face_pre(BoundaryTag::Epi)?;
        let base = face_pre(BoundaryTag::Base)?;

        let mut base_vertices: Vec<usize> = mesh
            .facets_tagged(BoundaryTag::Base)
            .flat_map(|f| f.vertices)
            .collect();
        base_vertices.sort_unstable();
        base_vertices.dedup();

        // dof sparsity from cell adjacency
        let nv = mesh.n_vertices();
        let mut vertex_adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for c in &mesh.cells {
            for &a in c {
                for &b in c {
                    vertex_adj[a].push(b);
                }
            }
        }
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(3 * nv);
        for v in 0..nv {
            vertex_adj[v].sort_unstable();
            vertex_adj[v].dedup();
            for _d in 0..3 {
                let mut cols = Vec::with_capacity(3 * vertex_adj[v].len());
                for &w in &vertex_adj[v] {
                    for e in 0..3 {
                        cols.push(3 * w + e);
                    }
                }
                rows.push(cols);
            }
        }
        let pattern = Arc::new(SparsityPattern::from_rows(3 * nv, rows));

        Ok(FemModel {
            dofs: DofMap { n_vertices: nv },
            mesh,
            fibers,
            material,
            boundary,
            mask,
            cells,
            endo,
            epi,
            base,
            base_vertices,
            pattern,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs()
    }

    pub fn sparsity(&self) -> Arc<SparsityPattern> {
        self.pattern.clone()
    }

    #[inline]
    fn nodal_u(&self, u: &DVector<f64>, cell: usize) -> [Vector3<f64>; 8] {
        let vs = self.mesh.cells[cell];
        std::array::from_fn(|a| {
            let v = vs[a];
            Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2])
        })
    }

    #[inline]
    fn active_at(&self, cell: usize, q: usize, ta: f64) -> f64 {
        if self.mask.at(cell, q) {
            0.0
        } else {
            ta
        }
    }

    /// Kinematics at a face quadrature point of a facet's owning cell.
    fn face_kinematics(&self, fp: &FacetPre, iq: usize, u: &DVector<f64>) -> Result<Kinematics> {
        let ue = self.nodal_u(u, fp.cell);
        let qpd = &fp.qps[iq];
        let mut f = Matrix3::identity();
        for a in 0..8 {
            let g = qpd.grad[a];
            for r in 0..3 {
                for c in 0..3 {
                    f[(r, c)] += ue[a][r] * g[c];
                }
            }
        }
        kinematics(&f)
    }

    /// Endocardial deformed-area resultant: integral of cof(F) N dGamma.
    fn endo_area_vector(&self, u: &DVector<f64>) -> Result<Vector3<f64>> {
        let mut a_endo = Vector3::zeros();
        for fp in &self.endo {
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, u)?;
                a_endo += cof(&kin) * fp.qps[iq].nvec;
            }
        }
        Ok(a_endo)
    }

    /// Deformed base surface measure: integral of |cof(F) N| dGamma.
    fn base_surface_measure(&self, u: &DVector<f64>) -> Result<f64> {
        let mut s = 0.0;
        for fp in &self.base {
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, u)?;
                s += (cof(&kin) * fp.qps[iq].nvec).norm();
            }
        }
        Ok(s)
    }

    /// Global residual R(u) = 0 of the semi-discrete balance.
    pub fn assemble_residual(&self, st: &FemState, flags: TermFlags) -> Result<DVector<f64>> {
        self.assemble_residual_masked(st, flags, None)
    }

    /// Residual restricted to the cells marked in `mask`; rows belonging
    /// to vertices of masked cells are exact because every contribution
    /// to such a row comes from a masked cell or its facets. The global
    /// direction scalars of the base term stay full surface integrals.
    pub fn assemble_residual_masked(
        &self,
        st: &FemState,
        flags: TermFlags,
        mask: Option<&[bool]>,
    ) -> Result<DVector<f64>> {
        let n = self.n_dofs();
        let mut r = DVector::zeros(n);
        let keep = |cell: usize| mask.map_or(true, |m| m[cell]);

        if flags.internal || flags.inertia {
            for cell in 0..self.mesh.n_cells() {
                if !keep(cell) {
                    continue;
                }
                let pre = &self.cells[cell];
                let vs = self.mesh.cells[cell];
                let ue = self.nodal_u(st.u, cell);

                if flags.internal {
                    for q in 0..NQ_HEX {
                        let f = def_grad(&pre.grads[q], &ue);
                        let tr = self.fibers.at(cell, q);
                        let ta = self.active_at(cell, q, st.ta);
                        let p_stress = constitutive::first_piola(&self.material, tr, &f)?
                            + constitutive::active_piola(ta, tr, &f);
                        let w = pre.detj[q];
                        for a in 0..8 {
                            let g = pre.grads[q][a];
                            for d in 0..3 {
                                r[3 * vs[a] + d] +=
                                    w * (p_stress[(d, 0)] * g[0] + p_stress[(d, 1)] * g[1] + p_stress[(d, 2)] * g[2]);
                            }
                        }
                    }
                }

                if flags.inertia {
                    let dt2 = st.dt * st.dt;
                    for a in 0..8 {
                        for b in 0..8 {
                            let vb = vs[b];
                            let m = pre.mass[a][b] / dt2;
                            for d in 0..3 {
                                let acc = st.u[3 * vb + d] - 2.0 * st.u_prev[3 * vb + d]
                                    + st.u_prev2[3 * vb + d];
                                r[3 * vs[a] + d] += m * acc;
                            }
                        }
                    }
                }
            }
        }

        if flags.robin {
            for fp in &self.epi {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let qpd = &fp.qps[iq];
                    let w = qpd.nvec.norm();
                    let nrm = qpd.nvec / w;
                    let mut u_q = Vector3::zeros();
                    let mut v_q = Vector3::zeros();
                    for a in 0..8 {
                        let v = vs[a];
                        let uv = Vector3::new(st.u[3 * v], st.u[3 * v + 1], st.u[3 * v + 2]);
                        let up = Vector3::new(
                            st.u_prev[3 * v],
                            st.u_prev[3 * v + 1],
                            st.u_prev[3 * v + 2],
                        );
                        u_q += qpd.phi[a] * uv;
                        v_q += qpd.phi[a] * (uv - up) / st.dt;
                    }
                    let tvec = robin_traction(&self.boundary, &nrm, &u_q, &v_q);
                    for a in 0..8 {
                        if qpd.phi[a] == 0.0 {
                            continue;
                        }
                        for d in 0..3 {
                            r[3 * vs[a] + d] += w * qpd.phi[a] * tvec[d];
                        }
                    }
                }
            }
        }

        if flags.endo_pressure {
            for fp in &self.endo {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    let s_vec = cof(&kin) * fp.qps[iq].nvec;
                    for a in 0..8 {
                        let phi = fp.qps[iq].phi[a];
                        if phi == 0.0 {
                            continue;
                        }
                        for d in 0..3 {
                            r[3 * vs[a] + d] += st.p * phi * s_vec[d];
                        }
                    }
                }
            }
        }

        if flags.base {
            let a_endo = self.endo_area_vector(st.u)?;
            let s_base = self.base_surface_measure(st.u)?;
            let v_dir = a_endo / s_base;
            for fp in &self.base {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    let wq = (cof(&kin) * fp.qps[iq].nvec).norm();
                    for a in 0..8 {
                        let phi = fp.qps[iq].phi[a];
                        if phi == 0.0 {
                            continue;
                        }
                        for d in 0..3 {
                            r[3 * vs[a] + d] -= st.p * wq * phi * v_dir[d];
                        }
                    }
                }
            }
        }

        Ok(r)
    }

    /// Consistent tangent dR/du as sparse matrix plus rank-3 correction
    /// from the base-direction coupling.
    pub fn assemble_jacobian(&self, st: &FemState, flags: TermFlags) -> Result<SystemMatrix> {
        self.assemble_jacobian_masked(st, flags, None)
    }

    /// Tangent restricted to the cells marked in `mask`, with the same
    /// row-exactness guarantee as `assemble_residual_masked`. The rank-1
    /// rows of the base coupling differentiate global surface integrals
    /// and are always assembled in full.
    pub fn assemble_jacobian_masked(
        &self,
        st: &FemState,
        flags: TermFlags,
        mask: Option<&[bool]>,
    ) -> Result<SystemMatrix> {
        let mut k = CsrMatrix::zeros(self.pattern.clone());
        let n = self.n_dofs();
        let keep = |cell: usize| mask.map_or(true, |m| m[cell]);

        if flags.internal || flags.inertia {
            for cell in 0..self.mesh.n_cells() {
                if !keep(cell) {
                    continue;
                }
                let pre = &self.cells[cell];
                let vs = self.mesh.cells[cell];
                let ue = self.nodal_u(st.u, cell);

                if flags.internal {
                    for q in 0..NQ_HEX {
                        let f = def_grad(&pre.grads[q], &ue);
                        let tr = self.fibers.at(cell, q);
                        let ta = self.active_at(cell, q, st.ta);
                        let w = pre.detj[q];
                        for b in 0..8 {
                            let gb = pre.grads[q][b];
                            for e in 0..3 {
                                let mut df = Matrix3::zeros();
                                df[(e, 0)] = gb[0];
                                df[(e, 1)] = gb[1];
                                df[(e, 2)] = gb[2];
                                let dp = constitutive::piola_tangent(&self.material, tr, ta, &f, &df)?;
                                for a in 0..8 {
                                    let ga = pre.grads[q][a];
                                    for d in 0..3 {
                                        let val = w
                                            * (dp[(d, 0)] * ga[0] + dp[(d, 1)] * ga[1] + dp[(d, 2)] * ga[2]);
                                        k.add_at(3 * vs[a] + d, 3 * vs[b] + e, val);
                                    }
                                }
                            }
                        }
                    }
                }

                if flags.inertia {
                    let dt2 = st.dt * st.dt;
                    for a in 0..8 {
                        for b in 0..8 {
                            let m = pre.mass[a][b] / dt2;
                            for d in 0..3 {
                                k.add_at(3 * vs[a] + d, 3 * vs[b] + d, m);
                            }
                        }
                    }
                }
            }
        }

        if flags.robin {
            let bp = &self.boundary;
            for fp in &self.epi {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let qpd = &fp.qps[iq];
                    let w = qpd.nvec.norm();
                    let nrm = qpd.nvec / w;
                    let kn = bp.k_perp + bp.c_perp / st.dt;
                    let kt = bp.k_par + bp.c_par / st.dt;
                    for a in 0..8 {
                        if qpd.phi[a] == 0.0 {
                            continue;
                        }
                        for b in 0..8 {
                            if qpd.phi[b] == 0.0 {
                                continue;
                            }
                            let s = w * qpd.phi[a] * qpd.phi[b];
                            for d in 0..3 {
                                for e in 0..3 {
                                    let del = if d == e { 1.0 } else { 0.0 };
                                    let val = s * (kt * del + (kn - kt) * nrm[d] * nrm[e]);
                                    k.add_at(3 * vs[a] + d, 3 * vs[b] + e, val);
                                }
                            }
                        }
                    }
                }
            }
        }

        if flags.endo_pressure {
            for fp in &self.endo {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    for b in 0..8 {
                        let gb = fp.qps[iq].grad[b];
                        for e in 0..3 {
                            let mut df = Matrix3::zeros();
                            df[(e, 0)] = gb[0];
                            df[(e, 1)] = gb[1];
                            df[(e, 2)] = gb[2];
                            let ds = dcof(&kin, &df) * fp.qps[iq].nvec;
                            for a in 0..8 {
                                let phi = fp.qps[iq].phi[a];
                                if phi == 0.0 {
                                    continue;
                                }
                                for d in 0..3 {
                                    k.add_at(3 * vs[a] + d, 3 * vs[b] + e, st.p * phi * ds[d]);
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut low_rank = LowRankUpdate::default();
        if flags.base {
            let a_endo = self.endo_area_vector(st.u)?;
            let s_base = self.base_surface_measure(st.u)?;
            let v_dir = a_endo / s_base;

            // local part: variation of the base weights at fixed direction
            for fp in &self.base {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    let s_vec = cof(&kin) * fp.qps[iq].nvec;
                    let s_norm = s_vec.norm();
                    for b in 0..8 {
                        let gb = fp.qps[iq].grad[b];
                        for e in 0..3 {
                            let mut df = Matrix3::zeros();
                            df[(e, 0)] = gb[0];
                            df[(e, 1)] = gb[1];
                            df[(e, 2)] = gb[2];
                            let ds = dcof(&kin, &df) * fp.qps[iq].nvec;
                            let dnorm = s_vec.dot(&ds) / s_norm;
                            for a in 0..8 {
                                let phi = fp.qps[iq].phi[a];
                                if phi == 0.0 {
                                    continue;
                                }
                                for d in 0..3 {
                                    k.add_at(
                                        3 * vs[a] + d,
                                        3 * vs[b] + e,
                                        -st.p * phi * dnorm * v_dir[d],
                                    );
                                }
                            }
                        }
                    }
                }
            }

            // nonlocal part: variation of the direction vector itself,
            // R_base = -p W(u) v(u), dv = (da - v ds) / s
            let mut w_nodal: DVector<f64> = DVector::zeros(self.dofs.n_vertices);
            for fp in &self.base {
                if !keep(fp.cell) {
                    continue;
                }
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    let wq = (cof(&kin) * fp.qps[iq].nvec).norm();
                    for a in 0..8 {
                        w_nodal[vs[a]] += wq * fp.qps[iq].phi[a];
                    }
                }
            }
            // row vectors: da_e/du over endo support, ds/du over base support
            let mut da_rows = [
                DVector::zeros(n),
                DVector::zeros(n),
                DVector::zeros(n),
            ];
            for fp in &self.endo {
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    for b in 0..8 {
                        let gb = fp.qps[iq].grad[b];
                        for e in 0..3 {
                            let mut df = Matrix3::zeros();
                            df[(e, 0)] = gb[0];
                            df[(e, 1)] = gb[1];
                            df[(e, 2)] = gb[2];
                            let ds = dcof(&kin, &df) * fp.qps[iq].nvec;
                            for comp in 0..3 {
                                da_rows[comp][3 * vs[b] + e] += ds[comp];
                            }
                        }
                    }
                }
            }
            let mut ds_row = DVector::zeros(n);
            for fp in &self.base {
                let vs = self.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let kin = self.face_kinematics(fp, iq, st.u)?;
                    let s_vec = cof(&kin) * fp.qps[iq].nvec;
                    let s_norm = s_vec.norm();
                    for b in 0..8 {
                        let gb = fp.qps[iq].grad[b];
                        for e in 0..3 {
                            let mut df = Matrix3::zeros();
                            df[(e, 0)] = gb[0];
                            df[(e, 1)] = gb[1];
                            df[(e, 2)] = gb[2];
                            let ds = dcof(&kin, &df) * fp.qps[iq].nvec;
                            ds_row[3 * vs[b] + e] += s_vec.dot(&ds) / s_norm;
                        }
                    }
                }
            }
            for e in 0..3 {
                let mut col = DVector::zeros(n);
                for v in 0..self.dofs.n_vertices {
                    if w_nodal[v] != 0.0 {
                        col[3 * v + e] = -st.p * w_nodal[v];
                    }
                }
                let row = (&da_rows[e] - v_dir[e] * &ds_row) / s_base;
                low_rank.cols.push(col);
                low_rank.rows.push(row);
            }
        }

        Ok(SystemMatrix { sparse: k, low_rank })
    }

    /// Pressure sensitivity dR/dp; the residual is affine in p.
    pub fn assemble_drdp(&self, st: &FemState) -> Result<DVector<f64>> {
        let n = self.n_dofs();
        let mut r = DVector::zeros(n);
        for fp in &self.endo {
            let vs = self.mesh.cells[fp.cell];
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, st.u)?;
                let s_vec = cof(&kin) * fp.qps[iq].nvec;
                for a in 0..8 {
                    let phi = fp.qps[iq].phi[a];
                    for d in 0..3 {
                        r[3 * vs[a] + d] += phi * s_vec[d];
                    }
                }
            }
        }
        let a_endo = self.endo_area_vector(st.u)?;
        let s_base = self.base_surface_measure(st.u)?;
        let v_dir = a_endo / s_base;
        for fp in &self.base {
            let vs = self.mesh.cells[fp.cell];
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, st.u)?;
                let wq = (cof(&kin) * fp.qps[iq].nvec).norm();
                for a in 0..8 {
                    let phi = fp.qps[iq].phi[a];
                    for d in 0..3 {
                        r[3 * vs[a] + d] -= wq * phi * v_dir[d];
                    }
                }
            }
        }
        Ok(r)
    }

    /// Deformed centroid of the base ring, the cap point closing the
    /// cavity surface.
    fn base_centroid(&self, u: &DVector<f64>) -> Vector3<f64> {
        let mut b = Vector3::zeros();
        for &v in &self.base_vertices {
            b += self.mesh.vertices[v] + Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]);
        }
        b / self.base_vertices.len() as f64
    }

    /// Deformed cavity volume enclosed by the endocardium and the flat
    /// base cap through the deformed base centroid.
    pub fn cavity_volume(&self, u: &DVector<f64>) -> Result<f64> {
        let b = self.base_centroid(u);
        let mut vol = 0.0;
        for fp in &self.endo {
            let vs = self.mesh.cells[fp.cell];
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, u)?;
                let s_vec = cof(&kin) * fp.qps[iq].nvec;
                let mut x = fp.qps[iq].x;
                for a in 0..8 {
                    let v = vs[a];
                    x += fp.qps[iq].phi[a] * Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]);
                }
                vol -= s_vec.dot(&(x - b)) / 3.0;
            }
        }
        Ok(vol)
    }

    /// Sorted dofs read by `cavity_volume`: the vertices of cells owning
    /// endocardial facets plus the base ring.
    pub fn volume_support_dofs(&self) -> Vec<usize> {
        let mut verts: Vec<usize> = self
            .endo
            .iter()
            .flat_map(|fp| self.mesh.cells[fp.cell])
            .chain(self.base_vertices.iter().copied())
            .collect();
        verts.sort_unstable();
        verts.dedup();
        verts
            .iter()
            .flat_map(|&v| (0..3).map(move |e| 3 * v + e))
            .collect()
    }

    /// Gradient dV/du of the cavity volume.
    pub fn volume_constraint_row(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_dofs();
        let b = self.base_centroid(u);
        let mut g = DVector::zeros(n);
        let mut area_sum = Vector3::zeros();
        for fp in &self.endo {
            let vs = self.mesh.cells[fp.cell];
            for iq in 0..NQ_FACE {
                let kin = self.face_kinematics(fp, iq, u)?;
                let s_vec = cof(&kin) * fp.qps[iq].nvec;
                area_sum += s_vec;
                let mut x = fp.qps[iq].x;
                for a in 0..8 {
                    let v = vs[a];
                    x += fp.qps[iq].phi[a] * Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]);
                }
                let xb = x - b;
                for a in 0..8 {
                    let ga = fp.qps[iq].grad[a];
                    let phi = fp.qps[iq].phi[a];
                    for e in 0..3 {
                        let mut df = Matrix3::zeros();
                        df[(e, 0)] = ga[0];
                        df[(e, 1)] = ga[1];
                        df[(e, 2)] = ga[2];
                        let ds = dcof(&kin, &df) * fp.qps[iq].nvec;
                        g[3 * vs[a] + e] -= (ds.dot(&xb) + s_vec[e] * phi) / 3.0;
                    }
                }
            }
        }
        // base centroid moves with the base vertices
        let nb = self.base_vertices.len() as f64;
        for &v in &self.base_vertices {
            for e in 0..3 {
                g[3 * v + e] += area_sum[e] / (3.0 * nb);
            }
        }
        Ok(g)
    }
}

#[inline]
fn def_grad(grads: &[[f64; 3]; 8], ue: &[Vector3<f64>; 8]) -> Matrix3<f64> {
    let mut f = Matrix3::identity();
    for a in 0..8 {
        let g = grads[a];
        for r in 0..3 {
            for c in 0..3 {
                f[(r, c)] += ue[a][r] * g[c];
            }
        }
    }
    f
}

#[inline]
fn cof(kin: &Kinematics) -> Matrix3<f64> {
    kin.j * kin.f_inv_t
}

/// Directional derivative of cof(F) = J F^{-T} along dF.
#[inline]
fn dcof(kin: &Kinematics, df: &Matrix3<f64>) -> Matrix3<f64> {
    let fit = kin.f_inv_t;
    kin.j * (fit.dot(df) * fit - fit * df.transpose() * fit)
}

#[inline]
fn robin_traction(
    bp: &BoundaryParams,
    nrm: &Vector3<f64>,
    u: &Vector3<f64>,
    v: &Vector3<f64>,
) -> Vector3<f64> {
    let un = u.dot(nrm);
    let vn = v.dot(nrm);
    bp.k_perp * un * nrm + bp.k_par * (u - un * nrm) + bp.c_perp * vn * nrm
        + bp.c_par * (v - vn * nrm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assign_fibers, build_ellipsoid_mesh, mark_ischemic, MeshSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> FemModel {
        let spec = MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        };
        let mesh = build_ellipsoid_mesh(&spec).unwrap();
        let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
        let mask = IschemicMask::none(&mesh);
        FemModel::new(
            mesh,
            fibers,
            MaterialParams::baseline(),
            BoundaryParams::baseline(),
            mask,
        )
        .unwrap()
    }

    fn random_state(n: usize, scale: f64, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
    }

    fn total_energy(model: &FemModel, u: &DVector<f64>) -> f64 {
        let mut w = 0.0;
        for cell in 0..model.mesh.n_cells() {
            let pre = &model.cells[cell];
            let ue = model.nodal_u(u, cell);
            for q in 0..NQ_HEX {
                let f = def_grad(&pre.grads[q], &ue);
                let tr = model.fibers.at(cell, q);
                w += pre.detj[q]
                    * crate::constitutive::strain_energy(&model.material, tr, &f).unwrap();
            }
        }
        w
    }

    #[test]
    fn rigid_translation_gives_zero_internal_residual() {
        let model = tiny_model();
        let n = model.n_dofs();
        let mut u = DVector::zeros(n);
        for v in 0..model.dofs.n_vertices {
            u[3 * v] = 1.3e-3;
            u[3 * v + 1] = -0.7e-3;
            u[3 * v + 2] = 0.4e-3;
        }
        let zero = DVector::zeros(n);
        let st = FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt: 1.0, p: 0.0, ta: 0.0 };
        let r = model.assemble_residual(&st, TermFlags::only_internal()).unwrap();
        assert!(r.norm() < 1e-9, "translation must be stress free, |R| = {}", r.norm());
    }

    #[test]
    fn internal_residual_is_energy_gradient() {
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 1e-3, 42);
        let zero = DVector::zeros(n);
        let st = FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt: 1.0, p: 0.0, ta: 0.0 };
        let r = model.assemble_residual(&st, TermFlags::only_internal()).unwrap();
        let h = 1e-7;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let i = rng.gen_range(0..n);
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let fd = (total_energy(&model, &up) - total_energy(&model, &um)) / (2.0 * h);
            let scale = r.norm() / (n as f64).sqrt();
            assert!(
                (r[i] - fd).abs() < 1e-4 * scale.max(1e-6),
                "dof {i}: residual {} vs energy FD {fd}",
                r[i]
            );
        }
    }

    #[test]
    fn consistent_mass_integrates_density() {
        let model = tiny_model();
        let total: f64 = model
            .cells
            .iter()
            .map(|c| c.mass.iter().flatten().sum::<f64>())
            .sum();
        let expect = model.material.density * model.mesh.volume();
        assert!((total - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn inertia_residual_for_uniform_acceleration() {
        let model = tiny_model();
        let n = model.n_dofs();
        let dt = 2.5e-3;
        // u - 2 u_prev + u_prev2 = a dt^2 with constant a
        let acc = Vector3::new(1.0, -2.0, 0.5);
        let mut u = DVector::zeros(n);
        for v in 0..model.dofs.n_vertices {
            for d in 0..3 {
                u[3 * v + d] = acc[d] * dt * dt;
            }
        }
        let zero = DVector::zeros(n);
        let flags = TermFlags {
            inertia: true,
            internal: false,
            robin: false,
            base: false,
            endo_pressure: false,
        };
        let st = FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt, p: 0.0, ta: 0.0 };
        let r = model.assemble_residual(&st, flags).unwrap();
        // total inertial force = rho V a, component-wise
        let m_tot = model.material.density * model.mesh.volume();
        for d in 0..3 {
            let sum: f64 = (0..model.dofs.n_vertices).map(|v| r[3 * v + d]).sum();
            assert!((sum - m_tot * acc[d]).abs() < 1e-9 * m_tot * acc.norm());
        }
    }

    #[test]
    fn robin_residual_matches_surface_energy_gradient() {
        // elastic part only: the Robin term is the gradient of a surface
        // energy 0.5 k_perp (u.N)^2 + 0.5 k_par |u_t|^2
        let mesh = build_ellipsoid_mesh(&MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        })
        .unwrap();
        let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
        let mask = IschemicMask::none(&mesh);
        let boundary = BoundaryParams { c_perp: 0.0, c_par: 0.0, ..BoundaryParams::baseline() };
        let model =
            FemModel::new(mesh, fibers, MaterialParams::baseline(), boundary, mask).unwrap();

        let surface_energy = |u: &DVector<f64>| -> f64 {
            let mut w = 0.0;
            for fp in &model.epi {
                let vs = model.mesh.cells[fp.cell];
                for iq in 0..NQ_FACE {
                    let qpd = &fp.qps[iq];
                    let area = qpd.nvec.norm();
                    let nrm = qpd.nvec / area;
                    let mut u_q = Vector3::zeros();
                    for a in 0..8 {
                        let v = vs[a];
                        u_q += qpd.phi[a]
                            * Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]);
                    }
                    let un = u_q.dot(&nrm);
                    let ut = u_q - un * nrm;
                    w += area
                        * (0.5 * model.boundary.k_perp * un * un
                            + 0.5 * model.boundary.k_par * ut.norm_squared());
                }
            }
            w
        };

        let n = model.n_dofs();
        let u = random_state(n, 1e-3, 5);
        let zero = DVector::zeros(n);
        let flags = TermFlags {
            inertia: false,
            internal: false,
            robin: true,
            base: false,
            endo_pressure: false,
        };
        let st = FemState { u: &u, u_prev: &u, u_prev2: &zero, dt: 1.0, p: 0.0, ta: 0.0 };
        // u_prev = u makes the velocity zero, isolating the elastic part
        let r = model.assemble_residual(&st, flags).unwrap();
        let h = 1e-7;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let i = rng.gen_range(0..n);
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let fd = (surface_energy(&up) - surface_energy(&um)) / (2.0 * h);
            assert!(
                (r[i] - fd).abs() < 1e-6 * r.norm().max(1e-9),
                "dof {i}: {} vs {fd}",
                r[i]
            );
        }
    }

    #[test]
    fn jacobian_matches_residual_finite_differences() {
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 8e-4, 77);
        let u_prev = random_state(n, 4e-4, 78);
        let u_prev2 = random_state(n, 2e-4, 79);
        let st = FemState {
            u: &u,
            u_prev: &u_prev,
            u_prev2: &u_prev2,
            dt: 2.5e-3,
            p: 500.0,
            ta: 1.0e3,
        };
        let flags = TermFlags::all();
        let kmat = model.assemble_jacobian(&st, flags).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..4 {
            let w = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
            let h = 1e-7;
            let up = &u + h * &w;
            let um = &u - h * &w;
            let stp = FemState { u: &up, ..st };
            let stm = FemState { u: &um, ..st };
            let rp = model.assemble_residual(&stp, flags).unwrap();
            let rm = model.assemble_residual(&stm, flags).unwrap();
            let fd = (rp - rm) / (2.0 * h);
            let kw = kmat.matvec(&w);
            let err = (&kw - &fd).norm() / fd.norm();
            assert!(err < 5e-6, "trial {trial}: directional tangent error {err:.3e}");
        }
    }

    #[test]
    fn pressure_derivative_is_affine_and_consistent() {
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 5e-4, 11);
        let zero = DVector::zeros(n);
        let mk = |p: f64| FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt: 2.5e-3, p, ta: 0.0 };
        let flags = TermFlags::all();
        let r0 = model.assemble_residual(&mk(0.0), flags).unwrap();
        let r1 = model.assemble_residual(&mk(1000.0), flags).unwrap();
        let r2 = model.assemble_residual(&mk(2000.0), flags).unwrap();
        // affine: equal increments
        let d1 = &r1 - &r0;
        let d2 = &r2 - &r1;
        assert!((&d1 - &d2).norm() < 1e-9 * d1.norm());
        let drdp = model.assemble_drdp(&mk(1234.0)).unwrap();
        assert!((&d1 / 1000.0 - &drdp).norm() < 1e-9 * drdp.norm());
    }

    #[test]
    fn rest_cavity_volume_matches_truncated_ellipsoid() {
        let mesh = build_ellipsoid_mesh(&MeshSpec::desk_default()).unwrap();
        let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
        let mask = IschemicMask::none(&mesh);
        let model = FemModel::new(
            mesh,
            fibers,
            MaterialParams::baseline(),
            BoundaryParams::baseline(),
            mask,
        )
        .unwrap();
        let u = DVector::zeros(model.n_dofs());
        let v = model.cavity_volume(&u).unwrap();
        // analytic volume of the inner ellipsoid truncated at z = zb:
        // pi a b [z - z^3/(3 c^2)] from -c to zb
        let [a, bb, c] = model.mesh.spec.inner_semi_axes;
        let zb = model.mesh.spec.truncation_height;
        let prim = |z: f64| z - z.powi(3) / (3.0 * c * c);
        let exact = std::f64::consts::PI * a * bb * (prim(zb) - prim(-c));
        let rel = (v - exact).abs() / exact;
        assert!(rel < 0.02, "cavity volume {v:.6e} vs analytic {exact:.6e} ({:.2}%)", rel * 100.0);
    }

    #[test]
    fn uniform_scaling_scales_cavity_volume_cubically() {
        let model = tiny_model();
        let n = model.n_dofs();
        let alpha = 0.05;
        let mut u = DVector::zeros(n);
        for v in 0..model.dofs.n_vertices {
            for d in 0..3 {
                u[3 * v + d] = alpha * model.mesh.vertices[v][d];
            }
        }
        let v0 = model.cavity_volume(&DVector::zeros(n)).unwrap();
        let v1 = model.cavity_volume(&u).unwrap();
        let ratio = v1 / v0;
        let expect = (1.0 + alpha).powi(3);
        assert!((ratio - expect).abs() < 1e-9, "ratio {ratio} vs {expect}");
    }

    #[test]
    fn volume_row_matches_finite_differences() {
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 5e-4, 21);
        let g = model.volume_constraint_row(&u).unwrap();
        let h = 1e-8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let i = rng.gen_range(0..n);
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let fd =
                (model.cavity_volume(&up).unwrap() - model.cavity_volume(&um).unwrap()) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 1e-6 * g.norm().max(1e-12),
                "dof {i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn conservative_tangent_is_symmetric() {
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 5e-4, 31);
        let zero = DVector::zeros(n);
        let st = FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt: 2.5e-3, p: 0.0, ta: 0.0 };
        let k = model
            .assemble_jacobian(&st, TermFlags::only_internal())
            .unwrap();
        assert!(k.sparse.asymmetry() < 1e-9);
        assert_eq!(k.low_rank.rank(), 0);
    }

    #[test]
    fn ischemic_mask_removes_active_stress_locally() {
        let spec = MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        };
        let mesh = build_ellipsoid_mesh(&spec).unwrap();
        let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
        let mask_none = IschemicMask::none(&mesh);
        let mask_all = mark_ischemic(&mesh, Vector3::new(0.0, 0.0, -0.02), 1.0).unwrap();
        let healthy = FemModel::new(
            mesh.clone(),
            fibers.clone(),
            MaterialParams::baseline(),
            BoundaryParams::baseline(),
            mask_none,
        )
        .unwrap();
        let infarcted = FemModel::new(
            mesh,
            fibers,
            MaterialParams::baseline(),
            BoundaryParams::baseline(),
            mask_all,
        )
        .unwrap();
        let n = healthy.n_dofs();
        let zero = DVector::zeros(n);
        let st = FemState { u: &zero, u_prev: &zero, u_prev2: &zero, dt: 1.0, p: 0.0, ta: 5.0e4 };
        let r_h = healthy
            .assemble_residual(&st, TermFlags::only_internal())
            .unwrap();
        let r_i = infarcted
            .assemble_residual(&st, TermFlags::only_internal())
            .unwrap();
        assert!(r_h.norm() > 1.0, "active stress must load the healthy wall");
        assert!(r_i.norm() < 1e-9, "fully ischemic wall generates no active force");
    }

    #[test]
    fn masked_assembly_is_row_exact_for_covered_vertices() {
        // mask = all cells touching one vertex: the residual and tangent
        // rows of that vertex must match the full assembly exactly
        let model = tiny_model();
        let n = model.n_dofs();
        let u = random_state(n, 5e-4, 91);
        let u_prev = random_state(n, 2e-4, 92);
        let zero = DVector::zeros(n);
        let st = FemState { u: &u, u_prev: &u_prev, u_prev2: &zero, dt: 2.5e-3, p: 700.0, ta: 2.0e3 };
        let flags = TermFlags::all();

        let v_pick = model.mesh.cells[0][0];
        let mask: Vec<bool> = (0..model.mesh.n_cells())
            .map(|c| model.mesh.cells[c].contains(&v_pick))
            .collect();
        assert!(mask.iter().filter(|&&m| m).count() < model.mesh.n_cells());

        let r_full = model.assemble_residual(&st, flags).unwrap();
        let r_mask = model.assemble_residual_masked(&st, flags, Some(&mask)).unwrap();
        for d in 0..3 {
            let i = 3 * v_pick + d;
            assert!((r_full[i] - r_mask[i]).abs() < 1e-12 * r_full.norm().max(1.0));
        }

        let k_full = model.assemble_jacobian(&st, flags).unwrap();
        let k_mask = model.assemble_jacobian_masked(&st, flags, Some(&mask)).unwrap();
        let w = random_state(n, 1.0, 93);
        let kw_full = k_full.matvec(&w);
        let kw_mask = k_mask.matvec(&w);
        for d in 0..3 {
            let i = 3 * v_pick + d;
            assert!((kw_full[i] - kw_mask[i]).abs() < 1e-9 * kw_full.norm());
        }
    }

    #[test]
    fn inadmissible_state_propagates() {
        let model = tiny_model();
        let n = model.n_dofs();
        // crush the mesh: displacement that inverts elements
        let mut u = DVector::zeros(n);
        for v in 0..model.dofs.n_vertices {
            for d in 0..3 {
                u[3 * v + d] = -1.5 * model.mesh.vertices[v][d];
            }
        }
        let zero = DVector::zeros(n);
        let st = FemState { u: &u, u_prev: &zero, u_prev2: &zero, dt: 1.0, p: 100.0, ta: 0.0 };
        assert!(matches!(
            model.assemble_residual(&st, TermFlags::all()),
            Err(Error::NonAdmissible)
        ));
    }
}
