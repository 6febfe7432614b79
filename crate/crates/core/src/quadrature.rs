//! Gauss quadrature and trilinear (Q1) shape functions on the reference
//! cube [-1,1]^3 with vertices at (+-1,+-1,+-1).
//!
//! Local node ordering follows the usual hexahedron convention:
//!
//! ```text
//! node 0: (-1,-1,-1)   node 4: (-1,-1,+1)
//! node 1: (+1,-1,-1)   node 5: (+1,-1,+1)
//! node 2: (+1,+1,-1)   node 6: (+1,+1,+1)
//! node 3: (-1,+1,-1)   node 7: (-1,+1,+1)
//! ```

/// Reference coordinates of the 8 hex nodes.
pub const HEX_NODES: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

const G1: f64 = 0.577_350_269_189_625_76; // 1/sqrt(3)

/// 2x2x2 Gauss rule (weights are all 1).
pub const NQ_HEX: usize = 8;

pub fn hex_gauss_points() -> [[f64; 3]; NQ_HEX] {
    let mut pts = [[0.0; 3]; NQ_HEX];
    let mut q = 0;
    for &z in &[-G1, G1] {
        for &y in &[-G1, G1] {
            for &x in &[-G1, G1] {
                pts[q] = [x, y, z];
                q += 1;
            }
        }
    }
    pts
}

/// 3x3x3 Gauss rule, used only for quadrature-refinement sanity checks.
pub fn hex_gauss_points_3() -> (Vec<[f64; 3]>, Vec<f64>) {
    let g = (3.0f64 / 5.0).sqrt();
    let pts1 = [-g, 0.0, g];
    let w1 = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut pts = Vec::with_capacity(27);
    let mut w = Vec::with_capacity(27);
    for k in 0..3 {
        for j in 0..3 {
            for i in 0..3 {
                pts.push([pts1[i], pts1[j], pts1[k]]);
                w.push(w1[i] * w1[j] * w1[k]);
            }
        }
    }
    (pts, w)
}

/// Trilinear shape function values at a reference point.
pub fn shape_values(xi: [f64; 3]) -> [f64; 8] {
    let mut n = [0.0; 8];
    for a in 0..8 {
        let s = HEX_NODES[a];
        n[a] = 0.125 * (1.0 + s[0] * xi[0]) * (1.0 + s[1] * xi[1]) * (1.0 + s[2] * xi[2]);
    }
    n
}

/// Gradients of the trilinear shape functions with respect to the
/// reference coordinates, row a = grad N_a.
pub fn shape_gradients(xi: [f64; 3]) -> [[f64; 3]; 8] {
    let mut g = [[0.0; 3]; 8];
    for a in 0..8 {
        let s = HEX_NODES[a];
        g[a][0] = 0.125 * s[0] * (1.0 + s[1] * xi[1]) * (1.0 + s[2] * xi[2]);
        g[a][1] = 0.125 * (1.0 + s[0] * xi[0]) * s[1] * (1.0 + s[2] * xi[2]);
        g[a][2] = 0.125 * (1.0 + s[0] * xi[0]) * (1.0 + s[1] * xi[1]) * s[2];
    }
    g
}

/// 2x2 Gauss rule on a reference face [-1,1]^2 (weights all 1).
pub const NQ_FACE: usize = 4;

pub fn face_gauss_points() -> [[f64; 2]; NQ_FACE] {
    [[-G1, -G1], [G1, -G1], [-G1, G1], [G1, G1]]
}

/// Hex faces indexed by (axis, side). For a face on `axis` at side `s`,
/// the outward reference normal is `s * e_axis`, and the in-face
/// coordinates run along the two cyclic successor axes (b, c) of `axis`,
/// so that `e_b x e_c = e_axis`.
pub fn face_reference_point(axis: usize, side: i8, fc: [f64; 2]) -> [f64; 3] {
    let b = (axis + 1) % 3;
    let c = (axis + 2) % 3;
    let mut xi = [0.0; 3];
    xi[axis] = side as f64;
    xi[b] = fc[0];
    xi[c] = fc[1];
    xi
}

/// Local node ids of the face on (axis, side), in the (b, c) corner order
/// (-,-), (+,-), (+,+), (-,+).
pub fn face_local_nodes(axis: usize, side: i8) -> [usize; 4] {
    let b = (axis + 1) % 3;
    let c = (axis + 2) % 3;
    let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let mut out = [0usize; 4];
    for (i, corner) in corners.iter().enumerate() {
        let mut xi = [0.0; 3];
        xi[axis] = side as f64;
        xi[b] = corner[0];
        xi[c] = corner[1];
        out[i] = HEX_NODES
            .iter()
            .position(|n| n == &xi)
            .expect("face corner is a hex node");
    }
    out
}
