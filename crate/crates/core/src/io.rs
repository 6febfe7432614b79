//! File formats: binary mesh ("HYRMESH1"), binary matrices ("HYRMAT01"),
//! network weights ("HYRNET01"), plain-text key=value sidecars, ASCII
//! legacy unstructured-grid export, and the pressure-volume CSV trace.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::circulation::Phase;
use crate::dnn::{Layer, MinMaxScaler, Net, OperatorMapNet, Param};
use crate::fom::CycleTrace;
use crate::geometry::{BoundaryTag, Facet, HexMesh, MeshSpec};
use crate::{Error, Result, MMHG, ML};

const MESH_MAGIC: &[u8; 8] = b"HYRMESH1";
const MAT_MAGIC: &[u8; 8] = b"HYRMAT01";
const NET_MAGIC: &[u8; 8] = b"HYRNET01";

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn check_magic(r: &mut impl Read, expect: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != expect {
        return Err(Error::Format(format!("{what}: bad magic bytes")));
    }
    Ok(())
}

fn tag_code(tag: BoundaryTag) -> u8 {
    match tag {
        BoundaryTag::Endo => 0,
        BoundaryTag::Epi => 1,
        BoundaryTag::Base => 2,
    }
}

fn tag_from(code: u8) -> Result<BoundaryTag> {
    match code {
        0 => Ok(BoundaryTag::Endo),
        1 => Ok(BoundaryTag::Epi),
        2 => Ok(BoundaryTag::Base),
        c => Err(Error::Format(format!("unknown boundary tag {c}"))),
    }
}

/// Binary mesh: magic, generating spec, counts, float64 coordinates,
/// uint32 connectivity, facet table with uint8 tags.
pub fn save_mesh(path: &Path, mesh: &HexMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MESH_MAGIC)?;
    for v in mesh
        .spec
        .inner_semi_axes
        .iter()
        .chain(&mesh.spec.outer_semi_axes)
    {
        w_f64(&mut w, *v)?;
    }
    w_f64(&mut w, mesh.spec.truncation_height)?;
    w_u64(&mut w, mesh.spec.resolution.0 as u64)?;
    w_u64(&mut w, mesh.spec.resolution.1 as u64)?;
    w_u64(&mut w, mesh.spec.resolution.2 as u64)?;
    w_f64(&mut w, mesh.characteristic_h)?;
    w_u64(&mut w, mesh.n_vertices() as u64)?;
    w_u64(&mut w, mesh.n_cells() as u64)?;
    w_u64(&mut w, mesh.boundary_facets.len() as u64)?;
    for v in &mesh.vertices {
        for c in 0..3 {
            w_f64(&mut w, v[c])?;
        }
    }
    for cell in &mesh.cells {
        for &v in cell {
            w_u32(&mut w, v as u32)?;
        }
    }
    for f in &mesh.boundary_facets {
        w_u32(&mut w, f.cell as u32)?;
        w.write_all(&[f.axis as u8, f.side as u8, tag_code(f.tag)])?;
        for &v in &f.vertices {
            w_u32(&mut w, v as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<HexMesh> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MESH_MAGIC, "mesh file")?;
    let mut inner = [0.0; 3];
    let mut outer = [0.0; 3];
    for v in &mut inner {
        *v = r_f64(&mut r)?;
    }
    for v in &mut outer {
        *v = r_f64(&mut r)?;
    }
    let truncation_height = r_f64(&mut r)?;
    let resolution = (
        r_u64(&mut r)? as usize,
        r_u64(&mut r)? as usize,
        r_u64(&mut r)? as usize,
    );
    let characteristic_h = r_f64(&mut r)?;
    let nv = r_u64(&mut r)? as usize;
    let nc = r_u64(&mut r)? as usize;
    let nf = r_u64(&mut r)? as usize;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = r_f64(&mut r)?;
        let y = r_f64(&mut r)?;
        let z = r_f64(&mut r)?;
        vertices.push(Vector3::new(x, y, z));
    }
    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let mut c = [0usize; 8];
        for v in &mut c {
            *v = r_u32(&mut r)? as usize;
        }
        cells.push(c);
    }
    let mut boundary_facets = Vec::with_capacity(nf);
    for _ in 0..nf {
        let cell = r_u32(&mut r)? as usize;
        let axis = r_u8(&mut r)? as usize;
        let side = r_u8(&mut r)? as i8;
        let tag = tag_from(r_u8(&mut r)?)?;
        let mut verts = [0usize; 4];
        for v in &mut verts {
            *v = r_u32(&mut r)? as usize;
        }
        boundary_facets.push(Facet { cell, axis, side, vertices: verts, tag });
    }
    Ok(HexMesh {
        spec: MeshSpec {
            inner_semi_axes: inner,
            outer_semi_axes: outer,
            truncation_height,
            resolution,
        },
        vertices,
        cells,
        boundary_facets,
        characteristic_h,
    })
}

/// Binary matrix: magic, little-endian uint64 rows and cols, column-major
/// float64 payload.
pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAT_MAGIC)?;
    w_u64(&mut w, m.nrows() as u64)?;
    w_u64(&mut w, m.ncols() as u64)?;
    for v in m.as_slice() {
        w_f64(&mut w, *v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAT_MAGIC, "matrix file")?;
    let rows = r_u64(&mut r)? as usize;
    let cols = r_u64(&mut r)? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        *v = r_f64(&mut r)?;
    }
    Ok(DMatrix::from_column_slice(rows, cols, &data))
}

pub fn save_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    save_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn load_vector(path: &Path) -> Result<DVector<f64>> {
    let m = load_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Format("expected a single-column matrix".into()));
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Plain-text key=value sidecar; floats use the shortest round-trip
/// decimal form, lists are comma separated.
pub fn save_sidecar(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in pairs {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<Vec<(String, String)>> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("sidecar line {}: missing '='", ln + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn sidecar_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("sidecar key '{key}' missing")))
}

pub fn floats_to_field(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn field_to_floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad float '{t}'")))
        })
        .collect()
}

fn write_param(w: &mut impl Write, p: &Param) -> Result<()> {
    w_u64(w, p.w.len() as u64)?;
    for v in &p.w {
        w_f64(w, *v)?;
    }
    Ok(())
}

fn read_param(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = r_u64(r)? as usize;
    let mut w = vec![0.0; n];
    for v in &mut w {
        *v = r_f64(r)?;
    }
    Ok(w)
}

fn write_net(w: &mut impl Write, net: &Net) -> Result<()> {
    w_u64(w, net.layers.len() as u64)?;
    for l in &net.layers {
        match l {
            Layer::Dense { n_in, n_out, w: pw, b } => {
                w.write_all(&[0])?;
                w_u64(w, *n_in as u64)?;
                w_u64(w, *n_out as u64)?;
                write_param(w, pw)?;
                write_param(w, b)?;
            }
            Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w: pw, b } => {
                w.write_all(&[1])?;
                for v in [*in_ch, *out_ch, *kernel, *stride, *pad] {
                    w_u64(w, v as u64)?;
                }
                write_param(w, pw)?;
                write_param(w, b)?;
            }
            Layer::Elu => w.write_all(&[2])?,
            Layer::Upsample2 => w.write_all(&[3])?,
            Layer::Flatten => w.write_all(&[4])?,
            Layer::Reshape { shape } => {
                w.write_all(&[5])?;
                w_u64(w, shape.len() as u64)?;
                for d in shape {
                    w_u64(w, *d as u64)?;
                }
            }
            Layer::Crop { h, w: cw } => {
                w.write_all(&[6])?;
                w_u64(w, *h as u64)?;
                w_u64(w, *cw as u64)?;
            }
        }
    }
    Ok(())
}

fn fresh_param(w: Vec<f64>) -> Param {
    let n = w.len();
    Param { w, g: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
}

fn read_net(r: &mut impl Read) -> Result<Net> {
    let n_layers = r_u64(r)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let code = r_u8(r)?;
        layers.push(match code {
            0 => {
                let n_in = r_u64(r)? as usize;
                let n_out = r_u64(r)? as usize;
                let w = fresh_param(read_param(r)?);
                let b = fresh_param(read_param(r)?);
                if w.w.len() != n_in * n_out || b.w.len() != n_out {
                    return Err(Error::Format("dense layer payload mismatch".into()));
                }
                Layer::Dense { n_in, n_out, w, b }
            }
            1 => {
                let in_ch = r_u64(r)? as usize;
                let out_ch = r_u64(r)? as usize;
                let kernel = r_u64(r)? as usize;
                let stride = r_u64(r)? as usize;
                let pad = r_u64(r)? as usize;
                let w = fresh_param(read_param(r)?);
                let b = fresh_param(read_param(r)?);
                if w.w.len() != out_ch * in_ch * kernel * kernel || b.w.len() != out_ch {
                    return Err(Error::Format("conv layer payload mismatch".into()));
                }
                Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, b }
            }
            2 => Layer::Elu,
            3 => Layer::Upsample2,
            4 => Layer::Flatten,
            5 => {
                let nd = r_u64(r)? as usize;
                let mut shape = Vec::with_capacity(nd);
                for _ in 0..nd {
                    shape.push(r_u64(r)? as usize);
                }
                Layer::Reshape { shape }
            }
            6 => Layer::Crop { h: r_u64(r)? as usize, w: r_u64(r)? as usize },
            c => return Err(Error::Format(format!("unknown layer code {c}"))),
        });
    }
    Ok(Net { layers })
}

/// Weights of one operator map: magic, then the encoder, feedforward and
/// decoder nets. The output scaler goes into a key=value sidecar at the
/// same path with extension `.meta`.
pub fn save_map_net(path: &Path, map: &OperatorMapNet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(NET_MAGIC)?;
    w_u64(&mut w, map.m_out as u64)?;
    w_u64(&mut w, map.s as u64)?;
    write_net(&mut w, &map.encoder)?;
    write_net(&mut w, &map.dfnn)?;
    write_net(&mut w, &map.decoder)?;
    w.flush()?;
    save_sidecar(
        &path.with_extension("meta"),
        &[
            ("m_out".into(), map.m_out.to_string()),
            ("s".into(), map.s.to_string()),
            ("scaler_mins".into(), floats_to_field(map.scaler.mins.as_slice())),
            ("scaler_ranges".into(), floats_to_field(map.scaler.ranges.as_slice())),
        ],
    )
}

pub fn load_map_net(path: &Path) -> Result<OperatorMapNet> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, NET_MAGIC, "network file")?;
    let m_out = r_u64(&mut r)? as usize;
    let s = r_u64(&mut r)? as usize;
    let encoder = read_net(&mut r)?;
    let dfnn = read_net(&mut r)?;
    let decoder = read_net(&mut r)?;
    let meta = load_sidecar(&path.with_extension("meta"))?;
    let mins = field_to_floats(sidecar_get(&meta, "scaler_mins")?)?;
    let ranges = field_to_floats(sidecar_get(&meta, "scaler_ranges")?)?;
    if mins.len() != m_out || ranges.len() != m_out {
        return Err(Error::Format("scaler length disagrees with the output size".into()));
    }
    Ok(OperatorMapNet {
        encoder,
        dfnn,
        decoder,
        m_out,
        s,
        scaler: MinMaxScaler {
            mins: DVector::from_vec(mins),
            ranges: DVector::from_vec(ranges),
        },
    })
}

/// ASCII legacy unstructured-grid export of the mesh, optionally with a
/// point vector field (three dofs per vertex).
pub fn export_vtk(path: &Path, mesh: &HexMesh, field: Option<(&str, &DVector<f64>)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "hexahedral mesh")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.n_vertices())?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
    }
    writeln!(w, "CELLS {} {}", mesh.n_cells(), 9 * mesh.n_cells())?;
    for c in &mesh.cells {
        writeln!(
            w,
            "8 {} {} {} {} {} {} {} {}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]
        )?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.n_cells())?;
    for _ in 0..mesh.n_cells() {
        writeln!(w, "12")?;
    }
    if let Some((name, u)) = field {
        if u.len() != 3 * mesh.n_vertices() {
            return Err(Error::invalid("point field must hold three dofs per vertex"));
        }
        writeln!(w, "POINT_DATA {}", mesh.n_vertices())?;
        writeln!(w, "VECTORS {name} double")?;
        for v in 0..mesh.n_vertices() {
            writeln!(w, "{} {} {}", u[3 * v], u[3 * v + 1], u[3 * v + 2])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::IsoContraction => "iso_contraction",
        Phase::Ejection => "ejection",
        Phase::IsoRelaxation => "iso_relaxation",
        Phase::Filling => "filling",
    }
}

/// Pressure-volume trace in clinical units.
pub fn write_pv_csv(path: &Path, trace: &CycleTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,p_mmHg,V_ml,phase,newton_iters")?;
    for i in 0..trace.times.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            trace.times[i],
            trace.pressures[i] / MMHG,
            trace.volumes[i] / ML,
            phase_name(trace.phases[i]),
            trace.newton_iters[i]
        )?;
    }
    w.flush()?;
    Ok(())
}
