use hyrom::circulation::CirculationParams;
use hyrom::constitutive::{ActiveTensionSpec, MaterialParams};
use hyrom::fem::{BoundaryParams, FemModel};
use hyrom::fom::{run_heartbeat, HeartbeatSettings, NewtonSettings};
use hyrom::geometry::{assign_fibers, build_ellipsoid_mesh, IschemicMask, MeshSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nc: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let nl: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let nt: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let peak: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5.0e4);
    let spec = MeshSpec { resolution: (nc, nl, nt), ..MeshSpec::desk_default() };
    let mesh = build_ellipsoid_mesh(&spec).unwrap();
    let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
    let mask = IschemicMask::none(&mesh);
    let model = FemModel::new(mesh, fibers, MaterialParams::baseline(), BoundaryParams::baseline(), mask).unwrap();
    let v_rest = model.cavity_volume(&nalgebra::DVector::zeros(model.n_dofs())).unwrap();
    eprintln!("dofs={} cells={} V_rest={:.4e}", model.n_dofs(), model.mesh.n_cells(), v_rest);
    let act = ActiveTensionSpec { peak, period: 0.8 };
    let t0 = std::time::Instant::now();
    let out = run_heartbeat(&model, &CirculationParams::baseline(), &act, &NewtonSettings::default(), &HeartbeatSettings::baseline()).unwrap();
    eprintln!("run took {:.1?}", t0.elapsed());
    for i in (0..out.times.len()).step_by(16) {
        println!("t={:.3} p={:8.1} Pa ({:5.1} mmHg) V={:.4e} phase={:?} it={}",
            out.times[i], out.pressures[i], out.pressures[i]/hyrom::MMHG, out.volumes[i], out.phases[i], out.newton_iters[i]);
    }
    let vmax = out.volumes.iter().cloned().fold(f64::MIN, f64::max);
    let vmin = out.volumes.iter().cloned().fold(f64::MAX, f64::min);
    eprintln!("EDV={:.4e} ESV={:.4e} EF={:.1}%", vmax, vmin, 100.0*(vmax-vmin)/vmax);
}
