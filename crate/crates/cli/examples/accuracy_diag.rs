//! Splits the online surrogate error at held-out parameter points into
//! the Galerkin ROM's own error against the full-order reference and the
//! surrogate's drift from the ROM, using the cached acceptance artifacts.

use std::path::PathBuf;

use nalgebra::DVector;

use hyrom::fom::quasi_static_inflate;
use hyrom::hyrom::{hyrom_run, NetSource};
use hyrom::metrics::{ejection_fraction, error_metrics};
use hyrom::rom::rom_run;
use hyrom::sampling::{sample_parameters, Scheme};
use hyrom::{io, Result};
use hyrom_cli::config::RunConfig;
use hyrom_cli::pipeline::load_nets;

const OFFLINE_CONFIG: &str = r#"
[geometry]
resolution = [3, 4, 2]

[simulation]
dt = 0.005
n_steps = 160

[offline]
n_snapshots = 8
n_recordings = 20
n_override = 8
epochs = 300
patience = 60
train_stride = 4
fix_bulk = true
physiological = true
"#;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/acceptance"));
    let cfg = RunConfig::parse(OFFLINE_CONFIG)?;
    let mesh = io::load_mesh(&dir.join("mesh.bin"))?;
    let v = io::load_matrix(&dir.join("basis.bin"))?;
    let sv = io::field_to_floats(io::sidecar_get(
        &io::load_sidecar(&dir.join("basis.meta"))?,
        "singular_values",
    )?)?;
    let basis = hyrom::rom::ReducedBasis {
        v,
        singular_values: DVector::from_vec(sv),
        eps_pod: 1e-3,
    };
    let nets = load_nets(&dir)?;
    let settings = cfg.heartbeat_settings();
    let newton = cfg.newton_settings();

    // training parameter point of the first recording, as a control for
    // interpolation error: the surrogate saw this exact run
    let run0 = io::load_sidecar(&dir.join("run0.meta"))?;
    let mu_train = io::field_to_floats(io::sidecar_get(&run0, "mu")?)?;
    {
        let mu = [mu_train[0], mu_train[1], mu_train[2], mu_train[3]];
        let model = cfg.model_for(&mesh, &mu)?;
        let circ = cfg.circulation_for(&mu);
        let act = cfg.active_for(&mu);
        let u0 = quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;
        let rom = rom_run(&model, &circ, &act, &basis, mu, &u0, &newton, &settings, false)?;
        let mut source = NetSource::new(&nets);
        let out = hyrom_run(&model, &circ, &act, &basis, mu, &u0, &mut source, &settings)?;
        println!(
            "training mu: EF rom {:.2} sur {:.2}, failed {:?}",
            100.0 * ejection_fraction(&rom.trace.volumes)?,
            100.0 * ejection_fraction(&out.trace.volumes)?,
            out.failed
        );
        for j in (16..64).step_by(2) {
            println!(
                "  step {j}: rom {:?} V {:.2} p {:.1} | sur {:?} V {:.2} p {:.1}",
                rom.trace.phases[j],
                rom.trace.volumes[j] / 1e-6,
                rom.trace.pressures[j] / 133.322,
                out.trace.phases[j],
                out.trace.volumes[j] / 1e-6,
                out.trace.pressures[j] / 133.322
            );
        }
    }

    let mus = sample_parameters(&cfg.ranges(), 5, 999, Scheme::LatinHypercube)?;
    for (i, mu) in mus.iter().enumerate() {
        let mu = [mu[0], mu[1], mu[2], mu[3]];
        let fom_m = io::load_matrix(&dir.join(format!("testref_{i}.bin")))?;
        let fom: Vec<DVector<f64>> =
            (0..fom_m.ncols()).map(|j| fom_m.column(j).into_owned()).collect();
        let model = cfg.model_for(&mesh, &mu)?;
        let circ = cfg.circulation_for(&mu);
        let act = cfg.active_for(&mu);
        let u0 = quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;

        let rom = rom_run(&model, &circ, &act, &basis, mu, &u0, &newton, &settings, false)?;
        let rom_lift: Vec<DVector<f64>> = rom.reduced.iter().map(|q| &basis.v * q).collect();
        let (_, eps_rom) = error_metrics(&fom, &rom_lift)?;

        let mut source = NetSource::new(&nets);
        let out = hyrom_run(&model, &circ, &act, &basis, mu, &u0, &mut source, &settings)?;
        let sur_lift: Vec<DVector<f64>> = out.reduced.iter().map(|q| &basis.v * q).collect();
        let (_, eps_sur) = error_metrics(&fom, &sur_lift)?;

        let vols_fom: Vec<f64> =
            fom.iter().map(|u| model.cavity_volume(u)).collect::<Result<_>>()?;
        let ef_fom = ejection_fraction(&vols_fom)?;
        let ef_rom = ejection_fraction(&rom.trace.volumes)?;
        let ef_sur = ejection_fraction(&out.trace.volumes)?;
        println!(
            "mu {i}: K {:.2e} Rp {:.2e} Ta {:.2e} r {:.1e} | eps_rel rom {:.3e} sur {:.3e} | EF fom {:.2} rom {:.2} sur {:.2} | sur iters {} failed {:?}",
            mu[0], mu[1], mu[2], mu[3],
            eps_rom, eps_sur,
            100.0 * ef_fom, 100.0 * ef_rom, 100.0 * ef_sur,
            out.trace.newton_iters.iter().sum::<usize>(),
            out.failed
        );

        // drift of the surrogate from the ROM in reduced coordinates
        if i == 0 {
            let q_scale = rom.reduced.iter().map(|q| q.norm()).fold(0.0, f64::max);
            for (j, (a, b)) in out.reduced.iter().zip(&rom.reduced).enumerate() {
                if j % 20 == 0 {
                    println!(
                        "  step {j}: |q_sur - q_rom|/scale {:.3e}, V rom {:.2} ml sur {:.2} ml",
                        (a - b).norm() / q_scale,
                        rom.trace.volumes[j.min(rom.trace.volumes.len() - 1)] / 1e-6,
                        out.trace.volumes[j.min(out.trace.volumes.len() - 1)] / 1e-6
                    );
                }
            }
        }
    }
    Ok(())
}
