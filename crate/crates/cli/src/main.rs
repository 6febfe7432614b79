use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hyrom::io;
use hyrom_cli::config::RunConfig;
use hyrom_cli::pipeline::{Mode, Pipeline};
use hyrom_cli::verify;

#[derive(Parser)]
#[command(name = "hyrom", about = "Reduced-order cardiac mechanics workbench")]
struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed of all sampling and training randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and store the ventricle mesh.
    Mesh,
    /// Run the full-order snapshot sweep.
    Fom,
    /// Compute the reduced basis from the snapshots.
    Pod,
    /// Record reduced Newton operators over a fresh parameter sample.
    RomRecord,
    /// Train the operator surrogates from the recordings.
    Train,
    /// Build the residual interpolation data.
    DeimBuild,
    /// Run every offline stage in order.
    Offline,
    /// One heartbeat at the center of the parameter box.
    Run {
        /// Solver fidelity: fom, rom, deim, or hyrom.
        #[arg(long, default_value = "fom")]
        mode: String,
    },
    /// Parameter sweep writing one output row per sample.
    Uq {
        #[arg(long, default_value = "hyrom")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Also run the full-order reference to fill the error columns.
        #[arg(long, default_value_t = false)]
        reference: bool,
    },
    /// Run the end-to-end verification suite.
    Verify,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let config_text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => String::new(),
    };
    let cfg = match RunConfig::parse(&config_text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    if let Cmd::Verify = cli.cmd {
        let results = verify::all();
        let mut ok = true;
        for r in &results {
            println!("{}", r.line());
            ok &= r.pass;
        }
        return if ok { ExitCode::SUCCESS } else { ExitCode::from(4) };
    }

    let mut pipe = match Pipeline::new(cfg, &config_text, &cli.out, cli.seed) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let result = match cli.cmd {
        Cmd::Mesh => pipe.stage_mesh(),
        Cmd::Fom => pipe.stage_snapshots(),
        Cmd::Pod => pipe.stage_pod(),
        Cmd::RomRecord => pipe.stage_rom_record(),
        Cmd::Train => pipe.stage_train(),
        Cmd::DeimBuild => pipe.stage_deim(),
        Cmd::Offline => pipe.offline_all(),
        Cmd::Run { mode } => Mode::parse(&mode).and_then(|mode| {
            pipe.stage_mesh()?;
            let mu = pipe.mu_baseline();
            let (trace, traj) = pipe.single_run(mode, mu)?;
            let pv = pipe.dir.join(format!("pv_{}.csv", mode.name()));
            io::write_pv_csv(&pv, &trace)?;
            let mesh = pipe.load_mesh()?;
            let last = traj.last().expect("trajectory is never empty");
            io::export_vtk(
                &pipe.dir.join(format!("end_state_{}.vtk", mode.name())),
                &mesh,
                Some(("displacement", last)),
            )?;
            println!("wrote {}", pv.display());
            Ok(())
        }),
        Cmd::Uq { mode, samples, reference } => Mode::parse(&mode).and_then(|mode| {
            pipe.stage_mesh()?;
            let path = pipe.sweep(mode, samples, pipe.seed.wrapping_add(2), reference)?;
            println!("wrote {}", path.display());
            Ok(())
        }),
        Cmd::Verify => unreachable!(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
