//! Offline/online pipeline orchestration: staged artifact production with
//! checksum-based resumption, and the parameter-sweep driver writing the
//! uncertainty-quantification output table.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use hyrom::dnn::{InputScaler, TrainConfig};
use hyrom::fom::{quasi_static_inflate, run_heartbeat, CycleTrace};
use hyrom::geometry::HexMesh;
use hyrom::hyrom::{hyrom_run, train_surrogates, NetSource, SurrogateNets};
use hyrom::io;
use hyrom::metrics::{dpdt_max, ejection_fraction, error_metrics, OutputRecord, CSV_HEADER};
use hyrom::rom::{
    deim_build, deim_rom_run, pod, pod_fixed_rank, rom_run, DeimData, OpSample,
    OperatorSnapshots, ReducedBasis, SnapshotMatrix, SnapshotMeta,
};
use hyrom::sampling::{sample_parameters, Scheme};
use hyrom::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Cap on residual snapshot columns kept for the interpolation basis.
const MAX_RESIDUAL_COLS: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fom,
    Rom,
    Deim,
    Hyrom,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fom" => Ok(Mode::Fom),
            "rom" => Ok(Mode::Rom),
            "deim" => Ok(Mode::Deim),
            "hyrom" => Ok(Mode::Hyrom),
            other => Err(Error::invalid(format!(
                "unknown mode '{other}' (expected fom, rom, deim, or hyrom)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Fom => "fom",
            Mode::Rom => "rom",
            Mode::Deim => "deim",
            Mode::Hyrom => "hyrom",
        }
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub seed: u64,
    pub manifest: RunManifest,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, config_text: &str, dir: &Path, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest::load_or_new(dir, config_text);
        Ok(Pipeline { cfg, dir: dir.to_path_buf(), seed, manifest })
    }

    fn finish(&mut self, stage: &str, t0: Instant) -> Result<()> {
        self.manifest
            .timings
            .insert(stage.to_string(), t0.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)
    }

    fn mu4(mu: &[f64]) -> [f64; 4] {
        [mu[0], mu[1], mu[2], mu[3]]
    }

    // -- offline stages -------------------------------------------------

    pub fn stage_mesh(&mut self) -> Result<()> {
        if self.manifest.is_valid("mesh", &self.dir) {
            log::info!("mesh: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let mesh = self.cfg.build_mesh()?;
        io::save_mesh(&self.dir.join("mesh.bin"), &mesh)?;
        io::export_vtk(&self.dir.join("mesh.vtk"), &mesh, None)?;
        self.manifest.record("mesh", &self.dir, "mesh.bin")?;
        self.manifest.record("mesh_vtk", &self.dir, "mesh.vtk")?;
        log::info!(
            "mesh: {} vertices, {} cells",
            mesh.n_vertices(),
            mesh.n_cells()
        );
        self.finish("mesh", t0)
    }

    pub fn load_mesh(&self) -> Result<HexMesh> {
        io::load_mesh(&self.dir.join("mesh.bin"))
    }

    /// Full-order snapshot runs over a parameter sample; the displacement
    /// trajectories become the snapshot matrix feeding the basis.
    pub fn stage_snapshots(&mut self) -> Result<()> {
        self.stage_mesh()?;
        if self.manifest.is_valid("snapshots", &self.dir)
            && self.manifest.is_valid("snapshots_meta", &self.dir)
        {
            log::info!("snapshots: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let mesh = self.load_mesh()?;
        let mus = sample_parameters(
            &self.cfg.ranges(),
            self.cfg.offline.n_snapshots,
            self.seed,
            Scheme::LatinHypercube,
        )?;
        let settings = self.cfg.heartbeat_settings();
        let newton = self.cfg.newton_settings();
        let runs: Vec<(usize, [f64; 4], Vec<DVector<f64>>)> = mus
            .par_iter()
            .enumerate()
            .map(|(i, mu)| {
                let mu = Self::mu4(mu);
                let model = self.cfg.model_for(&mesh, &mu)?;
                let circ = self.cfg.circulation_for(&mu);
                let act = self.cfg.active_for(&mu);
                let out = run_heartbeat(&model, &circ, &act, &newton, &settings)?;
                Ok((i, mu, out.displacements))
            })
            .collect::<Result<_>>()?;

        let n_dofs = runs[0].2[0].len();
        let mut snaps = SnapshotMatrix::new(n_dofs);
        let mut meta_pairs: Vec<(String, String)> = Vec::new();
        for (i, mu, traj) in &runs {
            meta_pairs.push((format!("mu_{i}"), io::floats_to_field(mu)));
            for (step, u) in traj.iter().enumerate() {
                snaps.push_column(
                    u,
                    SnapshotMeta { sample: *i, time: step as f64 * settings.dt },
                )?;
            }
        }
        io::save_matrix(&self.dir.join("snapshots.bin"), &snaps.s)?;
        io::save_sidecar(&self.dir.join("snapshots.meta"), &meta_pairs)?;
        self.manifest.record("snapshots", &self.dir, "snapshots.bin")?;
        self.manifest.record("snapshots_meta", &self.dir, "snapshots.meta")?;
        log::info!("snapshots: {} columns of dimension {}", snaps.n_cols(), n_dofs);
        self.finish("snapshots", t0)
    }

    pub fn stage_pod(&mut self) -> Result<()> {
        self.stage_snapshots()?;
        if self.manifest.is_valid("basis", &self.dir)
            && self.manifest.is_valid("basis_meta", &self.dir)
        {
            log::info!("pod: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let s = io::load_matrix(&self.dir.join("snapshots.bin"))?;
        let mut snaps = SnapshotMatrix::new(s.nrows());
        for j in 0..s.ncols() {
            snaps.push_column(
                &s.column(j).into_owned(),
                SnapshotMeta { sample: 0, time: 0.0 },
            )?;
        }
        let basis = match self.cfg.offline.n_override {
            Some(n) => pod_fixed_rank(&snaps, n)?,
            None => pod(&snaps, self.cfg.offline.eps_pod)?,
        };
        io::save_matrix(&self.dir.join("basis.bin"), &basis.v)?;
        io::save_sidecar(
            &self.dir.join("basis.meta"),
            &[
                ("n".into(), basis.n().to_string()),
                ("eps_pod".into(), format!("{}", basis.eps_pod)),
                (
                    "singular_values".into(),
                    io::floats_to_field(basis.singular_values.as_slice()),
                ),
            ],
        )?;
        self.manifest.record("basis", &self.dir, "basis.bin")?;
        self.manifest.record("basis_meta", &self.dir, "basis.meta")?;
        log::info!("pod: reduced dimension {}", basis.n());
        self.finish("pod", t0)
    }

    pub fn load_basis(&self) -> Result<ReducedBasis> {
        let v = io::load_matrix(&self.dir.join("basis.bin"))?;
        let meta = io::load_sidecar(&self.dir.join("basis.meta"))?;
        let eps_pod: f64 = io::sidecar_get(&meta, "eps_pod")?
            .parse()
            .map_err(|_| Error::Format("basis.meta: bad eps_pod".into()))?;
        let sv = io::field_to_floats(io::sidecar_get(&meta, "singular_values")?)?;
        Ok(ReducedBasis {
            v,
            singular_values: DVector::from_vec(sv),
            eps_pod,
        })
    }

    fn run_artifacts(i: usize) -> [(String, String); 5] {
        [
            (format!("run{i}_rho"), format!("run{i}_rho.bin")),
            (format!("run{i}_iota"), format!("run{i}_iota.bin")),
            (format!("run{i}_pi"), format!("run{i}_pi.bin")),
            (format!("run{i}_upsilon"), format!("run{i}_upsilon.bin")),
            (format!("run{i}_meta"), format!("run{i}.meta")),
        ]
    }

    /// Reduced-order recording runs: the Galerkin solver is run over a
    /// fresh parameter sample with operator recording on, and the per-run
    /// operator snapshots plus a residual subsample are persisted.
    pub fn stage_rom_record(&mut self) -> Result<()> {
        self.stage_pod()?;
        let n_runs = self.cfg.offline.n_recordings;
        let all_valid = (0..n_runs).all(|i| {
            Self::run_artifacts(i)
                .iter()
                .all(|(name, _)| self.manifest.is_valid(name, &self.dir))
        }) && self.manifest.is_valid("residuals", &self.dir);
        if all_valid {
            log::info!("rom-record: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let mesh = self.load_mesh()?;
        let basis = self.load_basis()?;
        let mus = sample_parameters(
            &self.cfg.ranges(),
            n_runs,
            self.seed.wrapping_add(1),
            Scheme::LatinHypercube,
        )?;
        let settings = self.cfg.heartbeat_settings();
        let newton = self.cfg.newton_settings();
        let runs: Vec<(usize, [f64; 4], OperatorSnapshots, SnapshotMatrix)> = mus
            .par_iter()
            .enumerate()
            .map(|(i, mu)| {
                let mu = Self::mu4(mu);
                let model = self.cfg.model_for(&mesh, &mu)?;
                let circ = self.cfg.circulation_for(&mu);
                let act = self.cfg.active_for(&mu);
                let u0 =
                    quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;
                let out =
                    rom_run(&model, &circ, &act, &basis, mu, &u0, &newton, &settings, true)?;
                let rec = out
                    .recording
                    .ok_or_else(|| Error::invalid("recording run produced no recording"))?;
                Ok((i, mu, rec.ops, rec.residuals))
            })
            .collect::<Result<_>>()?;

        for (i, mu, ops, _) in &runs {
            save_ops(&self.dir, *i, *mu, ops)?;
            for (name, rel) in Self::run_artifacts(*i) {
                self.manifest.record(&name, &self.dir, &rel)?;
            }
        }

        // subsample residual iterates evenly across all runs
        let total: usize = runs.iter().map(|(_, _, _, r)| r.n_cols()).sum();
        let stride = total.div_ceil(MAX_RESIDUAL_COLS).max(1);
        let n_dofs = mesh.n_vertices() * 3;
        let mut residuals = SnapshotMatrix::new(n_dofs);
        let mut col = 0usize;
        for (i, _, _, rec) in &runs {
            for j in 0..rec.n_cols() {
                if col % stride == 0 {
                    residuals.push_column(
                        &rec.s.column(j).into_owned(),
                        SnapshotMeta { sample: *i, time: 0.0 },
                    )?;
                }
                col += 1;
            }
        }
        io::save_matrix(&self.dir.join("residuals.bin"), &residuals.s)?;
        self.manifest.record("residuals", &self.dir, "residuals.bin")?;
        log::info!(
            "rom-record: {} runs, {} residual columns kept of {}",
            n_runs,
            residuals.n_cols(),
            total
        );
        self.finish("rom-record", t0)
    }

    pub fn load_recordings(&self) -> Result<Vec<OperatorSnapshots>> {
        (0..self.cfg.offline.n_recordings)
            .map(|i| load_ops(&self.dir, i).map(|(_, ops)| ops))
            .collect()
    }

    pub fn stage_train(&mut self) -> Result<()> {
        self.stage_rom_record()?;
        let net_names = ["rho_net", "iota_net", "pi_net", "upsilon_net"];
        let valid = net_names
            .iter()
            .flat_map(|n| [format!("{n}"), format!("{n}_meta")])
            .chain(["nets_meta".to_string()])
            .all(|name| self.manifest.is_valid(&name, &self.dir));
        if valid {
            log::info!("train: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let stride = self.cfg.offline.train_stride;
        let runs: Vec<OperatorSnapshots> = self
            .load_recordings()?
            .iter()
            .map(|ops| thin_ops(ops, stride))
            .collect();
        let (mu_lo, mu_hi) = self.cfg.normalization_box();
        let tc = TrainConfig {
            epochs: self.cfg.offline.epochs,
            patience: self.cfg.offline.patience,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let (nets, stats) =
            train_surrogates(&runs, mu_lo, mu_hi, self.cfg.circulation.period, &tc)?;
        log::info!(
            "train: best validation losses rho {:.3e} iota {:.3e} pi {:.3e} upsilon {:.3e}",
            stats.rho.best_val,
            stats.iota.best_val,
            stats.pi.best_val,
            stats.upsilon.best_val
        );
        save_nets(&self.dir, &nets)?;
        for n in net_names {
            self.manifest.record(n, &self.dir, &format!("{n}.bin"))?;
            self.manifest
                .record(&format!("{n}_meta"), &self.dir, &format!("{n}.meta"))?;
        }
        self.manifest.record("nets_meta", &self.dir, "nets.meta")?;
        self.finish("train", t0)
    }

    pub fn load_nets(&self) -> Result<SurrogateNets> {
        load_nets(&self.dir)
    }

    pub fn stage_deim(&mut self) -> Result<()> {
        self.stage_rom_record()?;
        if self.manifest.is_valid("deim_um", &self.dir)
            && self.manifest.is_valid("deim_proj", &self.dir)
            && self.manifest.is_valid("deim_meta", &self.dir)
        {
            log::info!("deim-build: up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        let mesh = self.load_mesh()?;
        let basis = self.load_basis()?;
        let r = io::load_matrix(&self.dir.join("residuals.bin"))?;
        let mut residuals = SnapshotMatrix::new(r.nrows());
        for j in 0..r.ncols() {
            residuals.push_column(
                &r.column(j).into_owned(),
                SnapshotMeta { sample: 0, time: 0.0 },
            )?;
        }
        let m = self.cfg.offline.m_deim.min(residuals.n_cols());
        let deim = deim_build(&residuals, m, &basis, &mesh)?;
        io::save_matrix(&self.dir.join("deim_um.bin"), &deim.u_m)?;
        io::save_matrix(&self.dir.join("deim_proj.bin"), &deim.projector)?;
        io::save_sidecar(
            &self.dir.join("deim.meta"),
            &[
                (
                    "indices".into(),
                    io::floats_to_field(
                        &deim.indices.iter().map(|&i| i as f64).collect::<Vec<_>>(),
                    ),
                ),
                (
                    "cells".into(),
                    io::floats_to_field(
                        &deim.cells.iter().map(|&c| c as f64).collect::<Vec<_>>(),
                    ),
                ),
                ("cond".into(), format!("{}", deim.cond)),
            ],
        )?;
        self.manifest.record("deim_um", &self.dir, "deim_um.bin")?;
        self.manifest.record("deim_proj", &self.dir, "deim_proj.bin")?;
        self.manifest.record("deim_meta", &self.dir, "deim.meta")?;
        log::info!(
            "deim-build: {} modes, {} reduced-mesh cells, cond {:.3e}",
            m,
            deim.cells.len(),
            deim.cond
        );
        self.finish("deim-build", t0)
    }

    pub fn load_deim(&self) -> Result<DeimData> {
        let u_m = io::load_matrix(&self.dir.join("deim_um.bin"))?;
        let projector = io::load_matrix(&self.dir.join("deim_proj.bin"))?;
        let meta = io::load_sidecar(&self.dir.join("deim.meta"))?;
        let indices: Vec<usize> = io::field_to_floats(io::sidecar_get(&meta, "indices")?)?
            .iter()
            .map(|&v| v as usize)
            .collect();
        let cells: Vec<usize> = io::field_to_floats(io::sidecar_get(&meta, "cells")?)?
            .iter()
            .map(|&v| v as usize)
            .collect();
        let cond: f64 = io::sidecar_get(&meta, "cond")?
            .parse()
            .map_err(|_| Error::Format("deim.meta: bad cond".into()))?;
        let mesh = self.load_mesh()?;
        let mut mask = vec![false; mesh.n_cells()];
        for &c in &cells {
            if c >= mask.len() {
                return Err(Error::Format("deim.meta: cell index out of range".into()));
            }
            mask[c] = true;
        }
        Ok(DeimData { u_m, indices, cells, mask, projector, cond })
    }

    pub fn offline_all(&mut self) -> Result<()> {
        self.stage_train()?;
        self.stage_deim()
    }

    // -- online ---------------------------------------------------------

    /// Center of the sampling box; the default operating point.
    pub fn mu_baseline(&self) -> [f64; 4] {
        let r = self.cfg.ranges();
        [0, 1, 2, 3].map(|i| 0.5 * (r[i].0 + r[i].1))
    }

    /// One heartbeat at a given parameter point, returning the trace and
    /// the full-order displacement trajectory (lifted for reduced modes).
    pub fn single_run(&self, mode: Mode, mu: [f64; 4]) -> Result<(CycleTrace, Vec<DVector<f64>>)> {
        let mesh = self.load_mesh()?;
        let model = self.cfg.model_for(&mesh, &mu)?;
        let circ = self.cfg.circulation_for(&mu);
        let act = self.cfg.active_for(&mu);
        let settings = self.cfg.heartbeat_settings();
        let newton = self.cfg.newton_settings();
        match mode {
            Mode::Fom => {
                let out = run_heartbeat(&model, &circ, &act, &newton, &settings)?;
                let trace = CycleTrace {
                    times: out.times,
                    pressures: out.pressures,
                    volumes: out.volumes,
                    phases: out.phases,
                    newton_iters: out.newton_iters,
                };
                Ok((trace, out.displacements))
            }
            Mode::Rom => {
                let basis = self.load_basis()?;
                let u0 =
                    quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;
                let out =
                    rom_run(&model, &circ, &act, &basis, mu, &u0, &newton, &settings, false)?;
                let lifted = out.reduced.iter().map(|q| &basis.v * q).collect();
                Ok((out.trace, lifted))
            }
            Mode::Deim => {
                let basis = self.load_basis()?;
                let deim = self.load_deim()?;
                let u0 =
                    quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;
                let (out, _) =
                    deim_rom_run(&model, &circ, &act, &basis, &deim, &u0, &newton, &settings)?;
                let lifted = out.reduced.iter().map(|q| &basis.v * q).collect();
                Ok((out.trace, lifted))
            }
            Mode::Hyrom => {
                let basis = self.load_basis()?;
                let nets = self.load_nets()?;
                let u0 =
                    quasi_static_inflate(&model, circ.p_ed, settings.inflate_steps, &newton)?;
                let mut source = NetSource::new(&nets);
                let out =
                    hyrom_run(&model, &circ, &act, &basis, mu, &u0, &mut source, &settings)?;
                if let Some(step) = out.failed {
                    return Err(Error::invalid(format!(
                        "surrogate run stalled at step {step}"
                    )));
                }
                let lifted = out.reduced.iter().map(|q| &basis.v * q).collect();
                Ok((out.trace, lifted))
            }
        }
    }

    /// Parameter sweep writing one output row per sample. Failed samples
    /// are kept in the table with a non-ok status and NaN outputs; error
    /// columns stay NaN unless a full-order reference run is requested.
    pub fn sweep(
        &self,
        mode: Mode,
        n_samples: usize,
        sweep_seed: u64,
        with_reference: bool,
    ) -> Result<PathBuf> {
        let path = self.dir.join(format!("sweep_{}.csv", mode.name()));
        if n_samples == 0 {
            std::fs::write(&path, format!("{CSV_HEADER}\n"))?;
            return Ok(path);
        }
        let mus = sample_parameters(
            &self.cfg.ranges(),
            n_samples,
            sweep_seed,
            Scheme::LatinHypercube,
        )?;
        let mesh = self.load_mesh()?;
        let basis = match mode {
            Mode::Fom => None,
            _ => Some(self.load_basis()?),
        };
        let deim = match mode {
            Mode::Deim => Some(self.load_deim()?),
            _ => None,
        };
        let nets = match mode {
            Mode::Hyrom => Some(self.load_nets()?),
            _ => None,
        };
        let settings = self.cfg.heartbeat_settings();
        let newton = self.cfg.newton_settings();

        let records: Vec<OutputRecord> = mus
            .par_iter()
            .map(|mu| {
                let mu = Self::mu4(mu);
                let run = || -> Result<(CycleTrace, Vec<DVector<f64>>, Option<usize>)> {
                    let model = self.cfg.model_for(&mesh, &mu)?;
                    let circ = self.cfg.circulation_for(&mu);
                    let act = self.cfg.active_for(&mu);
                    match mode {
                        Mode::Fom => {
                            let out = run_heartbeat(&model, &circ, &act, &newton, &settings)?;
                            let trace = CycleTrace {
                                times: out.times,
                                pressures: out.pressures,
                                volumes: out.volumes,
                                phases: out.phases,
                                newton_iters: out.newton_iters,
                            };
                            Ok((trace, out.displacements, None))
                        }
                        Mode::Rom => {
                            let basis = basis.as_ref().unwrap();
                            let u0 = quasi_static_inflate(
                                &model,
                                circ.p_ed,
                                settings.inflate_steps,
                                &newton,
                            )?;
                            let out = rom_run(
                                &model, &circ, &act, basis, mu, &u0, &newton, &settings, false,
                            )?;
                            let lifted =
                                out.reduced.iter().map(|q| &basis.v * q).collect();
                            Ok((out.trace, lifted, None))
                        }
                        Mode::Deim => {
                            let basis = basis.as_ref().unwrap();
                            let deim = deim.as_ref().unwrap();
                            let u0 = quasi_static_inflate(
                                &model,
                                circ.p_ed,
                                settings.inflate_steps,
                                &newton,
                            )?;
                            let (out, _) = deim_rom_run(
                                &model, &circ, &act, basis, deim, &u0, &newton, &settings,
                            )?;
                            let lifted =
                                out.reduced.iter().map(|q| &basis.v * q).collect();
                            Ok((out.trace, lifted, None))
                        }
                        Mode::Hyrom => {
                            let basis = basis.as_ref().unwrap();
                            let nets = nets.as_ref().unwrap();
                            let u0 = quasi_static_inflate(
                                &model,
                                circ.p_ed,
                                settings.inflate_steps,
                                &newton,
                            )?;
                            let mut source = NetSource::new(nets);
                            let out = hyrom_run(
                                &model, &circ, &act, basis, mu, &u0, &mut source, &settings,
                            )?;
                            let lifted =
                                out.reduced.iter().map(|q| &basis.v * q).collect();
                            Ok((out.trace, lifted, out.failed))
                        }
                    }
                };
                match run() {
                    Ok((trace, traj, failed)) => {
                        let ef = ejection_fraction(&trace.volumes);
                        let dp = dpdt_max(&trace.pressures, settings.dt);
                        let (eps_abs, eps_rel) = if with_reference && mode != Mode::Fom {
                            self.reference_errors(&mu, &traj)
                                .unwrap_or((f64::NAN, f64::NAN))
                        } else {
                            (f64::NAN, f64::NAN)
                        };
                        let status = match failed {
                            Some(step) => format!("failed_step_{step}"),
                            None => "ok".to_string(),
                        };
                        OutputRecord {
                            mu,
                            ef: ef.unwrap_or(f64::NAN),
                            dpdt_max: dp.unwrap_or(f64::NAN),
                            eps_abs,
                            eps_rel,
                            status,
                        }
                    }
                    Err(e) => OutputRecord {
                        mu,
                        ef: f64::NAN,
                        dpdt_max: f64::NAN,
                        eps_abs: f64::NAN,
                        eps_rel: f64::NAN,
                        status: format!("error_{}", error_tag(&e)),
                    },
                }
            })
            .collect();

        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in &records {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        Ok(path)
    }

    fn reference_errors(
        &self,
        mu: &[f64; 4],
        traj: &[DVector<f64>],
    ) -> Result<(f64, f64)> {
        let mesh = self.load_mesh()?;
        let model = self.cfg.model_for(&mesh, mu)?;
        let circ = self.cfg.circulation_for(mu);
        let act = self.cfg.active_for(mu);
        let out = run_heartbeat(
            &model,
            &circ,
            &act,
            &self.cfg.newton_settings(),
            &self.cfg.heartbeat_settings(),
        )?;
        error_metrics(&out.displacements, traj)
    }
}

fn error_tag(e: &Error) -> &'static str {
    match e {
        Error::NonAdmissible => "non_admissible",
        Error::Invalid(_) => "invalid",
        Error::Singular(_) => "singular",
        Error::Convergence { .. } => "convergence",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
    }
}

/// Every stride-th operator sample of a recording, keeping the paired
/// (residual, tangent) and (coupling, constraint) lists aligned.
fn thin_ops(ops: &OperatorSnapshots, stride: usize) -> OperatorSnapshots {
    if stride <= 1 {
        return ops.clone();
    }
    let mut out = OperatorSnapshots::new(ops.n);
    for i in (0..ops.rho.len()).step_by(stride) {
        out.rho.push(ops.rho[i].clone());
        out.iota.push(ops.iota[i].clone());
        out.rho_q.push(ops.rho_q[i].clone());
        out.rho_samples.push(ops.rho_samples[i]);
    }
    for i in (0..ops.pi.len()).step_by(stride) {
        out.pi.push(ops.pi[i].clone());
        out.upsilon.push(ops.upsilon[i].clone());
        out.pi_samples.push(ops.pi_samples[i]);
    }
    out
}

// -- operator snapshot persistence --------------------------------------

fn samples_to_fields(samples: &[OpSample]) -> (String, String, String) {
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let ks: Vec<f64> = samples.iter().map(|s| s.k as f64).collect();
    let ps: Vec<f64> = samples.iter().map(|s| s.p).collect();
    (io::floats_to_field(&ts), io::floats_to_field(&ks), io::floats_to_field(&ps))
}

fn fields_to_samples(mu: [f64; 4], ts: &str, ks: &str, ps: &str) -> Result<Vec<OpSample>> {
    let ts = io::field_to_floats(ts)?;
    let ks = io::field_to_floats(ks)?;
    let ps = io::field_to_floats(ps)?;
    if ts.len() != ks.len() || ts.len() != ps.len() {
        return Err(Error::Format("sample t/k/p lists differ in length".into()));
    }
    Ok(ts
        .iter()
        .zip(&ks)
        .zip(&ps)
        .map(|((&t, &k), &p)| OpSample { mu, t, k: k as usize, p })
        .collect())
}

fn vectors_to_matrix(rows: usize, cols: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        if c.len() != rows {
            return Err(Error::invalid("inconsistent operator column length"));
        }
        m.set_column(j, c);
    }
    Ok(m)
}

pub fn save_ops(dir: &Path, i: usize, mu: [f64; 4], ops: &OperatorSnapshots) -> Result<()> {
    let n = ops.n;
    io::save_matrix(
        &dir.join(format!("run{i}_rho.bin")),
        &vectors_to_matrix(n, &ops.rho)?,
    )?;
    let iota_cols: Vec<DVector<f64>> = ops
        .iota
        .iter()
        .map(|m| DVector::from_column_slice(m.as_slice()))
        .collect();
    io::save_matrix(
        &dir.join(format!("run{i}_iota.bin")),
        &vectors_to_matrix(n * n, &iota_cols)?,
    )?;
    io::save_matrix(
        &dir.join(format!("run{i}_rhoq.bin")),
        &vectors_to_matrix(n, &ops.rho_q)?,
    )?;
    io::save_matrix(
        &dir.join(format!("run{i}_pi.bin")),
        &vectors_to_matrix(n, &ops.pi)?,
    )?;
    io::save_matrix(
        &dir.join(format!("run{i}_upsilon.bin")),
        &vectors_to_matrix(n + 1, &ops.upsilon)?,
    )?;
    let (rho_t, rho_k, rho_p) = samples_to_fields(&ops.rho_samples);
    let (pi_t, pi_k, pi_p) = samples_to_fields(&ops.pi_samples);
    io::save_sidecar(
        &dir.join(format!("run{i}.meta")),
        &[
            ("n".into(), n.to_string()),
            ("mu".into(), io::floats_to_field(&mu)),
            ("rho_t".into(), rho_t),
            ("rho_k".into(), rho_k),
            ("rho_p".into(), rho_p),
            ("pi_t".into(), pi_t),
            ("pi_k".into(), pi_k),
            ("pi_p".into(), pi_p),
        ],
    )
}

pub fn load_ops(dir: &Path, i: usize) -> Result<([f64; 4], OperatorSnapshots)> {
    let meta = io::load_sidecar(&dir.join(format!("run{i}.meta")))?;
    let n: usize = io::sidecar_get(&meta, "n")?
        .parse()
        .map_err(|_| Error::Format("run meta: bad n".into()))?;
    let mu_v = io::field_to_floats(io::sidecar_get(&meta, "mu")?)?;
    if mu_v.len() != 4 {
        return Err(Error::Format("run meta: mu must have 4 entries".into()));
    }
    let mu = [mu_v[0], mu_v[1], mu_v[2], mu_v[3]];
    let rho_m = io::load_matrix(&dir.join(format!("run{i}_rho.bin")))?;
    let rhoq_m = io::load_matrix(&dir.join(format!("run{i}_rhoq.bin")))?;
    let iota_m = io::load_matrix(&dir.join(format!("run{i}_iota.bin")))?;
    let pi_m = io::load_matrix(&dir.join(format!("run{i}_pi.bin")))?;
    let ups_m = io::load_matrix(&dir.join(format!("run{i}_upsilon.bin")))?;
    if rho_m.nrows() != n
        || rhoq_m.nrows() != n
        || iota_m.nrows() != n * n
        || ups_m.nrows() != n + 1
    {
        return Err(Error::Format("operator matrices disagree with n".into()));
    }
    let mut ops = OperatorSnapshots::new(n);
    ops.rho = (0..rho_m.ncols()).map(|j| rho_m.column(j).into_owned()).collect();
    ops.rho_q = (0..rhoq_m.ncols()).map(|j| rhoq_m.column(j).into_owned()).collect();
    ops.iota = (0..iota_m.ncols())
        .map(|j| DMatrix::from_column_slice(n, n, iota_m.column(j).as_slice()))
        .collect();
    ops.pi = (0..pi_m.ncols()).map(|j| pi_m.column(j).into_owned()).collect();
    ops.upsilon = (0..ups_m.ncols()).map(|j| ups_m.column(j).into_owned()).collect();
    ops.rho_samples = fields_to_samples(
        mu,
        io::sidecar_get(&meta, "rho_t")?,
        io::sidecar_get(&meta, "rho_k")?,
        io::sidecar_get(&meta, "rho_p")?,
    )?;
    ops.pi_samples = fields_to_samples(
        mu,
        io::sidecar_get(&meta, "pi_t")?,
        io::sidecar_get(&meta, "pi_k")?,
        io::sidecar_get(&meta, "pi_p")?,
    )?;
    ops.validate()?;
    Ok((mu, ops))
}

// -- surrogate persistence ----------------------------------------------

pub fn save_nets(dir: &Path, nets: &SurrogateNets) -> Result<()> {
    io::save_map_net(&dir.join("rho_net.bin"), &nets.rho_net)?;
    io::save_map_net(&dir.join("iota_net.bin"), &nets.iota_net)?;
    io::save_map_net(&dir.join("pi_net.bin"), &nets.pi_net)?;
    io::save_map_net(&dir.join("upsilon_net.bin"), &nets.upsilon_net)?;
    io::save_sidecar(
        &dir.join("nets.meta"),
        &[
            ("n".into(), nets.n.to_string()),
            ("k_max".into(), nets.k_max.to_string()),
            ("eps_nwt".into(), format!("{}", nets.eps_nwt)),
            ("rho_floor".into(), format!("{}", nets.rho_floor)),
            ("mu_lo".into(), io::floats_to_field(&nets.input.mu_lo)),
            ("mu_hi".into(), io::floats_to_field(&nets.input.mu_hi)),
            ("period".into(), format!("{}", nets.input.period)),
        ],
    )
}

pub fn load_nets(dir: &Path) -> Result<SurrogateNets> {
    let meta = io::load_sidecar(&dir.join("nets.meta"))?;
    let parse_f = |key: &str| -> Result<f64> {
        io::sidecar_get(&meta, key)?
            .parse()
            .map_err(|_| Error::Format(format!("nets.meta: bad {key}")))
    };
    let parse_u = |key: &str| -> Result<usize> {
        io::sidecar_get(&meta, key)?
            .parse()
            .map_err(|_| Error::Format(format!("nets.meta: bad {key}")))
    };
    let arr4 = |key: &str| -> Result<[f64; 4]> {
        let v = io::field_to_floats(io::sidecar_get(&meta, key)?)?;
        if v.len() != 4 {
            return Err(Error::Format(format!("nets.meta: {key} must have 4 entries")));
        }
        Ok([v[0], v[1], v[2], v[3]])
    };
    Ok(SurrogateNets {
        n: parse_u("n")?,
        k_max: parse_u("k_max")?,
        rho_net: io::load_map_net(&dir.join("rho_net.bin"))?,
        iota_net: io::load_map_net(&dir.join("iota_net.bin"))?,
        pi_net: io::load_map_net(&dir.join("pi_net.bin"))?,
        upsilon_net: io::load_map_net(&dir.join("upsilon_net.bin"))?,
        input: InputScaler {
            mu_lo: arr4("mu_lo")?,
            mu_hi: arr4("mu_hi")?,
            period: parse_f("period")?,
            k_max: parse_u("k_max")?,
        },
        eps_nwt: parse_f("eps_nwt")?,
        rho_floor: parse_f("rho_floor")?,
    })
}
