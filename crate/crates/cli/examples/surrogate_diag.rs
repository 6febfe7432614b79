//! Diagnostic dump of trained operator surrogates against the recorded
//! training data. Reads artifacts from a pipeline directory (first
//! argument, default target/acceptance) and prints per-map prediction
//! errors plus the predicted residual-norm behavior that drives the
//! online stopping rule.

use std::path::PathBuf;

use hyrom::rom::OperatorSnapshots;
use hyrom_cli::pipeline::{load_nets, load_ops};

fn pct(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        f64::NAN
    } else {
        v[((v.len() - 1) as f64 * q) as usize]
    }
}

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/acceptance"));
    let nets = load_nets(&dir).expect("trained nets");
    println!(
        "nets: n = {}, k_max = {}, eps_nwt = {:.1e}, rho_floor = {:.3e}",
        nets.n, nets.k_max, nets.eps_nwt, nets.rho_floor
    );

    let mut runs: Vec<([f64; 4], OperatorSnapshots)> = Vec::new();
    for i in 0.. {
        match load_ops(&dir, i) {
            Ok(r) => runs.push(r),
            Err(_) => break,
        }
    }
    println!("recordings: {} runs", runs.len());

    // recorded residual norms by iteration index
    for k in 0..=nets.k_max {
        let norms: Vec<f64> = runs
            .iter()
            .flat_map(|(_, ops)| {
                ops.rho_samples
                    .iter()
                    .zip(&ops.rho)
                    .filter(|(s, _)| s.k == k)
                    .map(|(_, r)| r.norm())
            })
            .collect();
        println!(
            "recorded |rho| at k = {k}: {} samples, p5 {:.3e} p50 {:.3e} p95 {:.3e}",
            norms.len(),
            pct(norms.clone(), 0.05),
            pct(norms.clone(), 0.50),
            pct(norms, 0.95)
        );
    }

    // prediction errors over a thinned pass of the training samples
    let mut rho_rel = Vec::new();
    let mut rho_norm_pairs = Vec::new();
    let mut iota_rel = Vec::new();
    let mut pi_rel = Vec::new();
    let mut ups_rel = Vec::new();
    for (_, ops) in &runs {
        for (i, s) in ops.rho_samples.iter().enumerate().step_by(7) {
            let (x, _) = nets.input.normalize(s.mu, s.t, s.k);
            let y = nets.rho_net.predict(&x).unwrap();
            let dir = y.rows(0, nets.n).into_owned();
            let rhat = &dir * (y[nets.n].exp() / dir.norm().max(1e-300));
            let r = &ops.rho[i];
            rho_rel.push((&rhat - r).norm() / r.norm().max(1e-300));
            rho_norm_pairs.push((s.k, r.norm(), rhat.norm()));
            let ihat = nets.iota_net.predict(&x).unwrap();
            let iv = hyrom::dnn::vec_cols(&ops.iota[i]);
            iota_rel.push((&ihat - &iv).norm() / iv.norm().max(1e-300));
        }
        for (i, s) in ops.pi_samples.iter().enumerate().step_by(7) {
            let (x, _) = nets.input.normalize(s.mu, s.t, s.k);
            let phat = nets.pi_net.predict(&x).unwrap();
            pi_rel.push((&phat - &ops.pi[i]).norm() / ops.pi[i].norm().max(1e-300));
            let uhat = nets.upsilon_net.predict(&x).unwrap();
            ups_rel.push((&uhat - &ops.upsilon[i]).norm() / ops.upsilon[i].norm().max(1e-300));
        }
    }
    for (name, v) in [
        ("rho", rho_rel),
        ("iota", iota_rel),
        ("pi", pi_rel),
        ("upsilon", ups_rel),
    ] {
        println!(
            "{name} relative error: p50 {:.3e} p90 {:.3e} p99 {:.3e}",
            pct(v.clone(), 0.50),
            pct(v.clone(), 0.90),
            pct(v, 0.99)
        );
    }

    // per recorded step: does the predicted stopping rule fire within
    // the recorded iteration range?
    let mut stalls = 0usize;
    let mut steps = 0usize;
    let mut stall_ts = Vec::new();
    for (_, ops) in &runs {
        let mut by_t: std::collections::BTreeMap<u64, Vec<(usize, usize)>> =
            std::collections::BTreeMap::new();
        for (i, s) in ops.rho_samples.iter().enumerate() {
            by_t.entry(s.t.to_bits()).or_default().push((s.k, i));
        }
        for (tb, mut ks) in by_t {
            ks.sort();
            steps += 1;
            let s0 = &ops.rho_samples[ks[0].1];
            let (x0, _) = nets.input.normalize(s0.mu, s0.t, 0);
            let n0 = nets.rho_net.predict(&x0).unwrap()[nets.n].exp();
            let mut fired = false;
            let mut best_ratio = f64::INFINITY;
            let mut best_norm = f64::INFINITY;
            for k in 1..=nets.k_max + 1 {
                let (x, _) = nets.input.normalize(s0.mu, s0.t, k);
                let nk = nets.rho_net.predict(&x).unwrap()[nets.n].exp();
                best_ratio = best_ratio.min(nk / n0);
                best_norm = best_norm.min(nk);
                if nk < nets.eps_nwt * n0 || nk < nets.rho_floor {
                    fired = true;
                    break;
                }
            }
            if !fired {
                stalls += 1;
                if stall_ts.len() < 20 {
                    stall_ts.push(f64::from_bits(tb));
                    println!(
                        "  stall at t = {}: predicted |rho0| {:.3e}, best ratio {:.3e}, best norm {:.3e}, true |rho0| {:.3e}",
                        f64::from_bits(tb),
                        n0,
                        best_ratio,
                        best_norm,
                        ops.rho[ks[0].1].norm()
                    );
                }
            }
        }
    }
    println!(
        "stopping rule fails to fire on {stalls} of {steps} recorded steps; first stall times {:?}",
        stall_ts
    );

    // predicted vs recorded norms per iteration index
    for k in 0..=nets.k_max {
        let truth: Vec<f64> = rho_norm_pairs
            .iter()
            .filter(|(kk, _, _)| *kk == k)
            .map(|(_, t, _)| *t)
            .collect();
        let pred: Vec<f64> = rho_norm_pairs
            .iter()
            .filter(|(kk, _, _)| *kk == k)
            .map(|(_, _, p)| *p)
            .collect();
        println!(
            "|rho| at k = {k}: true p50 {:.3e}, predicted p5 {:.3e} p50 {:.3e} p95 {:.3e}",
            pct(truth, 0.50),
            pct(pred.clone(), 0.05),
            pct(pred.clone(), 0.50),
            pct(pred, 0.95)
        );
    }
}
