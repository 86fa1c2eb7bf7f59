//! End-to-end acceptance checks. Each test covers one numbered criterion and
//! prints a single PASS line with the measured numbers; failures carry the
//! same numbers in the panic message. Tolerances are pinned here, next to the
//! assertions they guard.
//!
//! The heavy tests run 16^3 chains; the whole file is sized to stay within
//! desk-scale minutes on one core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortexmc::lattice::LatticeSpec;
use vortexmc::observables::{solutions_from_snapshots, structure_function, velocity_moments};
use vortexmc::poisson::{energy_delta, refresh_psi, solve_fields, GreenTable, RunningSolution};
use vortexmc::reference;
use vortexmc::sampler::{
    estimate_beta_from_samples, metropolis_reference, run_chain, DemonChain, SamplerConfig,
};
use vortexmc::state::{Circulation, Plane, Plaquette, VortexState};
use vortexmc::targeting::{baseline_z2, home_in, tabulate};

const SEED: u64 = 11;

fn setup(n: usize) -> (LatticeSpec, GreenTable) {
    let spec = LatticeSpec::new(n).unwrap();
    let green = GreenTable::build(&spec).unwrap();
    (spec, green)
}

fn gamma(value: f64) -> Circulation {
    Circulation::new(value).unwrap()
}

fn random_plaquette(rng: &mut ChaCha8Rng, n: usize) -> Plaquette {
    Plaquette {
        base: [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)],
        plane: Plane::ALL[rng.gen_range(0..3)],
        orientation: if rng.gen::<bool>() { 1 } else { -1 },
    }
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)).sum();
    sxy / sxx
}

#[test]
fn criterion_1_equipartition_scaling() {
    // Unconstrained inverse temperature grows like N^3 at fixed energy.
    let plan: [(usize, u32, u32); 3] = [(4, 300, 900), (8, 150, 450), (16, 40, 120)];
    let mut points = Vec::new();
    let mut betas = Vec::new();
    for &(n, equil, meas) in &plan {
        let (spec, green) = setup(n);
        let cfg = SamplerConfig {
            equilibration_sweeps: equil,
            measurement_sweeps: meas,
            seed: SEED,
            ..SamplerConfig::new(100.0)
        };
        let res = run_chain(&spec, gamma(1.0), cfg, &green).unwrap();
        let beta = res.beta.unwrap().primary().beta;
        assert!(beta > 0.0, "criterion 1 FAIL: beta at N={n} is {beta}, expected positive");
        points.push(((n as f64).ln(), beta.ln()));
        betas.push((n, beta));
    }
    let slope = least_squares_slope(&points);
    assert!(
        (slope - 3.0).abs() <= 0.5,
        "criterion 1 FAIL: log beta vs log N slope {slope:.3}, want 3.0 +- 0.5 (betas {betas:?})"
    );
    println!(
        "criterion 1 (equipartition scaling): PASS, slope {slope:.3} within 3.0 +- 0.5; betas {betas:?}"
    );
}

#[test]
fn criterion_2_enstrophy_bound_heating() {
    // Tightening the enstrophy bound heats the system: beta falls by at
    // least 5x across the grid, monotone up to one 2-sigma inversion.
    let (spec, green) = setup(16);
    let base = SamplerConfig {
        equilibration_sweeps: 60,
        measurement_sweeps: 120,
        seed: SEED,
        ..SamplerConfig::new(100.0)
    };
    let baseline = baseline_z2(&spec, gamma(1.0), &base, &green).unwrap();
    let z20 = baseline.z2_mean;
    let fractions = [0.02, 0.05, 0.10, 0.15, 0.20, 0.25];
    let deltas: Vec<f64> = fractions.iter().map(|f| f * z20).collect();
    let mut records = tabulate(&spec, gamma(1.0), &base, z20, &deltas, &green).unwrap();
    records.sort_by(|a, b| a.delta_z2.total_cmp(&b.delta_z2));

    let mut betas = Vec::new();
    for rec in &records {
        assert!(
            rec.feasible,
            "criterion 2 FAIL: delta Z2 {:.0} infeasible: {:?}",
            rec.delta_z2, rec.warning
        );
        betas.push((rec.beta.unwrap(), rec.beta_stderr.unwrap()));
    }
    let mut inversions = 0;
    for w in betas.windows(2) {
        let joint = (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt();
        if w[1].0 > w[0].0 + 2.0 * joint {
            inversions += 1;
        }
    }
    let values: Vec<f64> = betas.iter().map(|b| b.0).collect();
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        inversions <= 1,
        "criterion 2 FAIL: {inversions} inversions beyond 2 joint stderr in {values:?}"
    );
    assert!(
        min > 0.0 && max / min >= 5.0,
        "criterion 2 FAIL: beta range {max:.2}/{min:.2} smaller than 5x (grid {values:?})"
    );
    println!(
        "criterion 2 (enstrophy-bound heating): PASS, Z20 {z20:.0}, beta falls {max:.1} -> {min:.1} ({:.1}x), {inversions} inversion(s)",
        max / min
    );
}

#[test]
fn criterion_3_velocity_moment_identities() {
    // Sparse loops (gamma = 3) at fixed energy: the second moment is pinned
    // by the energy, odd moments vanish, and the one-point distribution is
    // super-Gaussian.
    let (spec, green) = setup(16);
    let cfg = SamplerConfig {
        equilibration_sweeps: 30,
        measurement_sweeps: 120,
        snapshot_stride: 5,
        seed: SEED,
        ..SamplerConfig::new(100.0)
    };
    let res = run_chain(&spec, gamma(3.0), cfg, &green).unwrap();
    let samples =
        solutions_from_snapshots(&res.log.snapshots, gamma(3.0), &spec, &green).unwrap();
    let table = velocity_moments(&samples, &spec, 6).unwrap();

    let u2 = table.moment(0, 2);
    let want_u2 = 2.0 * 100.0 / 3.0;
    assert!(
        (u2 - want_u2).abs() <= 0.05 * want_u2,
        "criterion 3 FAIL: <u1^2> = {u2:.1}, want {want_u2:.1} +- 5%"
    );
    for p in [1, 3, 5] {
        let (m, s) = (table.moment(0, p), table.stderr(0, p));
        assert!(
            m.abs() <= 3.0 * s,
            "criterion 3 FAIL: odd moment p={p} is {m:.3e} with stderr {s:.3e}, beyond 3 sigma"
        );
    }
    let (u4, u6) = (table.moment(0, 4), table.moment(0, 6));
    assert!(u4 > 0.0 && u6 > 0.0, "criterion 3 FAIL: even moments not positive: {u4:.3e}, {u6:.3e}");
    let flatness = table.flatness(0).unwrap();
    assert!(
        flatness > 3.0,
        "criterion 3 FAIL: flatness {flatness:.2} not super-Gaussian (> 3)"
    );
    println!(
        "criterion 3 (velocity moment identities): PASS, <u1^2> {u2:.1} (want {want_u2:.1} +- 5%), flatness {flatness:.2} > 3, odd moments within 3 sigma, <u1^4> {u4:.3e}, <u1^6> {u6:.3e}, {} samples",
        table.n_samples()
    );
}

#[test]
fn criterion_4_structure_function_shape() {
    // At both a cold and a hot operating point the normalized longitudinal
    // structure function rises to a plateau at 1 with no spike at r = h.
    let (spec, green) = setup(16);
    let g = gamma(1.0);
    let base = SamplerConfig {
        equilibration_sweeps: 60,
        measurement_sweeps: 120,
        seed: SEED,
        ..SamplerConfig::new(100.0)
    };
    let baseline = baseline_z2(&spec, g, &base, &green).unwrap();
    let z20 = baseline.z2_mean;

    // Inverse temperature targets with their relative tolerances and the
    // delta-Z2 brackets that straddle them.
    let searches = [(40.2, 0.05, 0.0, 0.10 * z20), (3.0, 0.10, 0.20 * z20, 0.30 * z20)];
    let mut summaries = Vec::new();
    for &(target, tol, lo, hi) in &searches {
        let rec = home_in(&spec, g, &base, z20, lo, hi, target, tol, &green).unwrap();
        let beta = rec.beta.unwrap();
        let stderr = rec.beta_stderr.unwrap();
        assert!(
            (beta - target).abs() <= (tol * target).max(2.0 * stderr),
            "criterion 4 FAIL: homing missed beta {target}: got {beta:.2} +- {stderr:.2}"
        );

        let cfg = SamplerConfig {
            z2_bound: rec.z2_bound,
            equilibration_sweeps: 30,
            measurement_sweeps: 120,
            snapshot_stride: 5,
            seed: SEED + 100,
            ..SamplerConfig::new(100.0)
        };
        let res = run_chain(&spec, g, cfg, &green).unwrap();
        let samples = solutions_from_snapshots(&res.log.snapshots, g, &spec, &green).unwrap();
        let sf = structure_function(&samples, &spec).unwrap();
        let norm = sf.normalized.as_ref().expect("criterion 4 FAIL: degenerate normalization");
        let se = sf.normalized_stderr.as_ref().unwrap();

        for i in 0..norm.len() - 1 {
            let joint = (se[i] * se[i] + se[i + 1] * se[i + 1]).sqrt();
            assert!(
                norm[i + 1] >= norm[i] - 2.0 * joint,
                "criterion 4 FAIL: beta {target}: R falls beyond noise at r index {i}: {:?}",
                norm
            );
        }
        let q = sf.plateau_len();
        for (i, &v) in norm[norm.len() - q..].iter().enumerate() {
            assert!(
                (0.8..=1.2).contains(&v),
                "criterion 4 FAIL: beta {target}: plateau point {i} at {v:.3} outside 1.0 +- 0.2"
            );
        }
        assert!(
            norm[0] < 0.9,
            "criterion 4 FAIL: beta {target}: R(h) {:.3} not below 0.9 of plateau",
            norm[0]
        );
        summaries.push(format!(
            "beta {target}: homed {beta:.2} at delta Z2 {:.0}, R(h) {:.2}, plateau tail {:.2}",
            rec.delta_z2,
            norm[0],
            norm[norm.len() - 1]
        ));
    }
    println!("criterion 4 (structure function shape): PASS, {}", summaries.join("; "));
}

#[test]
fn criterion_5_oracle_equivalence() {
    // The spectral solver must agree with the dense direct solve, and the
    // O(1) move energies must agree with full recomputation.
    let (spec, green) = setup(4);
    let g = gamma(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_energy = 0.0f64;
    for _ in 0..100 {
        let mut state = VortexState::empty(&spec, g);
        for _ in 0..rng.gen_range(5..=60) {
            let p = random_plaquette(&mut rng, 4);
            state.apply_plaquette(&p, &spec);
        }
        let spectral = solve_fields(&state, &green, &spec).unwrap();
        let (_, dense_energy) = reference::dense_solution(&state, &spec).unwrap();
        let rel = (spectral.energy - dense_energy).abs() / dense_energy.abs().max(1.0);
        worst_energy = worst_energy.max(rel);
        assert!(
            rel <= 1e-10,
            "criterion 5 FAIL: spectral {} vs dense {} differ by {rel:.2e} relative",
            spectral.energy,
            dense_energy
        );
    }

    let mut state = VortexState::empty(&spec, g);
    let mut run = RunningSolution::empty(&spec);
    let mut prev_energy = 0.0f64;
    let mut worst_delta = 0.0f64;
    for mv in 0..1000 {
        let p = random_plaquette(&mut rng, 4);
        let de = energy_delta(&state, &run, &p, &green, &spec);
        state.apply_plaquette(&p, &spec);
        refresh_psi(&mut run, g.value(), &p, de, &green, &spec);
        let fresh = RunningSolution::solve(&state, &green, &spec).unwrap();
        let full_de = fresh.energy() - prev_energy;
        let rel = (de - full_de).abs() / fresh.energy().abs().max(1.0);
        worst_delta = worst_delta.max(rel);
        assert!(
            rel <= 1e-10,
            "criterion 5 FAIL: move {mv}: incremental dE {de} vs recomputed {full_de}, {rel:.2e} relative"
        );
        prev_energy = fresh.energy();
    }
    println!(
        "criterion 5 (oracle equivalence): PASS, 100 states, worst energy residual {worst_energy:.2e}; 1000 moves, worst dE residual {worst_delta:.2e}"
    );
}

#[test]
fn criterion_6_sampler_invariants() {
    // A full 8^3 chain with an active bound: demon in range and bound
    // respected at every step, conservation drift tiny between refreshes,
    // vorticity divergence-free at the end.
    let (spec, green) = setup(8);
    let bound = 74500.0;
    let cap = 10.0;
    let cfg = SamplerConfig {
        z2_bound: bound,
        equilibration_sweeps: 20,
        measurement_sweeps: 46,
        seed: SEED,
        ..SamplerConfig::new(100.0)
    };
    let total_sweeps = cfg.equilibration_sweeps + cfg.measurement_sweeps;
    let mut chain = DemonChain::initialize(&spec, gamma(1.0), cfg, &green).unwrap();
    let steps = 3 * spec.nodes();
    let mut proposals = 0u64;
    let mut worst_drift = 0.0f64;
    for sweep in 1..=total_sweeps {
        for _ in 0..steps {
            chain.step(&green);
            proposals += 1;
            let ed = chain.demon_energy();
            assert!(
                (0.0..=cap).contains(&ed),
                "criterion 6 FAIL: demon energy {ed} outside [0, {cap}] at proposal {proposals}"
            );
            assert!(
                chain.z2() <= bound + 1e-9,
                "criterion 6 FAIL: Z2 {} above bound {bound} at proposal {proposals}",
                chain.z2()
            );
        }
        let drift = chain.conservation_residual();
        worst_drift = worst_drift.max(drift);
        assert!(
            drift <= 1e-8,
            "criterion 6 FAIL: conservation drift {drift:.2e} beyond 1e-8 at sweep {sweep}"
        );
        if sweep % 8 == 0 {
            chain.full_refresh(&green).unwrap();
        }
    }
    assert!(proposals >= 100_000, "criterion 6 FAIL: only {proposals} proposals, need 1e5");
    assert_eq!(
        chain.state().first_divergence_defect(&spec),
        None,
        "criterion 6 FAIL: vorticity divergence defect at chain end"
    );
    println!(
        "criterion 6 (sampler invariants): PASS, {proposals} proposals, worst drift {worst_drift:.2e}, demon and Z2 in range, div xi = 0"
    );
}

#[test]
fn criterion_7_beta_estimator_calibration() {
    // Synthetic truncated-exponential samples with known beta, then method
    // agreement on a real chain.
    let cap = 1.0f64;
    let mut summaries = Vec::new();
    for &beta in &[0.5, 5.0, 50.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + beta as u64);
        let norm = 1.0 - (-beta * cap).exp();
        let samples: Vec<f64> = (0..30_000)
            .map(|_| {
                let u: f64 = rng.gen();
                -(1.0 - u * norm).ln() / beta
            })
            .collect();
        let est = estimate_beta_from_samples(&samples, cap, 160, 20).unwrap();
        let (a, sa) = (est.mean_relation.beta, est.mean_relation.stderr);
        let (b, sb) = (est.histogram_fit.beta, est.histogram_fit.stderr);
        assert!(
            (a - beta).abs() <= 2.0 * sa,
            "criterion 7 FAIL: mean relation at beta {beta}: {a:.3} +- {sa:.3}"
        );
        assert!(
            (b - beta).abs() <= 2.0 * sb,
            "criterion 7 FAIL: histogram fit at beta {beta}: {b:.3} +- {sb:.3}"
        );
        summaries.push(format!("beta {beta}: {a:.3}/{b:.3}"));
    }

    let (spec, green) = setup(8);
    let cfg = SamplerConfig {
        equilibration_sweeps: 50,
        measurement_sweeps: 150,
        seed: 7,
        ..SamplerConfig::new(100.0)
    };
    let res = run_chain(&spec, gamma(1.0), cfg, &green).unwrap();
    let est = res.beta.unwrap();
    let spread = est.method_spread();
    assert!(
        spread <= 0.10,
        "criterion 7 FAIL: methods disagree by {:.1}%: mean relation {:.3} vs histogram {:.3}",
        100.0 * spread,
        est.mean_relation.beta,
        est.histogram_fit.beta
    );
    println!(
        "criterion 7 (beta estimator calibration): PASS, synthetic {} within 2 stderr; real-chain method spread {:.1}%",
        summaries.join(", "),
        100.0 * spread
    );
}

#[test]
fn criterion_8_ensemble_equivalence() {
    // Canonical sampling at the microcanonically measured beta must
    // reproduce the conserved energy.
    let (spec, green) = setup(8);
    let cfg = SamplerConfig {
        equilibration_sweeps: 50,
        measurement_sweeps: 150,
        seed: 7,
        ..SamplerConfig::new(100.0)
    };
    let res = run_chain(&spec, gamma(1.0), cfg, &green).unwrap();
    let beta = res.beta.unwrap().primary().beta;
    let met = metropolis_reference(&spec, gamma(1.0), beta, 60, 180, 4242, &green).unwrap();
    let err = (met.mean_energy - 100.0).abs() / 100.0;
    assert!(
        err <= 0.05,
        "criterion 8 FAIL: canonical <E> {:.2} at beta {beta:.3} off the microcanonical 100 by {:.1}%",
        met.mean_energy,
        100.0 * err
    );
    println!(
        "criterion 8 (ensemble equivalence): PASS, canonical <E> {:.2} +- {:.2} at beta {beta:.3} vs microcanonical 100 ({:.1}% off)",
        met.mean_energy,
        met.stderr,
        100.0 * err
    );
}
