//! The `validate` subcommand: a fast self-check of every numerical
//! invariant the sampler relies on, with measured values printed next to
//! their tolerances. Runs in seconds; exits nonzero if anything fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortexmc::lattice::{curl_forward, div_forward, laplacian6, FieldRole, NodeField3};
use vortexmc::poisson::{
    energy_delta, refresh_psi, solve_fields, GreenTable, RunningSolution, GREEN_RESIDUAL_TOL,
};
use vortexmc::reference;
use vortexmc::{Circulation, DemonChain, LatticeSpec, Plane, Plaquette, SamplerConfig, VortexState};

use crate::Failure;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn random_plaquette(rng: &mut ChaCha8Rng, n: usize) -> Plaquette {
    Plaquette {
        base: [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)],
        plane: Plane::ALL[rng.gen_range(0..3)],
        orientation: if rng.gen::<bool>() { 1 } else { -1 },
    }
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, role: FieldRole) -> NodeField3 {
    let data = (0..3 * n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    NodeField3::from_data(n, role, data)
}

fn max_abs(f: &NodeField3) -> f64 {
    (0..3)
        .flat_map(|c| f.comp(c).iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

fn green_residual_checks(checks: &mut Vec<Check>) -> vortexmc::error::Result<()> {
    let mut worst = 0.0f64;
    for n in [4usize, 8] {
        let spec = LatticeSpec::new(n)?;
        let green = GreenTable::build(&spec)?;
        worst = worst.max(green.poisson_residual(&spec));
    }
    checks.push(check(
        "green_poisson_residual",
        worst <= GREEN_RESIDUAL_TOL,
        format!("max residual {worst:.3e} (tolerance {GREEN_RESIDUAL_TOL:.1e}, n 4 and 8)"),
    ));

    // A deliberately corrupted table must trip the same residual test.
    let spec = LatticeSpec::new(4)?;
    let faulty = GreenTable::build(&spec)?.with_fault(7, 1e-6);
    let residual = faulty.poisson_residual(&spec);
    checks.push(check(
        "green_fault_detection",
        residual > GREEN_RESIDUAL_TOL,
        format!(
            "corrupted table residual {residual:.3e} exceeds tolerance {GREEN_RESIDUAL_TOL:.1e}"
        ),
    ));
    Ok(())
}

fn operator_checks(checks: &mut Vec<Check>, rng: &mut ChaCha8Rng) -> vortexmc::error::Result<()> {
    let n = 8;
    let spec = LatticeSpec::new(n)?;

    // div(curl f) = 0 holds exactly for the forward/forward pairing; the
    // floating-point residue scales with the curl magnitude over h.
    let f = random_field(rng, n, FieldRole::VectorPotential);
    let u = curl_forward(&f, &spec);
    let div = div_forward(&u, &spec);
    let max_div = div.max_abs();
    let scale = 6.0 * max_abs(&u) / spec.h();
    let tol = 1e-12 * scale;
    checks.push(check(
        "curl_divergence_identity",
        max_div <= tol,
        format!("max |div curl| {max_div:.3e} (tolerance {tol:.3e})"),
    ));

    // <f, lap g> = <lap f, g> on the periodic lattice.
    let g = random_field(rng, n, FieldRole::VectorPotential);
    let lap_f = laplacian6(&f, &spec);
    let lap_g = laplacian6(&g, &spec);
    let dot = |a: &NodeField3, b: &NodeField3| -> f64 {
        (0..3)
            .map(|c| {
                a.comp(c)
                    .iter()
                    .zip(b.comp(c))
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum()
    };
    let lhs = dot(&f, &lap_g);
    let rhs = dot(&lap_f, &g);
    let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
    checks.push(check(
        "laplacian_self_adjoint",
        rel <= 1e-12,
        format!("<f,Lg> {lhs:.6e} vs <Lf,g> {rhs:.6e}, relative gap {rel:.3e} (tolerance 1e-12)"),
    ));

    // Loop stamps must leave every node divergence-free in the integers.
    let spec6 = LatticeSpec::new(6)?;
    let mut state = VortexState::empty(&spec6, Circulation::new(1.0)?);
    for _ in 0..60 {
        let p = random_plaquette(rng, 6);
        state.apply_plaquette(&p, &spec6);
    }
    let defect = state.first_divergence_defect(&spec6);
    checks.push(check(
        "loop_divergence_free",
        defect.is_none(),
        match defect {
            None => "60 random loops on 6^3, every node defect 0".into(),
            Some((node, d)) => format!("node {node} has defect {d}"),
        },
    ));
    Ok(())
}

fn solver_checks(checks: &mut Vec<Check>, rng: &mut ChaCha8Rng) -> vortexmc::error::Result<()> {
    let spec = LatticeSpec::new(4)?;
    let green = GreenTable::build(&spec)?;
    let g = Circulation::new(1.0)?;

    // Spectral energy against the dense direct solve.
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut state = VortexState::empty(&spec, g);
        for _ in 0..rng.gen_range(5..=40) {
            let p = random_plaquette(rng, 4);
            state.apply_plaquette(&p, &spec);
        }
        let spectral = solve_fields(&state, &green, &spec)?;
        let (_, dense) = reference::dense_solution(&state, &spec)?;
        worst = worst.max((spectral.energy - dense).abs() / dense.abs().max(1.0));
    }
    checks.push(check(
        "dense_oracle_energy",
        worst <= 1e-10,
        format!("max relative energy error {worst:.3e} over 20 states (tolerance 1e-10)"),
    ));

    // O(1) move energies against full recomputation.
    let mut state = VortexState::empty(&spec, g);
    let mut run = RunningSolution::empty(&spec);
    let mut prev = 0.0f64;
    let mut worst_de = 0.0f64;
    for _ in 0..200 {
        let p = random_plaquette(rng, 4);
        let de = energy_delta(&state, &run, &p, &green, &spec);
        state.apply_plaquette(&p, &spec);
        refresh_psi(&mut run, g.value(), &p, de, &green, &spec);
        let fresh = RunningSolution::solve(&state, &green, &spec)?;
        worst_de = worst_de.max((de - (fresh.energy() - prev)).abs() / fresh.energy().abs().max(1.0));
        prev = fresh.energy();
        run = fresh;
    }
    checks.push(check(
        "incremental_energy_consistency",
        worst_de <= 1e-10,
        format!("max relative move-energy error {worst_de:.3e} over 200 moves (tolerance 1e-10)"),
    ));
    Ok(())
}

fn sampler_checks(checks: &mut Vec<Check>) -> vortexmc::error::Result<()> {
    let spec = LatticeSpec::new(4)?;
    let green = GreenTable::build(&spec)?;
    let g = Circulation::new(1.0)?;
    let bound = 9_000.0;
    let cap = 3.0;
    let cfg = SamplerConfig {
        z2_bound: bound,
        demon_cap: cap,
        equilibration_sweeps: 10,
        measurement_sweeps: 30,
        seed: 7,
        ..SamplerConfig::new(30.0)
    };

    let mut chain = DemonChain::initialize(&spec, g, cfg.clone(), &green)?;
    let mut worst_drift = 0.0f64;
    chain.run_to_completion(&green, |c| {
        worst_drift = worst_drift.max(c.conservation_residual());
        Ok(())
    })?;
    let demon_ok = (0.0..=cap).contains(&chain.demon_energy());
    let z2_ok = chain.log().records.iter().all(|r| r.z2 <= bound + 1e-9);
    let div_ok = chain.state().first_divergence_defect(&spec).is_none();
    let pass = worst_drift <= 1e-8 && demon_ok && z2_ok && div_ok;
    checks.push(check(
        "demon_chain_conservation",
        pass,
        format!(
            "max drift {worst_drift:.3e} (tolerance 1e-8), demon {:.4} in [0, {cap}], z2 bound respected {z2_ok}, divergence-free {div_ok}",
            chain.demon_energy()
        ),
    ));

    // A checkpoint written mid-run must continue to the same result as an
    // uninterrupted chain.
    let mut full = DemonChain::initialize(&spec, g, cfg.clone(), &green)?;
    full.run_to_completion(&green, |_| Ok(()))?;
    let mut head = DemonChain::initialize(&spec, g, cfg, &green)?;
    head.run_until(16, &green, |_| Ok(()))?;
    let mut buf = Vec::new();
    head.write_checkpoint(&mut buf)?;
    let mut tail = DemonChain::read_checkpoint(&mut buf.as_slice(), &green)?;
    tail.run_to_completion(&green, |_| Ok(()))?;
    let counters_ok =
        tail.sweeps_done() == full.sweeps_done() && tail.proposed() == full.proposed();
    let log_ok = tail.log() == full.log();
    checks.push(check(
        "checkpoint_roundtrip",
        counters_ok && log_ok,
        format!(
            "resumed chain matches uninterrupted one exactly (sweeps {}, proposals {})",
            tail.sweeps_done(),
            tail.proposed()
        ),
    ));
    Ok(())
}

pub fn cmd_validate() -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut checks = Vec::new();
    green_residual_checks(&mut checks)?;
    operator_checks(&mut checks, &mut rng)?;
    solver_checks(&mut checks, &mut rng)?;
    sampler_checks(&mut checks)?;

    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut failed = 0usize;
    for c in &checks {
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("check {:width$}  {verdict}  {}", c.name, c.detail);
        if !c.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Validation(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
