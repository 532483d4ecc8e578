//! Command-line driver: solve problem files, verify first- and second-order
//! optimality conditions on stored runs, and reproduce the built-in
//! reference instance end to end.
//!
//! Exit codes: 0 success / all checks pass, 1 input error, 2 solver did not
//! converge (partial results still written), 3 condition-check failure.

use clap::{Args, Parser, Subcommand};
use parcon::foc::{run_foc, FocConfig};
use parcon::model::{read_problem_file, reference_instance, SpaceTimeGrid, ValidatedSpec};
use parcon::optim::{
    adjoint_costate, complementarity_residual, cost, solve_ocp, MultiplierBundle, SolveOptions,
    SolveStatus,
};
use parcon::pdesolve::solve_alt_costate;
use parcon::rundir::{read_run_dir, write_run_dir, RunData};
use parcon::soc::{check_second_order, sample_strict_critical, screen_quasi_radial};
use parcon::spectral::{project_field, reference_solution, REFERENCE_JUNCTIONS};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "parcon", version, about = "state-constrained bilinear parabolic optimal control: solver and optimality-condition verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolverFlags {
    /// Interior spatial nodes (overrides the problem file).
    #[arg(long)]
    nx: Option<usize>,
    /// Time steps (overrides the problem file).
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    outer_iters: usize,
    #[arg(long, default_value_t = 100)]
    inner_iters: usize,
    /// Projected-gradient sup-norm tolerance.
    #[arg(long, default_value_t = 3e-8)]
    tol_grad: f64,
    /// Maximal nodal constraint violation at convergence.
    #[arg(long, default_value_t = 1e-8)]
    tol_constraint: f64,
}

impl SolverFlags {
    fn options(&self) -> SolveOptions {
        SolveOptions {
            outer_iters: self.outer_iters,
            inner_iters: self.inner_iters,
            grad_tol: self.tol_grad,
            constraint_tol: self.tol_constraint,
            seed: self.seed,
            ..SolveOptions::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and persist the run directory.
    Solve {
        problem: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// First-order condition report for a stored run.
    CheckFoc {
        run: PathBuf,
        /// Report directory (defaults to the run directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Sign-condition tolerance, relative to max |Ψ|.
        #[arg(long, default_value_t = 1e-4)]
        tol_sign: f64,
        /// Junction jump-product tolerance (scaled).
        #[arg(long, default_value_t = 1e-4)]
        tol_jump: f64,
    },
    /// Second-order condition report for a stored run.
    CheckSoc {
        run: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Number of strict critical directions to sample.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative nonnegativity tolerance on Q.
        #[arg(long, default_value_t = 1e-6)]
        tol_soc: f64,
    },
    /// Solve the built-in reference instance and compare against its closed
    /// form.
    ExampleB {
        #[arg(short, long, default_value = "example_b_run")]
        out: PathBuf,
        /// Emit figure1.gp and the CSV series behind it.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// Emit a gnuplot script with the control/state panels of a stored run.
    Plot {
        run: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve { problem, out, flags } => cmd_solve(&problem, &out, &flags),
        Command::CheckFoc { run, out, tol_sign, tol_jump } => {
            cmd_check_foc(&run, out.as_deref(), tol_sign, tol_jump)
        }
        Command::CheckSoc { run, out, count, seed, tol_soc } => {
            cmd_check_soc(&run, out.as_deref(), count, seed, tol_soc)
        }
        Command::ExampleB { out, plot, flags } => cmd_example_b(&out, plot, &flags),
        Command::Plot { run, out } => cmd_plot(&run, out.as_deref()),
    };
    std::process::exit(code);
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    1
}

fn load_spec(problem: &Path) -> Result<ValidatedSpec, String> {
    let text = std::fs::read_to_string(problem)
        .map_err(|e| format!("no such problem file {}: {e}", problem.display()))?;
    read_problem_file(&text).map_err(|e| e.to_string())
}

fn grid_with_overrides(spec: &ValidatedSpec, flags: &SolverFlags) -> SpaceTimeGrid {
    SpaceTimeGrid::new(
        spec.l,
        spec.t_final,
        flags.nx.unwrap_or(spec.grid.n_x),
        flags.nt.unwrap_or(spec.grid.n_t),
    )
}

fn cmd_solve(problem: &Path, out: &Path, flags: &SolverFlags) -> i32 {
    let spec = match load_spec(problem) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let grid = grid_with_overrides(&spec, flags);
    let result = match solve_ocp(&spec, &grid, &flags.options()) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = write_run_dir(out, &spec, &grid, &result.trajectory, &result.bundle, &result.log)
    {
        return fail(e);
    }
    let last = result.log.iterations.last();
    println!(
        "status: {:?}; iterations: {}; J = {:.8}; run directory: {}",
        result.log.status,
        result.log.iterations.len(),
        last.map_or(f64::NAN, |r| r.cost),
        out.display()
    );
    match result.log.status {
        SolveStatus::Converged => 0,
        _ => 2,
    }
}

fn rebuild_bundle(data: &RunData) -> Result<MultiplierBundle, String> {
    let (p1, p) = solve_alt_costate(&data.spec, &data.grid, &data.y, &data.u, &data.mu)
        .map_err(|e| e.to_string())?;
    Ok(MultiplierBundle { p, p1, mu: data.mu.clone(), beta: 1.0 })
}

fn cmd_check_foc(run: &Path, out: Option<&Path>, tol_sign: f64, tol_jump: f64) -> i32 {
    let data = match read_run_dir(run) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let bundle = match rebuild_bundle(&data) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let config = FocConfig { sign_tol_rel: tol_sign, jump_tol: tol_jump, ..FocConfig::default() };
    let (report, arcs) =
        match run_foc(&data.spec, &data.grid, &data.u, &data.y, &bundle, &config) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
    let out_dir = out.unwrap_or(run);
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(e);
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(out_dir.join("foc_report.json"), json + "\n") {
        return fail(e);
    }
    println!(
        "arcs: {} (junctions at {:?})",
        arcs.arcs.len(),
        arcs.junctions.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>()
    );
    print!("{}", report.summary());
    if report.all_pass() {
        println!("first-order report: all checks pass");
        0
    } else {
        println!("first-order report: FAILURES present");
        3
    }
}

fn cmd_check_soc(run: &Path, out: Option<&Path>, count: usize, seed: u64, tol_soc: f64) -> i32 {
    let data = match read_run_dir(run) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let config = FocConfig::default();
    let arcs = parcon::foc::detect_arcs(
        &data.spec,
        &data.grid,
        &data.u,
        &data.y,
        &config.eps_u(&data.spec),
        &config.eps_g(&data.spec),
    );
    // Q is evaluated with the exact discrete-adjoint costate of the stored
    // multiplier weights.
    let (p, _) = match adjoint_costate(&data.spec, &data.grid, &data.u, &data.mu) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let mut dirs =
        match sample_strict_critical(&data.spec, &data.grid, &arcs, &data.y, &data.u, count, seed)
        {
            Ok(d) => d,
            Err(e) => return fail(e),
        };
    for d in &mut dirs {
        d.quasi_radial =
            screen_quasi_radial(&data.spec, &data.grid, &data.u, &data.y, d, &[1e-1, 1e-2, 1e-3]);
    }
    let report = check_second_order(&data.spec, &data.grid, &data.y, &p, &dirs, tol_soc);
    let out_dir = out.unwrap_or(run);
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(e);
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(out_dir.join("soc_report.json"), json + "\n") {
        return fail(e);
    }
    // Serialize the minimizing direction for inspection.
    if let Some(idx) = report.min_index {
        let kept: Vec<&parcon::soc::CriticalDirection> =
            dirs.iter().filter(|d| d.in_cs && d.quasi_radial).collect();
        if let Some(dir) = kept.get(idx) {
            let mut text = String::from("t,v1\n");
            for k in 0..data.grid.n_t {
                text.push_str(&format!("{},{}\n", data.grid.t(k), dir.v.value(0, k)));
            }
            if let Err(e) = std::fs::write(out_dir.join("min_v.csv"), text) {
                return fail(e);
            }
        }
    }
    println!(
        "directions: {} sampled, {} kept; min Q = {:.6e} (tolerance {:.3e})",
        report.directions, report.screened, report.min_q, report.tolerance
    );
    if report.pass {
        println!("second-order report: nonnegativity holds on the sampled cone");
        0
    } else {
        println!("second-order report: necessary condition violated (candidate not optimal, or multiplier inaccurate)");
        3
    }
}

struct ComparisonRow {
    name: &'static str,
    value: f64,
    threshold: f64,
}

fn cmd_example_b(out: &Path, plot: bool, flags: &SolverFlags) -> i32 {
    let n_x = flags.nx.unwrap_or(101);
    let n_t = flags.nt.unwrap_or(600);
    let spec = reference_instance(n_x, n_t);
    let grid = spec.grid;
    let result = match solve_ocp(&spec, &grid, &flags.options()) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = write_run_dir(out, &spec, &grid, &result.trajectory, &result.bundle, &result.log)
    {
        return fail(e);
    }
    let reference = reference_solution();
    let dt = grid.dt();
    let u = &result.trajectory.u;
    let y = &result.trajectory.y;

    // Control error in time-L², one dt-neighborhood of each junction excluded.
    let mut err2 = 0.0;
    let mut norm2 = 0.0;
    for k in 0..grid.n_t {
        let tm = grid.t(k) + 0.5 * dt;
        let ua = reference.control(tm);
        norm2 += dt * ua * ua;
        if REFERENCE_JUNCTIONS.iter().any(|j| (tm - j).abs() <= dt) {
            continue;
        }
        let d = u.value(0, k) - ua;
        err2 += dt * d * d;
    }
    let control_err = (err2 / norm2).sqrt();

    let proj_y = project_field(&grid, y, 1);
    let state_err = (0..=grid.n_t)
        .map(|k| (proj_y[k][0] - reference.state(grid.t(k))).abs())
        .fold(0.0f64, f64::max);

    let j = cost(&spec, &grid, u, y).unwrap_or(f64::NAN);
    let cost_err = (j - reference.optimal_cost()).abs();

    let proj_p = project_field(&grid, &result.bundle.p, 1);
    let costate_err0 = (proj_p[0][0] + 0.75).abs();
    let from = (std::f64::consts::LN_2 / dt).ceil() as usize + 2;
    let costate_tail =
        (from..=grid.n_t).map(|k| proj_p[k][0].abs()).fold(0.0f64, f64::max);

    // Multiplier density from the arc identity, compared on the interior of
    // the constrained arc.
    let config = FocConfig::default();
    let arcs = parcon::foc::detect_arcs(
        &spec,
        &grid,
        u,
        y,
        &config.eps_u(&spec),
        &config.eps_g(&spec),
    );
    let density_err = parcon::foc::mu_density(
        &spec,
        &grid,
        u,
        y,
        &result.bundle.p1,
        &result.bundle.mu,
        &arcs,
    )
    .map(|rows| {
        rows.iter()
            .filter(|(a, k, _)| {
                let arc = &arcs.arcs[*a];
                *k >= arc.start_node + 3 && *k + 3 <= arc.end_node
            })
            .map(|(_, k, vals)| (vals[0] - reference.mu_density(grid.t(*k))).abs())
            .fold(0.0f64, f64::max)
    })
    .unwrap_or(f64::NAN);

    let comp = complementarity_residual(&spec, &grid, y, &result.bundle.mu);
    let mass = result.bundle.mu.total_mass(0);

    let rows = [
        ComparisonRow { name: "control time-L2 (rel, junctions excluded)", value: control_err, threshold: 2e-2 },
        ComparisonRow { name: "state sup (first mode)", value: state_err, threshold: 1e-2 },
        ComparisonRow { name: "cost |J - J*|", value: cost_err, threshold: 1e-3 },
        ComparisonRow { name: "costate p1(0) vs -0.75", value: costate_err0, threshold: 1e-2 },
        ComparisonRow { name: "costate sup on (log 2, 3)", value: costate_tail, threshold: 1e-2 },
        ComparisonRow { name: "multiplier density sup on arc", value: density_err, threshold: 5e-2 },
        ComparisonRow { name: "complementarity / mass", value: comp[0] / mass.max(1e-300), threshold: 1e-6 },
    ];
    println!(
        "reference comparison on {} x {} (status {:?}, J = {:.7}, J* = {:.7})",
        n_x,
        n_t,
        result.log.status,
        j,
        reference.optimal_cost()
    );
    println!("{:<44} {:>12} {:>12} {:>6}", "quantity", "error", "threshold", "flag");
    let mut warned = result.log.status != SolveStatus::Converged;
    for row in &rows {
        let ok = row.value <= row.threshold;
        warned |= !ok;
        println!(
            "{:<44} {:>12.3e} {:>12.1e} {:>6}",
            row.name,
            row.value,
            row.threshold,
            if ok { "ok" } else { "WARN" }
        );
    }
    if warned {
        println!("warning: some quantities exceed their reference thresholds (coarse grid?)");
    }

    let mut table = String::from("quantity,error,threshold\n");
    for row in &rows {
        table.push_str(&format!("{},{},{}\n", row.name, row.value, row.threshold));
    }
    if let Err(e) = std::fs::write(out.join("comparison.csv"), table) {
        return fail(e);
    }
    if plot {
        if let Err(e) = emit_plot_files(out, &grid, &proj_y, true) {
            return fail(e);
        }
        println!("plot script: {}", out.join("figure1.gp").display());
    }
    0
}

fn cmd_plot(run: &Path, out: Option<&Path>) -> i32 {
    let data = match read_run_dir(run) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let out_dir = out.unwrap_or(run);
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(e);
    }
    if out_dir != run {
        if let Err(e) = std::fs::copy(run.join("control.csv"), out_dir.join("control.csv")) {
            return fail(e);
        }
    }
    let proj = project_field(&data.grid, &data.y, 1);
    if let Err(e) = emit_plot_files(out_dir, &data.grid, &proj, false) {
        return fail(e);
    }
    println!("plot script: {}", out_dir.join("figure1.gp").display());
    0
}

fn emit_plot_files(
    dir: &Path,
    grid: &SpaceTimeGrid,
    proj_y: &[Vec<f64>],
    with_reference: bool,
) -> std::io::Result<()> {
    let mut y1 = String::from("t,y1\n");
    for (k, row) in proj_y.iter().enumerate() {
        y1.push_str(&format!("{},{}\n", grid.t(k), row[0]));
    }
    std::fs::write(dir.join("y1.csv"), y1)?;
    let mut script = String::from(
        "# Two-panel figure: optimal control and first state mode.\n\
         # Run `gnuplot figure1.gp` from this directory.\n\
         set terminal pngcairo size 1100,430\n\
         set output \"figure1.png\"\n\
         set datafile separator comma\n\
         set multiplot layout 1,2\n\
         set xlabel \"t\"\n\
         set title \"control\"\n",
    );
    if with_reference {
        let table = reference_solution().sample_table(grid.n_t);
        let mut analytic = String::from("t,u,y1,yd,p1,mudot\n");
        for row in table {
            analytic.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row[0], row[1], row[2], row[3], row[4], row[5]
            ));
        }
        std::fs::write(dir.join("analytic.csv"), analytic)?;
        script.push_str(
            "plot \"control.csv\" skip 1 using 1:2 with steps lw 2 title \"computed\", \\\n\
             \t\"analytic.csv\" skip 1 using 1:2 with lines dashtype 2 title \"closed form\"\n\
             set title \"state (first mode)\"\n\
             plot \"y1.csv\" skip 1 using 1:2 with lines lw 2 title \"computed\", \\\n\
             \t\"analytic.csv\" skip 1 using 1:3 with lines dashtype 2 title \"closed form\", \\\n\
             \t\"analytic.csv\" skip 1 using 1:4 with lines dashtype 3 title \"target\", \\\n\
             \t2 with lines dashtype 4 lc \"gray\" title \"ceiling\"\n",
        );
    } else {
        script.push_str(
            "plot \"control.csv\" skip 1 using 1:2 with steps lw 2 title \"computed\"\n\
             set title \"state (first mode)\"\n\
             plot \"y1.csv\" skip 1 using 1:2 with lines lw 2 title \"computed\"\n",
        );
    }
    script.push_str("unset multiplot\n");
    std::fs::write(dir.join("figure1.gp"), script)?;
    Ok(())
}
