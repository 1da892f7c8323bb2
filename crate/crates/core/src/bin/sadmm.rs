use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sadmm::harness::{
    emit_csv, emit_json, emit_svg, envelope, fem_verify, grad_check, rate_study, sparsity_table, ChartSpec,
    ExperimentConfig, Series,
};
use sadmm::optimizer::Method;
use sadmm::Error;

#[derive(Parser, Debug)]
#[command(name = "sadmm", version, about = "Stochastic linearized ADMM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration; unset fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV, JSON and SVG artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 50 runs and 10^4 evaluation samples.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Comma-separated subset of admm,spg,ssg,adasg.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured experiment.
    Run,
    /// Run all configured methods and plot against iterations and oracle calls.
    Compare,
    /// Nonzero fraction of the final control per beta and batch rule.
    SparsityTable,
    /// Min/mean/max objective band over runs.
    Envelope,
    /// Log-log rate fit on the quadratic problem.
    Rate,
    /// Finite-difference check of the elliptic gradient.
    GradCheck,
    /// Manufactured-solution convergence study of the finite elements.
    FemVerify,
}

enum Outcome {
    Pass,
    CheckFailed,
}

fn load_config(common: &Common) -> sadmm::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if common.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(list) = &common.methods {
        cfg.methods = list.iter().map(|s| s.parse::<Method>()).collect::<sadmm::Result<_>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> sadmm::Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("sadmm-out"));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn print_summary(exp: &sadmm::harness::Experiment) {
    println!(
        "{:<7} {:>6} {:>10} {:>14} {:>12} {:>10} {:>8}",
        "method", "failed", "sfo_calls", "objective", "std", "feas", "nonzero"
    );
    for m in exp.summary().methods {
        println!(
            "{:<7} {:>6} {:>10} {:>14.8e} {:>12.3e} {:>10.3e} {:>7.2}%",
            m.method.name(),
            m.failed_runs,
            m.sfo_calls,
            m.final_objective_mean,
            m.final_objective_std,
            m.final_feasibility_mean,
            100.0 * m.final_sparsity_mean
        );
    }
}

fn run(cfg: &ExperimentConfig, compare: bool) -> sadmm::Result<Outcome> {
    let exp = sadmm::harness::run_experiment(cfg)?;
    let dir = out_dir(cfg)?;
    exp.write(&dir)?;
    print_summary(&exp);
    if compare {
        let by_calls: Vec<Series> = cfg
            .methods
            .iter()
            .filter_map(|&m| {
                let curve = exp.mean_curves().into_iter().find(|s| s.label == m.name())?;
                let first = exp.completed(m).into_iter().next()?;
                let pts = first.rows.iter().zip(&curve.points).map(|(r, p)| (r.sfo_calls as f64, p.1)).collect();
                Some(Series { label: curve.label, points: pts })
            })
            .collect();
        emit_svg(
            &by_calls,
            &ChartSpec {
                title: "mean empirical objective".into(),
                x_label: "stochastic oracle calls".into(),
                log_x: true,
            },
            &dir.join("objective_vs_sfo.svg"),
        )?;
        let mut ranked: Vec<(Method, f64)> =
            cfg.methods.iter().filter_map(|&m| exp.mean_final_objective(m).map(|v| (m, v))).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let order: Vec<&str> = ranked.iter().map(|r| r.0.name()).collect();
        println!("ranking by final mean objective: {}", order.join(" < "));
    }
    println!("artifacts written to {}", dir.display());
    Ok(Outcome::Pass)
}

fn envelope_cmd(cfg: &ExperimentConfig) -> sadmm::Result<Outcome> {
    let exp = sadmm::harness::run_experiment(cfg)?;
    let dir = out_dir(cfg)?;
    exp.write(&dir)?;
    let mut series = Vec::new();
    let mut text = String::from("method,k,min,mean,max\n");
    for &m in &cfg.methods {
        let env = envelope(&exp.completed(m))?;
        for r in &env.rows {
            text.push_str(&format!("{},{},{},{},{}\n", m.name(), r.k, r.min, r.mean, r.max));
        }
        for (tag, f) in [("min", 0), ("mean", 1), ("max", 2)] {
            let pts = env.rows.iter().map(|r| (r.k as f64, [r.min, r.mean, r.max][f])).collect();
            series.push(Series { label: format!("{} {tag}", m.name()), points: pts });
        }
        if let (Some(first), Some(last)) = (env.rows.first(), env.rows.last()) {
            println!(
                "{}: width {:.4e} at k={} -> {:.4e} at k={}",
                m.name(),
                first.max - first.min,
                first.k,
                last.max - last.min,
                last.k
            );
        }
    }
    let path = dir.join("envelope.csv");
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    emit_svg(
        &series,
        &ChartSpec { title: "objective envelope over runs".into(), x_label: "k".into(), log_x: false },
        &dir.join("envelope.svg"),
    )?;
    Ok(Outcome::Pass)
}

fn rate_cmd(cfg: &ExperimentConfig) -> sadmm::Result<Outcome> {
    let (exp, report) = rate_study(cfg)?;
    let dir = out_dir(cfg)?;
    emit_csv(&exp.rows(), &dir.join("records.csv"))?;
    emit_json(&report, &dir.join("rate.json"))?;
    let pts = |v: &[(usize, f64)]| v.iter().map(|&(k, y)| (k as f64, y)).collect();
    emit_svg(
        &[
            Series { label: "|objective gap|".into(), points: pts(&report.gap) },
            Series { label: "||u - z||".into(), points: pts(&report.feasibility) },
        ],
        &ChartSpec { title: "ADMM convergence".into(), x_label: "k".into(), log_x: true },
        &dir.join("rate.svg"),
    )?;
    println!("optimum {:.12e}", report.optimum);
    println!(
        "fit over k in [{}, {}]: gap slope {:.3}, feasibility slope {:.3}",
        report.fit_range.0, report.fit_range.1, report.gap_slope, report.feasibility_slope
    );
    Ok(Outcome::Pass)
}

fn write_report<T: serde::Serialize>(cfg: &ExperimentConfig, name: &str, value: &T) -> sadmm::Result<()> {
    if cfg.out_dir.is_some() {
        emit_json(value, &out_dir(cfg)?.join(name))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> sadmm::Result<Outcome> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Run => run(&cfg, false),
        Command::Compare => run(&cfg, true),
        Command::SparsityTable => {
            let table = sparsity_table(&cfg, &cfg.sparsity_betas)?;
            print!("{}", table.to_text());
            if !table.is_monotone() {
                println!("note: nonzero fraction is not monotone in beta");
            }
            emit_json(&table, &out_dir(&cfg)?.join("sparsity.json"))?;
            Ok(Outcome::Pass)
        }
        Command::Envelope => envelope_cmd(&cfg),
        Command::Rate => rate_cmd(&cfg),
        Command::GradCheck => {
            let report = grad_check(&cfg)?;
            for e in &report.entries {
                println!(
                    "xi={:?} d#{}: analytic {:.10e} fd {:.10e} rel {:.2e}",
                    e.xi, e.direction, e.analytic, e.finite_difference, e.rel_error
                );
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
            write_report(&cfg, "grad_check.json", &report)?;
            Ok(if report.passed { Outcome::Pass } else { Outcome::CheckFailed })
        }
        Command::FemVerify => {
            let report = fem_verify(&[0.125, 0.0625, 0.03125])?;
            for (i, h) in report.mesh_sizes.iter().enumerate() {
                print!("h={h}: L2 error {:.6e}", report.errors[i]);
                if i > 0 {
                    print!("  ratio {:.4}  order {:.4}", report.ratios[i - 1], report.orders[i - 1]);
                }
                println!();
            }
            write_report(&cfg, "fem_verify.json", &report)?;
            Ok(if report.passed { Outcome::Pass } else { Outcome::CheckFailed })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ (Error::Usage(_) | Error::Json { .. })) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e @ Error::Io { .. }) if is_config_path(&cli, &e) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn is_config_path(cli: &Cli, e: &Error) -> bool {
    matches!((e, &cli.common.config), (Error::Io { path, .. }, Some(c)) if Path::new(path) == c.as_path())
}
