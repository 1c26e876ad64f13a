use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use vpfv::config::RunConfig;
use vpfv::dispersion::{dgh_dispersion, landau_rate, lhdi_dispersion, lhdi_window, two_stream_dispersion, ComplexRoot, DispersionError};
use vpfv::partition::{comm_volumes, ghost_fraction, neighbor_pairs, plan_partitions, Strategy};
use vpfv::problems::{DghParams, LhdiParams};
use vpfv::run::{convergence, output_dir, run, OUTPUT_DIR_ENV};
use vpfv::stability::{approx_envelope, enclosure_by_approx, first_order_rk4_cfl, first_order_symbol, fourth_order_rk4_cfl, true_envelope_2d, upwind_symbol, SymbolCurve};

#[derive(Parser)]
#[command(name = "vpfv", version, about = "Fourth-order finite-volume Vlasov-Poisson solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and write diagnostics.csv (and snapshots).
    Run { config: PathBuf },
    /// Self-convergence study over successive grid doublings.
    Convergence {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// RK4 CFL table and sampled symbol/envelope curves (CSV).
    Stability {
        /// Directional weights for the envelope curves.
        #[arg(long, num_args = 2, default_values_t = [1.0, 1.0])]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Output directory (the environment override still wins).
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Rank map, neighbor counts and communication volumes of a configuration.
    Plan { config: PathBuf },
    /// Reference growth rates from the linear dispersion relations.
    Dispersion {
        #[command(subcommand)]
        relation: Relation,
    },
}

#[derive(Subcommand)]
enum Relation {
    TwoStream {
        #[arg(long, num_args = 1.., required = true)]
        k: Vec<f64>,
        #[arg(long)]
        vt: f64,
        #[arg(long, default_value_t = 1.0)]
        u: f64,
    },
    Landau {
        #[arg(long, num_args = 1.., default_values_t = [0.5])]
        k: Vec<f64>,
    },
    Dgh {
        /// Normalized wavenumber k v_perp0 / |Omega_e|.
        #[arg(long, num_args = 1.., default_values_t = [3.2])]
        k_bar: Vec<f64>,
    },
    Lhdi {
        #[arg(long, default_value_t = 25.0)]
        mass_ratio: f64,
        #[arg(long, num_args = 1.., required = true)]
        k: Vec<f64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn load(path: &PathBuf) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(runtime)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg);
            match run(&cfg, &dir) {
                Ok(s) => {
                    let last = s.rows.last().expect("initial row");
                    let first = &s.rows[0];
                    let drift = last.mass.iter().zip(&first.mass).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
                    println!("steps {}  t {:.6}  relative mass drift {:.3e}  total energy {:.6e}", s.steps, s.t, drift, last.total_energy);
                    println!("diagnostics: {}", s.csv.display());
                    for p in &s.snapshots {
                        println!("snapshot: {}", p.display());
                    }
                    Ok(())
                }
                Err(e) => Err(runtime(e)),
            }
        }
        Command::Convergence { config, levels } => {
            let cfg = load(&config)?;
            let study = convergence(&cfg, levels).map_err(runtime)?;
            let dir = output_dir(&cfg);
            fs::create_dir_all(&dir).map_err(runtime)?;
            let mut csv = String::from("cells,error\n");
            for l in &study.levels {
                let cells = l.cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x");
                csv.push_str(&format!("{cells},{}\n", l.error.map_or(String::new(), |e| format!("{e:e}"))));
            }
            fs::write(dir.join("convergence.csv"), csv).map_err(runtime)?;
            print_json(&study)
        }
        Command::Stability { weights, samples, out } => {
            let dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or(out);
            fs::create_dir_all(&dir).map_err(runtime)?;
            let (s4, s4_stage) = fourth_order_rk4_cfl().map_err(runtime)?;
            let (s1, s1_stage) = first_order_rk4_cfl().map_err(runtime)?;
            let mut table = String::from("method,stages,sigma,sigma_eff\n");
            table.push_str(&format!("fourth-order upwind + RK4,4,{s4},{s4_stage}\n"));
            table.push_str(&format!("first-order upwind + RK4,4,{s1},{s1_stage}\n"));
            fs::write(dir.join("cfl_table.csv"), &table).map_err(runtime)?;

            let env = true_envelope_2d(weights[0], weights[1], samples).map_err(runtime)?;
            let curves = [
                ("fourth_order_symbol", SymbolCurve::sample(upwind_symbol, samples)),
                ("first_order_symbol", SymbolCurve::sample(first_order_symbol, samples)),
                ("approx_envelope", approx_envelope(&weights, samples)),
                ("true_envelope", env.accepted.clone()),
                ("rejected_branch", env.rejected.clone()),
            ];
            let mut csv = String::from("curve,xi1,xi2,re,im\n");
            for (name, c) in &curves {
                for (z, xi) in c.points.iter().zip(&c.params) {
                    csv.push_str(&format!("{name},{},{},{},{}\n", xi[0], xi[1], z.re, z.im));
                }
            }
            fs::write(dir.join("stability_curves.csv"), csv).map_err(runtime)?;
            print!("{table}");
            println!(
                "envelope weights {weights:?}: true-in-approx margin {:.3e} (relative to diameter), rejected-in-accepted margin {:.3e}",
                enclosure_by_approx(&env.accepted, &weights),
                env.enclosure_margin
            );
            Ok(())
        }
        Command::Plan { config } => {
            let cfg = load(&config)?;
            let setup = cfg.setup().map_err(|e| Failure::Usage(e.to_string()))?;
            let counts = vec![cfg.partition.counts.clone(); setup.grids.len()];
            let plan = plan_partitions(&setup.grids, &counts, cfg.partition.ranks, cfg.partition.species_per_rank, Strategy::Vp).map_err(runtime)?;
            let (d, v) = (plan.d, plan.v);
            let local = plan.boxes.iter().map(|b| b.n.iter().copied().min().unwrap_or(0)).min().unwrap_or(0);
            let fractions = if local >= 6 {
                json!({
                    "n_local": local,
                    "fvm": ghost_fraction(local, d, v, Strategy::Fvm).map_err(runtime)?,
                    "vp": ghost_fraction(local, d, v, Strategy::Vp).map_err(runtime)?,
                })
            } else {
                json!(null)
            };
            let ranks: Vec<_> = plan.boxes.iter().map(|b| json!({"species": b.species, "rank": b.rank, "coords": b.coords, "offset": b.offset, "n": b.n})).collect();
            print_json(&json!({
                "ranks": plan.ranks,
                "boxes": ranks,
                "neighbor_pairs": neighbor_pairs(d, v),
                "volumes": comm_volumes(&plan).map_err(runtime)?,
                "ghost_fraction": fractions,
            }))
        }
        Command::Dispersion { relation } => {
            let roots: Vec<(f64, Result<ComplexRoot, DispersionError>)> = match relation {
                Relation::TwoStream { k, vt, u } => k.iter().map(|&k| (k, two_stream_dispersion(k, vt, u))).collect(),
                Relation::Landau { k } => k.iter().map(|&k| (k, landau_rate(k))).collect(),
                Relation::Dgh { k_bar } => k_bar
                    .iter()
                    .map(|&kb| {
                        let mut p = DghParams::default();
                        p.k = p.k_from_normalized(kb);
                        (p.k, dgh_dispersion(&p))
                    })
                    .collect(),
                Relation::Lhdi { mass_ratio, k } => {
                    let c = LhdiParams::for_mass_ratio(mass_ratio).closure().map_err(runtime)?;
                    k.iter().map(|&k| (k, lhdi_dispersion(&c, k, &lhdi_window(&c, k)))).collect()
                }
            };
            println!("k,re,im,residual,iterations,guess_re,guess_im");
            let mut failed = Vec::new();
            for (k, r) in roots {
                match r {
                    Ok(r) => println!("{k},{},{},{:e},{},{},{}", r.omega.re, r.omega.im, r.residual, r.iterations, r.guess.re, r.guess.im),
                    Err(e) => failed.push(format!("k = {k}: {e}")),
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(failed.join("; ")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
