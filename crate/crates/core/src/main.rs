use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cliquefit::capacity::DEFAULT_MAX_CELLS;
use cliquefit::combine::extract_graph;
use cliquefit::decompose::decompose;
use cliquefit::eval::{empirical_kl_model, roc_for_graph, roc_sweep};
use cliquefit::forest::ForestConfig;
use cliquefit::importance::importance_matrix;
use cliquefit::io::{self, PlanDocument};
use cliquefit::junction::JunctionTree;
use cliquefit::pipeline::{fit_on_plan, FitOptions, Method};
use cliquefit::schema::{Dataset, VariableSchema};
use cliquefit::select::GroupLassoOptions;
use cliquefit::simulate::{random_decomposable_model, SimulationConfig};
use cliquefit::Error;

const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "cliquefit", version, about = "Sparse log-linear models for large contingency tables by recursive decomposition")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice; required by stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Node-wise forest importance: dataset to M, R and R-tilde CSV.
    Importance {
        #[command(flatten)]
        input: DataArgs,
        #[command(flatten)]
        forest: ForestArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Thinning and clique split-off: R-tilde and smax to plan JSON.
    Decompose {
        #[arg(long)]
        importance: PathBuf,
        #[arg(long, default_value_t = 10)]
        smax: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Local model selection and combination; without --plan the whole
    /// pipeline runs.
    Fit {
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        smax: usize,
        /// dgl, dgl-cv, dgl-f, dsf, dsf-aic or df.
        #[arg(long)]
        method: Method,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 30)]
        grid_points: usize,
        #[arg(long, default_value_t = 1e-3)]
        grid_ratio: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iter: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_CELLS)]
        max_cells: usize,
        #[command(flatten)]
        forest: ForestArgs,
        /// Also write the importance CSV of an end-to-end run.
        #[arg(long)]
        importance_out: Option<PathBuf>,
        /// Also write the plan JSON of an end-to-end run.
        #[arg(long)]
        plan_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draws a dataset from a model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Probabilities of the cells listed in a CSV (full cells or a margin).
    Probs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_CELLS)]
        max_cells: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROC of a model (or a fixed estimated graph) against a true edge list.
    EvalRoc {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, required_unless_present = "graph", conflicts_with = "graph")]
        model: Option<PathBuf>,
        /// Estimated edge list; needs --schema.
        #[arg(long, requires = "schema")]
        graph: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Reference sample; adds the empirical KL to the report.
        #[arg(long, requires = "model")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Monte-Carlo cross-entropy of a model on a reference sample.
    EvalKl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random decomposable pairwise model, its graph and a sample from it.
    Simulate {
        #[arg(long, default_value_t = 15)]
        vars: usize,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 3)]
        max_clique: usize,
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        graph_out: Option<PathBuf>,
        #[arg(long)]
        data_out: Option<PathBuf>,
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sidecar schema (`name,levels` per line).
    #[arg(long)]
    schema: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> cliquefit::Result<Dataset> {
        let schema = self.schema.as_deref().map(io::read_schema).transpose()?;
        io::read_dataset(&self.data, schema.as_ref())
    }
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Bootstrap rows per tree (default: n).
    #[arg(long)]
    sample_size: Option<usize>,
    /// Out-of-bag rows kept per tree for importance.
    #[arg(long)]
    max_oob: Option<usize>,
}

impl ForestArgs {
    fn config(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.trees,
            mtry: self.mtry,
            min_leaf: self.min_leaf,
            max_depth: self.max_depth,
            sample_size: self.sample_size,
            max_oob: self.max_oob,
            seed,
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn need_seed(seed: Option<u64>, what: &str) -> std::result::Result<u64, Failure> {
    seed.ok_or_else(|| Failure::Usage(format!("{what} is stochastic and needs --seed")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Importance { input, forest, out } => {
            let seed = need_seed(seed, "importance")?;
            let data = input.load()?;
            let imp = importance_matrix(&data, &forest.config(seed))?;
            io::write_importance(&out, data.schema().names(), &imp)?;
        }
        Command::Decompose { importance, smax, out } => {
            let (variables, imp) = io::read_importance(&importance)?;
            let plan = decompose(&imp.rtilde, smax)?;
            io::write_json(&out, &PlanDocument { variables, plan })?;
        }
        Command::Fit {
            input,
            plan,
            smax,
            method,
            lambda,
            s,
            folds,
            grid_points,
            grid_ratio,
            tol,
            max_iter,
            max_cells,
            forest,
            importance_out,
            plan_out,
            out,
        } => {
            let stochastic = plan.is_none() || matches!(method, Method::DglCv | Method::DglF);
            let seed = if stochastic { need_seed(seed, "this fit")? } else { seed.unwrap_or(0) };
            match method {
                Method::Dgl if lambda.is_none() => return Err(Failure::Usage("--method dgl needs --lambda".into())),
                Method::Dsf if s.is_none() => return Err(Failure::Usage("--method dsf needs --s".into())),
                _ => {}
            }
            let data = input.load()?;
            let opts = FitOptions {
                lambda,
                s,
                folds,
                grid_points,
                grid_ratio,
                seed,
                max_cells,
                solver: GroupLassoOptions {
                    tol,
                    max_iter,
                    strict: true,
                },
                ..FitOptions::new(method)
            };
            let plan = match plan {
                Some(path) => {
                    let doc: PlanDocument = io::read_json(&path)?;
                    if doc.variables != data.schema().names() {
                        return Err(Error::Validation(format!(
                            "plan variables {:?} do not match dataset columns {:?}",
                            doc.variables,
                            data.schema().names()
                        ))
                        .into());
                    }
                    doc.plan
                }
                None => {
                    let imp = importance_matrix(&data, &forest.config(seed))?;
                    if let Some(p) = &importance_out {
                        io::write_importance(p, data.schema().names(), &imp)?;
                    }
                    let plan = decompose(&imp.rtilde, smax)?;
                    if let Some(p) = &plan_out {
                        io::write_json(
                            p,
                            &PlanDocument {
                                variables: data.schema().names().to_vec(),
                                plan: plan.clone(),
                            },
                        )?;
                    }
                    plan
                }
            };
            let fitted = fit_on_plan(&data, &plan, &opts)?;
            io::write_json(&out, &fitted)?;
        }
        Command::Sample { model, n, out, schema_out } => {
            let seed = need_seed(seed, "sample")?;
            let doc = io::read_model(&model)?;
            let data = JunctionTree::calibrate(doc.model(), doc.decomposition())?.sample(n, seed);
            io::write_dataset(&out, &data)?;
            if let Some(p) = schema_out {
                io::write_schema(&p, data.schema())?;
            }
        }
        Command::Probs { model, cells, max_cells, out } => {
            let doc = io::read_model(&model)?;
            let schema = doc.model().schema();
            let (vars, cells) = io::read_cells(&cells, schema)?;
            let tree = JunctionTree::calibrate(doc.model(), doc.decomposition())?;
            let probs = tree.marginal_query(&vars, &cells, max_cells)?;
            io::write_probabilities(&out, schema, &vars, &cells, &probs)?;
        }
        Command::EvalRoc {
            truth,
            model,
            graph,
            schema,
            reference,
            out,
            report,
        } => {
            let rep = match (model, graph) {
                (Some(m), _) => {
                    let doc = io::read_model(&m)?;
                    let schema = doc.model().schema();
                    let truth = io::read_edge_list(&truth, schema)?;
                    let mut rep = roc_sweep(doc.model(), &truth)?;
                    if let Some(r) = reference {
                        let sample = io::read_dataset(&r, Some(schema))?;
                        rep.kl = Some(empirical_kl_model(&sample, doc.model(), doc.decomposition())?.value);
                    }
                    log::info!("estimated graph has {} edges", extract_graph(doc.model()).num_edges());
                    rep
                }
                (None, Some(g)) => {
                    let schema = load_schema(schema.as_deref())?;
                    let truth = io::read_edge_list(&truth, &schema)?;
                    roc_for_graph(&io::read_edge_list(&g, &schema)?, &truth)?
                }
                (None, None) => return Err(Failure::Usage("eval-roc needs --model or --graph".into())),
            };
            io::write_roc(&out, &rep.roc)?;
            if let Some(p) = report {
                io::write_json(&p, &rep)?;
            }
        }
        Command::EvalKl { model, reference, out } => {
            let doc = io::read_model(&model)?;
            let sample = io::read_dataset(&reference, Some(doc.model().schema()))?;
            let kl = empirical_kl_model(&sample, doc.model(), doc.decomposition())?;
            println!("{}", kl.value);
            if let Some(p) = out {
                io::write_json(&p, &kl)?;
            }
        }
        Command::Simulate {
            vars,
            levels,
            max_clique,
            n,
            model_out,
            graph_out,
            data_out,
            schema_out,
        } => {
            let seed = need_seed(seed, "simulate")?;
            let sim = random_decomposable_model(&SimulationConfig {
                num_vars: vars,
                levels,
                max_clique,
                seed,
                ..SimulationConfig::default()
            })?;
            io::write_json(&model_out, &sim)?;
            let schema = sim.model.schema();
            if let Some(p) = graph_out {
                io::write_edge_list(&p, &sim.graph(), schema)?;
            }
            if let Some(p) = schema_out {
                io::write_schema(&p, schema)?;
            }
            if let Some(p) = data_out {
                // a separate stream from the one that drew the model
                io::write_dataset(&p, &sim.sample(n, seed.wrapping_add(1))?)?;
            }
        }
    }
    Ok(())
}

fn load_schema(path: Option<&Path>) -> std::result::Result<VariableSchema, Failure> {
    match path {
        Some(p) => Ok(io::read_schema(p)?),
        None => Err(Failure::Usage("--schema is required here".into())),
    }
}
