//! `vstpr`: batch runs and live-session control through the vstpr service.
//!
//! Without `--server` an embedded service is started on a loopback port for
//! the duration of the command, so batch runs and remote runs take the same
//! path.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vstpr_client::{Client, Error};
use vstpr_core::nulling::NullOptions;
use vstpr_protocol::{ConfigSource, CurrentSweep, Manifest, NullRequest, Operation, RunRequest};
use vstpr_server::Session;

#[derive(Parser)]
#[command(name = "vstpr", version, about = "Raman stripe magnetometry: simulate, fit, scan and null")]
struct Cli {
    /// Use a running service instead of an embedded one.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file in the `key = value` format.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    atoms: Option<usize>,
    /// Coil currents in A.
    #[arg(long, value_name = "IX,IY,IZ", value_parser = currents)]
    currents: Option<[f64; 3]>,
    /// Extra config assignments, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = assignment)]
    set: Vec<(String, String)>,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// x, y or z.
    #[arg(long, default_value = "z")]
    axis: String,
    /// A
    #[arg(long)]
    scan_from: Option<f64>,
    /// A
    #[arg(long)]
    scan_to: Option<f64>,
    #[arg(long, default_value_t = 10)]
    scan_steps: usize,
}

impl SweepArgs {
    fn sweep(&self) -> Result<Option<CurrentSweep>, String> {
        match (self.scan_from, self.scan_to) {
            (Some(from), Some(to)) => Ok(Some(CurrentSweep {
                axis: self.axis.clone(),
                from,
                to,
                steps: self.scan_steps,
            })),
            (None, None) => Ok(None),
            _ => Err("--scan-from and --scan-to go together".into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pulse-on, pulse-off and difference frames plus cross-sections.
    Simulate(RunArgs),
    /// Fit difference frames (PGM + sidecar) from a file or directory.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Frames and fits over a current scan, then the hyperbola fit.
    Scan {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Stripe contrast against T_r/T_i at zero field.
    TimingSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5,0.6,0.7")]
        tr_list: Vec<f64>,
        /// Pulse length, s.
        #[arg(long)]
        duration: Option<f64>,
        /// Also fit the two-channel profile at this ratio.
        #[arg(long)]
        fit_ratio: Option<f64>,
    },
    /// Sideband run fixing the pixel-to-velocity mapping.
    Calibrate(RunArgs),
    /// Faraday trace at the configured field, or a scan with --scan-from/--scan-to.
    Faraday {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Automated nulling from the configured currents.
    Null {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sweeps: Option<usize>,
        /// Half-width of the first line search, A.
        #[arg(long)]
        bracket: Option<f64>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long)]
        atoms: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Steer the live session of a running service.
    #[command(subcommand)]
    Session(SessionCommand),
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Print the session summary as JSON.
    State,
    /// Set coil currents, A.
    Currents {
        #[arg(value_parser = currents)]
        currents: [f64; 3],
    },
    /// Null in the background and wait for the report.
    Null,
}

fn currents(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated currents".to_string())
}

fn assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    Ok((k.trim().into(), v.trim().into()))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Client(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Client(e)
    }
}

impl RunArgs {
    fn config_source(&self) -> Result<ConfigSource, Failure> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(n) = self.atoms {
            overrides.push(("ensemble.atom_count".into(), n.to_string()));
        }
        if let Some(c) = self.currents {
            for (axis, i) in ["x", "y", "z"].iter().zip(c) {
                overrides.push((format!("coils.{axis}.current"), i.to_string()));
            }
        }
        overrides.extend(self.set.iter().cloned());
        Ok(ConfigSource {
            text,
            name: self.config.as_ref().map(|p| p.display().to_string()),
            overrides,
        })
    }

    fn request(&self, operation: Operation) -> Result<RunRequest, Failure> {
        Ok(RunRequest {
            config: self.config_source()?,
            out: absolute(&self.out),
            operation,
        })
    }
}

async fn connect(server: Option<&str>) -> Result<Client, Failure> {
    if let Some(url) = server {
        return Ok(Client::new(url)?);
    }
    // batch runs carry their own config; the session is idle
    let session = Session::new(Default::default()).map_err(|e| Failure::Usage(e.to_string()))?;
    let addr = vstpr_server::spawn(([127, 0, 0, 1], 0).into(), session)
        .await
        .map_err(|e| Failure::Usage(format!("cannot start the embedded service: {e}")))?;
    Ok(Client::new(&format!("http://{addr}"))?)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn report(m: &Manifest, out: &Path) -> ExitCode {
    println!("{}: {}", m.operation, m.summary);
    println!("result: {}", out.join(&m.result).display());
    println!("files: {}", m.files.len());
    if m.fit_failures > 0 {
        eprintln!("{} fit(s) failed", m.fit_failures);
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

async fn batch(server: Option<&str>, run: &RunArgs, op: Operation) -> Result<ExitCode, Failure> {
    let req = run.request(op)?;
    let client = connect(server).await?;
    let manifest = client.run(&req).await?;
    Ok(report(&manifest, &req.out))
}

async fn serve(addr: SocketAddr, src: ConfigSource) -> Result<ExitCode, Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let config = vstpr_server::run::build_config(&src).map_err(|e| Failure::Usage(e.to_string()))?;
    let session = Session::new(config).map_err(|e| Failure::Usage(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Failure::Usage(format!("{addr}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Failure::Usage(e.to_string()))?);
    vstpr_server::serve(listener, session).await.map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(ExitCode::SUCCESS)
}

async fn session(server: Option<&str>, cmd: SessionCommand) -> Result<ExitCode, Failure> {
    let Some(url) = server else {
        return Err(Failure::Usage("session commands need --server".into()));
    };
    let client = Client::new(url)?;
    match cmd {
        SessionCommand::State => print_json(&client.state().await?),
        SessionCommand::Currents { currents } => {
            let r = client.put_currents(currents).await?;
            print_json(&r);
            if let Ok(a) = client.analysis().await {
                println!("{}", vstpr_server::run::describe(&a.fit));
            }
        }
        SessionCommand::Null => {
            client.null(&NullRequest::default()).await?;
            loop {
                tokio::time::sleep(Duration::from_millis(250)).await;
                let s = client.state().await?;
                if !s.nulling {
                    if let Some(e) = s.last_error {
                        return Err(Failure::Usage(format!("nulling failed: {e}")));
                    }
                    break;
                }
            }
            print_json(&client.last_null().await?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    let server = cli.server.as_deref();
    match cli.command {
        Command::Simulate(run) => batch(server, &run, Operation::Simulate).await,
        Command::Fit { run, input } => batch(server, &run, Operation::Fit { input: absolute(&input) }).await,
        Command::Scan { run, sweep } => {
            let sweep = sweep.sweep().map_err(Failure::Usage)?.ok_or_else(|| {
                Failure::Usage("scan needs --scan-from and --scan-to".into())
            })?;
            batch(server, &run, Operation::Scan { sweep }).await
        }
        Command::TimingSweep {
            run,
            tr_list,
            duration,
            fit_ratio,
        } => {
            let op = Operation::TimingSweep {
                ratios: tr_list,
                duration,
                fit_ratio,
            };
            batch(server, &run, op).await
        }
        Command::Calibrate(run) => batch(server, &run, Operation::Calibrate).await,
        Command::Faraday { run, sweep } => {
            let sweep = sweep.sweep().map_err(Failure::Usage)?;
            batch(server, &run, Operation::Faraday { sweep }).await
        }
        Command::Null { run, sweeps, bracket } => {
            let options = (sweeps.is_some() || bracket.is_some()).then(|| {
                let d = NullOptions::default();
                NullOptions {
                    sweeps: sweeps.unwrap_or(d.sweeps),
                    bracket: bracket.unwrap_or(d.bracket),
                    ..d
                }
            });
            batch(server, &run, Operation::Null { options }).await
        }
        Command::Serve {
            addr,
            config,
            atoms,
            seed,
        } => {
            let args = RunArgs {
                config,
                seed,
                atoms,
                currents: None,
                set: Vec::new(),
                out: PathBuf::new(),
            };
            serve(addr, args.config_source()?).await
        }
        Command::Session(cmd) => session(server, cmd).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Client(Error::Api { status, body })) => {
            match body.field {
                Some(f) => eprintln!("error: {f}: {} ({status})", body.error),
                None => eprintln!("error: {} ({status})", body.error),
            }
            ExitCode::from(2)
        }
        Err(Failure::Client(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
