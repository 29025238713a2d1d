//! Command-line front end: site collection, central curation, the hospital simulator and the
//! admin API, all driven from one TOML file plus environment secrets.

pub mod config;

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use imgcollect_api::accounts::{AccountStore, Role};
use imgcollect_api::AppState;
use imgcollect_core::collector::{Collector, SelectionCriteria};
use imgcollect_core::curation::{Curator, ExportCriteria};
use imgcollect_core::national_id::validate_national_id;
use imgcollect_core::sim::{CorpusSpec, SimServer, Simulator};
use imgcollect_core::vault::{OptOutSource, VaultSecrets};
use serde::Serialize;

use config::{read_file, Config};

/// Environment prefix for the central (curation) secrets.
pub const CENTRAL_ENV_PREFIX: &str = "IMGCOLLECT_CENTRAL";
/// Where `admin-api add-user` looks for the new password before falling back to stdin.
pub const NEW_PASSWORD_ENV: &str = "IMGCOLLECT_NEW_PASSWORD";

#[derive(Debug, Parser)]
#[command(name = "imgcollect", version, about = "Imaging research data collection and curation")]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, short, env = "IMGCOLLECT_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Site collection jobs
    #[command(subcommand)]
    Collect(CollectCmd),
    /// Central curation and licensed exports
    #[command(subcommand)]
    Curate(CurateCmd),
    /// Runs the simulated PACS and clinical system until interrupted
    PacsSim(SimArgs),
    /// Admin web API and its accounts
    #[command(subcommand)]
    AdminApi(ApiCmd),
}

#[derive(Debug, Subcommand)]
pub enum CollectCmd {
    /// One collection cycle, or one every SECS seconds with --every
    Run {
        /// Selection criteria file (TOML or JSON)
        #[arg(long)]
        criteria: Option<PathBuf>,
        #[arg(long, value_name = "SECS")]
        every: Option<u64>,
    },
    /// Pushes staged studies to the endpoint
    Transfer,
    /// Re-reads outcomes for collected episodes and links new studies
    Refresh,
    /// Ingests a directory of files described by a CSV manifest
    Import {
        dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Opts a client out and deletes everything held for them
    Optout {
        #[arg(required_unless_present = "list")]
        national_id: Option<String>,
        /// Newline-delimited national opt-out list
        #[arg(long, conflicts_with = "national_id")]
        list: Option<PathBuf>,
    },
    /// Counts and last-cycle summary
    Status,
}

#[derive(Debug, Subcommand)]
pub enum CurateCmd {
    /// Runs the curation pipeline over the inbox
    Run {
        /// Batch id; generated from the clock when omitted
        batch: Option<String>,
    },
    /// Copies a licensed subset of published data
    Export {
        /// Export criteria file (TOML or JSON); everything when omitted
        #[arg(long)]
        criteria: Option<PathBuf>,
        #[arg(long)]
        dest: PathBuf,
        #[arg(long)]
        licensee: String,
    },
    /// Registers a licensee so exports to it are allowed
    AddLicensee { name: String },
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Corpus spec file (TOML or JSON); overrides [sim.corpus]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pacs_bind: Option<String>,
    #[arg(long)]
    pub clinical_bind: Option<String>,
    /// Retrieve destination as AE=HOST:PORT; repeatable
    #[arg(long = "destination", value_name = "AE=HOST:PORT")]
    pub destinations: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ApiCmd {
    /// Serves the admin API for the configured site
    Serve {
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
    /// Creates an account. The password is read from IMGCOLLECT_NEW_PASSWORD or stdin.
    AddUser {
        username: String,
        #[arg(long, value_enum, default_value_t = RoleArg::Uploader)]
        role: RoleArg,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Admin,
    Uploader,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Admin => Role::Admin,
            RoleArg::Uploader => Role::Uploader,
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn open_collector(cfg: &Config) -> anyhow::Result<Collector> {
    let secrets = VaultSecrets::from_env().context("site secrets")?;
    Collector::open(cfg.collector.clone(), secrets).context("opening the site")
}

fn open_curator(cfg: &Config) -> anyhow::Result<Curator> {
    let secrets = VaultSecrets::from_env_prefixed(CENTRAL_ENV_PREFIX).context("central secrets")?;
    Curator::open(cfg.curation.clone(), secrets).context("opening the central store")
}

/// Splits `AE=HOST:PORT`.
pub fn parse_destination(s: &str) -> anyhow::Result<(String, SocketAddr)> {
    let (ae, addr) = s.split_once('=').ok_or_else(|| anyhow!("{s:?}: expected AE=HOST:PORT"))?;
    if ae.is_empty() {
        bail!("{s:?}: empty AE title");
    }
    let addr = addr.parse().with_context(|| format!("{s:?}: bad address"))?;
    Ok((ae.to_string(), addr))
}

/// Runs one command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Collect(cmd) => collect(&cfg, cmd, out),
        Command::Curate(cmd) => curate(&cfg, cmd, out),
        Command::PacsSim(args) => pacs_sim(&cfg, args, out),
        Command::AdminApi(cmd) => admin_api(&cfg, cmd, out),
    }
}

fn collect(cfg: &Config, cmd: CollectCmd, out: &mut dyn Write) -> anyhow::Result<()> {
    let c = open_collector(cfg)?;
    match cmd {
        CollectCmd::Run { criteria, every } => {
            let criteria: SelectionCriteria = match criteria {
                Some(p) => read_file(&p)?,
                None => SelectionCriteria::default(),
            };
            let Some(secs) = every else {
                return print_json(out, &c.run_collection_cycle(&criteria)?);
            };
            loop {
                match c.run_collection_cycle(&criteria) {
                    Ok(r) => print_json(out, &r)?,
                    Err(e) => tracing::warn!(error = %e, "collection cycle did not run"),
                }
                std::thread::sleep(Duration::from_secs(secs.max(1)));
            }
        }
        CollectCmd::Transfer => print_json(out, &c.transfer_nightly()?),
        CollectCmd::Refresh => print_json(out, &c.refresh_ground_truth()?),
        CollectCmd::Import { dir, manifest } => print_json(out, &c.import_directory(&dir, &manifest)?),
        CollectCmd::Optout { national_id, list } => {
            let (ids, source) = match (national_id, list) {
                (Some(id), _) => (vec![id], OptOutSource::LocalRequest),
                (None, Some(path)) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let ids = text
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(str::to_string)
                        .collect();
                    (ids, OptOutSource::NationalList)
                }
                (None, None) => bail!("give a national id or --list"),
            };
            let mut reports = Vec::new();
            let mut invalid = 0;
            for id in ids {
                if let Err(reason) = validate_national_id(&id) {
                    tracing::warn!(?reason, "skipping invalid national id in opt-out request");
                    invalid += 1;
                    continue;
                }
                reports.push(c.opt_out(&id, source)?);
            }
            print_json(out, &serde_json::json!({ "applied": reports, "invalid": invalid }))?;
            if invalid > 0 && reports.is_empty() {
                bail!("no valid national id given");
            }
            Ok(())
        }
        CollectCmd::Status => print_json(out, &c.status()?),
    }
}

fn curate(cfg: &Config, cmd: CurateCmd, out: &mut dyn Write) -> anyhow::Result<()> {
    let cur = open_curator(cfg)?;
    match cmd {
        CurateCmd::Run { batch } => {
            let m = match batch {
                Some(id) => cur.run_batch(&id)?,
                None => cur.run_pipeline()?,
            };
            print_json(out, &m)
        }
        CurateCmd::Export { criteria, dest, licensee } => {
            let criteria: ExportCriteria = match criteria {
                Some(p) => read_file(&p)?,
                None => ExportCriteria::default(),
            };
            print_json(out, &cur.export_subset(&criteria, &dest, &licensee)?)
        }
        CurateCmd::AddLicensee { name } => print_json(out, &cur.register_licensee(&name)?),
    }
}

fn pacs_sim(cfg: &Config, args: SimArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut spec: CorpusSpec = match &args.spec {
        Some(p) => read_file(p)?,
        None => cfg.sim.corpus.clone(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let mut destinations: Vec<(String, SocketAddr)> = cfg.sim.destinations.clone().into_iter().collect();
    for d in &args.destinations {
        destinations.push(parse_destination(d)?);
    }
    let sim = Arc::new(Simulator::new(spec));
    let pacs_bind = args.pacs_bind.unwrap_or_else(|| cfg.sim.pacs_bind.clone());
    let clinical_bind = args.clinical_bind.unwrap_or_else(|| cfg.sim.clinical_bind.clone());
    let pacs = SimServer::start_pacs(sim.clone(), &pacs_bind).with_context(|| format!("binding {pacs_bind}"))?;
    let clinical =
        SimServer::start_clinical(sim.clone(), &clinical_bind).with_context(|| format!("binding {clinical_bind}"))?;
    for (ae, addr) in &destinations {
        pacs.register_destination(ae, *addr);
    }
    let (clients, studies) = sim.with_corpus(|c| (c.clients.len(), c.studies.len()));
    writeln!(out, "pacs {}", pacs.addr())?;
    writeln!(out, "clinical {}", clinical.addr())?;
    writeln!(out, "serving {clients} clients, {studies} studies")?;
    out.flush()?;
    loop {
        std::thread::park();
    }
}

fn read_new_password() -> anyhow::Result<String> {
    if let Ok(p) = std::env::var(NEW_PASSWORD_ENV) {
        if !p.is_empty() {
            return Ok(p);
        }
    }
    let mut line = String::new();
    io::stdin().lock().read_line(&mut line)?;
    let p = line.trim_end_matches(['\r', '\n']).to_string();
    if p.is_empty() {
        bail!("no password given (set {NEW_PASSWORD_ENV} or pipe it on stdin)");
    }
    Ok(p)
}

fn admin_api(cfg: &Config, cmd: ApiCmd, out: &mut dyn Write) -> anyhow::Result<()> {
    let accounts = AccountStore::open(cfg.api.accounts_file.clone()).context("opening accounts")?;
    match cmd {
        ApiCmd::AddUser { username, role } => {
            let password = read_new_password()?;
            accounts.add_user(&username, &password, role.into())?;
            writeln!(out, "added {username}")?;
            Ok(())
        }
        ApiCmd::Serve { bind } => {
            if accounts.is_empty() {
                tracing::warn!("no accounts yet; create one with `admin-api add-user --role admin`");
            }
            let mut server = cfg.api.server();
            if let Some(b) = bind {
                server.bind = b;
            }
            let collector = Arc::new(open_collector(cfg)?);
            let state = AppState::new(collector, accounts, &server);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(server.bind)
                    .await
                    .with_context(|| format!("binding {}", server.bind))?;
                writeln!(out, "admin api {}", listener.local_addr()?)?;
                out.flush()?;
                imgcollect_api::serve(listener, state).await?;
                Ok(())
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn destinations_parse() {
        let (ae, addr) = parse_destination("SMARTDICOMRCV=127.0.0.1:11114").unwrap();
        assert_eq!(ae, "SMARTDICOMRCV");
        assert_eq!(addr.port(), 11114);
        assert!(parse_destination("127.0.0.1:1").is_err());
        assert!(parse_destination("=127.0.0.1:1").is_err());
        assert!(parse_destination("AE=nowhere").is_err());
    }

    #[test]
    fn command_line_shapes() {
        Cli::command_for_tests().debug_assert();
        let cli = Cli::try_parse_from(["imgcollect", "collect", "optout", "--list", "ids.txt"]).unwrap();
        assert!(matches!(cli.command, Command::Collect(CollectCmd::Optout { national_id: None, list: Some(_) })));
        assert!(Cli::try_parse_from(["imgcollect", "collect", "optout"]).is_err());
        assert!(Cli::try_parse_from(["imgcollect", "collect", "optout", "9434765919", "--list", "x"]).is_err());
        let cli = Cli::try_parse_from(["imgcollect", "-c", "site.toml", "curate", "run", "week-01"]).unwrap();
        assert_eq!(cli.config, Some(PathBuf::from("site.toml")));
        assert!(matches!(cli.command, Command::Curate(CurateCmd::Run { batch: Some(_) })));
        let cli = Cli::try_parse_from(["imgcollect", "admin-api", "add-user", "ops", "--role", "admin"]).unwrap();
        assert!(matches!(cli.command, Command::AdminApi(ApiCmd::AddUser { role: RoleArg::Admin, .. })));
    }

    impl Cli {
        fn command_for_tests() -> clap::Command {
            <Cli as clap::CommandFactory>::command()
        }
    }
}
