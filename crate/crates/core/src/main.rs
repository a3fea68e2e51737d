use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use everhub::api::{self, ConfigOverrides, HubConfig};
use everhub::repo::{self, fetch_repository, inspect_manifest, GitFetcher};

#[derive(Debug, Parser)]
#[command(name = "everhub", version, about = "Launch git repositories as proxied container sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the hub.
    Serve {
        /// TOML configuration file.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        public_url: Option<String>,
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Fetch a repository and print its completeness checklist.
    /// Exits 0 if launchable, 1 if not, 2 on error.
    CheckRepo {
        url: String,
        /// Rewrite URL prefixes before fetching, as PREFIX=REPLACEMENT.
        #[arg(long = "rewrite", value_parser = parse_rewrite)]
        rewrites: Vec<(String, String)>,
        /// Directory for the temporary checkout.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

fn parse_rewrite(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| format!("expected PREFIX=REPLACEMENT, got `{s}`"))
}

fn init_tracing() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
}

fn check_repo(url: &str, rewrites: Vec<(String, String)>, workdir: Option<PathBuf>) -> ExitCode {
    let repo = match repo::parse_repo_url(url) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut fetcher = GitFetcher::default();
    for (prefix, replacement) in rewrites {
        fetcher = fetcher.with_rewrite(prefix, replacement);
    }
    let scratch = match workdir {
        Some(dir) => tempfile::tempdir_in(dir),
        None => tempfile::tempdir(),
    };
    let scratch = match scratch {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: creating workdir: {e}");
            return ExitCode::from(2);
        }
    };
    let checkout = match fetch_repository(&fetcher, &repo, scratch.path()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let manifest = inspect_manifest(&checkout);
    println!("{} @ {}", checkout.repo.canonical_url, checkout.repo.resolved_commit);
    print!("{}", manifest.checklist());
    if manifest.launchable {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("everhub {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::CheckRepo { url, rewrites, workdir } => check_repo(&url, rewrites, workdir),
        Command::Serve {
            config,
            listen,
            public_url,
            journal,
        } => {
            init_tracing();
            let overrides = ConfigOverrides {
                listen_address: listen,
                public_base_url: public_url,
                journal_path: journal,
            };
            let cfg = match HubConfig::load(config.as_deref(), &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: starting runtime: {e}");
                    return ExitCode::from(2);
                }
            };
            match rt.block_on(api::serve(cfg)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
