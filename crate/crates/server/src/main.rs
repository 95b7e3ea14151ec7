use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pipescan_core::store::{Role, Store};
use pipescan_server::clock::{Clock, SystemClock};
use pipescan_server::config::ServerConfig;
use pipescan_server::jobs::{CronScheduler, NoopHook, Worker};
use pipescan_server::services::Api;

#[derive(Parser)]
#[command(name = "pipescan-server", version, about = "Inspection backend: REST API, job worker and web assets")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway and the ML job worker.
    Serve,
    /// Create a user or reset an existing user's password and role.
    UserAdd {
        username: String,
        /// Read from the environment so it stays out of shell history.
        #[arg(long, env = "PIPESCAN_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long, default_value = "operator")]
        role: Role,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ServerConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    let store = Arc::new(Store::open(&cfg.data_dir)?);
    match cli.command {
        Command::UserAdd { username, password, role } => {
            let u = store.users().upsert_user(&username, &password, role)?;
            println!("{} ({})", u.username, u.role);
            Ok(())
        }
        Command::Serve => serve(cfg, store),
    }
}

fn serve(cfg: ServerConfig, store: Arc<Store>) -> Result<(), Box<dyn std::error::Error>> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let api = Api::open(store, clock.clone(), cfg.api_config()).map_err(|e| e.message)?;
    let cron = Arc::new(CronScheduler::new(clock, Arc::new(NoopHook)));
    let worker = Worker::spawn(api.queue(), Some(cron));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        pipescan_server::http::serve(listener, api, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    worker.shutdown();
    Ok(())
}
