use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use pipescan_client::analyze::{analyze_dir, load_model, load_params};
use pipescan_client::remote::Remote;
use pipescan_client::review::{download, Review};
use pipescan_client::spool::Spool;
use pipescan_client::sync::sync;
use pipescan_client::transport::HttpTransport;
use pipescan_client::{ClientError, Result};
use pipescan_core::domain::{to_canonical_vec, BoundingBox};

#[derive(Parser)]
#[command(name = "pipescan", version, about = "Field client: offline frame analysis, upload and defect review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a directory of numbered PPM frames. Needs no network.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// PipelineParams JSON.
        #[arg(long)]
        params: PathBuf,
        /// Histogram model JSON; without it only alerts and proposals are reported.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Where to write the annotations report.
        #[arg(long)]
        out: PathBuf,
        /// Annotation timestamp (RFC 3339). Defaults to the newest frame's mtime.
        #[arg(long)]
        at: Option<DateTime<Utc>>,
        /// Also stage the frames and annotations in this spool for upload.
        #[arg(long, requires = "title")]
        spool: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long = "tag")]
        tags: Vec<String>,
    },
    /// Log in and print a bearer token.
    Login {
        #[arg(long)]
        server: String,
        #[arg(long)]
        username: String,
        #[arg(long, env = "PIPESCAN_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Upload every pending inspection in the spool.
    Sync {
        #[arg(long)]
        server: String,
        #[arg(long, env = "PIPESCAN_TOKEN", hide_env_values = true)]
        token: String,
        #[arg(long, default_value = "spool")]
        spool: PathBuf,
    },
    /// Download an inspection bundle for review.
    Download {
        #[arg(long)]
        server: String,
        #[arg(long, env = "PIPESCAN_TOKEN", hide_env_values = true)]
        token: String,
        #[arg(long)]
        id: String,
        #[arg(long)]
        dir: PathBuf,
        /// Classes accepted by add-defect, besides those already in the bundle.
        #[arg(long = "class")]
        classes: Vec<String>,
        /// Params snapshotted into new defects.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Edit a downloaded bundle.
    Review {
        dir: PathBuf,
        #[command(subcommand)]
        action: ReviewAction,
    },
}

#[derive(Subcommand)]
enum ReviewAction {
    /// Print the working defect list.
    Show,
    /// Tag a defect on a frame. Box is x_min,y_min,x_max,y_max (max exclusive).
    AddDefect {
        #[arg(long)]
        frame: u32,
        #[arg(long)]
        class: String,
        #[arg(long = "box", value_parser = parse_box)]
        bbox: BoundingBox,
        #[arg(long, default_value_t = 1.0)]
        score: f64,
        #[arg(long)]
        at: Option<DateTime<Utc>>,
    },
    DeleteDefect {
        index: usize,
    },
    /// Make a defect's params snapshot current for new defects.
    UseParams {
        index: usize,
    },
    /// Record the working list for upload.
    Save,
    /// Discard local edits and return to the downloaded bundle.
    RestoreOriginal,
    /// Upload the saved list and download the result.
    Upload {
        #[arg(long)]
        server: String,
        #[arg(long, env = "PIPESCAN_TOKEN", hide_env_values = true)]
        token: String,
    },
}

fn parse_box(s: &str) -> std::result::Result<BoundingBox, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad coordinate {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] => BoundingBox::new(x0, y0, x1, y1).map_err(|e| e.to_string()),
        _ => Err("expected x_min,y_min,x_max,y_max".into()),
    }
}

fn remote(server: &str, token: Option<String>) -> Remote {
    Remote::new(Arc::new(HttpTransport::new(server)), token)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| ClientError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze {
            input,
            params,
            model,
            out,
            at,
            spool,
            title,
            tags,
        } => {
            let params = load_params(&params)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let run = analyze_dir(&input, &params, model.as_ref().map(|(m, h)| (m, h.as_str())), at)?;
            for line in run.report.alert_lines() {
                println!("{line}");
            }
            write_out(&out, &to_canonical_vec(&run.report).expect("reports serialize"))?;
            if let (Some(dir), Some(title)) = (spool, title) {
                let created_at = at.or(run.newest_mtime).unwrap_or(DateTime::UNIX_EPOCH);
                let insp = Spool::open(&dir)?.stage(&title, created_at, &run.frame_bytes, run.report.annotations.clone(), tags)?;
                println!("staged {} ({} frames, {} defects)", insp.id, insp.frame_refs.len(), insp.annotations.len());
            }
            eprintln!(
                "{} frames, {} alerts, {} defects",
                run.report.frames.len(),
                run.report.frames.iter().filter(|f| f.alert).count(),
                run.report.annotations.len()
            );
        }
        Command::Login { server, username, password } => {
            println!("{}", remote(&server, None).login(&username, &password)?);
        }
        Command::Sync { server, token, spool } => {
            let report = sync(&Spool::open(&spool)?, &remote(&server, Some(token)))?;
            for id in &report.synced {
                println!("synced {id}");
            }
            for (id, why) in &report.failed {
                println!("failed {id}: {why}");
            }
            println!(
                "{} synced, {} failed, {} already up to date; {} blobs uploaded, {} already on server",
                report.synced.len(),
                report.failed.len(),
                report.up_to_date,
                report.blobs_uploaded,
                report.blobs_present
            );
            if !report.failed.is_empty() {
                return Err(ClientError::Validation(format!("{} inspections were refused", report.failed.len())));
            }
        }
        Command::Download {
            server,
            token,
            id,
            dir,
            classes,
            params,
        } => {
            let params = params.as_deref().map(load_params).transpose()?;
            let r = download(&remote(&server, Some(token)), &id, &dir, &classes, params)?;
            println!("{} at revision {}: {} frames", r.inspection_id(), r.revision(), r.frame_count());
        }
        Command::Review { dir, action } => review(&dir, action)?,
    }
    Ok(())
}

fn review(dir: &Path, action: ReviewAction) -> Result<()> {
    let mut r = Review::open(dir)?;
    match action {
        ReviewAction::Show => {
            for (i, a) in r.annotations()?.iter().enumerate() {
                let b = a.detection.bbox;
                println!(
                    "{i}: frame {} {} [{},{},{},{}] {:.0}% {:?}",
                    a.frame_index,
                    a.detection.class,
                    b.x_min,
                    b.y_min,
                    b.x_max,
                    b.y_max,
                    a.detection.score * 100.0,
                    a.source
                );
            }
        }
        ReviewAction::AddDefect {
            frame,
            class,
            bbox,
            score,
            at,
        } => {
            let i = r.add_defect(frame, &class, bbox, score, at.unwrap_or_else(Utc::now))?;
            println!("added defect {i}");
        }
        ReviewAction::DeleteDefect { index } => {
            let a = r.delete_defect(index)?;
            println!("deleted defect {index} ({} on frame {})", a.detection.class, a.frame_index);
        }
        ReviewAction::UseParams { index } => {
            let p = r.use_params_of(index)?;
            println!("{}", serde_json::to_string(&p).expect("params serialize"));
        }
        ReviewAction::Save => {
            let p = r.save()?;
            println!("saved {} defects against revision {}", p.annotations.len(), p.expected_revision);
        }
        ReviewAction::RestoreOriginal => {
            r.restore_original()?;
            println!("restored the downloaded defect list");
        }
        ReviewAction::Upload { server, token } => {
            let rev = r.upload(&remote(&server, Some(token)))?;
            println!("uploaded; server revision {rev}");
        }
    }
    Ok(())
}
