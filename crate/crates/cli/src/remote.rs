use std::path::PathBuf;

use anyhow::{Context, Result};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::{Args, Subcommand, ValueEnum};

use tilegan_api::{EditRequest, Event, RefineAction, RefineState, Region, Source};
use tilegan_client::Client;
use tilegan_core::editor::{parse_log, Action, EditCommand, LatentSource};
use tilegan_core::generator::Rect;
use tilegan_core::imageio::tensor_to_png;

use crate::{parse_cells, read, write, EnergyArgs};

#[derive(Args)]
pub struct RemoteArgs {
    /// Service root URL.
    #[arg(long, env = "TILEGAN_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    #[command(subcommand)]
    command: RemoteCommand,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineArg {
    Start,
    Stop,
}

#[derive(Subcommand)]
enum RemoteCommand {
    Health,
    /// Cluster palette (thumbnails omitted unless --thumbnails).
    Clusters {
        #[arg(long)]
        thumbnails: bool,
    },
    /// Ids of open fields.
    List,
    /// Create a field from a guidance PNG, optionally seeded with a TGF1 file.
    Create {
        #[arg(long)]
        guidance: PathBuf,
        #[arg(long, value_parser = parse_cells)]
        cells: (usize, usize),
        #[arg(long)]
        field: Option<PathBuf>,
        #[command(flatten)]
        energy: EnergyArgs,
    },
    Info {
        id: u64,
    },
    Delete {
        id: u64,
    },
    /// Apply one edit given as JSON, e.g. '{"kind":"undo"}'.
    Edit {
        id: u64,
        json: String,
    },
    /// Apply every record of a command log file.
    ApplyLog {
        id: u64,
        log: PathBuf,
    },
    Refine {
        id: u64,
        #[arg(value_enum)]
        action: RefineArg,
        #[arg(long)]
        seed: Option<u64>,
        /// After starting, follow events until refinement stops.
        #[arg(long)]
        wait: bool,
    },
    /// Download one PNG view tile.
    Tile {
        id: u64,
        z: u32,
        tx: usize,
        ty: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Download the whole rendered image as PNG.
    Image {
        id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Download the field as TGF1.
    Download {
        id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the field's command log.
    Log {
        id: u64,
    },
    /// Print events as JSON lines.
    Events {
        id: u64,
        /// Stop after this many events.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn print(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn region(r: &Rect) -> Region {
    Region::new(r.x, r.y, r.w, r.h)
}

fn source(s: &LatentSource) -> Source {
    match *s {
        LatentSource::Sample(id) => Source::Sample(id),
        LatentSource::Cell(x, y) => Source::Cell([x, y]),
    }
}

/// Wire form of a log record. Guidance patches are sent as 8-bit PNG.
pub fn request_for(action: &Action) -> Result<EditRequest> {
    Ok(match action {
        Action::Undo => EditRequest::Undo,
        Action::Redo => EditRequest::Redo,
        Action::Edit(cmd) => match cmd {
            EditCommand::Brush { cells, cluster, seed } => {
                EditRequest::Brush { rect: region(cells), cluster: *cluster, seed: *seed }
            }
            EditCommand::Clone { source, dest, shuffle: false, .. } => {
                EditRequest::Clone { src: region(source), dst: [dest.0, dest.1] }
            }
            EditCommand::Clone { source, dest, shuffle: true, seed } => {
                EditRequest::ShuffleClone { src: region(source), dst: [dest.0, dest.1], seed: *seed }
            }
            EditCommand::Noise { cells, sigma, seed } => {
                EditRequest::Noise { rect: region(cells), sigma: *sigma, seed: *seed }
            }
            EditCommand::Interpolate { cell, a, b, t } => {
                EditRequest::Interpolate { cell: [cell.0, cell.1], a: source(a), b: source(b), t: *t }
            }
            EditCommand::Guidance { at, patch } => {
                EditRequest::Guidance { at: [at.0, at.1], patch_png: BASE64.encode(tensor_to_png(patch)?) }
            }
        },
    })
}

pub async fn run(args: RemoteArgs) -> Result<()> {
    let client = Client::new(&args.url);
    match args.command {
        RemoteCommand::Health => {
            client.health().await?;
            println!("ok");
        }
        RemoteCommand::Clusters { thumbnails } => {
            let mut clusters = serde_json::to_value(client.clusters().await?)?;
            if !thumbnails {
                for c in clusters.as_array_mut().into_iter().flatten() {
                    c.as_object_mut().map(|o| o.remove("thumbnail_png"));
                }
            }
            print(&clusters)?;
        }
        RemoteCommand::List => print(&client.fields().await?)?,
        RemoteCommand::Create { guidance, cells, field, energy } => {
            let png = read(&guidance)?;
            let tgf = field.as_deref().map(read).transpose()?;
            print(&client.create_field(&png, cells.0, cells.1, tgf.as_deref(), energy.overrides()).await?)?;
        }
        RemoteCommand::Info { id } => print(&client.field(id).await?)?,
        RemoteCommand::Delete { id } => client.delete_field(id).await?,
        RemoteCommand::Edit { id, json } => {
            let req: EditRequest = serde_json::from_str(&json).context("parsing edit JSON")?;
            print(&client.edit(id, &req).await?)?;
        }
        RemoteCommand::ApplyLog { id, log } => {
            let text = String::from_utf8(read(&log)?).context("command log is not UTF-8")?;
            let actions = parse_log(&text)?;
            let mut last = None;
            for (i, a) in actions.iter().enumerate() {
                let r = client.edit(id, &request_for(a)?).await.with_context(|| format!("record {}: {a}", i + 1))?;
                last = Some(r.revision);
            }
            println!(
                "applied {} records; revision {}",
                actions.len(),
                last.map_or("unchanged".into(), |r| r.to_string())
            );
        }
        RemoteCommand::Refine { id, action, seed, wait } => {
            let action = match action {
                RefineArg::Start => RefineAction::Start,
                RefineArg::Stop => RefineAction::Stop,
            };
            let mut events = if wait { Some(client.events(id).await?) } else { None };
            if let Some(ev) = events.as_mut() {
                // The stream opens with the status as of subscription.
                ev.next().await?;
            }
            let status = client.refine(id, action, seed).await?;
            match events.as_mut() {
                Some(ev) if status.state == RefineState::Running => loop {
                    match ev.next().await? {
                        Some(Event::Energy { energy, revision, .. }) => {
                            eprintln!("revision {revision}: energy {:.4}", energy.total)
                        }
                        Some(Event::Refine { status, .. }) if status.state == RefineState::Idle => {
                            print(&status)?;
                            break;
                        }
                        Some(_) => {}
                        None => anyhow::bail!("event stream closed before refinement finished"),
                    }
                },
                _ => print(&status)?,
            }
        }
        RemoteCommand::Tile { id, z, tx, ty, out } => write(&out, &client.tile(id, z, tx, ty).await?)?,
        RemoteCommand::Image { id, out } => write(&out, &client.image(id).await?)?,
        RemoteCommand::Download { id, out } => write(&out, &client.field_file(id).await?)?,
        RemoteCommand::Log { id } => print!("{}", client.command_log(id).await?),
        RemoteCommand::Events { id, count } => {
            let mut events = client.events(id).await?;
            let mut seen = 0;
            while count.is_none_or(|c| seen < c) {
                let Some(ev) = events.next().await? else { break };
                println!("{}", serde_json::to_string(&ev)?);
                seen += 1;
            }
        }
    }
    Ok(())
}
