//! `tilegan`: batch tools over generator, bank and field files, the HTTP
//! service, and a client for a running service.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tilegan_api::EnergyOverrides;
use tilegan_core::bank::{build_bank, hex, BankParams, SampleBank};
use tilegan_core::editor::{parse_log, replay, Editor};
use tilegan_core::generator::{Generator, GeneratorSpec};
use tilegan_core::imageio::{png_to_tensor, tensor_to_png};
use tilegan_core::synthesis::{
    field_from_bytes_for, field_to_bytes, generate_texture_map, EnergyParams, FieldState, GuidanceMap, StopReason,
    Threshold,
};
use tilegan_core::tensor::Tensor;

mod remote;
mod verify;

#[derive(Parser)]
#[command(name = "tilegan", version, about = "Tiled latent-field texture synthesis")]
struct Cli {
    /// Directory holding generator.tgw and bank.tgb by default.
    #[arg(long, global = true, env = "TILEGAN_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy generator.
    InitGen {
        #[arg(long, default_value_t = 7)]
        levels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Latent size; defaults to the stock 512.
        #[arg(long)]
        latent_dim: Option<usize>,
        /// Defaults to <data-dir>/generator.tgw.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a sample bank at one split level.
    Sample {
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        crop: usize,
        /// Representative (thumbnail) side length.
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <data-dir>/bank.tgb.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run k-means over a bank's representatives.
    Cluster {
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to overwriting the input bank.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesise a field from a guidance image and render it.
    Synth {
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        guidance: PathBuf,
        /// Field size in cells, `WxH`.
        #[arg(long, value_parser = parse_cells)]
        cells: (usize, usize),
        /// `.png` for the image, `.tgf` for the latent field.
        #[arg(long)]
        out: PathBuf,
        /// Also write the field here.
        #[arg(long)]
        field_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        energy: EnergyArgs,
    },
    /// Apply a command log to a field file.
    EditReplay {
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Edited field (TGF1).
        #[arg(long)]
        out: PathBuf,
        /// Guidance the field was made with; only guidance edits need it.
        #[arg(long)]
        guidance: Option<PathBuf>,
        /// Also render the edited field to this PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Run the built-in self-checks.
    Verify,
    /// Serve <data-dir>/generator.tgw and bank.tgb over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = tilegan_service::DEFAULT_TILE_SIZE)]
        tile_size: usize,
        /// Largest field the whole-image endpoint will encode.
        #[arg(long, default_value_t = tilegan_service::DEFAULT_MAX_IMAGE_PIXELS)]
        max_image_pixels: usize,
    },
    /// Talk to a running service.
    Remote(remote::RemoteArgs),
}

#[derive(Args, Clone, Debug, Default)]
pub struct EnergyArgs {
    #[arg(long)]
    lambda_visual: Option<f64>,
    #[arg(long)]
    lambda_latent: Option<f64>,
    #[arg(long)]
    lambda_cluster: Option<f64>,
    /// Stop once energy falls below this fraction of the initial energy.
    #[arg(long, conflicts_with = "threshold_absolute")]
    threshold_relative: Option<f64>,
    #[arg(long)]
    threshold_absolute: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

impl EnergyArgs {
    pub fn overrides(&self) -> EnergyOverrides {
        EnergyOverrides {
            lambda_visual: self.lambda_visual,
            lambda_latent: self.lambda_latent,
            lambda_cluster: self.lambda_cluster,
            threshold_relative: self.threshold_relative,
            threshold_absolute: self.threshold_absolute,
            max_refine_steps: self.max_steps,
            top_k: self.top_k,
        }
    }

    fn params(&self) -> EnergyParams {
        let d = EnergyParams::default();
        EnergyParams {
            lambda_visual: self.lambda_visual.unwrap_or(d.lambda_visual),
            lambda_latent: self.lambda_latent.unwrap_or(d.lambda_latent),
            lambda_cluster: self.lambda_cluster.unwrap_or(d.lambda_cluster),
            threshold: match (self.threshold_absolute, self.threshold_relative) {
                (Some(v), _) => Threshold::Absolute(v),
                (None, Some(f)) => Threshold::Relative(f),
                (None, None) => d.threshold,
            },
            max_refine_steps: self.max_steps.or(d.max_refine_steps),
            top_k: self.top_k.unwrap_or(d.top_k),
        }
    }
}

pub fn parse_cells(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("cell counts must be positive".into());
    }
    Ok((w, h))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

struct Paths<'a> {
    data: &'a Path,
}

impl Paths<'_> {
    fn gen(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.data.join("generator.tgw"))
    }

    fn bank(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.data.join("bank.tgb"))
    }

    fn load_gen(&self, p: &Option<PathBuf>) -> Result<Generator> {
        let path = self.gen(p);
        Generator::from_bytes(&read(&path)?).with_context(|| format!("loading generator {}", path.display()))
    }

    fn load_bank(&self, p: &Option<PathBuf>, gen: &Generator) -> Result<SampleBank> {
        let path = self.bank(p);
        SampleBank::from_bytes_for(&read(&path)?, gen).with_context(|| format!("loading bank {}", path.display()))
    }
}

fn is_tgf(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tgf"))
}

fn run(cli: Cli) -> Result<()> {
    let paths = Paths { data: &cli.data_dir };
    match cli.command {
        Command::InitGen { levels, seed, latent_dim, out } => {
            let mut spec = GeneratorSpec::toy(levels);
            if let Some(d) = latent_dim {
                spec.latent_dim = d;
            }
            let gen = Generator::toy(spec, seed)?;
            let out = paths.gen(&out);
            write(&out, &gen.to_bytes())?;
            println!("wrote {} ({} levels, fingerprint {})", out.display(), levels, hex(&gen.fingerprint()[..8]));
        }
        Command::Sample { gen, count, level, crop, r, seed, out } => {
            let gen = paths.load_gen(&gen)?;
            let bank = build_bank(&gen, BankParams { level, count, crop, representative_size: r, seed })?;
            let out = paths.bank(&out);
            write(&out, &bank.to_bytes())?;
            println!("wrote {} ({count} samples at level {level}, crop {crop})", out.display());
        }
        Command::Cluster { gen, bank, k, iters, seed, out } => {
            let g = paths.load_gen(&gen)?;
            let mut b = paths.load_bank(&bank, &g)?;
            let km = b.cluster(k, iters, seed)?;
            let out = out.unwrap_or_else(|| paths.bank(&bank));
            write(&out, &b.to_bytes())?;
            let sizes: Vec<usize> = (0..k).map(|c| b.members(c).len()).collect();
            println!(
                "wrote {} (k={k}, {} iterations{}, inertia {:.4}, sizes {sizes:?})",
                out.display(),
                km.iterations,
                if km.converged { ", converged" } else { "" },
                b.inertia()
            );
        }
        Command::Synth { gen, bank, guidance, cells, out, field_out, seed, energy } => {
            let g = paths.load_gen(&gen)?;
            let b = paths.load_bank(&bank, &g)?;
            let map = png_to_tensor(&read(&guidance)?).context("decoding guidance")?;
            let map = GuidanceMap::for_bank(map, cells.0, cells.1, &b)?;
            let s = generate_texture_map(&g, &b, map, energy.params(), seed)?;
            let field = field_to_bytes(s.state.field(), &b.fingerprint());
            if is_tgf(&out) {
                write(&out, &field)?;
            } else {
                write(&out, &tensor_to_png(&s.image)?)?;
            }
            if let Some(p) = field_out {
                write(&p, &field)?;
            }
            let first = s.trace.first().copied().unwrap_or_default();
            let last = s.trace.last().copied().unwrap_or_default();
            let stop = match s.stop {
                StopReason::Threshold => "threshold",
                StopReason::StepCap => "step cap",
            };
            println!(
                "wrote {} ({}x{} px); energy {first:.4} -> {last:.4} in {} steps, stopped at {stop}",
                out.display(),
                s.image.width(),
                s.image.height(),
                s.trace.len().saturating_sub(1)
            );
        }
        Command::EditReplay { gen, bank, field, log, out, guidance, png } => {
            let g = paths.load_gen(&gen)?;
            let b = paths.load_bank(&bank, &g)?;
            let f = field_from_bytes_for(&read(&field)?, &b)
                .with_context(|| format!("loading field {}", field.display()))?;
            let image = match &guidance {
                Some(p) => png_to_tensor(&read(p)?).context("decoding guidance")?,
                None => Tensor::zeros(3, f.cells_y(), f.cells_x()),
            };
            let map = GuidanceMap::for_bank(image, f.cells_x(), f.cells_y(), &b)?;
            let text = String::from_utf8(read(&log)?).context("command log is not UTF-8")?;
            let actions = parse_log(&text)?;
            let mut editor = Editor::new(FieldState::new(f, map, &b, EnergyParams::default())?);
            replay(&mut editor, None, &b, &actions)?;
            let mut state = editor.into_state();
            write(&out, &field_to_bytes(state.field(), &b.fingerprint()))?;
            if let Some(p) = png {
                let img = state.render(&g)?;
                write(&p, &tensor_to_png(img)?)?;
            }
            println!("applied {} records; wrote {}", actions.len(), out.display());
        }
        Command::Verify => {
            let mut failed = 0;
            for (name, outcome) in verify::run_all() {
                match outcome {
                    Ok(detail) => println!("ok   {name}: {detail}"),
                    Err(detail) => {
                        failed += 1;
                        println!("FAIL {name}: {detail}");
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} self-check(s) failed");
            }
        }
        Command::Serve { port, host, tile_size, max_image_pixels } => {
            let mut session = tilegan_service::Session::open(&cli.data_dir, tile_size)
                .with_context(|| format!("opening data directory {}", cli.data_dir.display()))?;
            session.max_image_pixels = max_image_pixels;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                tokio::select! {
                    r = tilegan_service::serve(listener, std::sync::Arc::new(session)) => r.context("server failed"),
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })?;
        }
        Command::Remote(args) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(remote::run(args))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
