//! Fast runtime self-checks on a small seeded generator. Each returns a
//! one-line detail on success or the first violation found.

// Checks are written negated so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use tilegan_core::bank::{build_bank, BankParams, SampleBank};
use tilegan_core::editor::{format_log, parse_log, Action, EditCommand, Editor, LatentSource};
use tilegan_core::generator::{halo_for, latent_from_seed, Generator, GeneratorSpec, LatentField, Rect};
use tilegan_core::synthesis::{
    field_from_bytes_for, field_to_bytes, initial_tiling, EnergyParams, FieldState, GuidanceMap, Refiner,
};
use tilegan_core::tensor::{Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn spec() -> GeneratorSpec {
    GeneratorSpec { levels: 6, latent_dim: 16, channels: vec![8, 8, 6, 4, 4], leaky_slope: 0.2, use_pixel_norm: true }
}

struct Fixture {
    gen: Generator,
    bank: SampleBank,
    guidance: GuidanceMap,
}

fn fixture() -> Result<Fixture, String> {
    let gen = Generator::toy(spec(), 31).map_err(err)?;
    let mut bank =
        build_bank(&gen, BankParams { level: 3, count: 40, crop: 4, representative_size: 8, seed: 5 }).map_err(err)?;
    bank.cluster(4, 50, 5).map_err(err)?;
    let mut rng = Rng::new(9);
    let img = Tensor::from_fn(3, 24, 24, |_, _, _| (0.5 * rng.normal()).clamp(-1.0, 1.0));
    let guidance = GuidanceMap::for_bank(img, 6, 6, &bank).map_err(err)?;
    Ok(Fixture { gen, bank, guidance })
}

fn split() -> Outcome {
    let spec = spec();
    let gen = Generator::toy(spec.clone(), 11).map_err(err)?;
    let mut worst = 0.0f32;
    for i in 0..8 {
        let z = latent_from_seed(&spec, i);
        let full = gen.g_full(&z).map_err(err)?;
        for l in 2..spec.levels {
            let field = LatentField::from_tile(l, gen.g_a(&z, l).map_err(err)?).map_err(err)?;
            worst = worst.max(full.max_abs_diff(&gen.g_b(&field).map_err(err)?).map_err(err)?);
        }
    }
    ensure!(worst <= 1e-6, "max |G(z) - G_B(G_A(z))| = {worst:e}");
    Ok(format!("max diff {worst:e}"))
}

fn chunked() -> Outcome {
    let spec = spec();
    let gen = Generator::toy(spec.clone(), 12).map_err(err)?;
    let mut rng = Rng::new(2);
    let mut worst = 0.0f32;
    for l in 2..spec.levels {
        let values = Tensor::randn(spec.channels_at(l), 9, 13, &mut rng);
        let field = LatentField::from_values(l, 1, values).map_err(err)?;
        let full = gen.g_b(&field).map_err(err)?;
        let halo = halo_for(&spec, l);
        for chunk in [2, 3, 5] {
            let c = gen.g_b_chunked(&field, chunk, halo).map_err(err)?;
            worst = worst.max(full.max_abs_diff(&c).map_err(err)?);
        }
        ensure!(
            gen.g_b_chunked(&field, 2, halo.saturating_sub(1)).is_err() || halo == 0,
            "short halo accepted at l={l}"
        );
        let s = 1 << (spec.levels - l);
        ensure!(full.shape() == (3, 9 * s, 13 * s), "l={l}: output {:?}", full.shape());
    }
    ensure!(worst <= 1e-5, "chunked vs full max diff {worst:e}");
    Ok(format!("max diff {worst:e}; output sizes match 2^(n-l) per latent unit"))
}

fn energy(f: &Fixture) -> Outcome {
    let mut state = initial_tiling(&f.bank, f.guidance.clone(), EnergyParams::default()).map_err(err)?;
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (cx, cy) = (rng.below(6), rng.below(6));
        let id = rng.below(f.bank.len()) as u32;
        state.place_sample(&f.bank, cx, cy, id).map_err(err)?;
        let cached = state.energy().ok_or("no cached energy")?.total;
        let fresh = state.total_energy(&f.bank).map_err(err)?.total;
        worst = worst.max((cached - fresh).abs() / fresh.abs().max(1e-12));
    }
    ensure!(worst <= 1e-9, "incremental energy drifts from recomputation by {worst:e}");
    Ok(format!("incremental vs full recompute, max relative error {worst:e}"))
}

fn refinement(f: &Fixture) -> Outcome {
    let mut state = initial_tiling(&f.bank, f.guidance.clone(), EnergyParams::default()).map_err(err)?;
    let mut refiner = Refiner::new(&state, 3).map_err(err)?;
    while refiner.finished(&state).is_none() {
        refiner.step(&mut state, &f.bank).map_err(err)?;
    }
    let trace = refiner.trace();
    ensure!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "energy increased during refinement");
    Ok(format!("{} steps, energy {:.4} -> {:.4}", refiner.steps(), trace[0], trace[trace.len() - 1]))
}

fn clustering(f: &Fixture) -> Outcome {
    let mut bank = f.bank.clone();
    let km = bank.cluster(4, 50, 8).map_err(err)?;
    ensure!(km.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9), "k-means inertia increased");
    ensure!(
        (0..4).map(|k| bank.members(k).len()).sum::<usize>() == bank.len(),
        "cluster membership does not cover the bank"
    );
    Ok(format!("{} iterations, inertia {:.4}", km.iterations, bank.inertia()))
}

fn edits(f: &Fixture) -> Outcome {
    let mut state = initial_tiling(&f.bank, f.guidance.clone(), EnergyParams::default()).map_err(err)?;
    state.render(&f.gen).map_err(err)?;
    let before = field_to_bytes(state.field(), &f.bank.fingerprint());
    let before_img = state.image().cloned().ok_or("no image")?;
    let mut editor = Editor::new(state);
    let actions = [
        EditCommand::Brush { cells: Rect::new(1, 1, 2, 2), cluster: 2, seed: 1 },
        EditCommand::Clone { source: Rect::new(0, 0, 2, 2), dest: (4, 4), shuffle: true, seed: 2 },
        EditCommand::Noise { cells: Rect::new(0, 3, 3, 1), sigma: 0.2, seed: 3 },
        EditCommand::Interpolate { cell: (5, 0), a: LatentSource::Sample(1), b: LatentSource::Cell(0, 0), t: 0.5 },
    ];
    for cmd in &actions {
        editor.apply(Some(&f.gen), &f.bank, cmd.clone()).map_err(err)?;
    }
    let mut fresh: FieldState = editor.state().clone();
    let rendered = fresh.render(&f.gen).map_err(err)?.clone();
    let d = editor.state().image().ok_or("no image")?.max_abs_diff(&rendered).map_err(err)?;
    ensure!(d == 0.0, "incrementally updated image differs from a full render by {d:e}");
    while editor.can_undo() {
        editor.undo(Some(&f.gen), &f.bank).map_err(err)?;
    }
    ensure!(field_to_bytes(editor.state().field(), &f.bank.fingerprint()) == before, "undo did not restore the field");
    ensure!(editor.state().image() == Some(&before_img), "undo did not restore the image");
    Ok(format!("{} edits re-render exactly and undo to identical bytes", actions.len()))
}

fn formats(f: &Fixture) -> Outcome {
    let gen = Generator::from_bytes(&f.gen.to_bytes()).map_err(err)?;
    ensure!(gen.to_bytes() == f.gen.to_bytes(), "TGW1 round trip differs");
    let bank = SampleBank::from_bytes_for(&f.bank.to_bytes(), &gen).map_err(err)?;
    ensure!(bank == f.bank, "TGB1 round trip differs");
    let state = initial_tiling(&bank, f.guidance.clone(), EnergyParams::default()).map_err(err)?;
    let bytes = field_to_bytes(state.field(), &bank.fingerprint());
    let back = field_from_bytes_for(&bytes, &bank).map_err(err)?;
    ensure!(&back == state.field(), "TGF1 round trip differs");
    let mut other = bank.clone();
    other.cluster(3, 10, 99).map_err(err)?;
    ensure!(field_from_bytes_for(&bytes, &other).is_err(), "field accepted against a different bank");
    let log = vec![
        Action::Edit(EditCommand::Noise { cells: Rect::new(0, 0, 2, 1), sigma: 0.25, seed: 4 }),
        Action::Undo,
        Action::Redo,
        Action::Edit(EditCommand::Guidance { at: (2, 3), patch: Tensor::filled(3, 2, 2, -0.5) }),
    ];
    ensure!(parse_log(&format_log(&log)).map_err(err)? == log, "command log round trip differs");
    Ok("TGW1, TGB1, TGF1 and command logs round-trip; mismatched bank rejected".into())
}

pub fn run_all() -> Vec<(&'static str, Outcome)> {
    let mut out = vec![("split-consistency", split()), ("chunked-rendering", chunked())];
    match fixture() {
        Ok(f) => {
            out.push(("energy-incremental", energy(&f)));
            out.push(("refinement-monotone", refinement(&f)));
            out.push(("clustering", clustering(&f)));
            out.push(("edits", edits(&f)));
            out.push(("formats", formats(&f)));
        }
        Err(e) => out.push(("fixture", Err(e))),
    }
    out
}
