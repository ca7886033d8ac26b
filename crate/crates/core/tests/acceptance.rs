//! Acceptance suite: one check per top-level requirement, each printing a
//! single PASS/FAIL line.
//!
//! Run with: `cargo test -p tilegan-core --test acceptance`
//!
//! Golden files live in `tests/golden/`; set `UPDATE_GOLDEN=1` to rewrite
//! them. Checks marked host-limited measure something the host hardware may
//! not allow (multi-core speedup); they print FAIL honestly but only fail the
//! process when `TILEGAN_STRICT_ACCEPTANCE` is set.

// Checks are written negated so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tilegan_core::bank::{build_bank, BankParams, Sample, SampleBank};
use tilegan_core::editor::{format_log, parse_log, replay, Action, EditCommand, Editor, LatentSource};
use tilegan_core::generator::{halo_for, latent_from_seed, Generator, GeneratorSpec, LatentField, Rect};
use tilegan_core::synthesis::{
    better_match, field_from_bytes, field_from_bytes_for, field_to_bytes, initial_tiling, EnergyParams, FieldState,
    GuidanceMap, Refiner, StopReason, Threshold,
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

fn random_field(level: usize, cells_x: usize, cells_y: usize, crop: usize, channels: usize, seed: u64) -> LatentField {
    let mut rng = Rng::new(seed);
    let values = Tensor::randn(channels, cells_y * crop, cells_x * crop, &mut rng);
    LatentField::from_values(level, crop, values).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.max_abs_diff(b).unwrap()
}

fn split_consistency() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f32;
    let mut checks = 0;
    for n in [7, 9] {
        let spec = GeneratorSpec::toy(n);
        let gen = Generator::toy(spec.clone(), 100 + n as u64).unwrap();
        for i in 0..100 {
            let z = latent_from_seed(&spec, 1000 * n as u64 + i);
            let full = gen.g_full(&z).unwrap();
            for l in 2..n {
                let field = LatentField::from_tile(l, gen.g_a(&z, l).unwrap()).unwrap();
                let split = gen.g_b(&field).unwrap();
                worst = worst.max(max_diff(&full, &split));
                checks += 1;
            }
        }
    }
    let t = start.elapsed();
    ensure!(worst <= 1e-6, "max |g_full - g_b(g_a)| = {worst:e} over {checks} splits");
    ensure!(t < Duration::from_secs(120), "took {t:.1?}, limit 120 s");
    Ok(format!("max diff {worst:e} over {checks} (z, l) pairs, n in {{7, 9}}, {t:.1?}"))
}

fn chunked_exactness() -> Outcome {
    let spec = GeneratorSpec::toy(7);
    let gen = Generator::toy(spec.clone(), 5).unwrap();
    let mut worst = 0.0f32;
    let mut probes = Vec::new();
    for l in 3..7 {
        let field = random_field(l, 32, 32, 1, spec.channels_at(l), l as u64);
        let full = gen.g_b(&field).unwrap();
        let halo = halo_for(&spec, l);
        for chunk in [4, 8, 16] {
            let chunked = gen.g_b_chunked(&field, chunk, halo).unwrap();
            worst = worst.max(max_diff(&full, &chunked));
            let short = gen.g_b_chunked_unchecked(&field, chunk, halo - 1).unwrap();
            let d = max_diff(&full, &short);
            ensure!(d > 1e-5, "halo {} at l={l}, chunk {chunk} went undetected (diff {d:e})", halo - 1);
            probes.push(d);
            ensure!(gen.g_b_chunked(&field, chunk, halo - 1).is_err(), "short halo accepted");
        }
    }
    ensure!(worst <= 1e-5, "chunked vs full max diff {worst:e}");
    let weakest = probes.iter().cloned().fold(f32::INFINITY, f32::min);
    Ok(format!("max diff {worst:e}; halo-1 probes all detected (smallest diff {weakest:.3e})"))
}

fn output_size() -> Outcome {
    let mut cases = 0;
    for n in 4..=8 {
        let spec = GeneratorSpec {
            levels: n,
            latent_dim: 8,
            channels: vec![2; n - 1],
            leaky_slope: 0.2,
            use_pixel_norm: true,
        };
        let gen = Generator::toy(spec.clone(), n as u64).unwrap();
        for l in 2..n {
            for (w, h) in [(1, 1), (2, 3), (5, 2), (3, 7)] {
                let field = random_field(l, w, h, 1, 2, cases);
                let img = gen.g_b(&field).unwrap();
                let s = 1usize << (n - l);
                ensure!(img.shape() == (3, s * h, s * w), "n={n} l={l} {w}x{h}: got {:?}", img.shape());
                ensure!(spec.image_size(l, w, h) == (s * w, s * h), "image_size formula n={n} l={l}");
                let chunked = gen.g_b_chunked(&field, 2, halo_for(&spec, l)).unwrap();
                ensure!(chunked.shape() == img.shape(), "chunked shape n={n} l={l}");
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (n, l, w, h) cases exact"))
}

fn small_bank(gen: &Generator, level: usize, count: usize, crop: usize, seed: u64) -> SampleBank {
    let mut bank = build_bank(gen, BankParams { level, count, crop, representative_size: 8, seed }).unwrap();
    bank.cluster(4, 30, seed).unwrap();
    bank
}

fn guidance_noise(bank: &SampleBank, cells_x: usize, cells_y: usize, px_per_cell: usize, seed: u64) -> GuidanceMap {
    let mut rng = Rng::new(seed);
    let img = Tensor::from_fn(3, cells_y * px_per_cell, cells_x * px_per_cell, |_, _, _| 0.4 * rng.normal());
    GuidanceMap::for_bank(img, cells_x, cells_y, bank).unwrap()
}

fn edit_locality() -> Outcome {
    let spec = GeneratorSpec::toy(7);
    let gen = Generator::toy(spec.clone(), 77).unwrap();
    let mut edits = 0;
    let mut dirty_area = 0;
    for (level, crop, cells) in [(3, 2, 7), (5, 4, 5)] {
        let bank = small_bank(&gen, level, 48, crop, level as u64);
        let mut state =
            initial_tiling(&bank, guidance_noise(&bank, cells, cells, 4, 1), EnergyParams::default()).unwrap();
        state.render(&gen).unwrap();
        let mut editor = Editor::new(state);
        let mut rng = Rng::new(level as u64);
        let s = spec.scale_from(level);
        let halo_px = s * halo_for(&spec, level);
        for i in 0..100 {
            let (cx, cy) = (rng.below(cells), rng.below(cells));
            let cell = Rect::new(cx, cy, 1, 1);
            let cmd = match i % 4 {
                0 => EditCommand::Brush { cells: cell, cluster: rng.below(4) as u32, seed: i },
                1 => EditCommand::Noise { cells: cell, sigma: 0.5, seed: i },
                2 => EditCommand::Interpolate {
                    cell: (cx, cy),
                    a: LatentSource::Sample(rng.below(48) as u32),
                    b: LatentSource::Cell(rng.below(cells), rng.below(cells)),
                    t: rng.unit() as f32,
                },
                _ => EditCommand::Clone {
                    source: Rect::new(rng.below(cells), rng.below(cells), 1, 1),
                    dest: (cx, cy),
                    shuffle: false,
                    seed: i,
                },
            };
            let before = editor.state().image().unwrap().clone();
            let dirty = editor.apply(Some(&gen), &bank, cmd).unwrap();
            let full = gen.g_b(editor.state().field()).unwrap();
            ensure!(
                editor.state().image().unwrap() == &full,
                "spliced image differs from full render (edit {i}, l={level})"
            );
            // The expected region is computed here from first principles.
            let footprint = Rect::new(cx * crop * s, cy * crop * s, crop * s, crop * s);
            let allowed = footprint.dilate_within(halo_px, full.width(), full.height());
            ensure!(
                dirty.pixels.is_empty() || allowed.union(&dirty.pixels) == allowed,
                "dirty rect {:?} exceeds dilated footprint {allowed:?}",
                dirty.pixels
            );
            let (_, h, w) = full.shape();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        if !allowed.contains(x, y) && before.get(c, y, x).to_bits() != full.get(c, y, x).to_bits() {
                            return Err(format!("pixel ({x}, {y}) outside {allowed:?} changed (edit {i}, l={level})"));
                        }
                    }
                }
            }
            dirty_area += dirty.pixels.area();
            edits += 1;
        }
    }
    Ok(format!(
        "{edits} single-cell edits, all outside pixels bitwise unchanged (mean dirty area {} px)",
        dirty_area / edits
    ))
}

// Independent energy oracle: plain f64 loops over an explicit index map.

fn oracle_strip(a: &Tensor, b: &Tensor, shift: usize, vertical: bool) -> f64 {
    let (c, h, w) = a.shape();
    let mut s = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (ya, xa) = (y, x);
                let inside = if vertical { ya >= shift } else { xa >= shift };
                if !inside {
                    continue;
                }
                let (yb, xb) = if vertical { (ya - shift, xa) } else { (ya, xa - shift) };
                let d = a.get(ch, ya, xa) as f64 - b.get(ch, yb, xb) as f64;
                s += d * d;
            }
        }
    }
    s.sqrt()
}

fn oracle_edge(a: &Sample, b: &Sample, crop: usize, vertical: bool, p: &EnergyParams) -> f64 {
    let tile = a.tile.width();
    let r = a.representative.width();
    let dl = if crop >= tile { 0.0 } else { oracle_strip(&a.tile, &b.tile, crop, vertical) };
    let shift_px = crop * r / tile;
    let dv = if shift_px >= r { 0.0 } else { oracle_strip(&a.representative, &b.representative, shift_px, vertical) };
    let dc = if a.cluster == b.cluster { 0.0 } else { 1.0 };
    p.lambda_visual * dv + p.lambda_latent * dl + p.lambda_cluster * dc
}

/// Bilinear, clamp-to-edge resampling of the guidance under a cell's full tile.
#[allow(clippy::too_many_arguments)]
fn oracle_crop(
    img: &Tensor,
    cells_x: usize,
    cells_y: usize,
    crop: usize,
    tile: usize,
    r: usize,
    cx: usize,
    cy: usize,
) -> Tensor {
    let sx = img.width() as f64 / (cells_x * crop) as f64;
    let sy = img.height() as f64 / (cells_y * crop) as f64;
    // The cropped window sits at the integer offset (T - c) / 2 in its tile.
    let half = ((tile - crop) / 2) as f64;
    let sample = |c: usize, u: f64, v: f64| {
        let u = u.max(0.0).min((img.width() - 1) as f64);
        let v = v.max(0.0).min((img.height() - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let g = |y, x| img.get(c, y, x) as f64;
        (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy) + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy
    };
    Tensor::from_fn(3, r, r, |c, j, i| {
        let u = (cx as f64 * crop as f64 - half) * sx + (i as f64 + 0.5) * tile as f64 * sx / r as f64 - 0.5;
        let v = (cy as f64 * crop as f64 - half) * sy + (j as f64 + 0.5) * tile as f64 * sy / r as f64 - 0.5;
        sample(c, u, v) as f32
    })
}

fn oracle_unary(s: &Sample, target: &Tensor) -> f64 {
    s.representative
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn oracle_total(state: &FieldState, bank: &SampleBank, targets: &[Tensor]) -> f64 {
    let f = state.field();
    let (nx, ny) = (f.cells_x(), f.cells_y());
    let at = |x, y| bank.sample(f.provenance(x, y).sample.unwrap()).unwrap();
    let mut e = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            e += oracle_unary(at(x, y), &targets[y * nx + x]);
            if x + 1 < nx {
                e += oracle_edge(at(x, y), at(x + 1, y), f.cell_size(), false, state.params());
            }
            if y + 1 < ny {
                e += oracle_edge(at(x, y), at(x, y + 1), f.cell_size(), true, state.params());
            }
        }
    }
    e
}

fn mrf_oracle() -> Outcome {
    let spec = GeneratorSpec {
        levels: 6,
        latent_dim: 16,
        channels: vec![8, 6, 4, 4, 3],
        leaky_slope: 0.2,
        use_pixel_norm: true,
    };
    let gen = Generator::toy(spec, 3).unwrap();
    let mut worst_rel = 0.0f64;
    let mut matches = 0;
    let mut configs = 0;
    for (count, crop, nx, ny, seed) in [(256, 2, 4, 4, 1u64), (64, 4, 3, 2, 2), (17, 1, 4, 3, 3), (200, 8, 2, 4, 4)] {
        let level = 3;
        let bank = small_bank(&gen, level, count, crop, seed);
        let guidance = guidance_noise(&bank, nx, ny, 5, seed);
        let targets: Vec<Tensor> = Rect::new(0, 0, nx, ny)
            .cells()
            .map(|(x, y)| oracle_crop(guidance.image(), nx, ny, crop, bank.tile_size(), 8, x, y))
            .collect();
        for (i, (x, y)) in Rect::new(0, 0, nx, ny).cells().enumerate() {
            let d = max_diff(&targets[i], guidance.crop_for(x, y));
            ensure!(d <= 1e-5, "guidance crop ({x}, {y}) differs from oracle by {d:e}");
        }
        let params = EnergyParams { top_k: 6, ..Default::default() };
        let mut state = initial_tiling(&bank, guidance, params).unwrap();
        for (i, (x, y)) in Rect::new(0, 0, nx, ny).cells().enumerate() {
            let scores: Vec<f64> = bank.samples().iter().map(|s| oracle_unary(s, &targets[i])).collect();
            let best = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))).unwrap();
            let got = state.field().provenance(x, y).sample.unwrap() as usize;
            // Ties at f32 resolution may legitimately resolve differently.
            ensure!(
                got == best || (scores[got] - scores[best]).abs() <= 1e-6 * scores[best],
                "initial tiling ({x}, {y}): got {got}, exhaustive argmin {best}"
            );
        }
        let mut rng = Rng::new(seed);
        for (x, y) in Rect::new(0, 0, nx, ny).cells() {
            state.place_sample(&bank, x, y, rng.below(count) as u32).unwrap();
        }
        for round in 0..3 {
            let oracle = oracle_total(&state, &bank, &targets);
            for got in [state.energy().unwrap().total, state.total_energy(&bank).unwrap().total] {
                let rel = (got - oracle).abs() / oracle;
                worst_rel = worst_rel.max(rel);
                ensure!(rel <= 1e-5, "total energy {got} vs oracle {oracle} (rel {rel:e})");
            }
            for (i, (x, y)) in Rect::new(0, 0, nx, ny).cells().enumerate() {
                let d = better_match(&state, &bank, x, y, f64::NEG_INFINITY).unwrap();
                let mut by_unary: Vec<(f64, usize)> =
                    bank.samples().iter().map(|s| (oracle_unary(s, &targets[i]), s.id as usize)).collect();
                by_unary.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut candidates: Vec<usize> = by_unary.iter().take(params.top_k).map(|c| c.1).collect();
                candidates.push(d.incumbent as usize);
                let mut best = (f64::INFINITY, usize::MAX);
                for &c in &candidates {
                    let mut trial = state.clone();
                    trial.place_sample(&bank, x, y, c as u32).unwrap();
                    let e = oracle_total(&trial, &bank, &targets);
                    if e < best.0 - 1e-9 * e.abs() || ((e - best.0).abs() <= 1e-9 * e.abs() && c < best.1) {
                        best = (e, c);
                    }
                }
                let mut chosen = state.clone();
                chosen.place_sample(&bank, x, y, d.chosen).unwrap();
                let e_chosen = oracle_total(&chosen, &bank, &targets);
                ensure!(
                    d.chosen as usize == best.1 || (e_chosen - best.0).abs() <= 1e-6 * best.0,
                    "better_match ({x}, {y}) round {round}: chose {} (E={e_chosen}), oracle {} (E={})",
                    d.chosen,
                    best.1,
                    best.0
                );
                matches += 1;
                if round < 2 {
                    state.place_sample(&bank, x, y, d.chosen).unwrap();
                }
            }
        }
        configs += 1;
    }
    Ok(format!(
        "{configs} bank/field configs, {matches} better_match decisions agree; energy rel err <= {worst_rel:.1e}"
    ))
}

fn refinement_monotonicity() -> Outcome {
    let spec = GeneratorSpec {
        levels: 6,
        latent_dim: 16,
        channels: vec![8, 6, 4, 4, 3],
        leaky_slope: 0.2,
        use_pixel_norm: true,
    };
    let gen = Generator::toy(spec, 9).unwrap();
    let bank = small_bank(&gen, 3, 128, 2, 5);
    let mut accepted = 0;
    let mut early = 0;
    for seed in 0..5u64 {
        let guidance = guidance_noise(&bank, 6, 6, 4, seed);
        let params =
            EnergyParams { threshold: Threshold::Absolute(0.0), max_refine_steps: Some(500), ..Default::default() };
        let mut state = initial_tiling(&bank, guidance.clone(), params).unwrap();
        let mut refiner = Refiner::new(&state, seed).unwrap();
        while let Some(step) = refiner.step(&mut state, &bank).unwrap() {
            accepted += usize::from(step.decision.changed());
        }
        let trace = refiner.trace();
        ensure!(trace.len() == 501, "seed {seed}: {} trace entries", trace.len());
        if let Some(i) = trace.windows(2).position(|w| w[1] > w[0]) {
            return Err(format!("seed {seed}: energy rose at step {} ({} -> {})", i + 1, trace[i], trace[i + 1]));
        }
        ensure!(refiner.finished(&state) == Some(StopReason::StepCap), "seed {seed}: step cap not reported");
        let full = state.total_energy(&bank).unwrap().total;
        ensure!((full - trace[500]).abs() <= 1e-4 * full, "seed {seed}: tracked energy drifted from recompute");

        let params =
            EnergyParams { threshold: Threshold::Relative(0.97), max_refine_steps: Some(500), ..Default::default() };
        let mut state = initial_tiling(&bank, guidance, params).unwrap();
        let mut refiner = Refiner::new(&state, seed).unwrap();
        while refiner.step(&mut state, &bank).unwrap().is_some() {}
        ensure!(refiner.finished(&state) == Some(StopReason::Threshold), "seed {seed}: threshold stop not reached");
        ensure!(refiner.steps() < 500, "seed {seed}: threshold stop used the whole cap");
        ensure!(*refiner.trace().last().unwrap() <= refiner.threshold(), "seed {seed}: stopped above threshold");
        early += refiner.steps();
    }
    Ok(format!(
        "5 seeds x 500 steps non-increasing ({accepted} accepted moves); threshold stops after {:.0} steps on average",
        early as f64 / 5.0
    ))
}

fn clustering() -> Outcome {
    let spec = GeneratorSpec::toy(7);
    let gen = Generator::toy(spec, 7).unwrap();
    let params = BankParams { level: 3, count: 10_000, crop: 2, representative_size: 16, seed: 2024 };
    let start = Instant::now();
    let mut bank = build_bank(&gen, params).unwrap();
    let km = bank.cluster(10, 100, 1).unwrap();
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(300), "bank build + clustering took {t:.1?}, limit 300 s");
    if let Some(i) = km.inertia.windows(2).position(|w| w[1] > w[0]) {
        return Err(format!("inertia rose at iteration {}: {} -> {}", i + 1, km.inertia[i], km.inertia[i + 1]));
    }
    let mut off = 0;
    for s in bank.samples() {
        let rep = s.representative.values();
        let d: Vec<f64> = bank
            .centers()
            .iter()
            .map(|c| c.values().iter().zip(rep).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
            .collect();
        let own = d[s.cluster.unwrap() as usize];
        if d.iter().any(|&o| o < own) {
            off += 1;
        }
    }
    ensure!(off == 0, "{off} samples not assigned to their nearest center");
    let mut again = build_bank(&gen, params).unwrap();
    again.cluster(10, 100, 1).unwrap();
    ensure!(again.to_bytes() == bank.to_bytes(), "second build differs");
    Ok(format!(
        "N=10000 k=10 r=16: {} Lloyd iterations, converged={}, inertia {:.1} -> {:.1}, deterministic, {t:.1?}",
        km.iterations,
        km.converged,
        km.inertia[0],
        km.inertia.last().unwrap()
    ))
}

fn throughput_field() -> (Generator, LatentField) {
    let spec = GeneratorSpec::toy(7);
    let gen = Generator::toy(spec.clone(), 64).unwrap();
    (gen, random_field(3, 64, 64, 2, spec.channels_at(3), 64))
}

fn throughput_single() -> Outcome {
    let (gen, field) = throughput_field();
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let img = pool.install(|| gen.g_b_chunked(&field, 32, gen.halo(3))).unwrap();
    let t = start.elapsed();
    let mp = (img.width() * img.height()) as f64 / 1e6;
    ensure!(t < Duration::from_secs(120), "{mp:.1} MP took {t:.1?}, limit 120 s");
    Ok(format!("64x64 cells (c=2, l=3, n=7) -> {}x{} ({mp:.1} MP) in {t:.1?} on one thread", img.width(), img.height()))
}

fn throughput_parallel() -> Outcome {
    let (gen, field) = throughput_field();
    let halo = gen.halo(3);
    let t0 = Instant::now();
    let single = gen.g_b_chunked_parallel(&field, 16, halo, 1).unwrap();
    let t1 = t0.elapsed();
    let t0 = Instant::now();
    let multi = gen.g_b_chunked_parallel(&field, 16, halo, 8).unwrap();
    let t8 = t0.elapsed();
    ensure!(single == multi, "8-thread output differs from 1-thread output");
    let speedup = t1.as_secs_f64() / t8.as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    ensure!(
        speedup >= 3.0,
        "speedup {speedup:.2}x on 8 threads (1 thread {t1:.1?}, 8 threads {t8:.1?}); host exposes {cores} hardware thread(s); outputs identical"
    );
    Ok(format!("{speedup:.2}x on 8 threads ({t1:.1?} -> {t8:.1?}), outputs identical"))
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn golden(name: &str, bytes: &[u8]) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let stored = std::fs::read(&path).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()))?;
    ensure!(stored == bytes, "{name}: freshly built bytes differ from the committed golden file");
    Ok(())
}

fn read_golden(name: &str) -> Result<Vec<u8>, String> {
    std::fs::read(golden_dir().join(name)).map_err(|e| format!("{name}: {e}"))
}

fn format_round_trips() -> Outcome {
    let spec =
        GeneratorSpec { levels: 5, latent_dim: 8, channels: vec![4, 4, 3, 3], leaky_slope: 0.2, use_pixel_norm: true };
    let gen = Generator::toy(spec, 2024).unwrap();
    let mut bank =
        build_bank(&gen, BankParams { level: 3, count: 24, crop: 2, representative_size: 8, seed: 7 }).unwrap();
    bank.cluster(3, 50, 7).unwrap();
    let mut rng = Rng::new(3);
    let img = Tensor::from_fn(3, 16, 20, |_, _, _| 0.4 * rng.normal());
    let guidance = GuidanceMap::for_bank(img, 5, 4, &bank).unwrap();
    let state = initial_tiling(&bank, guidance, EnergyParams::default()).unwrap();
    let field = field_to_bytes(state.field(), &bank.fingerprint());
    let mut editor = Editor::new(state.clone());
    let actions = vec![
        Action::Edit(EditCommand::Brush { cells: Rect::new(0, 0, 2, 2), cluster: 1, seed: 3 }),
        Action::Edit(EditCommand::Clone { source: Rect::new(0, 0, 2, 2), dest: (3, 2), shuffle: true, seed: 5 }),
        Action::Edit(EditCommand::Noise { cells: Rect::new(1, 1, 3, 2), sigma: 0.1, seed: 8 }),
        Action::Undo,
        Action::Redo,
        Action::Edit(EditCommand::Interpolate {
            cell: (4, 0),
            a: LatentSource::Sample(2),
            b: LatentSource::Cell(0, 3),
            t: 0.375,
        }),
        Action::Edit(EditCommand::Guidance { at: (4, 4), patch: Tensor::filled(3, 3, 5, 0.25) }),
    ];
    for a in &actions {
        editor.act(Some(&gen), &bank, a.clone()).map_err(|e| e.to_string())?;
    }
    let log = format_log(&actions);
    let edited = field_to_bytes(editor.state().field(), &bank.fingerprint());

    golden("toy.tgw", &gen.to_bytes())?;
    golden("toy.tgb", &bank.to_bytes())?;
    golden("toy.tgf", &field)?;
    golden("edits.log", log.as_bytes())?;
    golden("edited.tgf", &edited)?;

    let gen_back = Generator::from_bytes(&read_golden("toy.tgw")?).map_err(|e| e.to_string())?;
    ensure!(gen_back.to_bytes() == read_golden("toy.tgw")?, "TGW1 re-serialisation differs");
    let bank_back = SampleBank::from_bytes_for(&read_golden("toy.tgb")?, &gen_back).map_err(|e| e.to_string())?;
    ensure!(bank_back.to_bytes() == read_golden("toy.tgb")?, "TGB1 re-serialisation differs");
    let field_back = field_from_bytes_for(&read_golden("toy.tgf")?, &bank_back).map_err(|e| e.to_string())?;
    ensure!(
        field_to_bytes(&field_back, &bank_back.fingerprint()) == read_golden("toy.tgf")?,
        "TGF1 re-serialisation differs"
    );
    let (_, edited_back) = field_from_bytes(&read_golden("edited.tgf")?).map_err(|e| e.to_string())?;
    ensure!(
        field_to_bytes(&edited_back, &bank_back.fingerprint()) == read_golden("edited.tgf")?,
        "edited TGF1 differs"
    );

    let text = String::from_utf8(read_golden("edits.log")?).map_err(|e| e.to_string())?;
    let parsed = parse_log(&text).map_err(|e| e.to_string())?;
    ensure!(format_log(&parsed) == text, "command log re-format differs");
    let guidance = state.guidance().clone();
    let replay_state =
        FieldState::new(field_back, guidance, &bank_back, EnergyParams::default()).map_err(|e| e.to_string())?;
    let mut replayed = Editor::new(replay_state);
    replay(&mut replayed, None, &bank_back, &parsed).map_err(|e| e.to_string())?;
    ensure!(
        field_to_bytes(replayed.state().field(), &bank_back.fingerprint()) == read_golden("edited.tgf")?,
        "replaying the golden log does not reproduce the golden edited field"
    );
    Ok(format!(
        "TGW1 {} B, TGB1 {} B, TGF1 {} B, log {} records: all byte-exact",
        gen.to_bytes().len(),
        bank.to_bytes().len(),
        field.len(),
        parsed.len()
    ))
}

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
    host_limited: bool,
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "split-consistency", run: split_consistency, host_limited: false },
        Criterion { name: "chunked-exactness", run: chunked_exactness, host_limited: false },
        Criterion { name: "output-size-formula", run: output_size, host_limited: false },
        Criterion { name: "edit-locality", run: edit_locality, host_limited: false },
        Criterion { name: "mrf-oracle-equivalence", run: mrf_oracle, host_limited: false },
        Criterion { name: "refinement-monotonicity", run: refinement_monotonicity, host_limited: false },
        Criterion { name: "clustering", run: clustering, host_limited: false },
        Criterion { name: "throughput-single-thread", run: throughput_single, host_limited: false },
        Criterion { name: "throughput-parallel-speedup", run: throughput_parallel, host_limited: true },
        Criterion { name: "format-round-trips", run: format_round_trips, host_limited: false },
    ];
    let strict = std::env::var_os("TILEGAN_STRICT_ACCEPTANCE").is_some();
    let mut hard = 0;
    let mut soft = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {}: {detail}", c.name),
            Err(detail) if c.host_limited => {
                println!("FAIL {} [host-limited]: {detail}", c.name);
                soft += 1;
            }
            Err(detail) => {
                println!("FAIL {}: {detail}", c.name);
                hard += 1;
            }
        }
    }
    println!("acceptance: {} of {ran} passed, {hard} failed, {soft} host-limited failures", ran - hard - soft);
    if hard > 0 || (strict && soft > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
