use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use proptest::strategy::Strategy;

use tilegan_core::bank::{build_bank, BankParams, SampleBank};
use tilegan_core::editor::{format_log, parse_log, Action, EditCommand, Editor, LatentSource};
use tilegan_core::generator::{halo_for, Generator, GeneratorSpec, LatentField, Rect};
use tilegan_core::synthesis::{field_to_bytes, initial_tiling, EnergyParams, GuidanceMap};
use tilegan_core::tensor::{Rng, Tensor};

fn spec() -> GeneratorSpec {
    GeneratorSpec { levels: 6, latent_dim: 8, channels: vec![4, 4, 3, 3, 2], leaky_slope: 0.2, use_pixel_norm: true }
}

fn fixture() -> (Generator, SampleBank, Editor) {
    let gen = Generator::toy(spec(), 31).unwrap();
    let mut bank =
        build_bank(&gen, BankParams { level: 4, count: 20, crop: 4, representative_size: 8, seed: 2 }).unwrap();
    bank.cluster(3, 20, 2).unwrap();
    let mut rng = Rng::new(1);
    let img = Tensor::from_fn(3, 18, 24, |_, _, _| 0.3 * rng.normal());
    let guidance = GuidanceMap::for_bank(img, 4, 3, &bank).unwrap();
    let mut state = initial_tiling(&bank, guidance, EnergyParams::default()).unwrap();
    state.render(&gen).unwrap();
    (gen, bank, Editor::new(state))
}

fn command() -> impl Strategy<Value = EditCommand> {
    let rect = (0usize..4, 0usize..3, 1usize..3, 1usize..3);
    proptest::prop_oneof![
        (rect.clone(), 0u32..3, 0u64..1000).prop_map(|((x, y, w, h), cluster, seed)| EditCommand::Brush {
            cells: Rect::new(x, y, w, h),
            cluster,
            seed
        }),
        (rect.clone(), 0usize..4, 0usize..3, proptest::bool::ANY, 0u64..1000).prop_map(
            |((x, y, w, h), dx, dy, shuffle, seed)| {
                EditCommand::Clone { source: Rect::new(x, y, w, h), dest: (dx, dy), shuffle, seed }
            }
        ),
        (rect, 0.0f32..1.0, 0u64..1000).prop_map(|((x, y, w, h), sigma, seed)| EditCommand::Noise {
            cells: Rect::new(x, y, w, h),
            sigma,
            seed
        }),
        (0usize..4, 0usize..3, 0u32..20, 0usize..4, 0usize..3, 0.0f32..=1.0).prop_map(|(x, y, a, bx, by, t)| {
            EditCommand::Interpolate { cell: (x, y), a: LatentSource::Sample(a), b: LatentSource::Cell(bx, by), t }
        }),
        (0usize..20, 0usize..15, 1usize..5, 1usize..4, 0u64..100).prop_map(|(x, y, w, h, seed)| {
            let mut rng = Rng::new(seed);
            EditCommand::Guidance { at: (x, y), patch: Tensor::from_fn(3, h, w, |_, _, _| rng.normal()) }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_render_matches_full(w in 1usize..12, h in 1usize..12, level in 2usize..6, chunk in 1usize..9, seed in 0u64..1000) {
        let spec = spec();
        let gen = Generator::toy(spec.clone(), 4).unwrap();
        let mut rng = Rng::new(seed);
        let field = LatentField::from_values(level, 1, Tensor::randn(spec.channels_at(level), h, w, &mut rng)).unwrap();
        let full = gen.g_b(&field).unwrap();
        let chunked = gen.g_b_chunked(&field, chunk, halo_for(&spec, level)).unwrap();
        prop_assert_eq!(full, chunked);
    }

    #[test]
    fn edits_undo_to_identical_bytes(cmds in proptest::collection::vec(command(), 1..8)) {
        let (gen, bank, mut ed) = fixture();
        let start = field_to_bytes(ed.state().field(), &bank.fingerprint());
        let image = ed.state().image().cloned();
        let guidance = ed.state().guidance().clone();
        let mut applied = 0;
        for c in cmds {
            let before = field_to_bytes(ed.state().field(), &bank.fingerprint());
            match ed.apply(Some(&gen), &bank, c) {
                Ok(_) => applied += 1,
                Err(_) => prop_assert_eq!(&field_to_bytes(ed.state().field(), &bank.fingerprint()), &before),
            }
            prop_assert_eq!(ed.state().image().unwrap(), &gen.g_b(ed.state().field()).unwrap());
        }
        for _ in 0..applied {
            prop_assert!(ed.undo(Some(&gen), &bank).unwrap().is_some());
        }
        prop_assert_eq!(field_to_bytes(ed.state().field(), &bank.fingerprint()), start);
        prop_assert_eq!(ed.state().image().cloned(), image);
        prop_assert_eq!(ed.state().guidance(), &guidance);
    }

    #[test]
    fn command_log_text_round_trips(cmds in proptest::collection::vec(command(), 0..10), undo_at in 0usize..10) {
        let mut actions: Vec<Action> = cmds.into_iter().map(Action::Edit).collect();
        actions.insert(undo_at.min(actions.len()), Action::Undo);
        actions.push(Action::Redo);
        let text = format_log(&actions);
        prop_assert_eq!(parse_log(&text).unwrap(), actions);
    }

    #[test]
    fn incremental_energy_matches_recompute(moves in proptest::collection::vec((0usize..4, 0usize..3, 0u32..20), 1..60)) {
        let (_, bank, ed) = fixture();
        let mut state = ed.into_state();
        for (x, y, id) in moves {
            state.place_sample(&bank, x, y, id).unwrap();
        }
        let inc = state.energy().unwrap().total;
        let full = state.total_energy(&bank).unwrap().total;
        prop_assert!((inc - full).abs() <= 1e-4 * full);
    }
}

#[test]
fn guidance_patch_over_one_cell_marks_it_and_overlapping_neighbours() {
    let (_, _, ed) = fixture();
    let g = ed.state().guidance();
    // 24x18 map over 4x3 cells of 4 latent units: 1.5 px per unit.
    let cell = Rect::new(6, 6, 6, 6);
    let touched = g.cells_touching(&cell);
    let expected: Vec<(usize, usize)> =
        Rect::new(0, 0, 4, 3).cells().filter(|&(x, y)| !g.crop_region(x, y).intersect(&cell).is_empty()).collect();
    assert_eq!(touched, expected);
    assert!(touched.contains(&(1, 1)));
    assert!(touched.len() > 1);
    assert_eq!(g.cells_touching(&Rect::new(0, 0, 24, 18)).len(), 12);
}
