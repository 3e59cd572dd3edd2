use proptest::prelude::*;

use stm_core::curate::{generate_synthetic, GeneratorSpec, LabeledDataset, Split};
use stm_core::distill::{
    init_syn, match_loss, should_expand, Checkpoint, DistillConfig, InitMode, Stm, StmState, SyntheticDataset,
};
use stm_core::nets::{ArchDescriptor, Norm, ParamVector};
use stm_core::teacher::{train_teachers, SgdConfig, TrainingMeta, TrajectoryBuffer, TrajectorySet};
use stm_core::tensor::{rng_tensor, Distribution, Tensor};

fn small_arch() -> ArchDescriptor {
    ArchDescriptor { depth: 1, width: 2, in_channels: 1, in_height: 2, in_width: 2, classes: 2, norm: Norm::None }
}

fn params(seed: u64) -> Vec<f64> {
    let n = small_arch().param_count();
    rng_tensor(&[n], Distribution::StandardNormal, seed).unwrap().data().iter().map(|&v| v as f64).collect()
}

fn pv(values: &[f64]) -> ParamVector {
    ParamVector::new(small_arch(), values.iter().map(|&v| v as f32).collect()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn match_loss_ignores_common_translation(seed in 0u64..10_000, shift in -4.0f64..4.0) {
        let (s, a, t) = (params(seed), params(seed + 1), params(seed + 2));
        let base = match_loss(&pv(&s), &pv(&a), &pv(&t)).unwrap().value;
        let move_ = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let moved = match_loss(&pv(&move_(&s)), &pv(&move_(&a)), &pv(&move_(&t))).unwrap().value;
        prop_assert!(rel(base, moved) < 1e-4, "{base} vs {moved}");
    }

    #[test]
    fn match_loss_ignores_scaling_about_anchor(seed in 0u64..10_000, k in 0.2f64..5.0) {
        let (s, a, t) = (params(seed), params(seed + 1), params(seed + 2));
        let base = match_loss(&pv(&s), &pv(&a), &pv(&t)).unwrap().value;
        let scale = |v: &[f64]| v.iter().zip(&a).map(|(x, c)| c + k * (x - c)).collect::<Vec<_>>();
        let scaled = match_loss(&pv(&scale(&s)), &pv(&a), &pv(&scale(&t))).unwrap().value;
        prop_assert!(rel(base, scaled) < 1e-4, "{base} vs {scaled}");
    }

    #[test]
    fn student_on_target_gives_zero(seed in 0u64..10_000) {
        let (a, t) = (params(seed), params(seed + 1));
        prop_assert_eq!(match_loss(&pv(&t), &pv(&a), &pv(&t)).unwrap().value, 0.0);
    }

    #[test]
    fn expansion_is_monotone_in_lambda(
        series in prop::collection::vec(-10.0f64..10.0, 3..60),
        l1 in 0.01f64..20.0,
        l2 in 0.01f64..20.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        if should_expand(&series, hi) {
            prop_assert!(should_expand(&series, lo));
        }
    }

    #[test]
    fn dataset_round_trips(
        c in 1usize..4, h in 1usize..5, w in 1usize..5, classes in 1usize..6, n in 0usize..12, seed in 0u64..1000,
    ) {
        let len = n * c * h * w;
        let px = if len == 0 { Vec::new() } else { rng_tensor(&[len], Distribution::Uniform01, seed).unwrap().to_vec() };
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
        let conf: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).fract()).collect();
        let splits: Vec<Split> = (0..n).map(|i| [Split::Unsplit, Split::Train, Split::Test][i % 3]).collect();
        let ds = LabeledDataset::new((c, h, w), classes, px, labels, conf, splits).unwrap();
        let back = LabeledDataset::decode(&ds.encode()).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.fingerprint(), ds.fingerprint());
    }

    #[test]
    fn trajectory_round_trips(len in 2usize..6, seed in 0u64..1000, lr in 1e-4f64..1.0) {
        let snaps = (0..len as u64).map(|i| pv(&params(seed * 10 + i))).collect();
        let meta = TrainingMeta {
            seed,
            lr,
            momentum: 0.5,
            batch_size: 8,
            epochs: len - 1,
            dataset_fingerprint: format!("{seed:x}"),
            augment: String::new(),
            final_train_accuracy: 0.75,
            epoch_losses: (0..len - 1).map(|i| 1.0 / (i as f64 + lr)).collect(),
        };
        let b = TrajectoryBuffer::new(snaps, meta).unwrap();
        prop_assert_eq!(TrajectoryBuffer::decode(&b.encode()).unwrap(), b);
    }

    #[test]
    fn fresh_checkpoint_round_trips(
        ipc in 1usize..3, seed in 0u64..1000, lambda in 0.5f64..9.0, clip in prop::option::of(0.01f64..2.0),
    ) {
        let arch = ArchDescriptor { classes: 3, ..small_arch() };
        let images = rng_tensor(&[3 * ipc, 1, 2, 2], Distribution::StandardNormal, seed).unwrap();
        let syn = SyntheticDataset::new(images, 3, ipc, 0.01).unwrap();
        let cfg = DistillConfig { lambda, seed, grad_clip: clip, max_total_iter: Some(seed + 1), ..Default::default() };
        let ck = Checkpoint { arch, stm: Stm::new(cfg, syn).unwrap() };
        prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn controller_keeps_its_invariants(ops in prop::collection::vec((0u8..3, -1.0f64..1.0), 1..200), inc in 1usize..3) {
        let cfg = DistillConfig { lambda: 1.0, max_iter: 10_000, expand_increment: inc, ..Default::default() };
        let mut s = StmState::new(&cfg);
        let mut expansions = 0;
        let mut steps = 0u64;
        for (op, v) in ops {
            match op {
                0 => {
                    let t = s.begin_iteration();
                    steps += 1;
                    prop_assert!(t < s.pool());
                }
                1 => s.record(v),
                _ => {
                    let before = s.ell_val().len();
                    if let Some(e) = s.try_expand() {
                        expansions += 1;
                        prop_assert_eq!(e.series_len, before);
                        prop_assert_eq!(s.iter(), 0);
                        prop_assert!(s.ell_val().is_empty());
                        prop_assert!(e.r < 0.0);
                    }
                }
            }
            prop_assert_eq!(s.pool(), 1 + inc * expansions);
            prop_assert_eq!(s.step(), steps);
            prop_assert!(s.t() < s.pool());
        }
    }
}

fn tiny_set() -> (TrajectorySet, LabeledDataset, ArchDescriptor) {
    let ds = generate_synthetic(&GeneratorSpec::galaxy9(8), 4, 3).unwrap();
    let arch = ArchDescriptor { depth: 1, width: 4, ..ArchDescriptor::convnet(3, 8, 8, 9) };
    let cfg = SgdConfig { epochs: 3, lr: 0.05, momentum: 0.5, batch_size: 12, augment: vec![] };
    let runs = train_teachers(&ds, &arch, &cfg, &[1, 2]).unwrap();
    (TrajectorySet::from_buffers(runs.into_iter().map(|r| r.buffer).collect()).unwrap(), ds, arch)
}

fn pixel_shift(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn gradient_clip_bounds_the_pixel_step() {
    let (set, ds, _) = tiny_set();
    let syn = init_syn(InitMode::Real, &ds, 1, 0.01, 0).unwrap();
    let run = |clip: Option<f64>| {
        let cfg = DistillConfig { syn_steps: 3, lr_pixels: 10.0, grad_clip: clip, max_total_iter: Some(1), ..Default::default() };
        let mut stm = Stm::new(cfg, syn.clone()).unwrap();
        stm.step(&set).unwrap();
        stm.syn().clone()
    };
    let free = run(None);
    let step = pixel_shift(free.images(), syn.images());
    assert!(step > 0.0);

    let loose = run(Some(1e9));
    assert_eq!(loose, free);

    let c = step / 10.0 / 4.0;
    let tight = run(Some(c));
    let clipped = pixel_shift(tight.images(), syn.images());
    assert!((clipped - 10.0 * c).abs() < 1e-3 * 10.0 * c, "{clipped} vs {}", 10.0 * c);
    let (da_free, da_tight) = (free.alpha() - syn.alpha(), tight.alpha() - syn.alpha());
    assert!((da_tight as f64 - da_free as f64 / 4.0).abs() <= 1e-3 * da_free.abs() as f64 + 1e-9);
}

#[test]
fn invalid_clip_is_rejected() {
    for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(DistillConfig { grad_clip: Some(bad), ..Default::default() }.validate().is_err());
    }
}
