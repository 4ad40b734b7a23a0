use proptest::prelude::*;

use ota::checkpoint::{Checkpoint, CheckpointMeta};
use ota::config::RunConfig;
use ota::data::{sample_few_data, DatasetManifest, ImageRecord, Provenance};
use ota::digg::{build_distill_set, check_mask, make_mask, MaskScheme, MaskSpec};
use ota::irf::make_lr_grid;
use ota::metrics::{fd_score, FeatureBag};
use ota::transformer::{sample_logits, LatentTransformer, LtConfig, SamplingParams};
use ota::vq::{lookup, quantize, Codebook, VqConfig, VqModel};
use ota::{SeededRng, Tensor};

fn codebook_and_latents() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=32, 1usize..=6, 1usize..=16).prop_flat_map(|(k, d, cells)| {
        (
            Just(k),
            Just(d),
            Just(cells),
            prop::collection::vec(-3.0f64..3.0, k * d),
            prop::collection::vec(-3.0f64..3.0, cells * d),
        )
    })
}

fn labeled(n: usize, classes: usize) -> DatasetManifest<f32> {
    let records = (0..n)
        .map(|i| ImageRecord::new(format!("r{i:04}"), Tensor::zeros(&[2, 2, 3]), Some(i % classes)))
        .collect();
    DatasetManifest::new(records, classes, Provenance::Original, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_nearest_and_idempotent((k, d, cells, z, lat) in codebook_and_latents()) {
        let book = Codebook::from_entries(Tensor::new(vec![k, d], z.clone()).unwrap()).unwrap();
        let lat = Tensor::new(vec![1, cells, d], lat).unwrap();
        let (t, q) = quantize(&lat, &book).unwrap();
        prop_assert!(t.tokens.iter().all(|&s| s < k));
        for (i, v) in lat.data().chunks_exact(d).enumerate() {
            let dist = |e: &[f64]| v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let chosen = dist(book.entry(t.tokens[i]));
            prop_assert!((0..k).all(|j| chosen <= dist(book.entry(j))));
        }
        let (t2, q2) = quantize(&q, &book).unwrap();
        prop_assert!(q2.bit_eq(&q));
        // Re-quantizing lands on an identical codeword, possibly a lower duplicate.
        prop_assert!(t2.tokens.iter().zip(&t.tokens).all(|(&a, &b)| a <= b && book.entry(a) == book.entry(b)));
        prop_assert!(lookup(&t, &book).unwrap().bit_eq(&q));
    }

    #[test]
    fn few_data_is_a_sorted_subset(n in 1usize..200, frac in 0.01f64..=1.0, seed in 0u64..1000, strat in any::<bool>()) {
        let d = labeled(n, 4);
        prop_assume!(frac * n as f64 >= 1.0);
        let few = sample_few_data(&d, frac, &mut SeededRng::new(seed, "few"), strat).unwrap();
        let ids: Vec<&str> = few.records().iter().map(|r| r.id.as_str()).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(!few.is_empty() && few.len() <= n);
        if !strat {
            prop_assert_eq!(few.len(), (frac * n as f64 - 1e-9).ceil() as usize);
        }
        let again = sample_few_data(&d, frac, &mut SeededRng::new(seed, "few"), strat).unwrap();
        prop_assert_eq!(few.records().iter().map(|r| &r.id).collect::<Vec<_>>(), again.records().iter().map(|r| &r.id).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed, "ckpt");
        let a = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let mut c = Checkpoint::new(CheckpointMeta::new("test", seed, "d".into()));
        c.insert("a", &a);
        c.insert("b", &b);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&c));
        prop_assert!(back.tensor::<f32>("a").unwrap().bit_eq(&a));
        prop_assert!(back.tensor::<f64>("b").unwrap().bit_eq(&b));
    }

    #[test]
    fn checkpoint_corruption_detected(pos in 0usize..10_000, flip in 1u8..=255) {
        let mut c = Checkpoint::new(CheckpointMeta::new("test", 0, "d".into()));
        c.insert("w", &Tensor::<f32>::full(&[8, 8], 0.5));
        let mut bytes = c.to_bytes();
        let i = pos % bytes.len();
        bytes[i] ^= flip;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn fd_symmetric_and_translation_invariant(
        n in 8usize..30,
        d in 1usize..5,
        shift in -5.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let mut rng = SeededRng::new(seed, "fd");
        let mut draw = |m: f64| {
            let data = (0..n * d).map(|_| m + rng.normal()).collect();
            FeatureBag::new(n, d, data, "p").unwrap()
        };
        let a = draw(0.0);
        let b = draw(1.0);
        let ab = fd_score(&a, &b, 1e-6).unwrap().value;
        let ba = fd_score(&b, &a, 1e-6).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0));
        prop_assert!(ab >= -1e-9);
        let moved = |x: &FeatureBag| FeatureBag::new(x.n, x.d, x.data.iter().map(|v| v + shift).collect(), "p").unwrap();
        let shifted = fd_score(&moved(&a), &moved(&b), 1e-6).unwrap().value;
        prop_assert!((ab - shifted).abs() <= 1e-6 * ab.abs().max(1.0));
    }

    #[test]
    fn lr_grids_are_descending_log_spaced(lo_e in -8i32..-1, span in 1i32..5, n in 2usize..8) {
        let (lo, hi) = (10f64.powi(lo_e), 10f64.powi(lo_e + span));
        let g = make_lr_grid(lo, hi, n).unwrap();
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!(g[0], hi);
        prop_assert_eq!(g[n - 1], lo);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
        let ratios: Vec<f64> = g.windows(2).map(|w| (w[0] / w[1]).ln()).collect();
        prop_assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-9));
    }

    #[test]
    fn masks_are_completable(h in 1usize..9, w in 1usize..9, ratio in 0.01f64..0.99, seed in 0u64..1000, scheme in 0usize..5) {
        let scheme = [MaskScheme::BottomHalf, MaskScheme::TopHalf, MaskScheme::RandomRows, MaskScheme::RandomBlock, MaskScheme::None][scheme];
        let m = make_mask(h, w, &MaskSpec::new(scheme, ratio), &mut SeededRng::new(seed, "mask")).unwrap();
        prop_assert!(check_mask(&m).is_ok());
        prop_assert_eq!(m.cells.len(), h * w);
        match scheme {
            MaskScheme::BottomHalf => prop_assert_eq!(m.count(), (h / 2) * w),
            MaskScheme::TopHalf => prop_assert_eq!(m.count(), (h / 2) * w),
            MaskScheme::RandomBlock => prop_assert_eq!(m.count(), ((ratio * (h * w) as f64).floor() as usize).max(1)),
            MaskScheme::RandomRows => prop_assert!(m.count().is_multiple_of(w) && m.count() >= w),
            MaskScheme::None => prop_assert_eq!(m.count(), 0),
        }
    }

    #[test]
    fn sampling_stays_in_top_k(logits in prop::collection::vec(-5.0f64..5.0, 2..40), k in 1usize..40, t in 0.05f64..3.0, seed in 0u64..1000) {
        let k = k.min(logits.len());
        let s = sample_logits(&logits, &SamplingParams { temperature: t, top_k: k }, &mut SeededRng::new(seed, "s"));
        let better = logits.iter().enumerate().filter(|&(j, &v)| v > logits[s] || (v == logits[s] && j < s)).count();
        prop_assert!(better < k);
    }

    #[test]
    fn config_digest_tracks_every_override(steps in 1usize..10_000, seed in 0u64..1000) {
        let base = RunConfig::default();
        let mut c = base.clone();
        c.set(&format!("irf.stage3.steps={steps}")).unwrap();
        c.set(&format!("seeds.master={seed}")).unwrap();
        prop_assert_eq!(c.irf.stage3.steps, steps);
        prop_assert_eq!(c.seeds.master, seed);
        prop_assert_eq!(c.digest() == base.digest(), steps == base.irf.stage3.steps && seed == base.seeds.master);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back.digest(), c.digest());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn distill_set_counts_per_source(n in 1usize..6, extra in 0usize..9, seed in 0u64..100) {
        let vc = VqConfig { image_size: 8, width: 4, downsample: 1, n_z: 4, codebook_size: 8, ..VqConfig::default() };
        let vq = VqModel::<f32>::new(vc, &mut SeededRng::new(seed, "vq")).unwrap();
        let cfg = LtConfig { layers: 1, heads: 1, dim: 8, mlp_ratio: 2 };
        let lt = LatentTransformer::<f32>::new(cfg, 8, 16, &mut SeededRng::new(seed, "lt")).unwrap();
        let mut rng = SeededRng::new(seed, "img");
        let records = (0..n)
            .map(|i| ImageRecord::new(format!("s{i}"), Tensor::uniform(&[8, 8, 3], 0.5, &mut rng).map(|v| v + 0.5), Some(0)))
            .collect();
        let d = DatasetManifest::new(records, 1, Provenance::Original, None).unwrap();
        let target = n + extra;
        let sampling = SamplingParams { temperature: 1.0, top_k: 8 };
        let set = build_distill_set(&d, target, &vq, &lt, &MaskSpec::default(), &sampling, &SeededRng::new(seed, "g")).unwrap();
        prop_assert_eq!(set.manifest.len(), target);
        prop_assert_eq!(set.manifest.provenance(), Provenance::Pseudo);
        for i in 0..n {
            let c = set.lineage.iter().filter(|l| l.source_id == format!("s{i}")).count();
            prop_assert!(c == target / n || c == target / n + 1);
        }
        prop_assert!(set.lineage.iter().all(|l| l.holds()));
    }
}
