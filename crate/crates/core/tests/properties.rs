use fit_core::backbone::{Backbone, BackboneSpec, FilmLayer, FilmParams};
use fit_core::data::{load_csv, save_csv, LabelledDataset};
use fit_core::fed::{aggregate_films, derive_seed, partition_clients, FedConfig};
use fit_core::head::{build_cache, estimate_stats, ClassifierCache, CovarianceWeights, HeadVariant};
use fit_core::Matrix;
use proptest::prelude::*;

fn film_strategy() -> impl Strategy<Value = FilmParams> {
    prop::collection::vec(1..6usize, 1..4).prop_flat_map(|widths| {
        widths
            .into_iter()
            .map(|w| {
                (
                    prop::collection::vec(-3.0..3.0f64, w),
                    prop::collection::vec(-3.0..3.0f64, w),
                )
                    .prop_map(|(g, b)| FilmLayer::new(g, b).unwrap())
            })
            .collect::<Vec<_>>()
            .prop_map(FilmParams::new)
    })
}

/// Rows of `dim` features, every class in `0..classes` at least twice.
fn labelled(classes: usize, dim: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    prop::collection::vec(prop::collection::vec(-4.0..4.0f64, dim), 2 * classes..3 * classes + 6)
        .prop_map(move |rows| {
            let labels = (0..rows.len()).map(|i| i % classes).collect();
            (rows, labels)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn film_blob_round_trips(psi in film_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("psi.bin");
        psi.save(&p).unwrap();
        let back = FilmParams::load(&p).unwrap();
        prop_assert_eq!(&back, &psi);
        prop_assert_eq!(FilmParams::from_flat(&psi.widths(), &psi.flatten()).unwrap(), psi);
    }

    #[test]
    fn averaging_copies_is_identity(psi in film_strategy(), n in 1..6usize) {
        let copies = vec![psi.clone(); n];
        let avg = aggregate_films(&copies).unwrap();
        for (a, b) in avg.flatten().iter().zip(psi.flatten()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn posteriors_normalize_and_cache_round_trips(
        (rows, labels) in (1..5usize, 1..5usize).prop_flat_map(|(c, d)| labelled(c, d)),
        e in (0.0..2.0f64, 0.0..2.0f64, 0.1..2.0f64),
        variant in prop_oneof![Just(HeadVariant::Qda), Just(HeadVariant::Lda), Just(HeadVariant::ProtoNets)],
    ) {
        let classes = labels.iter().max().unwrap() + 1;
        let stats = estimate_stats(&Matrix::from_rows(&rows), &labels, classes).unwrap();
        let total: f64 = stats.priors.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let w = CovarianceWeights::from_values([e.0, e.1, e.2]).unwrap();
        let cache = build_cache(&stats, &w, variant, false).unwrap();
        for x in &rows {
            let lp = cache.predict_log_probs(x).unwrap();
            let s: f64 = lp.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.bin");
        cache.save(&p).unwrap();
        prop_assert_eq!(ClassifierCache::load(&p).unwrap(), cache);
    }

    #[test]
    fn csv_round_trips((rows, labels) in (1..4usize, 1..6usize).prop_flat_map(|(c, d)| labelled(c, d))) {
        let classes = labels.iter().max().unwrap() + 1;
        let d = LabelledDataset::new(Matrix::from_rows(&rows), labels, classes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&d, &p).unwrap();
        prop_assert_eq!(load_csv(&p).unwrap(), d);
    }

    #[test]
    fn partition_shapes(
        num_clients in 1..8usize,
        cpc in 1..4usize,
        shots in 1..4usize,
        disjoint in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let classes = 6;
        let per = 8 * 4;
        let rows: Vec<Vec<f64>> = (0..classes * per).map(|i| vec![i as f64]).collect();
        let labels = (0..classes * per).map(|i| i % classes).collect();
        let d = LabelledDataset::new(Matrix::from_rows(&rows), labels, classes).unwrap();
        let cfg = FedConfig {
            num_clients,
            classes_per_client: cpc,
            shots_per_class: shots,
            clients_per_round: 1,
            disjoint_examples: disjoint,
            seed,
            ..FedConfig::default()
        };
        let clients = partition_clients(&d, &cfg).unwrap();
        prop_assert_eq!(clients.len(), num_clients);
        let mut seen = std::collections::HashSet::new();
        for (i, c) in clients.iter().enumerate() {
            prop_assert_eq!(c.id, i);
            prop_assert_eq!(c.classes.len(), cpc);
            prop_assert!(c.classes.windows(2).all(|w| w[0] < w[1]));
            let counts = c.data.class_counts();
            for &k in &c.classes {
                prop_assert_eq!(counts[k], shots);
            }
            prop_assert_eq!(c.data.len(), cpc * shots);
            if disjoint {
                for r in 0..c.data.len() {
                    prop_assert!(seen.insert(c.data.example(r)[0].to_bits()));
                }
            }
        }
        prop_assert_eq!(partition_clients(&d, &cfg).unwrap(), clients);
    }

    #[test]
    fn derived_seeds_separate_streams(seed in any::<u64>(), a in 0..1000u64, b in 0..1000u64) {
        let s = derive_seed(seed, 1, a, b);
        prop_assert_ne!(s, derive_seed(seed, 2, a, b));
        prop_assert_ne!(s, derive_seed(seed, 1, a + 1, b));
        prop_assert_ne!(s, derive_seed(seed, 1, a, b + 1));
        prop_assert_ne!(s, derive_seed(seed.wrapping_add(1), 1, a, b));
    }

    #[test]
    fn batch_and_single_forward_agree(
        psi_seed in any::<u64>(),
        x in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 4), 1..6),
    ) {
        let bb = Backbone::new(BackboneSpec::mlp(4, vec![6], 3, psi_seed)).unwrap();
        let flat: Vec<f64> = bb.identity_film().flatten().iter().enumerate().map(|(i, v)| v + 0.1 * (i % 5) as f64).collect();
        let psi = FilmParams::from_flat(&bb.film_widths(), &flat).unwrap();
        let batch = bb.forward_batch(&psi, &Matrix::from_rows(&x)).unwrap();
        prop_assert_eq!(batch.shape(), (x.len(), 3));
        for (i, row) in x.iter().enumerate() {
            let single = bb.forward(&psi, row).unwrap();
            for (a, b) in single.iter().zip(batch.row(i)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
