use competency::conditions::{fit_hdp, Document, HdpConfig, HdpSampler, Vocabulary};
use competency::guard::{p_miss, parse_requirement, Requirement, TagEq};
use competency::kmeans::{kmeans, KMeansParams};
use competency::metrics::{compute_correctness, CorrectnessMode};
use competency::predictors::ErrorBand;
use competency::scene::{ObstacleKind, TimeOfDay, Weather};
use proptest::prelude::*;

fn tag_strategy() -> impl Strategy<Value = Vec<TagEq>> {
    (
        proptest::option::of(0..TimeOfDay::ALL.len()),
        proptest::option::of(0..Weather::ALL.len()),
        proptest::option::of(0..ObstacleKind::ALL.len()),
    )
        .prop_map(|(t, w, o)| {
            let mut tags = Vec::new();
            tags.extend(t.map(|i| TagEq::Time(TimeOfDay::ALL[i])));
            tags.extend(w.map(|i| TagEq::Weather(Weather::ALL[i])));
            tags.extend(o.map(|i| TagEq::Obstacle(ObstacleKind::ALL[i])));
            tags
        })
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn requirement_format_parse_roundtrip(
        tags in tag_strategy(),
        threshold in 0.01f64..100.0,
        rate in 0.0001f64..=1.0,
    ) {
        let req = Requirement::new(tags, threshold, rate).unwrap();
        let text = req.to_string();
        let back = parse_requirement(&text).unwrap();
        prop_assert_eq!(back, req);
    }

    #[test]
    fn distribution_correctness_dominates_point(
        rows in (2usize..6).prop_flat_map(|k| proptest::collection::vec(
            (distribution(k), 0..k), 1..40)),
        mass in 0.5f64..=1.0,
    ) {
        let (preds, executed): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
        let point = compute_correctness(&preds, &executed, CorrectnessMode::Point, mass).unwrap();
        let dist = compute_correctness(&preds, &executed, CorrectnessMode::Distribution, mass).unwrap();
        prop_assert!(dist >= point);
    }

    #[test]
    fn miss_probability_grows_with_band_width(
        mean in -3.0f64..3.0,
        threshold in 2.0f64..20.0,
        excess in 0.01f64..10.0,
        narrow in 0.0f64..4.0,
        widen in 0.0f64..4.0,
    ) {
        // Estimate far enough out that the mean-corrected error still clears
        // the threshold; then a wider band can only raise the miss risk.
        let estimate = threshold + mean.max(0.0) + excess;
        let band = |w: f64| ErrorBand { q10: mean - w / 2.0, q90: mean + w / 2.0, mean };
        let a = p_miss(estimate, &band(narrow), threshold);
        let b = p_miss(estimate, &band(narrow + widen), threshold);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        if estimate - mean > threshold {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn hdp_counts_conserved_and_theta_on_simplex(
        docs in proptest::collection::vec(proptest::collection::vec(0u32..6, 1..8), 1..6),
        seed in any::<u64>(),
        topics in 2usize..5,
    ) {
        let corpus: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, t)| Document::visual(i as u64, t))
            .collect();
        let config = HdpConfig { topics, sweeps: 20, burn_in: 10, seed, ..HdpConfig::default() };
        let mut sampler = HdpSampler::new(&corpus, 6, config.clone()).unwrap();
        for _ in 0..5 {
            sampler.sweep();
            prop_assert!(sampler.counts_consistent());
            let beta_sum: f64 = sampler.beta().iter().sum();
            prop_assert!((beta_sum - 1.0).abs() < 1e-9);
        }
        let model = fit_hdp(&corpus, &Vocabulary::plain(6), config).unwrap();
        let theta = model.infer(&corpus[0]).unwrap();
        prop_assert!(theta.theta.iter().all(|p| *p >= 0.0));
        prop_assert!((theta.theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_objective_never_increases(
        points in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 4..30),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let fit = kmeans(&points, &KMeansParams::new(k, seed)).unwrap();
        for w in fit.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.objective_history);
        }
        prop_assert!(fit.assignments.iter().all(|a| *a < fit.centroids.len()));
    }
}
