//! Randomized invariants over the metric and augmentation kernels.

use proptest::prelude::*;

use mamkit::augment::line_kernel;
use mamkit::labels::Annotation;
use mamkit::metrics::{aggregate, image_flags, report_in_unit_interval, PredictionRecord};

fn annotation() -> impl Strategy<Value = Annotation> {
    proptest::array::uniform4(0u8..4).prop_map(|c| Annotation::from_classes(c).unwrap())
}

fn records(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    proptest::collection::vec((annotation(), annotation()), 1..max).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (truth, pred))| PredictionRecord {
                id: i as u32,
                truth,
                pred,
            })
            .collect()
    })
}

proptest! {
    // Exact match implies both summed flags wherever they are defined.
    #[test]
    fn exact_match_implies_tp_and_tn(truth in annotation()) {
        let flags = image_flags(&truth, &truth);
        prop_assert!(flags.ac);
        prop_assert!(flags.tp.unwrap_or(true));
        prop_assert!(flags.tn.unwrap_or(true));
    }

    // Every defined report cell is a rational in [0, 1].
    #[test]
    fn report_cells_stay_in_unit_interval(recs in records(40)) {
        let report = aggregate(&recs).unwrap();
        prop_assert!(report_in_unit_interval(&report));
    }

    // Aggregation is order-independent.
    #[test]
    fn aggregate_is_permutation_invariant(recs in records(24), seed in 0u64..1000) {
        let forward = aggregate(&recs).unwrap();
        let mut shuffled = recs.clone();
        mamkit::RngStream::new(seed, "prop/shuffle").shuffle(&mut shuffled);
        prop_assert_eq!(forward, aggregate(&shuffled).unwrap());
    }

    // Line kernels are normalized and nonnegative at every angle.
    #[test]
    fn line_kernels_are_stochastic(size in 3usize..=7, angle in 0.0f64..180.0) {
        let k = line_kernel(size, angle).unwrap();
        prop_assert_eq!(k.len(), size * size);
        prop_assert!(k.iter().all(|&v| v >= 0.0));
        let sum: f64 = k.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}
