//! Property tests for the checkpoint container: arbitrary weight maps
//! survive a write→read round trip exactly, and rewriting the result
//! reproduces the original bytes.

use proptest::prelude::*;

use mergeforge_core::checkpoint::{checkpoint_bytes, parse_checkpoint, WeightMap};
use mergeforge_core::tensor::Tensor;

fn tensor_name() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z][a-z0-9_.]{0,18}")
        .expect("valid regex")
        .prop_filter("metadata key is reserved", |s| s != "__metadata__")
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (proptest::collection::vec(1usize..5, 1..3)).prop_flat_map(|shape| {
        let numel: usize = shape.iter().product();
        proptest::collection::vec(-1e6f32..1e6f32, numel).prop_map(move |values| {
            // Payloads are f32 on disk; generating on the f32 grid makes the
            // round trip exact.
            let data = values.iter().map(|&v| v as f64).collect();
            Tensor::new(shape.clone(), data).unwrap()
        })
    })
}

fn weight_map_strategy() -> impl Strategy<Value = WeightMap> {
    (
        proptest::collection::btree_map(tensor_name(), tensor_strategy(), 0..6),
        proptest::collection::btree_map("[a-z]{1,6}", "[a-z0-9 ]{0,10}", 0..3),
    )
        .prop_map(|(tensors, metadata)| WeightMap { tensors, metadata })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip_preserves_values_and_bytes(map in weight_map_strategy()) {
        let bytes = checkpoint_bytes(&map);
        let back = parse_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn header_length_prefix_is_consistent(map in weight_map_strategy()) {
        let bytes = checkpoint_bytes(&map);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        prop_assert!(bytes.len() >= 8 + header_len);
        let header = &bytes[8..8 + header_len];
        prop_assert!(serde_json::from_slice::<serde_json::Value>(header).is_ok());
    }
}
