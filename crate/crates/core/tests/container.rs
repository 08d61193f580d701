use nnrw::{model_digest, parse_container, ContainerError, LayerSpec, ModelContainer, WeightTensor};
use proptest::prelude::*;

fn arb_tensor(index: usize) -> impl Strategy<Value = WeightTensor> {
    (prop::collection::vec(1usize..4, 1..=4), any::<u32>()).prop_flat_map(move |(shape, seed)| {
        let len = shape.iter().product::<usize>();
        prop::collection::vec(any::<u32>(), len).prop_map(move |raw| {
            let data = raw.into_iter().map(f32::from_bits).collect();
            WeightTensor::new(format!("t{index}.{seed:x}"), shape.clone(), data).unwrap()
        })
    })
}

fn arb_model() -> impl Strategy<Value = ModelContainer> {
    (0usize..4)
        .prop_flat_map(|n| (0..n).map(arb_tensor).collect::<Vec<_>>())
        .prop_flat_map(|tensors| {
            let convs: Vec<usize> = (0..tensors.len())
                .filter(|&i| tensors[i].shape.len() == 4)
                .collect();
            let picks = if convs.is_empty() {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec((prop::sample::select(convs), 1usize..4, 0usize..3), 0..3)
                    .boxed()
            };
            (Just(tensors), picks)
        })
        .prop_map(|(tensors, picks)| {
            let manifest = picks
                .into_iter()
                .map(|(weight_tensor, stride, padding)| LayerSpec {
                    weight_tensor,
                    stride,
                    padding,
                })
                .collect();
            ModelContainer::new(tensors, manifest).unwrap()
        })
}

proptest! {
    #[test]
    fn bytes_round_trip_bit_exact(m in arb_model()) {
        let bytes = m.to_bytes().unwrap();
        let back = parse_container(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        for (a, b) in m.tensors.iter().zip(&back.tensors) {
            let bits = |t: &WeightTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(model_digest(&back).unwrap(), model_digest(&m).unwrap());
    }

    #[test]
    fn every_proper_prefix_is_rejected(m in arb_model()) {
        let bytes = m.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(parse_container(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_container(&bytes);
    }
}

#[test]
fn empty_container_digest_is_frozen() {
    let bytes = ModelContainer::default().to_bytes().unwrap();
    assert_eq!(bytes, b"NNRW\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00");
    assert_eq!(
        model_digest(&ModelContainer::default()).unwrap().to_hex(),
        "7daec287a8fb5e2186e48420d53ba176f228977d1af573915c3f03f36a506094"
    );
}

#[test]
fn manifest_must_name_rank4_tensors() {
    let t = WeightTensor::new("bias", vec![4], vec![0.0; 4]).unwrap();
    let manifest = vec![LayerSpec {
        weight_tensor: 0,
        stride: 1,
        padding: 0,
    }];
    assert_eq!(
        ModelContainer::new(vec![t], manifest),
        Err(ContainerError::NotConvTensor {
            layer: 0,
            name: "bias".into()
        })
    );
}

#[test]
fn data_length_must_match_shape() {
    assert!(matches!(
        WeightTensor::new("w", vec![2, 2], vec![0.0; 3]),
        Err(ContainerError::ShapeMismatch { .. })
    ));
}
