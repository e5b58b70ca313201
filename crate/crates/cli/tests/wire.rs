use std::io::Cursor;

use ndarray::Array2;
use nn_emd::config::{Role, RunConfig};
use nn_emd::wire::{encode_frame, read_frame, write_frame, Message, MetaPayload};
use nn_emd_core::authority::Authority;
use nn_emd_core::encoding::FixedPointCodec;
use nn_emd_core::protocols::{s2phc_client_encrypt_int, s2pvc_client_encrypt_int};
use nn_emd_core::trainer::{
    exchange_meta, ClientKeys, DatasetType, LabelBlock, PreprocessedSource, SourceMeta, TrainingPlan,
};
use nn_emd_core::GroupParams;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn heavy_messages(seed: u64, y: &[i64]) -> Vec<Message> {
    let params = GroupParams::named("test64").unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut authority = Authority::init(&params, 4, &[2, 2], 2, 2, 100, &mut rng).unwrap();
    let keys = authority.register_source(1).unwrap();
    let codec = FixedPointCodec::unit(2).unwrap();
    let x = Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as i64);
    let ff = s2phc_client_encrypt_int(&codec, &keys.si_public, x.view(), 1, &mut rng).unwrap();
    let bp = s2pvc_client_encrypt_int(&codec, &keys.mi_party, x.view(), &mut rng).unwrap();
    let meta = SourceMeta {
        source_id: 1,
        dataset_type: DatasetType::Full,
        sample_count: 8,
        feature_count: 4,
        has_labels: true,
    };
    let (skel, metas) = exchange_meta(std::slice::from_ref(&meta)).unwrap();
    let cfg = RunConfig::from_toml("arch = [4, 3, 2]\nbatch_size = 2").unwrap();
    let plan = TrainingPlan::build(skel, &cfg.plan_options(), &metas).unwrap();
    let mut y4 = y.to_vec();
    y4.resize(4, 1);
    vec![
        Message::PublicKeyDelivery(ClientKeys {
            si_public: keys.si_public.clone(),
            mi_party: Some(keys.mi_party.clone()),
        }),
        Message::MetaInfo(MetaPayload::Source {
            meta,
            id_hashes: Some(vec!["ab".into(), "cd".into()]),
        }),
        Message::MetaInfo(MetaPayload::Plan {
            plan,
            alignment: Some(vec![1, 0]),
        }),
        Message::MetaInfo(MetaPayload::Authority {
            si_eta: 4,
            etas: vec![2, 2],
            tau: 2,
            weight_limit: 100,
            clients: 2,
        }),
        Message::CiphertextBatch(PreprocessedSource {
            source_id: 1,
            round: 0,
            ff_batches: vec![ff],
            bp_batches: vec![bp],
            labels: Some(vec![LabelBlock { labels: vec![0, 1] }]),
        }),
        Message::SiKeyResponse(authority.serve_si_key(&y4).unwrap()),
        Message::MiKeyResponse(authority.serve_mi_key(&y4).unwrap()),
    ]
}

fn light_message() -> impl Strategy<Value = Message> {
    let text = "[a-z ]{0,24}";
    prop_oneof![
        (any::<bool>(), proptest::option::of(0usize..100)).prop_map(|(tpa, source_id)| Message::Hello {
            role: if tpa { Role::Tpa } else { Role::Client },
            source_id,
        }),
        (0usize..100, proptest::option::of(1usize..10))
            .prop_map(|(source_id, slot)| Message::RegisterSource { source_id, slot }),
        prop::collection::vec(any::<i64>(), 0..16).prop_map(|y| Message::SiKeyRequest { y }),
        prop::collection::vec(any::<i64>(), 0..16).prop_map(|y| Message::MiKeyRequest { y }),
        (0usize..10, 0usize..10, prop::collection::vec(0usize..10, 0..8)).prop_map(|(source_id, round, l)| {
            Message::LabelBlock {
                source_id,
                round,
                labels: vec![LabelBlock { labels: l }],
            }
        }),
        text.prop_map(|reason| Message::Reject { reason }),
        text.prop_map(|reason| Message::Abort { reason }),
        Just(Message::Done),
    ]
}

fn round_trip(msg: &Message, digest: &str) -> Result<(), TestCaseError> {
    let frame = encode_frame(msg, digest).unwrap();
    let mut sink = Vec::new();
    write_frame(&mut sink, msg, digest, usize::MAX).unwrap();
    prop_assert_eq!(&sink, &frame);
    let (got_digest, got) = read_frame(&mut Cursor::new(&frame), frame.len()).unwrap();
    prop_assert_eq!(got_digest, digest);
    prop_assert_eq!(got.type_name(), msg.type_name());
    prop_assert_eq!(encode_frame(&got, digest).unwrap(), frame.clone());
    prop_assert!(read_frame(&mut Cursor::new(&frame), frame.len() - 5).is_err());
    Ok(())
}

proptest! {
    #[test]
    fn light_frames_round_trip(msg in light_message(), digest in "[0-9a-f]{64}") {
        round_trip(&msg, &digest)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn key_and_ciphertext_frames_round_trip(seed in any::<u64>(), y in prop::collection::vec(1i64..=100, 2..=4)) {
        let msgs = heavy_messages(seed, &y);
        let names: Vec<_> = msgs.iter().map(Message::type_name).collect();
        for name in ["PublicKeyDelivery", "MetaInfo", "CiphertextBatch", "SiKeyResponse", "MiKeyResponse"] {
            prop_assert!(names.contains(&name));
        }
        for msg in &msgs {
            round_trip(msg, "digest")?;
        }
    }
}
