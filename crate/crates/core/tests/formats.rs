use eco_core::encoder::{EncoderConfig, EncoderWeights};
use eco_core::io::{
    load_checkpoint, load_prototypes, read_bank, read_weights, save_checkpoint, save_prototypes, write_bank,
    write_weights, BankRecord, EmbeddingBank, WeightManifest,
};
use eco_core::numerics::{SeededRng, Tensor};
use eco_core::prompt::{ClassTokenTable, ClassTokens, PromptEnsemble, PrototypeBank, SpecialTokens};
use eco_core::Error;
use proptest::prelude::*;

fn finite_nonzero() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL.prop_filter("finite", |v| v.is_finite())
}

fn bank_strategy() -> impl Strategy<Value = EmbeddingBank> {
    let classes = prop::collection::vec(("[a-z é_]{0,12}", prop::collection::vec(any::<u32>(), 0..5)), 2..6);
    (classes, 1usize..8).prop_flat_map(|(classes, dim)| {
        let k = classes.len() as u32;
        let record = (0..k, prop::collection::vec(finite_nonzero(), dim))
            .prop_map(|(label, vector)| BankRecord { label, vector });
        prop::collection::vec(record, 0..20).prop_map(move |records| {
            let table = ClassTokenTable::new(
                classes
                    .iter()
                    .map(|(name, tokens)| ClassTokens {
                        name: name.clone(),
                        tokens: tokens.clone(),
                    })
                    .collect(),
            );
            EmbeddingBank::new(dim, table, records).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn banks_round_trip(bank in bank_strategy()) {
        let bytes = write_bank(&bank).unwrap();
        let back = read_bank(&bytes).unwrap();
        prop_assert_eq!(&back, &bank);
        prop_assert_eq!(write_bank(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_banks_fail_with_offsets(bank in bank_strategy(), cut in 0.0f64..1.0) {
        let bytes = write_bank(&bank).unwrap();
        let at = (bytes.len() as f64 * cut) as usize;
        match read_bank(&bytes[..at]) {
            Err(Error::Format { offset, .. }) => prop_assert!(offset <= at),
            other => prop_assert!(false, "expected format error, got {:?}", other.map(|b| b.len())),
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), d in 1usize..6, n in 1usize..6, w in 1usize..10, hash in "[0-9a-f]{0,64}") {
        let ens = PromptEnsemble::<f32>::init(d, n, w, 3.0, &mut SeededRng::new(seed)).unwrap();
        let bytes = save_checkpoint(&ens, &hash).unwrap();
        let back = load_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back.ensemble, &ens);
        prop_assert_eq!(&back.encoder_hash, &hash);
        prop_assert_eq!(save_checkpoint(&back.ensemble, &hash).unwrap(), bytes);

        let wide = ens.cast::<f64>();
        let back64 = load_checkpoint::<f64>(&save_checkpoint(&wide, &hash).unwrap()).unwrap();
        prop_assert_eq!(back64.ensemble, wide);
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>(), layers in 1usize..3, heads in 1usize..3, hd in 1usize..4, out in 1usize..5) {
        let config = EncoderConfig {
            layers,
            heads,
            width: heads * hd,
            output_dim: out,
            max_positions: 6,
            vocab_size: 9,
            eps: 1e-5,
        };
        let w: EncoderWeights<f64> = EncoderWeights::from_seed(config, seed).unwrap();
        let specials = SpecialTokens::for_vocab(9);
        let bytes = write_weights(&w, specials).unwrap();
        let (back, sp) = read_weights::<f64>(&bytes).unwrap();
        prop_assert_eq!(back.content_hash(), w.content_hash());
        prop_assert_eq!(sp, specials);
        prop_assert_eq!(write_weights(&back, sp).unwrap(), bytes);
    }

    #[test]
    fn prototypes_round_trip(seed in any::<u64>(), k in 2usize..6, d in 1usize..9) {
        let mut rng = SeededRng::new(seed);
        let bank = PrototypeBank {
            prototypes: Tensor::from_vec(&[k, d], (0..k * d).map(|_| rng.gaussian(0.0, 1.0) as f32).collect()).unwrap(),
            encoder_hash: format!("{:x}", rng.next_u64()),
            ensemble_hash: format!("{:x}", rng.next_u64()),
        };
        let bytes = save_prototypes(&bank).unwrap();
        prop_assert_eq!(load_prototypes::<f32>(&bytes).unwrap(), bank);
    }
}

#[test]
fn bank_bytes_are_little_endian() {
    let bank = EmbeddingBank::new(
        1,
        ClassTokenTable::new(vec![
            ClassTokens { name: "a".into(), tokens: vec![258] },
            ClassTokens { name: "".into(), tokens: vec![] },
        ]),
        vec![BankRecord { label: 1, vector: vec![1.0] }],
    )
    .unwrap();
    let expected: Vec<u8> = [
        b"ECOBANK1".as_slice(),
        &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0],
        &[1, 0, b'a', 1, 0, 2, 1, 0, 0],
        &[0, 0, 0, 0],
        &[1, 0, 0, 0, 0, 0, 0x80, 0x3f],
    ]
    .concat();
    assert_eq!(write_bank(&bank).unwrap(), expected);
}

#[test]
fn manifest_header_is_readable_json() {
    let mut m = WeightManifest::new();
    m.set_meta("kind", "demo");
    m.push("x", &Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap()).unwrap();
    let bytes = m.to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"ECOWGT01");
    assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
    assert_eq!(header["metadata"]["kind"], "demo");
    assert_eq!(header["tensors"][0]["precision"], "single");
    assert_eq!(&bytes[20 + header_len..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40]);
}

#[test]
fn toy_encoder_file_hash_is_stable_across_reads() {
    let w: EncoderWeights<f32> = EncoderWeights::from_seed(EncoderConfig::toy(), 1).unwrap();
    let bytes = write_weights(&w, SpecialTokens::for_vocab(128)).unwrap();
    let (a, _) = read_weights::<f32>(&bytes).unwrap();
    let (b, _) = read_weights::<f32>(&bytes).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a.parameter_count(), EncoderConfig::toy().parameter_count());
}
