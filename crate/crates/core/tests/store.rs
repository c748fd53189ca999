use clockwork::adaptor::{Adaptor, AdaptorSpec};
use clockwork::numerics::{rng, Tensor};
use clockwork::store::{read_ppm, write_ppm, Archive, MAGIC, VERSION};
use clockwork::unet::{SplitUNet, UNetConfig};
use clockwork::Error;
use proptest::prelude::*;
use serde_json::json;

#[test]
fn fixture_decodes_to_known_values() {
    let a = Archive::load(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/small.cwkt")).unwrap();
    assert_eq!(a.config, json!({"kind": "fixture", "seed": 7}));
    let names: Vec<_> = a.tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["a", "b.c", "z"]);
    assert_eq!(a.get("a").unwrap().shape(), &[2, 3]);
    assert_eq!(a.get("a").unwrap().data(), &[-1.0, -0.5, 0.0, 0.5, 1.0, 1.5]);
    assert_eq!(a.get("b.c").unwrap().shape(), &[] as &[usize]);
    assert_eq!(a.get("b.c").unwrap().data(), &[3.25]);
    assert_eq!(a.get("z").unwrap().data(), &[1e-3, -2.5, 7.0, 0.0]);
    // re-encoding reproduces the fixture byte for byte
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/small.cwkt")).unwrap();
    assert_eq!(a.encode().unwrap(), bytes);
}

#[test]
fn model_and_adaptor_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = SplitUNet::new(UNetConfig { channels: vec![8, 16], image_size: 8, ..UNetConfig::default() }, 3).unwrap();
    let cfg = &model.config;
    let adaptor = Adaptor::new(AdaptorSpec::default(), cfg.rep_shape(), cfg.emb_dim, 4).unwrap();
    let mut archive = Archive::from_params(&model.params, json!({"seed": 3}));
    archive.tensors.extend(Archive::from_params(&adaptor.params, json!(null)).tensors);
    let path = dir.path().join("ckpt/model.cwkt");
    archive.save(&path).unwrap();
    let back = Archive::load(&path).unwrap();
    assert_eq!(back, archive);

    let mut fresh = SplitUNet::new(model.config.clone(), 99).unwrap();
    back.load_params(&mut fresh.params, "unet.").unwrap();
    assert!(fresh.params.iter().zip(model.params.iter()).all(|(a, b)| a.value == b.value));
    let mut fresh_a = Adaptor::new(AdaptorSpec::default(), cfg.rep_shape(), cfg.emb_dim, 77).unwrap();
    back.load_params(&mut fresh_a.params, "adaptor.").unwrap();
    assert!(fresh_a.params.iter().zip(adaptor.params.iter()).all(|(a, b)| a.value == b.value));

    let other = SplitUNet::new(UNetConfig { channels: vec![8, 32], image_size: 8, ..UNetConfig::default() }, 0).unwrap();
    assert!(back.load_params(&mut other.params.clone(), "unet.").is_err());
}

#[test]
fn truncation_names_the_failing_entry() {
    let mut a = Archive::new(json!({}));
    a.push("first", Tensor::full(&[4], 1.0));
    a.push("second.weight", Tensor::full(&[2, 2], 2.0));
    let bytes = a.encode().unwrap();
    // cut inside the payload of the second entry
    let cut = 4 + 4 + 4 + (2 + 5 + 2 + 4 + 16) + (2 + 13 + 2 + 8) + 3;
    match Archive::decode(&bytes[..cut]) {
        Err(Error::Parse { entry, .. }) => assert!(entry.contains("second.weight"), "{entry}"),
        other => panic!("expected parse error, got {other:?}"),
    }
    match Archive::decode(&bytes[..6]) {
        Err(Error::Parse { entry, .. }) => assert_eq!(entry, "header"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn version_mismatch_is_explicit() {
    let mut bytes = Archive::new(json!(null)).encode().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Archive::decode(&bytes), Err(Error::Version { found, expected }) if found == VERSION + 1 && expected == VERSION));
}

#[test]
fn ppm_headers_mosaics_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = dir.path().join("zeros.ppm");
    write_ppm(&Tensor::zeros(&[1, 3, 4, 5]), &zeros, 1).unwrap();
    let raw = std::fs::read(&zeros).unwrap();
    assert!(raw.starts_with(b"P6\n5 4\n255\n"));
    assert!(raw[b"P6\n5 4\n255\n".len()..].iter().all(|&b| b == 0));

    let imgs = Tensor::uniform(&[4, 3, 6, 7], 1.2, &mut rng(1, 0));
    let path = dir.path().join("grid.ppm");
    write_ppm(&imgs, &path, 2).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!((back.width, back.height), (14, 12));
    for i in 0..4 {
        let (ox, oy) = ((i % 2) * 7, (i / 2) * 6);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    let v = imgs.data()[((i * 3 + c) * 6 + y) * 7 + x].clamp(0.0, 1.0);
                    assert_eq!(back.pixels[((oy + y) * 14 + ox + x) * 3 + c], (v * 255.0).round() as u8);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_archives_round_trip_bit_exactly(
        shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..4), 0..6),
        seed in any::<u64>(),
    ) {
        let mut a = Archive::new(json!({"seed": seed}));
        for (k, s) in shapes.iter().enumerate() {
            a.push(format!("t{k}"), Tensor::randn(s, &mut rng(seed, k as u64)));
        }
        prop_assert_eq!(Archive::decode(&a.encode().unwrap()).unwrap(), a);
    }
}
