use proptest::prelude::*;
use semanon::checkpoint::*;
use semanon::contrastive::ProjectionHeads;
use semanon::discriminator::Discriminator;
use semanon::latent::{estimate_w_mean, AttributeSlot, SemanticLayout};
use semanon::params::Params;

mod common;

fn checkpoint() -> Checkpoint {
    let (generator, mapping) = common::compact_model(70);
    let res = generator.resolution();
    let slots: Vec<_> = AttributeSlot::CONSTRAINED.iter().map(|&s| (s, 32)).collect();
    Checkpoint {
        w_mean: estimate_w_mean(71, 16, &mapping).unwrap(),
        generator,
        mapping,
        heads: Some(ProjectionHeads::new(&slots, 16, 8, 72)),
        discriminator: Some(Discriminator::new(res, 4, 8, 73).unwrap()),
        layout: SemanticLayout::default(),
        step: 12,
        config: serde_json::json!({"note": "fixture", "lr": 0.002}),
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    assert_eq!(loaded.encode().unwrap(), first);
    assert_eq!(loaded.step, 12);
    assert_eq!(loaded.generator.params.digest(), ckpt.generator.params.digest());
    assert_eq!(loaded.w_mean, ckpt.w_mean);
    let w = common::mapped(&ckpt.mapping, 3);
    assert_eq!(loaded.generator.generate(&w).unwrap().image, ckpt.generator.generate(&w).unwrap().image);
    assert_eq!(sha256_hex(&first), sha256_hex(&loaded.encode().unwrap()));
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = checkpoint().encode().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(Checkpoint::decode(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(Checkpoint::decode(&bad_version).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::decode(&trailing).is_err());

    let mut file = TensorFile::decode(&bytes).unwrap();
    file.tensors.insert("stray", ndarray::Array2::zeros((1, 1)));
    assert!(Checkpoint::from_tensor_file(file).is_err());
    let latents = TensorFile { kind: "latents".into(), meta: serde_json::json!({}), tensors: Params::new() };
    assert!(Checkpoint::from_tensor_file(latents).is_err());
}

#[test]
fn stored_latents_round_trip() {
    let (_, mapping) = common::compact_model(80);
    let stored = StoredLatents {
        latents: (0..3).map(|s| common::mapped(&mapping, s)).collect(),
        diverged: true,
        checkpoint_digest: "abc".into(),
    };
    let file = stored.to_tensor_file(&mapping.config).unwrap();
    let back = StoredLatents::from_tensor_file(TensorFile::decode(&file.encode().unwrap()).unwrap(), &mapping.config).unwrap();
    assert_eq!(back, stored);
    let mut other = mapping.config.clone();
    other.local_dim += 1;
    assert!(StoredLatents::from_tensor_file(file, &other).is_err());
}

proptest! {
    #[test]
    fn tensor_files_round_trip(
        tensors in prop::collection::btree_map("[a-z/]{1,12}", (1usize..4, 1usize..4, any::<u64>()), 0..6),
        note in ".{0,20}",
    ) {
        let mut params = Params::new();
        for (name, (r, c, seed)) in &tensors {
            let data = (0..r * c).map(|i| f64::from_bits(seed.wrapping_add(i as u64) & !(0x7ffu64 << 52)) * 1e300).collect();
            params.insert(name.clone(), ndarray::Array2::from_shape_vec((*r, *c), data).unwrap());
        }
        let file = TensorFile { kind: "test".into(), meta: serde_json::json!({ "note": note }), tensors: params };
        let bytes = file.encode().unwrap();
        let back = TensorFile::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back, file);
    }

    #[test]
    fn truncation_never_decodes(cut in 0usize..200) {
        let mut params = Params::new();
        params.insert("a", ndarray::Array2::from_elem((2, 3), 1.5));
        let bytes = TensorFile { kind: "t".into(), meta: serde_json::json!({}), tensors: params }.encode().unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(TensorFile::decode(&bytes[..cut]).is_err());
    }
}
