use proptest::prelude::*;
use semanon::image::LabelMap;
use semanon::labels::*;
use semanon::latent::SemanticLayout;

#[test]
fn nineteen_class_fixture_collapses_to_layout() {
    let layout = SemanticLayout::default();
    let raw = LabelMap::new(4, 5, (0..20).collect()).unwrap();
    let loaded = remap_labels(&raw, &LabelTable::celebamask19(), &layout).unwrap();
    let expected: Vec<&str> = vec![
        "background", "skin", "nose", "eyeglasses", "eyes", "eyes", "brows", "brows", "ears", "ears",
        "mouth", "mouth", "mouth", "hair", "hats", "earrings", "neck", "neck", "clothes", "background",
    ];
    let got: Vec<&str> = loaded.labels.data.iter().map(|&k| layout.name(k as usize)).collect();
    assert_eq!(got, expected);
    assert_eq!(loaded.unmapped, vec![19]);
    let used: std::collections::BTreeSet<u8> = loaded.labels.data.iter().copied().collect();
    assert_eq!(used.len(), 13);
}

#[test]
fn identity_table_and_png_loading() {
    let layout = SemanticLayout::default();
    let raw = LabelMap::new(2, 7, (0..13).chain([3]).collect()).unwrap();
    let loaded = remap_labels(&raw, &LabelTable::identity(&layout), &layout).unwrap();
    assert_eq!(loaded.labels, raw);
    assert!(loaded.unmapped.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.png");
    raw.save_png(&path).unwrap();
    assert_eq!(load_label_map(&path, &LabelTable::identity(&layout), &layout).unwrap().labels, raw);
    assert!(load_label_map(&dir.path().join("missing.png"), &LabelTable::identity(&layout), &layout).is_err());
    assert!(LabelTable::from_json(r#"{"name":"x","labels":{"0":"skin"},"extra":1}"#).is_err());
}

proptest! {
    #[test]
    fn remapped_labels_stay_in_range(data in prop::collection::vec(any::<u8>(), 16)) {
        let layout = SemanticLayout::default();
        let raw = LabelMap::new(4, 4, data.clone()).unwrap();
        let loaded = remap_labels(&raw, &LabelTable::celebamask19(), &layout).unwrap();
        prop_assert!(loaded.labels.check_range(layout.len()).is_ok());
        for (&v, &k) in data.iter().zip(&loaded.labels.data) {
            prop_assert_eq!(v >= 19, loaded.unmapped.contains(&v));
            if v >= 19 {
                prop_assert_eq!(k, 0);
            }
        }
    }
}
