use semanon::anonymizer::*;
use semanon::image::{Image, LabelMap};
use semanon::latent::{AttributeSlot, ExtendedLatent, SemanticLayout, DEFAULT_COMPONENTS};

mod common;
use common::pipeline::anonymizer;

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn subject(a: &Anonymizer, seed: u64) -> (ExtendedLatent, Image, LabelMap) {
    let w = common::mapped(&a.mapping, seed);
    let out = a.generator.generate(&w).unwrap();
    let labels = out.labels();
    (w, out.image, labels)
}

#[test]
fn randomize_components_contract() {
    let a = anonymizer(0);
    let layout = SemanticLayout::default();
    let w = common::mapped(&a.mapping, 5);
    let all = randomize_components(&w, &names(&DEFAULT_COMPONENTS), 9, &a.mapping, &layout).unwrap();
    assert_eq!(all, w);
    let none = randomize_components(&w, &[], 9, &a.mapping, &layout).unwrap();
    assert_eq!(none.global, w.global);
    for (new, old) in none.local.iter().zip(&w.local) {
        assert_ne!(new.structure, old.structure);
        assert_ne!(new.texture, old.texture);
    }
    assert_eq!(randomize_components(&w, &[], 9, &a.mapping, &layout).unwrap(), none);
    assert_ne!(randomize_components(&w, &[], 10, &a.mapping, &layout).unwrap(), none);

    let mouth = randomize_components(&w, &names(&["mouth"]), 9, &a.mapping, &layout).unwrap();
    let k = layout.index_of("mouth").unwrap();
    for i in 0..layout.len() {
        assert_eq!(mouth.local[i] == w.local[i], i == k, "component {i}");
    }
    assert!(randomize_components(&w, &names(&["moustache"]), 9, &a.mapping, &layout).is_err());
}

#[test]
fn clinical_preserves_listed_components_exactly() {
    let a = anonymizer(0);
    for seed in 0..4 {
        let (w, image, labels) = subject(&a, 200 + seed);
        let request = AnonymizationRequest::clinical(&["mouth", "nose"], Arity::Single, seed);
        let r = a.anonymize_single_from_latent(&image, &labels, w.clone(), false, &request).unwrap();
        let out = &r.outputs[0];
        let m_real = &r.plans[0].m_real;
        assert_eq!(*m_real, labels.mask_of(&a.layout.indices_of(&["mouth", "nose"]).unwrap()));
        for p in 0..image.pixels() {
            if m_real.data[p] {
                assert_eq!(out.pixel(p), image.pixel(p));
            }
        }
        assert_eq!(r.report.preserved_components, names(&["mouth", "nose"]));
        assert_ne!(out, &image);
    }
}

#[test]
fn regular_mode_keeps_exterior_and_synthesizes_the_rest() {
    let a = anonymizer(0);
    let (w, image, labels) = subject(&a, 300);
    let request = AnonymizationRequest::regular(Arity::Single, 7);
    let r = a.anonymize_single_from_latent(&image, &labels, w, false, &request).unwrap();
    let plan = &r.plans[0];
    assert_eq!(plan.m_real, labels.mask_of(&a.layout.face_exterior()));
    let synthetic = a.generator.generate(&r.anonymized[0]).unwrap().image;
    let out = &r.outputs[0];
    for p in 0..image.pixels() {
        if plan.m_real.data[p] {
            assert_eq!(out.pixel(p), image.pixel(p));
        } else if !plan.m_inp.data[p] {
            assert_eq!(out.pixel(p), synthetic.pixel(p));
        }
    }
    let [kept, band, rest] = r.report.pixel_counts[0];
    assert_eq!(kept + band + rest, image.pixels());
}

#[test]
fn only_the_identity_slot_is_resampled() {
    let a = anonymizer(0);
    let (w, image, labels) = subject(&a, 400);
    let request = AnonymizationRequest::clinical(&["eyes"], Arity::Single, 11);
    let r = a.anonymize_single_from_latent(&image, &labels, w.clone(), false, &request).unwrap();
    let new = &r.anonymized[0].global;
    for slot in AttributeSlot::ALL {
        assert_eq!(new.slot(slot) == w.global.slot(slot), slot != AttributeSlot::Identity, "{slot:?}");
    }
}

#[test]
fn paired_outputs_share_new_identity_and_components() {
    let a = anonymizer(0);
    let (wa, ia, la) = subject(&a, 500);
    let (mut wb, ib, lb) = subject(&a, 501);
    wb.global.slot_mut(AttributeSlot::Identity).copy_from_slice(wa.global.slot(AttributeSlot::Identity));
    let request = AnonymizationRequest::clinical(&["mouth"], Arity::Paired, 12);
    let r = a.anonymize_paired_from_latents([&ia, &ib], [&la, &lb], [wa.clone(), wb.clone()], false, &request).unwrap();
    let (x, y) = (&r.anonymized[0], &r.anonymized[1]);
    let id = AttributeSlot::Identity;
    assert_eq!(x.global.slot(id), y.global.slot(id));
    assert_ne!(x.global.slot(id), wa.global.slot(id));
    let mouth = a.layout.index_of("mouth").unwrap();
    for k in 0..a.layout.len() {
        if k == mouth {
            assert_eq!(x.local[k], wa.local[k]);
            assert_eq!(y.local[k], wb.local[k]);
        } else {
            assert_eq!(x.local[k], y.local[k]);
        }
    }
    assert_eq!(r.outputs.len(), 2);
}

#[test]
fn full_pipelines_run_from_pixels() {
    let a = anonymizer(5);
    let (_, ia, la) = subject(&a, 600);
    let (_, ib, lb) = subject(&a, 601);
    let single = a.anonymize_single(&ia, &la, &AnonymizationRequest::clinical(&["mouth"], Arity::Single, 1)).unwrap();
    assert_eq!(single.report.inversion_diverged, vec![false]);
    let paired = a.anonymize_paired([&ia, &ib], [&la, &lb], &AnonymizationRequest::regular(Arity::Paired, 1)).unwrap();
    let id = AttributeSlot::Identity;
    assert_eq!(paired.recovered[0].global.slot(id), paired.recovered[1].global.slot(id));
    let again = a.anonymize_single(&ia, &la, &AnonymizationRequest::clinical(&["mouth"], Arity::Single, 1)).unwrap();
    assert_eq!(again.outputs, single.outputs);
}

#[test]
fn invalid_requests_are_rejected() {
    let a = anonymizer(0);
    let (w, image, labels) = subject(&a, 700);
    let run = |req: &AnonymizationRequest| a.anonymize_single_from_latent(&image, &labels, w.clone(), false, req);
    assert!(run(&AnonymizationRequest::clinical(&["moustache"], Arity::Single, 0)).is_err());
    assert!(run(&AnonymizationRequest::clinical(&[], Arity::Single, 0)).is_err());
    assert!(run(&AnonymizationRequest::clinical(&["mouth"], Arity::Paired, 0)).is_err());
    let mut free = AnonymizationRequest::clinical(&["mouth"], Arity::Single, 0);
    free.resample_slots.push(AttributeSlot::Free);
    assert!(run(&free).is_err());
    let mut wrong = AnonymizationRequest::regular(Arity::Single, 0);
    wrong.preserve = names(&["hair"]);
    assert!(run(&wrong).is_err());
    assert!("creative".parse::<Mode>().is_err());
    let small = Image::filled(8, 8, [0.0; 3]);
    assert!(a.anonymize_single_from_latent(&small, &labels, w.clone(), false, &AnonymizationRequest::regular(Arity::Single, 0)).is_err());
}
