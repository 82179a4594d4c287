use care_core::synth::*;
use care_core::Error;

fn small() -> TaskSpec {
    TaskSpec {
        samples_per_class: 3,
        height: 16,
        width: 16,
        frames: 4,
        ..TaskSpec::default()
    }
}

#[test]
fn default_protocol_counts() {
    let spec = TaskSpec::default();
    assert_eq!((spec.seen_domains, spec.unseen_domains, spec.classes), (4, 5, 6));
    let spec = small();
    let (seen, unseen) = make_benchmark(&spec).unwrap();
    assert_eq!(seen.domains.len(), 4);
    assert_eq!(unseen.domains.len(), 5);
    assert_eq!(seen.len() + unseen.len(), 9 * 6 * spec.samples_per_class);
    for set in [&seen, &unseen] {
        for d in &set.domains {
            for c in 0..spec.classes {
                let n = d.samples.iter().filter(|s| s.label == c).count();
                assert_eq!(n, spec.samples_per_class);
            }
            assert!(d.samples.iter().all(|s| s.domain == d.domain && s.clip.is_finite()));
        }
    }
    let seen_ids: std::collections::HashSet<_> = seen.samples().map(|s| s.id.clone()).collect();
    assert!(unseen.samples().all(|s| !seen_ids.contains(&s.id)));
    assert_eq!(seen.designation, Designation::Seen);
    assert_eq!(unseen.domain_ids(), vec![4, 5, 6, 7, 8]);
}

#[test]
fn rendering_is_deterministic_and_pure() {
    let spec = small();
    let a = render_sample(&spec, 2, 3, 1).unwrap();
    let b = render_sample(&spec, 2, 3, 1).unwrap();
    assert_eq!(a, b);
    let (seen, _) = make_benchmark(&spec).unwrap();
    let from_set = seen.domains[2].samples.iter().find(|s| s.id == a.id).unwrap();
    assert_eq!(from_set, &a);
    assert_eq!(make_benchmark(&spec).unwrap(), make_benchmark(&spec).unwrap());
}

#[test]
fn without_domain_or_noise_classes_look_alike_across_domains() {
    let spec = TaskSpec {
        domain_signature: 0.0,
        noise: 0.0,
        ..small()
    };
    let a = render_sample(&spec, 0, 4, 2).unwrap();
    let b = render_sample(&spec, 7, 4, 2).unwrap();
    assert_eq!(a.clip, b.clip);
    let c = render_sample(&spec, 0, 5, 2).unwrap();
    assert_ne!(a.clip, c.clip);
}

#[test]
fn rejects_bad_indices_and_specs() {
    let spec = small();
    assert!(matches!(render_sample(&spec, 9, 0, 0), Err(Error::Input(_))));
    assert!(matches!(render_sample(&spec, 0, 6, 0), Err(Error::Input(_))));
    assert!(matches!(render_sample(&spec, 0, 0, 3), Err(Error::Input(_))));
    let bad = TaskSpec {
        samples_per_class: 0,
        ..small()
    };
    assert!(matches!(make_benchmark(&bad), Err(Error::Input(_))));
}

#[test]
fn default_benchmark_has_learnable_class_signal() {
    let spec = TaskSpec::default();
    let r = signal_audit(&spec, 20).unwrap();
    assert!(r.class_separability > 1.0 / 6.0 + 0.2, "{r:?}");
}

#[test]
fn no_class_signal_means_chance_separability() {
    let spec = TaskSpec {
        class_signal: 0.0,
        ..TaskSpec::default()
    };
    let r = signal_audit(&spec, 20).unwrap();
    assert!((r.class_separability - 1.0 / 6.0).abs() <= 0.1, "{r:?}");
}

#[test]
fn strong_signature_separates_domains() {
    let spec = TaskSpec {
        domain_signature: 4.0,
        ..TaskSpec::default()
    };
    let r = signal_audit(&spec, 10).unwrap();
    assert!(r.domain_separability > 0.9, "{r:?}");
}

#[test]
fn separability_is_monotone_in_class_signal() {
    let mut last = f64::INFINITY;
    for s in [1.0, 0.3, 0.1] {
        let spec = TaskSpec {
            class_signal: s,
            noise: 1.0,
            ..TaskSpec::default()
        };
        let r = signal_audit(&spec, 10).unwrap();
        assert!(r.class_separability <= last, "signal {s}: {r:?} after {last}");
        last = r.class_separability;
    }
}

#[test]
fn export_import_round_trip() {
    let spec = small();
    let (seen, unseen) = make_benchmark(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = export_dataset(dir.path(), &spec, &[&seen, &unseen]).unwrap();
    assert_eq!(index.samples.len(), seen.len() + unseen.len());
    for d in 0..9 {
        assert!(dir.path().join(domain_dir_name(d)).is_dir());
    }
    let (spec2, seen2, unseen2) = import_dataset(dir.path()).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(seen2, seen);
    assert_eq!(unseen2, unseen);

    let clip = dir.path().join(&index.samples[0].path);
    std::fs::write(&clip, b"CARECLIP\x01").unwrap();
    assert!(matches!(read_clip(&clip), Err(Error::Format { .. })));
}
