use calibra::synthdata::dataset_io::{read_dataset, write_dataset};
use calibra::synthdata::{augment_strong, box_blur3, build_splits, generate_phantom, lung_area, AugmentParams, Class, Dataset};

#[test]
fn covid_lesion_fraction_audit() {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for seed in 0..1000u64 {
        let s = generate_phantom(seed, Class::Covid, 64).unwrap();
        let fg: f64 = s.mask.unwrap().iter().sum();
        let frac = fg / lung_area(seed, Class::Covid, 64).unwrap() as f64;
        lo = lo.min(frac);
        hi = hi.max(frac);
    }
    assert!(lo >= 0.005 && hi <= 0.20, "lesion fraction range [{lo}, {hi}]");
}

/// Brightest smoothed pixel and strongest local contrast.
fn features(image: &[f64], size: usize) -> (f64, f64) {
    let blur = box_blur3(image, size);
    let max = blur.iter().copied().fold(0.0, f64::max);
    let edge = image.iter().zip(&blur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (max, edge)
}

fn labelled_features(seed_base: u64, per_class: u64) -> Vec<(Class, (f64, f64))> {
    let mut out = Vec::new();
    for class in Class::ALL {
        for i in 0..per_class {
            let s = generate_phantom(seed_base + i, class, 64).unwrap();
            out.push((class, features(&s.image, 64)));
        }
    }
    out
}

fn rule(f: (f64, f64), edge_t: f64, max_t: f64) -> Class {
    if f.1 >= edge_t {
        Class::Cap
    } else if f.0 >= max_t {
        Class::Covid
    } else {
        Class::Np
    }
}

fn accuracy(data: &[(Class, (f64, f64))], edge_t: f64, max_t: f64) -> f64 {
    data.iter().filter(|(c, f)| rule(*f, edge_t, max_t) == *c).count() as f64 / data.len() as f64
}

#[test]
fn classes_are_separable_by_pixel_statistics() {
    // fit both thresholds by brute force on one draw, score on a fresh one
    let fit = labelled_features(10_000, 100);
    let mut best = (0.0, 0.0, 0.0);
    for e in 0..100 {
        for m in 0..100 {
            let (et, mt) = (e as f64 * 0.005, m as f64 * 0.01);
            let acc = accuracy(&fit, et, mt);
            if acc > best.0 {
                best = (acc, et, mt);
            }
        }
    }
    let held_out = labelled_features(50_000, 100);
    let acc = accuracy(&held_out, best.1, best.2);
    assert!(acc >= 0.95, "oracle accuracy {acc} with thresholds {best:?}");
}

#[test]
fn generation_is_order_independent() {
    let a = Dataset::generate(3, 6, 32, 0.5, 0.25).unwrap();
    let b = Dataset::generate(3, 6, 32, 0.5, 0.25).unwrap();
    assert_eq!(a, b);
    let id = &a.manifest.labelled_train[0];
    let alone = generate_phantom(calibra::seeds::for_id(3, id), a.get(id).unwrap().class, 32).unwrap();
    assert_eq!(alone.image, a.get(id).unwrap().image);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(9, 8, 32, 0.25, 0.25).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, data.manifest);
    assert_eq!(back.samples.len(), data.samples.len());
    let rows = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(rows.starts_with("id,path,class,labelled,mask_path\n"));
    assert_eq!(rows.lines().count(), data.samples.len() + 1);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!((&a.id, a.class, a.labelled), (&b.id, b.class, b.labelled));
        assert_eq!(a.mask, b.mask);
        let err = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 2f64.powi(-16), "quantisation error {err}");
    }
}

#[test]
fn unlabelled_rows_carry_no_masks() {
    let data = Dataset::generate(4, 12, 32, 0.25, 0.25).unwrap();
    for id in &data.manifest.unlabelled_train {
        let s = data.get(id).unwrap();
        assert!(!s.labelled && s.mask.is_none());
    }
    for id in &data.manifest.test_segmentation {
        assert_eq!(data.get(id).unwrap().class, Class::Covid);
    }
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(1, 4, 32, 0.5, 0.25).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let victim = dir.path().join("images/test").read_dir().unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(&victim).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(victim.file_name().unwrap().to_str().unwrap()), "{err}");
}

#[test]
fn augmentation_stays_in_range() {
    let s = generate_phantom(2, Class::Cap, 64).unwrap();
    for seed in 0..20 {
        let out = augment_strong(&s.image, 64, AugmentParams::sample(seed));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let p = AugmentParams::sample(5);
    assert!((0.5..=1.5).contains(&p.contrast) && (0.0..=1.0).contains(&p.sharpness));
}

#[test]
fn default_benchmark_split() {
    let m = build_splits([400; 3], 0.1, 0.25, 0).unwrap();
    let covid_labelled = m.labelled_train.iter().filter(|id| id.starts_with("covid")).count();
    assert_eq!((m.labelled_train.len(), covid_labelled), (90, 30));
    assert_eq!(m.labelled_train.len() + m.unlabelled_train.len(), 900);
}
