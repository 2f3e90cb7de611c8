use tclab::data::{self, batches, DatasetSpec, ViewMaps};

fn small() -> DatasetSpec {
    DatasetSpec {
        num_classes: 10,
        train_per_class: 8,
        test_per_class: 4,
        ..DatasetSpec::default()
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let split = data::generate(&DatasetSpec::two_domain()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    data::save(&split, &path).unwrap();
    let back = data::load(&path).unwrap();
    assert_eq!(back, split);
    let again = dir.path().join("e.jsonl");
    data::save(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn same_seed_same_bytes_other_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    let write = |spec: &DatasetSpec, name: &str| {
        let p = dir.path().join(name);
        data::save(&data::generate(spec).unwrap(), &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let a = write(&small(), "a");
    let b = write(&small(), "b");
    let c = write(&DatasetSpec { seed: 99, ..small() }, "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn malformed_records_are_rejected_with_line_numbers() {
    let split = data::generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    data::save(&split, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();

    lines[3] = lines[3].replacen("\"class\":", "\"class\":9999,\"was\":", 1);
    std::fs::write(&path, lines.join("\n")).unwrap();
    let err = data::load(&path).unwrap_err().to_string();
    assert!(err.contains('4'), "{err}");

    std::fs::write(&path, format!("{}\nnot json\n", text.lines().next().unwrap())).unwrap();
    let err = data::load(&path).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
}

#[test]
fn classes_are_separated_in_latent_space() {
    // identity maps and a single view make the observed vector the latent one
    let spec = DatasetSpec {
        view_maps: ViewMaps::Identity,
        views_per_object: 1,
        sigma_view: 0.0,
        ..small()
    };
    let split = data::generate(&spec).unwrap();
    let objs: Vec<_> = split.train.iter().chain(&split.test).collect();
    let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
    for (i, a) in objs.iter().enumerate() {
        for b in &objs[i + 1..] {
            let d: f64 = a
                .views
                .row(0)
                .iter()
                .zip(b.views.row(0))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let slot = if a.class == b.class { &mut within } else { &mut between };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    let (w, b) = (within.0 / within.1 as f64, between.0 / between.1 as f64);
    assert!(w < b, "within {w} between {b}");
}

#[test]
fn noiseless_objects_equal_their_prototype() {
    let spec = DatasetSpec {
        view_maps: ViewMaps::Identity,
        views_per_object: 1,
        subcats_per_class: 1,
        sigma_object: 0.0,
        sigma_view: 0.0,
        ..small()
    };
    let split = data::generate(&spec).unwrap();
    for k in 0..spec.num_classes {
        let members: Vec<_> = split.train.iter().chain(&split.test).filter(|o| o.class == k).collect();
        assert!(members.windows(2).all(|w| w[0].views == w[1].views));
    }
}

#[test]
fn two_domain_objects_are_well_formed() {
    let spec = DatasetSpec::two_domain();
    let split = data::generate(&spec).unwrap();
    assert_eq!(split.train.len() + split.test.len(), spec.total_objects());
    for o in split.train.iter().chain(&split.test) {
        assert!(o.class < spec.num_classes && o.subcat < spec.subcats_per_class);
        assert_eq!(o.views.rows(), spec.views_for_domain(o.domain));
        assert_eq!(o.views.cols(), spec.view_dim);
        assert!(o.views.is_finite());
    }
    for d in 0..2 {
        let classes: std::collections::BTreeSet<_> =
            split.test.iter().filter(|o| o.domain == d).map(|o| o.class).collect();
        assert_eq!(classes.len(), spec.num_classes);
    }
}

#[test]
fn batch_order_depends_on_seed_and_epoch_only() {
    let sizes: Vec<usize> = batches(5, 2, 0, 0).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, [2, 2, 1]);
    assert_eq!(batches(200, 16, 3, 4).unwrap(), batches(200, 16, 3, 4).unwrap());
    assert_ne!(batches(200, 16, 3, 4).unwrap(), batches(200, 16, 3, 5).unwrap());
    let mut all: Vec<usize> = batches(200, 16, 3, 4).unwrap().concat();
    all.sort_unstable();
    assert_eq!(all, (0..200).collect::<Vec<_>>());
}
