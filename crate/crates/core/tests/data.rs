use std::f64::consts::{FRAC_PI_8, TAU};

use gwsel_autodiff::{Activation, Adam, AdamConfig, Graph, Mlp, OneCycle, ParamSet, Tensor};
use gwsel_core::data::*;
use gwsel_core::probes::argmax_rows;
use gwsel_core::seed;
use gwsel_core::{Modality, Task};

fn small() -> DataConfig {
    DataConfig {
        representation: 3_000,
        validation: 200,
        classification: 3_000,
        test: 1_000,
    }
}

#[test]
fn attribute_sampling() {
    let mut rng = seed::rng(1, 0, 0);
    let samples: Vec<ShapeAttributes> = (0..10_000).map(|_| sample_attributes(&mut rng)).collect();
    for c in 0..3 {
        let f = samples.iter().filter(|a| a.category == c).count() as f64 / 1e4;
        assert!((0.30..=0.37).contains(&f), "category {c}: {f}");
    }
    assert!(samples.iter().all(|a| (0.0..TAU).contains(&a.rotation) && a.in_range()));
    let again: Vec<ShapeAttributes> = {
        let mut rng = seed::rng(1, 0, 0);
        (0..10_000).map(|_| sample_attributes(&mut rng)).collect()
    };
    assert_eq!(samples, again);
}

#[test]
fn label_geometry() {
    assert_eq!(rotation_label(0.0), Some(0));
    assert_eq!(rotation_label(TAU - 1e-9), Some(0));
    assert_eq!(rotation_label(FRAC_PI_8), None);
    assert_eq!(rotation_label(FRAC_PI_8 - 1e-9), None);
    assert_eq!(rotation_label(FRAC_PI_8 / 2.0 - 1e-9), Some(0));
    assert_eq!(rotation_label(FRAC_PI_8 / 2.0), None);
    assert_eq!(position_label(0.0, 2.0), Some(1));
    assert_eq!(position_label(2.0, 0.0), Some(3));
    assert_eq!(position_label(1.0, 1.0), None);
    let mut a = sample_classification([0, 0, 0, 0, 0], &mut seed::rng(2, 0, 0));
    a.rotation = FRAC_PI_8;
    assert!(make_classification_labels(&a).is_err());
}

#[test]
fn backbone_is_frozen_and_color_sensitive() {
    let bb = build_backbone(4, &small());
    let mut rng = seed::rng(4, 1, 0);
    let a = sample_attributes(&mut rng);
    let mut b = a;
    b.color[0] = (a.color[0] + 0.3) % 1.0;
    let x = bb.encode_backbone(&[a, a], Modality::Image);
    assert_eq!(x.row(0), x.row(1));
    let y = bb.encode_backbone(&[b], Modality::Image);
    let d: f64 = x.row(0).iter().zip(y.row(0)).map(|(p, q)| (p - q).powi(2)).sum();
    assert!(d > 0.0);
}

#[test]
fn representation_latents_are_standardized() {
    let ds = build_datasets(5, &small()).unwrap();
    let rep = ds.split(Split::Representation);
    for m in Modality::ALL {
        let t = rep.latent(m);
        let (n, d) = (t.rows() as f64, t.cols());
        assert_eq!(d, m.dim());
        for j in 0..d {
            let col: Vec<f64> = t.data().iter().skip(j).step_by(d).copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "{m}[{j}] mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "{m}[{j}] var {var}");
        }
    }
}

#[test]
fn default_sizes_and_label_balance() {
    let cfg = DataConfig::default();
    assert_eq!(
        (cfg.representation, cfg.classification, cfg.test),
        (50_000, 20_000, 2_000)
    );
    let ds = build_datasets(6, &cfg).unwrap();
    assert_eq!(ds.split(Split::Representation).len(), 50_000);
    assert_eq!(ds.split(Split::Classification).len(), 20_000);
    let test = ds.split(Split::Test);
    assert_eq!(test.len(), 2_000);
    assert!(ds.split(Split::Representation).labels().is_err());
    for task in Task::ALL {
        let labels = test.task_labels(task).unwrap();
        let k = task.classes();
        let expected = labels.len() as f64 / k as f64;
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for c in &counts {
            assert!((*c as f64 - expected).abs() <= 0.1 * expected, "{task}: {counts:?}");
        }
        let majority = *counts.iter().max().unwrap() as f64 / labels.len() as f64;
        assert!((majority - task.chance()).abs() < 0.05);
    }
}

#[test]
fn save_load_round_trip_is_byte_identical() {
    let cfg = small();
    let a = build_datasets(7, &cfg).unwrap();
    let b = build_datasets(7, &cfg).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = a.save(da.path()).unwrap();
    let mb = b.save(db.path()).unwrap();
    assert_eq!(ma, mb);
    for name in ma.files.keys() {
        assert_eq!(
            std::fs::read(da.path().join(name)).unwrap(),
            std::fs::read(db.path().join(name)).unwrap()
        );
    }
    let back = Dataset::load(da.path()).unwrap();
    assert_eq!(back, a);

    let victim = da.path().join(ma.files.keys().next().unwrap());
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(Dataset::load(da.path()).is_err());
}

/// Trains a small classifier on one clean modality latent for all five tasks.
fn single_modality_accuracy(ds: &Dataset, m: Modality) -> [f64; 5] {
    let train = ds.split(Split::Classification);
    let test = ds.split(Split::Test);
    let mut rng = seed::rng(8, m.index() as u64, 0);
    let heads: Vec<Mlp> = Task::ALL
        .iter()
        .map(|t| Mlp::new(format!("h/{t}"), &[m.dim(), 128, 128, t.classes()], Activation::Gelu))
        .collect();
    let mut params = ParamSet::new();
    for h in &heads {
        h.init(&mut params, &mut rng).unwrap();
    }
    let labels = train.labels().unwrap();
    let (n, batch, epochs) = (train.len(), 100, 15);
    let sched = OneCycle::new(epochs * n / batch, 1e-2);
    let mut adam = Adam::new(AdamConfig::default());
    let mut step = 0;
    for _ in 0..epochs {
        for start in (0..n).step_by(batch) {
            let idx: Vec<usize> = (start..start + batch).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(train.latent(m).gather_rows(&idx));
            let mut loss = None;
            for (h, t) in heads.iter().zip(Task::ALL) {
                let logits = h.forward(&mut g, &bound, x).unwrap();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i][t.index()]).collect();
                let ce = g.cross_entropy(logits, &y).unwrap();
                loss = Some(match loss {
                    None => ce,
                    Some(l) => g.add(l, ce).unwrap(),
                });
            }
            let grads = g.backward(loss.unwrap()).unwrap();
            adam.step(&mut params, &bound, &grads, sched.lr(step).unwrap()).unwrap();
            step += 1;
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(test.latent(m).clone());
    let tl = test.labels().unwrap();
    Task::ALL.map(|t| {
        let logits = heads[t.index()].forward(&mut g, &bound, x).unwrap();
        let pred = argmax_rows(g.value(logits));
        pred.iter().zip(tl).filter(|(p, l)| **p == l[t.index()]).count() as f64 / tl.len() as f64
    })
}

#[test]
fn every_modality_alone_supports_every_task() {
    let ds = build_datasets(9, &small()).unwrap();
    for m in Modality::ALL {
        let acc = single_modality_accuracy(&ds, m);
        for t in Task::ALL {
            assert!(acc[t.index()] >= 0.95, "{m} / {t}: {:.3}", acc[t.index()]);
        }
    }
}

#[test]
fn classification_attributes_stay_in_kept_bins() {
    let ds_attrs = generate_attributes(10, Split::Test, 500);
    let (attrs, labels) = (ds_attrs.0, ds_attrs.1.unwrap());
    for (a, l) in attrs.iter().zip(&labels) {
        assert_eq!(&make_classification_labels(a).unwrap(), l);
    }
    let t: Tensor = build_backbone(10, &small()).encode_backbone(&attrs, Modality::Text);
    assert!(t.is_finite());
}
