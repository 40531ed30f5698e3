use super::*;
use crate::autodiff::{Adam, Tape};
use crate::terraingen::{build_dataset, DatasetConfig, SplitSize, Subset};

fn tiny_config() -> DptConfig {
    DptConfig { conv_channels: vec![4, 4], kernel: 3, embed_freqs: 2, hidden: vec![8] }
}

fn ramp_colors(h: usize, w: usize) -> Vec<f32> {
    (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

fn small_dataset() -> crate::terraingen::Dataset {
    let cfg = DatasetConfig {
        height: 20,
        width: 20,
        train: SplitSize { maps: 6, templates: 2 },
        val: SplitSize { maps: 2, templates: 1 },
        test: SplitSize { maps: 1, templates: 1 },
        crater_radius: [4.0, 5.0],
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, 3).unwrap()
}

#[test]
fn untrained_output_is_analytic() {
    let net = DptNetwork::new(&DptConfig::default(), 1).unwrap();
    let colors = ramp_colors(6, 6);
    let g = GridGraph::build(&[0.0; 36], 6, 6, 1.0).unwrap();
    let (_, src, dst, pitch) = edge_lists(&g);
    let p = [&pitch[..]];
    let out = net.predict(&EdgeBatch { colors: &colors, height: 6, width: 6, src: &src, dst: &dst, pitches: &p, restrict: false }).unwrap();
    let expected = (2f64.ln() + VAR_FLOOR) as f32;
    assert!(out[0].0.iter().all(|&m| m == 0.0));
    assert!(out[0].1.iter().all(|&v| (v - expected).abs() < 1e-7));
    assert!((expected - 0.6931).abs() < 1e-4);
}

#[test]
fn variance_floor_and_determinism() {
    let mut net = DptNetwork::new(&tiny_config(), 2).unwrap();
    // Push the variance head far negative.
    let ids: Vec<_> = net.store().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if name == "fc1.b" {
            net.store_mut().get_mut(id).value.data_mut()[1] = -80.0;
        }
    }
    let colors = ramp_colors(5, 5);
    let src = [0u32, 6, 12];
    let dst = [1u32, 7, 13];
    let phi = [0.1, -0.4, 0.3];
    let p = [&phi[..]];
    let b = EdgeBatch { colors: &colors, height: 5, width: 5, src: &src, dst: &dst, pitches: &p, restrict: false };
    let a = net.predict(&b).unwrap();
    assert!(a[0].1.iter().all(|&v| v as f64 >= VAR_FLOOR * 0.999));
    assert_eq!(a[0].0, net.predict(&b).unwrap()[0].0);
}

#[test]
fn restricted_features_match_full_pass() {
    let net = DptNetwork::new(&DptConfig::default(), 5).unwrap();
    let ds = small_dataset();
    let map = &ds.split(Subset::Train)[0];
    let g = map.graph();
    let colors = map.colors_f32();
    let (_, src, dst, pitch) = edge_lists(&g);
    // A handful of edges from the middle of the map.
    let pick: Vec<usize> = (0..src.len()).filter(|&i| src[i] % 7 == 3).take(40).collect();
    let s: Vec<u32> = pick.iter().map(|&i| src[i]).collect();
    let d: Vec<u32> = pick.iter().map(|&i| dst[i]).collect();
    let ph: Vec<f64> = pick.iter().map(|&i| pitch[i]).collect();
    let p = [&ph[..]];
    let mk = |restrict| EdgeBatch { colors: &colors, height: 20, width: 20, src: &s, dst: &d, pitches: &p, restrict };
    assert_eq!(net.predict(&mk(true)).unwrap()[0], net.predict(&mk(false)).unwrap()[0]);
}

#[test]
fn features_shape_and_receptive_field() {
    let net = DptNetwork::new(&DptConfig::default(), 9).unwrap();
    let (h, w) = (15, 15);
    let mut tape = Tape::new();
    let flat = vec![0.4f32; h * w * 3];
    let f = net.features(&mut tape, &flat, h, w, None).unwrap();
    let fv = tape.value(f).unwrap().clone();
    assert_eq!(fv.shape(), &[h * w, 16]);
    // Constant input: interior features agree.
    let row = |v: usize| fv.data()[v * 16..(v + 1) * 16].to_vec();
    for r in 3..h - 3 {
        for c in 3..w - 3 {
            assert_eq!(row(r * w + c), row(7 * w + 7));
        }
    }
    let mut bumped = flat.clone();
    bumped[(7 * w + 7) * 3] = 0.9;
    let g = net.features(&mut tape, &bumped, h, w, None).unwrap();
    let gv = tape.value(g).unwrap().clone();
    for r in 0..h {
        for c in 0..w {
            let v = r * w + c;
            let same = fv.data()[v * 16..(v + 1) * 16] == gv.data()[v * 16..(v + 1) * 16];
            let inside = r.abs_diff(7) <= 3 && c.abs_diff(7) <= 3;
            if !inside {
                assert!(same, "feature at ({r},{c}) changed outside the receptive field");
            }
        }
    }
}

#[test]
fn slope_embedding_is_continuous() {
    let mut a = Vec::new();
    let mut b = Vec::new();
    slope_embedding(0.2, 4, &mut a);
    slope_embedding(0.2 + 1e-6, 4, &mut b);
    assert_eq!(a.len(), 9);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
}

#[test]
fn mixture_moment_examples() {
    let m = mixture_moments(&[0.1, 0.3], &[0.01, 0.04]);
    assert!((m.mean - 0.2).abs() < 1e-12);
    assert!((m.aleatoric - 0.025).abs() < 1e-12);
    assert!((m.epistemic - 0.01).abs() < 1e-12);
    assert!((m.total - 0.035).abs() < 1e-12);
    let same = mixture_moments(&[0.3, 0.3, 0.3], &[0.02, 0.04, 0.06]);
    assert_eq!(same.epistemic, 0.0);
    assert!((same.total - 0.04).abs() < 1e-15);
}

#[test]
fn identical_members_have_no_epistemic_term() {
    let ds = small_dataset();
    let map = ds.split(Subset::Val)[0];
    let mut ens = Ensemble::new(&tiny_config(), 3, 4).unwrap();
    let proto = ens.members[0].clone();
    ens.members.iter_mut().for_each(|m| *m = proto.clone());
    // Give the head non-zero weights so predictions vary per edge.
    let mut nonzero = ens.clone();
    for m in nonzero.members.iter_mut() {
        for p in m.store_mut().iter_mut() {
            if p.name == "fc1.w" {
                p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.2);
            }
        }
    }
    let pred = nonzero.predict_instance(map, false).unwrap();
    assert!(pred.epistemic.iter().filter(|v| v.is_finite()).all(|&v| v == 0.0));
    for s in 0..pred.slots {
        if pred.total[s].is_finite() {
            assert!((pred.total[s] - pred.aleatoric[s] - pred.epistemic[s]).abs() < 1e-12);
        }
    }
}

#[test]
fn wrapping_preserves_outputs_and_freezes_base() {
    let ds = small_dataset();
    let map = ds.split(Subset::Train)[1];
    let net = DptNetwork::new(&DptConfig::default(), 3).unwrap();
    let mut ens = Ensemble { members: vec![net.clone(), DptNetwork::new(&DptConfig::default(), 4).unwrap()], best_epoch: vec![None; 2] };
    // Non-trivial head so the comparison is not all zeros.
    for m in ens.members.iter_mut() {
        for p in m.store_mut().iter_mut() {
            if p.name.ends_with(".w") && p.name.starts_with("fc") {
                p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i as f32 * 0.11).cos() * 0.1);
            }
        }
    }
    let before = ens.predict_instance(map, true).unwrap();
    ens.wrap_with_adaptation().unwrap();
    let after = ens.predict_instance(map, true).unwrap();
    for k in 0..2 {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before.mu[k]), bits(&after.mu[k]));
        assert_eq!(bits(&before.var[k]), bits(&after.var[k]));
    }
    assert!(matches!(ens.members[0].wrap_with_adaptation(), Err(DptError::AlreadyWrapped)));
    let m = &ens.members[0];
    assert_eq!(m.adaptation_param_count(), 2 * (16 * 3 + 32 + 32 + 2));
    assert_eq!(m.store().trainable_count(), m.adaptation_param_count());
    assert!(m.adaptation_param_count() * 10 < m.base_param_count());
}

#[test]
fn training_steps_reduce_loss_on_fixed_batch() {
    let ds = small_dataset();
    let map = ds.split(Subset::Train)[0];
    let g = map.graph();
    let colors = map.colors_f32();
    let (slots, src, dst, pitch) = edge_lists(&g);
    let target: Vec<f32> = slots.iter().map(|&s| map.slip[s]).collect();
    let p = [&pitch[..]];
    let batch = EdgeBatch { colors: &colors, height: 20, width: 20, src: &src, dst: &dst, pitches: &p, restrict: false };
    for seed in 0..3 {
        let mut net = DptNetwork::new(&DptConfig::default(), seed).unwrap();
        let adam = Adam::new(1e-3);
        let mut tape = Tape::new();
        let mut losses = Vec::new();
        for _ in 0..11 {
            let l = net.nll(&mut tape, &batch, &target).unwrap();
            losses.push(tape.value(l).unwrap().item().unwrap());
            tape.backward(l, net.store_mut()).unwrap();
            adam.step(net.store_mut());
        }
        assert!(losses[10] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn pretrain_lowers_nll_and_checkpoints_round_trip() {
    let ds = small_dataset();
    let train = ds.split(Subset::Train);
    let val = ds.split(Subset::Val);
    let mut ens = Ensemble::new(&tiny_config(), 2, 8).unwrap();
    let cfg = TrainConfig { members: 2, epochs: 4, batch_maps: 2, window: 8, val_window: 10, ..TrainConfig::default() };
    let hist = pretrain(&mut ens, &train, &val, &cfg).unwrap();
    for h in &hist.members {
        assert_eq!(h.train_nll.len(), 5);
        assert!(h.train_nll.last().unwrap() < &h.train_nll[0]);
        assert!(h.val_nll[h.best_epoch] <= h.val_nll[0]);
    }
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    let back = Ensemble::load(dir.path()).unwrap();
    let a = ens.predict_instance(val[0], true).unwrap();
    let b = back.predict_instance(val[0], true).unwrap();
    let bits = |p: &SlipPrediction| p.mu.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(back.best_epoch, ens.best_epoch);

    // Same seeds, same weights.
    let mut again = Ensemble::new(&tiny_config(), 2, 8).unwrap();
    pretrain(&mut again, &train, &val, &cfg).unwrap();
    assert_eq!(bits(&again.predict_instance(val[0], false).unwrap()), bits(&a));
}

#[test]
fn mae_of_perfect_and_constant_predictors() {
    let ds = small_dataset();
    let map = ds.split(Subset::Val)[0];
    let g = map.graph();
    let ens = Ensemble::new(&tiny_config(), 2, 1).unwrap();
    let mut pred = ens.predict_instance(map, false).unwrap();
    for e in g.edges() {
        pred.mean[e.id.slot()] = map.slip[e.id.slot()] as f64;
    }
    assert_eq!(abs_error_sum(&pred, &map.slip).0, 0.0);
    let labels: Vec<f64> = g.edges().map(|e| map.slip[e.id.slot()] as f64).collect();
    let avg = labels.iter().sum::<f64>() / labels.len() as f64;
    let mad = labels.iter().map(|l| (l - avg).abs()).sum::<f64>() / labels.len() as f64;
    for e in g.edges() {
        pred.mean[e.id.slot()] = avg;
    }
    let (s, n) = abs_error_sum(&pred, &map.slip);
    assert!((s / n as f64 - mad).abs() < 1e-6);
}
