use super::*;
use crate::imaging::{gen_coils, gen_vd_mask, Mask, OperatorPool};
use crate::numerics::AdamWHyper;

fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut img = Tensor::complex_zeros(&[h, w]);
    for p in 0..h * w {
        let v = 0.4 + 0.3 * ((p as f64 + seed as f64) * 0.37).sin();
        let ph = 0.2 * ((p as f64 - seed as f64) * 0.13).cos();
        img.c_set(p, v * ph.cos(), v * ph.sin());
    }
    img
}

fn ones_mask(h: usize, w: usize) -> Mask {
    Mask { pattern: Tensor::full(&[h, w], 1.0), accel: 1.0, acs_half_width: h / 2 }
}

fn single_coil_op(h: usize, w: usize, accel: f64, seed: u64) -> ImagingOperator {
    let mask = if accel <= 1.0 {
        ones_mask(h, w)
    } else {
        gen_vd_mask(h, w, accel, 1, seed).unwrap()
    };
    ImagingOperator::new(mask, gen_coils(h, w, 1, seed + 7).unwrap()).unwrap()
}

fn multi_coil_op(h: usize, w: usize, accel: f64, seed: u64) -> ImagingOperator {
    let mask = gen_vd_mask(h, w, accel, 1, seed).unwrap();
    ImagingOperator::new(mask, gen_coils(h, w, 3, seed + 9).unwrap()).unwrap()
}

fn sample_from(img: Tensor, op: ImagingOperator) -> ReconSample {
    ReconSample::acquire(img, op).unwrap()
}

#[test]
fn build_model_deterministic_and_structured() {
    let spec = ArchSpec::cascade_dc(5);
    let a = build_model(&spec, 0, 3).unwrap();
    let b = build_model(&spec, 0, 3).unwrap();
    for path in a.params.paths() {
        assert_eq!(a.params.get(path).unwrap().data(), b.params.get(path).unwrap().data());
    }
    for i in 0..5 {
        assert!(a.params.get(&format!("casc{i}/c1/w")).is_some());
        assert!(a.params.get(&format!("casc{i}/mu")).is_some());
    }
    assert!(a.params.get("casc5/c1/w").is_none());
}

#[test]
fn families_are_not_shape_compatible() {
    let u = build_model(&ArchSpec::unrolled(5), 0, 1).unwrap();
    let c = build_model(&ArchSpec::cascade_dc(3), 1, 1).unwrap();
    let ae = build_model(&ArchSpec::conv_autoencoder(), 2, 1).unwrap();
    assert!(!u.params.shape_compatible(&c.params));
    assert!(!u.params.shape_compatible(&ae.params));
    assert!(!c.params.shape_compatible(&ae.params));
}

#[test]
fn dc_mu_zero_is_identity() {
    let op = multi_coil_op(8, 8, 4.0, 21);
    let x = test_image(8, 8, 1);
    let other = test_image(8, 8, 5);
    let y = crate::imaging::forward_op(&other, &op).unwrap();
    let out = dc_apply(&x, &op, &y, DcMode::Soft(0.0)).unwrap();
    // unit-SOS coil combine of the untouched per-coil spectra recovers x
    assert!(out.sub(&x).unwrap().norm() < 1e-10);
}

#[test]
fn dc_consistent_input_is_fixed_point() {
    let op = multi_coil_op(8, 8, 4.0, 22);
    let x = test_image(8, 8, 2);
    let y = crate::imaging::forward_op(&x, &op).unwrap();
    for mode in [DcMode::Soft(0.3), DcMode::Soft(5.0), DcMode::Hard] {
        let out = dc_apply(&x, &op, &y, mode).unwrap();
        assert!(out.sub(&x).unwrap().norm() < 1e-10, "{mode:?}");
    }
}

#[test]
fn dc_hard_matches_measurements_at_sampled_locations() {
    // single-coil: the emitted image's k-space must equal y on the mask
    let op = single_coil_op(8, 8, 4.0, 23);
    let x = test_image(8, 8, 3);
    let truth = test_image(8, 8, 4);
    let y = crate::imaging::forward_op(&truth, &op).unwrap();
    let out = dc_apply(&x, &op, &y, DcMode::Hard).unwrap();
    assert!(dc_residual(&out, &op, &y).unwrap() < 1e-12);
}

#[test]
fn dc_block_gradients_match_finite_differences() {
    let op = multi_coil_op(8, 8, 4.0, 24);
    let truth = test_image(8, 8, 6);
    let y = crate::imaging::forward_op(&truth, &op).unwrap();
    let x0 = test_image(8, 8, 7).complex_to_channels();
    let mu0 = Tensor::full(&[1], 0.3);
    // scalar objective: sum of squares of the block output
    let loss_at = |x: &Tensor, mu: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let mv = t.constant(mu.clone());
        let out = dc::dc_block(&mut t, xv, Some(mv), &op, &y).unwrap();
        let sq = t.mul(out, out).unwrap();
        let s = t.sum_all(sq);
        t.value(s).item()
    };
    let (gx, gmu) = {
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let mv = t.leaf(mu0.clone());
        let out = dc::dc_block(&mut t, xv, Some(mv), &op, &y).unwrap();
        let sq = t.mul(out, out).unwrap();
        let s = t.sum_all(sq);
        let store = t.backward(s).unwrap();
        (store.get(xv).unwrap().clone(), store.get(mv).unwrap().clone())
    };
    let h = 1e-5;
    let mut rng = crate::nn::seeded_rng(77);
    use rand::Rng;
    for _ in 0..20 {
        let i = rng.gen_range(0..x0.data().len());
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss_at(&xp, &mu0) - loss_at(&xm, &mu0)) / (2.0 * h);
        let an = gx.data()[i];
        let denom = an.abs().max(fd.abs()).max(1e-3);
        assert!(((an - fd) / denom).abs() < 1e-6, "x[{i}]: {an} vs {fd}");
    }
    let mut mp = mu0.clone();
    mp.data_mut()[0] += h;
    let mut mm = mu0.clone();
    mm.data_mut()[0] -= h;
    let fd = (loss_at(&x0, &mp) - loss_at(&x0, &mm)) / (2.0 * h);
    let an = gmu.item();
    assert!(((an - fd) / an.abs().max(fd.abs()).max(1e-3)).abs() < 1e-6, "mu: {an} vs {fd}");
}

#[test]
fn forward_recon_shapes_and_fully_sampled_identity() {
    for spec in [ArchSpec::unrolled(2), ArchSpec::cascade_dc(2), ArchSpec::conv_autoencoder()] {
        let model = build_model(&spec, 0, 30).unwrap();
        let op = single_coil_op(8, 8, 1.0, 31);
        let sample = sample_from(test_image(8, 8, 8), op);
        let x_hat = reconstruct(&model, &sample).unwrap();
        assert_eq!(x_hat.dims(), &[8, 8]);
        // identity-initialized denoisers + all-ones mask: output is the input
        assert!(
            x_hat.sub(&sample.x_ref).unwrap().norm() < 1e-10,
            "{:?}",
            spec.family
        );
    }
}

#[test]
fn emitted_reconstructions_satisfy_hard_dc() {
    for spec in [ArchSpec::unrolled(3), ArchSpec::cascade_dc(2), ArchSpec::conv_autoencoder()] {
        let mut model = build_model(&spec, 0, 32).unwrap();
        // arbitrary non-identity weights
        for (_, t) in model.params.iter_mut() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((j % 13) as f64 - 6.0);
            }
        }
        let op = single_coil_op(8, 8, 4.0, 33);
        let sample = sample_from(test_image(8, 8, 9), op);
        let x_hat = reconstruct(&model, &sample).unwrap();
        let r = dc_residual(&x_hat, &sample.op, &sample.y).unwrap();
        assert!(r < 1e-10, "{:?}: residual {r}", spec.family);
    }
}

#[test]
fn pretrain_zero_lr_and_determinism() {
    let spec = ArchSpec::cascade_dc(1);
    let op = single_coil_op(8, 8, 4.0, 34);
    let data: Vec<ReconSample> =
        (0..3).map(|i| sample_from(test_image(8, 8, 10 + i), op.clone())).collect();
    let cfg0 = ReconTrainConfig {
        epochs: 2,
        batch_size: 2,
        hyper: AdamWHyper { lr: 0.0, weight_decay: 0.0, ..AdamWHyper::default() },
        seed: 5,
    };
    let mut m = build_model(&spec, 0, 35).unwrap();
    let before = m.params.clone();
    let losses = pretrain_local(&mut m, &data, &cfg0).unwrap();
    assert_eq!(losses.len(), 2);
    for path in before.paths() {
        assert_eq!(m.params.get(path).unwrap().data(), before.get(path).unwrap().data());
    }
    let cfg = ReconTrainConfig { epochs: 3, batch_size: 2, seed: 6, ..ReconTrainConfig::default() };
    let mut m1 = build_model(&spec, 0, 36).unwrap();
    let l1 = pretrain_local(&mut m1, &data, &cfg).unwrap();
    let mut m2 = build_model(&spec, 0, 36).unwrap();
    let l2 = pretrain_local(&mut m2, &data, &cfg).unwrap();
    assert_eq!(l1, l2);
    for path in m1.params.paths() {
        assert_eq!(m1.params.get(path).unwrap().data(), m2.params.get(path).unwrap().data());
    }
    assert!(l1.last().unwrap() < l1.first().unwrap());
}

#[test]
fn synthetic_source_rotation_skips_self() {
    // 3 sites, site 0: alternate between 1 and 2
    let seq: Vec<usize> = (0..6).map(|e| synthetic_source(0, e, 3)).collect();
    assert_eq!(seq, vec![1, 2, 1, 2, 1, 2]);
    let seq: Vec<usize> = (0..4).map(|e| synthetic_source(1, e, 3)).collect();
    assert_eq!(seq, vec![0, 2, 0, 2]);
    // two sites: always the other one
    assert_eq!(synthetic_source(0, 5, 2), 1);
}

#[test]
fn finetune_validation_and_zero_epochs() {
    let spec = ArchSpec::unrolled(1);
    let op = single_coil_op(8, 8, 4.0, 37);
    let data: Vec<ReconSample> =
        (0..2).map(|i| sample_from(test_image(8, 8, 20 + i), op.clone())).collect();
    let mut m = build_model(&spec, 0, 38).unwrap();
    let before = m.params.clone();
    let cfg = ReconTrainConfig { epochs: 0, batch_size: 2, seed: 1, ..ReconTrainConfig::default() };
    let synth = vec![(1usize, data.clone()), (2usize, data.clone())];
    let losses = finetune_hybrid(&mut m, &data, &synth, 3, &cfg).unwrap();
    assert!(losses.is_empty());
    for path in before.paths() {
        assert_eq!(m.params.get(path).unwrap().data(), before.get(path).unwrap().data());
    }
    // an empty synthetic set is a config error
    let bad = vec![(1usize, vec![]), (2usize, data.clone())];
    assert!(finetune_hybrid(&mut m, &data, &bad, 3, &cfg).is_err());
    assert!(finetune_hybrid(&mut m, &data, &synth[..1].to_vec(), 3, &cfg).is_err());
}

#[test]
fn finetune_on_local_copies_is_continued_local_training() {
    // synthetic pools replaced by copies of the local set: each hybrid
    // epoch trains on local ∪ local, exactly like local training on the
    // doubled pool with the same seed
    let spec = ArchSpec::cascade_dc(1);
    let op = single_coil_op(8, 8, 4.0, 39);
    let data: Vec<ReconSample> =
        (0..2).map(|i| sample_from(test_image(8, 8, 40 + i), op.clone())).collect();
    let cfg = ReconTrainConfig { epochs: 2, batch_size: 2, seed: 9, ..ReconTrainConfig::default() };
    let mut hybrid = build_model(&spec, 0, 41).unwrap();
    let synth = vec![(1usize, data.clone()), (2usize, data.clone())];
    let lh = finetune_hybrid(&mut hybrid, &data, &synth, 3, &cfg).unwrap();
    let mut localm = build_model(&spec, 0, 41).unwrap();
    let doubled: Vec<ReconSample> = data.iter().chain(data.iter()).cloned().collect();
    let ll = pretrain_local(&mut localm, &doubled, &cfg).unwrap();
    assert_eq!(lh, ll);
    for path in hybrid.params.paths() {
        assert_eq!(
            hybrid.params.get(path).unwrap().data(),
            localm.params.get(path).unwrap().data()
        );
    }
}

#[test]
fn evaluate_schema_inf_count_and_determinism() {
    let model = build_model(&ArchSpec::unrolled(1), 0, 50).unwrap();
    // fully sampled: identity-initialized model reproduces the reference
    // to FFT round-off, which counts as infinite PSNR
    let full: Vec<ReconSample> = (0..3)
        .map(|i| sample_from(test_image(8, 8, 50 + i), single_coil_op(8, 8, 1.0, 51)))
        .collect();
    let m = evaluate(&model, &full).unwrap();
    assert_eq!(m.inf_count, 3);
    assert_eq!(m.n, 3);
    assert!(m.psnr_mean.is_nan()); // no finite values to aggregate
    let us: Vec<ReconSample> = (0..3)
        .map(|i| sample_from(test_image(8, 8, 60 + i), single_coil_op(8, 8, 4.0, 52 + i)))
        .collect();
    let a = evaluate(&model, &us).unwrap();
    let b = evaluate(&model, &us).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.inf_count, 0);
    assert!(a.psnr_mean.is_finite() && a.ssim_mean.is_finite());
    assert!(evaluate(&model, &[]).is_err());
}

#[test]
fn sample_invariants_and_synthesis() {
    use crate::ar_transformer::{PriorModel, TransformerConfig};
    use crate::vq_codec::{CodecConfig, CodecModel};
    let pool = OperatorPool::new(8, 8, 1, 4.0, 1, 70, 71).unwrap();
    let sample = sample_from(test_image(8, 8, 70), pool.draw(0).unwrap());
    sample.validate().unwrap();
    // corrupting the zero-filled image breaks the invariant
    let mut bad = sample.clone();
    bad.x_us.c_set(0, 9.0, 9.0);
    assert!(bad.validate().is_err());

    let prior_cfg = TransformerConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        ffn_mult: 2,
        vocab: 8,
        schedule: vec![1, 2],
        num_sites: 3,
        nucleus_q: 0.5,
        ..TransformerConfig::default()
    };
    let prior = PriorModel::new(prior_cfg, 72).unwrap();
    let codec_cfg = CodecConfig {
        h: 8,
        w: 8,
        latent_channels: 3,
        vocab: 8,
        schedule: vec![1, 2],
        width: 4,
    };
    let codec = CodecModel::new(codec_cfg, 73).unwrap();
    let mut rng = crate::nn::seeded_rng(74);
    let triples = synth_site_dataset(&prior, &codec, 1, &pool, 4, 100, &mut rng).unwrap();
    assert_eq!(triples.len(), 4);
    for t in &triples {
        t.validate().unwrap();
    }
    // fresh mask per sample
    assert_ne!(
        triples[0].op.mask.pattern.data(),
        triples[1].op.mask.pattern.data()
    );
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model(&ArchSpec::conv_autoencoder(), 2, 80).unwrap();
    let path = dir.path().join("model.bin");
    save_recon_model(&path, &model).unwrap();
    let back = load_recon_model(&path).unwrap();
    assert_eq!(back.spec, model.spec);
    assert_eq!(back.site, 2);
    for p in model.params.paths() {
        assert_eq!(back.params.get(p).unwrap().data(), model.params.get(p).unwrap().data());
    }
}

#[test]
fn eval_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![EvalRow {
        site: 0,
        target_site: 1,
        accel: 4.0,
        metrics: Metrics {
            psnr_mean: 30.5,
            psnr_std: 1.0,
            ssim_mean: 0.9,
            ssim_std: 0.01,
            n: 8,
            inf_count: 0,
        },
    }];
    let path = dir.path().join("eval.csv");
    write_eval_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "site,target_site,R,psnr_mean,psnr_std,ssim_mean,ssim_std,n,inf_count"
    );
    assert_eq!(lines.next().unwrap(), "0,1,4,30.5,1,0.9,0.01,8,0");
}
