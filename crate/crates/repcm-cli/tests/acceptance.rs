//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `-- --nocapture` to see them live).
//!
//! Criteria 1-8 are exact or oracle-backed contracts; 9-13 are desk-scale
//! experiments on the synthetic cohort; 14 drives the installed CLI binary
//! end to end twice and compares bytes.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use repcm_core::autodiff::Tape;
use repcm_core::mesh::{
    chamber_volume, farthest_point_sampling, icosphere, unit_cube, Chamber, MeshSequence,
    MeshTopology, Phenotype, RegionPartition,
};
use repcm_core::metrics;
use repcm_core::model::layers::{masked_sync_attention, Film, MaskMode, ParamSet};
use repcm_core::model::losses::{kl_diag_gaussian, GaussianParams};
use repcm_core::model::moe::{cosine_gates, ExpertHeadParams, MoEPrior};
use repcm_core::model::{ModelConfig, RepcmModel};
use repcm_core::partition::{
    adjusted_rand_index, cluster_regions, extract_motion_descriptors, partition_cohort,
    DescriptorSource,
};
use repcm_core::synthdata::{default_programs, generate_cohort, GeneratorConfig, SyntheticCohort};
use repcm_core::training::{completion_vtx_rmse, fit, FitResult, TrainConfig};

fn pass(criterion: usize, detail: &str) {
    println!("[criterion {criterion:02}] PASS: {detail}");
}

// --- criterion 1: mask correctness -----------------------------------------

#[test]
fn criterion_01_mask_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for draw in 0..100 {
        let r = rng.random_range(2..10usize);
        let c = rng.random_range(2..12usize);
        let r0v = Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 4.0 - 2.0);
        let rtv = Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 4.0 - 2.0);
        let mut a = Array2::<f64>::zeros((r, r));
        for i in 0..r {
            a[[i, i]] = 1.0;
            for j in 0..i {
                if rng.random::<f64>() < 0.45 {
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                }
            }
        }
        let mut tape = Tape::new();
        let r0 = tape.constant(r0v);
        let rt = tape.constant(rtv);
        let out = masked_sync_attention(&mut tape, r0, rt, &a, MaskMode::Additive).unwrap();
        let w = tape.value(out.routing);
        for i in 0..r {
            let mut sum = 0.0;
            for j in 0..r {
                if a[[i, j]] == 0.0 {
                    assert_eq!(w[[i, j]], 0.0, "draw {draw}: W[{i}][{j}] must be exactly 0");
                }
                sum += w[[i, j]];
            }
            assert!((sum - 1.0).abs() <= 1e-6, "draw {draw}: row {i} sums to {sum}");
        }
    }
    pass(1, "100 random (r0, A) draws: W = 0 exactly off the mask, rows sum to 1 within 1e-6");
}

// --- criterion 2: one routing matrix drives both streams -------------------

#[test]
fn criterion_02_syncattention_shares_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let r0v = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>() - 0.5);
    let rt1 = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>() - 0.5);
    let rt2 = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>() - 0.5);
    let mut a = Array2::<f64>::from_elem((6, 6), 0.0);
    for i in 0..6 {
        a[[i, i]] = 1.0;
        a[[i, (i + 1) % 6]] = 1.0;
        a[[(i + 1) % 6, i]] = 1.0;
    }
    let run = |rtv: &Array2<f64>| {
        let mut tape = Tape::new();
        let r0 = tape.constant(r0v.clone());
        let rt = tape.constant(rtv.clone());
        let out = masked_sync_attention(&mut tape, r0, rt, &a, MaskMode::Additive).unwrap();
        (
            tape.value(out.routing).clone(),
            tape.value(out.shape).clone(),
            tape.value(out.motion.unwrap()).clone(),
        )
    };
    let (w1, s1, m1) = run(&rt1);
    let (w2, s2, m2) = run(&rt2);
    assert!(w1.iter().zip(w2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(s1.iter().zip(s2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(m1.iter().zip(m2.iter()).any(|(a, b)| a != b));
    pass(2, "swapping motion values: routing and shape stream bit-identical, motion stream changed");
}

// --- criterion 3: FiLM identity at initialization --------------------------

#[test]
fn criterion_03_film_identity_at_init() {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let film = Film::new(&mut ps, "film", 16, &mut rng);
    let mut tape = Tape::new();
    let bind = ps.bind_frozen(&mut tape);
    let xv = Array2::from_shape_fn((9, 16), |_| rng.random::<f64>() * 10.0 - 5.0);
    let ctxv = Array2::from_shape_fn((9, 16), |_| rng.random::<f64>() * 10.0 - 5.0);
    let x = tape.constant(xv.clone());
    let ctx = tape.constant(ctxv);
    let y = film.forward(&mut tape, &bind, x, ctx);
    assert!(tape
        .value(y)
        .iter()
        .zip(xv.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    pass(3, "zero-initialized FiLM heads are the exact identity map");
}

// --- criterion 4: MoE prior contract ----------------------------------------

#[test]
fn criterion_04_moe_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let c = 12;
    let head = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ExpertHeadParams {
            w1: Array2::from_shape_fn((c, c), |_| r.random::<f64>() - 0.5),
            b1: Array2::zeros((1, c)),
            w2: Array2::from_shape_fn((c, 8), |_| r.random::<f64>() - 0.5),
            b2: Array2::zeros((1, 8)),
        }
    };
    let tokens = Array2::from_shape_fn((20, c), |_| rng.random::<f64>() - 0.5);

    // gates sum to 1, combined variance positive
    let moe = MoEPrior {
        prototypes: Array2::from_shape_fn((4, c), |_| rng.random::<f64>() - 0.5),
        heads: (0..4).map(|e| head(e as u64)).collect(),
        momentum: 0.99,
    };
    let (p, gates) = moe.prior(&tokens.view()).unwrap();
    assert!((gates.sum() - 1.0).abs() < 1e-12);
    assert!(gates.iter().all(|&g| g > 0.0));
    assert!(p.variance().iter().all(|&v| v > 0.0));

    // E = 1 reduces to the single expert's output
    let single = MoEPrior {
        prototypes: Array2::from_elem((1, c), 0.3),
        heads: vec![head(9)],
        momentum: 0.99,
    };
    let (p1, g1) = single.prior(&tokens.view()).unwrap();
    assert_eq!(g1.len(), 1);
    assert_eq!(g1[0], 1.0);
    let e_s = tokens.mean_axis(ndarray::Axis(0)).unwrap();
    let direct = single.heads[0].evaluate(&e_s.view()).unwrap();
    assert!(p1.mean.iter().zip(direct.mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

    // identical prototypes give uniform weights within 1e-6
    let uniform = MoEPrior {
        prototypes: Array2::from_elem((5, c), -0.7),
        heads: (0..5).map(|e| head(20 + e as u64)).collect(),
        momentum: 0.99,
    };
    let (_, gu) = uniform.prior(&tokens.view()).unwrap();
    for g in gu.iter() {
        assert!((g - 0.2).abs() < 1e-6);
    }

    // gates invariant to positive rescaling of the embedding
    let protos = Array2::from_shape_fn((4, c), |_| rng.random::<f64>() - 0.5);
    let base = cosine_gates(&e_s.view(), &protos.view()).unwrap();
    let scaled_e = e_s.mapv(|v| v * 37.5);
    let scaled = cosine_gates(&scaled_e.view(), &protos.view()).unwrap();
    for (a, b) in base.iter().zip(scaled.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
    pass(4, "gate normalization, E=1 reduction, uniform gates for equal prototypes, positive variance");
}

// --- criterion 5: KL closed form vs Monte Carlo ------------------------------

#[test]
fn criterion_05_kl_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let dims = 16;
    let samples = 1_000_000usize;
    for draw in 0..10 {
        let q = GaussianParams::new(
            Array1::from_shape_fn(dims, |_| rng.random::<f64>() * 3.0 - 1.5),
            Array1::from_shape_fn(dims, |_| rng.random::<f64>() * 2.0 - 1.0),
        )
        .unwrap();
        let p = GaussianParams::new(
            Array1::from_shape_fn(dims, |_| rng.random::<f64>() * 3.0 - 1.5),
            Array1::from_shape_fn(dims, |_| rng.random::<f64>() * 2.0 - 1.0),
        )
        .unwrap();
        let exact = kl_diag_gaussian(&q, &p).unwrap();

        // E_q[ln q - ln p] by sampling z ~ q
        let q_std: Vec<f64> = q.log_variance.iter().map(|v| (0.5 * v).exp()).collect();
        let mut mc_rng = ChaCha8Rng::seed_from_u64(5050 + draw);
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut diff = 0.0;
            for d in 0..dims {
                let eps: f64 = StandardNormal.sample(&mut mc_rng);
                let z = q.mean[d] + q_std[d] * eps;
                let lq = -0.5 * ((z - q.mean[d]).powi(2) * (-q.log_variance[d]).exp() + q.log_variance[d]);
                let lp = -0.5 * ((z - p.mean[d]).powi(2) * (-p.log_variance[d]).exp() + p.log_variance[d]);
                diff += lq - lp;
            }
            acc += diff;
        }
        let mc = acc / samples as f64;
        let rel = (exact - mc).abs() / exact.abs().max(1e-9);
        assert!(rel < 0.01, "draw {draw}: exact {exact:.6} vs MC {mc:.6} (rel {rel:.4})");
    }
    pass(5, "closed-form KL within 1% of 1e6-sample Monte Carlo on 10 random 16-dim draws");
}

// --- criterion 6: gradient check ---------------------------------------------

#[test]
fn criterion_06_gradient_check() {
    // toy model: 2 regions, 4 anchors, T = 3, C = 8
    let config = ModelConfig {
        anchors: 4,
        channels: 8,
        latent_dim: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        experts: 2,
        regions: 2,
        mask_mode: MaskMode::Additive,
        beta: 0.7,
        prototype_momentum: 0.99,
        pe_levels: 2,
        normalization_scale: 10.0,
        frames: 3,
    };
    let (coords, faces) = icosphere(0);
    let n = coords.nrows();
    let topo = std::sync::Arc::new(MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap());
    let assignment: Vec<usize> = (0..n).map(|v| usize::from(coords[[v, 2]] < 0.0)).collect();
    let adjacency_u8 = repcm_core::partition::build_region_adjacency(&assignment, &topo).unwrap();
    let partition = RegionPartition::new(assignment, 2, adjacency_u8).unwrap();
    let ed = coords.mapv(|v| v * 8.0);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut frames = Array3::zeros((3, n, 3));
    for t in 0..3 {
        for v in 0..n {
            for c in 0..3 {
                let wiggle = if t == 0 { 0.0 } else { rng.random::<f64>() - 0.5 };
                frames[[t, v, c]] = ed[[v, c]] + wiggle;
            }
        }
    }
    let seq = MeshSequence::new(frames, topo, Phenotype::Nor, "toy".into()).unwrap();

    let mut model = RepcmModel::new(config, 6).unwrap();
    model.randomize_parameters(660);
    // keep the test point well conditioned: a large random trajectory head
    // inflates the loss to O(100), and the rounding noise of evaluating it
    // dominates central differences at the pinned 1e-5 step
    for i in 0..model.params.len() {
        model.params.value_mut(i).mapv_inplace(|v| v * 0.35);
    }
    let item = model.prepare_training_subject(&seq, &partition).unwrap();
    let adjacency = partition.adjacency_f64();
    let noise = Array1::from_shape_fn(4, |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let beta = 0.7;
    let (_, grads) = model.loss_and_grads(&item, &adjacency, &noise, beta, 1.0).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for pi in 0..model.params.len() {
        let dims = model.params.value(pi).dim();
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                let orig = model.params.value(pi)[[r, c]];
                model.params.value_mut(pi)[[r, c]] = orig + h;
                let plus = model.loss_only(&item, &adjacency, &noise, beta).unwrap().loss.total;
                model.params.value_mut(pi)[[r, c]] = orig - h;
                let minus = model.loss_only(&item, &adjacency, &noise, beta).unwrap().loss.total;
                model.params.value_mut(pi)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads[pi][[r, c]];
                let denom = analytic.abs().max(numeric.abs());
                let err = (analytic - numeric).abs();
                // near-zero gradients fall back to an absolute 1e-8 floor;
                // the 1e-4 relative criterion binds everywhere else
                if err > 1e-8 {
                    worst = worst.max(err / denom);
                }
                assert!(
                    err <= (1e-4 * denom).max(1e-8),
                    "{}[{r},{c}]: analytic {analytic}, numeric {numeric}",
                    model.params.name(pi)
                );
                checked += 1;
            }
        }
    }
    pass(
        6,
        &format!("{checked} parameter gradients match central differences (worst rel err {worst:.2e})"),
    );
}

// --- criterion 7: geometry oracles -------------------------------------------

#[test]
fn criterion_07_geometry_oracles() {
    let (cube, cube_topo) = unit_cube();
    assert_eq!(chamber_volume(&cube.view(), &cube_topo, Chamber::Lv).unwrap(), 1.0);

    let (sphere, faces) = icosphere(3);
    let n = sphere.nrows();
    let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
    let v = chamber_volume(&sphere.view(), &topo, Chamber::Lv).unwrap();
    let exact = 4.0 * std::f64::consts::PI / 3.0;
    assert!((v - exact).abs() / exact < 0.01);

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for trial in 0..6 {
        let (coords, faces) = icosphere(if trial % 2 == 0 { 1 } else { 2 });
        let n = coords.nrows();
        assert!(n <= 200, "oracle meshes stay small");
        let topo = MeshTopology::new(n, faces, vec![Chamber::Lv; n]).unwrap();
        let a = coords.mapv(|v| v * (1.0 + 0.3 * rng.random::<f64>()) + 0.1 * rng.random::<f64>());
        let b = coords.mapv(|v| v * (1.0 + 0.3 * rng.random::<f64>()) - 0.1 * rng.random::<f64>());
        let fast_assd = metrics::assd(&a.view(), &b.view(), &topo, Chamber::Lv).unwrap();
        let brute_assd = metrics::assd_brute(&a.view(), &b.view(), &topo, Chamber::Lv).unwrap();
        assert_eq!(fast_assd, brute_assd, "trial {trial}: ASSD must equal the brute-force oracle exactly");
        let fast_hd = metrics::hd95(&a.view(), &b.view(), &topo, Chamber::Lv).unwrap();
        let brute_hd = metrics::hd95_brute(&a.view(), &b.view(), &topo, Chamber::Lv).unwrap();
        assert_eq!(fast_hd, brute_hd, "trial {trial}: HD95 must equal the brute-force oracle exactly");
    }
    pass(7, "ASSD/HD95 equal brute force exactly; cube volume = 1.0; icosphere within 1% of 4*pi/3");
}

// --- criterion 8: FPS vs greedy oracle ---------------------------------------

#[test]
fn criterion_08_fps_oracle() {
    fn oracle(points: &Array2<f64>, k: usize, start: usize) -> Vec<usize> {
        let n = points.nrows();
        let d2 = |a: usize, b: usize| -> f64 {
            (0..3).map(|c| (points[[a, c]] - points[[b, c]]).powi(2)).sum()
        };
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..n {
                if sel.contains(&i) {
                    continue;
                }
                let m = sel.iter().map(|&s| d2(i, s)).fold(f64::INFINITY, f64::min);
                if m > best_d {
                    best_d = m;
                    best = i;
                }
            }
            sel.push(best);
        }
        sel
    }
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut comparisons = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8usize);
        // quantized coordinates force frequent distance ties
        let points = Array2::from_shape_fn((n, 3), |_| (rng.random_range(0..4) as f64) * 0.5);
        for start in 0..n {
            for k in 1..=n {
                let got = farthest_point_sampling(&points.view(), k, start).unwrap();
                let want = oracle(&points, k, start);
                assert_eq!(got, want, "n={n} k={k} start={start}");
                comparisons += 1;
            }
        }
    }
    pass(8, &format!("{comparisons} exhaustive FPS selections equal the greedy max-min oracle"));
}

// --- desk-scale experiment helpers -------------------------------------------

fn desk_cohort(subjects_per_phenotype: usize, seed: u64) -> SyntheticCohort {
    let cfg = GeneratorConfig {
        subjects_per_phenotype,
        resolution: 2,
        planted_groups: 8,
        seed,
        ..GeneratorConfig::default()
    };
    let programs = default_programs(cfg.planted_groups);
    generate_cohort(&cfg, &programs).unwrap()
}

fn desk_model_config(experts: usize, regions: usize) -> ModelConfig {
    ModelConfig {
        anchors: 96,
        channels: 32,
        latent_dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        experts,
        regions,
        mask_mode: MaskMode::Additive,
        ..ModelConfig::default()
    }
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 120,
        patience: 25,
        seed,
        ..TrainConfig::default()
    }
}

fn train_desk(
    cohort: &SyntheticCohort,
    partition: &RegionPartition,
    model_cfg: ModelConfig,
    seed: u64,
) -> FitResult {
    let model = RepcmModel::new(model_cfg, seed).unwrap();
    fit(model, &cohort.sequences, partition, &desk_train_config(seed)).unwrap()
}

fn test_subjects<'a>(cohort: &'a SyntheticCohort, result: &FitResult) -> Vec<&'a MeshSequence> {
    cohort
        .sequences
        .iter()
        .filter(|s| result.split.test.contains(&s.subject_id))
        .collect()
}

// --- criterion 9: Stage-I recovery -------------------------------------------

#[test]
fn criterion_09_stage_one_recovery() {
    let cohort = desk_cohort(40, 909);
    let field = extract_motion_descriptors(&cohort.sequences, DescriptorSource::Pca, 16).unwrap();
    let labels = cluster_regions(&field, 8, 0).unwrap();
    let ari = adjusted_rand_index(&labels, &cohort.planted.assignment);
    assert!(ari >= 0.9, "ARI {ari} below 0.9");
    pass(9, &format!("r = 8 clustering recovers the planted partition (ARI {ari:.3})"));
}

// --- criterion 10: overfit smoke test ----------------------------------------

#[test]
fn criterion_10_overfit_smoke() {
    let cohort = desk_cohort(1, 1010); // 4 subjects, one per phenotype
    let partition = {
        let field = extract_motion_descriptors(&cohort.sequences, DescriptorSource::Pca, 16).unwrap();
        partition_cohort(&field, &cohort.topology, 4, 0).unwrap()
    };
    let model_cfg = ModelConfig {
        anchors: 32,
        channels: 32,
        latent_dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        experts: 4,
        regions: 4,
        mask_mode: MaskMode::Additive,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 2000,
        patience: 2000,
        max_steps: Some(2000),
        seed: 10,
        ..TrainConfig::default()
    };
    let model = RepcmModel::new(model_cfg, 10).unwrap();
    let result = fit(model, &cohort.sequences, &partition, &train_cfg).unwrap();
    assert!(result.steps.len() <= 2000);

    let train: Vec<&MeshSequence> = cohort
        .sequences
        .iter()
        .filter(|s| result.split.train.contains(&s.subject_id))
        .collect();
    let rmse = completion_vtx_rmse(&result.model, &train, &partition).unwrap();
    let amplitude = train
        .iter()
        .map(|s| metrics::mean_motion_amplitude(&s.frames))
        .sum::<f64>()
        / train.len() as f64;
    let ratio = rmse / amplitude;
    assert!(
        ratio < 0.10,
        "train vtxRMSE {rmse:.4} mm is {:.1}% of mean motion amplitude {amplitude:.4} mm",
        ratio * 100.0
    );
    pass(
        10,
        &format!(
            "train vtxRMSE {rmse:.3} mm = {:.1}% of motion amplitude {amplitude:.3} mm after {} steps",
            ratio * 100.0,
            result.steps.len()
        ),
    );
}

// --- criterion 11: region-prior ablation --------------------------------------

#[test]
fn criterion_11_region_prior_ablation() {
    let cohort = desk_cohort(40, 1111);
    let field = extract_motion_descriptors(&cohort.sequences, DescriptorSource::Pca, 16).unwrap();
    let partition = partition_cohort(&field, &cohort.topology, 16, 0).unwrap();
    let global = partition.all_ones_variant();

    let mut wins = 0usize;
    let mut details = String::new();
    for seed in 0..5u64 {
        let masked_run = train_desk(&cohort, &partition, desk_model_config(4, 16), seed);
        let global_run = train_desk(&cohort, &global, desk_model_config(4, 16), seed);
        let masked_test = test_subjects(&cohort, &masked_run);
        let global_test = test_subjects(&cohort, &global_run);

        let per_region_mean = |model: &RepcmModel, subjects: &[&MeshSequence], part: &RegionPartition| -> f64 {
            let mut acc = 0.0;
            for seq in subjects {
                let completion = model.complete(&seq.ed_frame(), part, None).unwrap();
                let per_region = metrics::per_region_vtx_rmse(
                    &completion.frames,
                    &seq.frames,
                    &partition.assignment,
                    partition.region_count,
                )
                .unwrap();
                acc += per_region.iter().sum::<f64>() / per_region.len() as f64;
            }
            acc / subjects.len() as f64
        };
        let masked_rmse = per_region_mean(&masked_run.model, &masked_test, &partition);
        let global_rmse = per_region_mean(&global_run.model, &global_test, &global);
        if masked_rmse < global_rmse {
            wins += 1;
        }
        details.push_str(&format!(
            "seed {seed}: masked {masked_rmse:.4} vs global {global_rmse:.4} mm; "
        ));
    }
    println!("criterion 11 detail: {details}");
    assert!(wins >= 4, "masked adjacency won only {wins}/5 seeds: {details}");
    pass(
        11,
        &format!("adjacency-masked model beats all-ones adjacency on per-region vtxRMSE in {wins}/5 seeds"),
    );
}

// --- criterion 12: MoE routing specialization ----------------------------------

#[test]
fn criterion_12_moe_specialization() {
    let cohort = desk_cohort(40, 1212);
    let field = extract_motion_descriptors(&cohort.sequences, DescriptorSource::Pca, 16).unwrap();
    let partition = partition_cohort(&field, &cohort.topology, 16, 0).unwrap();

    let mut wins = 0usize;
    let mut usage_checked = false;
    let mut details = String::new();
    for seed in 0..5u64 {
        let moe_run = train_desk(&cohort, &partition, desk_model_config(4, 16), seed);
        let single_run = train_desk(&cohort, &partition, desk_model_config(1, 16), seed);
        let moe_test = test_subjects(&cohort, &moe_run);
        let single_test = test_subjects(&cohort, &single_run);
        let moe_rmse = completion_vtx_rmse(&moe_run.model, &moe_test, &partition).unwrap();
        let single_rmse = completion_vtx_rmse(&single_run.model, &single_test, &partition).unwrap();
        if moe_rmse <= single_rmse {
            wins += 1;
        }
        details.push_str(&format!("seed {seed}: E=4 {moe_rmse:.4} vs E=1 {single_rmse:.4} mm; "));

        if seed == 0 {
            // usage matrix over the whole test split of the E = 4 model
            let gates: Vec<(Phenotype, Vec<f64>)> = moe_test
                .iter()
                .map(|seq| {
                    let g = moe_run.model.shape_gates(&seq.ed_frame(), &partition).unwrap();
                    (seq.phenotype, g.to_vec())
                })
                .collect();
            let phenos = [Phenotype::Nor, Phenotype::Dcm, Phenotype::Hcm, Phenotype::Rv];
            let usage = metrics::expert_usage_matrix(&gates, &phenos, 4).unwrap();
            for (pi, ph) in phenos.iter().enumerate() {
                let row_max = (0..4).map(|e| usage[[pi, e]]).fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    row_max >= 0.5,
                    "{ph} usage row max {row_max:.3} below 0.5 (row {:?})",
                    (0..4).map(|e| usage[[pi, e]]).collect::<Vec<_>>()
                );
            }
            usage_checked = true;
        }
    }
    println!("criterion 12 detail: {details}");
    assert!(usage_checked);
    assert!(wins >= 4, "E=4 matched/beat E=1 in only {wins}/5 seeds: {details}");
    pass(
        12,
        &format!("usage rows concentrated (max >= 0.5) and E=4 held-out vtxRMSE <= E=1 in {wins}/5 seeds"),
    );
}

// --- criterion 13: volume-curve sanity ------------------------------------------

#[test]
fn criterion_13_volume_curve_sanity() {
    let cohort = desk_cohort(40, 1313);
    let field = extract_motion_descriptors(&cohort.sequences, DescriptorSource::Pca, 16).unwrap();
    let partition = partition_cohort(&field, &cohort.topology, 16, 0).unwrap();
    let result = train_desk(&cohort, &partition, desk_model_config(4, 16), 3);
    let es_frame = cohort.programs[0].es_frame; // NOR program
    let nor_test: Vec<&MeshSequence> = test_subjects(&cohort, &result)
        .into_iter()
        .filter(|s| s.phenotype == Phenotype::Nor)
        .collect();
    assert!(!nor_test.is_empty(), "test split must contain NOR subjects");

    let mut worst_shift = 0usize;
    let mut worst_err: f64 = 0.0;
    for seq in &nor_test {
        let completion = result.model.complete(&seq.ed_frame(), &partition, None).unwrap();
        let pred_curve =
            metrics::volume_curve_frames(&completion.frames, &seq.topology, Chamber::Lv).unwrap();
        let truth_curve = metrics::volume_curve(seq, Chamber::Lv).unwrap();
        let pred_norm = metrics::normalized_volume_curve(&pred_curve).unwrap();
        let truth_norm = metrics::normalized_volume_curve(&truth_curve).unwrap();
        assert_eq!(pred_norm[0], 1.0, "normalized predicted curve must start at exactly 1");

        let argmin = pred_norm
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let shift = argmin.abs_diff(es_frame);
        worst_shift = worst_shift.max(shift);
        assert!(
            shift <= 3,
            "{}: predicted ES at frame {argmin}, programmed {es_frame}",
            seq.subject_id
        );

        let mae = pred_norm
            .iter()
            .zip(&truth_norm)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pred_norm.len() as f64;
        worst_err = worst_err.max(mae);
        assert!(mae < 0.1, "{}: normalized-volume MAE {mae:.4}", seq.subject_id);
    }
    pass(
        13,
        &format!(
            "{} NOR subjects: ES within ±{worst_shift} frames, worst normalized-volume MAE {worst_err:.4}",
            nor_test.len()
        ),
    );
}

// --- criterion 14: end-to-end CLI reproducibility --------------------------------

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_repcm"))
        .args(args)
        .status()
        .expect("spawn repcm");
    assert!(status.success(), "repcm {args:?} failed");
}

fn pipeline(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = root.join("data");
    let part = root.join("part");
    let ckpt = root.join("ckpt");
    let pred = root.join("pred");
    run_cli(&[
        "generate-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "21",
        "--subjects",
        "3",
        "--resolution",
        "1",
        "--planted-groups",
        "8",
    ]);
    run_cli(&[
        "partition",
        "--data",
        data.to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
        "--seed",
        "21",
        "--regions",
        "4",
    ]);
    run_cli(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--partition",
        part.join("partition.json").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "21",
        "--epochs",
        "4",
        "--batch-size",
        "4",
        "--anchors",
        "32",
        "--channels",
        "16",
        "--layers",
        "1",
    ]);
    run_cli(&[
        "complete",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--partition",
        part.join("partition.json").to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--noise",
        "zero",
        "--split",
        "test",
    ]);
    (part.join("partition.json"), ckpt.join("steps.log.jsonl"), pred)
}

#[test]
fn criterion_14_end_to_end_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (part_a, steps_a, pred_a) = pipeline(&dir.path().join("run_a"));
    let (part_b, steps_b, pred_b) = pipeline(&dir.path().join("run_b"));

    let partition_a = std::fs::read(&part_a).unwrap();
    let partition_b = std::fs::read(&part_b).unwrap();
    assert_eq!(partition_a, partition_b, "partition.json must be bit-identical");

    let first_steps = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .take(10)
            .map(|s| s.to_string())
            .collect()
    };
    let sa = first_steps(&steps_a);
    let sb = first_steps(&steps_b);
    assert!(!sa.is_empty());
    assert_eq!(sa, sb, "first training steps must be bit-identical");

    let mut compared = 0usize;
    for entry in std::fs::read_dir(&pred_a).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e == "bin").unwrap_or(false) {
            let other = pred_b.join(path.file_name().unwrap());
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&other).unwrap(),
                "{} must be bit-identical",
                path.display()
            );
            compared += 1;
        }
    }
    assert!(compared > 0, "no completions compared");
    pass(
        14,
        &format!("two pipeline runs agree bit-for-bit (partition, 10 steps, {compared} completion files)"),
    );
}
