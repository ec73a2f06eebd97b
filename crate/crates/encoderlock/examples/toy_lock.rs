//! Desk-scale walkthrough: pre-train the toy encoder, lock it against the
//! toy prohibited style, then probe both encoders and print the metric
//! summary. Mirrors what `encoderlock run` does for the bundled config.

use encoderlock::data::{DatasetHandle, ToyStyle};
use encoderlock::locktrain::{
    lock_supervised, LockConfig, SupervisedLockInputs,
};
use encoderlock::nn::{fit_classifier, EncoderArch, HeadSpec, HeadTrainConfig, train_from_scratch};
use encoderlock::probebench::{probe, relative_drop, security_verdict, HeadConfig};
use encoderlock::weightspace::EncoderState;
use std::time::Instant;

fn main() -> encoderlock::Result<()> {
    let t0 = Instant::now();
    let lock_seed: u64 = std::env::var("TOY_LOCK_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    println!("lock seed {lock_seed}");
    let arch = EncoderArch {
        in_shape: (3, 16, 16),
        conv_channels: vec![32, 64, 120],
        embed_dim: 16,
    };
    println!("eligible params: {}", arch.total_params());

    let source = DatasetHandle::toy("toy-source", ToyStyle::source(), 4000, 1000, 101).load::<f32>()?;
    let target = DatasetHandle::toy("toy-target", ToyStyle::target(), 800, 1000, 202).load::<f32>()?;
    println!("data generated at {:?}", t0.elapsed());

    let (enc, head, report) = fit_classifier(
        &arch,
        HeadSpec::linear(),
        &source.train.images,
        source.train.labels()?,
        &source.test.images,
        source.test.labels()?,
        10,
        &HeadTrainConfig {
            max_epochs: 40,
            ..Default::default()
        },
        42,
    )?;
    println!(
        "pretrain: source acc {:.4} in {} epochs, t={:?}",
        report.best_eval_accuracy, report.epochs_trained, t0.elapsed()
    );

    let mut state = EncoderState::new(enc);

    // pre-lock probing baselines
    let head_cfg = HeadConfig::linear(0.1);
    let probe_src_before = probe(&state, &source.train, &source.test, &head_cfg, 7)?;
    let probe_tgt_before = probe(&state, &target.train, &target.test, &head_cfg, 7)?;
    println!(
        "pre-lock probe: source {:.4}, target {:.4}, t={:?}",
        probe_src_before.accuracy, probe_tgt_before.accuracy, t0.elapsed()
    );

    // train-from-scratch threshold on the attacker's fraction
    let scratch_data = target.train.sample_fraction(0.1, 99)?;
    let scratch = train_from_scratch(
        &arch,
        HeadSpec::mlp(2, 256),
        &scratch_data.images,
        scratch_data.labels()?,
        &target.test.images,
        target.test.labels()?,
        10,
        &HeadTrainConfig {
            learning_rate: 1e-3,
            max_epochs: 80,
            ..Default::default()
        },
        1234,
    )?;
    println!(
        "train-from-scratch on 10% target: acc {:.4} ({} epochs), t={:?}",
        scratch.best_eval_accuracy, scratch.epochs_trained, t0.elapsed()
    );

    // supervised lock
    let (tgt_train, tgt_valid) = target.train.split(0.8, 5)?;
    let cfg = LockConfig {
        n_per_round: 50,
        rounds_max: 20,
        alpha: 1000.0,
        inner_epochs: 5,
        lock_subset_size: 1000,
        acc_goal: 0.15,
        learning_rate: 0.01,
        batch_size: 32,
        seed: lock_seed,
        ..Default::default()
    };
    let t_lock = Instant::now();
    let trace = lock_supervised(
        &mut state,
        &head,
        SupervisedLockInputs {
            source_train: &source.train,
            source_eval: &source.test,
            target_train: &tgt_train,
            target_valid: &tgt_valid,
        },
        &cfg,
    )?;
    println!(
        "lock: {} rounds, stop {:?}, lock time {:?}, total {:?}",
        trace.rounds.len(),
        trace.stop_reason,
        t_lock.elapsed(),
        t0.elapsed()
    );
    for r in &trace.rounds {
        println!(
            "  round {:2}: challenger {:.4} | L_S {:.4} L_T {:.4} L_el {:.4} | post-ch L_el {:.4} | dW {} | src acc {:.4}",
            r.round,
            r.challenger.as_ref().map(|c| c.valid_accuracy).unwrap_or(0.0),
            r.loss.l_source,
            r.loss.l_target,
            r.loss.l_el,
            r.loss_post_challenge.as_ref().map(|b| b.l_el).unwrap_or(0.0),
            r.delta_w_count,
            r.source_eval_accuracy
        );
    }

    // post-lock probing
    let probe_src_after = probe(&state, &source.train, &source.test, &head_cfg, 7)?;
    let probe_tgt_after = probe(&state, &target.train, &target.test, &head_cfg, 7)?;
    let drop_s = relative_drop(probe_src_before.accuracy, probe_src_after.accuracy)?;
    let drop_t = relative_drop(probe_tgt_before.accuracy, probe_tgt_after.accuracy)?;
    let dw = state.delta_w(0.0);
    println!(
        "post-lock probe: source {:.4} (drop {:.2}%), target {:.4} (drop {:.2}%), dW count {} ({:.3} per-mille)",
        probe_src_after.accuracy,
        drop_s * 100.0,
        probe_tgt_after.accuracy,
        drop_t * 100.0,
        dw.changed,
        dw.per_mille()
    );
    let verdict = security_verdict(
        probe_tgt_after.accuracy,
        scratch.best_eval_accuracy,
        drop_s,
        0.02,
    );
    println!("verdict: {:?} {:?}", verdict.verdict, verdict.violated);

    // head grid (criterion 7 shape)
    let mut grid_accs = Vec::new();
    for (d, h) in [(1usize, None), (2, Some(64)), (2, Some(256)), (3, Some(64)), (3, Some(256))] {
        let hc = match h {
            None => HeadConfig::linear(0.1),
            Some(hd) => HeadConfig::mlp(d, hd, 0.1),
        };
        let p = probe(&state, &target.train, &target.test, &hc, 11)?;
        println!("  grid {}: {:.4}", hc.label(), p.accuracy);
        grid_accs.push(p.accuracy);
    }
    let gmax = grid_accs.iter().cloned().fold(f64::MIN, f64::max);
    let gmin = grid_accs.iter().cloned().fold(f64::MAX, f64::min);
    println!("grid: max {:.4} min {:.4} spread {:.4}", gmax, gmin, gmax - gmin);

    // data-fraction sweep (criterion 9 shape)
    for f in [0.1, 0.25, 0.5, 1.0] {
        let p = probe(&state, &target.train, &target.test, &HeadConfig::linear(f), 13)?;
        println!("  fraction {:.2}: {:.4}", f, p.accuracy);
    }
    println!("total time {:?}", t0.elapsed());
    Ok(())
}
