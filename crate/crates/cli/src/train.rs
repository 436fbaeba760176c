//! Maximum-likelihood training loop.
//!
//! Per iteration: draw a fresh batch, advance every spectral estimate by one
//! power iteration, record the batch NLL on a new tape, backpropagate, and
//! take one Adam step. Metrics go to an append-only CSV; checkpoints are
//! written periodically and at the end (after a 50-iteration spectral
//! refresh and a held-out evaluation).

use crate::checkpoint;
use crate::config::RunConfig;
use anyhow::{Context, Result};
use denseflow::flow::{build_model, Block, ConcatMode, FlowModel};
use denseflow::likelihood::nll_on_tape;
use denseflow::lipschitz::empirical_lipschitz;
use denseflow::optim::AdamState;
use denseflow::tape::Tape;
use denseflow::toydata::sample_toy;
use denseflow::ParamId;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Seed offsets carve independent deterministic streams out of one run seed.
const DATA_STREAM: u64 = 1;
const ESTIMATOR_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub iterations_run: u64,
    /// Held-out NLL in nats (None when training aborted on a non-finite loss).
    pub test_nll: Option<f64>,
    pub aborted_non_finite: bool,
    pub elapsed_seconds: f64,
}

fn append_line(file: &mut File, line: &str) -> Result<()> {
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Parameter ids of the concatenation weights, for the delayed-start gate.
fn eta_param_ids(model: &FlowModel) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for block in &model.blocks {
        if let Block::Dense(b) = block {
            for layer in &b.layers {
                if let ConcatMode::Learnable { raw_eta1, raw_eta2 } = &layer.concat {
                    ids.push(*raw_eta1);
                    ids.push(*raw_eta2);
                }
            }
        }
    }
    ids
}

/// Cheap per-block contraction check; returns (block, max_ratio) violations.
fn lipschitz_spot_check(model: &FlowModel, seed: u64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for idx in 0..model.blocks.len() {
        if let Ok((_, max)) =
            empirical_lipschitz(|x| model.g_batch(idx, x), model.d(), 200, 1.0, &mut rng)
        {
            if max >= 1.0 {
                out.push((idx, max));
            }
        }
    }
    out
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let out_dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    config.save(&out_dir.join("config.json"))?;

    let kind = config.dataset_kind()?;
    let estimator = config.estimator()?;
    let mut model = build_model(&config.model_config()?, config.seed)?;
    let mut adam = AdamState::new(&model.params, config.lr);
    let eta_ids = eta_param_ids(&model);

    let mut data_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(DATA_STREAM));
    let mut est_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(ESTIMATOR_STREAM));

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path)?;
    append_line(&mut metrics, "iteration,train_nll,eta1_mean,eta2_mean")?;
    let warnings_path = out_dir.join("warnings.csv");
    let mut warnings: Option<File> = None;
    let warn = |warnings: &mut Option<File>, line: String| -> Result<()> {
        if warnings.is_none() {
            let mut f = File::create(&warnings_path)?;
            append_line(&mut f, "iteration,message")?;
            *warnings = Some(f);
        }
        append_line(warnings.as_mut().unwrap(), &line)
    };

    let ckpt_path = |iter: u64| out_dir.join(format!("ckpt_{iter}.bin"));
    checkpoint::save(&ckpt_path(0), config, &model, &adam, 0)?;
    let mut last_good = ckpt_path(0);

    for iter in 1..=config.iterations {
        let batch = sample_toy(kind, config.batch, &mut data_rng);
        model.power_step_all()?;

        let mut tape = Tape::new();
        let xv = tape.leaf(batch);
        let loss = nll_on_tape(&model, &mut tape, xv, &estimator, &mut est_rng)?;
        let nll = tape.value(loss).scalar_value()?;
        if !nll.is_finite() {
            warn(
                &mut warnings,
                format!("{iter},non-finite loss {nll}; aborting with last good checkpoint"),
            )?;
            return Ok(TrainOutcome {
                final_checkpoint: last_good,
                metrics_path,
                iterations_run: iter - 1,
                test_nll: None,
                aborted_non_finite: true,
                elapsed_seconds: started.elapsed().as_secs_f64(),
            });
        }

        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        if iter <= config.lc_start_iter {
            // Concatenation weights stay at initialization until enabled.
            for &id in &eta_ids {
                let p = model.params.get_mut(id);
                p.grad = denseflow::Tensor::zeros(p.grad.shape());
            }
        }
        adam.step(&mut model.params)?;

        if iter % config.log_every == 0 || iter == config.iterations {
            let (e1, e2) = model.eta_means();
            append_line(
                &mut metrics,
                &format!("{iter},{nll:.6},{e1:.6},{e2:.6}"),
            )?;
        }
        if iter % config.checkpoint_every == 0 {
            let path = ckpt_path(iter);
            checkpoint::save(&path, config, &model, &adam, iter)?;
            last_good = path;
            for (block, ratio) in lipschitz_spot_check(&model, config.seed ^ iter) {
                warn(
                    &mut warnings,
                    format!("{iter},block {block} empirical Lipschitz ratio {ratio:.6} >= 1"),
                )?;
            }
        }
    }

    // Freeze spectral estimates before evaluation.
    model.refresh_spectral(50)?;
    let final_path = out_dir.join("final.bin");
    checkpoint::save(&final_path, config, &model, &adam, config.iterations)?;

    let mut eval_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(EVAL_STREAM));
    let test_set = sample_toy(kind, config.eval_samples, &mut eval_rng);
    let (test_nll, _) =
        denseflow::likelihood::nll_nats(&model, &test_set, &estimator, &mut eval_rng)?;
    let mut summary = File::create(out_dir.join("summary.csv"))?;
    append_line(&mut summary, "iterations,test_nll,elapsed_seconds")?;
    append_line(
        &mut summary,
        &format!(
            "{},{test_nll:.6},{:.1}",
            config.iterations,
            started.elapsed().as_secs_f64()
        ),
    )?;

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        iterations_run: config.iterations,
        test_nll: Some(test_nll),
        aborted_non_finite: false,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Load a checkpoint and re-run the 50-iteration spectral refresh, the
/// standard preparation for any evaluation-time command.
pub fn load_for_eval(path: &Path) -> Result<checkpoint::Checkpoint> {
    let mut ckpt = checkpoint::load(path)?;
    ckpt.model.refresh_spectral(50)?;
    Ok(ckpt)
}
