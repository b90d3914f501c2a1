use std::path::Path;

use pallor_core::error::PallorError;
use pallor_core::manifest::Manifest;
use pallor_core::neuralnet::{
    content_id, gradcheck_suite, save_weights, NetworkSpec, TrainingConfig, GRADCHECK_TOLERANCE,
};
use pallor_core::pipeline::{analyze, PipelineConfig, PredictMeta};
use pallor_core::screening::{evaluate_cutoffs, render_report, train_regressor, validate_cutoffs, Report};
use pallor_core::segmentation::{cnn_segment, iou, to_mask, train_segmenter, SegNet};
use pallor_core::synthdata::{generate_dataset, SynthConfig, CARD_WHITE};
use pallor_server::ServerConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::dataset::{exec, load_models, load_row_image, load_training_pair, report_skips, row_features};
use crate::{CliError, EvaluateArgs, GradcheckArgs, PredictArgs, ServeArgs, SynthArgs, TrainRegArgs, TrainSegArgs};

type CmdResult = Result<(), CliError>;

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn file_id(path: &Path) -> Result<String, PallorError> {
    Ok(content_id(&std::fs::read(path).map_err(|e| PallorError::Weights(format!("{}: {e}", path.display())))?))
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let config = SynthConfig {
        n_samples: a.n,
        hb_range: [a.hb_min, a.hb_max],
        noise_sigma: a.noise,
        gain_range: [a.gain_min, a.gain_max],
        image_size: [a.size, a.size],
        seed: a.seed,
    };
    if a.gain_max * CARD_WHITE[0] > 255.0 {
        eprintln!(
            "warning: gains above {:.3} saturate the card white square in 8-bit files",
            255.0 / CARD_WHITE[0]
        );
    }
    let manifest = generate_dataset(&config, &a.out, exec(a.exec.sequential))?;
    eprintln!("wrote {} samples to {}", manifest.rows.len(), a.out.display());
    print_json(&json!({ "out": a.out, "n_samples": manifest.rows.len(), "config": config }));
    Ok(())
}

/// Seeded split of `0..n` into (train, held-out) index lists.
fn split_indices(n: usize, holdout: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = order.split_off(n - holdout);
    (order, held)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn train_seg(a: TrainSegArgs) -> CmdResult {
    let exec = exec(a.exec.sequential);
    let manifest = Manifest::load(&a.data)?;
    let n = manifest.rows.len();
    if n <= a.holdout {
        return Err(CliError::Domain(PallorError::Dataset(format!(
            "{n} samples cannot leave {} held out",
            a.holdout
        ))));
    }
    let pairs = exec
        .map(&manifest.rows, |row| load_training_pair(&manifest, row))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (train_idx, held_idx) = split_indices(n, a.holdout, a.seed);
    let train: Vec<_> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let held: Vec<_> = held_idx.iter().map(|&i| &pairs[i]).collect();

    let heldout_iou = |seg: &SegNet| -> Result<f64, PallorError> {
        let ious = exec
            .map(&held, |(img, mask)| iou(&to_mask(&cnn_segment(img, seg)?).0, mask))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(median(ious))
    };

    let spec = NetworkSpec::segmenter(a.resolution, &a.widths, a.seed);
    let config = TrainingConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        momentum: a.momentum,
        seed: a.seed,
        ..Default::default()
    };
    eprintln!("training segmenter on {} samples, {} held out", train.len(), held.len());
    let mut history = Vec::new();
    let mut epoch_err = None;
    let (seg, curve) = train_segmenter(&train, spec, &config, exec, |epoch, loss, net| {
        let score = SegNet::new(net.clone()).and_then(|s| heldout_iou(&s));
        match score {
            Ok(m) => {
                eprintln!("epoch {}/{} loss {loss:.6} held-out median IoU {m:.4}", epoch + 1, a.epochs);
                history.push(m);
            }
            Err(e) => epoch_err = Some(e),
        }
    })?;
    if let Some(e) = epoch_err {
        return Err(e.into());
    }
    save_weights(seg.network(), &a.out)?;
    print_json(&json!({
        "weights": a.out,
        "model_id": file_id(&a.out)?,
        "loss_curve": curve,
        "heldout_median_iou": history,
        "final_heldout_median_iou": history.last(),
        "n_train": train.len(),
        "n_heldout": held.len(),
    }));
    Ok(())
}

pub fn train_reg(a: TrainRegArgs) -> CmdResult {
    let exec = exec(a.exec.sequential);
    let manifest = Manifest::load(&a.data)?;
    let kind = a.segmenter.kind();
    let models = load_models(None, a.segmenter.seg_weights.as_deref())?;
    let features = row_features(&manifest, kind, &models, exec);
    let skipped = report_skips(&manifest, &features)?;
    let dataset: Vec<_> = manifest
        .rows
        .iter()
        .zip(features)
        .filter_map(|(row, f)| f.ok().map(|f| (f, row.gold_hb)))
        .collect();
    let config = TrainingConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        momentum: a.momentum,
        seed: a.seed,
        ..Default::default()
    };
    eprintln!("training regressor on {} samples ({skipped} skipped)", dataset.len());
    let out = train_regressor(&dataset, NetworkSpec::regressor(a.seed), &config, exec)?;
    eprintln!("validation MAE {:.4} g/dL", out.validation_mae);
    save_weights(out.regressor.network(), &a.out)?;
    print_json(&json!({
        "weights": a.out,
        "model_id": file_id(&a.out)?,
        "validation_mae": out.validation_mae,
        "n_train": out.train_indices.len(),
        "n_validation": out.validation_indices.len(),
        "skipped": skipped,
        "final_loss": out.loss_curve.last(),
        "loss_curve": out.best_loss_curve,
    }));
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let models = load_models(Some(&a.weights), a.segmenter.seg_weights.as_deref())?;
    let image = pallor_core::imaging::load_image(&a.image)?;
    let meta = PredictMeta { card_roi: a.card, conjunctiva_roi: a.conj, segmenter: Some(a.segmenter.kind()), cutoffs: a.cutoffs };
    let response = analyze(&image, &meta, &models, &PipelineConfig::default())?;
    print_json(&response);
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    validate_cutoffs(&a.cutoffs)?;
    let exec = exec(a.exec.sequential);
    let manifest = Manifest::load(&a.data)?;
    let models = load_models(Some(&a.weights), a.segmenter.seg_weights.as_deref())?;
    let config = PipelineConfig::default();
    let kind = a.segmenter.kind();
    let mut results = exec.map(&manifest.rows, |row| {
        let meta = PredictMeta { segmenter: Some(kind), cutoffs: Some(a.cutoffs.clone()), ..PredictMeta::new(row.card_roi()) };
        analyze(&load_row_image(&manifest, row)?, &meta, &models, &config).map(|r| r.hb)
    });
    // Domain errors that concern the model rather than the sample abort.
    if let Some(pos) = results.iter().position(|r| matches!(r, Err(PallorError::ModelNotLoaded(_)))) {
        return Err(results.swap_remove(pos).unwrap_err().into());
    }
    let skipped = report_skips(&manifest, &results)?;
    let pairs: Vec<(f64, f64)> = manifest
        .rows
        .iter()
        .zip(&results)
        .filter_map(|(row, r)| r.as_ref().ok().map(|&hb| (hb, row.gold_hb)))
        .collect();
    let metrics = evaluate_cutoffs(&pairs, &a.cutoffs)?;
    eprintln!("evaluated {} samples ({skipped} skipped)", pairs.len());
    if a.json {
        print_json(&Report { n: pairs.len(), metrics });
    } else {
        print!("{}", render_report(&metrics.iter().map(|m| m.column()).collect::<Vec<_>>()));
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let results = gradcheck_suite(a.seed, a.step)?;
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    for r in &results {
        eprintln!("{:<28} {:.3e}", r.case, r.max_relative_error);
    }
    print_json(&json!({ "seed": a.seed, "step": a.step, "max_relative_error": worst, "cases": results }));
    if worst >= GRADCHECK_TOLERANCE {
        return Err(CliError::Check(format!("max relative error {worst:e} ≥ {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<ServerConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => ServerConfig::default(),
    };
    if let Some(v) = a.listen {
        config.listen = v;
    }
    if let Some(v) = a.regressor_weights {
        config.regressor_weights = Some(v);
    }
    if let Some(v) = a.segmenter_weights {
        config.segmenter_weights = Some(v);
    }
    if let Some(v) = a.max_body_bytes {
        config.max_body_bytes = v;
    }
    if let Some(v) = a.cutoffs {
        config.default_cutoffs = v;
    }
    config.cors |= a.cors;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Check(e.to_string()))?;
    runtime.block_on(pallor_server::serve(config)).map_err(|e| match e.downcast::<PallorError>() {
        Ok(e) => CliError::Domain(*e),
        Err(e) => CliError::Check(e.to_string()),
    })
}
