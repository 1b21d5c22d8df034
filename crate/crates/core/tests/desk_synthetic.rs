//! Short training runs on synthetic scenes, standing in for the desk-scale
//! dataset runs.

use imlut::engine::{self, Model, SrRequest};
use imlut::imgio::Image;
use imlut::kernels::Kernel;
use imlut::lut::{self, LutBundle};
use imlut::synth;
use imlut::train::{self, Dataset, TrainConfig};

fn eval_set() -> Vec<(String, Image)> {
    (0..4).map(|i| (format!("s{i}"), synth::scene(48, 48, 1000 + i))).collect()
}

fn mean(model: &Model, images: &[(String, Image)], r: f64) -> f64 {
    engine::evaluate(model, images, &SrRequest::isotropic(r).unwrap()).unwrap().mean
}

#[test]
fn short_training_beats_every_single_kernel_and_survives_transfer() {
    let ds = Dataset::from_images((0..8).map(|i| synth::scene(64, 64, i)));
    let cfg = TrainConfig {
        iterations: 300,
        batch: 4,
        patch: 12,
        scales: vec![2.0],
        seed: 3,
        ..TrainConfig::default()
    };
    let p = train::train(&cfg, &ds, None).unwrap();
    let images = eval_set();
    let best = [Kernel::Nearest, Kernel::Bilinear, Kernel::Bicubic]
        .map(|k| mean(&Model::Baseline(k), &images, 2.0))
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let net = mean(&Model::Net(p.clone()), &images, 2.0);
    assert!(net > best, "net {net:.3} dB vs best kernel {best:.3} dB");

    let bundle = LutBundle::transfer_default(&p).unwrap().quantized().unwrap();
    let tables = mean(&Model::Lut(bundle.clone()), &images, 2.0);
    assert!(net - tables < 0.5, "net {net:.3} dB vs tables {tables:.3} dB");

    let ft = TrainConfig { iterations: 30, batch: 4, patch: 12, scales: vec![2.0], seed: 4, ..lut::finetune_config() };
    let tuned = lut::finetune(&bundle, &ds, &ft).unwrap().quantized().unwrap();
    let after = mean(&Model::Lut(tuned), &images, 2.0);
    assert!(after.is_finite() && after > best - 0.5, "fine-tuned {after:.3} dB");
}
