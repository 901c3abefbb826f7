//! Rough wall-clock profile of the hot paths; run with
//! `cargo run --release -p seqaug-core --example profile`.

use seqaug_core::autodiff::Var;
use seqaug_core::conditioning::ConditionsBank;
use seqaug_core::diffusion::{DenoiserModel, NoiseSchedule, ScheduleConfig};
use seqaug_core::ops;
use seqaug_core::pipeline::Config;
use seqaug_core::rng::RngState;
use seqaug_core::tensor::Tensor;
use std::time::Instant;

fn time<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    let total = start.elapsed().as_secs_f64();
    println!("{label:<40} {:>6} iters  {:>9.3} ms/iter", iters, 1000.0 * total / iters as f64);
}

fn main() {
    let mut rng = RngState::new(1, 1).rng();

    let a = Tensor::<f32>::randn(&[1024, 576], &mut rng);
    let b = Tensor::<f32>::randn(&[576, 64], &mut rng);
    let flops = 2.0 * 1024.0 * 576.0 * 64.0;
    let start = Instant::now();
    for _ in 0..50 {
        std::hint::black_box(ops::matmul(&a, &b).unwrap());
    }
    let per = start.elapsed().as_secs_f64() / 50.0;
    println!("matmul 1024x576x64: {:.3} ms -> {:.2} GFLOPS", per * 1000.0, flops / per / 1e9);

    let x = Tensor::<f32>::randn(&[16, 64, 8, 8], &mut rng);
    let w = Tensor::<f32>::randn(&[64, 64, 3, 3], &mut rng);
    let bias = Tensor::<f32>::randn(&[64], &mut rng);
    time("conv2d fwd 16x64x8x8 k3", 50, || {
        std::hint::black_box(ops::conv2d(&x, &w, Some(&bias), (1, 1), (1, 1)).unwrap());
    });
    time("conv2d fwd+bwd traced", 20, || {
        let xv = Var::param(x.clone());
        let wv = Var::param(w.clone());
        let bv = Var::param(bias.clone());
        let out = xv.conv2d(&wv, &bv, (1, 1), (1, 1));
        out.sum_all().backward();
    });

    // Toy-scale UNet forward/backward.
    let config = Config::toy();
    let image = DenoiserModel::new_image(config.unet.clone(), RngState::new(2, 10)).unwrap();
    let bank = ConditionsBank {
        class_label: Some(0),
        text: Some(vec![0, 2, 4]),
        image_prior: Some(Tensor::rand_uniform(&[1, 32, 32], 0.0, 1.0, &mut rng)),
        motion_fields: None,
    };
    let z16 = Tensor::<f32>::randn(&[16, 4, 8, 8], &mut rng);
    let banks: Vec<&ConditionsBank> = vec![&bank; 16];
    let ts: Vec<usize> = (0..16).map(|i| 1 + i * 60).collect();
    time("unet image fwd (batch 16, no grad)", 5, || {
        std::hint::black_box(image.predict(&z16, 500, &bank, RngState::new(0, 0)).unwrap());
    });
    time("unet image fwd+bwd (batch 16)", 5, || {
        let out = image.forward_image(&Var::constant(z16.clone()), &ts, &banks).unwrap();
        out.sum_all().backward();
        for (_, v) in image.named_params().entries {
            v.zero_grad();
        }
    });

    let seq = image.inflate(RngState::new(3, 10)).unwrap();
    let z8 = Tensor::<f32>::randn(&[8, 4, 8, 8], &mut rng);
    time("unet seq fwd 8 frames (no grad)", 5, || {
        std::hint::black_box(seq.predict(&z8, 500, &bank, RngState::new(0, 6)).unwrap());
    });

    // One full DDIM clip at toy settings.
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut vae =
        seqaug_core::diffusion::Autoencoder::new(config.vae.clone(), RngState::new(4, 10)).unwrap();
    vae.mark_fitted(1.0);
    let sampler = seqaug_core::diffusion::Sampler { model: &seq, vae: &vae, schedule: &schedule, frames: 8 };
    let mut cfg = config.sampler;
    cfg.seed = 1;
    let start = Instant::now();
    std::hint::black_box(sampler.sample_clip(&bank, &cfg).unwrap());
    println!(
        "ddim clip ({} steps, cfg, 8 frames):      {:>9.3} s",
        cfg.steps,
        start.elapsed().as_secs_f64()
    );
}
