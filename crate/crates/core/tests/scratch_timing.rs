use std::time::Instant;
use taskweave_core::bank::{ArchConfig, ModelParams, ParameterBank};
use taskweave_core::consensus::assemble_gamma;
use taskweave_core::math;
use taskweave_core::meta::{
    build_regression_input, meta_forward, meta_loss_and_full_grad, train_step, MetaOptStates,
    MetaParams, MetaSpec, StepMode, TrainConfig,
};
use taskweave_core::nn::{self, OptimHyper, OptimizerState};
use taskweave_core::rng::Stream;
use taskweave_core::world::WorldConfig;

#[test]
fn time_pieces() {
    let world = WorldConfig::default_world(1);
    let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
    let spec = MetaSpec::for_arch(arch.clone(), 6).unwrap();
    let mut rng = Stream::new(1);
    let banks: Vec<ParameterBank> = world
        .known_tasks()
        .iter()
        .map(|(_, task)| ParameterBank {
            task_id: task.task_id.clone(),
            arch_fingerprint: arch.fingerprint(),
            models: (0..2)
                .map(|i| ModelParams {
                    theta_e: nn::init(&arch.encoder, rng.next_u64()),
                    theta_d: nn::init(&arch.decoder, rng.next_u64()),
                    task_id: task.task_id.clone(),
                    train_seed: i,
                    final_loss: 0.0,
                })
                .collect(),
        })
        .collect();
    let gamma = assemble_gamma(world.true_gamma().flattened(), world.k()).unwrap();
    let params = MetaParams::init(&spec, 7);
    let input = build_regression_input(&banks, &gamma, &world, 0, 0).unwrap();
    let target = banks[0].models[0].clone();

    let t = Instant::now();
    for _ in 0..20 {
        let _ = meta_forward(&spec, &params, &input).unwrap();
    }
    println!("forward: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 20.0);

    let task = world.task("autoencode").unwrap();
    let batch = taskweave_core::world::make_dataset(&world, task, 16, 3).unwrap();
    let t = Instant::now();
    for _ in 0..20 {
        let _ = meta_loss_and_full_grad(&spec, &params, &input, &target, &batch, 0.1).unwrap();
    }
    println!(
        "loss+full grad: {:.1} ms",
        t.elapsed().as_secs_f64() * 1e3 / 20.0
    );

    // Adam on a trunk-sized vector
    let n = spec.common.param_count();
    let mut p = vec![0.1; n];
    let g = vec![0.01; n];
    let mut opt = OptimizerState::new(OptimHyper::adam(1e-4, 0.5), n);
    let t = Instant::now();
    for _ in 0..20 {
        opt.step_in_place(&mut p, &g).unwrap();
    }
    println!(
        "adam {}: {:.1} ms",
        n,
        t.elapsed().as_secs_f64() * 1e3 / 20.0
    );

    // raw dot throughput
    let a = vec![0.5; 1 << 20];
    let b = vec![0.25; 1 << 20];
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 {
        acc += math::dot(&a, &b);
    }
    let gflops = 2.0 * 100.0 * (1 << 20) as f64 / t.elapsed().as_secs_f64() / 1e9;
    println!("dot gflops: {gflops:.2} (acc {acc})");

    // full pair
    let config = TrainConfig::default();
    let mut mp = MetaParams::init(&spec, 7);
    let mut opt = MetaOptStates::new(&spec, &config);
    let t = Instant::now();
    for i in 0..10u64 {
        for mode in [StepMode::SelfMode, StepMode::Transfer] {
            train_step(
                &spec, &mut mp, &mut opt, mode, 0, &input, &target, &world, &config, i,
            )
            .unwrap();
        }
    }
    println!(
        "pair: {:.1} ms",
        t.elapsed().as_secs_f64() * 1e3 / 10.0
    );
}
