//! Desk-scale comparison of the three variants against FBP.
//!
//! `cargo run --release -p rsbp --example desk_compare -- [steps] [test_count] [eval_every] [variants]`

use std::time::Instant;

use rsbp::eval::{evaluate_method, render_table, EvalSetup, IterativeOptions, Method};
use rsbp::geometry::ViewGeometry;
use rsbp::nn::{Model, ModelConfig, ModelVariant};
use rsbp::phantom::{generate_dataset, PhantomSpec};
use rsbp::physics::PhysicsConstants;
use rsbp::sbp::SbpOptions;
use rsbp::train::{prepare_pairs, train_loop, TrainConfig};

fn main() -> rsbp::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: usize| args.get(i).map_or(d, |a| a.parse().expect("number"));
    let steps = num(0, 500);
    let n_test = num(1, 100);
    let eval_every = num(2, 0);
    let variants: Vec<ModelVariant> = match args.get(3) {
        Some(list) => list.split(',').map(|v| ModelVariant::parse(v)).collect::<rsbp::Result<_>>()?,
        None => ModelVariant::ALL.to_vec(),
    };
    let n = 64;
    let m = 16;
    let spec = PhantomSpec::default();
    let data = generate_dataset(&spec, 200 + n_test, 200.0 / (200 + n_test) as f64)?;
    let geom = ViewGeometry::new(n, m)?;
    let phys = PhysicsConstants::default();
    let cfg = TrainConfig {
        max_steps: Some(steps),
        checkpoint_interval: eval_every,
        ..TrainConfig::default()
    };
    let setup = EvalSetup {
        geom: &geom,
        phys: &phys,
        noisy: true,
        margin: ModelConfig::new(ModelVariant::RsbpCnn, m).margin(),
        sbp: SbpOptions::default(),
        iterative: IterativeOptions::default(),
    };
    let mut results = vec![evaluate_method::<f32>(Method::Fbp, &data.test, &setup, None)?];
    for variant in variants {
        let t = Instant::now();
        let model_cfg = ModelConfig::new(variant, m);
        let pairs = prepare_pairs(&data.train, variant, &geom, &phys, true, SbpOptions::default())?;
        let model = Model::<f32>::init(model_cfg, cfg.seed)?;
        let out = train_loop(model, &pairs, &cfg, |step, params| {
            let probe = Model::from_params(model_cfg, params.clone())?;
            let r = evaluate_method(Method::Neural(variant), &data.test, &setup, Some(&probe))?;
            eprintln!("{variant} step {step}: NRMSE {:.4} / {:.4}", r.mean, r.std);
            Ok(())
        })?;
        let h = &out.history;
        let k = 50.min(h.len());
        let lead: f64 = h[..k].iter().map(|r| r.loss).sum::<f64>() / k as f64;
        let trail: f64 = h[h.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64;
        eprintln!("{variant}: trained in {:.1?}, loss {lead:.5} -> {trail:.5}", t.elapsed());
        let t = Instant::now();
        results.push(evaluate_method(Method::Neural(variant), &data.test, &setup, Some(&out.model))?);
        eprintln!("{variant}: evaluated in {:.1?}", t.elapsed());
    }
    print!("{}", render_table(&results).text);
    Ok(())
}
