// scratch calibration harness (not shipped)
use cta_core::datagen::{generate_dataset, load_dataset, SceneSpec};
use cta_core::models::train::*;
use cta_core::models::*;
use cta_core::nn::{Adam, ParamModel};
use cta_core::tensor::{scalar_value, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand::seq::SliceRandom;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let n_train: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(256);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let dir = std::path::Path::new("/tmp/ctarun/dataset");
    if !dir.exists() {
        generate_dataset(&SceneSpec { rng_seed: 42, ..Default::default() }, n_train, 64, dir).unwrap();
    }
    let data = load_dataset(dir).unwrap();
    println!("train {} test {}", data.train.len(), data.test.len());

    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mut model = Classifier::new(&mut rng, 64, 4);
    let mut opt = Adam::for_model(lr, 0.9, 0.999, &model);
    let t0 = Instant::now();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut erng = ChaCha12Rng::seed_from_u64(1000 + epoch as u64);
        order.shuffle(&mut erng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(16) {
            use rayon::prelude::*;
            let results: Vec<(f64, Vec<cta_core::tensor::Arr>)> = batch.par_iter().map(|&idx| {
                let mut g = Graph::new();
                let x = g.constant(data.train[idx].image.clone().into_dyn());
                let fwd = model.forward(&mut g, x, true);
                let loss_id = g.softmax_cross_entropy(fwd.logits, data.train[idx].class_label);
                let loss = scalar_value(g.value(loss_id));
                let grads = g.backward(loss_id);
                let pg: Vec<_> = g.param_ids().iter().map(|&id| grads.get_or_zeros(&g, id)).collect();
                (loss, pg)
            }).collect();
            let n = results.len() as f64;
            loss_sum += results.iter().map(|(l, _)| l).sum::<f64>();
            let mut total = cta_core::nn::sum_grads(results.into_iter().map(|(_, g)| g).collect());
            for g in &mut total { g.mapv_inplace(|v| v / n); }
            opt.step(model.params_mut(), &total);
        }
        if epoch % 2 == 0 || epoch == epochs - 1 {
            let train_acc = eval_classifier(&model, &data.train[..64]).unwrap();
            let test_acc = eval_classifier(&model, &data.test).unwrap();
            println!("epoch {epoch}: loss {:.4} train64 {:.3} test {:.3}  [{:.1}s]",
                loss_sum / data.train.len() as f64, train_acc, test_acc, t0.elapsed().as_secs_f64());
        }
    }
}
