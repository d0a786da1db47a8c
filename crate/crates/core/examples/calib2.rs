// scratch calibration for segmenter/detector (not shipped)
use cta_core::datagen::{generate_dataset, load_dataset, SceneSpec};
use cta_core::models::train::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).cloned().unwrap_or_else(|| "seg".into());
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let n_train: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(768);
    let dir = std::path::Path::new("/tmp/ctarun/dataset");
    if !dir.exists() {
        generate_dataset(&SceneSpec { rng_seed: 42, ..Default::default() }, n_train, 96, dir).unwrap();
    }
    let data = load_dataset(dir).unwrap();
    println!("train {} test {}", data.train.len(), data.test.len());
    let settings = TrainSettings { epochs, batch_size: 16, lr, seed: 0 };
    let t0 = Instant::now();
    match which.as_str() {
        "seg" => {
            match train_segmenter(&data.train, &data.test, 64, 4, &settings) {
                Ok((m, metrics)) => {
                    println!("seg ok: {:?} [{:.1}s]", metrics, t0.elapsed().as_secs_f64());
                    let (gcr, miou) = eval_segmenter(&m, &data.test, 4).unwrap();
                    println!("gcr {gcr:.4} miou {miou:.4}");
                }
                Err(e) => println!("seg FAILED after {:.1}s: {e}", t0.elapsed().as_secs_f64()),
            }
        }
        "det" => {
            match train_detector(&data.train, &data.test, 64, 4, &settings) {
                Ok((m, metrics)) => {
                    println!("det ok: {:?} [{:.1}s]", metrics, t0.elapsed().as_secs_f64());
                    let (map, mar) = eval_detector(&m, &data.test).unwrap();
                    println!("map {map:.4} mar {mar:.4}");
                }
                Err(e) => println!("det FAILED after {:.1}s: {e}", t0.elapsed().as_secs_f64()),
            }
        }
        _ => panic!("seg|det"),
    }
}
