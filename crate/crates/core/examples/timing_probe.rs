// quick timing probe (not part of the repo)
use cross360::model::{Model, ModelConfig};
use cross360::nn::Tape;
use cross360::scene::room_scene;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let model = Model::new(ModelConfig::default()).unwrap();
    println!("plan build: {:?}", t0.elapsed());
    let params = model.init_params();
    println!("params: {} tensors, {} values", params.len(), params.total_values());
    let (image, _) = room_scene(64, 128);
    let t1 = Instant::now();
    let mut tape = Tape::new();
    let bound = model.bind_params(&mut tape, &params).unwrap();
    let out = model.forward(&mut tape, &bound, &image).unwrap();
    println!("forward: {:?}, tape nodes {}", t1.elapsed(), tape.len());
    println!("tokens: {:?}", out.token_counts);
    for (i, &d) in out.depths.iter().enumerate() {
        println!("depth scale {}: {:?}", i + 1, tape.shape(d));
    }
}
