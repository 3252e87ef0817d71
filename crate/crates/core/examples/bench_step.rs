use lrcs_core::model::{init_params, ModelConfig};
use lrcs_core::sensing;
use lrcs_core::tensor::{Graph, TensorData};
use lrcs_core::train::{collect_gradients, total_loss, Adam};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { stages: 3, rank: 4, channels: 16, ratio: 0.25 };
    let mut params = init_params::<f32>(&cfg, 1).unwrap();
    let mut adam = Adam::new(1e-4);
    let batch: Vec<TensorData<f32>> = (0..32)
        .map(|i| {
            let data = (0..1089).map(|j| ((i * 1089 + j) % 97) as f32 / 97.0).collect();
            TensorData::new(vec![1, 33, 33], data).unwrap()
        })
        .collect();

    // warmup + timed steps
    for round in 0..4 {
        let t0 = Instant::now();
        let graph = Graph::new();
        let bound = params.bind(&graph, true);
        let mut xs = Vec::new();
        let mut gts = Vec::new();
        for img_data in &batch {
            let img = graph.constant(img_data.clone());
            let meas = sensing::sample(&bound.phi, &img).unwrap();
            let trace = bound.forward(&meas).unwrap();
            xs.push(trace.final_x().clone());
            gts.push(img);
        }
        let loss = total_loss(&xs, &gts, &bound.phi, 0.01).unwrap();
        let fwd = t0.elapsed();
        loss.backward().unwrap();
        let bwd = t0.elapsed() - fwd;
        let grads = collect_gradients(bound.named_leaves());
        adam.step_params(&mut params, &grads).unwrap();
        println!(
            "round {round}: loss {:.6}  forward {:?}  backward {:?}  total {:?}",
            loss.item(), fwd, bwd, t0.elapsed()
        );
    }

    // batch of 8 at 99x99 (fine-tune shape)
    let big: Vec<TensorData<f32>> = (0..8)
        .map(|i| {
            let data = (0..9801).map(|j| ((i * 9801 + j) % 89) as f32 / 89.0).collect();
            TensorData::new(vec![1, 99, 99], data).unwrap()
        })
        .collect();
    let t0 = Instant::now();
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let mut xs = Vec::new();
    let mut gts = Vec::new();
    for img_data in &big {
        let img = graph.constant(img_data.clone());
        let meas = sensing::sample(&bound.phi, &img).unwrap();
        let trace = bound.forward(&meas).unwrap();
        xs.push(trace.final_x().clone());
        gts.push(img);
    }
    let loss = total_loss(&xs, &gts, &bound.phi, 0.01).unwrap();
    loss.backward().unwrap();
    let grads = collect_gradients(bound.named_leaves());
    adam.step_params(&mut params, &grads).unwrap();
    println!("99x99 batch-8 step: {:?}", t0.elapsed());
}
