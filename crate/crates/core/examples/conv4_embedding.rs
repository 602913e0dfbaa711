//! Shapes through the conv4 backbone and a train-mode forward pass.
use metaproto::autodiff::{Graph, Tensor};
use metaproto::embedding::{embed, init_params, BackboneConfig, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let full = BackboneConfig::default();
    println!("full scale: input {:?}, final map {:?}, projection input {}", full.input_shape, full.final_feature_map()?, full.projection_input()?);

    let cfg = BackboneConfig::conv4(32, 30, [16, 16, 16, 16], 32, 7);
    let params = init_params(&cfg)?;
    println!("desk scale: {} tensors, {} scalars", params.len(), params.scalar_count());

    let batch = Tensor::new(vec![4, 32, 30], (0..4 * 32 * 30).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect())?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(batch);
    let out = embed(&cfg, &params, &bound, &mut g, x, Mode::Train)?;
    println!("embedding shape {:?}, tape length {}", g.shape(out.output), g.len());
    Ok(())
}
