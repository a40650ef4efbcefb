//! A LoRA adapter on a frozen projection: identical to the base layer at
//! construction and equal to its merged dense weight after an update.

use rgbtseg::lora::{LoraConfig, LoraLinear};
use rgbtseg::nn::{Graph, Init, Linear, ParamBuilder, ParamRegistry};
use rgbtseg::tensor::Tensor;
use rand::SeedableRng;

fn main() -> rgbtseg::Result<()> {
    let mut reg = ParamRegistry::new();
    let mut pb = ParamBuilder::new(&mut reg, 0);
    let base = Linear::new(&mut pb, "proj", 16, 16, Init::Fan, Some(Init::Zeros), true)?;
    let layer = LoraLinear::new(&mut pb, "proj", base.clone(), LoraConfig::new(4, 8.0))?;
    println!("{} tensors, {} trainable scalars (the adapter factors)", reg.len(), reg.trainable_count());

    let x = Tensor::randn(&[3, 16], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let run = |reg: &ParamRegistry| -> rgbtseg::Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new(reg);
        let xv = g.constant(x.clone());
        let adapted = layer.forward(&mut g, xv)?;
        let frozen = base.forward(&mut g, xv)?;
        let merged = layer.merged_weight(&g)?.clone();
        Ok((g.value(adapted).clone(), g.value(frozen).clone(), merged))
    };
    let (y, y0, _) = run(&reg)?;
    println!("at init, adapted == frozen bitwise: {}", y.bit_eq(&y0));

    // Pretend training moved B.
    reg.get_mut(layer.b).value = Tensor::full(&[16, 4], 0.05);
    let (y, y0, merged) = run(&reg)?;
    let dense = x.matmul(&merged)?;
    println!("after update, max |adapted - frozen| = {:.4}", y.max_abs_diff(&y0));
    println!("max |adapted - x·merged| = {:.2e}", y.max_abs_diff(&dense));
    Ok(())
}
