//! Prototype segmentation by hand: pool background and foreground
//! prototypes from a support feature map, label the query by scaled cosine
//! similarity and cut strict and dilated masks.
//!
//! cargo run --example prototype_segmentation

use catnet::prototype::{
    binary_class_masks, double_threshold, foreground_channel, masked_average_pooling, prototype_segment, ProtoConfig,
};
use catnet::tensor::{Tape, Tensor};

fn main() -> catnet::Result<()> {
    let (d, h, w) = (3, 6, 11);
    // Foreground pixels point along channel 0, background along channel 1,
    // with a soft ramp across the query so some pixels land in between.
    let support_mask = Tensor::from_fn(&[h, w], |i| f32::from((1..5).contains(&(i / w)) && (2..9).contains(&(i % w))))?;
    let support = Tensor::from_fn(&[1, d, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let fg = support_mask.data()[p] == 1.0;
        match (c, fg) {
            (0, true) | (1, false) => 1.0,
            (2, _) => 0.1,
            _ => 0.0,
        }
    })?;
    let query = Tensor::from_fn(&[d, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let t = (p % w) as f32 / (w - 1) as f32;
        match c {
            0 => 0.45 + 0.1 * t,
            1 => 0.55 - 0.1 * t,
            _ => 0.1,
        }
    })?;

    let cfg = ProtoConfig::default();
    let mut tape = Tape::<f32>::new();
    let sv = tape.constant(support);
    let protos = masked_average_pooling(&mut tape, sv, &binary_class_masks(&support_mask)?)?;
    for p in &protos {
        println!("prototype {}: {:?}", p.class_id, tape.value(p.vector).data());
    }
    let qv = tape.constant(query);
    let probs = prototype_segment(&mut tape, qv, &protos, &cfg)?;
    let fg = foreground_channel(&mut tape, probs)?;
    let pair = double_threshold(tape.value(fg), &cfg)?;
    println!("foreground probability across the first row:");
    let row: Vec<String> = (0..w).map(|x| format!("{:.3}", pair.probabilities.at(&[0, x]))).collect();
    println!("  {}", row.join(" "));
    println!(
        "strict mask (tau {}): {} pixels, dilated mask (tau_hat {}): {} pixels",
        cfg.tau,
        pair.mask.sum(),
        cfg.tau_hat,
        pair.dilated.sum()
    );
    Ok(())
}
