//! Dice and HD95 on two hand-built label maps with anisotropic spacing.
//!
//! cargo run --release --example segmentation_metrics

use magms::evaluation::{argmax_labels, dice_score, evaluate_prediction, hd95};
use magms::types::LabelMap;
use ndarray::{s, Array3, Array4};

fn cube(shape: (usize, usize, usize), lo: usize, hi: usize) -> Array3<u8> {
    let mut a = Array3::zeros(shape);
    a.slice_mut(s![lo..hi, lo..hi, lo..hi]).fill(1);
    a
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = (12, 12, 12);
    let truth = LabelMap::new(cube(shape, 3, 9), 2)?;
    let mut shifted = cube(shape, 3, 9);
    shifted.slice_mut(s![9..11, 3..9, 3..9]).fill(1);
    let pred = LabelMap::new(shifted, 2)?;

    let spacing = [2.0, 1.0, 1.0];
    println!("dice per class: {:.4?}", dice_score(&pred, &truth, 2)?);
    println!("hd95 foreground: {:?}", hd95(&pred, &truth, 1, spacing)?);
    let empty = LabelMap::new(Array3::zeros(shape), 2)?;
    println!(
        "hd95 against empty prediction: {:?}",
        hd95(&empty, &truth, 1, spacing)?
    );

    let mut logits = Array4::<f32>::zeros((2, 12, 12, 12));
    for ((z, y, x), &c) in pred.classes().indexed_iter() {
        logits[[c as usize, z, y, x]] = 1.0;
    }
    let result = evaluate_prediction(&argmax_labels(&logits)?, &truth, spacing)?;
    println!("{result:?}");
    Ok(())
}
