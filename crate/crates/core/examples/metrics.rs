//! Confusion-matrix IoU on a hand-made prediction, with one ignored pixel.

use seglstm::metrics::ConfusionMatrix;

fn main() -> seglstm::Result<()> {
    let truth = [0, 0, 1, 1, 2, 2, 255, 1];
    let pred = [0, 1, 1, 1, 2, 0, 2, 1];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth, 255)?;
    for (c, row) in cm.rows().enumerate() {
        println!("truth {c}: {row:?}");
    }
    for (c, iou) in cm.iou_per_class().iter().enumerate() {
        println!("class {c} IoU {iou:?}");
    }
    println!("mIoU {:.4} over {} counted pixels", cm.miou()?, cm.total());
    Ok(())
}
