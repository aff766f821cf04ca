//! The evaluation metrics on small hand-made predictions.
//!
//! `cargo run --release --example eval_metrics`

use unihcp::metrics::{
    attribute_metrics, det_metrics, parsing_metrics, pose_metrics, reid_metrics, ImageDetections,
    MA_DEFINITION,
};

fn main() -> unihcp::Result<()> {
    let gt = [0, 0, 1, 1, 2, 2, 2, 0];
    let pred = [0, 0, 1, 2, 2, 2, 2, 0];
    let p = parsing_metrics(&pred, &gt, 3)?;
    println!("parsing: mIoU {:.4} pixel acc {:.4} per class {:?}", p.miou, p.pacc, p.per_class_iou);

    let probs = vec![vec![0.9, 0.2], vec![0.7, 0.6], vec![0.1, 0.4]];
    let labels = vec![vec![true, false], vec![true, true], vec![false, true]];
    let a = attribute_metrics(&probs, &labels)?;
    println!("attributes: mA {:.4} per attribute {:?}\n  ({MA_DEFINITION})", a.ma, a.per_attribute);

    let joints = vec![vec![Some([10.0, 10.0]), Some([20.0, 30.0]), None]];
    let guess = vec![vec![([11.0, 10.0], true), ([28.0, 30.0], true), ([0.0, 0.0], false)]];
    let k = pose_metrics(&guess, &joints, &[40.0], 0.1)?;
    println!("pose: {k:?}");

    let dets = vec![ImageDetections { boxes: vec![[0.5, 0.5, 0.4, 0.2], [0.2, 0.2, 0.1, 0.1]], scores: vec![0.9, 0.3] }];
    let d = det_metrics(&dets, &[vec![[0.5, 0.52, 0.4, 0.2]]])?;
    println!("detection: {d:?}");

    let feats = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
    let ids = [0, 0, 1, 1];
    let r = reid_metrics(&feats, &ids, &feats, &ids, true)?;
    println!("reid: {r:?}");
    Ok(())
}
