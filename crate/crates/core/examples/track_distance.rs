//! Box and track distances: GIoU distance per frame, and the time-averaged
//! distance between two tracks with gaps.

use trackgroup::geometry::{giou, giou_distance, iou, BoundingBox};
use trackgroup::tracks::{distance_matrix, track_distance, Track};

fn main() -> trackgroup::error::Result<()> {
    let a = BoundingBox::new(100.0, 100.0, 40.0, 90.0)?;
    let b = BoundingBox::new(120.0, 105.0, 40.0, 90.0)?;
    let far = BoundingBox::new(600.0, 100.0, 40.0, 90.0)?;
    println!("near pair: iou {:.3} giou {:.3} distance {:.3}", iou(&a, &b), giou(&a, &b), giou_distance(&a, &b));
    println!("far pair:  iou {:.3} giou {:.3} distance {:.3}", iou(&a, &far), giou(&a, &far), giou_distance(&a, &far));

    // Two people walking side by side, and a third who is only seen at the
    // end. Frames missing from one track count as maximally distant.
    let walk = |id, x0: f64, frames: &[i64]| {
        Track::from_boxes(
            id,
            frames.iter().map(|&f| (f, BoundingBox::new(x0 + 3.0 * f as f64, 200.0, 40.0, 90.0).unwrap())),
        )
    };
    let left = walk(1, 100.0, &[1, 2, 3, 4, 5, 6])?;
    let right = walk(2, 145.0, &[1, 2, 3, 5, 6])?;
    let late = walk(3, 400.0, &[5, 6])?;
    println!("left-right {:.3}", track_distance(&left, &right));
    println!("left-late  {:.3}", track_distance(&left, &late));

    let d = distance_matrix(&[left, right, late])?;
    println!("distance matrix:\n{d:.3}");
    Ok(())
}
