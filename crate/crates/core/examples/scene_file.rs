//! The plain-text scene format: build a sample, write it, parse it back and
//! cut samples at its key frames.

use trackgroup::clustering::Partition;
use trackgroup::dataio::SceneFile;
use trackgroup::geometry::BoundingBox;
use trackgroup::tracks::{SceneSample, Track};

fn main() -> trackgroup::error::Result<()> {
    let track = |id, x: f64| Track::from_boxes(id, (1..=4).map(|f| (f, BoundingBox::new(x + f as f64, 50.0, 20.0, 45.0).unwrap())));
    let tracks = vec![track(1, 10.0)?, track(2, 35.0)?, track(3, 200.0)?];
    let groups = Partition::new(vec![vec![1, 2], vec![3]])?;
    let sample = SceneSample::new("street", (320.0, 240.0), 4, tracks, groups)?;

    let text = SceneFile::from_sample(&sample).to_text();
    println!("{text}");
    let back = SceneFile::parse(&text, "inline")?;
    for kf in back.keyframes(2) {
        if let Ok(s) = back.sample_at(kf, None) {
            println!("{} -> {} tracks, groups {}", s.scene_id, s.len(), s.groups);
        }
    }
    Ok(())
}
