//! Score predictions with per-size AP: the ground truth itself, and the
//! distance-threshold baseline fitted on a training split.

use trackgroup::evalmetrics::EvalConfig;
use trackgroup::evaluate::{evaluate_oracle, BaselineScene, ThresholdBaseline};
use trackgroup::synth::{split_samples, synth_split, SynthConfig};

fn main() -> trackgroup::error::Result<()> {
    let cfg = SynthConfig::default();
    let train = split_samples(&synth_split(&cfg, 0, 0, "train", 40)?, &cfg)?;
    let test = split_samples(&synth_split(&cfg, 0, 2, "test", 20)?, &cfg)?;
    let eval = EvalConfig::default();

    println!("oracle mAP: {:?}", evaluate_oracle(&test, &eval).map);

    let to_baseline = |s: &[_]| -> trackgroup::error::Result<Vec<BaselineScene>> { s.iter().map(BaselineScene::new).collect() };
    let baseline = ThresholdBaseline::fit(&to_baseline(&train)?, &eval)?;
    println!("baseline threshold {:.2}", baseline.tau);
    print!("{}", baseline.evaluate(&to_baseline(&test)?, &eval)?.to_text());
    Ok(())
}
