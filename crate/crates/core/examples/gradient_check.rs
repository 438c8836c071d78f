//! Compare the tape's gradient of the training loss with central finite
//! differences for a few parameter entries.

use trackgroup::losses::LossConfig;
use trackgroup::model::{GroupModel, ModelConfig, SceneFeatures};
use trackgroup::synth::{synth_scene, SynthConfig};
use trackgroup_nd::gradcheck::relative_error;
use trackgroup_nd::Tape;

fn main() -> trackgroup::error::Result<()> {
    let cfg = LossConfig::default();
    let mut model = GroupModel::new(ModelConfig::default(), 3)?;
    let scene = synth_scene(&SynthConfig::default(), "grad", 3)?;
    let x = SceneFeatures::new(&scene, &model.config().encoder)?;

    let mut t = Tape::new();
    let p = model.params().bind(&mut t);
    let (loss, parts) = model.loss(&mut t, &p, &x, &cfg)?;
    t.backward(loss)?;
    model.params_mut().collect_grads(&t, &p);
    println!("loss parts {parts:?}");

    let h = 1e-6;
    for name in ["heads.adjacency.w", "heads.card_out.b", "gt.layer4.ffn2.b", "encoder.lstm.w_h"] {
        let analytic = model.params().grad(name).expect("trainable").data()[0];
        let mut probe = model.clone();
        let orig = probe.params().get(name).expect("present").data()[0];
        let mut at = |v: f64| {
            probe.params_mut().get_mut(name).expect("present").data_mut()[0] = v;
            probe.evaluate_loss(&x, &cfg).map(|l| l.total)
        };
        let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
        println!(
            "{name}[0]: tape {analytic:+.6e} numeric {numeric:+.6e} rel err {:.1e}",
            relative_error(analytic, numeric, 1e-8)
        );
    }
    Ok(())
}
