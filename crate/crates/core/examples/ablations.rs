//! The runtime-selectable architecture variants, with their parameter counts
//! and the TOML that selects each one.

use trackgroup::config::{Overrides, RunConfig};
use trackgroup::gtransformer::AttentionKind;
use trackgroup::model::GroupModel;

fn main() -> trackgroup::error::Result<()> {
    let variants = [
        ("full", Overrides::default()),
        ("gat", Overrides { attention: Some(AttentionKind::Gat), ..Default::default() }),
        ("no-euclid", Overrides { no_euclid: true, ..Default::default() }),
        ("det-only", Overrides { det_only: true, ..Default::default() }),
        ("no-residual", Overrides { no_residual: true, ..Default::default() }),
    ];
    for (name, o) in variants {
        let mut cfg = RunConfig::default();
        cfg.apply(&o)?;
        let model = GroupModel::new(cfg.model, 0)?;
        println!("{name:>11}: {} parameters, config hash {}", model.num_parameters(), cfg.hash());
    }
    let mut gat = RunConfig::default();
    gat.model.transformer.attention = AttentionKind::Gat;
    println!("\n{}", gat.to_toml());
    Ok(())
}
