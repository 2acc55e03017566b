//! One FMLA block: DCN features generate the compression maps, attention
//! runs over `C` compressed positions instead of `n`.

use fmla::attention::{cla_attention, gen_compression_maps};
use fmla::model::ModelVars;
use fmla::{FmlaModel, Graph, ModelConfig, Tensor};

fn main() -> fmla::Result<()> {
    let cfg = ModelConfig {
        seq_len: 64,
        ..ModelConfig::default()
    };
    let model = FmlaModel::new(cfg.clone())?;
    let x = Tensor::from_fn(&[2, cfg.seq_len], |i| (i as f64 * 0.2).sin());

    let mut g = Graph::new();
    let vars: ModelVars = model.bind_constants(&mut g)?;
    let xv = g.constant(x);
    let (feats, _) = model.dcn_stream(&mut g, &vars, xv, false)?;
    let tokens = model.embed_stem(&mut g, &vars, xv)?;
    let opts = cfg.cla_options();
    let maps = gen_compression_maps(&mut g, feats[0], vars.cla[0].comp_gen, &opts)?;
    let norm = g.layer_norm(tokens, vars.cla[0].ln1_gain, vars.cla[0].ln1_bias)?;
    g.reset_macs();
    let (out, act) = cla_attention(&mut g, norm, &maps, &vars.cla[0], &opts, &[])?;

    println!("tokens            {:?}", g.value(tokens).dims());
    println!("compression map   {:?} per head", g.value(act.f[0]).dims());
    println!("compressed values {:?} per head", g.value(act.vbar[0]).dims());
    println!("shared key        {:?}", g.value(act.khat).dims());
    println!("attention map     {:?} per head", g.value(act.a[0]).dims());
    println!("block output      {:?}", g.value(out).dims());
    println!("attention MACs    {}", g.macs());
    Ok(())
}
