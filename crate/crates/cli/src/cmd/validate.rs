use mcrp_core::relprop::RelpropError;
use mcrp_core::{forward, load_model, relevance_pass, sample_mask, DropoutMask, RelevanceSeed, SeedMode};

use super::{load_input, parse_target};
use crate::error::CliError;
use crate::ValidateArgs;

pub fn run(a: &ValidateArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let loaded = load_input(&model, &a.image)?;
    let mask = match a.seed {
        Some(seed) => sample_mask(&model, seed, 0),
        None => DropoutMask::all_ones(&model),
    };
    let trace = forward(&model, &loaded.input, &mask)?;
    if !trace.logits().all_finite() {
        return Err(CliError::Numerical("non-finite logits".into()));
    }
    let mode = match parse_target(&model, &a.target)? {
        SeedMode::PredictedClass => SeedMode::TargetClass(trace.logits().argmax()),
        m => m,
    };
    let relprop_err = |e: RelpropError| match e {
        RelpropError::NaN { .. } => CliError::Numerical(e.to_string()),
        RelpropError::TargetOutOfRange { .. } => CliError::Usage(e.to_string()),
        other => CliError::Engine(other.to_string()),
    };
    let seed = RelevanceSeed::from_logits(mode, trace.logits()).map_err(relprop_err)?;
    let rel = relevance_pass(&model, &trace, &seed, 0.0).map_err(relprop_err)?;

    println!(
        "{:<12} {:<9} {:>14} {:>14} {:>12} {:>12} {:>10}",
        "layer", "kind", "sum R_out", "sum R_in", "deficit", "leak", "status"
    );
    let seeded = rel.relevances[model.layers().len()].sum();
    // relevance is carried in f32, so the bound scales with the injected total
    let bound = a.tolerance * seeded.abs().max(1.0);
    let mut failed = 0;
    for (l, spec) in model.layers().iter().enumerate().rev() {
        let r_out = rel.relevances[l + 1].sum();
        let r_in = rel.relevances[l].sum();
        let deficit = r_out - r_in;
        let leak = rel.layer_leaks[l];
        let ok = (deficit - leak).abs() <= bound;
        if !ok {
            failed += 1;
        }
        println!(
            "{:<12} {:<9} {:>14.6e} {:>14.6e} {:>12.3e} {:>12.3e} {:>10}",
            spec.name,
            spec.kind().as_str(),
            r_out,
            r_in,
            deficit,
            leak,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    let reached = rel.input_relevance().sum();
    println!(
        "seed {seeded:.6e}, input {reached:.6e}, total leak {:.6e}",
        rel.total_leak()
    );
    if failed > 0 {
        return Err(CliError::Conservation { failed });
    }
    println!("conservation holds at every layer (bound {bound:e})");
    Ok(())
}
