use mcrp_core::{load_model, Layer, ModelGraph};
use serde::Serialize;

use crate::error::CliError;
use crate::InspectArgs;

#[derive(Serialize)]
struct LayerRow {
    name: String,
    kind: &'static str,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: usize,
    detail: String,
}

#[derive(Serialize)]
struct Summary {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: usize,
    class_labels: Option<Vec<String>>,
    dropout_layers: Vec<String>,
    layers: Vec<LayerRow>,
}

fn detail(layer: &Layer) -> String {
    match layer {
        Layer::Conv2d {
            kernels,
            stride,
            padding,
            ..
        } => {
            let s = kernels.shape();
            format!("{}x{} stride {stride} padding {padding}", s[2], s[3])
        }
        Layer::MaxPool2d { window, stride } => format!("{window}x{window} stride {stride}"),
        Layer::Dropout { keep_prob } => format!("keep {keep_prob}"),
        Layer::Dense { bias: None, .. } => "no bias".into(),
        _ => String::new(),
    }
}

fn summarize(model: &ModelGraph) -> Summary {
    let layers: Vec<LayerRow> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| LayerRow {
            name: spec.name.clone(),
            kind: spec.kind().as_str(),
            input_shape: model.boundary_shape(l).to_vec(),
            output_shape: model.boundary_shape(l + 1).to_vec(),
            params: spec.layer.param_count(),
            detail: detail(&spec.layer),
        })
        .collect();
    Summary {
        input_shape: model.input_shape().to_vec(),
        output_shape: model.output_shape().to_vec(),
        params: model.param_count(),
        class_labels: model.class_labels().map(<[String]>::to_vec),
        dropout_layers: model
            .layers()
            .iter()
            .filter(|s| matches!(s.layer, Layer::Dropout { .. }))
            .map(|s| s.name.clone())
            .collect(),
        layers,
    }
}

fn shape(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(","))
}

pub fn run(a: &InspectArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let summary = summarize(&model);
    if a.json {
        let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Engine(e.to_string()))?;
        println!("{json}");
        return Ok(());
    }
    println!(
        "{:<3} {:<12} {:<9} {:<12} {:<12} {:>8}  detail",
        "#", "name", "kind", "input", "output", "params"
    );
    for (i, row) in summary.layers.iter().enumerate() {
        println!(
            "{:<3} {:<12} {:<9} {:<12} {:<12} {:>8}  {}",
            i,
            row.name,
            row.kind,
            shape(&row.input_shape),
            shape(&row.output_shape),
            row.params,
            row.detail
        );
    }
    println!(
        "input {} -> output {}, {} parameters",
        shape(&summary.input_shape),
        shape(&summary.output_shape),
        summary.params
    );
    if summary.dropout_layers.is_empty() {
        println!("dropout: none (sampling will produce zero variance)");
    } else {
        println!("dropout: {}", summary.dropout_layers.join(", "));
    }
    Ok(())
}
