//! Forward shape traces of every preset against stored golden tables.
//!
//! The tables were written once by `arithmetic_trace` below, which recomputes
//! each extent from the convolution and pooling formulas without going through
//! the library's own shape inference. Set `GRAFT_BLESS=1` to rewrite them.

use std::path::PathBuf;

use graft::layers::LayerKind;
use graft::zoo::{ModelSpec, Preset};

fn golden_path(preset: Preset) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{}.txt", preset.name()))
}

fn arithmetic_trace(spec: &ModelSpec) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let prev = if i == 0 { spec.input_shape.clone() } else { out[i - 1].clone() };
        let shape = match &layer.kind {
            LayerKind::Convolution {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => vec![
                *out_channels,
                (prev[1] + 2 * padding[0] - kernel[0]) / stride + 1,
                (prev[2] + 2 * padding[1] - kernel[1]) / stride + 1,
            ],
            LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                vec![prev[0], (prev[1] - size[0]) / stride + 1, (prev[2] - size[1]) / stride + 1]
            }
            LayerKind::FullyConnected { out_units, .. } => vec![*out_units],
            LayerKind::SoftmaxOutput { classes } => vec![*classes],
            LayerKind::Concat { sources } => {
                let mut s = out[sources[0]].clone();
                s[0] = sources.iter().map(|&j| out[j][0]).sum();
                s
            }
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Dropout { .. } => prev,
        };
        out.push(shape);
    }
    out
}

fn render(spec: &ModelSpec, trace: &[Vec<usize>]) -> String {
    let mut s = format!("input {:?}\n", spec.input_shape);
    for (layer, shape) in spec.layers.iter().zip(trace) {
        s += &format!("{} {:?}\n", layer.id, shape);
    }
    s
}

#[test]
fn preset_shape_traces_match_golden_tables() {
    let bless = std::env::var_os("GRAFT_BLESS").is_some();
    for preset in Preset::ALL {
        let spec = preset.spec(10);
        let oracle = render(&spec, &arithmetic_trace(&spec));
        let path = golden_path(preset);
        if bless {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &oracle).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(oracle, golden, "{}: oracle disagrees with the stored table", preset.name());
        let traced = render(&spec, &spec.shape_trace().unwrap());
        assert_eq!(traced, golden, "{}: shape_trace disagrees with the stored table", preset.name());
    }
}

#[test]
fn table_rows_appear_in_the_densenet_trace() {
    let spec = Preset::Densenet.spec(10);
    let trace = spec.shape_trace().unwrap();
    assert_eq!(trace[0], vec![24, 32, 32]);
    let last_pool = spec
        .layers
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::AvgPool { .. }))
        .unwrap();
    assert_eq!(trace[last_pool][1..], [1, 1]);
    assert_eq!(trace[last_pool - 2][1..], [8, 8]);
}
