//! JSON documents for networks. Doubles are written with round-trip
//! precision, so a saved model reloads with bit-identical weights.

use serde::{Deserialize, Serialize};

use crate::algebra::CnnFunction;
use crate::error::{ForgeError, Result};
use crate::net::{ConvResNetModel, FilterTensor, Matrix, ResidualBlockSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterDoc {
    dims: [usize; 3],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    filters: Vec<FilterDoc>,
    biases: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FcDoc {
    weight: Vec<Vec<f64>>,
    bias: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    version: u32,
    #[serde(default = "resnet_kind")]
    kind: String,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    blocks: Vec<BlockDoc>,
    fc: FcDoc,
    first_row_only: bool,
}

fn resnet_kind() -> String {
    "resnet".into()
}

fn filter_doc(f: &FilterTensor) -> FilterDoc {
    FilterDoc {
        dims: f.dims(),
        data: f.to_dense(),
    }
}

fn filter_from(doc: &FilterDoc) -> Result<FilterTensor> {
    let [o, k, i] = doc.dims;
    FilterTensor::from_dense(o, k, i, &doc.data)
}

fn matrix_from(rows: &[Vec<f64>], context: &str) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(ForgeError::Parameter(format!("{context}: empty matrix")));
    }
    Matrix::from_rows(rows)
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(ForgeError::Version {
            found: v,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn fc_doc(w: &Matrix, b: f64) -> FcDoc {
    FcDoc {
        weight: w.to_rows(),
        bias: b,
    }
}

pub fn resnet_to_json(net: &ConvResNetModel) -> Result<String> {
    let doc = NetDoc {
        version: FORMAT_VERSION,
        kind: resnet_kind(),
        d: net.input_dim,
        c: net.channels,
        blocks: net
            .blocks
            .iter()
            .map(|b| BlockDoc {
                filters: b.filters.iter().map(filter_doc).collect(),
                biases: b.biases.iter().map(Matrix::to_rows).collect(),
            })
            .collect(),
        fc: fc_doc(&net.fc_weight, net.fc_bias),
        first_row_only: net.first_row_only,
    };
    Ok(serde_json::to_string(&doc)?)
}

fn parse(text: &str, kind: &str) -> Result<NetDoc> {
    let doc: NetDoc = serde_json::from_str(text)?;
    check_version(doc.version)?;
    if doc.kind != kind {
        return Err(ForgeError::Parameter(format!(
            "expected kind \"{kind}\", found \"{}\"",
            doc.kind
        )));
    }
    Ok(doc)
}

pub fn resnet_from_json(text: &str) -> Result<ConvResNetModel> {
    let doc = parse(text, "resnet")?;
    let blocks = doc
        .blocks
        .iter()
        .map(|b| {
            let filters = b.filters.iter().map(filter_from).collect::<Result<_>>()?;
            let biases = b.biases.iter().map(|m| matrix_from(m, "bias")).collect::<Result<_>>()?;
            ResidualBlockSpec::new(filters, biases)
        })
        .collect::<Result<_>>()?;
    ConvResNetModel::new(
        doc.d,
        doc.c,
        blocks,
        matrix_from(&doc.fc.weight, "fc")?,
        doc.fc.bias,
        doc.first_row_only,
    )
}

/// A CNN is stored as a single "block" holding its conv stack; `C` is the
/// input channel count.
pub fn cnn_to_json(cnn: &CnnFunction) -> Result<String> {
    let doc = NetDoc {
        version: FORMAT_VERSION,
        kind: "cnn".into(),
        d: cnn.input_dim,
        c: cnn.in_channels,
        blocks: vec![BlockDoc {
            filters: cnn.layers.iter().map(|(f, _)| filter_doc(f)).collect(),
            biases: cnn.layers.iter().map(|(_, b)| b.to_rows()).collect(),
        }],
        fc: fc_doc(&cnn.fc_weight, cnn.fc_bias),
        first_row_only: cnn.first_row_only,
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn cnn_from_json(text: &str) -> Result<CnnFunction> {
    let doc = parse(text, "cnn")?;
    let mut layers = Vec::new();
    for b in &doc.blocks {
        if b.filters.len() != b.biases.len() {
            return Err(ForgeError::Parameter("filter and bias counts differ".into()));
        }
        for (f, m) in b.filters.iter().zip(&b.biases) {
            layers.push((filter_from(f)?, matrix_from(m, "bias")?));
        }
    }
    CnnFunction::new(
        doc.d,
        doc.c,
        layers,
        matrix_from(&doc.fc.weight, "fc")?,
        doc.fc.bias,
        doc.first_row_only,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{compile_scalar, scalar_to_cnn};
    use crate::calculus::{build_product2, build_trapezoid};

    #[test]
    fn resnet_roundtrip_is_bit_exact() {
        let net = compile_scalar(&build_product2(1e-3, 1.7).unwrap()).unwrap();
        let back = resnet_from_json(&resnet_to_json(&net).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn cnn_roundtrip() {
        let cnn = scalar_to_cnn(&build_trapezoid(1, 3).unwrap()).unwrap();
        let text = cnn_to_json(&cnn).unwrap();
        assert!(text.contains("\"kind\":\"cnn\""));
        assert_eq!(cnn_from_json(&text).unwrap(), cnn);
        assert!(resnet_from_json(&text).is_err());
    }

    #[test]
    fn wrong_version_is_typed() {
        let net = compile_scalar(&build_trapezoid(0, 1).unwrap()).unwrap();
        let text = resnet_to_json(&net).unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(
            resnet_from_json(&text),
            Err(ForgeError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn corrupt_file_is_error() {
        assert!(matches!(resnet_from_json("{\"version\":1,"), Err(ForgeError::Serde(_))));
    }
}
