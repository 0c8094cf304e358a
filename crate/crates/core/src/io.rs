//! Plain-text parameter container.
//!
//! ```text
//! milpdl-params v1
//! aggregator abmil
//! tensor projector.0.weight 256 20
//! <rows*cols values, row-major, space separated>
//! ...
//! end
//! ```
//!
//! Tensors: `projector.{i}.weight` (out × in), `projector.{i}.bias`
//! (1 × out), `attention.w1` (D × 1), `attention.w2` (D × L),
//! `attention.u2` (D × L, gated only), `classifier.weight` (1 × L),
//! `classifier.bias` (1 × 1), and optionally `input.mean` / `input.std`
//! (1 × features) holding the feature standardization. Values are written
//! with shortest round-trip formatting, so save/load is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Standardizer;
use crate::error::{MilError, Result};
use crate::model::{AggregatorKind, AggregatorParams, DenseLayer, ModelParams, ProjectorParams};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: &str = "milpdl-params v1";

/// Parameters plus the input normalization they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub params: ModelParams,
    pub standardizer: Option<Standardizer>,
}

fn push_tensor(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    out.push_str(&line.join(" "));
    out.push('\n');
}

impl SavedModel {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        out.push_str(FORMAT_VERSION);
        out.push('\n');
        let _ = writeln!(out, "aggregator {}", p.aggregator.kind());
        for (i, l) in p.projector.layers.iter().enumerate() {
            let (r, c) = l.weight.shape();
            push_tensor(
                &mut out,
                &format!("projector.{i}.weight"),
                r,
                c,
                l.weight.as_slice(),
            );
            push_tensor(
                &mut out,
                &format!("projector.{i}.bias"),
                1,
                l.bias.len(),
                &l.bias,
            );
        }
        let a = &p.aggregator;
        push_tensor(&mut out, "attention.w1", a.w1.rows(), 1, a.w1.as_slice());
        push_tensor(
            &mut out,
            "attention.w2",
            a.w2.rows(),
            a.w2.cols(),
            a.w2.as_slice(),
        );
        if let Some(u2) = &a.u2 {
            push_tensor(
                &mut out,
                "attention.u2",
                u2.rows(),
                u2.cols(),
                u2.as_slice(),
            );
        }
        let l = a.classifier_weight.len();
        push_tensor(&mut out, "classifier.weight", 1, l, &a.classifier_weight);
        push_tensor(&mut out, "classifier.bias", 1, 1, &[a.classifier_bias]);
        if let Some(s) = &self.standardizer {
            push_tensor(&mut out, "input.mean", 1, s.mean.len(), &s.mean);
            push_tensor(&mut out, "input.std", 1, s.std.len(), &s.std);
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| MilError::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, l)) if l == FORMAT_VERSION => {}
            Some((n, l)) => return Err(err(n, format!("unsupported format header {l:?}"))),
            None => return Err(err(1, "empty parameter file".into())),
        }
        let kind: AggregatorKind = match lines.next() {
            Some((n, l)) => l
                .strip_prefix("aggregator ")
                .ok_or_else(|| err(n, "expected aggregator line".into()))?
                .parse()
                .map_err(|e: MilError| err(n, e.to_string()))?,
            None => return Err(err(2, "missing aggregator line".into())),
        };

        let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
        let mut ended = false;
        while let Some((n, l)) = lines.next() {
            if l == "end" {
                ended = true;
                break;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(err(n, format!("expected tensor header, found {l:?}")));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| err(n, "bad row count".into()))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| err(n, "bad column count".into()))?;
            let (vn, vl) = lines
                .next()
                .ok_or_else(|| err(n + 1, format!("missing values for {}", parts[1])))?;
            let values: Vec<f64> = vl
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(vn, format!("bad value {t:?}")))
                })
                .collect::<Result<_>>()?;
            let m = Matrix::from_vec(rows, cols, values).map_err(|e| err(vn, e.to_string()))?;
            if tensors.insert(parts[1].to_string(), m).is_some() {
                return Err(err(n, format!("duplicate tensor {}", parts[1])));
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "missing end marker".into()));
        }

        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| err(0, format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let wname = format!("projector.{i}.weight");
            let weight = match take(&wname) {
                Ok(w) => w,
                Err(_) => break,
            };
            let bias = take(&format!("projector.{i}.bias"))?.into_vec();
            layers.push(DenseLayer { weight, bias });
            i += 1;
        }
        let w1 = take("attention.w1")?;
        let w2 = take("attention.w2")?;
        let u2 = match kind {
            AggregatorKind::Gated => Some(take("attention.u2")?),
            AggregatorKind::Attention => None,
        };
        let classifier_weight = take("classifier.weight")?.into_vec();
        let classifier_bias = take("classifier.bias")?.as_slice()[0];
        let standardizer = match (take("input.mean"), take("input.std")) {
            (Ok(mean), Ok(std)) => Some(Standardizer {
                mean: mean.into_vec(),
                std: std.into_vec(),
            }),
            (Err(_), Err(_)) => None,
            _ => {
                return Err(err(
                    0,
                    "input.mean and input.std must appear together".into(),
                ))
            }
        };
        if let Some(name) = tensors.keys().next() {
            return Err(err(0, format!("unexpected tensor {name}")));
        }
        let params = ModelParams {
            projector: ProjectorParams { layers },
            aggregator: AggregatorParams {
                w1,
                w2,
                u2,
                classifier_weight,
                classifier_bias,
            },
        };
        params.validate()?;
        if let Some(s) = &standardizer {
            if s.mean.len() != params.input_dim() || s.std.len() != params.input_dim() {
                return Err(err(
                    0,
                    "standardization width differs from model input".into(),
                ));
            }
        }
        Ok(Self {
            params,
            standardizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}
