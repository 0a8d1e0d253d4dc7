//! Plain-text parameter checkpoints.
//!
//! ```text
//! mal-checkpoint 1
//! attr activation tanh
//! tensor backbone.0.weight 32 64
//! <32 lines of 64 space-separated values>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Activation, Affine, AuDetector, Backbone, BaseParams, MetaParams};

const MAGIC: &str = "mal-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub detector: AuDetector,
    pub fe_head: Option<Affine>,
    pub meta: Option<MetaParams>,
}

impl Checkpoint {
    pub fn from_base(theta: &BaseParams, meta: Option<&MetaParams>) -> Self {
        Self { detector: theta.au_detector(), fe_head: Some(theta.fe_head.clone()), meta: meta.cloned() }
    }

    pub fn base_params(&self) -> Option<BaseParams> {
        self.fe_head.as_ref().map(|fe| BaseParams {
            backbone: self.detector.backbone.clone(),
            au_head: self.detector.head.clone(),
            fe_head: fe.clone(),
        })
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.detector.backbone.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("au_head.weight".into(), &self.detector.head.weight));
        out.push(("au_head.bias".into(), &self.detector.head.bias));
        if let Some(fe) = &self.fe_head {
            out.push(("fe_head.weight".into(), &fe.weight));
            out.push(("fe_head.bias".into(), &fe.bias));
        }
        if let Some(m) = &self.meta {
            out.push(("meta.weight".into(), &m.weight));
            out.push(("meta.bias".into(), &m.bias));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\nattr activation {}\n", self.detector.backbone.activation.name());
        for (key, t) in self.entries() {
            out.push_str(&format!("tensor {key} {} {}\n", t.rows(), t.cols()));
            for r in 0..t.rows() {
                let row: Vec<String> = t.row_slice(r).iter().map(|v| v.to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { path: path.to_owned(), line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("missing {MAGIC:?} header"))),
        }
        let mut activation = None;
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        while let Some((n, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => continue,
                ["attr", "activation", name] => {
                    activation = Some(Activation::from_name(name).ok_or_else(|| err(n, format!("unknown activation {name:?}")))?);
                }
                ["tensor", key, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| err(n, format!("bad row count {rows:?}")))?;
                    let cols: usize = cols.parse().map_err(|_| err(n, format!("bad column count {cols:?}")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (m, row) = lines.next().ok_or_else(|| err(n, format!("tensor {key} is truncated")))?;
                        let before = data.len();
                        for v in row.split_whitespace() {
                            data.push(v.parse::<f64>().map_err(|_| err(m, format!("bad value {v:?}")))?);
                        }
                        if data.len() - before != cols {
                            return Err(err(m, format!("expected {cols} values, found {}", data.len() - before)));
                        }
                    }
                    if tensors.insert(key.to_string(), Tensor::new(Shape::new(rows, cols), data)).is_some() {
                        return Err(err(n, format!("duplicate tensor {key}")));
                    }
                }
                _ => return Err(err(n, format!("unrecognized line {line:?}"))),
            }
        }
        let activation = activation.ok_or_else(|| err(0, "missing activation attribute".into()))?;
        let mut take = |key: &str| tensors.remove(key);
        let mut affine = |prefix: &str| -> Result<Option<Affine>> {
            match (take(&format!("{prefix}.weight")), take(&format!("{prefix}.bias"))) {
                (Some(weight), Some(bias)) => {
                    if bias.rows() != 1 || bias.cols() != weight.cols() {
                        return Err(err(0, format!("{prefix}: bias {} does not match weight {}", bias.shape(), weight.shape())));
                    }
                    Ok(Some(Affine { weight, bias }))
                }
                (None, None) => Ok(None),
                _ => Err(err(0, format!("{prefix}: weight and bias must both be present"))),
            }
        };
        let mut layers = Vec::new();
        while let Some(l) = affine(&format!("backbone.{}", layers.len()))? {
            layers.push(l);
        }
        if layers.is_empty() {
            return Err(err(0, "no backbone layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(err(0, "backbone layer dimensions do not chain".into()));
            }
        }
        let head = affine("au_head")?.ok_or_else(|| err(0, "missing au_head".into()))?;
        let fe_head = affine("fe_head")?;
        let meta = affine("meta")?.map(|a| MetaParams { weight: a.weight, bias: a.bias });
        let embed = layers.last().map_or(0, Affine::output_dim);
        if head.input_dim() != embed || fe_head.as_ref().is_some_and(|h| h.input_dim() != embed) {
            return Err(err(0, "head input does not match the embedding width".into()));
        }
        if meta.as_ref().is_some_and(|m| m.embed_dim() != embed || m.weight.cols() != 1) {
            return Err(err(0, "meta net does not match the embedding width".into()));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(err(0, format!("unexpected tensor {extra}")));
        }
        Ok(Self { detector: AuDetector { backbone: Backbone { layers, activation }, head }, fe_head, meta })
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        crate::meta_engine::write_file(path, &self.to_text())?;
        Ok(self.entries().len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
