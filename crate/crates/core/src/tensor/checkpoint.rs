//! Versioned text container for parameters and optimizer state.
//!
//! ```text
//! PEPIPE-CKPT-v1
//! meta <key> <value>
//! param <name> <weight|bias> <d0>x<d1>x...
//! <values separated by spaces>
//! optimizer <algorithm> <step> <lr> <beta1> <beta2> <epsilon> <momentum> <l2>
//! moment <first|second> <param index>
//! <values>
//! end
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! float, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::optim::{Algorithm, OptimizerState};
use super::params::{ParamKind, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "PEPIPE-CKPT-v1";

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<F>,
    pub optimizer: Option<OptimizerState<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(params: ParamStore<F>) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for id in self.params.ids() {
            let t = self.params.get(id);
            let kind = match self.params.kind(id) {
                ParamKind::Weight => "weight",
                ParamKind::Bias => "bias",
            };
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {} {kind} {}", self.params.name(id), dims.join("x"));
            write_values(&mut out, t.data());
        }
        if let Some(opt) = &self.optimizer {
            let _ = writeln!(
                out,
                "optimizer {} {} {} {} {} {} {} {}",
                opt.algorithm.name(),
                opt.step_count,
                opt.learning_rate,
                opt.beta1,
                opt.beta2,
                opt.epsilon,
                opt.momentum,
                opt.l2_coefficient
            );
            for (which, bufs) in [("first", &opt.first), ("second", &opt.second)] {
                for (i, b) in bufs.iter().enumerate() {
                    let _ = writeln!(out, "moment {which} {i}");
                    write_values(&mut out, b);
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Load(format!("missing {MAGIC} header")));
        }
        let mut ckpt = Checkpoint::new(ParamStore::new());
        let mut ended = false;
        while let Some(line) = lines.next() {
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, kind, dims] = f[..] else {
                        return Err(Error::Load(format!("bad param header: {line}")));
                    };
                    let kind = match kind {
                        "weight" => ParamKind::Weight,
                        "bias" => ParamKind::Bias,
                        other => return Err(Error::Load(format!("unknown param kind {other}"))),
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Load(format!("bad shape {dims}: {e}")))?;
                    let values = parse_values::<F>(lines.next(), name)?;
                    let tensor = Tensor::new(shape, values)
                        .map_err(|e| Error::Load(format!("parameter {name}: {e}")))?;
                    ckpt.params.add(name, kind, tensor);
                }
                "optimizer" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 8 {
                        return Err(Error::Load(format!("bad optimizer header: {line}")));
                    }
                    let num = |s: &str| -> Result<f64> {
                        s.parse().map_err(|_| Error::Load(format!("bad number {s}")))
                    };
                    let algorithm = match f[0] {
                        "adam" => Algorithm::Adam,
                        "sgd_momentum" => Algorithm::SgdMomentum,
                        other => return Err(Error::Load(format!("unknown optimizer {other}"))),
                    };
                    ckpt.optimizer = Some(OptimizerState {
                        algorithm,
                        step_count: f[1]
                            .parse()
                            .map_err(|_| Error::Load(format!("bad step count {}", f[1])))?,
                        learning_rate: num(f[2])?,
                        beta1: num(f[3])?,
                        beta2: num(f[4])?,
                        epsilon: num(f[5])?,
                        momentum: num(f[6])?,
                        l2_coefficient: num(f[7])?,
                        first: Vec::new(),
                        second: Vec::new(),
                    });
                }
                "moment" => {
                    let Some(opt) = ckpt.optimizer.as_mut() else {
                        return Err(Error::Load("moment before optimizer header".into()));
                    };
                    let (which, _) = rest.split_once(' ').unwrap_or((rest, ""));
                    let values = parse_values::<F>(lines.next(), "moment")?;
                    match which {
                        "first" => opt.first.push(values),
                        "second" => opt.second.push(values),
                        other => return Err(Error::Load(format!("unknown moment {other}"))),
                    }
                }
                "end" => {
                    ended = true;
                    break;
                }
                "" => {}
                other => return Err(Error::Load(format!("unexpected record {other}"))),
            }
        }
        if !ended {
            return Err(Error::Load("checkpoint is truncated".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_values<F: Real>(out: &mut String, values: &[F]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn parse_values<F: Real>(line: Option<&str>, what: &str) -> Result<Vec<F>> {
    let line = line.ok_or_else(|| Error::Load(format!("missing values for {what}")))?;
    line.split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<F>()
                .map_err(|_| Error::Load(format!("bad value {s} in {what}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParamStore::new();
        store.add(
            "net.0.kernel",
            ParamKind::Weight,
            Tensor::new(vec![1, 1, 1, 3], vec![0.1, -2.5e-7, 3.0]).unwrap(),
        );
        store.add("net.0.bias", ParamKind::Bias, Tensor::from_vec(vec![1.0 / 3.0, 0.0, -0.0]));
        let mut opt = OptimizerState::adam(1e-4);
        opt.step_count = 12;
        opt.first = vec![vec![0.5; 3], vec![0.25; 3]];
        opt.second = vec![vec![1e-9; 3], vec![2.0; 3]];
        let mut c = Checkpoint::new(store).with_meta("model", "classifier");
        c.optimizer = Some(opt);
        c
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::<f32>::from_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        let id = back.params.find("net.0.bias").unwrap();
        assert_eq!(back.params.get(id).data()[0], 1.0f32 / 3.0);
        assert_eq!(back.meta("model"), Some("classifier"));
        assert_eq!(back.optimizer.unwrap().step_count, 12);
    }

    #[test]
    fn rejects_foreign_or_truncated_files() {
        assert!(Checkpoint::<f32>::from_text("hello\nend\n").is_err());
        let text = sample().to_text();
        let cut = &text[..text.len() - 4];
        assert!(Checkpoint::<f32>::from_text(cut).is_err());
    }
}
