//! Plain-text instance files.
//!
//! ```text
//! fpdiff-instance 1
//! kind = ridge
//! lambda = 0.5
//! alpha = 0.01
//! matrix design 2 2
//! 1 0
//! 0 1
//! vector targets 2 1 -1
//! ```
//!
//! Scalars are `key = value`; a matrix header is followed by one line per row;
//! vector entries follow the length on the same line. `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problems::logistic::{LogisticNewton, LossKind};
use crate::problems::qp::QpInstance;
use crate::problems::ridge::WeightedRidge;

const MAGIC: &str = "fpdiff-instance 1";

#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Quadratic { q: Matrix, alpha: f64 },
    Ridge { problem: WeightedRidge, alpha: f64 },
    Logistic(LogisticNewton),
    Qp(QpInstance),
}

impl Instance {
    pub fn kind(&self) -> &'static str {
        match self {
            Instance::Quadratic { .. } => "quadratic",
            Instance::Ridge { .. } => "ridge",
            Instance::Logistic(_) => "logistic",
            Instance::Qp(_) => "qp",
        }
    }
}

/// An instance with optional parameter vector `theta` and start `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFile {
    pub instance: Instance,
    pub theta: Option<Vector>,
    pub x0: Option<Vector>,
}

#[derive(Default)]
struct Sections {
    scalars: BTreeMap<String, (usize, String)>,
    matrices: BTreeMap<String, Matrix>,
    vectors: BTreeMap<String, Vector>,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_floats(line: usize, tokens: &[&str]) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| perr(line, format!("bad number {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(line, format!("non-finite number {t:?}")))
            }
        })
        .collect()
}

fn parse_usize(line: usize, t: &str) -> Result<usize> {
    t.parse().map_err(|_| perr(line, format!("bad size {t:?}")))
}

impl Sections {
    fn scalar(&self, key: &str) -> Result<f64> {
        let (line, raw) = self
            .scalars
            .get(key)
            .ok_or_else(|| perr(0, format!("missing scalar {key:?}")))?;
        let v = parse_floats(*line, &[raw.as_str()])?;
        Ok(v[0])
    }

    fn matrix(&mut self, key: &str) -> Result<Matrix> {
        self.matrices
            .remove(key)
            .ok_or_else(|| perr(0, format!("missing matrix {key:?}")))
    }

    fn vector(&mut self, key: &str) -> Result<Vector> {
        self.vectors
            .remove(key)
            .ok_or_else(|| perr(0, format!("missing vector {key:?}")))
    }
}

fn parse_sections(text: &str) -> Result<Sections> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((n, l)) => return Err(perr(n, format!("expected {MAGIC:?}, found {l:?}"))),
        None => return Err(perr(0, "empty instance file")),
    }
    let mut out = Sections::default();
    while let Some((n, l)) = lines.next() {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens[0] {
            "matrix" => {
                if tokens.len() != 4 {
                    return Err(perr(n, "expected `matrix NAME ROWS COLS`"));
                }
                let (rows, cols) = (parse_usize(n, tokens[2])?, parse_usize(n, tokens[3])?);
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (rn, rl) = lines
                        .next()
                        .ok_or_else(|| perr(n, format!("matrix {} ends after {r} rows", tokens[1])))?;
                    let row: Vec<&str> = rl.split_whitespace().collect();
                    if row.len() != cols {
                        return Err(perr(rn, format!("expected {cols} entries, found {}", row.len())));
                    }
                    data.extend(parse_floats(rn, &row)?);
                }
                let m = Matrix::new(rows, cols, data).map_err(|e| perr(n, e.to_string()))?;
                out.matrices.insert(tokens[1].to_string(), m);
            }
            "vector" => {
                if tokens.len() < 3 {
                    return Err(perr(n, "expected `vector NAME LEN entries...`"));
                }
                let len = parse_usize(n, tokens[2])?;
                if tokens.len() - 3 != len {
                    return Err(perr(n, format!("expected {len} entries, found {}", tokens.len() - 3)));
                }
                out.vectors
                    .insert(tokens[1].to_string(), Vector::from(parse_floats(n, &tokens[3..])?));
            }
            _ => {
                let (key, value) = l
                    .split_once('=')
                    .ok_or_else(|| perr(n, format!("unrecognised line {l:?}")))?;
                out.scalars
                    .insert(key.trim().to_string(), (n, value.trim().to_string()));
            }
        }
    }
    Ok(out)
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    out.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn write_vector(out: &mut String, name: &str, v: &Vector) {
    out.push_str(&format!("vector {name} {}", v.dim()));
    for x in v.iter() {
        out.push_str(&format!(" {x:e}"));
    }
    out.push('\n');
}

impl InstanceFile {
    pub fn new(instance: Instance) -> Self {
        Self {
            instance,
            theta: None,
            x0: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\nkind = {}\n", self.instance.kind());
        match &self.instance {
            Instance::Quadratic { q, alpha } => {
                out.push_str(&format!("alpha = {alpha:e}\n"));
                write_matrix(&mut out, "Q", q);
            }
            Instance::Ridge { problem, alpha } => {
                out.push_str(&format!("alpha = {alpha:e}\nlambda = {:e}\n", problem.lambda));
                write_matrix(&mut out, "design", &problem.design);
                write_vector(&mut out, "targets", &problem.targets);
            }
            Instance::Logistic(p) => {
                let loss = match p.loss {
                    LossKind::Logistic => "logistic",
                    LossKind::Squared => "squared",
                };
                out.push_str(&format!("lambda = {:e}\nloss = {loss}\n", p.lambda));
                write_matrix(&mut out, "design", &p.design);
                write_vector(&mut out, "labels", &p.labels);
            }
            Instance::Qp(p) => {
                write_matrix(&mut out, "Q", &p.q);
                write_vector(&mut out, "c", &p.c);
                write_matrix(&mut out, "A", &p.a);
                write_matrix(&mut out, "G", &p.g);
                write_vector(&mut out, "h", &p.h);
            }
        }
        if let Some(t) = &self.theta {
            write_vector(&mut out, "theta", t);
        }
        if let Some(x) = &self.x0 {
            write_vector(&mut out, "x0", x);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = parse_sections(text)?;
        let kind = s
            .scalars
            .get("kind")
            .map(|(_, k)| k.clone())
            .ok_or_else(|| perr(0, "missing `kind`"))?;
        let instance = match kind.as_str() {
            "quadratic" => Instance::Quadratic {
                q: s.matrix("Q")?,
                alpha: s.scalar("alpha")?,
            },
            "ridge" => Instance::Ridge {
                problem: WeightedRidge::new(s.matrix("design")?, s.vector("targets")?, s.scalar("lambda")?)?,
                alpha: s.scalar("alpha")?,
            },
            "logistic" => {
                let loss = match s.scalars.get("loss").map(|(_, v)| v.as_str()) {
                    None | Some("logistic") => LossKind::Logistic,
                    Some("squared") => LossKind::Squared,
                    Some(other) => return Err(perr(0, format!("unknown loss {other:?}"))),
                };
                Instance::Logistic(
                    LogisticNewton::new(s.matrix("design")?, s.vector("labels")?, s.scalar("lambda")?)?.with_loss(loss),
                )
            }
            "qp" => Instance::Qp(QpInstance::new(
                s.matrix("Q")?,
                s.vector("c")?,
                s.matrix("A")?,
                s.matrix("G")?,
                s.vector("h")?,
            )?),
            other => return Err(perr(0, format!("unknown kind {other:?}"))),
        };
        Ok(Self {
            instance,
            theta: s.vectors.remove("theta"),
            x0: s.vectors.remove("x0"),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())
            .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::data::{synthetic_logistic, synthetic_qp, synthetic_ridge};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(file: &InstanceFile) {
        let back = InstanceFile::parse(&file.to_text()).unwrap();
        assert_eq!(&back, file);
    }

    #[test]
    fn all_kinds_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ridge = synthetic_ridge(&mut rng, 6, 3, 4.0, 0.5).unwrap();
        let mut f = InstanceFile::new(Instance::Ridge {
            problem: ridge,
            alpha: 0.1,
        });
        f.theta = Some(Vector::from_fn(6, |i| 1.0 / (i + 1) as f64));
        roundtrip(&f);
        let logi = synthetic_logistic(&mut rng, 8, 3, 0.3)
            .unwrap()
            .with_loss(LossKind::Squared);
        roundtrip(&InstanceFile::new(Instance::Logistic(logi)));
        let (qp, theta) = synthetic_qp(&mut rng, 3, 1, 0);
        let mut f = InstanceFile::new(Instance::Qp(qp));
        f.theta = Some(theta);
        f.x0 = Some(Vector::from(vec![1e-300, -2.5e17, 0.1]));
        roundtrip(&f);
        roundtrip(&InstanceFile::new(Instance::Quadratic {
            q: Matrix::from_diag(&[1.0, 2.0]),
            alpha: 0.5,
        }));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = InstanceFile::parse("fpdiff-instance 1\nkind = quadratic\nalpha = 0.1\nmatrix Q 2 2\n1 0\n0\n")
            .unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 6,
                msg: "expected 2 entries, found 1".into()
            }
        );
        assert!(InstanceFile::parse("hello").unwrap_err().is_config());
        let err = InstanceFile::parse("fpdiff-instance 1\nkind = qp\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# header\nfpdiff-instance 1\n\nkind = quadratic # inline\nalpha = 0.25\nmatrix Q 1 1\n  2\n";
        let f = InstanceFile::parse(text).unwrap();
        assert_eq!(
            f.instance,
            Instance::Quadratic {
                q: Matrix::from_diag(&[2.0]),
                alpha: 0.25
            }
        );
    }
}
