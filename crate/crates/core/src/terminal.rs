//! Terminal operations and their hyperparameter option lists.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;

/// Output widths offered by `linear`.
pub const LINEAR_WIDTHS: [u32; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];
/// Branching factors offered by `clone`, `group` and `concat`.
pub const BRANCH_FACTORS: [u8; 3] = [2, 4, 8];
/// The (kernel, stride, padding) triples offered by `im2col`.
pub const IM2COL_TRIPLES: [(u8, u8, u8); 7] = [
    (1, 1, 0),
    (1, 2, 0),
    (3, 1, 1),
    (3, 2, 1),
    (4, 4, 0),
    (8, 8, 0),
    (16, 16, 0),
];
/// The (kernel, stride, padding) triples offered by `conv1d`.
pub const CONV1D_TRIPLES: [(u8, u8, u8); 4] = [(1, 1, 0), (3, 1, 1), (5, 1, 2), (8, 1, 3)];
/// Output widths offered by `conv1d`.
pub const CONV1D_WIDTHS: [u32; 4] = [32, 64, 128, 256];
/// Permutation orders over the two token-mode dimensions.
pub const PERMUTE_ORDERS_2: [[u8; 2]; 1] = [[2, 1]];
/// Permutation orders over the three image-mode dimensions.
pub const PERMUTE_ORDERS_3: [[u8; 3]; 5] = [[1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];

/// A 1-indexed permutation of two or three feature dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PermuteOrder {
    len: u8,
    idx: [u8; 3],
}

impl PermuteOrder {
    pub fn new(order: &[u8]) -> Option<Self> {
        if !(2..=3).contains(&order.len()) {
            return None;
        }
        let mut seen = [false; 3];
        for &o in order {
            if o == 0 || o as usize > order.len() || seen[o as usize - 1] {
                return None;
            }
            seen[o as usize - 1] = true;
        }
        let mut idx = [0u8; 3];
        idx[..order.len()].copy_from_slice(order);
        Some(Self { len: order.len() as u8, idx })
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.idx[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_identity(&self) -> bool {
        self.as_slice().iter().enumerate().all(|(i, &o)| o as usize == i + 1)
    }

    /// `self` followed by `next`, as a single permutation.
    pub fn then(&self, next: &PermuteOrder) -> Option<PermuteOrder> {
        if self.len != next.len {
            return None;
        }
        // output dim i of `next` reads dim next[i] of the intermediate,
        // which in turn reads dim self[next[i]] of the input.
        let composed: Vec<u8> = next.as_slice().iter().map(|&j| self.idx[j as usize - 1]).collect();
        PermuteOrder::new(&composed)
    }
}

/// Coarse grouping of terminals by the module slot they fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalKind {
    Branch,
    Aggregate,
    Routing,
    Computation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Terminal {
    Clone { b: u8 },
    Group { dim: u8, b: u8 },
    Matmul { scaled: bool },
    Add,
    Concat { dim: u8, b: u8 },
    Identity,
    Im2col { k: u8, s: u8, p: u8 },
    Col2im,
    Permute { order: PermuteOrder },
    Linear { d: u32 },
    Norm,
    Relu,
    Softmax,
    PosEnc,
    Conv1d { k: u8, s: u8, p: u8, d: u32 },
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TerminalError {
    #[error("unknown terminal `{0}`")]
    UnknownName(String),
    #[error("terminal `{name}`: missing hyperparameter `{key}`")]
    Missing { name: String, key: &'static str },
    #[error("terminal `{name}`: hyperparameters {detail} are not an offered option")]
    NotAnOption { name: String, detail: String },
}

impl Terminal {
    pub fn name(&self) -> &'static str {
        match self {
            Terminal::Clone { .. } => "clone",
            Terminal::Group { .. } => "group",
            Terminal::Matmul { .. } => "matmul",
            Terminal::Add => "add",
            Terminal::Concat { .. } => "concat",
            Terminal::Identity => "identity",
            Terminal::Im2col { .. } => "im2col",
            Terminal::Col2im => "col2im",
            Terminal::Permute { .. } => "permute",
            Terminal::Linear { .. } => "linear",
            Terminal::Norm => "norm",
            Terminal::Relu => "relu",
            Terminal::Softmax => "softmax",
            Terminal::PosEnc => "pos-enc",
            Terminal::Conv1d { .. } => "conv1d",
        }
    }

    pub fn kind(&self) -> TerminalKind {
        match self {
            Terminal::Clone { .. } | Terminal::Group { .. } => TerminalKind::Branch,
            Terminal::Matmul { .. } | Terminal::Add | Terminal::Concat { .. } => TerminalKind::Aggregate,
            Terminal::Im2col { .. } | Terminal::Col2im | Terminal::Permute { .. } => TerminalKind::Routing,
            _ => TerminalKind::Computation,
        }
    }

    /// Branching factor opened by a branch op.
    pub fn branch_factor(&self) -> Option<u8> {
        match *self {
            Terminal::Clone { b } | Terminal::Group { b, .. } => Some(b),
            _ => None,
        }
    }

    /// True for operations that never change values: identity and the trivial permutation.
    pub fn is_identity_like(&self) -> bool {
        match self {
            Terminal::Identity => true,
            Terminal::Permute { order } => order.is_identity(),
            _ => false,
        }
    }

    pub fn hyperparams(&self) -> BTreeMap<&'static str, Value> {
        let mut m = BTreeMap::new();
        match *self {
            Terminal::Clone { b } => {
                m.insert("b", Value::from(b));
            }
            Terminal::Group { dim, b } | Terminal::Concat { dim, b } => {
                m.insert("dim", Value::from(dim));
                m.insert("b", Value::from(b));
            }
            Terminal::Matmul { scaled } => {
                m.insert("scaled", Value::from(scaled));
            }
            Terminal::Im2col { k, s, p } => {
                m.insert("k", Value::from(k));
                m.insert("s", Value::from(s));
                m.insert("p", Value::from(p));
            }
            Terminal::Permute { order } => {
                m.insert("o", Value::from(order.as_slice().to_vec()));
            }
            Terminal::Linear { d } => {
                m.insert("d", Value::from(d));
            }
            Terminal::Conv1d { k, s, p, d } => {
                m.insert("k", Value::from(k));
                m.insert("s", Value::from(s));
                m.insert("p", Value::from(p));
                m.insert("d", Value::from(d));
            }
            Terminal::Add
            | Terminal::Identity
            | Terminal::Col2im
            | Terminal::Norm
            | Terminal::Relu
            | Terminal::Softmax
            | Terminal::PosEnc => {}
        }
        m
    }

    /// Rebuild a terminal from its name and hyperparameters, rejecting anything
    /// outside the offered option lists.
    pub fn from_parts(name: &str, hp: &BTreeMap<String, Value>) -> Result<Terminal, TerminalError> {
        let int = |key: &'static str| -> Result<u64, TerminalError> {
            hp.get(key).and_then(Value::as_u64).ok_or(TerminalError::Missing { name: name.to_string(), key })
        };
        let small = |key: &'static str| -> Result<u8, TerminalError> {
            let v = int(key)?;
            u8::try_from(v).map_err(|_| TerminalError::NotAnOption {
                name: name.to_string(),
                detail: format!("{key}={v}"),
            })
        };
        let t = match name {
            "clone" => Terminal::Clone { b: small("b")? },
            "group" => Terminal::Group { dim: small("dim")?, b: small("b")? },
            "concat" => Terminal::Concat { dim: small("dim")?, b: small("b")? },
            "matmul" => Terminal::Matmul {
                scaled: hp
                    .get("scaled")
                    .and_then(Value::as_bool)
                    .ok_or(TerminalError::Missing { name: name.to_string(), key: "scaled" })?,
            },
            "add" => Terminal::Add,
            "identity" => Terminal::Identity,
            "im2col" => Terminal::Im2col { k: small("k")?, s: small("s")?, p: small("p")? },
            "col2im" => Terminal::Col2im,
            "permute" => {
                let arr = hp
                    .get("o")
                    .and_then(Value::as_array)
                    .ok_or(TerminalError::Missing { name: name.to_string(), key: "o" })?;
                let raw: Option<Vec<u8>> = arr.iter().map(|v| v.as_u64().and_then(|x| u8::try_from(x).ok())).collect();
                let order = raw.as_deref().and_then(PermuteOrder::new).ok_or_else(|| TerminalError::NotAnOption {
                    name: name.to_string(),
                    detail: format!("o={}", Value::from(arr.clone())),
                })?;
                Terminal::Permute { order }
            }
            "linear" => Terminal::Linear { d: int("d")? as u32 },
            "norm" => Terminal::Norm,
            "relu" => Terminal::Relu,
            "softmax" => Terminal::Softmax,
            "pos-enc" => Terminal::PosEnc,
            "conv1d" => Terminal::Conv1d { k: small("k")?, s: small("s")?, p: small("p")?, d: int("d")? as u32 },
            other => return Err(TerminalError::UnknownName(other.to_string())),
        };
        if !t.is_listed_option() {
            let detail = t.to_string();
            return Err(TerminalError::NotAnOption { name: name.to_string(), detail });
        }
        Ok(t)
    }

    /// Whether this terminal appears in some variant's option list.
    pub fn is_listed_option(&self) -> bool {
        match *self {
            Terminal::Clone { b } => BRANCH_FACTORS.contains(&b),
            Terminal::Group { dim, b } | Terminal::Concat { dim, b } => (1..=3).contains(&dim) && BRANCH_FACTORS.contains(&b),
            Terminal::Im2col { k, s, p } => IM2COL_TRIPLES.contains(&(k, s, p)),
            Terminal::Permute { order } => {
                let o = order.as_slice();
                PERMUTE_ORDERS_2.iter().any(|x| x[..] == *o) || PERMUTE_ORDERS_3.iter().any(|x| x[..] == *o)
            }
            Terminal::Linear { d } => LINEAR_WIDTHS.contains(&d),
            Terminal::Conv1d { k, s, p, d } => CONV1D_TRIPLES.contains(&(k, s, p)) && CONV1D_WIDTHS.contains(&d),
            _ => true,
        }
    }
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Terminal::Clone { b } => write!(f, "clone(b={b})"),
            Terminal::Group { dim, b } => write!(f, "group(dim={dim},b={b})"),
            Terminal::Matmul { scaled } => write!(f, "matmul(scaled={scaled})"),
            Terminal::Concat { dim, b } => write!(f, "concat(dim={dim},b={b})"),
            Terminal::Im2col { k, s, p } => write!(f, "im2col(k={k},s={s},p={p})"),
            Terminal::Permute { order } => {
                let o: Vec<String> = order.as_slice().iter().map(|x| x.to_string()).collect();
                write!(f, "permute(o=({}))", o.join(","))
            }
            Terminal::Linear { d } => write!(f, "linear(d={d})"),
            Terminal::Conv1d { k, s, p, d } => write!(f, "conv1d(k={k},s={s},p={p},d={d})"),
            _ => f.write_str(self.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_composition() {
        let t = PermuteOrder::new(&[2, 1]).unwrap();
        assert!(t.then(&t).unwrap().is_identity());
        let a = PermuteOrder::new(&[2, 3, 1]).unwrap();
        let b = PermuteOrder::new(&[3, 1, 2]).unwrap();
        assert!(a.then(&b).unwrap().is_identity());
        assert!(PermuteOrder::new(&[1, 1]).is_none());
        assert!(PermuteOrder::new(&[1, 2, 4]).is_none());
    }

    #[test]
    fn parts_roundtrip() {
        let all = [
            Terminal::Clone { b: 4 },
            Terminal::Group { dim: 3, b: 8 },
            Terminal::Matmul { scaled: true },
            Terminal::Permute { order: PermuteOrder::new(&[3, 1, 2]).unwrap() },
            Terminal::Conv1d { k: 5, s: 1, p: 2, d: 128 },
            Terminal::PosEnc,
        ];
        for t in all {
            let hp: BTreeMap<String, Value> = t.hyperparams().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            assert_eq!(Terminal::from_parts(t.name(), &hp).unwrap(), t);
        }
    }

    #[test]
    fn rejects_unlisted() {
        let mut hp = BTreeMap::new();
        hp.insert("d".to_string(), Value::from(17));
        assert!(matches!(Terminal::from_parts("linear", &hp), Err(TerminalError::NotAnOption { .. })));
        assert_eq!(
            Terminal::from_parts("conv3d", &BTreeMap::new()),
            Err(TerminalError::UnknownName("conv3d".into()))
        );
    }
}
