use super::matrix::Mat;
use serde::{Deserialize, Serialize};

/// Anything that owns named parameter arrays in a fixed order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named offsets of each array inside a flattened parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn of<P: Parameterized + ?Sized>(p: &P, prefix: &str) -> Self {
        let mut layout = ParamLayout::default();
        p.visit(prefix, &mut |name, m| layout.push(name, m.len()));
        layout
    }

    pub fn push(&mut self, name: String, len: usize) {
        let offset = self.total();
        self.blocks.push(ParamBlock { name, offset, len });
    }

    pub fn append(&mut self, other: ParamLayout) {
        for b in other.blocks {
            self.push(b.name, b.len);
        }
    }

    pub fn total(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    /// Block containing flat index `i`.
    pub fn block_at(&self, i: usize) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| i >= b.offset && i < b.offset + b.len)
    }
}

pub fn flatten<P: Parameterized + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| out.extend_from_slice(&m.data));
    out
}

/// Writes `flat` back into `p`; `flat` must match the layout of `p`.
pub fn assign<P: Parameterized + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, m| {
        let n = m.len();
        m.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "parameter vector length mismatch");
}
