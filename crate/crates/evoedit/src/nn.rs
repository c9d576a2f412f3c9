//! Named parameter sets and the few layer helpers the models share.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var, GATHER_ZERO};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by name; iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// `self += scale * other`, name by name.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (k, v) in self.map.iter_mut() {
            let o = &other.map[k];
            for (a, b) in v.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.map.values_mut() {
            for a in v.data_mut() {
                *a *= c;
            }
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.map.values().flat_map(|v| v.data().iter()).map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.map
            .iter()
            .map(|(k, v)| v.max_abs_diff(&other.map[k]))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and exact `f64` bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound {
            graph: g,
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), if trainable { g.param(v) } else { g.constant(v) }))
                .collect(),
        }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        for (k, v) in &self.map {
            c.push(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Every record whose name starts with `prefix`, with the prefix removed.
    pub fn read_from(c: &Container, prefix: &str) -> Params {
        Params {
            map: c
                .records
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &Params) -> Result<()> {
        if self.map.len() != reference.map.len() {
            return Err(Error::Format(format!(
                "{} parameters, expected {}",
                self.map.len(),
                reference.map.len()
            )));
        }
        for (k, v) in &reference.map {
            match self.map.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                Some(t) => {
                    return Err(Error::Format(format!("{k}: shape {:?}, expected {:?}", t.shape(), v.shape())))
                }
                None => return Err(Error::Format(format!("missing parameter {k}"))),
            }
        }
        Ok(())
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Collects the gradient of every bound parameter (zeros where none flowed).
    pub fn grads(&self, grads: &Gradients) -> Params {
        Params {
            map: self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect(),
        }
    }

    /// Parameters that actually received a gradient.
    pub fn touched(&self, grads: &Gradients) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, v)| grads.get(**v).is_some())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn linear(&self, x: Var<'g>, name: &str) -> Var<'g> {
        x.matmul(self.get(&format!("{name}.w"))).add_row(self.get(&format!("{name}.b")))
    }
}

/// Adds `name.w` (`fan_in × fan_out`, scaled normal) and a zero `name.b`.
pub fn init_linear<R: Rng>(p: &mut Params, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    let std = gain / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Gather index turning a `(n·h·w) × c` grid stack into `(n·h·w) × 9c`
/// 3×3 neighborhoods with zero padding.
pub fn conv3x3_index(n: usize, h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(n * h * w * 9 * c);
    for b in 0..n {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (ny, nx) = (y + dy, x + dx);
                        let inside = ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((b * h + ny as usize) * w + nx as usize) * c + ch
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// 3×3 same-padding convolution over `n` stacked `h × w` grids, weights
/// `name.w` of shape `9c × c_out`.
pub fn conv3x3<'g>(b: &Bound<'g>, x: Var<'g>, name: &str, index: &Arc<Vec<usize>>) -> Var<'g> {
    let rows = x.shape()[0];
    let c = x.shape()[1];
    let cols = x.gather(index.clone(), &[rows, 9 * c]);
    b.linear(cols, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, w, c, co) = (3, 4, 2, 3);
        let mut p = Params::new();
        init_linear(&mut p, &mut rng, "k", 9 * c, co, 1.0);
        let x = Tensor::randn(&[h * w, c], 1.0, &mut rng);
        let g = Graph::new();
        let bd = p.bind(&g, false);
        let y = conv3x3(&bd, g.constant(&x), "k", &conv3x3_index(1, h, w, c)).value();
        let wt = p.get("k.w").unwrap().data();
        for yy in 0..h {
            for xx in 0..w {
                for o in 0..co {
                    let mut s = 0.0;
                    for (t, (dy, dx)) in (-1..=1i64).flat_map(|a| (-1..=1i64).map(move |b| (a, b))).enumerate() {
                        let (ny, nx) = (yy as i64 + dy, xx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        for ch in 0..c {
                            s += x.data()[(ny as usize * w + nx as usize) * c + ch] * wt[(t * c + ch) * co + o];
                        }
                    }
                    assert!((y.data()[(yy * w + xx) * co + o] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hash_tracks_values() {
        let mut p = Params::new();
        p.insert("a", Tensor::scalar(1.0));
        let h = p.content_hash();
        assert_eq!(h, p.clone().content_hash());
        p.get_mut("a").unwrap().data_mut()[0] = 1.0 + 1e-15;
        assert_ne!(h, p.content_hash());
    }
}
