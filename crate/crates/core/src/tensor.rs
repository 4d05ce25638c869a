//! Ragged tensors: ordered collections of named, independently shaped `f64`
//! arrays, such as the full parameter set of a network.
//!
//! The norm used throughout is the dual-norm with `p = q = 2`, which reduces
//! to the square root of the sum of squares of every element of every
//! component. Binary operations require *congruent* operands: same component
//! names, same order, same shapes.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Norms at or below this value are treated as zero by [`RaggedTensor::unit`]
/// and by every optimizer normalization.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Component {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::shape(format!(
                "component {name}: shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "component {name}: shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat L2 norm of this component.
    pub fn norm(&self) -> f64 {
        sum_sq(&self.values).sqrt()
    }

    fn same_layout(&self, other: &Component) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RaggedTensor {
    components: Vec<Component>,
}

impl RaggedTensor {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        for (i, c) in components.iter().enumerate() {
            if components[..i].iter().any(|p| p.name == c.name) {
                return Err(Error::shape(format!("duplicate component name {}", c.name)));
            }
        }
        Ok(Self { components })
    }

    /// Builds a tensor from `(name, shape, values)` triples.
    pub fn from_parts<S: Into<String>>(
        parts: impl IntoIterator<Item = (S, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let components = parts
            .into_iter()
            .map(|(n, s, v)| Component::new(n, s, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }

    /// One-component tensor holding a flat vector.
    pub fn from_vec(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![Component::new(name, vec![n], values)?])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|c| Component::zeros(c.name.clone(), c.shape.clone()))
                .collect(),
        }
    }

    /// Rebuilds a tensor with this tensor's layout from a flat value slice.
    pub fn with_flat_values(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "flat length {} does not match tensor length {}",
                flat.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for c in &mut out.components {
            let n = c.values.len();
            c.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Component] {
        &mut self.components
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Total number of scalar elements.
    pub fn len(&self) -> usize {
        self.components.iter().map(Component::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.components.iter().flat_map(|c| c.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.components.iter_mut().flat_map(|c| c.values.iter_mut())
    }

    /// All elements concatenated in component order.
    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_congruent(&self, other: &RaggedTensor) -> bool {
        self.components.len() == other.components.len()
            && self
                .components
                .iter()
                .zip(&other.components)
                .all(|(a, b)| a.same_layout(b))
    }

    fn check_congruent(&self, other: &RaggedTensor) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "tensors are not congruent: [{}] vs [{}]",
                self.layout_summary(),
                other.layout_summary()
            )))
        }
    }

    fn layout_summary(&self) -> String {
        self.components
            .iter()
            .map(|c| format!("{}{:?}", c.name, c.shape))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Dual-norm at `p = q = 2`: square root of the sum of squares over all
    /// elements of all components.
    pub fn dual_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// This tensor divided by its dual-norm.
    ///
    /// Fails with [`Error::ZeroNorm`] when the norm is at or below
    /// [`ZERO_NORM_GUARD`].
    pub fn unit(&self) -> Result<RaggedTensor> {
        let norm = self.dual_norm();
        if norm <= ZERO_NORM_GUARD {
            return Err(Error::ZeroNorm { norm });
        }
        Ok(self.map(|x| x / norm))
    }

    pub fn component_norms(&self) -> Vec<f64> {
        self.components.iter().map(Component::norm).collect()
    }

    pub fn add(&self, other: &RaggedTensor) -> Result<RaggedTensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RaggedTensor) -> Result<RaggedTensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &RaggedTensor) -> Result<RaggedTensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> RaggedTensor {
        self.map(|x| x * s)
    }

    pub fn abs(&self) -> RaggedTensor {
        self.map(f64::abs)
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &RaggedTensor) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self.iter().zip(other.iter()).map(|(x, y)| x * y).sum())
    }

    /// `dual_norm(a - b)`.
    pub fn difference_norm(&self, other: &RaggedTensor) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> RaggedTensor {
        let mut out = self.clone();
        out.iter_mut().for_each(|x| *x = f(*x));
        out
    }

    pub fn zip_with(
        &self,
        other: &RaggedTensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<RaggedTensor> {
        self.check_congruent(other)?;
        let mut out = self.clone();
        for (c, o) in out.components.iter_mut().zip(&other.components) {
            for (x, y) in c.values.iter_mut().zip(&o.values) {
                *x = f(*x, *y);
            }
        }
        Ok(out)
    }

    /// In-place `self += s * other`.
    pub fn add_scaled(&mut self, other: &RaggedTensor, s: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (c, o) in self.components.iter_mut().zip(&other.components) {
            for (x, y) in c.values.iter_mut().zip(&o.values) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

fn sum_sq(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum()
}

#[derive(Serialize, Deserialize)]
struct ComponentBody {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct ComponentBodyRef<'a> {
    shape: &'a [usize],
    values: &'a [f64],
}

/// Serialized as `{name: {"shape": [...], "values": [...]}, ...}` in
/// component order.
impl Serialize for RaggedTensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.components.len()))?;
        for c in &self.components {
            map.serialize_entry(
                &c.name,
                &ComponentBodyRef {
                    shape: &c.shape,
                    values: &c.values,
                },
            )?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RaggedTensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TensorVisitor;

        impl<'de> Visitor<'de> for TensorVisitor {
            type Value = RaggedTensor;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of component name to {shape, values}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<RaggedTensor, A::Error> {
                let mut components = Vec::new();
                while let Some((name, body)) = access.next_entry::<String, ComponentBody>()? {
                    components.push(
                        Component::new(name, body.shape, body.values)
                            .map_err(serde::de::Error::custom)?,
                    );
                }
                RaggedTensor::new(components).map_err(serde::de::Error::custom)
            }
        }

        deserializer.deserialize_map(TensorVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(parts: &[&[f64]]) -> RaggedTensor {
        RaggedTensor::from_parts(
            parts
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("c{i}"), vec![p.len()], p.to_vec())),
        )
        .unwrap()
    }

    #[test]
    fn worked_example_dual_norm() {
        let u = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0]]);
        assert!((u.dual_norm() - 55f64.sqrt()).abs() < 1e-12);
        assert!((u.dual_norm() - 7.41620).abs() < 1e-5);
    }

    #[test]
    fn dual_norm_simple_cases() {
        assert_eq!(t(&[&[0.0, 0.0], &[0.0]]).dual_norm(), 0.0);
        assert_eq!(t(&[&[3.0, 4.0]]).dual_norm(), 5.0);
    }

    #[test]
    fn unit_normalizes() {
        let u = t(&[&[3.0, 4.0]]).unit().unwrap();
        assert!((u.flatten()[0] - 0.6).abs() < 1e-15);
        assert!((u.flatten()[1] - 0.8).abs() < 1e-15);

        let v = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0]]);
        let uv = v.unit().unwrap();
        let n = 55f64.sqrt();
        for (a, b) in uv.iter().zip(v.iter()) {
            assert!((a - b / n).abs() < 1e-15);
        }
        assert!(uv.is_congruent(&v));
        let uu = uv.unit().unwrap();
        for (a, b) in uu.iter().zip(uv.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_of_zero_is_error() {
        let z = t(&[&[0.0, 1e-13]]);
        assert!(matches!(z.unit(), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn component_norms_per_component() {
        assert_eq!(t(&[&[3.0, 4.0], &[0.0, 5.0]]).component_norms(), vec![5.0, 5.0]);
        assert_eq!(t(&[&[0.0, 0.0]]).component_norms(), vec![0.0]);
        assert_eq!(t(&[&[7.0]]).component_norms(), vec![7.0]);
    }

    #[test]
    fn elementwise_ops() {
        assert_eq!(
            t(&[&[1.0, 2.0]]).add(&t(&[&[3.0, 4.0]])).unwrap().flatten(),
            vec![4.0, 6.0]
        );
        assert_eq!(
            t(&[&[-2.0]]).abs().mul(&t(&[&[3.0]])).unwrap().flatten(),
            vec![6.0]
        );
        assert_eq!(t(&[&[1.0, 2.0]]).scale(0.0).flatten(), vec![0.0, 0.0]);
        assert_eq!(
            t(&[&[1.0, 2.0]]).sub(&t(&[&[3.0, 5.0]])).unwrap().flatten(),
            vec![-2.0, -3.0]
        );
    }

    #[test]
    fn non_congruent_operands_rejected() {
        let a = t(&[&[1.0, 2.0]]);
        let b = t(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch(_))));
        let renamed = RaggedTensor::from_vec("other", vec![1.0, 2.0]).unwrap();
        assert!(matches!(a.sub(&renamed), Err(Error::ShapeMismatch(_))));
        assert!(a.difference_norm(&b).is_err());
    }

    #[test]
    fn difference_norm_cases() {
        let e1 = t(&[&[1.0, 0.0]]);
        let e2 = t(&[&[0.0, 1.0]]);
        let neg = t(&[&[-1.0, 0.0]]);
        assert_eq!(e1.difference_norm(&neg).unwrap(), 2.0);
        assert_eq!(e1.difference_norm(&e1).unwrap(), 0.0);
        assert!((e1.difference_norm(&e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_components_rejected() {
        assert!(Component::new("w", vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Component::new("w", vec![0], vec![]).is_err());
        let dup = RaggedTensor::from_parts([
            ("w", vec![1], vec![1.0]),
            ("w", vec![1], vec![2.0]),
        ]);
        assert!(dup.is_err());
    }

    #[test]
    fn json_layout_and_round_trip() {
        let u = RaggedTensor::from_parts([
            ("W1", vec![2, 1], vec![1.0, -2.5]),
            ("b1", vec![2], vec![0.0, 3.0]),
        ])
        .unwrap();
        let s = serde_json::to_string(&u).unwrap();
        assert_eq!(
            s,
            r#"{"W1":{"shape":[2,1],"values":[1.0,-2.5]},"b1":{"shape":[2],"values":[0.0,3.0]}}"#
        );
        let back: RaggedTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, u);

        let bad = r#"{"W1":{"shape":[2,2],"values":[1.0]}}"#;
        assert!(serde_json::from_str::<RaggedTensor>(bad).is_err());
    }

    #[test]
    fn json_preserves_component_order() {
        let u = RaggedTensor::from_parts([
            ("zeta", vec![1], vec![1.0]),
            ("alpha", vec![1], vec![2.0]),
        ])
        .unwrap();
        let back: RaggedTensor = serde_json::from_str(&serde_json::to_string(&u).unwrap()).unwrap();
        assert_eq!(back.components()[0].name(), "zeta");
    }
}
