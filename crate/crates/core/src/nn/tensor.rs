use serde::{Deserialize, Serialize};

/// A dense row-major array of `f64` with a recorded shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A structure owning named tensors.
///
/// The visiting order is fixed, so two values of the same type (parameters
/// and their gradients) line up tensor by tensor.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// A copy with every tensor zeroed, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.named_tensors();
        for ((_, dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(&s.data) {
                *d += scale * v;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.named_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// All values concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }
}

/// Joins a prefix and a field name with a dot.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::nn::Tensor)>) {
                $( $crate::nn::tensor::VisitField::visit_field(&self.$field, &$crate::nn::tensor::join(prefix, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::nn::Tensor)>) {
                $( $crate::nn::tensor::VisitField::visit_field_mut(&mut self.$field, &$crate::nn::tensor::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

/// Field-level dispatch used by `impl_parameters!`.
pub(crate) trait VisitField {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_field_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>);
}

impl VisitField for Tensor {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((name.to_string(), self));
    }
    fn visit_field_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((name.to_string(), self));
    }
}

impl<T: Parameters> VisitField for T {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.visit(name, out);
    }
    fn visit_field_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.visit_mut(name, out);
    }
}

impl<T: VisitField> VisitField for Vec<T> {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit_field(&join(name, &i.to_string()), out);
        }
    }
    fn visit_field_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_field_mut(&join(name, &i.to_string()), out);
        }
    }
}
