//! Parameter sets generic over the handle type, so one struct serves as
//! concrete weights (`Matrix<F>`) and as recorded tape leaves (`Var`).

use rand::Rng;

use crate::numerics::{Matrix, Scalar};

macro_rules! param_set {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $($(#[$fmeta])* pub $field: T,)+
        }

        impl<T> $name<T> {
            /// Field names in canonical (serialization) order.
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<$name<U>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)+ })
            }

            pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
                [$((stringify!($field), &self.$field)),+].into_iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut T)> {
                [$((stringify!($field), &mut self.$field)),+].into_iter()
            }
        }
    };
}

pub(crate) use param_set;

/// Uniform in `±1/sqrt(rows)`, the fan-in of a `rows x cols` weight.
pub fn init_weight<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<F> {
    Matrix::random_uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

pub fn ones_row<F: Scalar>(n: usize) -> Matrix<F> {
    Matrix::filled(1, n, F::one())
}

pub fn zeros_row<F: Scalar>(n: usize) -> Matrix<F> {
    Matrix::zeros(1, n)
}
