use nalgebra::RealField;

/// Floating-point scalar the estimation stack is generic over.
///
/// Everything numeric in the fitting pipeline is written against this trait so the
/// same code runs in `f64` (the default, see the aliases at the crate root) and `f32`.
pub trait Real: RealField + Copy + Send + Sync + 'static {
    /// Converts an `f64` literal or intermediate into `Self`.
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn half() -> Self {
        Self::of(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::of(2.0)
    }

    #[inline]
    fn epsilon() -> Self {
        Self::default_epsilon()
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
