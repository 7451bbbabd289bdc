use ndarray::{Array, Dimension, Zip};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the forward output.
pub fn relu_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| if y > 0.0 { g } else { 0.0 })
}

pub fn leaky_relu<D: Dimension>(x: &Array<f64, D>, slope: f64) -> Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// `x` is the forward input.
pub fn leaky_relu_backward<D: Dimension>(
    x: &Array<f64, D>,
    dy: &Array<f64, D>,
    slope: f64,
) -> Array<f64, D> {
    Zip::from(x)
        .and(dy)
        .map_collect(|&x, &g| if x > 0.0 { g } else { slope * g })
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// `y` is the forward output.
pub fn sigmoid_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(y).and(dy).map_collect(|&y, &g| g * y * (1.0 - y))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
