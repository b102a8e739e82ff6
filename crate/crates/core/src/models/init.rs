use crate::numeric::rng::{self, stream, Rng};
use crate::numeric::{ParamId, ParamStore, Tensor};

pub const INIT_RANGE: f64 = 0.05;

/// Seeded parameter initializer. Draws happen in registration order,
/// row-major within each tensor, and values are rounded to `f32`.
pub struct Init {
    rng: Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: rng::seeded(seed, stream::INIT),
        }
    }

    /// Uniform in `(-0.05, 0.05)`.
    pub fn uniform(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| rng::uniform(&mut self.rng, -INIT_RANGE, INIT_RANGE) as f32 as f64)
            .collect();
        store.add(name, Tensor::new(shape, values).expect("finite init"))
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        store.add(name, Tensor::new(shape, vec![1.0; n]).expect("finite init"))
    }
}
