//! Gradient-check coverage: one small network per layer kind × activation
//! (plus stride/padding variants and a miniature segmenter), each checked
//! against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::network::Network;
use super::spec::{Activation, LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use super::train::gradient_check;
use crate::error::Result;

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub case: String,
    pub max_relative_error: f64,
    /// Smallest |pre-activation| of any relu unit for the chosen input.
    pub relu_margin: f64,
}

/// The covered networks, all initialized from `seed`.
pub fn gradcheck_cases(seed: u64) -> Vec<(String, NetworkSpec)> {
    use Activation::*;
    use LayerSpec as L;
    let spec = |input_shape: Vec<usize>, layers| NetworkSpec { input_shape, layers, seed };
    let mut cases = Vec::new();
    for act in [Relu, Sigmoid, Linear] {
        let n = act.name();
        cases.push((format!("dense_{n}"), spec(vec![4], vec![L::dense(4, 5, act), L::dense(5, 2, Linear)])));
        cases.push((
            format!("conv_{n}_stride1_pad1"),
            spec(vec![2, 5, 5], vec![L::conv(2, 3, 3, 1, 1, act), L::Flatten, L::dense(75, 2, Linear)]),
        ));
        cases.push((
            format!("conv_{n}_stride2_pad0"),
            spec(vec![2, 7, 7], vec![L::conv(2, 3, 3, 2, 0, act), L::Flatten, L::dense(27, 2, Linear)]),
        ));
        cases.push((
            format!("conv_{n}_stride2_pad1"),
            spec(vec![2, 6, 6], vec![L::conv(2, 3, 3, 2, 1, act), L::Flatten, L::dense(27, 2, Linear)]),
        ));
    }
    cases.push((
        "upsample2x".into(),
        spec(
            vec![2, 3, 3],
            vec![L::conv(2, 2, 3, 1, 1, Linear), L::Upsample2x, L::conv(2, 1, 3, 1, 1, Linear), L::Flatten, L::dense(36, 2, Linear)],
        ),
    ));
    cases.push(("segmenter_8x8".into(), NetworkSpec::segmenter(8, &[2, 3], seed)));
    cases
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

/// Runs every case. For networks with relu units the input is the draw (of
/// 50) whose pre-activations stay furthest from the kink, since central
/// differences across a kink are meaningless.
pub fn gradcheck_suite(seed: u64, step: f64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for (case, spec) in gradcheck_cases(seed) {
        let net = Network::init(spec)?;
        let out_shape = net.output_shape().to_vec();
        let mut best: Option<(Tensor, f64)> = None;
        for _ in 0..50 {
            let x = random_tensor(&mut rng, net.input_shape());
            let margin = net.relu_margin(&x)?;
            if best.as_ref().is_none_or(|(_, m)| margin > *m) {
                best = Some((x, margin));
            }
            if margin.is_infinite() {
                break;
            }
        }
        let (x, relu_margin) = best.expect("at least one draw");
        let y = random_tensor(&mut rng, &out_shape);
        let max_relative_error = gradient_check(&net, &x, &y, step)?;
        results.push(GradcheckResult { case, max_relative_error, relu_margin });
    }
    Ok(results)
}
