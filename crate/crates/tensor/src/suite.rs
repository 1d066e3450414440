//! Finite-difference checks over every primitive, on random `f64` inputs.
//!
//! Each case reduces the primitive's output to a scalar by a weighted sum
//! with fixed random weights, so every output coordinate contributes.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

type CaseFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    body: CaseFn,
    kink_guard: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Small deterministic generator so the suite needs no RNG dependency.
struct SplitMix(u64);

impl SplitMix {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let data = (0..numel(shape)).map(|_| self.next_f64()).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

/// Weighted sum with weights derived from the output shape alone.
fn reduce(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = SplitMix(numel(&shape) as u64 * 7919 + shape.len() as u64);
    let w = rng.tensor(&shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

const CASES: &[Case] = &[
    Case {
        name: "add",
        shapes: &[&[3, 4], &[3, 4]],
        body: |t, v| {
            let o = t.add(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "add (leading broadcast)",
        shapes: &[&[2, 3, 4], &[4]],
        body: |t, v| {
            let o = t.add(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "sub",
        shapes: &[&[5], &[1]],
        body: |t, v| {
            let o = t.sub(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "mul",
        shapes: &[&[2, 3, 4], &[3, 4]],
        body: |t, v| {
            let o = t.mul(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "scale",
        shapes: &[&[6]],
        body: |t, v| {
            let o = t.scale(v[0], -1.7);
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "matmul",
        shapes: &[&[2, 3, 4], &[4, 5]],
        body: |t, v| {
            let o = t.matmul(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "matmul (batched)",
        shapes: &[&[2, 3, 4], &[2, 4, 2]],
        body: |t, v| {
            let o = t.matmul(v[0], v[1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "conv3d (k3 s1 p1)",
        shapes: &[&[1, 2, 4, 3, 4], &[2, 2, 3, 3, 3]],
        body: |t, v| {
            let o = t.conv3d(v[0], v[1], None, 1, 1)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "conv3d (k3 s2 p1, bias)",
        shapes: &[&[2, 1, 5, 4, 4], &[3, 1, 3, 3, 3], &[3]],
        body: |t, v| {
            let o = t.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "conv3d (k2 s2 p0)",
        shapes: &[&[1, 2, 4, 4, 4], &[3, 2, 2, 2, 2]],
        body: |t, v| {
            let o = t.conv3d(v[0], v[1], None, 2, 0)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "conv3d (pointwise)",
        shapes: &[&[2, 3, 2, 2, 3], &[4, 3, 1, 1, 1], &[4]],
        body: |t, v| {
            let o = t.conv3d(v[0], v[1], Some(v[2]), 1, 0)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "relu",
        shapes: &[&[12]],
        body: |t, v| {
            let o = t.relu(v[0]);
            reduce(t, o)
        },
        kink_guard: Some(1e-3),
    },
    Case {
        name: "gelu",
        shapes: &[&[12]],
        body: |t, v| {
            let x = t.scale(v[0], 3.0);
            let o = t.gelu(x);
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "sigmoid",
        shapes: &[&[12]],
        body: |t, v| {
            let x = t.scale(v[0], 4.0);
            let o = t.sigmoid(x);
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "softmax",
        shapes: &[&[2, 3, 4]],
        body: |t, v| {
            let o = t.softmax(v[0], 1)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "layernorm (last axis)",
        shapes: &[&[3, 8]],
        body: |t, v| {
            let o = t.layernorm(v[0], 1, 1e-5)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "layernorm (channel axis)",
        shapes: &[&[2, 4, 2, 2, 2]],
        body: |t, v| {
            let o = t.layernorm(v[0], 1, 1e-5)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "reshape",
        shapes: &[&[2, 6]],
        body: |t, v| {
            let o = t.reshape(v[0], &[3, 4])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "transpose",
        shapes: &[&[2, 3, 4]],
        body: |t, v| {
            let o = t.permute(v[0], &[2, 0, 1])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "concat",
        shapes: &[&[2, 3, 2], &[2, 1, 2]],
        body: |t, v| {
            let o = t.concat(&[v[0], v[1], v[0]], 1)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "slice",
        shapes: &[&[3, 5, 2]],
        body: |t, v| {
            let o = t.slice(v[0], 1, 1, 3)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "embedding_lookup",
        shapes: &[&[4, 3]],
        body: |t, v| {
            let o = t.embedding(v[0], &[2, 0, 2, 3])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "mean",
        shapes: &[&[7]],
        body: |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        },
        kink_guard: None,
    },
    Case {
        name: "scaled_dot_product_attention",
        shapes: &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]],
        body: |t, v| {
            let o = t.attention(v[0], v[1], v[2])?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "upsample_nearest3d",
        shapes: &[&[1, 2, 2, 1, 2]],
        body: |t, v| {
            let o = t.upsample_nearest3d(v[0], 2)?;
            reduce(t, o)
        },
        kink_guard: None,
    },
    Case {
        name: "composite (attention block)",
        shapes: &[&[1, 4, 6], &[6, 6], &[6]],
        body: |t, v| {
            let n = t.layernorm(v[0], 2, 1e-5)?;
            let h = t.matmul(n, v[1])?;
            let h = t.add(h, v[2])?;
            let a = t.attention(h, h, h)?;
            let g = t.gelu(a);
            let s = t.softmax(g, 2)?;
            let r = t.add(s, v[0])?;
            reduce(t, r)
        },
        kink_guard: None,
    },
];

/// Runs every primitive case `trials` times with fresh random inputs.
pub fn primitive_gradient_suite(seed: u64, trials: usize, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = SplitMix(seed);
    let mut results = Vec::with_capacity(CASES.len());
    for case in CASES {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| rng.tensor(s)).collect();
            let report = grad_check(
                case.body,
                &inputs,
                GradCheckOptions {
                    eps,
                    kink_guard: case.kink_guard,
                },
            )?;
            worst = worst.max(report.max_rel_error);
            if report.max_rel_error.is_nan() {
                worst = f64::NAN;
            }
        }
        results.push(PrimitiveCheck {
            name: case.name,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(results)
}
