// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared test oracles: central finite differences and per-op gradient cases.

#![allow(dead_code)]

use leakguard_core::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between reverse-mode and central-difference
/// gradients over all inputs. `f` must build a scalar.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(*v).numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic[ti]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(1e-8);
        worst = worst.max(diff / denom);
    }
    worst
}

/// Contracts a non-scalar output with a fixed random tensor so every output
/// coordinate carries a distinct upstream gradient.
pub fn contract(g: &mut Graph, y: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Name, instance count checked, worst relative error.
pub type OpReport = (&'static str, usize, f64);

/// Runs `instances` random finite-difference checks for every differentiable
/// graph operation.
pub fn check_all_ops(instances: usize, seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run =
        |name: &'static str, rng: &mut ChaCha8Rng, case: &dyn Fn(&mut ChaCha8Rng) -> f64| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(case(rng));
            }
            reports.push((name, instances, worst));
        };

    run("matmul", &mut rng, &|rng| {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let w = randn(rng, &[m, n]);
        grad_check(&[randn(rng, &[m, k]), randn(rng, &[k, n])], &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("matmul_t", &mut rng, &|rng| {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let w = randn(rng, &[m, n]);
        grad_check(&[randn(rng, &[m, k]), randn(rng, &[n, k])], &|g, v| {
            let y = g.matmul_t(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("add", &mut rng, &|rng| {
        let w = randn(rng, &[3, 2]);
        grad_check(&[randn(rng, &[3, 2]), randn(rng, &[3, 2])], &|g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("sub", &mut rng, &|rng| {
        let w = randn(rng, &[4]);
        grad_check(&[randn(rng, &[4]), randn(rng, &[4])], &|g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("mul", &mut rng, &|rng| {
        let w = randn(rng, &[2, 3]);
        grad_check(&[randn(rng, &[2, 3]), randn(rng, &[2, 3])], &|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("add_row", &mut rng, &|rng| {
        let w = randn(rng, &[3, 4]);
        grad_check(&[randn(rng, &[3, 4]), randn(rng, &[4])], &|g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            contract(g, y, &w)
        })
    });
    run("scale", &mut rng, &|rng| {
        let s: f64 = rng.gen_range(-2.0..2.0);
        let w = randn(rng, &[5]);
        grad_check(&[randn(rng, &[5])], &|g, v| {
            let y = g.scale(v[0], s);
            contract(g, y, &w)
        })
    });
    run("add_scalar", &mut rng, &|rng| {
        let s: f64 = rng.gen_range(-2.0..2.0);
        let w = randn(rng, &[5]);
        grad_check(&[randn(rng, &[5])], &|g, v| {
            let y = g.add_scalar(v[0], s);
            contract(g, y, &w)
        })
    });
    run("gelu", &mut rng, &|rng| {
        let w = randn(rng, &[6]);
        grad_check(&[Tensor::randn(&[6], 2.0, rng)], &|g, v| {
            let y = g.gelu(v[0]);
            contract(g, y, &w)
        })
    });
    run("layer_norm", &mut rng, &|rng| {
        let w = randn(rng, &[3, 5]);
        grad_check(
            &[randn(rng, &[3, 5]), randn(rng, &[5]), randn(rng, &[5])],
            &|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                contract(g, y, &w)
            },
        )
    });
    run("embedding", &mut rng, &|rng| {
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let w = randn(rng, &[4, 3]);
        grad_check(&[randn(rng, &[5, 3])], &|g, v| {
            let y = g.embedding(v[0], &ids).unwrap();
            contract(g, y, &w)
        })
    });
    run("causal_attention", &mut rng, &|rng| {
        let l1 = rng.gen_range(1..4);
        let l2 = rng.gen_range(1..4);
        let n = l1 + l2;
        let w = randn(rng, &[n, 4]);
        let segs = vec![(0, l1), (l1, l2)];
        grad_check(&[randn(rng, &[n, 12])], &|g, v| {
            let y = g.causal_attention(v[0], 2, &segs).unwrap();
            contract(g, y, &w)
        })
    });
    run("cross_entropy", &mut rng, &|rng| {
        let targets: Vec<Option<usize>> = (0..4)
            .map(|i| {
                if i == 3 {
                    None
                } else {
                    Some(rng.gen_range(0..5))
                }
            })
            .collect();
        grad_check(&[randn(rng, &[4, 5])], &|g, v| {
            g.cross_entropy(v[0], &targets).unwrap()
        })
    });
    run("topk", &mut rng, &|rng| {
        // Resample until the k-th and (k+1)-th values are well separated so
        // the finite-difference step never crosses the selection boundary.
        let x = loop {
            let x = randn(rng, &[2, 6]);
            let separated = (0..2).all(|r| {
                let mut row = x.row(r).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                row[2] - row[3] > 1e-3
            });
            if separated {
                break x;
            }
        };
        let w = randn(rng, &[2, 6]);
        grad_check(&[x], &|g, v| {
            let y = g.topk(v[0], 3, None).unwrap();
            contract(g, y, &w)
        })
    });
    run("topk_masked", &mut rng, &|rng| {
        let allowed = [true, false, true, true, false, true];
        let x = loop {
            let x = randn(rng, &[6]);
            let mut vals: Vec<f64> = (0..6)
                .filter(|&i| allowed[i])
                .map(|i| x.data()[i])
                .collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            if vals[1] - vals[2] > 1e-3 {
                break x;
            }
        };
        let w = randn(rng, &[6]);
        grad_check(&[x], &|g, v| {
            let y = g.topk(v[0], 2, Some(&allowed)).unwrap();
            contract(g, y, &w)
        })
    });
    run("sum", &mut rng, &|rng| {
        grad_check(&[randn(rng, &[3, 3])], &|g, v| g.sum(v[0]))
    });
    run("sum_squares", &mut rng, &|rng| {
        grad_check(&[randn(rng, &[3, 3])], &|g, v| g.sum_squares(v[0]))
    });
    run("bce_with_logits", &mut rng, &|rng| {
        let labels: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        grad_check(&[Tensor::randn(&[5], 3.0, rng)], &|g, v| {
            g.bce_with_logits(v[0], &labels).unwrap()
        })
    });
    reports
}
