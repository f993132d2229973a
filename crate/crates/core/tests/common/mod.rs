#![allow(dead_code)]

use aatracker::losses::{
    aatracker_objective, anatomy_loss, baseline_objective, consistency_loss, huber_smoothness, kld_loss,
    vae_consistency_loss, AnatomyInputs, ImageNorm, LossWeights, Region,
};
use aatracker::shape_prior::{VaeArch, VaeModel};
use aatracker::tensor::{gradient_check, Graph, Tensor, Unary, Var};
use aatracker::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const COORDS: usize = 120;

/// Worst relative error of one op over all of its differentiable inputs.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOL && self.coords >= 100
    }
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Smooth random flow of shape `[1, 2, h, w]` with magnitude below `amp`.
pub fn smooth_flow(h: usize, w: usize, amp: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.3..1.0) * amp).collect();
    Tensor::from_fn(&[1, 2, h, w], |i| {
        let c = i / (h * w);
        let (y, x) = ((i % (h * w)) / w, i % w);
        let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
        let k = 2 * c;
        0.5 * a[k] * (std::f64::consts::TAU * fx + p[2 * k]).sin()
            + 0.5 * a[k + 1] * (std::f64::consts::TAU * fy + p[2 * k + 1]).cos()
    })
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element contributes a distinct weight.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = random(g.shape(out), -1.0, 1.0, seed ^ 0xabcd);
    let c = g.constant(r)?;
    let m = g.mul(out, c)?;
    g.sum(m)
}

fn check<F>(name: &str, parts: Vec<(Tensor, F)>) -> OpCheck
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, (x, f)) in parts.into_iter().enumerate() {
        let r = gradient_check(f, &x, STEP, TOL, COORDS, k as u64).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(r.max_rel_error);
        coords += r.coords_checked;
    }
    OpCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
    }
}

type Op = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn unary(kind: Unary) -> Op {
    Box::new(move |g: &mut Graph, v: Var| {
        let o = g.unary(kind, v)?;
        project(g, o, 1)
    })
}

fn elementwise() -> Vec<OpCheck> {
    let shape = [4, 40];
    let wide = || random(&shape, -2.0, 2.0, 3);
    let kinked = || away_from_zero(&shape, 4);
    let mut out = vec![
        check("abs", vec![(kinked(), unary(Unary::Abs))]),
        check("neg", vec![(wide(), unary(Unary::Neg))]),
        check("relu", vec![(kinked(), unary(Unary::Relu))]),
        check("leaky_relu", vec![(kinked(), unary(Unary::LeakyRelu(0.1)))]),
        check("sigmoid", vec![(wide(), unary(Unary::Sigmoid))]),
        check("exp", vec![(wide(), unary(Unary::Exp))]),
        check("square", vec![(wide(), unary(Unary::Square))]),
        check("scale", vec![(wide(), unary(Unary::Scale(-1.7)))]),
        check("offset", vec![(wide(), unary(Unary::Offset(0.3)))]),
    ];
    // keep |z| away from delta = 0.5
    let huber_x = kinked().map(|t| if (t.abs() - 0.5).abs() < 0.05 { t * 1.2 } else { t });
    out.push(check("huber", vec![(huber_x, unary(Unary::Huber(0.5)))]));

    let other = random(&shape, -2.0, 2.0, 5);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let parts: Vec<(Tensor, Op)> = (0..2)
            .map(|side| {
                let o = other.clone();
                let f: Op = Box::new(move |g: &mut Graph, v: Var| {
                    let c = g.constant(o.clone())?;
                    let (a, b) = if side == 0 { (v, c) } else { (c, v) };
                    let r = match which {
                        0 => g.add(a, b)?,
                        1 => g.sub(a, b)?,
                        _ => g.mul(a, b)?,
                    };
                    project(g, r, 2)
                });
                (wide(), f)
            })
            .collect();
        out.push(check(name, parts));
    }
    out.push(check("sum", vec![(wide(), Box::new(|g: &mut Graph, v: Var| {
        let s = g.sum(v)?;
        g.unary(Unary::Square, s)
    }) as Op)]));
    out.push(check("mean", vec![(wide(), Box::new(|g: &mut Graph, v: Var| {
        let s = g.mean(v)?;
        g.unary(Unary::Square, s)
    }) as Op)]));
    out
}

fn conv_parts(transpose: bool) -> Vec<(Tensor, Op)> {
    let (n, cin, cout, hw) = (2, 3, 4, 8);
    let k = if transpose { 4 } else { 3 };
    let x = random(&[n, cin, hw, hw], -1.0, 1.0, 10);
    let wshape = if transpose { [cin, cout, k, k] } else { [cout, cin, k, k] };
    let w = random(&wshape, -0.5, 0.5, 11);
    let b = random(&[cout], -0.5, 0.5, 12);
    let run = move |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
        let o = if transpose {
            g.conv_transpose2d(x, w, Some(b), 2, 1)?
        } else {
            g.conv2d(x, w, Some(b), 2, 1)?
        };
        project(g, o, 13)
    };
    let (w0, b0) = (w.clone(), b.clone());
    let (x1, b1) = (x.clone(), b.clone());
    let (x2, w2) = (x.clone(), w.clone());
    let by_input: Op = Box::new(move |g, v| {
        let (wc, bc) = (g.constant(w0.clone())?, g.constant(b0.clone())?);
        run(g, v, wc, bc)
    });
    let by_weight: Op = Box::new(move |g, v| {
        let (xc, bc) = (g.constant(x1.clone())?, g.constant(b1.clone())?);
        run(g, xc, v, bc)
    });
    let by_bias: Op = Box::new(move |g, v| {
        let (xc, wc) = (g.constant(x2.clone())?, g.constant(w2.clone())?);
        run(g, xc, wc, v)
    });
    vec![(x, by_input), (w, by_weight), (b, by_bias)]
}

fn layers() -> Vec<OpCheck> {
    let mut out = vec![check("conv2d", conv_parts(false)), check("conv_transpose2d", conv_parts(true))];

    let x = random(&[3, 40], -1.0, 1.0, 20);
    let w = random(&[12, 40], -0.5, 0.5, 21);
    let b = random(&[12], -0.5, 0.5, 22);
    let (w0, b0, x1, b1, x2, w2) = (w.clone(), b.clone(), x.clone(), b.clone(), x.clone(), w.clone());
    let parts: Vec<(Tensor, Op)> = vec![
        (x.clone(), Box::new(move |g, v| {
            let (wc, bc) = (g.constant(w0.clone())?, g.constant(b0.clone())?);
            let o = g.linear(v, wc, Some(bc))?;
            project(g, o, 23)
        })),
        (w, Box::new(move |g, v| {
            let (xc, bc) = (g.constant(x1.clone())?, g.constant(b1.clone())?);
            let o = g.linear(xc, v, Some(bc))?;
            project(g, o, 23)
        })),
        (b, Box::new(move |g, v| {
            let (xc, wc) = (g.constant(x2.clone())?, g.constant(w2.clone())?);
            let o = g.linear(xc, wc, Some(v))?;
            project(g, o, 23)
        })),
    ];
    out.push(check("linear", parts));

    let t = random(&[2, 3, 5, 6], -1.0, 1.0, 30);
    out.push(check("reshape", vec![(t.clone(), Box::new(|g: &mut Graph, v: Var| {
        let r = g.reshape(v, &[6, 30])?;
        let s = g.unary(Unary::Square, r)?;
        project(g, s, 31)
    }) as Op)]));
    let other = random(&[2, 2, 5, 6], -1.0, 1.0, 32);
    out.push(check("concat", vec![(t.clone(), Box::new(move |g: &mut Graph, v: Var| {
        let c = g.constant(other.clone())?;
        let r = g.concat(&[c, v])?;
        let s = g.unary(Unary::Square, r)?;
        project(g, s, 33)
    }) as Op)]));
    out.push(check("narrow", vec![(random(&[3, 50], -1.0, 1.0, 34), Box::new(|g: &mut Graph, v: Var| {
        let r = g.narrow(v, 10, 30)?;
        let s = g.unary(Unary::Square, r)?;
        project(g, s, 35)
    }) as Op)]));
    out.push(check("upsample2x", vec![(t.clone(), Box::new(|g: &mut Graph, v: Var| {
        let r = g.upsample2x(v)?;
        project(g, r, 36)
    }) as Op)]));
    out.push(check("spatial_diff", (0..2).map(|axis| (t.clone(), Box::new(move |g: &mut Graph, v: Var| {
        let r = g.spatial_diff(v, axis)?;
        let s = g.unary(Unary::Square, r)?;
        project(g, s, 37)
    }) as Op)).collect()));

    let logits = random(&[4, 40], -3.0, 3.0, 40);
    let target = random(&[4, 40], 0.0, 1.0, 41);
    let (l0, t0) = (logits.clone(), target.clone());
    out.push(check("bce_with_logits", vec![
        (logits, Box::new(move |g: &mut Graph, v: Var| {
            let c = g.constant(t0.clone())?;
            let r = g.bce_with_logits(v, c)?;
            project(g, r, 42)
        }) as Op),
        (target, Box::new(move |g: &mut Graph, v: Var| {
            let c = g.constant(l0.clone())?;
            let r = g.bce_with_logits(c, v)?;
            project(g, r, 42)
        }) as Op),
    ]));
    out
}

fn warp_check() -> OpCheck {
    let (h, w) = (12, 12);
    let src = random(&[1, 2, h, w], 0.0, 1.0, 50);
    let flow = smooth_flow(h, w, 1.5, 51);
    let (s0, f0) = (src.clone(), flow.clone());
    check("warp", vec![
        (src, Box::new(move |g: &mut Graph, v: Var| {
            let f = g.constant(f0.clone())?;
            let r = g.warp(v, f)?;
            project(g, r, 52)
        }) as Op),
        (flow, Box::new(move |g: &mut Graph, v: Var| {
            let s = g.constant(s0.clone())?;
            let r = g.warp(s, v)?;
            project(g, r, 52)
        }) as Op),
    ])
}

struct PairFixture {
    i1: Tensor,
    i2: Tensor,
    m1: Tensor,
    m2: Tensor,
    f12: Tensor,
    f21: Tensor,
    r1: Tensor,
    r2: Tensor,
}

fn fixture() -> PairFixture {
    let (h, w) = (10, 10);
    PairFixture {
        i1: random(&[1, 1, h, w], -1.0, 1.0, 60),
        i2: random(&[1, 1, h, w], -1.0, 1.0, 61),
        m1: random(&[1, 1, h, w], 0.0, 1.0, 62),
        m2: random(&[1, 1, h, w], 0.0, 1.0, 63),
        f12: smooth_flow(h, w, 1.2, 64),
        f21: smooth_flow(h, w, 1.2, 65),
        r1: random(&[1, 1, h, w], 0.0, 1.0, 66),
        r2: random(&[1, 1, h, w], 0.0, 1.0, 67),
    }
}

/// Checks a loss of `(f12, f21)` with respect to both flows.
fn flow_loss(name: &str, loss: fn(&mut Graph, &PairFixture, Var, Var) -> Result<Var>) -> OpCheck {
    let parts: Vec<(Tensor, Op)> = (0..2)
        .map(|side| {
            let fx = fixture();
            let x = if side == 0 { fx.f12.clone() } else { fx.f21.clone() };
            let f: Op = Box::new(move |g: &mut Graph, v: Var| {
                let other = g.constant(if side == 0 { fx.f21.clone() } else { fx.f12.clone() })?;
                let (a, b) = if side == 0 { (v, other) } else { (other, v) };
                loss(g, &fx, a, b)
            });
            (x, f)
        })
        .collect();
    check(name, parts)
}

fn weights() -> LossWeights {
    LossWeights::aatracker()
}

fn losses() -> Vec<OpCheck> {
    let mut out = vec![
        flow_loss("consistency_loss", |g, fx, a, b| {
            let (i1, i2) = (g.constant(fx.i1.clone())?, g.constant(fx.i2.clone())?);
            consistency_loss(g, i1, i2, a, b, ImageNorm::L1, &Region::everywhere())
        }),
        flow_loss("consistency_loss_l2", |g, fx, a, b| {
            let (i1, i2) = (g.constant(fx.i1.clone())?, g.constant(fx.i2.clone())?);
            consistency_loss(g, i1, i2, a, b, ImageNorm::L2, &Region::interior(10, 10, 2)?)
        }),
        flow_loss("huber_smoothness", |g, _, a, b| {
            let x = huber_smoothness(g, a, 0.3)?;
            let y = huber_smoothness(g, b, 0.3)?;
            g.add(x, y)
        }),
        flow_loss("baseline_objective", |g, fx, a, b| {
            let (i1, i2) = (g.constant(fx.i1.clone())?, g.constant(fx.i2.clone())?);
            Ok(baseline_objective(g, i1, i2, a, b, &LossWeights::baseline(), ImageNorm::L1, &Region::everywhere())?.loss)
        }),
        flow_loss("anatomy_loss", |g, fx, a, b| {
            let (m1, m2) = (g.constant(fx.m1.clone())?, g.constant(fx.m2.clone())?);
            anatomy_loss(g, m1, m2, a, b, &Region::everywhere())
        }),
        flow_loss("vae_consistency_loss", |g, fx, a, b| {
            let (m1, m2) = (g.constant(fx.m1.clone())?, g.constant(fx.m2.clone())?);
            let (w1, w2) = (g.warp(m1, a)?, g.warp(m2, b)?);
            let (r1, r2) = (g.constant(fx.r1.clone())?, g.constant(fx.r2.clone())?);
            vae_consistency_loss(g, w1, w2, r1, r2)
        }),
        flow_loss("aatracker_objective", |g, fx, a, b| {
            let (i1, i2) = (g.constant(fx.i1.clone())?, g.constant(fx.i2.clone())?);
            let inputs = AnatomyInputs {
                m1: g.constant(fx.m1.clone())?,
                m2: g.constant(fx.m2.clone())?,
                m1_recon: g.constant(fx.r1.clone())?,
                m2_recon: g.constant(fx.r2.clone())?,
            };
            Ok(aatracker_objective(g, i1, i2, a, b, &inputs, &weights(), ImageNorm::L1, &Region::everywhere())?.loss)
        }),
    ];
    let mu = random(&[4, 30], -1.0, 1.0, 70);
    let lv = random(&[4, 30], -1.0, 1.0, 71);
    let (mu0, lv0) = (mu.clone(), lv.clone());
    out.push(check("kld_loss", vec![
        (mu, Box::new(move |g: &mut Graph, v: Var| {
            let c = g.constant(lv0.clone())?;
            kld_loss(g, v, c)
        }) as Op),
        (lv, Box::new(move |g: &mut Graph, v: Var| {
            let c = g.constant(mu0.clone())?;
            kld_loss(g, c, v)
        }) as Op),
    ]));
    out
}

/// Encoder and decoder outputs checked against every parameter tensor.
fn vae_layers() -> Vec<OpCheck> {
    let arch = VaeArch {
        height: 16,
        width: 16,
        channels: [3, 4, 6],
        latent_dim: 5,
    };
    let model = VaeModel::new(arch, 7).unwrap();
    let x = random(&[2, 1, 16, 16], 0.0, 1.0, 80);
    let eps = random(&[2, 5], -1.0, 1.0, 81);
    let names = ["enc", "latent", "expand", "dec"];
    let params = model.params.params().to_vec();
    let mut out = Vec::new();
    for group in names {
        let parts: Vec<(Tensor, Op)> = params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(group))
            .map(|(i, p)| {
                let (model, x, eps, all) = (model.clone(), x.clone(), eps.clone(), params.clone());
                let f: Op = Box::new(move |g: &mut Graph, v: Var| {
                    let mut vars = Vec::with_capacity(all.len());
                    for (j, q) in all.iter().enumerate() {
                        vars.push(if j == i { v } else { g.constant(q.tensor.clone())? });
                    }
                    let xc = g.constant(x.clone())?;
                    let (mu, logvar) = model.encode_graph(g, &vars, xc)?;
                    let half = g.scale(logvar, 0.5)?;
                    let std = g.unary(Unary::Exp, half)?;
                    let e = g.constant(eps.clone())?;
                    let noise = g.mul(std, e)?;
                    let z = g.add(mu, noise)?;
                    let logits = model.decode_graph(g, &vars, z)?;
                    let a = project(g, logits, 82)?;
                    let b = project(g, mu, 83)?;
                    let c = project(g, logvar, 84)?;
                    g.add_all(&[a, b, c])
                });
                (p.tensor.clone(), f)
            })
            .collect();
        assert!(!parts.is_empty(), "no VAE parameters named {group}*");
        out.push(check(&format!("vae_{group}"), parts));
    }
    out
}

/// Every differentiable operation with its finite-difference verdict.
pub fn gradient_suite() -> Vec<OpCheck> {
    let mut all = elementwise();
    all.extend(layers());
    all.push(warp_check());
    all.extend(losses());
    all.extend(vae_layers());
    all
}
