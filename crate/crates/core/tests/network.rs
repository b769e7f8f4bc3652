use rand::Rng;
use split_core::model::{layer_offsets, layer_shapes, net_apply, net_backward, net_forward, ModelParams, NetConfig};
use split_core::partition::SubsetOperators;
use split_core::phantom::{generate_phantom, PhantomConfig};
use split_core::radon::Geometry;
use split_core::rng::RngStream;
use split_core::solver::SolverConfig;
use split_core::spectral::{build_default_model, ForwardModel};
use split_core::training::{loss_x, loss_y, precompute_pairs, Method};

fn random_params(cfg: NetConfig, seed: u64, scale: f64) -> ModelParams {
    let mut rng = RngStream::new(seed, "params").rng();
    let mut p = ModelParams::zeros(cfg);
    for v in &mut p.values {
        *v = scale * (rng.random::<f64>() * 2.0 - 1.0);
    }
    p
}

/// Direct 3×3 convolution with zero padding, written per output pixel.
fn conv(x: &[f64], cin: usize, h: usize, w: usize, p: &ModelParams, layer: usize) -> Vec<f64> {
    let (i_n, o_n) = layer_shapes(&p.cfg)[layer];
    assert_eq!(i_n, cin);
    let (wo, bo) = layer_offsets(&p.cfg)[layer];
    let mut out = vec![0.0; o_n * h * w];
    for o in 0..o_n {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = p.values[bo + o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wt = p.values[wo + ((o * cin + i) * 3 + ky) * 3 + kx];
                            acc += wt * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn reference_net(p: &ModelParams, img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = p.cfg.channels;
    let (h2, w2) = (h / 2, w / 2);
    let a1 = relu(conv(img, 1, h, w, p, 0));
    let a2 = relu(conv(&a1, c, h, w, p, 1));
    let mut pooled = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut s = 0.0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += a2[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                }
                pooled[(ch * h2 + y) * w2 + x] = s / 4.0;
            }
        }
    }
    let a3 = relu(conv(&pooled, c, h2, w2, p, 2));
    let a4 = relu(conv(&a3, 2 * c, h2, w2, p, 3));
    let mut cat = vec![0.0; 3 * c * h * w];
    for ch in 0..2 * c {
        for y in 0..h {
            for x in 0..w {
                cat[(ch * h + y) * w + x] = a4[(ch * h2 + y / 2) * w2 + x / 2];
            }
        }
    }
    cat[2 * c * h * w..].copy_from_slice(&a2);
    let a5 = relu(conv(&cat, 3 * c, h, w, p, 4));
    let mut out = conv(&a5, c, h, w, p, 5);
    if p.cfg.residual {
        for (o, x) in out.iter_mut().zip(img) {
            *o += x;
        }
    }
    out
}

#[test]
fn forward_matches_direct_implementation() {
    for (c, residual, h, w) in [(2, true, 8, 8), (3, false, 6, 10), (4, true, 12, 4)] {
        let p = random_params(NetConfig { channels: c, residual }, c as u64, 0.4);
        let mut rng = RngStream::new(7, "img").rng();
        let img: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let got = net_apply(&p, &img, h, w);
        let want = reference_net(&p, &img, h, w);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
        }
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(floor)
}

#[test]
fn network_gradients_match_finite_differences() {
    let cfg = NetConfig {
        channels: 3,
        residual: true,
    };
    let (h, w) = (8, 8);
    let p = random_params(cfg, 11, 0.3);
    let mut rng = RngStream::new(12, "fd").rng();
    let img: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let probe: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect();
    let objective = |q: &ModelParams, x: &[f64]| -> f64 { net_apply(q, x, h, w).iter().zip(&probe).map(|(a, b)| a * b).sum() };
    let (_, tape) = net_forward(&p, &img, h, w);
    let mut grad = vec![0.0; p.values.len()];
    let gin = net_backward(&p, &tape, &probe, &mut grad);
    let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-6;
    for _ in 0..200 {
        let k = rng.random_range(0..p.values.len());
        let mut plus = p.clone();
        let mut minus = p.clone();
        plus.values[k] += eps;
        minus.values[k] -= eps;
        let fd = (objective(&plus, &img) - objective(&minus, &img)) / (2.0 * eps);
        assert!(rel_err(fd, grad[k], 1e-3 * gmax) < 1e-4, "param {k}: {fd} vs {}", grad[k]);
    }
    for k in 0..h * w {
        let mut plus = img.clone();
        let mut minus = img.clone();
        plus[k] += eps;
        minus[k] -= eps;
        let fd = (objective(&p, &plus) - objective(&p, &minus)) / (2.0 * eps);
        assert!(rel_err(fd, gin[k], 1e-3) < 1e-4, "pixel {k}: {fd} vs {}", gin[k]);
    }
}

#[test]
fn measurement_loss_gradient_matches_finite_differences() {
    let n = 32;
    let geom = Geometry::new(n, 8);
    let fm = ForwardModel::new(build_default_model(60, 5, 3).unwrap(), &geom);
    let method = Method::DoubleSplit;
    let ops = SubsetOperators::new(fm.clone(), method.scheme(8, geom.n_dets, 5));
    let x = generate_phantom(&PhantomConfig::new(n, RngStream::new(13, "ph"))).unwrap();
    let y = fm.forward(&x);
    let solver = SolverConfig {
        iters: 10,
        ..Default::default()
    };
    let pairs = precompute_pairs(&ops, &y, &solver).unwrap();
    let p = random_params(
        NetConfig {
            channels: 2,
            residual: true,
        },
        14,
        0.1,
    );
    let (_, grad) = loss_y(&ops, &p, &pairs, true).unwrap();
    let (_, gx) = loss_x(&p, &pairs, true).unwrap();
    let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gxmax = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = RngStream::new(15, "coords").rng();
    let eps = 1e-6;
    for _ in 0..50 {
        let k = rng.random_range(0..p.values.len());
        let mut plus = p.clone();
        let mut minus = p.clone();
        plus.values[k] += eps;
        minus.values[k] -= eps;
        let fy = (loss_y(&ops, &plus, &pairs, false).unwrap().0 - loss_y(&ops, &minus, &pairs, false).unwrap().0) / (2.0 * eps);
        assert!(rel_err(fy, grad[k], 1e-3 * gmax) < 1e-3, "y-loss param {k}: {fy} vs {}", grad[k]);
        let fx = (loss_x(&plus, &pairs, false).unwrap().0 - loss_x(&minus, &pairs, false).unwrap().0) / (2.0 * eps);
        assert!(rel_err(fx, gx[k], 1e-3 * gxmax) < 1e-3, "x-loss param {k}: {fx} vs {}", gx[k]);
    }
}
