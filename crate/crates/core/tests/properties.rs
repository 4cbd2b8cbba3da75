use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layersep::data::{sample_batch, Pools};
use layersep::gradcheck;
use layersep::image::{compose, CompositeOp, Image, LayerSet, RangeTag};
use layersep::loss::{self, LossWeights};
use layersep::metrics::{lmse, mse, psnr, ssim, SsimParams};
use layersep::nn::{Model, NetworkProfile};
use layersep::synth::{rasterize, render_in_memory, render_scene, RenderConfig, ShapeKind};
use layersep::{Exec, Graph, Tensor, Var};

fn small_render(n_layers: usize, seed: u64) -> RenderConfig {
    RenderConfig {
        image_size: 24,
        n_train: 12,
        n_test: 2,
        n_layers,
        seed,
        size_range: (5, 14),
        ..RenderConfig::default()
    }
}

fn tensor(v: Vec<f64>) -> Tensor {
    Tensor::new([1, v.len(), 1, 1], v).unwrap()
}

fn image(h: usize, w: usize, data: Vec<f64>, range: RangeTag) -> Image {
    Image::new(h, w, 3, data, range).unwrap()
}

fn grads(f: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut g = Graph::new(Exec::Sequential);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let gs = g.grad(out, &vars).unwrap();
    gs.iter().map(|&v| g.value(v).data().to_vec()).collect()
}

// every term of the self-supervision and cycle objectives, with the ones
// in `skip` left out entirely
fn reduced(g: &mut Graph, v: &[Var], w: &LossWeights, skip: usize) -> Var {
    let (fy_x, fz_x, fy_y, fz_z) = (v[0], v[1], v[2], v[3]);
    let (x, yp, zp, ypp, zpp) = (v[4], v[5], v[6], v[7], v[8]);
    let mut terms = Vec::new();
    if skip != 1 {
        let d = loss::graph::d_phi(g, fy_y, fy_x).unwrap();
        terms.push(g.scale(d, w.lambda1));
    }
    if skip != 2 {
        let d = loss::graph::d_phi(g, fz_z, fz_x).unwrap();
        terms.push(g.scale(d, w.lambda2));
    }
    if skip != 3 {
        let p = loss::graph::d_psi(g, fy_x, fz_x, w.alpha).unwrap();
        let p = g.scale(p, -w.lambda3);
        terms.push(g.add_scalar(p, w.lambda3));
    }
    if skip != 4 {
        let r = g.add(yp, zp).unwrap();
        let d = g.mean_abs_diff(r, x).unwrap();
        terms.push(g.scale(d, w.lambda4));
    }
    if skip != 5 {
        let d = g.mean_abs_diff(ypp, yp).unwrap();
        terms.push(g.scale(d, w.lambda5));
    }
    if skip != 6 {
        let d = g.mean_abs_diff(zpp, zp).unwrap();
        terms.push(g.scale(d, w.lambda6));
    }
    loss::graph::sum(g, &terms).unwrap()
}

fn full(g: &mut Graph, v: &[Var], w: &LossWeights) -> Var {
    let ss = loss::graph::loss_ss(g, &v[0..2], &v[2..4], w).unwrap();
    let (cc_x, cc) = loss::graph::loss_cc(g, v[4], &v[5..7], &v[7..9], w).unwrap();
    let mut terms = vec![ss, cc_x];
    terms.extend(cc);
    loss::graph::sum(g, &terms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blends_are_clipped_sums_and_layers_keep_their_kind(seed in any::<u64>(), n_layers in 2usize..=3) {
        let cfg = small_render(n_layers, 0);
        let scene = render_scene(seed, &cfg).unwrap();
        let blend = compose(&LayerSet::new(scene.layers.clone(), CompositeOp::AdditiveClipped).unwrap()).unwrap();
        prop_assert_eq!(blend.data(), scene.x.data());
        for (k, layer) in scene.layers.iter().enumerate() {
            prop_assert_eq!(scene.shapes[k].kind, ShapeKind::for_layer(k));
            let again = rasterize(&scene.shapes[k], cfg.image_size, cfg.channels, cfg.antialias);
            prop_assert_eq!(again.data(), layer.data());
        }
    }

    #[test]
    fn batches_never_pair_a_blend_with_its_own_layers(render_seed in 0u64..1000, draw in any::<u64>(), n_layers in 2usize..=3) {
        let (train, test) = render_in_memory(&small_render(n_layers, render_seed), Exec::Sequential).unwrap();
        let pools = Pools::from_scenes(&train, &test).unwrap();
        let b = sample_batch(&pools, draw).unwrap();
        prop_assert!(b.is_non_triplet());
        for l in &b.layers {
            prop_assert_ne!(&l.scene_id, &b.x.scene_id);
        }
    }

    #[test]
    fn decode_of_encode_keeps_spatial_dims(k in 1usize..=3, real in any::<bool>()) {
        let profile = if real { NetworkProfile::real_mini() } else { NetworkProfile::synthetic_mini() };
        let size = 16 * k;
        let model = Model::build(profile, 2, 0).unwrap();
        let x = Tensor::uniform([1, 3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(k as u64));
        for stream in 0..2 {
            let (latent, skips) = model.encode(Exec::Sequential, stream, &x).unwrap();
            let y = model.decode(Exec::Sequential, stream, &latent, &skips).unwrap();
            prop_assert_eq!(y.shape(), [1, 3, size, size]);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences(
        a in proptest::collection::vec(-2.0f64..2.0, 8),
        b in proptest::collection::vec(-2.0f64..2.0, 8),
        alpha in 0.5f64..2.0,
    ) {
        let inputs = [tensor(a), tensor(b)];
        let phi = gradcheck::check(|g, v| loss::graph::d_phi(g, v[0], v[1]), &inputs, 8, 1e-6, 1).unwrap();
        let psi = gradcheck::check(|g, v| loss::graph::d_psi(g, v[0], v[1], alpha), &inputs, 8, 1e-6, 2).unwrap();
        let gen = gradcheck::check(|g, v| Ok(loss::graph::gan_generator(g, v[0], 5.0)), &inputs[..1], 8, 1e-6, 3).unwrap();
        let disc = gradcheck::check(|g, v| loss::graph::gan_discriminator(g, v[0], v[1], 5.0), &inputs, 8, 1e-6, 4).unwrap();
        for r in [phi, psi, gen, disc] {
            prop_assert!(r.max_rel_err() < 1e-3, "{:?}", r.worst());
        }
    }

    #[test]
    fn a_zero_weight_removes_exactly_its_term(which in 1usize..=6, seed in any::<u64>()) {
        let mut w = LossWeights::default();
        match which {
            1 => w.lambda1 = 0.0,
            2 => w.lambda2 = 0.0,
            3 => w.lambda3 = 0.0,
            4 => w.lambda4 = 0.0,
            5 => w.lambda5 = 0.0,
            _ => w.lambda6 = 0.0,
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = (0..9).map(|_| Tensor::uniform([1, 2, 2, 2], 0.0, 1.0, &mut rng)).collect();
        let a = grads(|g, v| full(g, v, &w), &inputs);
        let b = grads(|g, v| reduced(g, v, &w, which), &inputs);
        for (ga, gb) in a.iter().zip(&b) {
            for (x, y) in ga.iter().zip(gb) {
                prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn cycle_residual_is_the_unclipped_composition_error(
        v in proptest::collection::vec(0.0f64..1.0, 3 * 16 * 3),
        lambda4 in 0.1f64..10.0,
    ) {
        let n = 16 * 3;
        let (x, y, z) = (v[..n].to_vec(), v[n..2 * n].to_vec(), v[2 * n..].to_vec());
        let (x, y, z) = (image(4, 4, x, RangeTag::Unit), image(4, 4, y, RangeTag::Unit), image(4, 4, z, RangeTag::Unit));
        let w = LossWeights { lambda4, ..LossWeights::default() };
        let (cc_x, _, _) = loss::loss_cc(&x, &y, &z, &y, &z, &w).unwrap();
        let recon = compose(&LayerSet::new(vec![y, z], CompositeOp::AdditiveUnclipped).unwrap()).unwrap();
        let resid = recon.data().iter().zip(x.data()).map(|(r, s)| (r - s).abs()).sum::<f64>() / n as f64;
        prop_assert!((cc_x - lambda4 * resid).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_deterministic_and_symmetric_where_expected(
        v in proptest::collection::vec(0.0f64..1.0, 2 * 16 * 16 * 3),
    ) {
        let n = 16 * 16 * 3;
        let p = image(16, 16, v[..n].to_vec(), RangeTag::Unit);
        let q = image(16, 16, v[n..].to_vec(), RangeTag::Unit);
        let params = SsimParams::default();
        prop_assert_eq!(mse(&p, &q, false).unwrap().to_bits(), mse(&p, &q, false).unwrap().to_bits());
        prop_assert_eq!(mse(&p, &q, false).unwrap(), mse(&q, &p, false).unwrap());
        prop_assert_eq!(psnr(&p, &q, 1.0).unwrap(), psnr(&q, &p, 1.0).unwrap());
        prop_assert!((ssim(&p, &q, &params).unwrap() - ssim(&q, &p, &params).unwrap()).abs() < 1e-12);
        prop_assert_eq!(lmse(&p, &q, 8, 4).unwrap().to_bits(), lmse(&p, &q, 8, 4).unwrap().to_bits());
    }

    #[test]
    fn lmse_ignores_a_global_scale_of_the_prediction(
        v in proptest::collection::vec(0.01f64..1.0, 2 * 16 * 16 * 3),
        k in 0.05f64..20.0,
    ) {
        let n = 16 * 16 * 3;
        let p = image(16, 16, v[..n].to_vec(), RangeTag::Linear);
        let q = image(16, 16, v[n..].to_vec(), RangeTag::Linear);
        let scaled = image(16, 16, v[..n].iter().map(|x| k * x).collect(), RangeTag::Linear);
        let base = lmse(&p, &q, 8, 4).unwrap();
        prop_assert!((lmse(&scaled, &q, 8, 4).unwrap() - base).abs() < 1e-9);
        prop_assert!(lmse(&scaled, &p, 8, 4).unwrap() < 1e-12);
    }
}
