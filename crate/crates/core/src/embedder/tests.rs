use super::*;
use rand::Rng;

pub(crate) fn tiny_arch(seed: u64) -> Arch {
    Arch {
        text_in: 6,
        visual_in: 5,
        category_in: 4,
        text_width: 3,
        visual_width: 3,
        category_width: 2,
        hidden_width: 5,
        output_width: 4,
        dropout: 0.0,
        seed,
        ..Arch::default()
    }
}

fn random_inputs(arch: &Arch, batch: usize, seed: u64) -> BatchInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |cols: usize| Array2::from_shape_simple_fn((batch, cols), || rng.random_range(-1.0..1.0));
    let text = m(arch.text_in);
    let visual = m(arch.visual_in);
    let category = m(arch.category_in);
    BatchInputs {
        text,
        visual,
        category,
        hero: (0..batch).map(|i| (i % 2) as f64).collect(),
    }
}

fn linear_loss(emb: &Array2<f64>, coeffs: &Array2<f64>) -> f64 {
    (emb * coeffs).sum()
}

#[test]
fn init_shapes_and_determinism() {
    let arch = Arch::with_widths(256, 256, 32, 256);
    let a = EmbedderParams::init(arch.clone()).unwrap();
    assert_eq!(a.output.weight.dim(), (256, 256));
    assert_eq!(a.hidden.weight.dim(), (256, 545));
    assert_eq!(a.text.weight.dim(), (256, TEXT_DIM));
    assert_eq!(a.output_dim(), EMBEDDING_DIM);
    let b = EmbedderParams::init(arch).unwrap();
    assert_eq!(a, b);
    for layer in a.layers() {
        assert!(layer.bias.iter().all(|&v| v == 0.0));
        let bn = layer.norm.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&v| v == 1.0));
        assert!(bn.beta.iter().all(|&v| v == 0.0));
        assert!(bn.running_mean.iter().all(|&v| v == 0.0));
        assert!(bn.running_var.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn hidden_weight_variance_is_he_scaled() {
    let params = EmbedderParams::init(Arch::default()).unwrap();
    let w = &params.hidden.weight;
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let target = 2.0 / 545.0;
    assert!((var / target - 1.0).abs() < 0.10, "variance {var} vs {target}");
}

#[test]
fn embeddings_are_256_wide_and_infer_is_deterministic() {
    let params = EmbedderParams::init(Arch::default()).unwrap();
    let inputs = random_inputs(&params.arch, 3, 1);
    let (a, _) = params.forward(&inputs, Mode::Infer, 1).unwrap();
    let (b, _) = params.forward(&inputs, Mode::Infer, 99).unwrap();
    assert_eq!(a.ncols(), 256);
    assert_eq!(a, b);
    assert!(a.iter().all(|&v| v >= 0.0));
}

#[test]
fn train_mode_needs_two_items() {
    let mut params = EmbedderParams::init(tiny_arch(0)).unwrap();
    let inputs = random_inputs(&params.arch, 1, 2);
    assert!(matches!(params.embed_batch(&inputs, Mode::Train, 0), Err(Error::Shape(_))));
    assert!(params.embed_batch(&inputs, Mode::Infer, 0).is_ok());
}

#[test]
fn hero_flag_changes_embedding() {
    let mut params = EmbedderParams::init(tiny_arch(3)).unwrap();
    let flag_col = params.arch.concat_width() - 1;
    params.hidden.weight.column_mut(flag_col).fill(1.5);
    let mut inputs = random_inputs(&params.arch, 2, 4);
    let row0 = |m: &Array2<f64>| m.row(0).to_owned();
    for m in [&mut inputs.text, &mut inputs.visual, &mut inputs.category] {
        let r = row0(m);
        m.row_mut(1).assign(&r);
    }
    inputs.hero = Array1::from(vec![0.0, 1.0]);
    let (emb, _) = params.forward(&inputs, Mode::Infer, 0).unwrap();
    assert_ne!(emb.row(0), emb.row(1));
}

#[test]
fn running_stats_change_only_in_train_mode() {
    let mut params = EmbedderParams::init(tiny_arch(5)).unwrap();
    let inputs = random_inputs(&params.arch, 6, 6);
    let before = params.clone();
    params.embed_batch(&inputs, Mode::Infer, 0).unwrap();
    assert_eq!(params, before);
    params.embed_batch(&inputs, Mode::Train, 0).unwrap();
    assert_ne!(params, before);
    for layer in params.layers() {
        assert!(layer.norm.as_ref().unwrap().running_var.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn relu_outputs_non_negative_in_every_block() {
    let params = EmbedderParams::init(Arch {
        dropout: 0.5,
        ..tiny_arch(8)
    })
    .unwrap();
    let inputs = random_inputs(&params.arch, 8, 9);
    let (_, trace) = params.forward(&inputs, Mode::Train, 3).unwrap();
    for t in trace.layers() {
        assert!(t.activation.iter().all(|&v| v >= 0.0));
        assert!(t.output.iter().all(|&v| v >= 0.0));
    }
    // Dropout masks are seeded.
    let (_, again) = params.forward(&inputs, Mode::Train, 3).unwrap();
    assert_eq!(trace.text.mask, again.text.mask);
    assert!(trace.output.mask.is_none());
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let params = EmbedderParams::init(tiny_arch(10)).unwrap();
    let inputs = random_inputs(&params.arch, 4, 11);
    let (emb, trace) = params.forward(&inputs, Mode::Train, 0).unwrap();
    let grads = params.backward(&trace, &Array2::zeros(emb.raw_dim())).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn backward_rejects_infer_trace_and_bad_shapes() {
    let params = EmbedderParams::init(tiny_arch(10)).unwrap();
    let inputs = random_inputs(&params.arch, 4, 11);
    let (emb, trace) = params.forward(&inputs, Mode::Infer, 0).unwrap();
    assert!(params.backward(&trace, &Array2::zeros(emb.raw_dim())).is_err());
    let (_, trace) = params.forward(&inputs, Mode::Train, 0).unwrap();
    assert!(params.backward(&trace, &Array2::zeros((3, 4))).is_err());
    let other = EmbedderParams::init(Arch {
        hidden_width: 6,
        ..tiny_arch(10)
    })
    .unwrap();
    assert!(other.backward(&trace, &Array2::zeros((4, 4))).is_err());
}

#[test]
fn batch_gradient_is_sum_of_per_example_gradients() {
    let arch = Arch {
        batch_norm: PerLayer::all(false),
        ..tiny_arch(12)
    };
    let params = EmbedderParams::init(arch).unwrap();
    let inputs = random_inputs(&params.arch, 5, 13);
    let (emb, trace) = params.forward(&inputs, Mode::Train, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let coeffs = Array2::from_shape_simple_fn(emb.raw_dim(), || rng.random_range(-1.0..1.0));
    let full = params.backward(&trace, &coeffs).unwrap();

    let mut summed = EmbedderGrads::zeros_like(&params);
    for row in 0..emb.nrows() {
        let mut g = Array2::zeros(emb.raw_dim());
        g.row_mut(row).assign(&coeffs.row(row));
        let part = params.backward(&trace, &g).unwrap();
        add_into(&mut summed, &part);
    }
    for ((name, a), (_, b)) in full.tensors().iter().zip(summed.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10, "{name}: {x} vs {y}");
        }
    }
}

fn add_into(acc: &mut EmbedderGrads, part: &EmbedderGrads) {
    let pairs = [
        (&mut acc.text, &part.text),
        (&mut acc.visual, &part.visual),
        (&mut acc.category, &part.category),
        (&mut acc.hidden, &part.hidden),
        (&mut acc.output, &part.output),
    ];
    for (a, p) in pairs {
        a.weight += &p.weight;
        a.bias += &p.bias;
        if let (Some(ag), Some(pg)) = (&mut a.gamma, &p.gamma) {
            *ag += pg;
        }
        if let (Some(ab), Some(pb)) = (&mut a.beta, &p.beta) {
            *ab += pb;
        }
    }
}

/// Central-difference check of every gradient on a tiny batch-normalised net.
#[test]
fn gradients_match_finite_differences() {
    let params = EmbedderParams::init(tiny_arch(20)).unwrap();
    let inputs = random_inputs(&params.arch, 4, 21);
    let (emb, trace) = params.forward(&inputs, Mode::Train, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let coeffs = Array2::from_shape_simple_fn(emb.raw_dim(), || rng.random_range(-1.0..1.0));
    let grads = params.backward(&trace, &coeffs).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let h = 1e-5;
    let mut checked = 0;
    for (t_idx, (name, grad)) in analytic.iter().enumerate() {
        for k in 0..grad.len().min(50) {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.trainable_mut()[t_idx].1[k] += delta;
                let (e, _) = p.forward(&inputs, Mode::Train, 0).unwrap();
                linear_loss(&e, &coeffs)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad[k];
            let scale = a.abs().max(numeric.abs());
            let ok = if scale < 1e-8 {
                (a - numeric).abs() < 1e-8
            } else {
                (a - numeric).abs() / scale < 1e-4
            };
            assert!(ok, "{name}[{k}]: analytic {a} numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut params = EmbedderParams::init(tiny_arch(30)).unwrap();
    let inputs = random_inputs(&params.arch, 6, 31);
    params.embed_batch(&inputs, Mode::Train, 0).unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    save_checkpoint(&params, f.path()).unwrap();
    let loaded = load_checkpoint(f.path()).unwrap();
    assert_eq!(loaded, params);
}

#[test]
fn feature_mask_zeroes_inputs() {
    let feats = ItemFeatures {
        text: vec![1.0; TEXT_DIM],
        visual: vec![2.0; VISUAL_DIM],
        category: vec![3.0; CATEGORY_DIM],
    };
    let mask = FeatureMask {
        visual: false,
        hero: false,
        ..FeatureMask::ALL
    };
    let b = BatchInputs::from_features(&[&feats], &[true], mask).unwrap();
    assert!(b.visual.iter().all(|&v| v == 0.0));
    assert!(b.text.iter().all(|&v| v == 1.0));
    assert_eq!(b.hero[0], 0.0);
}
