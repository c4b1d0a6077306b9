//! Branch extractors, classifier heads, the jointly trained bundle and the
//! conventional teacher/student classifiers.

mod branch;
mod bundle;
mod deploy;
mod encoder;
mod layers;

pub use branch::{task_logits, BranchExtractor, EmbeddingTriple, GrlSpec, Representation};
pub use bundle::{BundleForward, DiscomArch, ModelBundle, ModelConfig, MODALITIES};
pub use deploy::{BranchArch, Classifier, Model, ModelArch, PlainArch, PlainKind};
pub use encoder::{BackboneConfig, BackboneKind, Encoder, EncoderSpec};
pub use layers::{ClassifierHead, Conv2d, Linear};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Batch;
    use crate::error::Error;
    use crate::params::ParamStore;
    use crate::tape::Graph;
    use crate::tensor::Tensor;

    fn mlp(hidden: usize) -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Mlp,
            hidden_width: hidden,
            ..BackboneConfig::default()
        }
    }

    fn bundle(d: usize, seed: u64) -> ModelBundle {
        let cfg = ModelConfig {
            m1: mlp(8),
            m2: mlp(6),
            embed_width: d,
        };
        let arch = DiscomArch::new(&cfg, [&[5], &[3]], 4, GrlSpec::default(), Representation::Both).unwrap();
        ModelBundle::init(arch, seed)
    }

    fn probe(rows: usize, width: usize, phase: f64) -> Tensor {
        let data = (0..rows * width).map(|i| (i as f64 * 0.7 + phase).sin()).collect();
        Tensor::new(vec![rows, width], data).unwrap()
    }

    fn set(params: &mut ParamStore, name: &str, values: &[f64]) {
        let t = params.get_mut(name).unwrap_or_else(|| panic!("no param {name}"));
        assert_eq!(t.numel(), values.len(), "{name}");
        t.data_mut().copy_from_slice(values);
    }

    fn zero_all(params: &mut ParamStore) {
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    #[test]
    fn every_embedding_has_width_d() {
        let b = bundle(8, 0);
        let mut g = Graph::new(&b.params);
        let x = g.input(probe(3, 5, 0.0));
        let t = b.arch.branches[0].forward(&mut g, x).unwrap();
        for z in [t.z_inv, t.z_inf, t.z_irr] {
            assert_eq!(g.value(z).shape(), &[3, 8]);
            assert!(g.value(z).all_finite());
        }
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let mut b = bundle(4, 0);
        zero_all(&mut b.params);
        let mut g = Graph::new(&b.params);
        let x = g.input(probe(2, 5, 1.0));
        let t = b.arch.branches[0].forward(&mut g, x).unwrap();
        for z in [t.z_inv, t.z_inf, t.z_irr] {
            assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn specific_output_splits_irr_then_inf() {
        let mut b = bundle(2, 0);
        let w = b.params.get("m1.spec.fc2.weight").unwrap().numel();
        set(&mut b.params, "m1.spec.fc2.weight", &vec![0.0; w]);
        set(&mut b.params, "m1.spec.fc2.bias", &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(&b.params);
        let x = g.input(probe(1, 5, 0.3));
        let t = b.arch.branches[0].forward(&mut g, x).unwrap();
        assert_eq!(g.value(t.z_irr).data(), &[1.0, 2.0]);
        assert_eq!(g.value(t.z_inf).data(), &[3.0, 4.0]);
    }

    #[test]
    fn task_head_arithmetic_and_irr_exclusion() {
        let head = Linear::new("h", 2, 1);
        let mut params = ParamStore::new();
        params.insert("h.weight", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        params.insert("h.bias", Tensor::zeros(&[1]));
        let mut g = Graph::new(&params);
        let triple = EmbeddingTriple {
            z_inv: g.input(Tensor::full(&[1, 1], 3.0)),
            z_inf: g.input(Tensor::full(&[1, 1], 4.0)),
            z_irr: g.input(Tensor::full(&[1, 1], -9.0)),
        };
        let out = task_logits(&mut g, &head, &triple, Representation::Both).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);

        let moved = EmbeddingTriple {
            z_irr: g.input(Tensor::full(&[1, 1], 123.0)),
            ..triple
        };
        let out2 = task_logits(&mut g, &head, &moved, Representation::Both).unwrap();
        assert_eq!(g.value(out2).data(), &[11.0]);
    }

    #[test]
    fn zero_weight_head_returns_its_bias() {
        let mut b = bundle(4, 5);
        set(&mut b.params, "cl_m1.weight", &[0.0; 32]);
        set(&mut b.params, "cl_m1.bias", &[0.5, -1.0, 2.0, 0.0]);
        let logits = b.deploy(0).logits_on(&probe(3, 5, 2.0)).unwrap();
        for r in 0..3 {
            assert_eq!(logits.row(r), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn task_head_width_mismatch_is_a_dimension_error() {
        let b = bundle(4, 0);
        let mut g = Graph::new(&b.params);
        let x = g.input(probe(2, 5, 0.0));
        let t = b.arch.branches[0].forward(&mut g, x).unwrap();
        let err = task_logits(&mut g, &b.arch.cl_task[0], &t, Representation::OnlyInv).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        assert_eq!(bundle(8, 3).params, bundle(8, 3).params);
        assert_ne!(bundle(8, 3).params, bundle(8, 4).params);
        let b = bundle(8, 3);
        let mut g = Graph::new(&b.params);
        let x = [g.input(probe(4, 5, 0.1)), g.input(probe(4, 3, 0.2))];
        let f = b.forward(&mut g, x).unwrap();
        assert!(f.task_logits.iter().all(|&l| g.value(l).all_finite()));
    }

    #[test]
    fn deployed_branch_matches_bundle_bit_for_bit() {
        let b = bundle(8, 1);
        let x1 = probe(6, 5, 0.4);
        let mut g = Graph::new(&b.params);
        let x = [g.input(x1.clone()), g.input(probe(6, 3, 0.9))];
        let f = b.forward(&mut g, x).unwrap();
        let joint = g.value(f.task_logits[0]).clone();

        let m1 = b.deploy(0);
        assert!(m1.params.names().all(|n| n.starts_with("m1.") || n.starts_with("cl_m1.")));
        assert_eq!(m1.logits_on(&x1).unwrap(), joint);
        // wrong modality input
        assert!(matches!(m1.logits_on(&probe(6, 3, 0.0)), Err(Error::Dimension(_))));
    }

    fn fusion_model() -> Model {
        let arch = PlainArch::fusion([&mlp(4), &mlp(4)], [&[3], &[3]], 2, 2).unwrap();
        Model::init(ModelArch::Plain(arch), 0)
    }

    fn batch(x1: Tensor, x2: Tensor) -> Batch {
        let n = x1.rows();
        Batch {
            x: [x1, x2],
            y: vec![0; n],
        }
    }

    #[test]
    fn fusion_adds_penultimate_features() {
        let mut m = fusion_model();
        set(&mut m.params, "enc_m1.fc2.weight", &[0.0; 8]);
        set(&mut m.params, "enc_m1.fc2.bias", &[1.0, 2.0]);
        set(&mut m.params, "enc_m2.fc2.weight", &[0.0; 8]);
        set(&mut m.params, "enc_m2.fc2.bias", &[3.0, 4.0]);
        set(&mut m.params, "head.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut m.params, "head.bias", &[0.0, 0.0]);
        let logits = m.logits(&batch(probe(1, 3, 0.0), probe(1, 3, 1.0))).unwrap();
        assert_eq!(logits.data(), &[4.0, 6.0]);
    }

    #[test]
    fn fusion_with_silent_second_encoder_equals_single_model() {
        let mut fused = fusion_model();
        set(&mut fused.params, "enc_m2.fc2.weight", &[0.0; 8]);
        set(&mut fused.params, "enc_m2.fc2.bias", &[0.0; 2]);
        let single_arch = PlainArch::single(0, &mlp(4), &[3], 2, 2).unwrap();
        let mut single = Model::init(ModelArch::Plain(single_arch), 9);
        for (name, t) in fused.params.iter() {
            if let Some(rest) = name.strip_prefix("enc_m1.") {
                single.params.insert(format!("enc.{rest}"), t.clone());
            } else if name.starts_with("head.") {
                single.params.insert(name.clone(), t.clone());
            }
        }
        let x1 = probe(4, 3, 0.2);
        let fl = fused.logits(&batch(x1.clone(), probe(4, 3, 5.0))).unwrap();
        assert_eq!(fl, single.logits_on(&x1).unwrap());
    }

    #[test]
    fn fusion_is_symmetric_in_its_addends() {
        let m = fusion_model();
        let mut swapped = m.clone();
        for (name, t) in m.params.iter() {
            let other = if let Some(r) = name.strip_prefix("enc_m1.") {
                format!("enc_m2.{r}")
            } else if let Some(r) = name.strip_prefix("enc_m2.") {
                format!("enc_m1.{r}")
            } else {
                continue;
            };
            swapped.params.insert(other, t.clone());
        }
        let (a, c) = (probe(3, 3, 0.1), probe(3, 3, 0.8));
        let l1 = m.logits(&batch(a.clone(), c.clone())).unwrap();
        let l2 = swapped.logits(&batch(c, a)).unwrap();
        for (u, v) in l1.data().iter().zip(l2.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_modal_model_ignores_the_other_modality() {
        let arch = PlainArch::single(1, &mlp(4), &[3], 4, 3).unwrap();
        let m = Model::init(ModelArch::Plain(arch), 2);
        let x2 = probe(5, 3, 0.5);
        let a = m.logits(&batch(probe(5, 3, 0.0), x2.clone())).unwrap();
        let b = m.logits(&batch(Tensor::zeros(&[5, 3]), x2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_grl_lambda_is_rejected() {
        assert!(GrlSpec { lambda: -0.1 }.validate().is_err());
        assert!(GrlSpec { lambda: 0.0 }.validate().is_ok());
    }

    #[test]
    fn grl_reverses_the_derivative_of_a_composite() {
        // f(z) = sum(relu(W z + b)) realised as a tiny linear layer
        let mut params = ParamStore::new();
        params.insert("f.weight", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap());
        params.insert("f.bias", Tensor::new(vec![2], vec![0.05, 0.2]).unwrap());
        let head = Linear::new("f", 3, 2);
        let z0 = Tensor::new(vec![1, 3], vec![0.7, -0.3, 0.2]).unwrap();
        let eval = |z: &Tensor| {
            let mut g = Graph::new(&params);
            let v = g.input(z.clone());
            let h = head.forward(&mut g, v).unwrap();
            let h = g.relu(h);
            g.value(h).data().iter().sum::<f64>()
        };
        let mut p2 = params.clone();
        p2.insert("s.weight", Tensor::full(&[1, 2], 1.0));
        p2.insert("s.bias", Tensor::zeros(&[1]));
        for lambda in [0.0, 0.5, 1.0] {
            let mut g = Graph::new(&p2);
            let z = g.input(z0.clone());
            let r = GrlSpec { lambda }.apply(&mut g, z);
            assert_eq!(g.value(r), &z0);
            let h = head.forward(&mut g, r).unwrap();
            let h = g.relu(h);
            // sums the two activations
            let s = Linear::new("s", 2, 1).forward(&mut g, h).unwrap();
            let grads = g.backward(s).wrt(z).unwrap().clone();
            for i in 0..3 {
                let mut zp = z0.clone();
                let mut zm = z0.clone();
                zp.data_mut()[i] += 1e-6;
                zm.data_mut()[i] -= 1e-6;
                let fd = (eval(&zp) - eval(&zm)) / 2e-6;
                assert!((grads.data()[i] + lambda * fd).abs() < 1e-8, "lambda {lambda} i {i}");
            }
        }
    }
}
