use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nnblocks::{Builder, ConvStem, Linear, RfaConv, TransformerModule};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::config::BoNetConfig;
use super::inception::InceptionV3;

/// Feature maps at the module boundaries, for Grad-CAM.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub pre_transformer: NodeId,
    pub post_transformer: NodeId,
    pub pre_rfaconv: NodeId,
    pub post_rfaconv: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Predicted ages `[N, 1]`.
    pub output: NodeId,
    pub taps: Taps,
}

/// Layer structure of the two-stream network. Parameters live in a separate
/// [`ParamStore`] so one structure can serve many parameter snapshots.
#[derive(Debug, Clone)]
pub struct BoNetPlus {
    pub config: BoNetConfig,
    global_stem: ConvStem,
    local_stem: ConvStem,
    transformer: Option<TransformerModule>,
    rfaconv: Option<RfaConv>,
    trunk: InceptionV3,
    pub gender_embedding: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

impl BoNetPlus {
    pub fn new(b: &mut Builder, cfg: &BoNetConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.stem_grid();
        let global_stem = ConvStem::new(b, "global_stem", 1, &cfg.global_stem);
        let transformer = if cfg.use_transformer {
            Some(TransformerModule::new(b, "transformer", &cfg.transformer, (grid, grid))?)
        } else {
            None
        };
        let local_stem = ConvStem::new(b, "local_stem", 1, &cfg.local_stem);
        let rfaconv = if cfg.use_rfaconv {
            Some(RfaConv::new(b, "rfaconv", cfg.local_stem.out_channels(), &cfg.rfaconv)?)
        } else {
            None
        };
        let trunk = InceptionV3::new(
            b,
            "backbone",
            cfg.fused_channels(),
            (grid, grid),
            cfg.backbone_scale.width_divisor(),
            cfg.backbone_same_padding,
            cfg.backbone_bn_eps,
        )?;
        let gender_embedding = b.param("gender_embedding", &[2, cfg.gender_embed_dim], Init::Normal { std: 1.0 });
        let head_in = trunk.out_channels() + cfg.gender_embed_dim;
        let fc1 = Linear::new(b, "head.fc1", head_in, cfg.head_dims[0], true);
        let fc2 = Linear::new(b, "head.fc2", cfg.head_dims[0], cfg.head_dims[1], true);
        let out = Linear::new(b, "head.out", cfg.head_dims[1], 1, true);
        Ok(BoNetPlus {
            config: cfg.clone(),
            global_stem,
            local_stem,
            transformer,
            rfaconv,
            trunk,
            gender_embedding,
            fc1,
            fc2,
            out,
        })
    }

    pub fn trunk(&self) -> &InceptionV3 {
        &self.trunk
    }

    /// `images` and `maps` are `[N, 1, S, S]`, `genders` holds N flags in {0, 1}.
    pub fn forward(&self, g: &mut Graph, images: NodeId, maps: NodeId, genders: &[usize]) -> Result<ForwardOutput> {
        let s = self.config.input_size;
        let n = genders.len();
        let expected = [n, 1, s, s];
        for (what, node) in [("image batch", images), ("attention map batch", maps)] {
            if g.shape(node) != expected {
                return Err(Error::shape(what, expected, g.shape(node)));
            }
        }
        if let Some(bad) = genders.iter().find(|&&x| x > 1) {
            return Err(Error::InvalidArgument(format!("gender flag must be 0 or 1, got {bad}")));
        }

        let pre_transformer = self.global_stem.forward(g, images)?;
        let post_transformer = match &self.transformer {
            Some(t) => t.forward(g, pre_transformer)?,
            None => pre_transformer,
        };
        let pre_rfaconv = self.local_stem.forward(g, maps)?;
        let post_rfaconv = match &self.rfaconv {
            Some(r) => r.forward(g, pre_rfaconv)?,
            None => pre_rfaconv,
        };

        let fused = g.concat(&[post_transformer, post_rfaconv], 1);
        let feat = self.trunk.forward(g, fused)?;
        let pooled = g.global_avg_pool(feat);
        let table = g.param(self.gender_embedding);
        let emb = g.embedding(table, genders);
        let h = g.concat(&[pooled, emb], 1);
        let h = self.fc1.forward(g, h);
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        let output = self.out.forward(g, h);
        Ok(ForwardOutput {
            output,
            taps: Taps {
                pre_transformer,
                post_transformer,
                pre_rfaconv,
                post_rfaconv,
            },
        })
    }
}

/// Network structure together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: BoNetPlus,
    pub params: ParamStore,
}

impl Model {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(cfg: &BoNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = BoNetPlus::new(&mut Builder::new(&mut params, seed), cfg)?;
        Ok(Model { net, params })
    }

    /// Zero-filled parameters, to be overwritten by a checkpoint.
    pub fn empty(cfg: &BoNetConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = BoNetPlus::new(&mut Builder::dry(&mut params), cfg)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &BoNetConfig {
        &self.net.config
    }

    /// Inference-mode predictions in months, one per sample.
    pub fn predict(&self, images: &Tensor, maps: &Tensor, genders: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.params, false, false);
        let x = g.constant(images.clone());
        let m = g.constant(maps.clone());
        let out = self.net.forward(&mut g, x, m, genders)?;
        Ok(g.value(out.output).data().to_vec())
    }

    /// Set the output bias, e.g. to the mean training label.
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(b) = self.net.out.bias {
            self.params.get_mut(b).data_mut()[0] = value;
        }
    }
}

/// Exact number of trainable scalars of the network described by `cfg`.
pub fn count_parameters(cfg: &BoNetConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    BoNetPlus::new(&mut Builder::dry(&mut store), cfg)?;
    Ok(store.trainable_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::model::BackboneScale;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(input: usize) -> BoNetConfig {
        BoNetConfig {
            input_size: input,
            ..BoNetConfig::mini()
        }
    }

    fn random_inputs(n: usize, s: usize, seed: u64) -> (Tensor, Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[n, 1, s, s], |_| rng.random::<f64>());
        let map = Tensor::from_fn(&[n, 1, s, s], |_| rng.random::<f64>());
        let genders = (0..n).map(|i| i % 2).collect();
        (img, map, genders)
    }

    fn variants() -> [(bool, bool); 4] {
        [(false, false), (true, false), (false, true), (true, true)]
    }

    #[test]
    fn every_ablation_variant_runs_and_stays_finite() {
        let mut counts = Vec::new();
        for (t, r) in variants() {
            let cfg = small(32).with_modules(t, r);
            let model = Model::new(&cfg, 1).unwrap();
            let (img, map, genders) = random_inputs(100, 32, 5);
            let out = model.predict(&img, &map, &genders).unwrap();
            assert_eq!(out.len(), 100);
            assert!(out.iter().all(|v| v.is_finite()), "{t} {r}");
            counts.push(count_parameters(&cfg).unwrap());
        }
        counts.sort_unstable();
        counts.dedup();
        assert_eq!(counts.len(), 4, "ablation variants must differ in size");
    }

    #[test]
    fn inference_is_deterministic() {
        let model = Model::new(&small(32), 9).unwrap();
        let (img, map, genders) = random_inputs(3, 32, 2);
        let a = model.predict(&img, &map, &genders).unwrap();
        let b = model.predict(&img, &map, &genders).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_wrong_input_shape_and_gender() {
        let model = Model::new(&small(32), 1).unwrap();
        let (img, map, _) = random_inputs(1, 32, 0);
        let bad = Tensor::zeros(&[1, 1, 30, 30]);
        assert!(matches!(model.predict(&bad, &map, &[0]), Err(Error::Shape { .. })));
        assert!(model.predict(&img, &map, &[2]).is_err());
    }

    #[test]
    fn gender_changes_output_by_weight_times_embedding_delta() {
        let cfg = small(32);
        let mut model = Model::new(&cfg, 4).unwrap();
        let trunk_out = model.net.trunk().out_channels();
        let d = cfg.gender_embed_dim;
        let j = 3;
        let w = 2.5;
        let p = &mut model.params;
        for l in [&model.net.fc1, &model.net.fc2, &model.net.out] {
            p.get_mut(l.weight).data_mut().fill(0.0);
            p.get_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        p.get_mut(model.net.fc1.weight).data_mut()[trunk_out + j] = 1.0;
        p.get_mut(model.net.fc1.bias.unwrap()).data_mut()[0] = 10.0;
        p.get_mut(model.net.fc2.weight).data_mut()[0] = 1.0;
        p.get_mut(model.net.out.weight).data_mut()[0] = w;
        let emb = p.get_mut(model.net.gender_embedding).data_mut();
        emb[j] = -0.75;
        emb[d + j] = 1.25;

        let (img, map, _) = random_inputs(1, 32, 8);
        let twice = |t: &Tensor| Tensor::new(&[2, 1, 32, 32], [t.data(), t.data()].concat());
        let (img2, map2) = (twice(&img), twice(&map));
        let out = model.predict(&img2, &map2, &[0, 1]).unwrap();
        assert!((out[1] - out[0] - w * (1.25 - -0.75)).abs() < 1e-12);
    }

    #[test]
    fn parameter_count_recount() {
        let cfg = small(32);
        let base = count_parameters(&cfg).unwrap();
        let wider = BoNetConfig {
            gender_embed_dim: 2 * cfg.gender_embed_dim,
            ..cfg.clone()
        };
        let delta = cfg.gender_embed_dim;
        let expected = delta * cfg.head_dims[0] + 2 * delta;
        assert_eq!(count_parameters(&wider).unwrap() - base, expected);

        let mut store = ParamStore::new();
        Linear::new(&mut Builder::dry(&mut store), "l", 512, 1, true);
        assert_eq!(store.trainable_count(), 513);
    }

    #[test]
    fn mini_backbone_is_smaller_than_full() {
        let mut full = BoNetConfig::default();
        full.input_size = 64;
        full.backbone_same_padding = true;
        let mut mini = full.clone();
        mini.backbone_scale = BackboneScale::Mini;
        assert!(count_parameters(&mini).unwrap() < count_parameters(&full).unwrap());
    }

    #[test]
    fn collapsing_trunk_is_a_config_error() {
        let mut cfg = small(32);
        cfg.backbone_same_padding = false;
        let err = Model::new(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("backbone_same_padding"), "{err}");
    }

    #[test]
    fn full_mini_model_gradient_check() {
        let cfg = BoNetConfig::mini();
        let mut model = Model::new(&cfg, 11).unwrap();
        // Non-trivial running statistics so the inference-mode norms matter.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let buffers: Vec<_> = model.params.ids().filter(|&id| !model.params.is_trainable(id)).collect();
        for id in buffers {
            let is_var = model.params.name(id).ends_with("running_var");
            for v in model.params.get_mut(id).data_mut() {
                *v = if is_var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.2..0.2) };
            }
        }
        let (img, map, genders) = random_inputs(1, 64, 13);
        let label = [100.0];
        let trainable: Vec<_> = model.params.trainable_ids().collect();
        let coords: Vec<_> = (0..20)
            .map(|_| {
                let id = trainable[rng.random_range(0..trainable.len())];
                (id, rng.random_range(0..model.params.get(id).numel()))
            })
            .collect();
        let net = &model.net;
        let report = check_param_gradients(&model.params, &coords, 1e-5, |g| {
            let x = g.constant(img.clone());
            let m = g.constant(map.clone());
            let out = net.forward(g, x, m, &genders).unwrap();
            g.smooth_l1_loss(out.output, &label)
        });
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
