//! The embedding extractor: a unidirectional LSTM stack over 80-frame mel
//! crops, a linear projection of the final hidden state, and L2
//! normalization. The same architecture serves as speaker extractor and
//! environment extractor; only the training corpus and grouping differ.

use crate::autodiff::graph::EPS_NORM;
use crate::autodiff::{
    lstm_cell_from_pre, AdamState, Graph, LstmIds, LstmParams, NamedParam, NodeId, Shape, Tensor,
};
use crate::checkpoint::Container;
use crate::corpus::{sample_ge2e_batch, FeatureStore, Ge2eBatch, GroupBy, Manifest};
use crate::dsp::MelSpectrogram;
use crate::error::{EattsError, Result};
use crate::ge2e::{ge2e_loss_graph, Ge2eScale};
use crate::rng::Rng;
use std::path::Path;

/// Minimum value the similarity scale w is clamped to after each step.
pub const W_FLOOR: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub n_lstm_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub crop_frames: usize,
    pub s_groups: usize,
    pub u_per_group: usize,
    pub n_mels: usize,
    pub learning_rate: f64,
}

impl ExtractorConfig {
    /// Paper-scale defaults: 3x256 LSTM, 256-dim embedding, batches of
    /// 64 groups x 10 utterances.
    pub fn paper() -> ExtractorConfig {
        ExtractorConfig {
            n_lstm_layers: 3,
            hidden_dim: 256,
            embed_dim: 256,
            crop_frames: 80,
            s_groups: 64,
            u_per_group: 10,
            n_mels: 80,
            learning_rate: 1e-3,
        }
    }

    /// Desk-scale defaults sized for minutes-long CPU runs.
    pub fn desk() -> ExtractorConfig {
        ExtractorConfig {
            n_lstm_layers: 2,
            hidden_dim: 64,
            embed_dim: 32,
            crop_frames: 80,
            s_groups: 8,
            u_per_group: 4,
            n_mels: 80,
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_frames < 1 || self.embed_dim < 2 || self.u_per_group < 2 {
            return Err(EattsError::Config(format!(
                "extractor config out of range: crop {}, embed {}, u {}",
                self.crop_frames, self.embed_dim, self.u_per_group
            )));
        }
        if self.n_lstm_layers < 1 || self.hidden_dim < 1 || self.n_mels < 1 {
            return Err(EattsError::Config("zero-sized extractor dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub layers: Vec<LstmParams<f32>>,
    pub proj_w: Tensor<f32>,
    pub proj_b: Tensor<f32>,
    pub scale: Ge2eScale,
}

impl ExtractorModel {
    pub fn init(config: ExtractorConfig, seed: u64) -> Result<ExtractorModel> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(config.n_lstm_layers);
        let mut d_in = config.n_mels;
        for _ in 0..config.n_lstm_layers {
            layers.push(LstmParams::init(d_in, config.hidden_dim, &mut rng));
            d_in = config.hidden_dim;
        }
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        let proj_w = Tensor::uniform(
            Shape::matrix(config.hidden_dim, config.embed_dim),
            bound,
            &mut rng,
        );
        let proj_b = Tensor::uniform(Shape::vector(config.embed_dim), bound, &mut rng);
        Ok(ExtractorModel {
            config,
            layers,
            proj_w,
            proj_b,
            scale: Ge2eScale::default_init(),
        })
    }

    /// All trainable parameters in a stable order.
    pub fn named_params(&self) -> Vec<NamedParam<f32>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("lstm{i}")));
        }
        out.push(NamedParam::new("proj.w", self.proj_w.clone()));
        out.push(NamedParam::new("proj.b", self.proj_b.clone()));
        out.push(NamedParam::new(
            "scale.w",
            Tensor::scalar(self.scale.w as f32),
        ));
        out.push(NamedParam::new(
            "scale.b",
            Tensor::scalar(self.scale.b as f32),
        ));
        out
    }

    /// Restores parameter values from the order produced by `named_params`.
    pub fn load_params(&mut self, params: &[NamedParam<f32>]) {
        let mut it = params.iter();
        for layer in self.layers.iter_mut() {
            layer.w_x = it.next().expect("w_x").value.clone();
            layer.w_h = it.next().expect("w_h").value.clone();
            layer.bias = it.next().expect("bias").value.clone();
        }
        self.proj_w = it.next().expect("proj.w").value.clone();
        self.proj_b = it.next().expect("proj.b").value.clone();
        self.scale.w = it.next().expect("scale.w").value.data()[0] as f64;
        self.scale.b = it.next().expect("scale.b").value.data()[0] as f64;
    }

    /// Runs the LSTM stack over a batch of crops staged time-major
    /// ((T*B) x n_mels) and returns the unit-normalized embeddings (B x d)
    /// plus the staged parameter leaf ids in `named_params` order (without
    /// the GE2E scale, which the loss stages separately).
    fn forward_graph(
        &self,
        g: &mut Graph<f32>,
        x_all: NodeId,
        batch: usize,
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let t_frames = g.shape(x_all).rows() / batch;
        let mut layer_input = x_all;
        let mut last_h = None;
        let mut param_ids = Vec::new();
        for layer in &self.layers {
            let ids = LstmIds {
                w_x: g.leaf(&layer.w_x.clone().requires_grad(trainable)),
                w_h: g.leaf(&layer.w_h.clone().requires_grad(trainable)),
                bias: g.leaf(&layer.bias.clone().requires_grad(trainable)),
                d_h: layer.d_h,
            };
            param_ids.extend([ids.w_x, ids.w_h, ids.bias]);
            let xw_all = g.matmul(layer_input, ids.w_x)?;
            let mut h = g.constant(
                Shape::matrix(batch, layer.d_h),
                vec![0.0; batch * layer.d_h],
            )?;
            let mut c = h;
            let mut outputs = Vec::with_capacity(t_frames);
            for t in 0..t_frames {
                let xw_t = g.slice_rows(xw_all, t * batch, batch)?;
                let (h2, c2) = lstm_cell_from_pre(g, &ids, xw_t, h, c)?;
                h = h2;
                c = c2;
                outputs.push(h);
            }
            last_h = Some(h);
            if outputs.len() == 1 {
                layer_input = outputs[0];
            } else {
                layer_input = g.concat_rows(&outputs)?;
            }
        }
        let final_h = last_h.expect("at least one layer");
        let w = g.leaf(&self.proj_w.clone().requires_grad(trainable));
        let b = g.leaf(&self.proj_b.clone().requires_grad(trainable));
        param_ids.extend([w, b]);
        let projected = g.matmul(final_h, w)?;
        let pre_embed = g.broadcast_row_add(projected, b)?;
        // Row-wise L2 normalization.
        let mut rows = Vec::with_capacity(batch);
        for r in 0..batch {
            let row = g.slice_rows(pre_embed, r, 1)?;
            let vec = g.reshape(row, Shape::vector(self.config.embed_dim))?;
            let unit = g.l2_normalize(vec)?;
            rows.push(g.reshape(unit, Shape::matrix(1, self.config.embed_dim))?);
        }
        Ok((g.concat_rows(&rows)?, param_ids))
    }

    /// Stages a batch of crops time-major: row t*B + b holds frame t of
    /// crop b.
    fn stage_crops(&self, g: &mut Graph<f32>, crops: &[Vec<f32>]) -> Result<NodeId> {
        let t_frames = self.config.crop_frames;
        let d = self.config.n_mels;
        for (b, crop) in crops.iter().enumerate() {
            if crop.len() != t_frames * d {
                return Err(EattsError::dim(
                    format!("crop {b}"),
                    &[crop.len() / d.max(1), d],
                    &[t_frames, d],
                ));
            }
        }
        let batch = crops.len();
        let mut data = vec![0.0f32; t_frames * batch * d];
        for (b, crop) in crops.iter().enumerate() {
            for t in 0..t_frames {
                let dst = (t * batch + b) * d;
                data[dst..dst + d].copy_from_slice(&crop[t * d..(t + 1) * d]);
            }
        }
        g.constant(Shape::matrix(t_frames * batch, d), data)
    }

    /// Stages a whole batch of crops and runs the forward pass, returning
    /// the (B x embed_dim) embedding node plus the staged parameter ids
    /// (named order, GE2E scale excluded). Used by joint TTS training.
    pub fn forward_crops_graph(
        &self,
        g: &mut Graph<f32>,
        crops: &[Vec<f32>],
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let x_all = self.stage_crops(g, crops)?;
        self.forward_graph(g, x_all, crops.len(), trainable)
    }

    /// Embeds one crop of exactly crop_frames x n_mels.
    pub fn forward_crop(&self, crop: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = self.stage_crops(&mut g, std::slice::from_ref(&crop.to_vec()))?;
        let (emb, _) = self.forward_graph(&mut g, x, 1, false)?;
        Ok(g.value(emb).to_vec())
    }

    /// Utterance-level embedding: crop_frames windows at 50% overlap (plus a
    /// tail window when needed), embedded individually, averaged, and
    /// renormalized.
    pub fn infer_utterance(&self, mel: &MelSpectrogram) -> Result<Vec<f32>> {
        let t = mel.n_frames;
        let crop = self.config.crop_frames;
        if t < crop {
            return Err(EattsError::Contract(format!(
                "utterance has {t} frames, extractor needs >= {crop}"
            )));
        }
        let mut starts = Vec::new();
        let stride = (crop / 2).max(1);
        let mut s = 0;
        while s + crop <= t {
            starts.push(s);
            s += stride;
        }
        let last = t - crop;
        if *starts.last().unwrap() != last {
            starts.push(last);
        }
        let crops: Vec<Vec<f32>> = starts
            .iter()
            .map(|&st| mel.crop(st, crop).iter().map(|&v| v as f32).collect())
            .collect();
        let mut g = Graph::new();
        let x = self.stage_crops(&mut g, &crops)?;
        let (emb, _) = self.forward_graph(&mut g, x, crops.len(), false)?;
        let all = g.value(emb);
        let d = self.config.embed_dim;
        let mut mean = vec![0.0f32; d];
        for w in 0..crops.len() {
            for i in 0..d {
                mean[i] += all[w * d + i];
            }
        }
        for v in mean.iter_mut() {
            *v /= crops.len() as f32;
        }
        let norm = mean.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm <= EPS_NORM {
            return Err(EattsError::Degenerate(
                "utterance embedding collapsed to zero".into(),
            ));
        }
        let k = 1.0 / (norm + EPS_NORM) as f32;
        for v in mean.iter_mut() {
            *v *= k;
        }
        Ok(mean)
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_u64("meta.kind", vec![1]);
        c.push_u64(
            "meta.config",
            vec![
                self.config.n_lstm_layers as u64,
                self.config.hidden_dim as u64,
                self.config.embed_dim as u64,
                self.config.crop_frames as u64,
                self.config.s_groups as u64,
                self.config.u_per_group as u64,
                self.config.n_mels as u64,
            ],
        );
        c.push_f64("meta.learning_rate", vec![1], vec![self.config.learning_rate]);
        for p in self.named_params() {
            c.push_f32(
                p.name.clone(),
                p.value.shape().dims().to_vec(),
                p.value.data().to_vec(),
            );
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn from_container(c: &Container) -> Result<ExtractorModel> {
        if c.get_u64_scalar("meta.kind")? != 1 {
            return Err(EattsError::Checkpoint(
                "not an extractor checkpoint (meta.kind != 1)".into(),
            ));
        }
        let cfg = c.get_u64("meta.config")?;
        if cfg.len() != 7 {
            return Err(EattsError::Checkpoint("bad meta.config length".into()));
        }
        let config = ExtractorConfig {
            n_lstm_layers: cfg[0] as usize,
            hidden_dim: cfg[1] as usize,
            embed_dim: cfg[2] as usize,
            crop_frames: cfg[3] as usize,
            s_groups: cfg[4] as usize,
            u_per_group: cfg[5] as usize,
            n_mels: cfg[6] as usize,
            learning_rate: c.get_f64("meta.learning_rate")?.1[0],
        };
        let mut model = ExtractorModel::init(config, 0)?;
        let mut params = model.named_params();
        for p in params.iter_mut() {
            let (dims, data) = c.get_f32(&p.name)?;
            p.value = Tensor::new(Shape::new(dims)?, data.to_vec())?;
        }
        model.load_params(&params);
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<ExtractorModel> {
        ExtractorModel::from_container(&Container::read(path)?)
    }
}

/// One GE2E training step over an already-sampled batch; returns the loss.
pub fn train_step(
    model: &mut ExtractorModel,
    batch: &Ge2eBatch,
    adam: &mut AdamState<f32>,
    params: &mut Vec<NamedParam<f32>>,
) -> Result<f64> {
    let groups = batch.groups();
    let per_group = batch.per_group;
    let mut g = Graph::new();
    let x_all = model.stage_crops(&mut g, &batch.crops)?;
    // Stage from the live param set so Adam updates flow through.
    model.load_params(params);
    let (emb, mut param_ids) = model.forward_graph(&mut g, x_all, batch.total(), true)?;
    let w_node = g.leaf(&Tensor::scalar(model.scale.w as f32).requires_grad(true));
    let b_node = g.leaf(&Tensor::scalar(model.scale.b as f32).requires_grad(true));
    param_ids.extend([w_node, b_node]);
    let loss = ge2e_loss_graph(&mut g, emb, w_node, b_node, groups, per_group)?;
    let loss_val = g.value(loss)[0] as f64;
    if !loss_val.is_finite() {
        return Err(EattsError::Numeric {
            name: "ge2e_loss".into(),
            detail: format!("non-finite loss {loss_val}"),
        });
    }
    let grads_map = g.backward(loss)?;
    debug_assert_eq!(param_ids.len(), params.len());
    let grads: Vec<Vec<f32>> = param_ids
        .iter()
        .map(|&id| grads_map.get(id).expect("param leaf gradient").to_vec())
        .collect();
    adam.step(params, &grads)?;
    // Keep w positive.
    for p in params.iter_mut() {
        if p.name == "scale.w" {
            let v = p.value.data_mut();
            if v[0] < W_FLOOR {
                v[0] = W_FLOOR;
            }
        }
    }
    model.load_params(params);
    Ok(loss_val)
}

/// Trains an extractor with GE2E over crops sampled from the manifest.
/// Deterministic in the seed; returns the model and the loss trace.
pub fn train_extractor(
    manifest: &Manifest,
    store: &FeatureStore,
    group_by: GroupBy,
    config: ExtractorConfig,
    n_steps: usize,
    seed: u64,
) -> Result<(ExtractorModel, Vec<f64>)> {
    config.validate()?;
    let mut model = ExtractorModel::init(config.clone(), seed)?;
    let mut params = model.named_params();
    let mut adam = AdamState::new(&params, config.learning_rate);
    let mut rng = Rng::new(seed ^ 0x5a5a);
    let mut losses = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let batch = sample_ge2e_batch(
            manifest,
            store,
            group_by,
            config.s_groups,
            config.u_per_group,
            config.crop_frames,
            &mut rng,
        )?;
        let loss = train_step(&mut model, &batch, &mut adam, &mut params)
            .map_err(|e| e.in_stage(&format!("extractor step {step}")))?;
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, UtteranceRecord};
    use std::collections::BTreeMap;

    fn tiny_config() -> ExtractorConfig {
        ExtractorConfig {
            n_lstm_layers: 1,
            hidden_dim: 8,
            embed_dim: 4,
            crop_frames: 6,
            s_groups: 2,
            u_per_group: 2,
            n_mels: 5,
            learning_rate: 5e-3,
        }
    }

    fn random_crop(cfg: &ExtractorConfig, seed: u64) -> Vec<f32> {
        let mut rng = Rng::new(seed);
        (0..cfg.crop_frames * cfg.n_mels)
            .map(|_| rng.range(-1.0, 1.0) as f32)
            .collect()
    }

    #[test]
    fn embedding_is_unit_norm() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg.clone(), 3).unwrap();
        let e = model.forward_crop(&random_crop(&cfg, 9)).unwrap();
        let norm: f64 = e.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }

    #[test]
    fn zero_model_rejects_with_degenerate_error() {
        let cfg = tiny_config();
        let mut model = ExtractorModel::init(cfg.clone(), 3).unwrap();
        // Zero every parameter: the pre-embedding collapses to zero.
        let mut params = model.named_params();
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        model.load_params(&params);
        let err = model.forward_crop(&random_crop(&cfg, 1)).unwrap_err();
        assert!(matches!(err, EattsError::Degenerate(_)), "{err}");
    }

    #[test]
    fn same_crop_same_weights_bitwise_identical() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg.clone(), 5).unwrap();
        let crop = random_crop(&cfg, 2);
        assert_eq!(
            model.forward_crop(&crop).unwrap(),
            model.forward_crop(&crop).unwrap()
        );
    }

    #[test]
    fn wrong_crop_shape_is_dimension_error() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg, 5).unwrap();
        assert!(matches!(
            model.forward_crop(&[0.0; 7]),
            Err(EattsError::Dimension { .. })
        ));
    }

    #[test]
    fn single_window_inference_equals_forward_crop() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg.clone(), 7).unwrap();
        let crop = random_crop(&cfg, 3);
        let mel = MelSpectrogram::new(
            cfg.crop_frames,
            cfg.n_mels,
            crop.iter().map(|&v| v as f64).collect(),
            0,
        );
        let via_infer = model.infer_utterance(&mel).unwrap();
        let via_crop = model.forward_crop(&crop).unwrap();
        for (a, b) in via_infer.iter().zip(via_crop.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tiled_periodic_utterance_matches_crop_embedding() {
        // The crop itself is built from two copies of a half-crop pattern,
        // so every 50%-overlap window sees the identical crop.
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg.clone(), 11).unwrap();
        let half = cfg.crop_frames / 2;
        let mut rng = Rng::new(4);
        let pattern: Vec<f64> = (0..half * cfg.n_mels).map(|_| rng.range(-1.0, 1.0)).collect();
        let crop_f64: Vec<f64> = [pattern.clone(), pattern.clone()].concat();
        let tiles = 3;
        let mel_data: Vec<f64> = std::iter::repeat_with(|| pattern.clone())
            .take(tiles * 2)
            .flatten()
            .collect();
        let mel = MelSpectrogram::new(tiles * cfg.crop_frames, cfg.n_mels, mel_data, 0);
        let crop: Vec<f32> = crop_f64.iter().map(|&v| v as f32).collect();
        let via_infer = model.infer_utterance(&mel).unwrap();
        let via_crop = model.forward_crop(&crop).unwrap();
        for (a, b) in via_infer.iter().zip(via_crop.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn too_short_utterance_rejected() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg.clone(), 1).unwrap();
        let mel = MelSpectrogram::new(
            cfg.crop_frames - 1,
            cfg.n_mels,
            vec![0.0; (cfg.crop_frames - 1) * cfg.n_mels],
            0,
        );
        assert!(model.infer_utterance(&mel).is_err());
    }

    fn separable_corpus(cfg: &ExtractorConfig) -> (Manifest, FeatureStore) {
        // Four groups with distinct mel signatures plus noise.
        let mut records = Vec::new();
        let mut mels = BTreeMap::new();
        let mut rng = Rng::new(42);
        for g in 0..4 {
            for u in 0..6 {
                let utt_id = format!("g{g}_u{u}");
                let frames = cfg.crop_frames + 4;
                let data: Vec<f64> = (0..frames * cfg.n_mels)
                    .map(|i| {
                        let channel = i % cfg.n_mels;
                        let signature = if channel == g { 2.0 } else { -1.0 };
                        signature + 0.3 * rng.normal()
                    })
                    .collect();
                mels.insert(utt_id.clone(), MelSpectrogram::new(frames, cfg.n_mels, data, 0));
                records.push(UtteranceRecord {
                    utt_id,
                    speaker_id: format!("g{g}"),
                    env_id: format!("e{}", u % 2),
                    split: Split::Train,
                    wav_path: String::new(),
                    symbols: vec![0],
                    durations: vec![frames],
                });
            }
        }
        (Manifest { records }, FeatureStore::from_mels(mels))
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_config();
        let (manifest, store) = separable_corpus(&cfg);
        let (model, losses) =
            train_extractor(&manifest, &store, GroupBy::Speaker, cfg.clone(), 0, 17).unwrap();
        assert!(losses.is_empty());
        let fresh = ExtractorModel::init(cfg, 17).unwrap();
        for (a, b) in model.named_params().iter().zip(fresh.named_params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "param {}", a.name);
        }
    }

    #[test]
    fn same_seed_identical_loss_traces() {
        let mut cfg = tiny_config();
        cfg.s_groups = 3;
        let (manifest, store) = separable_corpus(&cfg);
        let (_, l1) =
            train_extractor(&manifest, &store, GroupBy::Speaker, cfg.clone(), 5, 23).unwrap();
        let (_, l2) =
            train_extractor(&manifest, &store, GroupBy::Speaker, cfg, 5, 23).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn loss_decreases_on_separable_groups() {
        let mut cfg = tiny_config();
        cfg.s_groups = 4;
        cfg.u_per_group = 3;
        let (manifest, store) = separable_corpus(&cfg);
        let (model, losses) =
            train_extractor(&manifest, &store, GroupBy::Speaker, cfg, 40, 31).unwrap();
        let first = losses[..5].iter().sum::<f64>() / 5.0;
        let last = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            last < first * 0.8,
            "loss did not fall: first {first}, last {last}"
        );
        assert!(model.scale.w > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = tiny_config();
        let model = ExtractorModel::init(cfg, 13).unwrap();
        let dir = std::env::temp_dir().join("eatts_extractor_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.eatts");
        model.save(&path).unwrap();
        let back = ExtractorModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.named_params().iter().zip(model.named_params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "param {}", a.name);
        }
    }
}
