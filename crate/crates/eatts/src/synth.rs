//! Conditioned mel synthesis: symbol encoder, length regulator driven by
//! ground-truth durations, broadcast-concat conditioning on speaker and
//! environment embeddings, and a Prenet + autoregressive LSTM decoder.
//!
//! Two objectives are implemented. The proposed one conditions on
//! GE2E-pretrained extractors and minimizes L(E_s) + L(E_e) + L_recon; the
//! baseline trains fresh extractors jointly under speaker/environment
//! classification losses plus the same reconstruction term.

use crate::autodiff::{
    lstm_cell, lstm_cell_from_pre, AdamState, Graph, LstmIds, LstmParams, NamedParam, NodeId,
    Real, Shape, Tensor,
};
use crate::checkpoint::Container;
use crate::corpus::{FeatureStore, GroupBy, Manifest, Split, UtteranceRecord};
use crate::dsp::{MelSpectrogram, MEL_FLOOR};
use crate::error::{EattsError, Result};
use crate::extractor::{ExtractorModel, W_FLOOR};
use crate::ge2e::{ge2e_loss, ge2e_loss_graph, EmbeddingBatch};
use crate::rng::Rng;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Proposed,
    Baseline,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Proposed => "proposed",
            TrainMode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "proposed" => Ok(TrainMode::Proposed),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(EattsError::Parameter(format!(
                "mode must be proposed|baseline, got '{other}'"
            )),),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub d_enc: usize,
    pub prenet_dim: usize,
    pub decoder_dim: usize,
    pub n_mels: usize,
    pub spk_embed_dim: usize,
    pub env_embed_dim: usize,
    /// Teacher-forced window length during training.
    pub decode_frames: usize,
    pub batch_pairs: usize,
    pub utts_per_pair: usize,
    pub learning_rate: f64,
    /// Weights on (L(E_s), L(E_e), L_recon); the paper's total is the
    /// unweighted sum.
    pub loss_weights: (f64, f64, f64),
}

impl SynthConfig {
    pub fn desk() -> SynthConfig {
        SynthConfig {
            vocab_size: crate::corpus::VOCAB_SIZE,
            d_enc: 32,
            prenet_dim: 32,
            decoder_dim: 64,
            n_mels: 80,
            spk_embed_dim: 32,
            env_embed_dim: 32,
            decode_frames: 80,
            batch_pairs: 4,
            utts_per_pair: 2,
            learning_rate: 2e-3,
            loss_weights: (1.0, 1.0, 1.0),
        }
    }

    pub fn paper() -> SynthConfig {
        SynthConfig {
            vocab_size: crate::corpus::VOCAB_SIZE,
            d_enc: 256,
            prenet_dim: 256,
            decoder_dim: 256,
            n_mels: 80,
            spk_embed_dim: 256,
            env_embed_dim: 256,
            decode_frames: 80,
            batch_pairs: 8,
            utts_per_pair: 2,
            learning_rate: 1e-3,
            loss_weights: (1.0, 1.0, 1.0),
        }
    }

    /// Width of the conditioned encoder timeline fed to the decoder.
    pub fn cond_width(&self) -> usize {
        self.d_enc + self.spk_embed_dim + self.env_embed_dim
    }

    /// Full decoder input width including previous-frame feedback.
    pub fn decoder_input_width(&self) -> usize {
        self.cond_width() + self.prenet_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_enc == 0
            || self.prenet_dim == 0
            || self.decoder_dim == 0
            || self.n_mels == 0
            || self.decode_frames == 0
        {
            return Err(EattsError::Config("zero-sized synth dimension".into()));
        }
        if self.batch_pairs < 2 || self.utts_per_pair < 2 {
            return Err(EattsError::Config(
                "tts training needs >= 2 pairs and >= 2 utterances per pair".into(),
            ));
        }
        Ok(())
    }
}

/// The decoder's initial "previous frame": an all-log-floor mel frame.
pub fn go_frame(n_mels: usize) -> Vec<f32> {
    vec![MEL_FLOOR.ln() as f32; n_mels]
}

// ── Plain operations ────────────────────────────────────────────────────

/// Repeats row n of `encoded` (n_rows x dim, row-major) durations[n] times.
pub fn length_regulate(
    encoded: &[f32],
    n_rows: usize,
    dim: usize,
    durations: &[usize],
) -> Result<Vec<f32>> {
    if durations.len() != n_rows {
        return Err(EattsError::dim(
            "length_regulate",
            &[n_rows],
            &[durations.len()],
        ));
    }
    let total: usize = durations.iter().sum();
    let mut out = Vec::with_capacity(total * dim);
    for (n, &dur) in durations.iter().enumerate() {
        for _ in 0..dur {
            out.extend_from_slice(&encoded[n * dim..(n + 1) * dim]);
        }
    }
    Ok(out)
}

/// Appends the same speaker and environment vectors to every frame row.
pub fn condition_concat(
    regulated: &[f32],
    frames: usize,
    d_enc: usize,
    spk: &[f32],
    env: &[f32],
) -> Vec<f32> {
    let width = d_enc + spk.len() + env.len();
    let mut out = Vec::with_capacity(frames * width);
    for t in 0..frames {
        out.extend_from_slice(&regulated[t * d_enc..(t + 1) * d_enc]);
        out.extend_from_slice(spk);
        out.extend_from_slice(env);
    }
    out
}

/// Mean squared error over all entries of two equally-shaped frame blocks.
pub fn recon_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(EattsError::dim("recon_loss", &[pred.len()], &[target.len()]));
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

// ── Parameters ──────────────────────────────────────────────────────────

/// The TTS network parameters (without the embedding extractors).
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub symbol_table: Tensor<f32>,
    pub encoder: LstmParams<f32>,
    pub prenet_w1: Tensor<f32>,
    pub prenet_b1: Tensor<f32>,
    pub prenet_w2: Tensor<f32>,
    pub prenet_b2: Tensor<f32>,
    pub decoder: LstmParams<f32>,
    pub out_w: Tensor<f32>,
    pub out_b: Tensor<f32>,
}

impl SynthParams {
    pub fn init(cfg: &SynthConfig, rng: &mut Rng) -> SynthParams {
        let u = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        SynthParams {
            symbol_table: Tensor::uniform(
                Shape::matrix(cfg.vocab_size, cfg.d_enc),
                1.0,
                rng,
            ),
            encoder: LstmParams::init(cfg.d_enc, cfg.d_enc, rng),
            prenet_w1: Tensor::uniform(
                Shape::matrix(cfg.n_mels, cfg.prenet_dim),
                u(cfg.n_mels),
                rng,
            ),
            prenet_b1: Tensor::zeros(Shape::vector(cfg.prenet_dim)),
            prenet_w2: Tensor::uniform(
                Shape::matrix(cfg.prenet_dim, cfg.prenet_dim),
                u(cfg.prenet_dim),
                rng,
            ),
            prenet_b2: Tensor::zeros(Shape::vector(cfg.prenet_dim)),
            decoder: LstmParams::init(cfg.decoder_input_width(), cfg.decoder_dim, rng),
            out_w: Tensor::uniform(
                Shape::matrix(cfg.decoder_dim, cfg.n_mels),
                u(cfg.decoder_dim),
                rng,
            ),
            out_b: Tensor::zeros(Shape::vector(cfg.n_mels)),
        }
    }

    pub fn named_params(&self) -> Vec<NamedParam<f32>> {
        let mut out = vec![NamedParam::new("symtab", self.symbol_table.clone())];
        out.extend(self.encoder.named("enc"));
        out.push(NamedParam::new("prenet.w1", self.prenet_w1.clone()));
        out.push(NamedParam::new("prenet.b1", self.prenet_b1.clone()));
        out.push(NamedParam::new("prenet.w2", self.prenet_w2.clone()));
        out.push(NamedParam::new("prenet.b2", self.prenet_b2.clone()));
        out.extend(self.decoder.named("dec"));
        out.push(NamedParam::new("out.w", self.out_w.clone()));
        out.push(NamedParam::new("out.b", self.out_b.clone()));
        out
    }

    pub fn load_params(&mut self, params: &[NamedParam<f32>]) {
        let mut it = params.iter();
        let mut next = || it.next().expect("synth param").value.clone();
        self.symbol_table = next();
        self.encoder.w_x = next();
        self.encoder.w_h = next();
        self.encoder.bias = next();
        self.prenet_w1 = next();
        self.prenet_b1 = next();
        self.prenet_w2 = next();
        self.prenet_b2 = next();
        self.decoder.w_x = next();
        self.decoder.w_h = next();
        self.decoder.bias = next();
        self.out_w = next();
        self.out_b = next();
    }
}

/// Tape handles for staged synth parameters.
pub struct StagedSynth {
    pub symtab: NodeId,
    pub enc: LstmIds,
    pub prenet_w1: NodeId,
    pub prenet_b1: NodeId,
    pub prenet_w2: NodeId,
    pub prenet_b2: NodeId,
    pub dec: LstmIds,
    pub out_w: NodeId,
    pub out_b: NodeId,
    pub param_ids: Vec<NodeId>,
}

pub fn stage_synth<T: Real>(
    g: &mut Graph<T>,
    p: &SynthParams,
    trainable: bool,
) -> StagedSynth {
    let mut ids = Vec::new();
    let mut stage = |g: &mut Graph<T>, t: &Tensor<f32>| -> NodeId {
        let id = g.leaf(&t.cast::<T>().requires_grad(trainable));
        ids.push(id);
        id
    };
    let symtab = stage(g, &p.symbol_table);
    let enc = LstmIds {
        w_x: stage(g, &p.encoder.w_x),
        w_h: stage(g, &p.encoder.w_h),
        bias: stage(g, &p.encoder.bias),
        d_h: p.encoder.d_h,
    };
    let prenet_w1 = stage(g, &p.prenet_w1);
    let prenet_b1 = stage(g, &p.prenet_b1);
    let prenet_w2 = stage(g, &p.prenet_w2);
    let prenet_b2 = stage(g, &p.prenet_b2);
    let dec = LstmIds {
        w_x: stage(g, &p.decoder.w_x),
        w_h: stage(g, &p.decoder.w_h),
        bias: stage(g, &p.decoder.bias),
        d_h: p.decoder.d_h,
    };
    let out_w = stage(g, &p.out_w);
    let out_b = stage(g, &p.out_b);
    StagedSynth {
        symtab,
        enc,
        prenet_w1,
        prenet_b1,
        prenet_w2,
        prenet_b2,
        dec,
        out_w,
        out_b,
        param_ids: ids,
    }
}

/// Encoder: symbol-table lookup plus one unidirectional LSTM over the
/// symbol sequence. Returns (n_symbols x d_enc).
pub fn encode_symbols<T: Real>(
    g: &mut Graph<T>,
    staged: &StagedSynth,
    cfg: &SynthConfig,
    symbols: &[usize],
) -> Result<NodeId> {
    if symbols.is_empty() {
        return Err(EattsError::EmptyInput("empty symbol sequence".into()));
    }
    for &s in symbols {
        if s >= cfg.vocab_size {
            return Err(EattsError::Parameter(format!(
                "symbol id {s} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    // Row gather as a constant selection matrix times the table.
    let n = symbols.len();
    let mut sel = vec![T::ZERO; n * cfg.vocab_size];
    for (r, &s) in symbols.iter().enumerate() {
        sel[r * cfg.vocab_size + s] = T::ONE;
    }
    let sel = g.constant(Shape::matrix(n, cfg.vocab_size), sel)?;
    let embedded = g.matmul(sel, staged.symtab)?;
    // LSTM over the symbol timeline, batch of one.
    let mut h = g.constant(Shape::matrix(1, cfg.d_enc), vec![T::ZERO; cfg.d_enc])?;
    let mut c = h;
    let mut outputs = Vec::with_capacity(n);
    for t in 0..n {
        let x = g.slice_rows(embedded, t, 1)?;
        let (h2, c2) = lstm_cell(g, &staged.enc, x, h, c)?;
        h = h2;
        c = c2;
        outputs.push(h);
    }
    g.concat_rows(&outputs)
}

/// Length regulation on the tape: a constant (frames x n_symbols) selection
/// matrix repeats encoder rows per duration. Truncates to `max_frames` when
/// given.
pub fn regulate_graph<T: Real>(
    g: &mut Graph<T>,
    encoded: NodeId,
    durations: &[usize],
    max_frames: Option<usize>,
) -> Result<NodeId> {
    let n = g.shape(encoded).rows();
    if durations.len() != n {
        return Err(EattsError::dim(
            "length_regulate",
            &[n],
            &[durations.len()],
        ));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(EattsError::Parameter("zero duration".into()));
    }
    let total: usize = durations.iter().sum();
    let frames = max_frames.map_or(total, |m| m.min(total));
    let mut sel = vec![T::ZERO; frames * n];
    let mut t = 0usize;
    'fill: for (sym, &dur) in durations.iter().enumerate() {
        for _ in 0..dur {
            if t >= frames {
                break 'fill;
            }
            sel[t * n + sym] = T::ONE;
            t += 1;
        }
    }
    let sel = g.constant(Shape::matrix(frames, n), sel)?;
    g.matmul(sel, encoded)
}

/// Broadcasts an embedding row over `frames` rows: ones (frames x 1) times
/// the (1 x d) embedding.
fn broadcast_rows<T: Real>(g: &mut Graph<T>, row: NodeId, frames: usize) -> Result<NodeId> {
    let d = g.shape(row).numel();
    let row = g.reshape(row, Shape::matrix(1, d))?;
    let ones = g.constant(Shape::matrix(frames, 1), vec![T::ONE; frames])?;
    g.matmul(ones, row)
}

/// Prenet: two affine + ReLU layers (dropout disabled for determinism).
fn prenet_graph<T: Real>(g: &mut Graph<T>, staged: &StagedSynth, x: NodeId) -> Result<NodeId> {
    let a = g.matmul(x, staged.prenet_w1)?;
    let a = g.broadcast_row_add(a, staged.prenet_b1)?;
    let a = g.relu(a);
    let b = g.matmul(a, staged.prenet_w2)?;
    let b = g.broadcast_row_add(b, staged.prenet_b2)?;
    Ok(g.relu(b))
}

/// Teacher-forced decode over a batch. `cond` holds one (frames x cond_w)
/// node per utterance; `targets` is the time-major ground truth
/// ((frames*batch) x n_mels, row t*batch + b). Returns time-major predicted
/// frames of the same shape.
pub fn decode_teacher<T: Real>(
    g: &mut Graph<T>,
    staged: &StagedSynth,
    cfg: &SynthConfig,
    cond: &[NodeId],
    targets: NodeId,
) -> Result<NodeId> {
    let batch = cond.len();
    if batch == 0 {
        return Err(EattsError::EmptyInput("decode_teacher: empty batch".into()));
    }
    let frames = g.shape(cond[0]).rows();
    if frames == 0 {
        return Err(EattsError::EmptyInput("decode_teacher: zero frames".into()));
    }
    let cond_w = cfg.cond_width();
    for &c in cond {
        if g.shape(c).dims() != [frames, cond_w] {
            return Err(EattsError::dim(
                "decode_teacher conditioning",
                g.shape(c).dims(),
                &[frames, cond_w],
            ));
        }
    }
    // Split the fused decoder input weights into conditioning and prenet
    // blocks so each can be applied where it is cheapest.
    let w_cond = g.slice_rows(staged.dec.w_x, 0, cond_w)?;
    let w_pre = g.slice_rows(staged.dec.w_x, cond_w, cfg.prenet_dim)?;

    // Conditioning contribution, one matmul per utterance.
    let cond_pre: Vec<NodeId> = cond
        .iter()
        .map(|&c| g.matmul(c, w_cond))
        .collect::<Result<_>>()?;

    // Previous-frame feedback is fully known under teacher forcing: build
    // the time-major previous-frame block and run the Prenet in one shot.
    let tvals = g.value(targets).to_vec();
    let go = go_frame(cfg.n_mels);
    let mut prev = vec![T::ZERO; frames * batch * cfg.n_mels];
    for t in 0..frames {
        for b in 0..batch {
            let dst = (t * batch + b) * cfg.n_mels;
            if t == 0 {
                for (i, &v) in go.iter().enumerate() {
                    prev[dst + i] = T::from_f64(v as f64);
                }
            } else {
                let src = ((t - 1) * batch + b) * cfg.n_mels;
                prev[dst..dst + cfg.n_mels].copy_from_slice(&tvals[src..src + cfg.n_mels]);
            }
        }
    }
    let prev = g.constant(Shape::matrix(frames * batch, cfg.n_mels), prev)?;
    let prenet_all = prenet_graph(g, staged, prev)?;
    let pre_contrib = g.matmul(prenet_all, w_pre)?;

    let mut h = g.constant(
        Shape::matrix(batch, cfg.decoder_dim),
        vec![T::ZERO; batch * cfg.decoder_dim],
    )?;
    let mut c = h;
    let mut frames_out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut rows = Vec::with_capacity(batch);
        for cp in cond_pre.iter() {
            rows.push(g.slice_rows(*cp, t, 1)?);
        }
        let cond_t = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        let pre_t = g.slice_rows(pre_contrib, t * batch, batch)?;
        let xw = g.add(cond_t, pre_t)?;
        let (h2, c2) = lstm_cell_from_pre(g, &staged.dec, xw, h, c)?;
        h = h2;
        c = c2;
        let out = g.matmul(h, staged.out_w)?;
        frames_out.push(g.broadcast_row_add(out, staged.out_b)?);
    }
    g.concat_rows(&frames_out)
}

/// Free-running decode for one utterance: each step feeds the previous
/// predicted frame back through the Prenet. Returns frames x n_mels.
pub fn decode_free<T: Real>(
    g: &mut Graph<T>,
    staged: &StagedSynth,
    cfg: &SynthConfig,
    cond: NodeId,
) -> Result<Vec<T>> {
    let frames = g.shape(cond).rows();
    if frames == 0 {
        return Err(EattsError::EmptyInput("decode_free: zero frames".into()));
    }
    let cond_w = cfg.cond_width();
    if g.shape(cond).cols() != cond_w {
        return Err(EattsError::dim(
            "decode_free conditioning",
            g.shape(cond).dims(),
            &[frames, cond_w],
        ));
    }
    let w_cond = g.slice_rows(staged.dec.w_x, 0, cond_w)?;
    let w_pre = g.slice_rows(staged.dec.w_x, cond_w, cfg.prenet_dim)?;
    let cond_pre = g.matmul(cond, w_cond)?;

    let go: Vec<T> = go_frame(cfg.n_mels)
        .iter()
        .map(|&v| T::from_f64(v as f64))
        .collect();
    let mut prev = g.constant(Shape::matrix(1, cfg.n_mels), go)?;
    let mut h = g.constant(
        Shape::matrix(1, cfg.decoder_dim),
        vec![T::ZERO; cfg.decoder_dim],
    )?;
    let mut c = h;
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let pre = prenet_graph(g, staged, prev)?;
        let pre_x = g.matmul(pre, w_pre)?;
        let cond_t = g.slice_rows(cond_pre, t, 1)?;
        let xw = g.add(cond_t, pre_x)?;
        let (h2, c2) = lstm_cell_from_pre(g, &staged.dec, xw, h, c)?;
        h = h2;
        c = c2;
        let frame = g.matmul(h, staged.out_w)?;
        let frame = g.broadcast_row_add(frame, staged.out_b)?;
        out.extend_from_slice(g.value(frame));
        prev = frame;
    }
    Ok(out)
}

// ── Classifier heads (baseline supervision and eval probes reuse this) ──

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub labels: Vec<String>,
}

impl ClassifierHead {
    pub fn init(input_dim: usize, labels: Vec<String>, rng: &mut Rng) -> ClassifierHead {
        let bound = 1.0 / (input_dim as f64).sqrt();
        ClassifierHead {
            w: Tensor::uniform(Shape::matrix(input_dim, labels.len()), bound, rng),
            b: Tensor::zeros(Shape::vector(labels.len())),
            labels,
        }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| EattsError::Lookup(format!("label '{label}' unknown to classifier")))
    }

    /// Plain logits for one embedding.
    pub fn logits(&self, emb: &[f32]) -> Vec<f32> {
        let n = self.labels.len();
        let d = emb.len();
        let mut out = self.b.data().to_vec();
        let w = self.w.data();
        for (i, &e) in emb.iter().enumerate() {
            for k in 0..n {
                out[k] += e * w[i * n + k];
            }
        }
        debug_assert_eq!(self.w.shape().dims(), &[d, n]);
        out
    }
}

/// Mean softmax cross-entropy of logits rows against integer labels,
/// built on the tape with max-subtraction.
pub fn cross_entropy_graph<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let (rows, classes) = (g.shape(logits).rows(), g.shape(logits).cols());
    if labels.len() != rows {
        return Err(EattsError::dim("cross_entropy", &[rows], &[labels.len()]));
    }
    let vals = g.value(logits).to_vec();
    let mut row_max = Vec::with_capacity(rows);
    for r in 0..rows {
        let m = vals[r * classes..(r + 1) * classes]
            .iter()
            .fold(T::from_f64(f64::NEG_INFINITY), |a, &b| a.max_val(b));
        row_max.push(m);
    }
    let max_mat: Vec<T> = (0..rows * classes).map(|i| row_max[i / classes]).collect();
    let max_mat = g.constant(Shape::matrix(rows, classes), max_mat)?;
    let max_vec = g.constant(Shape::vector(rows), row_max)?;
    let shifted = g.sub(logits, max_mat)?;
    let exps = g.exp(shifted);
    let sums = g.row_sum(exps)?;
    let log_sums = g.ln(sums);
    let lse = g.add(log_sums, max_vec)?;
    let mut ind = vec![T::ZERO; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(EattsError::Lookup(format!(
                "label index {l} outside {classes} classes"
            )));
        }
        ind[r * classes + l] = T::ONE;
    }
    let ind = g.constant(Shape::matrix(rows, classes), ind)?;
    let own = g.mul(logits, ind)?;
    let target = g.row_sum(own)?;
    let per_row = g.sub(lse, target)?;
    let total = g.sum_all(per_row);
    Ok(g.scale(total, T::from_f64(1.0 / rows as f64)))
}

// ── The full model bundle ───────────────────────────────────────────────

/// Per-step loss components. In proposed mode l_spk/l_env are the GE2E
/// losses of the two extractors; in baseline mode they are the
/// classification losses. total is always their weighted sum plus
/// reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_spk: f64,
    pub l_env: f64,
    pub l_recon: f64,
    pub total: f64,
}

/// Everything needed to synthesize: the TTS network plus the two embedding
/// extractors it was trained against (pretrained for the proposed system,
/// jointly trained for the baseline).
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub config: SynthConfig,
    pub mode: TrainMode,
    pub tts: SynthParams,
    pub spk_extractor: ExtractorModel,
    pub env_extractor: ExtractorModel,
    pub cls_spk: Option<ClassifierHead>,
    pub cls_env: Option<ClassifierHead>,
}

impl SynthModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.push_u64("meta.kind", vec![2]);
        c.push_u64(
            "meta.mode",
            vec![match self.mode {
                TrainMode::Proposed => 0,
                TrainMode::Baseline => 1,
            }],
        );
        c.push_u64(
            "meta.config",
            vec![
                self.config.vocab_size as u64,
                self.config.d_enc as u64,
                self.config.prenet_dim as u64,
                self.config.decoder_dim as u64,
                self.config.n_mels as u64,
                self.config.spk_embed_dim as u64,
                self.config.env_embed_dim as u64,
                self.config.decode_frames as u64,
                self.config.batch_pairs as u64,
                self.config.utts_per_pair as u64,
            ],
        );
        c.push_f64(
            "meta.train",
            vec![4],
            vec![
                self.config.learning_rate,
                self.config.loss_weights.0,
                self.config.loss_weights.1,
                self.config.loss_weights.2,
            ],
        );
        for p in self.tts.named_params() {
            c.push_f32(
                format!("tts.{}", p.name),
                p.value.shape().dims().to_vec(),
                p.value.data().to_vec(),
            );
        }
        c.merge_prefixed("spk_ext", &self.spk_extractor.to_container());
        c.merge_prefixed("env_ext", &self.env_extractor.to_container());
        if let Some(head) = &self.cls_spk {
            c.push_f32("cls_spk.w", head.w.shape().dims().to_vec(), head.w.data().to_vec());
            c.push_f32("cls_spk.b", head.b.shape().dims().to_vec(), head.b.data().to_vec());
            c.push_text("cls_spk.labels", &head.labels.join("\n"));
        }
        if let Some(head) = &self.cls_env {
            c.push_f32("cls_env.w", head.w.shape().dims().to_vec(), head.w.data().to_vec());
            c.push_f32("cls_env.b", head.b.shape().dims().to_vec(), head.b.data().to_vec());
            c.push_text("cls_env.labels", &head.labels.join("\n"));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<SynthModel> {
        let c = Container::read(path)?;
        if c.get_u64_scalar("meta.kind")? != 2 {
            return Err(EattsError::Checkpoint(
                "not a synth checkpoint (meta.kind != 2)".into(),
            ));
        }
        let mode = match c.get_u64_scalar("meta.mode")? {
            0 => TrainMode::Proposed,
            _ => TrainMode::Baseline,
        };
        let d = c.get_u64("meta.config")?;
        if d.len() != 10 {
            return Err(EattsError::Checkpoint("bad meta.config length".into()));
        }
        let t = c.get_f64("meta.train")?.1;
        let config = SynthConfig {
            vocab_size: d[0] as usize,
            d_enc: d[1] as usize,
            prenet_dim: d[2] as usize,
            decoder_dim: d[3] as usize,
            n_mels: d[4] as usize,
            spk_embed_dim: d[5] as usize,
            env_embed_dim: d[6] as usize,
            decode_frames: d[7] as usize,
            batch_pairs: d[8] as usize,
            utts_per_pair: d[9] as usize,
            learning_rate: t[0],
            loss_weights: (t[1], t[2], t[3]),
        };
        let mut rng = Rng::new(0);
        let mut tts = SynthParams::init(&config, &mut rng);
        let mut params = tts.named_params();
        for p in params.iter_mut() {
            let (dims, data) = c.get_f32(&format!("tts.{}", p.name))?;
            p.value = Tensor::new(Shape::new(dims)?, data.to_vec())?;
        }
        tts.load_params(&params);
        let spk_extractor = ExtractorModel::from_container(&c.sub_container("spk_ext"))?;
        let env_extractor = ExtractorModel::from_container(&c.sub_container("env_ext"))?;
        let load_head = |prefix: &str| -> Result<Option<ClassifierHead>> {
            if c.get(&format!("{prefix}.w")).is_err() {
                return Ok(None);
            }
            let (wd, w) = c.get_f32(&format!("{prefix}.w"))?;
            let (bd, b) = c.get_f32(&format!("{prefix}.b"))?;
            let labels: Vec<String> = c
                .get_text(&format!("{prefix}.labels"))?
                .lines()
                .map(String::from)
                .collect();
            Ok(Some(ClassifierHead {
                w: Tensor::new(Shape::new(wd)?, w.to_vec())?,
                b: Tensor::new(Shape::new(bd)?, b.to_vec())?,
                labels,
            }))
        };
        Ok(SynthModel {
            config,
            mode,
            tts,
            spk_extractor,
            env_extractor,
            cls_spk: load_head("cls_spk")?,
            cls_env: load_head("cls_env")?,
        })
    }

    /// Free-running synthesis conditioned on embeddings taken from the two
    /// reference mels (which may come from two different utterances).
    pub fn synthesize(
        &self,
        symbols: &[usize],
        durations: &[usize],
        spk_ref: &MelSpectrogram,
        env_ref: &MelSpectrogram,
        config_hash: u64,
    ) -> Result<MelSpectrogram> {
        let spk_emb = self.spk_extractor.infer_utterance(spk_ref)?;
        let env_emb = self.env_extractor.infer_utterance(env_ref)?;
        self.synthesize_with_embeddings(symbols, durations, &spk_emb, &env_emb, config_hash)
    }

    pub fn synthesize_with_embeddings(
        &self,
        symbols: &[usize],
        durations: &[usize],
        spk_emb: &[f32],
        env_emb: &[f32],
        config_hash: u64,
    ) -> Result<MelSpectrogram> {
        if symbols.len() != durations.len() {
            return Err(EattsError::dim(
                "synthesize",
                &[symbols.len()],
                &[durations.len()],
            ));
        }
        let total: usize = durations.iter().sum();
        let mut g = Graph::<f32>::new();
        let staged = stage_synth(&mut g, &self.tts, false);
        let encoded = encode_symbols(&mut g, &staged, &self.config, symbols)?;
        let regulated = regulate_graph(&mut g, encoded, durations, None)?;
        let spk = g.constant(
            Shape::matrix(1, spk_emb.len()),
            spk_emb.to_vec(),
        )?;
        let env = g.constant(
            Shape::matrix(1, env_emb.len()),
            env_emb.to_vec(),
        )?;
        let spk_b = broadcast_rows(&mut g, spk, total)?;
        let env_b = broadcast_rows(&mut g, env, total)?;
        let cond = g.concat_cols(&[regulated, spk_b, env_b])?;
        let frames = decode_free(&mut g, &staged, &self.config, cond)?;
        Ok(MelSpectrogram::new(
            total,
            self.config.n_mels,
            frames.iter().map(|&v| v as f64).collect(),
            config_hash,
        ))
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TtsTrainOptions {
    pub mode: TrainMode,
    pub freeze_extractors: bool,
    pub n_steps: usize,
    pub seed: u64,
}

struct BatchUtt<'a> {
    rec: &'a UtteranceRecord,
    mel: &'a MelSpectrogram,
}

fn sample_tts_batch<'a>(
    manifest: &'a Manifest,
    store: &'a FeatureStore,
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Result<Vec<BatchUtt<'a>>> {
    let train = manifest.split(Split::Train);
    let groups = train.grouped(GroupBy::Speaker);
    if groups.len() < cfg.batch_pairs {
        return Err(EattsError::Sampling(format!(
            "need {} speakers, manifest has {}",
            cfg.batch_pairs,
            groups.len()
        )));
    }
    let keys: Vec<&str> = groups.keys().copied().collect();
    let chosen = rng.choose_k(keys.len(), cfg.batch_pairs);
    let mut out = Vec::with_capacity(cfg.batch_pairs * cfg.utts_per_pair);
    for &gi in &chosen {
        let key = keys[gi];
        let eligible: Vec<&UtteranceRecord> = groups[key]
            .iter()
            .map(|r| manifest.find(&r.utt_id))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|r| {
                store
                    .get(&r.utt_id)
                    .map(|m| m.n_frames >= cfg.decode_frames)
                    .unwrap_or(false)
            })
            .collect();
        if eligible.len() < cfg.utts_per_pair {
            return Err(EattsError::Sampling(format!(
                "speaker '{key}' has {} usable utterances, need {}",
                eligible.len(),
                cfg.utts_per_pair
            )));
        }
        let picks = rng.choose_k(eligible.len(), cfg.utts_per_pair);
        for &ui in &picks {
            let rec = eligible[ui];
            out.push(BatchUtt {
                rec,
                mel: store.get(&rec.utt_id)?,
            });
        }
    }
    Ok(out)
}

/// First `frames` mel rows of an utterance as f32.
fn mel_window_f32(mel: &MelSpectrogram, frames: usize) -> Vec<f32> {
    mel.crop(0, frames).iter().map(|&v| v as f32).collect()
}

fn labels_of(manifest: &Manifest, by: GroupBy) -> Vec<String> {
    let mut labels: Vec<String> = manifest
        .split(Split::Train)
        .records
        .iter()
        .map(|r| by.key(r).to_string())
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

/// Trains the TTS bundle. Proposed mode conditions on the given pretrained
/// extractors (frozen unless `freeze_extractors` is false, which fine-tunes
/// them under the full total loss). Baseline mode re-initializes both
/// extractors and trains them jointly under classification supervision.
pub fn train_tts(
    manifest: &Manifest,
    store: &FeatureStore,
    spk_extractor: &ExtractorModel,
    env_extractor: &ExtractorModel,
    config: SynthConfig,
    opts: TtsTrainOptions,
) -> Result<(SynthModel, Vec<LossBreakdown>)> {
    config.validate()?;
    if config.spk_embed_dim != spk_extractor.config.embed_dim
        || config.env_embed_dim != env_extractor.config.embed_dim
    {
        return Err(EattsError::Config(format!(
            "embed dims {}x{} do not match extractors {}x{}",
            config.spk_embed_dim,
            config.env_embed_dim,
            spk_extractor.config.embed_dim,
            env_extractor.config.embed_dim
        )));
    }
    let mut rng = Rng::new(opts.seed);
    let mut tts = SynthParams::init(&config, &mut rng);
    let baseline = opts.mode == TrainMode::Baseline;
    // Baseline: fresh extractors, same architecture, trained jointly.
    let mut spk_ext = if baseline {
        ExtractorModel::init(spk_extractor.config.clone(), rng.next_u64())?
    } else {
        spk_extractor.clone()
    };
    let mut env_ext = if baseline {
        ExtractorModel::init(env_extractor.config.clone(), rng.next_u64())?
    } else {
        env_extractor.clone()
    };
    let extractors_trainable = baseline || !opts.freeze_extractors;

    let (mut cls_spk, mut cls_env) = if baseline {
        (
            Some(ClassifierHead::init(
                config.spk_embed_dim,
                labels_of(manifest, GroupBy::Speaker),
                &mut rng,
            )),
            Some(ClassifierHead::init(
                config.env_embed_dim,
                labels_of(manifest, GroupBy::Environment),
                &mut rng,
            )),
        )
    } else {
        (None, None)
    };

    // Assemble the Adam parameter set: synth params always; extractor and
    // head params only when they receive gradients.
    let mut params = tts.named_params();
    let synth_n = params.len();
    if extractors_trainable {
        for p in spk_ext.named_params() {
            params.push(NamedParam::new(format!("spk_ext.{}", p.name), p.value));
        }
        for p in env_ext.named_params() {
            params.push(NamedParam::new(format!("env_ext.{}", p.name), p.value));
        }
    }
    if let (Some(hs), Some(he)) = (&cls_spk, &cls_env) {
        params.push(NamedParam::new("cls_spk.w", hs.w.clone()));
        params.push(NamedParam::new("cls_spk.b", hs.b.clone()));
        params.push(NamedParam::new("cls_env.w", he.w.clone()));
        params.push(NamedParam::new("cls_env.b", he.b.clone()));
    }
    let mut adam = AdamState::new(&params, config.learning_rate);
    let ext_param_count = spk_ext.named_params().len();

    let (w_spk, w_env, w_recon) = config.loss_weights;
    let crop = spk_ext.config.crop_frames;
    let mut trace = Vec::with_capacity(opts.n_steps);
    for step in 0..opts.n_steps {
        let mut run = || -> Result<LossBreakdown> {
            let batch = sample_tts_batch(manifest, store, &config, &mut rng)?;
            let b_total = batch.len();
            let mut g = Graph::<f32>::new();
            let staged = stage_synth(&mut g, &tts, true);

            // Embeddings: on-tape through the extractors when they train,
            // frozen utterance-level constants otherwise. The GE2E scale
            // leaves are staged alongside so the Adam order always matches
            // named_params (under classification supervision they simply
            // receive zero gradients).
            let (spk_emb_node, env_emb_node, ext_ids) = if extractors_trainable {
                let crops: Vec<Vec<f32>> =
                    batch.iter().map(|u| mel_window_f32(u.mel, crop)).collect();
                let (spk_emb, mut spk_ids) =
                    stage_extractor_forward(&mut g, &spk_ext, &crops, true)?;
                let sw = g.leaf(&Tensor::scalar(spk_ext.scale.w as f32).requires_grad(true));
                let sb = g.leaf(&Tensor::scalar(spk_ext.scale.b as f32).requires_grad(true));
                spk_ids.extend([sw, sb]);
                let (env_emb, mut env_ids) =
                    stage_extractor_forward(&mut g, &env_ext, &crops, true)?;
                let ew = g.leaf(&Tensor::scalar(env_ext.scale.w as f32).requires_grad(true));
                let eb = g.leaf(&Tensor::scalar(env_ext.scale.b as f32).requires_grad(true));
                env_ids.extend([ew, eb]);
                (spk_emb, env_emb, Some((spk_ids, env_ids)))
            } else {
                let mut spk_rows = Vec::with_capacity(b_total * config.spk_embed_dim);
                let mut env_rows = Vec::with_capacity(b_total * config.env_embed_dim);
                for u in &batch {
                    spk_rows.extend(spk_ext.infer_utterance(u.mel)?);
                    env_rows.extend(env_ext.infer_utterance(u.mel)?);
                }
                let s = g.constant(
                    Shape::matrix(b_total, config.spk_embed_dim),
                    spk_rows,
                )?;
                let e = g.constant(
                    Shape::matrix(b_total, config.env_embed_dim),
                    env_rows,
                )?;
                (s, e, None)
            };

            // Factor losses.
            let groups = config.batch_pairs;
            let per_group = config.utts_per_pair;
            let (l_spk_node, l_env_node, l_spk_val, l_env_val, scale_ids) = if baseline {
                let hs = cls_spk.as_ref().unwrap();
                let he = cls_env.as_ref().unwrap();
                let hs_w = g.leaf(&hs.w.clone().requires_grad(true));
                let hs_b = g.leaf(&hs.b.clone().requires_grad(true));
                let he_w = g.leaf(&he.w.clone().requires_grad(true));
                let he_b = g.leaf(&he.b.clone().requires_grad(true));
                let spk_labels: Vec<usize> = batch
                    .iter()
                    .map(|u| hs.label_index(&u.rec.speaker_id))
                    .collect::<Result<_>>()?;
                let env_labels: Vec<usize> = batch
                    .iter()
                    .map(|u| he.label_index(&u.rec.env_id))
                    .collect::<Result<_>>()?;
                let sl = g.matmul(spk_emb_node, hs_w)?;
                let sl = g.broadcast_row_add(sl, hs_b)?;
                let el = g.matmul(env_emb_node, he_w)?;
                let el = g.broadcast_row_add(el, he_b)?;
                let ls = cross_entropy_graph(&mut g, sl, &spk_labels)?;
                let le = cross_entropy_graph(&mut g, el, &env_labels)?;
                let lsv = g.value(ls)[0] as f64;
                let lev = g.value(le)[0] as f64;
                (Some(ls), Some(le), lsv, lev, vec![hs_w, hs_b, he_w, he_b])
            } else if extractors_trainable {
                // The scale nodes staged next to each extractor above.
                let (spk_ids, env_ids) = ext_ids.as_ref().expect("staged extractors");
                let (sw, sb) = (spk_ids[spk_ids.len() - 2], spk_ids[spk_ids.len() - 1]);
                let (ew, eb) = (env_ids[env_ids.len() - 2], env_ids[env_ids.len() - 1]);
                let ls = ge2e_loss_graph(&mut g, spk_emb_node, sw, sb, groups, per_group)?;
                let le = ge2e_loss_graph(&mut g, env_emb_node, ew, eb, groups, per_group)?;
                let lsv = g.value(ls)[0] as f64;
                let lev = g.value(le)[0] as f64;
                (Some(ls), Some(le), lsv, lev, vec![])
            } else {
                // Frozen extractors: report the GE2E terms as plain values.
                let to_batch = |node: NodeId, dim: usize| -> Result<EmbeddingBatch> {
                    EmbeddingBatch::new(
                        groups,
                        per_group,
                        dim,
                        g.value(node).iter().map(|&v| v as f64).collect(),
                    )
                };
                let sb = to_batch(spk_emb_node, config.spk_embed_dim)?;
                let eb = to_batch(env_emb_node, config.env_embed_dim)?;
                let lsv = ge2e_loss(&sb, &spk_ext.scale)?;
                let lev = ge2e_loss(&eb, &env_ext.scale)?;
                (None, None, lsv, lev, vec![])
            };

            // Conditioning and teacher-forced decode.
            let frames = config.decode_frames;
            let mut cond_nodes = Vec::with_capacity(b_total);
            for (i, u) in batch.iter().enumerate() {
                let encoded = encode_symbols(&mut g, &staged, &config, &u.rec.symbols)?;
                let regulated =
                    regulate_graph(&mut g, encoded, &u.rec.durations, Some(frames))?;
                let spk_row = g.slice_rows(spk_emb_node, i, 1)?;
                let env_row = g.slice_rows(env_emb_node, i, 1)?;
                let spk_b = broadcast_rows(&mut g, spk_row, frames)?;
                let env_b = broadcast_rows(&mut g, env_row, frames)?;
                cond_nodes.push(g.concat_cols(&[regulated, spk_b, env_b])?);
            }
            // Time-major targets.
            let mut target = vec![0.0f32; frames * b_total * config.n_mels];
            for t in 0..frames {
                for (b, u) in batch.iter().enumerate() {
                    let dst = (t * b_total + b) * config.n_mels;
                    let row = u.mel.frame(t);
                    for (i, &v) in row.iter().enumerate() {
                        target[dst + i] = v as f32;
                    }
                }
            }
            let target =
                g.constant(Shape::matrix(frames * b_total, config.n_mels), target)?;
            let pred = decode_teacher(&mut g, &staged, &config, &cond_nodes, target)?;
            let diff = g.sub(pred, target)?;
            let sq = g.mul(diff, diff)?;
            let sum = g.sum_all(sq);
            let l_recon_node =
                g.scale(sum, 1.0 / (frames * b_total * config.n_mels) as f32);
            let l_recon_val = g.value(l_recon_node)[0] as f64;

            // Total (tape side only includes differentiable terms).
            let mut total_node = g.scale(l_recon_node, w_recon as f32);
            if let (Some(ls), Some(le)) = (l_spk_node, l_env_node) {
                let ls = g.scale(ls, w_spk as f32);
                let le = g.scale(le, w_env as f32);
                let fac = g.add(ls, le)?;
                total_node = g.add(total_node, fac)?;
            }
            let breakdown = LossBreakdown {
                l_spk: l_spk_val,
                l_env: l_env_val,
                l_recon: l_recon_val,
                total: w_spk * l_spk_val + w_env * l_env_val + w_recon * l_recon_val,
            };
            if !breakdown.total.is_finite() {
                return Err(EattsError::Numeric {
                    name: "tts_loss".into(),
                    detail: format!("non-finite loss at step {step}"),
                });
            }

            // Gradients, in the exact order of `params`.
            let grads_map = g.backward(total_node)?;
            let mut grad_ids: Vec<NodeId> = staged.param_ids.clone();
            if let Some((spk_ids, env_ids)) = &ext_ids {
                grad_ids.extend(spk_ids.iter().copied());
                grad_ids.extend(env_ids.iter().copied());
            }
            if baseline {
                grad_ids.extend(scale_ids.iter().copied());
            }
            let grads: Vec<Vec<f32>> = grad_ids
                .iter()
                .map(|&id| grads_map.get(id).expect("param gradient").to_vec())
                .collect();
            adam.step(&mut params, &grads)?;
            for p in params.iter_mut() {
                if p.name.ends_with("scale.w") {
                    let v = p.value.data_mut();
                    if v[0] < W_FLOOR {
                        v[0] = W_FLOOR;
                    }
                }
            }
            // Propagate updated values back into the live models.
            tts.load_params(&params[..synth_n]);
            if extractors_trainable {
                spk_ext.load_params(&params[synth_n..synth_n + ext_param_count]);
                env_ext
                    .load_params(&params[synth_n + ext_param_count..synth_n + 2 * ext_param_count]);
            }
            if baseline {
                let base = params.len() - 4;
                if let (Some(hs), Some(he)) = (cls_spk.as_mut(), cls_env.as_mut()) {
                    hs.w = params[base].value.clone();
                    hs.b = params[base + 1].value.clone();
                    he.w = params[base + 2].value.clone();
                    he.b = params[base + 3].value.clone();
                }
            }
            Ok(breakdown)
        };
        let breakdown = run().map_err(|e| e.in_stage(&format!("tts step {step}")))?;
        trace.push(breakdown);
    }

    Ok((
        SynthModel {
            config,
            mode: opts.mode,
            tts,
            spk_extractor: spk_ext,
            env_extractor: env_ext,
            cls_spk,
            cls_env,
        },
        trace,
    ))
}

/// Stages an extractor forward pass over fixed crops, returning the
/// embedding matrix node and the staged parameter ids (named order, without
/// the GE2E scale).
fn stage_extractor_forward(
    g: &mut Graph<f32>,
    model: &ExtractorModel,
    crops: &[Vec<f32>],
    trainable: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    model.forward_crops_graph(g, crops, trainable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::ExtractorConfig;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            vocab_size: 6,
            d_enc: 4,
            prenet_dim: 4,
            decoder_dim: 6,
            n_mels: 5,
            spk_embed_dim: 3,
            env_embed_dim: 3,
            decode_frames: 8,
            batch_pairs: 2,
            utts_per_pair: 2,
            learning_rate: 5e-3,
            loss_weights: (1.0, 1.0, 1.0),
        }
    }

    fn tiny_ext_cfg() -> ExtractorConfig {
        ExtractorConfig {
            n_lstm_layers: 1,
            hidden_dim: 6,
            embed_dim: 3,
            crop_frames: 8,
            s_groups: 2,
            u_per_group: 2,
            n_mels: 5,
            learning_rate: 1e-3,
        }
    }

    #[test]
    fn length_regulate_identity_and_repeat() {
        let rows = vec![1.0, 2.0, 3.0, 4.0]; // two rows of dim 2
        let id = length_regulate(&rows, 2, 2, &[1, 1]).unwrap();
        assert_eq!(id, rows);
        let rep = length_regulate(&rows, 2, 2, &[2, 3]).unwrap();
        assert_eq!(
            rep,
            vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        assert!(length_regulate(&rows, 2, 2, &[1]).is_err());
    }

    #[test]
    fn length_regulate_total_matches_duration_sum() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let n = 1 + rng.below(6);
            let d = 3;
            let rows: Vec<f32> = (0..n * d).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            let durs: Vec<usize> = (0..n).map(|_| 1 + rng.below(5)).collect();
            let out = length_regulate(&rows, n, d, &durs).unwrap();
            assert_eq!(out.len(), durs.iter().sum::<usize>() * d);
        }
    }

    #[test]
    fn condition_concat_broadcast_contract() {
        let regulated = vec![0.1f32; 3 * 2];
        let spk = vec![1.0f32, 2.0];
        let env = vec![-1.0f32, -2.0];
        let out = condition_concat(&regulated, 3, 2, &spk, &env);
        let w = 6;
        assert_eq!(out.len(), 3 * w);
        for t in 0..3 {
            assert_eq!(&out[t * w + 2..t * w + 4], &spk[..]);
            assert_eq!(&out[t * w + 4..t * w + 6], &env[..]);
        }
        // Swapping changes the output iff spk != env.
        let swapped = condition_concat(&regulated, 3, 2, &env, &spk);
        assert_ne!(out, swapped);
        let same = condition_concat(&regulated, 3, 2, &spk, &spk);
        let same_swapped = condition_concat(&regulated, 3, 2, &spk, &spk);
        assert_eq!(same, same_swapped);
    }

    #[test]
    fn recon_loss_values() {
        let a = vec![0.5f32; 10];
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let b = vec![1.5f32; 10];
        assert!((recon_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![2.5f32; 10];
        let l1 = recon_loss(&a, &b).unwrap();
        let l2 = recon_loss(&a, &c).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-9);
        assert!(recon_loss(&a, &[0.0; 3]).is_err());
    }

    fn make_model(seed: u64) -> SynthModel {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(seed);
        SynthModel {
            config: cfg.clone(),
            mode: TrainMode::Proposed,
            tts: SynthParams::init(&cfg, &mut rng),
            spk_extractor: ExtractorModel::init(tiny_ext_cfg(), seed ^ 1).unwrap(),
            env_extractor: ExtractorModel::init(tiny_ext_cfg(), seed ^ 2).unwrap(),
            cls_spk: None,
            cls_env: None,
        }
    }

    #[test]
    fn synthesis_frame_count_is_duration_sum() {
        let model = make_model(5);
        let spk = vec![0.6f32, 0.8, 0.0];
        let env = vec![0.0f32, 0.6, 0.8];
        let mel = model
            .synthesize_with_embeddings(&[1, 2, 3], &[2, 3, 4], &spk, &env, 7)
            .unwrap();
        assert_eq!(mel.n_frames, 9);
        assert_eq!(mel.n_mels, 5);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let model = make_model(9);
        let spk = vec![1.0f32, 0.0, 0.0];
        let env = vec![0.0f32, 1.0, 0.0];
        let a = model
            .synthesize_with_embeddings(&[0, 4], &[3, 3], &spk, &env, 1)
            .unwrap();
        let b = model
            .synthesize_with_embeddings(&[0, 4], &[3, 3], &spk, &env, 1)
            .unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_weights_decode_outputs_projection_bias() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(1);
        let mut tts = SynthParams::init(&cfg, &mut rng);
        let mut params = tts.named_params();
        for p in params.iter_mut() {
            let bias_value = if p.name == "out.b" { 0.37 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = bias_value;
            }
        }
        tts.load_params(&params);
        let mut g = Graph::<f32>::new();
        let staged = stage_synth(&mut g, &tts, false);
        let cond = g
            .constant(
                Shape::matrix(4, cfg.cond_width()),
                vec![0.0; 4 * cfg.cond_width()],
            )
            .unwrap();
        let frames = decode_free(&mut g, &staged, &cfg, cond).unwrap();
        assert_eq!(frames.len(), 4 * cfg.n_mels);
        for &v in &frames {
            assert!((v - 0.37).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn teacher_and_free_decode_agree_on_first_frame() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(3);
        let tts = SynthParams::init(&cfg, &mut rng);
        let mut g = Graph::<f32>::new();
        let staged = stage_synth(&mut g, &tts, false);
        let frames = 4;
        let cond_data: Vec<f32> = (0..frames * cfg.cond_width())
            .map(|_| rng.range(-0.5, 0.5) as f32)
            .collect();
        let cond = g
            .constant(Shape::matrix(frames, cfg.cond_width()), cond_data)
            .unwrap();
        let target = g
            .constant(
                Shape::matrix(frames, cfg.n_mels),
                (0..frames * cfg.n_mels)
                    .map(|i| (i as f32 * 0.01).sin())
                    .collect(),
            )
            .unwrap();
        let teacher = decode_teacher(&mut g, &staged, &cfg, &[cond], target).unwrap();
        let free = decode_free(&mut g, &staged, &cfg, cond).unwrap();
        let tvals = g.value(teacher);
        for i in 0..cfg.n_mels {
            assert!(
                (tvals[i] - free[i]).abs() < 1e-6,
                "frame 1 mismatch at {i}: {} vs {}",
                tvals[i],
                free[i]
            );
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences_on_3_frame_toy() {
        use crate::autodiff::grad_check;
        // f64 decode of 3 frames; gradient wrt decoder weights via MSE.
        let cfg = SynthConfig {
            vocab_size: 4,
            d_enc: 3,
            prenet_dim: 3,
            decoder_dim: 4,
            n_mels: 4,
            spk_embed_dim: 2,
            env_embed_dim: 2,
            decode_frames: 3,
            batch_pairs: 2,
            utts_per_pair: 2,
            learning_rate: 1e-3,
            loss_weights: (1.0, 1.0, 1.0),
        };
        let mut rng = Rng::new(11);
        let tts = SynthParams::init(&cfg, &mut rng);
        let frames = 3;
        let cond_data: Vec<f64> = (0..frames * cfg.cond_width())
            .map(|_| rng.range(-0.8, 0.8))
            .collect();
        let target_data: Vec<f64> = (0..frames * cfg.n_mels)
            .map(|_| rng.range(-1.0, 1.0))
            .collect();
        // Check gradients with respect to the decoder fused weights, the
        // output projection and the Prenet first layer.
        let w_x0 = tts.decoder.w_x.cast::<f64>();
        let out_w0 = tts.out_w.cast::<f64>();
        let p_w10 = tts.prenet_w1.cast::<f64>();
        let tts_clone = tts.clone();
        let cfg_clone = cfg.clone();
        let report = grad_check(
            move |g, ids| {
                let mut staged = stage_synth(g, &tts_clone, false);
                staged.dec.w_x = ids[0];
                staged.out_w = ids[1];
                staged.prenet_w1 = ids[2];
                let cond = g.constant(
                    Shape::matrix(frames, cfg_clone.cond_width()),
                    cond_data.clone(),
                )?;
                let target = g.constant(
                    Shape::matrix(frames, cfg_clone.n_mels),
                    target_data.clone(),
                )?;
                let pred = decode_teacher(g, &staged, &cfg_clone, &[cond], target)?;
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                let sum = g.sum_all(sq);
                Ok(g.scale(sum, 1.0 / (frames * cfg_clone.n_mels) as f64))
            },
            &[w_x0, out_w0, p_w10],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    fn toy_corpus(cfg: &SynthConfig, ext: &ExtractorConfig) -> (Manifest, FeatureStore) {
        // Three speakers, each in its own environment (entangled), with
        // speaker- and environment-dependent mel signatures.
        let mut records = Vec::new();
        let mut mels = BTreeMap::new();
        let mut rng = Rng::new(77);
        let frames = cfg.decode_frames.max(ext.crop_frames) + 2;
        for s in 0..3 {
            for u in 0..4 {
                let utt_id = format!("p{s}_u{u}");
                let data: Vec<f64> = (0..frames * cfg.n_mels)
                    .map(|i| {
                        let ch = i % cfg.n_mels;
                        let spk_sig = if ch == s { 1.5 } else { 0.0 };
                        let env_sig = if ch == cfg.n_mels - 1 - s { -1.5 } else { 0.0 };
                        spk_sig + env_sig + 0.2 * rng.normal()
                    })
                    .collect();
                mels.insert(
                    utt_id.clone(),
                    MelSpectrogram::new(frames, cfg.n_mels, data, 0),
                );
                records.push(UtteranceRecord {
                    utt_id,
                    speaker_id: format!("p{s}"),
                    env_id: format!("room{s}"),
                    split: Split::Train,
                    wav_path: String::new(),
                    symbols: vec![s, (s + 1) % cfg.vocab_size],
                    durations: vec![frames / 2, frames - frames / 2],
                });
            }
        }
        (Manifest { records }, FeatureStore::from_mels(mels))
    }

    #[test]
    fn frozen_extractors_stay_bitwise_identical() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 21).unwrap();
        let env = ExtractorModel::init(ext_cfg, 22).unwrap();
        let before_spk: Vec<Vec<f32>> = spk
            .named_params()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect();
        let (model, trace) = train_tts(
            &manifest,
            &store,
            &spk,
            &env,
            cfg,
            TtsTrainOptions {
                mode: TrainMode::Proposed,
                freeze_extractors: true,
                n_steps: 3,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(trace.len(), 3);
        for (a, p) in before_spk
            .iter()
            .zip(model.spk_extractor.named_params().iter())
        {
            assert_eq!(a, p.value.data(), "extractor param {} changed", p.name);
        }
    }

    #[test]
    fn proposed_total_is_sum_of_components() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 31).unwrap();
        let env = ExtractorModel::init(ext_cfg, 32).unwrap();
        let (_, trace) = train_tts(
            &manifest,
            &store,
            &spk,
            &env,
            cfg,
            TtsTrainOptions {
                mode: TrainMode::Proposed,
                freeze_extractors: true,
                n_steps: 2,
                seed: 8,
            },
        )
        .unwrap();
        for b in &trace {
            assert!(
                (b.total - (b.l_spk + b.l_env + b.l_recon)).abs() < 1e-9,
                "{b:?}"
            );
        }
    }

    #[test]
    fn baseline_heads_receive_gradients() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 41).unwrap();
        let env = ExtractorModel::init(ext_cfg, 42).unwrap();
        let (model, trace) = train_tts(
            &manifest,
            &store,
            &spk,
            &env,
            cfg,
            TtsTrainOptions {
                mode: TrainMode::Baseline,
                freeze_extractors: false,
                n_steps: 2,
                seed: 9,
            },
        )
        .unwrap();
        let hs = model.cls_spk.as_ref().expect("baseline speaker head");
        let he = model.cls_env.as_ref().expect("baseline env head");
        assert_eq!(hs.labels.len(), 3);
        assert_eq!(he.labels.len(), 3);
        for b in &trace {
            assert!(b.l_spk.is_finite() && b.l_spk > 0.0);
            assert!(b.l_env.is_finite() && b.l_env > 0.0);
            assert!(
                (b.total - (b.l_spk + b.l_env + b.l_recon)).abs() < 1e-9,
                "{b:?}"
            );
        }
        // Fresh heads start with zero bias; training must have moved them.
        assert!(hs.b.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn recon_loss_decreases_over_training() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 51).unwrap();
        let env = ExtractorModel::init(ext_cfg, 52).unwrap();
        let (_, trace) = train_tts(
            &manifest,
            &store,
            &spk,
            &env,
            cfg,
            TtsTrainOptions {
                mode: TrainMode::Proposed,
                freeze_extractors: true,
                n_steps: 60,
                seed: 10,
            },
        )
        .unwrap();
        let first: f64 = trace[..5].iter().map(|b| b.l_recon).sum::<f64>() / 5.0;
        let last: f64 = trace[trace.len() - 5..]
            .iter()
            .map(|b| b.l_recon)
            .sum::<f64>()
            / 5.0;
        assert!(last < first * 0.7, "recon {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 61).unwrap();
        let env = ExtractorModel::init(ext_cfg, 62).unwrap();
        let opts = TtsTrainOptions {
            mode: TrainMode::Proposed,
            freeze_extractors: true,
            n_steps: 4,
            seed: 12,
        };
        let (_, t1) = train_tts(&manifest, &store, &spk, &env, cfg.clone(), opts).unwrap();
        let (_, t2) = train_tts(&manifest, &store, &spk, &env, cfg, opts).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let cfg = tiny_cfg();
        let ext_cfg = tiny_ext_cfg();
        let (manifest, store) = toy_corpus(&cfg, &ext_cfg);
        let spk = ExtractorModel::init(ext_cfg.clone(), 71).unwrap();
        let env = ExtractorModel::init(ext_cfg, 72).unwrap();
        let (model, _) = train_tts(
            &manifest,
            &store,
            &spk,
            &env,
            cfg,
            TtsTrainOptions {
                mode: TrainMode::Baseline,
                freeze_extractors: false,
                n_steps: 2,
                seed: 14,
            },
        )
        .unwrap();
        let dir = std::env::temp_dir().join("eatts_synth_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tts.eatts");
        model.save(&path).unwrap();
        let back = SynthModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.mode, model.mode);
        for (a, b) in back
            .tts
            .named_params()
            .iter()
            .zip(model.tts.named_params().iter())
        {
            assert_eq!(a.value.data(), b.value.data(), "tts param {}", a.name);
        }
        assert_eq!(
            back.cls_spk.as_ref().unwrap().labels,
            model.cls_spk.as_ref().unwrap().labels
        );
        // Identical synthesis from the reloaded bundle.
        let spk_e = vec![1.0f32, 0.0, 0.0];
        let env_e = vec![0.0f32, 1.0, 0.0];
        let a = model
            .synthesize_with_embeddings(&[1], &[4], &spk_e, &env_e, 0)
            .unwrap();
        let b = back
            .synthesize_with_embeddings(&[1], &[4], &spk_e, &env_e, 0)
            .unwrap();
        assert_eq!(a.data, b.data);
    }
}
