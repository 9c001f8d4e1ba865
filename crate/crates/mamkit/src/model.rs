//! Full detector: backbone -> per-stage token clustering -> transformer
//! encoder -> four level heads, plus the binary checkpoint container.
//!
//! Parameters live in one [`ParamStore`]; convolutional parameters are in the
//! Conv learning-rate group, everything else (cluster embeddings, encoder,
//! heads, embeddings) in the Transformer group.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::clustering::{
    cluster_counts, patchify, tokens_per_stage, AssignMode, ClusterBank, ClusterConfig,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::labels::Annotation;
use crate::optim::{ParamStore, TapeBinding};
use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::{NumericError, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"MAMKIT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MamConfig {
    pub input: (usize, usize),
    pub qk_width: usize,
    pub backbone: BackboneConfig,
    pub cluster: ClusterConfig,
    pub encoder: EncoderConfig,
}

impl Default for MamConfig {
    fn default() -> Self {
        MamConfig {
            input: (64, 64),
            qk_width: 64,
            backbone: BackboneConfig::default(),
            cluster: ClusterConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl MamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.input.0 % 16 != 0 || self.input.1 % 16 != 0 {
            return Err(format!(
                "input extent {:?} must be divisible by 16",
                self.input
            ));
        }
        self.cluster.validate()?;
        self.encoder.validate()
    }

    pub fn tokens(&self) -> [usize; 4] {
        tokens_per_stage(self.input.0, self.input.1)
    }

    pub fn counts(&self) -> [usize; 4] {
        cluster_counts(&self.tokens(), &self.cluster.rates)
    }
}

pub struct MamModel {
    pub cfg: MamConfig,
    pub store: ParamStore,
    backbone: Backbone,
    bank: ClusterBank,
    encoder: Encoder,
}

impl MamModel {
    pub fn new(cfg: MamConfig, seed: u64) -> Result<Self, String> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, "init");
        let backbone = Backbone::register(&mut store, &cfg.backbone, &mut rng);
        let bank = ClusterBank::register(
            &mut store,
            &mut rng,
            &cfg.backbone.channels,
            &cfg.tokens(),
            &cfg.cluster.rates,
            cfg.encoder.width,
            cfg.qk_width,
        );
        let encoder = Encoder::register(&mut store, &cfg.encoder, &mut rng);
        Ok(MamModel {
            cfg,
            store,
            backbone,
            bank,
            encoder,
        })
    }

    /// Single-image forward to the four logit rows. `mode` overrides the
    /// configured assignment mode; `rng` feeds Gumbel draws in the stochastic
    /// mode and is untouched otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        image: VarId,
        mode: AssignMode,
        rng: &mut RngStream,
    ) -> Result<[VarId; 4], NumericError> {
        let cfg = ClusterConfig {
            mode,
            ..self.cfg.cluster.clone()
        };
        let stages = self.backbone.forward(tape, bind, image)?;
        let mut reduced = [image; 4];
        for (l, &stage) in stages.iter().enumerate() {
            let tokens = patchify(tape, stage);
            reduced[l] = self
                .bank
                .stage_pipeline(tape, bind, l, tokens, &cfg, rng);
        }
        let seq = self.encoder.assemble(tape, bind, &reduced)?;
        let enc = self.encoder.encode(tape, bind, seq);
        Ok(self.encoder.predict(tape, bind, enc))
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        logits: &[VarId; 4],
        truth: &Annotation,
    ) -> Result<VarId, NumericError> {
        self.encoder.loss(tape, logits, truth)
    }

    /// Inference: predicted annotation by per-head argmax (ties toward the
    /// lowest class).
    pub fn predict_annotation(tape: &Tape, logits: &[VarId; 4]) -> Annotation {
        let mut classes = [0u8; 4];
        for t in 0..4 {
            let row = tape.value(logits[t]).data();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            classes[t] = best as u8;
        }
        Annotation::from_classes(classes).expect("argmax class in range")
    }

    // ── checkpoint ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(
            File::create(path).with_context(|| format!("create {}", path.display()))?,
        );
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            params: self
                .store
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        out.write_all(CKPT_MAGIC)?;
        out.write_u64::<LittleEndian>(header_json.len() as u64)?;
        out.write_all(&header_json)?;
        for p in self.store.iter() {
            for &v in p.value.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut inp = BufReader::new(
            File::open(path).with_context(|| format!("open checkpoint {}", path.display()))?,
        );
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            bail!("not a checkpoint file: bad magic {magic:?}");
        }
        let hlen = inp.read_u64::<LittleEndian>()? as usize;
        let mut hbuf = vec![0u8; hlen];
        inp.read_exact(&mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
        let mut model =
            MamModel::new(header.config, 0).map_err(|e| anyhow::anyhow!("bad config: {e}"))?;
        if header.params.len() != model.store.len() {
            bail!(
                "checkpoint holds {} parameters, model defines {}",
                header.params.len(),
                model.store.len()
            );
        }
        for (idx, meta) in header.params.iter().enumerate() {
            let param = model.store.get_mut(idx);
            if param.name != meta.name || param.value.shape() != &meta.shape[..] {
                bail!(
                    "parameter {idx} mismatch: checkpoint {} {:?}, model {} {:?}",
                    meta.name,
                    meta.shape,
                    param.name,
                    param.value.shape()
                );
            }
            let numel: usize = meta.shape.iter().product();
            let mut data = vec![0.0f64; numel];
            inp.read_f64_into::<LittleEndian>(&mut data)?;
            param.value = Tensor::new(meta.shape.clone(), data);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: MamConfig,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::gaussian_init;

    fn toy_cfg() -> MamConfig {
        MamConfig {
            input: (16, 16),
            qk_width: 4,
            backbone: BackboneConfig {
                channels: [4, 6, 8, 8],
            },
            cluster: ClusterConfig::default(),
            encoder: EncoderConfig {
                width: 8,
                depth: 1,
                heads: 2,
                ffn_expansion: 2,
            },
        }
    }

    fn toy_image(seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, "image");
        gaussian_init(vec![3, 16, 16], 0.5, &mut rng)
    }

    #[test]
    fn forward_emits_four_logit_rows() {
        let model = MamModel::new(toy_cfg(), 41).unwrap();
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &model.store, false);
        let img = tape.leaf(toy_image(1), false);
        let mut rng = RngStream::new(41, "fwd");
        let logits = model
            .forward(&mut tape, &bind, img, AssignMode::EvalDeterministicHard, &mut rng)
            .unwrap();
        for l in logits {
            let t = tape.value(l);
            assert_eq!(t.shape(), &[1, 4]);
            assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_rng_free() {
        let model = MamModel::new(toy_cfg(), 42).unwrap();
        let run = |seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = TapeBinding::bind(&mut tape, &model.store, false);
            let img = tape.leaf(toy_image(2), false);
            let mut rng = RngStream::new(seed, "fwd");
            let logits = model
                .forward(&mut tape, &bind, img, AssignMode::EvalDeterministicHard, &mut rng)
                .unwrap();
            logits
                .iter()
                .flat_map(|&l| tape.value(l).data().to_vec())
                .collect()
        };
        assert_eq!(run(1), run(777));
    }

    #[test]
    fn end_to_end_soft_gradient_checks() {
        let mut model = MamModel::new(toy_cfg(), 43).unwrap();
        // Zero-initialized head outputs make the loss constant in the
        // input; perturb them so the check sees a real gradient.
        let hrng = RngStream::new(43, "head-perturb");
        for t in ["smooth", "eyeenlarge", "facelift", "whiten"] {
            for part in ["fc2.w", "fc2.b"] {
                let idx = model.store.idx(&format!("head.{t}.{part}"));
                let shape = model.store.get(idx).value.shape().to_vec();
                model.store.get_mut(idx).value =
                    crate::optim::gaussian_init(shape, 0.3, &mut hrng.substream(t));
            }
        }
        let model = model;
        let truth = Annotation::from_classes([1, 0, 3, 2]).unwrap();
        let point = toy_image(3);
        let err = crate::gradcheck::grad_check(
            move |tape, x| {
                let bind = TapeBinding::bind(tape, &model.store, false);
                let mut rng = RngStream::new(43, "fwd");
                let logits = model
                    .forward(tape, &bind, x, AssignMode::Soft, &mut rng)
                    .unwrap();
                model.loss(tape, &logits, &truth).unwrap()
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MamModel::new(toy_cfg(), 44).unwrap();
        model.save(&path).unwrap();
        let loaded = MamModel::load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for (a, b) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {} not bit-identical", a.name);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(MamModel::load(&path).is_err());
    }
}
