//! Multi-granularity transformer encoder and the four level-classification
//! heads.
//!
//! The reduced tokens of all four stages are concatenated behind four CLS
//! tokens; stage tokens share a per-stage level embedding and the CLS block
//! carries its own group embedding, so no within-stage positional signal is
//! introduced. Encoder layers are pre-norm (LN -> attention -> residual,
//! LN -> FFN -> residual) with a final layer norm; each head is a two-layer
//! GELU perceptron reading only its CLS position. The loss is the sum of the
//! four per-type 4-class cross-entropies.

use serde::{Deserialize, Serialize};

use crate::labels::{Annotation, RetouchType};
use crate::optim::{gaussian_init, ParamGroup, ParamStore, TapeBinding};
use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::{NumericError, Tensor};

pub const NUM_CLS: usize = 4;
pub const NUM_LEVELS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            width: 256,
            depth: 2,
            heads: 4,
            ffn_expansion: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        Ok(())
    }
}

struct LinearIdx {
    w: usize,
    b: usize,
}

struct LayerIdx {
    ln1: (usize, usize),
    wq: LinearIdx,
    wk: LinearIdx,
    wv: LinearIdx,
    wo: LinearIdx,
    ln2: (usize, usize),
    ffn1: LinearIdx,
    ffn2: LinearIdx,
}

struct HeadIdx {
    fc1: LinearIdx,
    fc2: LinearIdx,
}

/// Parameter indices for the encoder, embeddings and heads.
pub struct Encoder {
    pub cfg: EncoderConfig,
    cls: usize,
    level_embed: usize,
    cls_embed: usize,
    layers: Vec<LayerIdx>,
    final_ln: (usize, usize),
    heads: Vec<HeadIdx>,
}

fn register_linear(
    store: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    din: usize,
    dout: usize,
) -> LinearIdx {
    let std = 1.0 / (din as f64).sqrt();
    let w = store.add(
        &format!("{name}.w"),
        ParamGroup::Transformer,
        gaussian_init(vec![din, dout], std, &mut rng.substream(&format!("{name}.w"))),
    );
    let b = store.add(
        &format!("{name}.b"),
        ParamGroup::Transformer,
        Tensor::zeros(vec![dout]),
    );
    LinearIdx { w, b }
}

fn register_ln(store: &mut ParamStore, name: &str, width: usize) -> (usize, usize) {
    let g = store.add(
        &format!("{name}.gamma"),
        ParamGroup::Transformer,
        Tensor::new(vec![width], vec![1.0; width]),
    );
    let b = store.add(
        &format!("{name}.beta"),
        ParamGroup::Transformer,
        Tensor::zeros(vec![width]),
    );
    (g, b)
}

impl Encoder {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        cfg.validate().expect("invalid encoder config");
        let w = cfg.width;
        let embed = |store: &mut ParamStore, rng: &mut RngStream, name: &str, rows: usize| {
            store.add(
                name,
                ParamGroup::Transformer,
                gaussian_init(vec![rows, w], 0.02, &mut rng.substream(name)),
            )
        };
        let cls = embed(store, rng, "encoder.cls", NUM_CLS);
        let level_embed = embed(store, rng, "encoder.level_embed", 4);
        let cls_embed = embed(store, rng, "encoder.cls_embed", 1);
        let mut layers = Vec::with_capacity(cfg.depth);
        for li in 0..cfg.depth {
            let p = format!("encoder.layer{li}");
            layers.push(LayerIdx {
                ln1: register_ln(store, &format!("{p}.ln1"), w),
                wq: register_linear(store, rng, &format!("{p}.attn.wq"), w, w),
                wk: register_linear(store, rng, &format!("{p}.attn.wk"), w, w),
                wv: register_linear(store, rng, &format!("{p}.attn.wv"), w, w),
                wo: register_linear(store, rng, &format!("{p}.attn.wo"), w, w),
                ln2: register_ln(store, &format!("{p}.ln2"), w),
                ffn1: register_linear(store, rng, &format!("{p}.ffn.fc1"), w, w * cfg.ffn_expansion),
                ffn2: register_linear(store, rng, &format!("{p}.ffn.fc2"), w * cfg.ffn_expansion, w),
            });
        }
        let final_ln = register_ln(store, "encoder.final_ln", w);
        let heads = RetouchType::ALL
            .iter()
            .map(|t| {
                let p = format!("head.{}", t.name().to_lowercase());
                // zero-initialized output layer: logits start uniform, so
                // the initial loss sits at 4 ln 4
                let fc2 = LinearIdx {
                    w: store.add(
                        &format!("{p}.fc2.w"),
                        ParamGroup::Transformer,
                        Tensor::zeros(vec![w, NUM_LEVELS]),
                    ),
                    b: store.add(
                        &format!("{p}.fc2.b"),
                        ParamGroup::Transformer,
                        Tensor::zeros(vec![NUM_LEVELS]),
                    ),
                };
                HeadIdx {
                    fc1: register_linear(store, rng, &format!("{p}.fc1"), w, w),
                    fc2,
                }
            })
            .collect();
        Encoder {
            cfg: cfg.clone(),
            cls,
            level_embed,
            cls_embed,
            layers,
            final_ln,
            heads,
        }
    }

    /// `[CLS0..CLS3, stage0.., stage3..]` with the CLS group embedding on the
    /// CLS block and the stage's level embedding on every stage token.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        reduced: &[VarId; 4],
    ) -> Result<VarId, NumericError> {
        let w = self.cfg.width;
        for &r in reduced {
            let shape = tape.value(r).shape().to_vec();
            if shape.len() != 2 || shape[1] != w {
                return Err(NumericError::DimensionMismatch {
                    op: "encoder.assemble",
                    lhs: shape,
                    rhs: vec![0, w],
                });
            }
        }
        let cls = bind.var(self.cls);
        let cls_embed = bind.var(self.cls_embed);
        let ce_row = tape.reshape(cls_embed, vec![w]);
        let cls_block = tape.add_bias(cls, ce_row);
        let mut parts = vec![cls_block];
        for (l, &r) in reduced.iter().enumerate() {
            let level = tape.gather_rows(bind.var(self.level_embed), &[l]);
            let level_row = tape.reshape(level, vec![w]);
            parts.push(tape.add_bias(r, level_row));
        }
        Ok(tape.concat_rows(&parts))
    }

    fn linear(&self, tape: &mut Tape, bind: &TapeBinding, x: VarId, idx: &LinearIdx) -> VarId {
        let h = tape.matmul(x, bind.var(idx.w)).expect("linear width mismatch");
        tape.add_bias(h, bind.var(idx.b))
    }

    /// `depth` pre-norm encoder layers plus the final layer norm. depth 0 is
    /// the identity (no final norm either), used for ablations.
    pub fn encode(&self, tape: &mut Tape, bind: &TapeBinding, seq: VarId) -> VarId {
        if self.layers.is_empty() {
            return seq;
        }
        let mut x = seq;
        for layer in &self.layers {
            let h = tape.layer_norm(x, bind.var(layer.ln1.0), bind.var(layer.ln1.1));
            let q = self.linear(tape, bind, h, &layer.wq);
            let k = self.linear(tape, bind, h, &layer.wk);
            let v = self.linear(tape, bind, h, &layer.wv);
            let a = tape.attention(q, k, v, self.cfg.heads);
            let a = self.linear(tape, bind, a, &layer.wo);
            x = tape.add(x, a);
            let h2 = tape.layer_norm(x, bind.var(layer.ln2.0), bind.var(layer.ln2.1));
            let f = self.linear(tape, bind, h2, &layer.ffn1);
            let f = tape.gelu(f);
            let f = self.linear(tape, bind, f, &layer.ffn2);
            x = tape.add(x, f);
        }
        tape.layer_norm(x, bind.var(self.final_ln.0), bind.var(self.final_ln.1))
    }

    /// Four per-type logit rows `[1, 4]`, head t reading CLS position t only.
    pub fn predict(&self, tape: &mut Tape, bind: &TapeBinding, encoded: VarId) -> [VarId; 4] {
        let mut out = [encoded; 4];
        for (t, head) in self.heads.iter().enumerate() {
            let cls = tape.slice_rows(encoded, t, 1);
            let h = self.linear(tape, bind, cls, &head.fc1);
            let h = tape.gelu(h);
            out[t] = self.linear(tape, bind, h, &head.fc2);
        }
        out
    }

    /// Sum of four 4-class cross-entropies against the annotation's classes.
    pub fn loss(
        &self,
        tape: &mut Tape,
        logits: &[VarId; 4],
        truth: &Annotation,
    ) -> Result<VarId, NumericError> {
        let classes = truth.classes();
        let mut total: Option<VarId> = None;
        for t in 0..4 {
            let ce = tape.cross_entropy_from_logits(logits[t], classes[t] as usize)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce),
                None => ce,
            });
        }
        Ok(total.unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            width: 8,
            depth: 2,
            heads: 2,
            ffn_expansion: 2,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, "init");
        let enc = Encoder::register(&mut store, cfg, &mut rng);
        (store, enc)
    }

    fn toy_reduced(tape: &mut Tape, seed: u64, counts: [usize; 4], w: usize) -> [VarId; 4] {
        let mut rng = RngStream::new(seed, "reduced");
        let mut out = Vec::new();
        for &n in &counts {
            out.push(tape.leaf(gaussian_init(vec![n, w], 1.0, &mut rng), false));
        }
        [out[0], out[1], out[2], out[3]]
    }

    #[test]
    fn assembled_length_is_tokens_plus_four() {
        let cfg = toy_cfg();
        let (store, enc) = build(&cfg, 31);
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let reduced = toy_reduced(&mut tape, 1, [4, 4, 4, 4], 8);
        let seq = enc.assemble(&mut tape, &bind, &reduced).unwrap();
        assert_eq!(tape.value(seq).shape(), &[20, 8]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let cfg = toy_cfg();
        let (store, enc) = build(&cfg, 32);
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let mut rng = RngStream::new(32, "bad");
        let bad = tape.leaf(gaussian_init(vec![4, 6], 1.0, &mut rng), false);
        let ok = tape.leaf(gaussian_init(vec![4, 8], 1.0, &mut rng), false);
        assert!(enc.assemble(&mut tape, &bind, &[ok, bad, ok, ok]).is_err());
    }

    #[test]
    fn depth_zero_is_identity() {
        let cfg = EncoderConfig {
            depth: 0,
            ..toy_cfg()
        };
        let (store, enc) = build(&cfg, 33);
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let reduced = toy_reduced(&mut tape, 2, [2, 2, 2, 2], 8);
        let seq = enc.assemble(&mut tape, &bind, &reduced).unwrap();
        let out = enc.encode(&mut tape, &bind, seq);
        assert_eq!(out, seq);
    }

    #[test]
    fn heads_have_disjoint_parameters() {
        let cfg = toy_cfg();
        let (mut store, enc) = build(&cfg, 34);
        let logits_for = |store: &ParamStore, enc: &Encoder| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let bind = TapeBinding::bind(&mut tape, store, false);
            let reduced = toy_reduced(&mut tape, 3, [2, 2, 2, 2], 8);
            let seq = enc.assemble(&mut tape, &bind, &reduced).unwrap();
            let out = enc.encode(&mut tape, &bind, seq);
            enc.predict(&mut tape, &bind, out)
                .iter()
                .map(|&l| tape.value(l).data().to_vec())
                .collect()
        };
        let before = logits_for(&store, &enc);
        for part in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
            let idx = store.idx(&format!("head.eyeenlarge.{part}"));
            store
                .get_mut(idx)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.05);
        }
        let after = logits_for(&store, &enc);
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
    }

    #[test]
    fn loss_uniform_and_saturated_limits() {
        let cfg = toy_cfg();
        let (_, enc) = build(&cfg, 35);
        let mut tape = Tape::new();
        let uniform = [
            tape.leaf(Tensor::zeros(vec![1, 4]), false),
            tape.leaf(Tensor::zeros(vec![1, 4]), false),
            tape.leaf(Tensor::zeros(vec![1, 4]), false),
            tape.leaf(Tensor::zeros(vec![1, 4]), false),
        ];
        let truth = Annotation::from_classes([0, 1, 2, 3]).unwrap();
        let l = enc.loss(&mut tape, &uniform, &truth).unwrap();
        let expect = 4.0 * 4.0f64.ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let sat = |class: usize, tape: &mut Tape| -> VarId {
            let mut v = vec![-30.0; 4];
            v[class] = 30.0;
            tape.leaf(Tensor::new(vec![1, 4], v), false)
        };
        let saturated = [
            sat(0, &mut tape),
            sat(1, &mut tape),
            sat(2, &mut tape),
            sat(3, &mut tape),
        ];
        let l2 = enc.loss(&mut tape, &saturated, &truth).unwrap();
        assert!(tape.value(l2).item() < 1e-7);
    }

    #[test]
    fn loss_matches_per_head_oracle() {
        let cfg = toy_cfg();
        let (_, enc) = build(&cfg, 36);
        let mut rng = RngStream::new(36, "logits");
        let raw: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.next_gaussian()).collect())
            .collect();
        let mut tape = Tape::new();
        let logits = [
            tape.leaf(Tensor::new(vec![1, 4], raw[0].clone()), false),
            tape.leaf(Tensor::new(vec![1, 4], raw[1].clone()), false),
            tape.leaf(Tensor::new(vec![1, 4], raw[2].clone()), false),
            tape.leaf(Tensor::new(vec![1, 4], raw[3].clone()), false),
        ];
        let truth = Annotation::from_classes([3, 0, 2, 1]).unwrap();
        let l = enc.loss(&mut tape, &logits, &truth).unwrap();
        let classes = truth.classes();
        let mut expect = 0.0;
        for t in 0..4 {
            let row = &raw[t];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            expect += lse - row[classes[t] as usize];
        }
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

#[test]
    fn one_layer_gradient_checks() {
        let cfg = EncoderConfig {
            width: 6,
            depth: 1,
            heads: 2,
            ffn_expansion: 2,
        };
        let (store, enc) = build(&cfg, 37);
        let mut rng = RngStream::new(37, "point");
        let point = gaussian_init(vec![5, 6], 0.8, &mut rng);
        let err = crate::gradcheck::grad_check(
            move |tape, x| {
                let bind = TapeBinding::bind(tape, &store, false);
                let out = enc.encode(tape, &bind, x);
                let sq = tape.mul(out, out);
                tape.sum_all(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
