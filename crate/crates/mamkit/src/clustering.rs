//! Stage-wise adaptive token clustering.
//!
//! Each hierarchical feature map is patchified with 1x1 windows into raster
//! tokens, assigned to learnable cluster embeddings through Gumbel-softmax
//! attention over the cluster axis, and reduced to one projected token per
//! cluster. Stages with rate 1 skip assignment and only apply the mapping
//! (value + shared output projection). Cluster means use an eps guard so an
//! empty hard cluster reduces to the zero vector instead of NaN.

use serde::{Deserialize, Serialize};

use crate::optim::{gaussian_init, ParamGroup, ParamStore, TapeBinding};
use crate::rng::RngStream;
use crate::tape::{gumbel_noise, Tape, VarId};

pub const MEAN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    /// Gumbel noise on logits, softmax at temperature, hard argmax with
    /// straight-through gradients.
    TrainStochasticHard,
    /// No noise, hard argmax.
    EvalDeterministicHard,
    /// No noise, plain softmax; the differentiable reference path.
    Soft,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterConfig {
    pub rates: [f64; 4],
    pub temperature: f64,
    pub mode: AssignMode,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            rates: [1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0, 1.0],
            temperature: 1.0,
            mode: AssignMode::EvalDeterministicHard,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), String> {
        for &r in &self.rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(format!("clustering rate {r} outside (0, 1]"));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

/// `m_l = round(n_l * r_l)`, floored at 1.
pub fn cluster_counts(tokens_per_stage: &[usize; 4], rates: &[f64; 4]) -> [usize; 4] {
    let mut m = [0; 4];
    for l in 0..4 {
        m[l] = ((tokens_per_stage[l] as f64 * rates[l]).round() as usize).max(1);
    }
    m
}

/// Token counts per stage for an input extent: n_l = HW / 2^{2(l+1)}.
pub fn tokens_per_stage(h: usize, w: usize) -> [usize; 4] {
    let mut n = [0; 4];
    for l in 0..4 {
        n[l] = (h >> (l + 1)) * (w >> (l + 1));
    }
    n
}

/// Reshape a `[C, H, W]` stage feature into `[n, C]` raster-order tokens
/// (1x1 windows: one token per position).
pub fn patchify(tape: &mut Tape, stage: VarId) -> VarId {
    let shape = tape.value(stage).shape().to_vec();
    assert_eq!(shape.len(), 3, "patchify expects [c, h, w]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(stage, vec![c, h * w]);
    tape.transpose(flat)
}

struct StageBank {
    /// None for rate-1 stages (skip path has no clusters).
    clusters: Option<usize>,
    wq: Option<usize>,
    wk: Option<usize>,
    wv: usize,
}

/// Per-stage cluster embeddings and projections plus the shared output
/// projection; registered once per model into a [`ParamStore`].
pub struct ClusterBank {
    pub counts: [usize; 4],
    pub rates: [f64; 4],
    qk_width: usize,
    stages: Vec<StageBank>,
    wo: usize,
}

impl ClusterBank {
    /// `channels` are the backbone stage widths; `width` is the common model
    /// width after W_V; `qk_width` the assignment projection width.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut RngStream,
        channels: &[usize; 4],
        tokens: &[usize; 4],
        rates: &[f64; 4],
        width: usize,
        qk_width: usize,
    ) -> Self {
        let counts = cluster_counts(tokens, rates);
        let mut stages = Vec::with_capacity(4);
        for l in 0..4 {
            let c = channels[l];
            let skip = rates[l] >= 1.0;
            let std = 1.0 / (c as f64).sqrt();
            let mut reg = |suffix: &str, shape: Vec<usize>, dev: f64| {
                let name = format!("cluster.s{l}.{suffix}");
                store.add(
                    &name,
                    ParamGroup::Transformer,
                    gaussian_init(shape, dev, &mut rng.substream(&name)),
                )
            };
            stages.push(StageBank {
                clusters: (!skip).then(|| reg("c", vec![counts[l], c], 0.02)),
                wq: (!skip).then(|| reg("wq", vec![c, qk_width], std)),
                wk: (!skip).then(|| reg("wk", vec![c, qk_width], std)),
                wv: reg("wv", vec![c, width], std),
            });
        }
        let wo = store.add(
            "cluster.wo",
            ParamGroup::Transformer,
            gaussian_init(
                vec![width, width],
                1.0 / (width as f64).sqrt(),
                &mut rng.substream("cluster.wo"),
            ),
        );
        ClusterBank {
            counts,
            rates: *rates,
            qk_width,
            stages,
            wo,
        }
    }

    /// Assignment matrix A `[m, n]`: columns normalized over clusters,
    /// hardened per mode.
    pub fn assign(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        stage: usize,
        tokens: VarId,
        cfg: &ClusterConfig,
        rng: &mut RngStream,
    ) -> VarId {
        let bank = &self.stages[stage];
        let c = bind.var(bank.clusters.expect("assign on a skip stage"));
        let wq = bind.var(bank.wq.unwrap());
        let wk = bind.var(bank.wk.unwrap());
        let q = tape.matmul(c, wq).expect("cluster width mismatch");
        let k = tape.matmul(tokens, wk).expect("token width mismatch");
        let mut logits = tape.matmul_nt(q, k).expect("qk width mismatch");
        if cfg.mode == AssignMode::TrainStochasticHard {
            let shape = tape.value(logits).shape().to_vec();
            let noise = gumbel_noise(shape, &mut rng.substream(&format!("gumbel.s{stage}")));
            logits = tape.add_const(logits, &noise);
        }
        let scaled = tape.scale(logits, 1.0 / cfg.temperature);
        let soft = tape.softmax(scaled, 0);
        match cfg.mode {
            AssignMode::Soft => soft,
            _ => tape.straight_through_cols(soft),
        }
    }

    /// Eq. 3 reduction: per-cluster eps-guarded weighted mean of projected
    /// tokens, then the shared output projection.
    pub fn reduce(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        stage: usize,
        assignment: VarId,
        tokens: VarId,
    ) -> VarId {
        let wv = bind.var(self.stages[stage].wv);
        let wo = bind.var(self.wo);
        let v = tape.matmul(tokens, wv).expect("token width mismatch");
        let num = tape.matmul(assignment, v).expect("assignment shape mismatch");
        let mass = tape.row_sums(assignment);
        let mean = tape.div_rows(num, mass, MEAN_EPS);
        tape.matmul(mean, wo).expect("model width mismatch")
    }

    /// Full per-stage pipeline; rate-1 stages bypass assignment entirely.
    pub fn stage_pipeline(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        stage: usize,
        tokens: VarId,
        cfg: &ClusterConfig,
        rng: &mut RngStream,
    ) -> VarId {
        if self.rates[stage] >= 1.0 {
            let wv = bind.var(self.stages[stage].wv);
            let wo = bind.var(self.wo);
            let v = tape.matmul(tokens, wv).expect("token width mismatch");
            return tape.matmul(v, wo).expect("model width mismatch");
        }
        let a = self.assign(tape, bind, stage, tokens, cfg, rng);
        self.reduce(tape, bind, stage, a, tokens)
    }

    pub fn qk_width(&self) -> usize {
        self.qk_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn token_counts_for_64() {
        assert_eq!(tokens_per_stage(64, 64), [1024, 256, 64, 16]);
    }

    #[test]
    fn default_rates_at_224_and_32() {
        let r = ClusterConfig::default().rates;
        assert_eq!(
            cluster_counts(&tokens_per_stage(224, 224), &r),
            [196, 196, 196, 196]
        );
        assert_eq!(cluster_counts(&tokens_per_stage(32, 32), &r), [4, 4, 4, 4]);
    }

    #[test]
    fn rate_one_keeps_all_tokens_and_floor_is_one() {
        assert_eq!(cluster_counts(&[7, 7, 7, 7], &[1.0; 4]), [7, 7, 7, 7]);
        assert_eq!(
            cluster_counts(&[4, 4, 4, 4], &[0.01, 0.01, 0.01, 1.0]),
            [1, 1, 1, 4]
        );
    }

    #[test]
    fn patchify_is_raster_order_and_lossless() {
        let mut tape = Tape::new();
        // 3 channels over a 2x2 grid; token (i) must hold channel values at
        // raster position i.
        let vals: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let stage = tape.leaf(Tensor::new(vec![3, 2, 2], vals), false);
        let tokens = patchify(&mut tape, stage);
        let t = tape.value(tokens);
        assert_eq!(t.shape(), &[4, 3]);
        // position (0,1) is raster index 1; channels are 1, 5, 9
        assert_eq!(&t.data()[3..6], &[1.0, 5.0, 9.0]);
        // inverse reshape: transpose back and reshape recovers the stage
        let back = tape.transpose(tokens);
        let re = tape.reshape(back, vec![3, 2, 2]);
        assert_eq!(
            tape.value(re).data(),
            &(0..12).map(|v| v as f64).collect::<Vec<_>>()[..]
        );
    }

    fn toy_bank(seed: u64, rates: [f64; 4]) -> (ParamStore, ClusterBank) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, "init");
        let bank = ClusterBank::register(
            &mut store,
            &mut rng,
            &[5, 5, 5, 5],
            &[12, 12, 12, 12],
            &rates,
            6,
            4,
        );
        (store, bank)
    }

    fn toy_tokens(tape: &mut Tape, seed: u64, n: usize, c: usize) -> VarId {
        let mut rng = RngStream::new(seed, "tokens");
        tape.leaf(gaussian_init(vec![n, c], 1.0, &mut rng), false)
    }

    #[test]
    fn soft_columns_sum_to_one() {
        let (store, bank) = toy_bank(21, [0.25, 0.25, 0.25, 1.0]);
        let cfg = ClusterConfig {
            rates: bank.rates,
            temperature: 1.0,
            mode: AssignMode::Soft,
        };
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let tokens = toy_tokens(&mut tape, 1, 12, 5);
        let mut rng = RngStream::new(21, "assign");
        let a = bank.assign(&mut tape, &bind, 0, tokens, &cfg, &mut rng);
        let t = tape.value(a);
        assert_eq!(t.shape(), &[3, 12]);
        for j in 0..12 {
            let s: f64 = (0..3).map(|i| t.data()[i * 12 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_columns_are_one_hot_and_eval_matches_argmax() {
        let (store, bank) = toy_bank(22, [0.25, 0.25, 0.25, 1.0]);
        let cfg = ClusterConfig {
            rates: bank.rates,
            temperature: 1.0,
            mode: AssignMode::EvalDeterministicHard,
        };
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let tokens = toy_tokens(&mut tape, 2, 12, 5);
        let mut rng = RngStream::new(22, "assign");
        let a = bank.assign(&mut tape, &bind, 0, tokens, &cfg, &mut rng);
        let t = tape.value(a).clone();
        for j in 0..12 {
            let col: Vec<f64> = (0..3).map(|i| t.data()[i * 12 + j]).collect();
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), 2);
        }
        // same bank in soft mode at tiny temperature approaches the same
        // one-hot columns
        let soft_cfg = ClusterConfig {
            temperature: 1e-5,
            mode: AssignMode::Soft,
            ..cfg
        };
        let mut tape2 = Tape::new();
        let bind2 = TapeBinding::bind(&mut tape2, &store, false);
        let tokens2 = toy_tokens(&mut tape2, 2, 12, 5);
        let s = bank.assign(&mut tape2, &bind2, 0, tokens2, &soft_cfg, &mut rng);
        let ts = tape2.value(s);
        for (a, b) in t.data().iter().zip(ts.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_cluster_reduces_to_projected_mean() {
        let (store, bank) = toy_bank(23, [1.0 / 12.0, 0.25, 0.25, 1.0]);
        assert_eq!(bank.counts[0], 1);
        let cfg = ClusterConfig {
            rates: bank.rates,
            temperature: 1.0,
            mode: AssignMode::Soft,
        };
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let tokens = toy_tokens(&mut tape, 3, 12, 5);
        let mut rng = RngStream::new(23, "assign");
        let out = bank.stage_pipeline(&mut tape, &bind, 0, tokens, &cfg, &mut rng);
        // oracle: W_o(mean_j W_V g_j) with the eps-guarded denominator
        let g = tape.value(tokens).clone();
        let wv = store.by_name("cluster.s0.wv").value.clone();
        let wo = store.by_name("cluster.wo").value.clone();
        let mut mean = vec![0.0; 6];
        for j in 0..12 {
            for (cc, m) in mean.iter_mut().enumerate() {
                let mut v = 0.0;
                for k in 0..5 {
                    v += g.data()[j * 5 + k] * wv.data()[k * 6 + cc];
                }
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= 12.0 + MEAN_EPS);
        let mut expect = vec![0.0; 6];
        for (cc, e) in expect.iter_mut().enumerate() {
            for k in 0..6 {
                *e += mean[k] * wo.data()[k * 6 + cc];
            }
        }
        let got = tape.value(out);
        assert_eq!(got.shape(), &[1, 6]);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn soft_reduce_matches_double_loop_oracle() {
        let (store, bank) = toy_bank(24, [0.25, 0.25, 0.25, 1.0]);
        let cfg = ClusterConfig {
            rates: bank.rates,
            temperature: 1.3,
            mode: AssignMode::Soft,
        };
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &store, false);
        let tokens = toy_tokens(&mut tape, 4, 12, 5);
        let mut rng = RngStream::new(24, "assign");
        let a = bank.assign(&mut tape, &bind, 0, tokens, &cfg, &mut rng);
        let out = bank.reduce(&mut tape, &bind, 0, a, tokens);
        let av = tape.value(a).clone();
        let g = tape.value(tokens).clone();
        let wv = store.by_name("cluster.s0.wv").value.clone();
        let wo = store.by_name("cluster.wo").value.clone();
        let got = tape.value(out).clone();
        for i in 0..3 {
            let mass: f64 = (0..12).map(|j| av.data()[i * 12 + j]).sum();
            let mut mean = vec![0.0; 6];
            for j in 0..12 {
                let w = av.data()[i * 12 + j];
                for (cc, m) in mean.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for k in 0..5 {
                        v += g.data()[j * 5 + k] * wv.data()[k * 6 + cc];
                    }
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= mass + MEAN_EPS);
            for cc in 0..6 {
                let mut e = 0.0;
                for k in 0..6 {
                    e += mean[k] * wo.data()[k * 6 + cc];
                }
                let got_v = got.data()[i * 6 + cc];
                assert!((got_v - e).abs() < 1e-10, "{got_v} vs {e}");
            }
        }
    }

    #[test]
    fn empty_hard_cluster_is_finite_zero_mean() {
        // div_rows with the eps guard keeps an empty cluster's mean finite
        // and zero, which is what reduce produces for a mass-0 row
        let mut t = Tape::new();
        let num = t.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]), false);
        let mass = t.leaf(Tensor::new(vec![2], vec![3.0, 0.0]), false);
        let mean = t.div_rows(num, mass, MEAN_EPS);
        let v = t.value(mean).data().to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn skip_stage_ignores_rng_and_temperature() {
        let (store, bank) = toy_bank(26, [0.25, 0.25, 0.25, 1.0]);
        let run = |temp: f64, seed: u64| -> Vec<f64> {
            let cfg = ClusterConfig {
                rates: bank.rates,
                temperature: temp,
                mode: AssignMode::TrainStochasticHard,
            };
            let mut tape = Tape::new();
            let bind = TapeBinding::bind(&mut tape, &store, false);
            let tokens = toy_tokens(&mut tape, 5, 12, 5);
            let mut rng = RngStream::new(seed, "assign");
            let out = bank.stage_pipeline(&mut tape, &bind, 3, tokens, &cfg, &mut rng);
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(1.0, 1), run(0.01, 999));
    }

    #[test]
    fn soft_path_gradient_checks() {
        let (store, bank) = toy_bank(27, [0.25, 0.25, 0.25, 1.0]);
        let cfg = ClusterConfig {
            rates: bank.rates,
            temperature: 1.0,
            mode: AssignMode::Soft,
        };
        let mut rng0 = RngStream::new(27, "point");
        let point = gaussian_init(vec![12, 5], 0.7, &mut rng0);
        let err = crate::gradcheck::grad_check(
            move |tape, x| {
                let bind = TapeBinding::bind(tape, &store, false);
                let mut rng = RngStream::new(27, "assign");
                let out = bank.stage_pipeline(tape, &bind, 0, x, &cfg, &mut rng);
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
