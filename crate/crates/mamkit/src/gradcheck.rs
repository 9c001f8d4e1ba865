//! Central finite-difference verification of reverse-mode gradients.

use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::{NumericError, Tensor};

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences `(f(x+eps) - f(x-eps)) / 2eps`, coordinate by
/// coordinate. Returns the worst coordinate error relative to the largest
/// gradient magnitude (floored at 1e-12): central differences carry absolute
/// noise of order |f|*ulp/eps, so normalizing per coordinate would demand
/// impossible precision wherever an individual gradient entry is tiny.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, NumericError>
where
    F: Fn(&mut Tape, VarId) -> VarId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x);
    assert_eq!(
        tape.value(out).numel(),
        1,
        "grad_check requires a scalar-valued function"
    );
    tape.backward(out);
    let analytic = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: &Tensor| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(p.clone(), false);
        let o = f(&mut t, x);
        t.value(o).item()
    };

    let mut numeric = vec![0.0f64; point.numel()];
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        if !analytic[i].is_finite() || !numeric[i].is_finite() {
            return Err(NumericError::NonFinite {
                context: "grad_check".to_string(),
                index: i,
            });
        }
    }
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(1e-12f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |w, (a, n)| w.max((a - n).abs() / scale));
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn rand(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.next_gaussian()).collect())
}

/// Finite-difference check of every differentiable tape operation plus the
/// full backbone -> clustering -> encoder -> loss pipeline (soft assignment)
/// at toy sizes. eps 1e-5, threshold 1e-4 throughout.
pub fn run_all() -> Vec<CheckOutcome> {
    const EPS: f64 = 1e-5;
    const THRESHOLD: f64 = 1e-4;
    let mut rng = RngStream::new(1815, "gradcheck-suite");
    let mut out = Vec::new();
    let check = |name: &str,
                     point: Tensor,
                     f: Box<dyn Fn(&mut Tape, VarId) -> VarId>,
                     out: &mut Vec<CheckOutcome>| {
        let worst = grad_check(|t, x| f(t, x), &point, EPS).unwrap_or(f64::INFINITY);
        out.push(CheckOutcome {
            name: name.to_string(),
            worst,
            threshold: THRESHOLD,
            pass: worst < THRESHOLD,
        });
    };

    // every op is probed through a scalar readout; a fixed random weight
    // keeps the readout gradient dense
    {
        let w43 = rand(vec![4, 3], &mut rng);
        check(
            "matmul",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let b = t.constant(w43.clone());
                let c = t.matmul(x, b).unwrap();
                let sq = t.mul(c, c);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    {
        let w34 = rand(vec![3, 4], &mut rng);
        check(
            "matmul_nt",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let b = t.constant(w34.clone());
                let c = t.matmul_nt(x, b).unwrap();
                let sq = t.mul(c, c);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    check(
        "transpose",
        rand(vec![3, 4], &mut rng),
        Box::new(|t, x| {
            let y = t.transpose(x);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }),
        &mut out,
    );
    {
        let w = rand(vec![3, 4], &mut rng);
        check(
            "add",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let b = t.constant(w.clone());
                let y = t.add(x, b);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    {
        let w = rand(vec![3, 4], &mut rng);
        check(
            "mul",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let b = t.constant(w.clone());
                let y = t.mul(x, b);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    {
        let b = rand(vec![4], &mut rng);
        check(
            "add_bias",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.add_bias(x, bv);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    check(
        "scale",
        rand(vec![6], &mut rng),
        Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }),
        &mut out,
    );
    {
        let c = rand(vec![6], &mut rng);
        check(
            "add_const",
            rand(vec![6], &mut rng),
            Box::new(move |t, x| {
                let y = t.add_const(x, &c);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    check(
        "gelu",
        rand(vec![8], &mut rng),
        Box::new(|t, x| {
            let y = t.gelu(x);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }),
        &mut out,
    );
    {
        let w = rand(vec![3, 4], &mut rng);
        check(
            "softmax",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let s = t.softmax(x, 1);
                let wv = t.constant(w.clone());
                let p = t.mul(s, wv);
                t.sum_all(p)
            }),
            &mut out,
        );
    }
    {
        let w = rand(vec![3, 4], &mut rng);
        check(
            "softmax_axis0",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let s = t.softmax(x, 0);
                let wv = t.constant(w.clone());
                let p = t.mul(s, wv);
                t.sum_all(p)
            }),
            &mut out,
        );
    }
    check(
        "cross_entropy",
        rand(vec![4], &mut rng),
        Box::new(|t, x| t.cross_entropy_from_logits(x, 2).unwrap()),
        &mut out,
    );
    check(
        "sum_all",
        rand(vec![7], &mut rng),
        Box::new(|t, x| {
            let sq = t.mul(x, x);
            t.sum_all(sq)
        }),
        &mut out,
    );
    for axis in [0usize, 1] {
        let w = rand(vec![if axis == 0 { 4 } else { 3 }], &mut rng);
        check(
            &format!("mean_axis{axis}"),
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let m = t.mean_axis(x, axis);
                let wv = t.constant(w.clone());
                let p = t.mul(m, wv);
                let sq = t.mul(p, p);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    {
        let w = rand(vec![3], &mut rng);
        check(
            "row_sums",
            rand(vec![3, 4], &mut rng),
            Box::new(move |t, x| {
                let r = t.row_sums(x);
                let wv = t.constant(w.clone());
                let p = t.mul(r, wv);
                let sq = t.mul(p, p);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    check(
        "div_rows",
        rand(vec![4, 3], &mut rng),
        Box::new(|t, x| {
            let s = t.row_sums(x);
            let d = t.div_rows(x, s, 1e-8);
            let sq = t.mul(d, d);
            t.sum_all(sq)
        }),
        &mut out,
    );
    check(
        "concat_rows",
        rand(vec![6, 3], &mut rng),
        Box::new(|t, x| {
            let a = t.slice_rows(x, 0, 2);
            let b = t.slice_rows(x, 2, 4);
            let c = t.concat_rows(&[b, a]);
            let sq = t.mul(c, c);
            t.sum_all(sq)
        }),
        &mut out,
    );
    check(
        "slice_rows",
        rand(vec![5, 3], &mut rng),
        Box::new(|t, x| {
            let s = t.slice_rows(x, 1, 3);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }),
        &mut out,
    );
    check(
        "gather_rows",
        rand(vec![4, 3], &mut rng),
        Box::new(|t, x| {
            let g = t.gather_rows(x, &[2, 0, 2, 3]);
            let sq = t.mul(g, g);
            t.sum_all(sq)
        }),
        &mut out,
    );
    check(
        "reshape",
        rand(vec![2, 6], &mut rng),
        Box::new(|t, x| {
            let r = t.reshape(x, vec![3, 4]);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        }),
        &mut out,
    );
    {
        // straight-through surrogate: its backward is that of the soft
        // column, so check the soft path it passes through
        let w = rand(vec![3, 5], &mut rng);
        check(
            "straight_through_soft_surrogate",
            rand(vec![3, 5], &mut rng),
            Box::new(move |t, x| {
                let s = t.softmax(x, 0);
                let wv = t.constant(w.clone());
                let p = t.mul(s, wv);
                t.sum_all(p)
            }),
            &mut out,
        );
    }
    {
        let w = rand(vec![5, 6], &mut rng);
        check(
            "layer_norm",
            rand(vec![5, 6], &mut rng),
            Box::new(move |t, x| {
                let g = t.leaf(Tensor::new(vec![6], vec![1.0; 6]), false);
                let b = t.leaf(Tensor::zeros(vec![6]), false);
                let ln = t.layer_norm(x, g, b);
                let wv = t.constant(w.clone());
                let p = t.mul(ln, wv);
                t.sum_all(p)
            }),
            &mut out,
        );
    }
    {
        let w = rand(vec![5, 6], &mut rng);
        check(
            "attention",
            rand(vec![15, 6], &mut rng),
            Box::new(move |t, x| {
                let q = t.slice_rows(x, 0, 5);
                let k = t.slice_rows(x, 5, 5);
                let v = t.slice_rows(x, 10, 5);
                let a = t.attention(q, k, v, 2);
                let wv = t.constant(w.clone());
                let p = t.mul(a, wv);
                t.sum_all(p)
            }),
            &mut out,
        );
    }
    for stride in [1usize, 2] {
        let w = rand(vec![3, 18], &mut rng);
        let b = rand(vec![3], &mut rng);
        check(
            &format!("conv2d_stride{stride}"),
            rand(vec![2, 4, 4], &mut rng),
            Box::new(move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, wv, bv, stride);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            }),
            &mut out,
        );
    }
    {
        use crate::backbone::BackboneConfig;
        use crate::clustering::{AssignMode, ClusterConfig};
        use crate::encoder::EncoderConfig;
        use crate::labels::Annotation;
        use crate::model::{MamConfig, MamModel};
        use crate::optim::TapeBinding;
        let cfg = MamConfig {
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
        };
        let mut model = MamModel::new(cfg, 1815).unwrap();
        // Head output layers are zero-initialized, which makes the loss
        // constant in the input; give them nonzero weights so the check
        // exercises a real gradient.
        let hrng = RngStream::new(1815, "pipeline-heads");
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
        let mut prng = RngStream::new(1815, "pipeline-point");
        let point = Tensor::new(
            vec![3, 16, 16],
            (0..3 * 16 * 16).map(|_| 0.5 * prng.next_gaussian()).collect(),
        );
        check(
            "full_pipeline_soft",
            point,
            Box::new(move |t, x| {
                let bind = TapeBinding::bind(t, &model.store, false);
                let mut rng = RngStream::new(1815, "pipeline-fwd");
                let logits = model
                    .forward(t, &bind, x, AssignMode::Soft, &mut rng)
                    .unwrap();
                model.loss(t, &logits, &truth).unwrap()
            }),
            &mut out,
        );
    }
    out
}
