//! Central-finite-difference gradient oracle. Always runs in 64-bit: the
//! truncation error of the central stencil (~eps^2) and f64 rounding leave
//! comfortably more than the 1e-3 relative tolerance the crate tests at.

use super::{AttentionMask, Graph, Tensor, Var};
use crate::error::Result;

/// Checks the reverse-mode gradient of `f` (a scalar-valued tensor function)
/// at `x0` against central finite differences, coordinate by coordinate.
/// Returns the worst relative error across coordinates.
///
/// Inputs for kinked ops (relu, abs, minimum, interpolation) should keep a
/// margin from the kink; the stencil straddling a kink measures the wrong
/// one-sided derivative.
pub fn finite_diff_check<F>(x0: &Tensor<f64>, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.parameter(x0);
    let loss = f(&mut g, x)?;
    assert_eq!(g.values(loss).len(), 1, "finite_diff_check needs a scalar function");
    g.backward(loss)?;
    let analytic: Vec<f64> = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x0.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x0.shape().to_vec(), data)?;
        let mut g = Graph::new();
        let x = g.parameter(&t);
        let loss = f(&mut g, x)?;
        Ok(g.values(loss)[0])
    };

    let base = x0.data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Runs [`finite_diff_check`] on every differentiable primitive of the
/// engine, each against every differentiable operand. Returns
/// `(label, worst relative error)` pairs; the whole catalog is expected to
/// stay below 1e-3.
pub fn check_primitive_gradients(eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use super::seeded_rng;
    use rand::Rng;
    use std::sync::Arc;

    // Values bounded away from zero so kinked ops are checked off-kink.
    fn rand_tensor(shape: &[usize], label: &str, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = seeded_rng(0x5eed, label);
        let data = (0..shape.iter().product())
            .map(|_| {
                let m = rng.gen_range(lo..hi);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn weighted(g: &mut Graph<f64>, v: Var) -> Result<Var> {
        let n = g.values(v).len();
        let w: Vec<f64> = (0..n).map(|i| 0.15 + ((i * 37) % 11) as f64 / 11.0).collect();
        let wt = Tensor::new(vec![n], w)?;
        let wv = g.constant(&wt);
        let flat = g.reshape(v, vec![n])?;
        let prod = g.mul(flat, wv)?;
        Ok(g.sum_all(prod))
    }

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |label: &'static str,
                   x0: Tensor<f64>,
                   f: Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>|
     -> Result<()> {
        let err = finite_diff_check(&x0, |g, x| f(g, x).and_then(|v| weighted(g, v)), eps)?;
        out.push((label, err));
        Ok(())
    };

    let a34 = rand_tensor(&[3, 4], "a34", 0.2, 1.0);
    let b45 = rand_tensor(&[4, 5], "b45", 0.2, 1.0);
    let x235 = rand_tensor(&[2, 3, 5], "x235", 0.2, 1.0);
    let y35 = rand_tensor(&[3, 5], "y35", 0.3, 1.2);

    {
        let b = b45.clone();
        run("add.lhs", rand_tensor(&[4, 5], "addl", 0.2, 1.0), Box::new(move |g, x| {
            let c = g.constant(&b);
            g.add(x, c)
        }))?;
    }
    {
        let b = y35.clone();
        run("add.broadcast", x235.clone(), Box::new(move |g, x| {
            let c = g.constant(&b);
            g.add(x, c)
        }))?;
    }
    {
        let b = y35.clone();
        run("mul.broadcast", x235.clone(), Box::new(move |g, x| {
            let c = g.constant(&b);
            g.mul(x, c)
        }))?;
    }
    {
        let a = x235.clone();
        run("mul.rhs", y35.clone(), Box::new(move |g, x| {
            let c = g.constant(&a);
            g.mul(c, x)
        }))?;
    }
    {
        let b = rand_tensor(&[3, 5], "divb", 0.5, 1.5);
        run("div.num", x235.clone(), Box::new(move |g, x| {
            let c = g.constant(&b);
            g.div(x, c)
        }))?;
    }
    {
        let a = x235.clone();
        run("div.den", rand_tensor(&[3, 5], "divd", 0.5, 1.5), Box::new(move |g, x| {
            let c = g.constant(&a);
            g.div(c, x)
        }))?;
    }
    {
        // keep |a-b| away from the tie
        let b = Tensor::new(vec![6], vec![0.5, -0.7, 1.2, -1.4, 0.9, -0.2])?;
        run("minimum", Tensor::new(vec![6], vec![0.1, -0.2, 1.8, -0.6, 1.5, -0.9])?, Box::new(move |g, x| {
            let c = g.constant(&b);
            g.minimum(x, c)
        }))?;
    }
    run("affine", a34.clone(), Box::new(|g, x| Ok(g.affine(x, 1.7, -0.3))))?;
    run("exp", rand_tensor(&[7], "exp", 0.1, 1.0), Box::new(|g, x| Ok(g.exp(x))))?;
    run("relu", rand_tensor(&[9], "relu", 0.1, 1.0), Box::new(|g, x| Ok(g.relu(x))))?;
    run("silu", rand_tensor(&[9], "silu", 0.1, 1.5), Box::new(|g, x| Ok(g.silu(x))))?;
    run("sigmoid", rand_tensor(&[9], "sig", 0.1, 1.5), Box::new(|g, x| Ok(g.sigmoid(x))))?;
    run("softplus", rand_tensor(&[9], "sp", 0.1, 1.5), Box::new(|g, x| Ok(g.softplus(x))))?;
    run("abs", rand_tensor(&[9], "abs", 0.1, 1.0), Box::new(|g, x| Ok(g.abs(x))))?;
    {
        let b = b45.clone();
        run("matmul.lhs", a34.clone(), Box::new(move |g, x| {
            let c = g.constant(&b);
            g.matmul(x, c)
        }))?;
    }
    {
        let a = a34.clone();
        run("matmul.rhs", b45.clone(), Box::new(move |g, x| {
            let c = g.constant(&a);
            g.matmul(c, x)
        }))?;
    }
    let img = rand_tensor(&[5, 6, 3], "img", 0.1, 1.0);
    let ker2 = rand_tensor(&[3, 3, 3, 4], "ker2", 0.1, 0.5);
    {
        let k = ker2.clone();
        run("conv2d.input", img.clone(), Box::new(move |g, x| {
            let kc = g.constant(&k);
            g.conv2d(x, kc, 1, 1)
        }))?;
    }
    {
        let i = img.clone();
        run("conv2d.kernel", ker2.clone(), Box::new(move |g, x| {
            let ic = g.constant(&i);
            g.conv2d(ic, x, 2, 1)
        }))?;
    }
    let vol = rand_tensor(&[3, 4, 4, 2], "vol3", 0.1, 1.0);
    let ker3 = rand_tensor(&[2, 3, 3, 2, 3], "ker3", 0.1, 0.5);
    {
        let k = ker3.clone();
        run("conv3d.input", vol.clone(), Box::new(move |g, x| {
            let kc = g.constant(&k);
            g.conv3d_padded(x, kc, (1, 0), 1)
        }))?;
    }
    {
        let v = vol.clone();
        run("conv3d.kernel", ker3.clone(), Box::new(move |g, x| {
            let vc = g.constant(&v);
            g.conv3d_causal(vc, x, 1)
        }))?;
    }
    run("softmax", rand_tensor(&[4, 5], "sm", 0.1, 2.0), Box::new(|g, x| g.softmax_lastdim(x)))?;
    run("log_softmax", rand_tensor(&[4, 5], "lsm", 0.1, 2.0), Box::new(|g, x| {
        g.log_softmax_lastdim(x)
    }))?;
    run("group_norm", rand_tensor(&[3, 4, 8], "gn", 0.1, 1.5), Box::new(|g, x| {
        g.group_norm(x, 4, 1e-5)
    }))?;
    let q = rand_tensor(&[2, 3, 8], "q", 0.2, 1.0);
    let kk = rand_tensor(&[2, 4, 8], "k", 0.2, 1.0);
    let vv = rand_tensor(&[2, 4, 8], "v", 0.2, 1.0);
    let mask = {
        let mut m = AttentionMask::all_allowed(3, 4);
        m.set(0, 3, false);
        m.set(2, 0, false);
        m.set(2, 1, false);
        m
    };
    {
        let (k, v, m) = (kk.clone(), vv.clone(), mask.clone());
        run("mha.q", q.clone(), Box::new(move |g, x| {
            let kc = g.constant(&k);
            let vc = g.constant(&v);
            g.multi_head_attention(x, kc, vc, 2, Some(&m))
        }))?;
    }
    {
        let (qq, v, m) = (q.clone(), vv.clone(), mask.clone());
        run("mha.k", kk.clone(), Box::new(move |g, x| {
            let qc = g.constant(&qq);
            let vc = g.constant(&v);
            g.multi_head_attention(qc, x, vc, 2, Some(&m))
        }))?;
    }
    {
        let (qq, k) = (q.clone(), kk.clone());
        run("mha.v", vv.clone(), Box::new(move |g, x| {
            let qc = g.constant(&qq);
            let kc = g.constant(&k);
            g.multi_head_attention(qc, kc, x, 2, None)
        }))?;
    }
    {
        let ids: Arc<Vec<u32>> = Arc::new(vec![2, 0, 1, 2, 3, 1]);
        run("embed", rand_tensor(&[4, 5], "emb", 0.2, 1.0), Box::new(move |g, x| {
            g.embed(x, Arc::clone(&ids))
        }))?;
    }
    {
        let idx: Arc<Vec<u32>> = Arc::new(vec![5, 3, 3, 0, 11, 7, 2, 9]);
        run("gather_flat", rand_tensor(&[3, 4], "gf", 0.2, 1.0), Box::new(move |g, x| {
            g.gather_flat(x, Arc::clone(&idx), vec![2, 4])
        }))?;
    }
    {
        let ids: Arc<Vec<u32>> = Arc::new(vec![1, 0, 3]);
        run("gather_lastdim", rand_tensor(&[3, 4], "gl", 0.2, 1.0), Box::new(move |g, x| {
            g.gather_lastdim(x, Arc::clone(&ids))
        }))?;
    }
    run("sum_all", a34.clone(), Box::new(|g, x| Ok(g.sum_all(x))))?;
    run("sum_lastdim", a34.clone(), Box::new(|g, x| g.sum_lastdim(x)))?;
    run("cumsum_exclusive", rand_tensor(&[2, 6], "cs", 0.1, 1.0), Box::new(|g, x| {
        g.cumsum_exclusive_lastdim(x)
    }))?;
    run("reshape", a34.clone(), Box::new(|g, x| g.reshape(x, vec![2, 6])))?;
    {
        let other = rand_tensor(&[2, 5], "cf", 0.2, 1.0);
        run("concat_first", rand_tensor(&[3, 5], "cf0", 0.2, 1.0), Box::new(move |g, x| {
            let c = g.constant(&other);
            g.concat_first(&[x, c])
        }))?;
    }
    run("slice_first", a34.clone(), Box::new(|g, x| g.slice_first(x, 1, 2)))?;
    {
        let other = rand_tensor(&[3, 2], "cl", 0.2, 1.0);
        run("concat_last", y35.clone(), Box::new(move |g, x| {
            let c = g.constant(&other);
            g.concat_last(&[x, c])
        }))?;
    }
    run("slice_last", y35.clone(), Box::new(|g, x| g.slice_last(x, 1, 3)))?;

    // bilinear: coords strictly interior to interpolation cells
    let feat = rand_tensor(&[4, 5, 3], "bfeat", 0.2, 1.0);
    let coords = Tensor::new(vec![4, 2], vec![0.3, 0.4, 1.6, 2.3, 2.25, 3.7, 0.75, 0.4])?;
    let fill = rand_tensor(&[3], "bfill", 0.2, 0.8);
    {
        let (c, fl) = (coords.clone(), fill.clone());
        run("sample_bilinear.feat", feat.clone(), Box::new(move |g, x| {
            let cc = g.constant(&c);
            let fc = g.constant(&fl);
            g.sample_bilinear(x, cc, fc)
        }))?;
    }
    {
        let (f, fl) = (feat.clone(), fill.clone());
        run("sample_bilinear.coords", coords.clone(), Box::new(move |g, x| {
            let fc = g.constant(&f);
            let flc = g.constant(&fl);
            g.sample_bilinear(fc, x, flc)
        }))?;
    }
    {
        let (f, c) = (feat.clone(), coords.clone());
        // one coord far out of grid so the fill path carries gradient
        let c = {
            let mut data = c.data().to_vec();
            data[0] = -3.0;
            Tensor::new(vec![4, 2], data)?
        };
        run("sample_bilinear.fill", fill.clone(), Box::new(move |g, x| {
            let fc = g.constant(&f);
            let cc = g.constant(&c);
            g.sample_bilinear(fc, cc, x)
        }))?;
    }
    {
        let coords: Arc<Vec<f64>> = Arc::new(vec![
            0.4, 0.3, 0.6, 1.3, 2.4, 1.5, 2.7, 1.2, 0.4, -5.0, 0.0, 0.0,
        ]);
        run("sample_trilinear.vol", rand_tensor(&[3, 4, 3, 2], "tvol", 0.2, 1.0), Box::new(move |g, x| {
            g.sample_trilinear(x, Arc::clone(&coords))
        }))?;
    }
    run("box_mean3x3", rand_tensor(&[4, 5, 2], "bm", 0.2, 1.0), Box::new(|g, x| g.box_mean3x3(x)))?;

    Ok(out)
}
