//! Per-operation contracts of the tensor engine, each checked against an
//! independent oracle (naive loops, exp-normalize, two-pass statistics,
//! per-head attention recomputation, finite differences).

use std::sync::Arc;

use approx::assert_relative_eq;
use ow4d_core::tensor::{finite_diff_check, seeded_rng, AttentionMask, Graph, Tensor, Var};
use ow4d_core::Result;
use rand::Rng;

fn rand_vec(n: usize, label: &str) -> Vec<f64> {
    let mut rng = seeded_rng(42, label);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn constant(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
    g.constant(&Tensor::new(shape.to_vec(), data).unwrap())
}

// ------------------------------------------------------------------ matmul

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let i2 = constant(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let m = constant(&mut g, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_projector() {
    let mut g = Graph::<f64>::new();
    let p = constant(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
    let m = constant(&mut g, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
    let y = g.matmul(p, m).unwrap();
    assert_eq!(g.values(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let a = rand_vec(12, "mm_a");
    let b = rand_vec(8, "mm_b");
    // independent oracle: naive triple loop
    let mut expect = vec![0.0f64; 3 * 2];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                expect[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let av = constant(&mut g, &[3, 4], a);
    let bv = constant(&mut g, &[4, 2], b);
    let y = g.matmul(av, bv).unwrap();
    for (got, want) in g.values(y).iter().zip(&expect) {
        assert_relative_eq!(got, want, max_relative = 1e-6, epsilon = 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = constant(&mut g, &[3, 4], vec![0.0; 12]);
    let b = constant(&mut g, &[3, 2], vec![0.0; 6]);
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
}

// ------------------------------------------------------------ convolution

#[test]
fn conv2d_identity_kernel_is_identity_bit_for_bit() {
    let data = rand_vec(5 * 4 * 3, "conv_id");
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[5, 4, 3], data.clone());
    // 1x1 kernel = identity over channels
    let mut kdata = vec![0.0; 3 * 3];
    for c in 0..3 {
        kdata[c * 3 + c] = 1.0;
    }
    let k = constant(&mut g, &[1, 1, 3, 3], kdata);
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.values(y), data.as_slice());
}

#[test]
fn conv2d_ones_kernel_counts_neighborhood() {
    // one-hot 5x5 input, 3x3 all-ones kernel, valid padding -> 3x3 indicator
    let mut data = vec![0.0f64; 5 * 5];
    data[2 * 5 + 2] = 1.0;
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[5, 5, 1], data);
    let k = constant(&mut g, &[3, 3, 1, 1], vec![1.0; 9]);
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[3, 3, 1]);
    // every 3x3 window sees the center exactly once
    assert_eq!(g.values(y), &[1.0; 9]);
}

#[test]
fn conv3d_matches_six_loop_oracle() {
    let (t, h, w, ci, co) = (3, 4, 5, 2, 3);
    let (kt, kh, kw) = (2, 3, 3);
    let input = rand_vec(t * h * w * ci, "c3_in");
    let kernel = rand_vec(kt * kh * kw * ci * co, "c3_k");
    let pad = 1usize;
    let (to, ho, wo) = (t + 2 * pad - kt + 1, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    // independent oracle: six nested loops over output and kernel taps
    let mut expect = vec![0.0f64; to * ho * wo * co];
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                for oc in 0..co {
                    let mut acc = 0.0;
                    for dt in 0..kt {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let it = ot as isize + dt as isize - pad as isize;
                                let iy = oy as isize + dy as isize - pad as isize;
                                let ix = ox as isize + dx as isize - pad as isize;
                                if it < 0 || iy < 0 || ix < 0 {
                                    continue;
                                }
                                let (it, iy, ix) = (it as usize, iy as usize, ix as usize);
                                if it >= t || iy >= h || ix >= w {
                                    continue;
                                }
                                for c in 0..ci {
                                    acc += input[((it * h + iy) * w + ix) * ci + c]
                                        * kernel[(((dt * kh + dy) * kw + dx) * ci + c) * co + oc];
                                }
                            }
                        }
                    }
                    expect[((ot * ho + oy) * wo + ox) * co + oc] = acc;
                }
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[t, h, w, ci], input);
    let k = constant(&mut g, &[kt, kh, kw, ci, co], kernel);
    let y = g.conv3d(x, k, pad).unwrap();
    assert_eq!(g.shape(y), &[to, ho, wo, co]);
    for (got, want) in g.values(y).iter().zip(&expect) {
        assert_relative_eq!(got, want, max_relative = 1e-5, epsilon = 1e-9);
    }
}

#[test]
fn conv_nonpositive_output_is_config_error() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[2, 2, 1], vec![0.0; 4]);
    let k = constant(&mut g, &[5, 5, 1, 1], vec![0.0; 25]);
    assert!(matches!(
        g.conv2d(x, k, 1, 0),
        Err(ow4d_core::Error::Config(_))
    ));
}

#[test]
fn conv3d_causal_never_sees_the_future() {
    // zero everything before step 2; causal conv must keep steps 0..2 zero
    let (t, h, w, c) = (4, 3, 3, 2);
    let mut input = vec![0.0f64; t * h * w * c];
    for v in input[2 * h * w * c..].iter_mut() {
        *v = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[t, h, w, c], input);
    let k = constant(&mut g, &[3, 3, 3, c, c], rand_vec(3 * 3 * 3 * c * c, "ck"));
    let y = g.conv3d_causal(x, k, 1).unwrap();
    assert_eq!(g.shape(y), &[t, h, w, c]);
    let frame = h * w * c;
    assert!(g.values(y)[..2 * frame].iter().all(|&v| v == 0.0));
    assert!(g.values(y)[2 * frame..].iter().any(|&v| v != 0.0));
}

// ---------------------------------------------------------------- softmax

#[test]
fn softmax_uniform_rows() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[3], vec![0.0, 0.0, 0.0]);
    let y = g.softmax_lastdim(x).unwrap();
    for v in g.values(y) {
        assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
    }
}

#[test]
fn softmax_large_inputs_do_not_overflow() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[2], vec![1000.0, 1000.0]);
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.values(y), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_exp_normalize_oracle() {
    let input: Vec<f64> = vec![1.0, 2.0, 3.0];
    // independent oracle: direct exp-normalize in f64
    let exps: Vec<f64> = input.iter().map(|v| v.exp()).collect();
    let sum: f64 = exps.iter().sum();
    let expect: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[3], input);
    let y = g.softmax_lastdim(x).unwrap();
    for (got, want) in g.values(y).iter().zip(&expect) {
        assert_relative_eq!(got, want, epsilon = 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one_on_random_inputs() {
    let data = rand_vec(6 * 9, "smrows");
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[6, 9], data);
    let y = g.softmax_lastdim(x).unwrap();
    for r in 0..6 {
        let s: f64 = g.values(y)[r * 9..(r + 1) * 9].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

// ------------------------------------------------------- group norm / silu

#[test]
fn group_norm_constant_input_is_zero_pre_affine() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[2, 3, 4], vec![7.5; 24]);
    let y = g.group_norm(x, 2, 1e-5).unwrap();
    for v in g.values(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn silu_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[1], vec![0.0]);
    let y = g.silu(x);
    assert_eq!(g.values(y), &[0.0]);
}

#[test]
fn group_norm_matches_two_pass_oracle() {
    let (lead, c, groups) = (6, 8, 4);
    let data = rand_vec(lead * c, "gn");
    let gc = c / groups;
    let eps = 1e-5;
    // independent oracle: explicit two-pass mean/variance per group
    let mut expect = vec![0.0f64; lead * c];
    for grp in 0..groups {
        let mut vals = Vec::new();
        for l in 0..lead {
            for j in 0..gc {
                vals.push(data[l * c + grp * gc + j]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for l in 0..lead {
            for j in 0..gc {
                let idx = l * c + grp * gc + j;
                expect[idx] = (data[idx] - mean) * rstd;
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[lead, c], data);
    let y = g.group_norm(x, groups, eps).unwrap();
    for (got, want) in g.values(y).iter().zip(&expect) {
        assert_relative_eq!(got, want, max_relative = 1e-6, epsilon = 1e-9);
    }
}

#[test]
fn group_norm_indivisible_grouping_is_config_error() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[2, 5], vec![0.0; 10]);
    assert!(matches!(g.group_norm(x, 3, 1e-5), Err(ow4d_core::Error::Config(_))));
}

// -------------------------------------------------------------- attention

#[test]
fn attention_single_key_returns_its_value() {
    let mut g = Graph::<f64>::new();
    let q = constant(&mut g, &[1, 3, 4], rand_vec(12, "q1"));
    let k = constant(&mut g, &[1, 1, 4], rand_vec(4, "k1"));
    let v = constant(&mut g, &[1, 1, 4], vec![0.3, -0.5, 0.9, 0.1]);
    let y = g.multi_head_attention(q, k, v, 2, None).unwrap();
    for iq in 0..3 {
        assert_eq!(&g.values(y)[iq * 4..(iq + 1) * 4], &[0.3, -0.5, 0.9, 0.1]);
    }
}

#[test]
fn attention_mask_forces_the_single_unmasked_key() {
    let mut g = Graph::<f64>::new();
    let q = constant(&mut g, &[1, 2, 4], rand_vec(8, "q2"));
    let k = constant(&mut g, &[1, 3, 4], rand_vec(12, "k2"));
    let vdata = rand_vec(12, "v2");
    let v = constant(&mut g, &[1, 3, 4], vdata.clone());
    let mut mask = AttentionMask::all_allowed(2, 3);
    mask.set(0, 0, false);
    mask.set(0, 2, false); // row 0 may only attend key 1
    let y = g.multi_head_attention(q, k, v, 2, Some(&mask)).unwrap();
    assert_eq!(&g.values(y)[0..4], &vdata[4..8]);
}

#[test]
fn attention_masked_weights_are_exactly_zero_and_rows_sum_to_one() {
    let mut g = Graph::<f64>::new();
    let q = constant(&mut g, &[2, 3, 8], rand_vec(48, "q3"));
    let k = constant(&mut g, &[2, 4, 8], rand_vec(64, "k3"));
    let v = constant(&mut g, &[2, 4, 8], rand_vec(64, "v3"));
    let mut mask = AttentionMask::all_allowed(3, 4);
    mask.set(1, 0, false);
    mask.set(1, 2, false);
    let y = g.multi_head_attention(q, k, v, 4, Some(&mask)).unwrap();
    let w = g.mha_weights(y).unwrap();
    let (b, h, tq, tk) = (2, 4, 3, 4);
    for bi in 0..b {
        for hi in 0..h {
            for iq in 0..tq {
                let row = &w[((bi * h + hi) * tq + iq) * tk..][..tk];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                if iq == 1 {
                    assert_eq!(row[0], 0.0);
                    assert_eq!(row[2], 0.0);
                }
            }
        }
    }
}

#[test]
fn attention_two_heads_match_per_head_loop_oracle() {
    let (b, tq, tk, c, heads) = (1usize, 3usize, 4usize, 8usize, 2usize);
    let qd = rand_vec(b * tq * c, "qo");
    let kd = rand_vec(b * tk * c, "ko");
    let vd = rand_vec(b * tk * c, "vo");
    // independent oracle: explicit per-head computation
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut expect = vec![0.0f64; tq * c];
    for h in 0..heads {
        let off = h * d;
        for iq in 0..tq {
            let mut scores = vec![0.0f64; tk];
            for ik in 0..tk {
                for j in 0..d {
                    scores[ik] += qd[iq * c + off + j] * kd[ik * c + off + j];
                }
                scores[ik] *= scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for ik in 0..tk {
                let w = exps[ik] / sum;
                for j in 0..d {
                    expect[iq * c + off + j] += w * vd[ik * c + off + j];
                }
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let q = constant(&mut g, &[b, tq, c], qd);
    let k = constant(&mut g, &[b, tk, c], kd);
    let v = constant(&mut g, &[b, tk, c], vd);
    let y = g.multi_head_attention(q, k, v, heads, None).unwrap();
    for (got, want) in g.values(y).iter().zip(&expect) {
        assert_relative_eq!(got, want, max_relative = 1e-5, epsilon = 1e-9);
    }
}

#[test]
fn attention_mask_row_without_keys_is_an_error() {
    let mut g = Graph::<f64>::new();
    let q = constant(&mut g, &[1, 2, 4], vec![0.0; 8]);
    let k = constant(&mut g, &[1, 2, 4], vec![0.0; 8]);
    let v = constant(&mut g, &[1, 2, 4], vec![0.0; 8]);
    let mut mask = AttentionMask::all_allowed(2, 2);
    mask.set(1, 0, false);
    mask.set(1, 1, false);
    let err = g.multi_head_attention(q, k, v, 2, Some(&mask)).unwrap_err();
    assert!(err.to_string().contains("no attendable key"));
}

// --------------------------------------------------------------- backward

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.parameter(&Tensor::new(vec![5], rand_vec(5, "bs")).unwrap());
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 5]);
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let data = rand_vec(6, "bsq");
    let mut g = Graph::<f64>::new();
    let x = g.parameter(&Tensor::new(vec![6], data.clone()).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(&data) {
        assert_relative_eq!(gv, &(2.0 * xv), epsilon = 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.parameter(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    assert!(g.backward(x).is_err());
}

#[test]
fn gradients_accumulate_on_shared_nodes() {
    let mut g = Graph::<f64>::new();
    let x = g.parameter(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let a = g.sum_all(x);
    let b = g.sum_all(x);
    let loss = g.add(a, b).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
}

// ---------------------------------------------------- finite differences

#[test]
fn finite_diff_linear_map_is_nearly_exact() {
    let w = rand_vec(4 * 3, "fd_w");
    let x0 = Tensor::new(vec![1, 4], rand_vec(4, "fd_x")).unwrap();
    let err = finite_diff_check(
        &x0,
        |g, x| {
            let wt = g.constant(&Tensor::new(vec![4, 3], w.clone()).unwrap());
            let y = g.matmul(x, wt)?;
            Ok(g.sum_all(y))
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-9, "linear map rel err {err}");
}

#[test]
fn finite_diff_softmax_cross_entropy() {
    let x0 = Tensor::new(vec![4, 5], rand_vec(20, "fd_ce")).unwrap();
    let targets: Arc<Vec<u32>> = Arc::new(vec![2, 0, 4, 1]);
    let err = finite_diff_check(
        &x0,
        |g, x| {
            let logp = g.log_softmax_lastdim(x)?;
            let picked = g.gather_lastdim(logp, Arc::clone(&targets))?;
            let m = g.mean_all(picked);
            Ok(g.scale(m, -1.0))
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "softmax-CE rel err {err}");
}

#[test]
fn every_primitive_backward_matches_finite_differences() {
    let report = ow4d_core::tensor::check::check_primitive_gradients(1e-3).unwrap();
    assert!(!report.is_empty());
    for (name, err) in &report {
        assert!(err < &1e-3, "{name}: rel err {err}");
    }
}

// ------------------------------------------------------------- structure

#[test]
fn cumsum_exclusive_forward_and_shapes() {
    let mut g = Graph::<f64>::new();
    let x = constant(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
    let y = g.cumsum_exclusive_lastdim(x).unwrap();
    assert_eq!(g.values(y), &[0.0, 1.0, 3.0, 0.0, 10.0, 30.0]);
}

#[test]
fn concat_slice_round_trip() -> Result<()> {
    let mut g = Graph::<f64>::new();
    let a = constant(&mut g, &[2, 3], rand_vec(6, "cs_a"));
    let b = constant(&mut g, &[1, 3], rand_vec(3, "cs_b"));
    let cat = g.concat_first(&[a, b])?;
    let back = g.slice_first(cat, 0, 2)?;
    assert_eq!(g.values(back), g.values(a));
    let cl = g.concat_last(&[a, a])?;
    let right = g.slice_last(cl, 3, 3)?;
    assert_eq!(g.values(right), g.values(a));
    Ok(())
}
