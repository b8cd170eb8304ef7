//! Forward passes of teacher, wrapped and merged blocks against a
//! loop-level reimplementation, plus the distillation losses.

use erank_core::initlab::ChannelSelection;
use erank_core::linalg::{gaussian_matrix, rng_from_seed};
use erank_core::widthnet::{
    kl_loss, lm_loss, merge, merged_forward, read_weights, relative_error, rep_align_loss,
    teacher_forward, wrapped_forward, write_weights, EmbeddingAdapters, GainInit, LayerStack,
    TeacherLayer, WrappedLayer,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn norm_row(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(g).map(|(v, w)| v / (ms + eps).sqrt() * w).collect()
}

fn vec_mat(x: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    (0..w.ncols()).map(|c| (0..x.len()).map(|r| x[r] * w[(r, c)]).sum()).collect()
}

/// One block, one token at a time.
fn block_by_hand(x: &DMatrix<f64>, t: &TeacherLayer) -> (DMatrix<f64>, DMatrix<f64>) {
    let (l, d) = x.shape();
    let rows: Vec<Vec<f64>> = (0..l).map(|i| x.row(i).iter().copied().collect()).collect();
    let ga: Vec<f64> = t.g_attn.iter().copied().collect();
    let gf: Vec<f64> = t.g_ffn.iter().copied().collect();
    let normed: Vec<Vec<f64>> = rows.iter().map(|r| norm_row(r, &ga, t.eps)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|r| vec_mat(r, &t.w_q)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|r| vec_mat(r, &t.w_k)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|r| vec_mat(r, &t.w_v)).collect();
    let hd = t.head_dim;
    let mut after = DMatrix::zeros(l, d);
    let mut out = DMatrix::zeros(l, d);
    for i in 0..l {
        let mut ctx = vec![0.0; t.num_heads * hd];
        for h in 0..t.num_heads {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
            for j in 0..=i {
                let w = (s[j] - m).exp() / z;
                for c in 0..hd {
                    ctx[h * hd + c] += w * v[j][h * hd + c];
                }
            }
        }
        let attn = vec_mat(&ctx, &t.w_o);
        let hrow: Vec<f64> = (0..d).map(|c| rows[i][c] + attn[c]).collect();
        let n2 = norm_row(&hrow, &gf, t.eps);
        let gate = vec_mat(&n2, &t.w_gate);
        let up = vec_mat(&n2, &t.w_up);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        let ffn = vec_mat(&act, &t.w_down);
        for c in 0..d {
            after[(i, c)] = hrow[c];
            out[(i, c)] = hrow[c] + ffn[c];
        }
    }
    (after, out)
}

fn teacher(seed: u64, d: usize, heads: usize, hd: usize, ff: usize) -> TeacherLayer {
    TeacherLayer::random(d, heads, hd, ff, &mut rng_from_seed(seed))
}

#[test]
fn forward_matches_loop_oracle() {
    let layers = [teacher(1, 8, 2, 4, 16), teacher(2, 8, 2, 4, 16)];
    let x = gaussian_matrix(5, 8, 1.0, &mut rng_from_seed(3));
    let outs = teacher_forward(&x, &layers).unwrap();
    let (a0, y0) = block_by_hand(&x, &layers[0]);
    let (a1, y1) = block_by_hand(&y0, &layers[1]);
    assert!(relative_error(&outs[0].after_attention, &a0) < 1e-12);
    assert!(relative_error(&outs[0].output, &y0) < 1e-12);
    assert!(relative_error(&outs[1].after_attention, &a1) < 1e-12);
    assert!(relative_error(&outs[1].output, &y1) < 1e-12);
}

#[test]
fn single_token_attention_returns_its_value() {
    // With one token the softmax weight is 1, so the branch is Norm(x) W_v W_o.
    let t = teacher(4, 6, 3, 2, 5);
    let x = gaussian_matrix(1, 6, 1.0, &mut rng_from_seed(5));
    let ms = x.norm_squared() / 6.0;
    let normed = DMatrix::from_fn(1, 6, |_, j| x[(0, j)] / (ms + t.eps).sqrt() * t.g_attn[j]);
    let expected = &x + &normed * &t.w_v * &t.w_o;
    let out = teacher_forward(&x, &[t]).unwrap();
    assert!(relative_error(&out[0].after_attention, &expected) < 1e-12);
}

#[test]
fn causal_prefix_is_unaffected_by_later_tokens() {
    let t = teacher(6, 8, 2, 4, 12);
    let x = gaussian_matrix(6, 8, 1.0, &mut rng_from_seed(7));
    let full = teacher_forward(&x, std::slice::from_ref(&t)).unwrap();
    let prefix = teacher_forward(&x.rows(0, 3).into_owned(), &[t]).unwrap();
    assert!(relative_error(&full[0].output.rows(0, 3).into_owned(), &prefix[0].output) < 1e-13);
}

/// Wrapped block written out with explicit projections around the loop oracle.
fn wrapped_by_hand(x: &DMatrix<f64>, w: &WrappedLayer) -> DMatrix<f64> {
    let t = &w.teacher;
    let norm = |m: &DMatrix<f64>, g: &DVector<f64>| {
        let gv: Vec<f64> = g.iter().copied().collect();
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            norm_row(&m.row(i).iter().copied().collect::<Vec<_>>(), &gv, t.eps)[j]
        })
    };
    let up = norm(x, &w.g_attn) * &w.o_attn;
    let attn = attn_branch(&up, t);
    let h = x + attn * &w.q_attn;
    let up = norm(&h, &w.g_ffn) * &w.o_ffn;
    let gate = (&up * &t.w_gate).map(|g| g / (1.0 + (-g).exp()));
    &h + gate.component_mul(&(&up * &t.w_up)) * &t.w_down * &w.q_ffn
}

/// Causal attention branch on an input that is used as is.
fn attn_branch(h: &DMatrix<f64>, t: &TeacherLayer) -> DMatrix<f64> {
    let l = h.nrows();
    let mut out = DMatrix::zeros(l, t.width());
    let hd = t.head_dim;
    let q = h * &t.w_q;
    let k = h * &t.w_k;
    let v = h * &t.w_v;
    for i in 0..l {
        let mut ctx = DMatrix::zeros(1, t.num_heads * hd);
        for head in 0..t.num_heads {
            let s: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd).map(|c| q[(i, head * hd + c)] * k[(j, head * hd + c)]).sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
            for j in 0..=i {
                for c in 0..hd {
                    ctx[(0, head * hd + c)] += (s[j] - m).exp() / z * v[(j, head * hd + c)];
                }
            }
        }
        out.set_row(i, &(ctx * &t.w_o).row(0));
    }
    out
}

#[test]
fn wrapped_forward_matches_staged_oracle() {
    let mut rng = rng_from_seed(11);
    let w = WrappedLayer::random(teacher(12, 10, 2, 3, 14), 6, &mut rng);
    let x = gaussian_matrix(5, 6, 1.0, &mut rng);
    let out = wrapped_forward(&x, std::slice::from_ref(&w)).unwrap();
    assert!(relative_error(&out[0].output, &wrapped_by_hand(&x, &w)) < 1e-12);
}

#[test]
fn identity_wrapping_reproduces_teacher() {
    let t = teacher(13, 8, 2, 4, 16);
    let sel = ChannelSelection::new((0..8).collect(), 8).unwrap();
    let w = WrappedLayer::from_selection(t.clone(), &sel, GainInit::Matched).unwrap();
    let m = merge(&w);
    assert_eq!(m.block, t);
    let x = gaussian_matrix(4, 8, 1.0, &mut rng_from_seed(1));
    assert_eq!(merged_forward(&x, &[m]).unwrap(), teacher_forward(&x, &[t]).unwrap());
}

#[test]
fn selection_merge_takes_row_and_column_subsets() {
    let t = teacher(14, 8, 2, 4, 16);
    let sel = ChannelSelection::new(vec![1, 4, 6], 8).unwrap();
    let m = merge(&WrappedLayer::from_selection(t.clone(), &sel, GainInit::Ones).unwrap()).block;
    for (r, &i) in sel.indices().iter().enumerate() {
        assert_eq!(m.w_q.row(r), t.w_q.row(i));
        assert_eq!(m.w_up.row(r), t.w_up.row(i));
        assert_eq!(m.w_o.column(r), t.w_o.column(i));
        assert_eq!(m.w_down.column(r), t.w_down.column(i));
    }
    assert_eq!(m.g_attn, DVector::from_element(3, 1.0));
}

#[test]
fn matched_gains_preserve_the_attention_residual() {
    let mut t = teacher(15, 12, 2, 3, 10);
    t.eps = 0.0;
    let sel = ChannelSelection::new(vec![0, 3, 5, 9], 12).unwrap();
    let w = WrappedLayer::from_selection(t.clone(), &sel, GainInit::Matched).unwrap();
    let small = gaussian_matrix(6, 4, 1.0, &mut rng_from_seed(2));
    let mut full = DMatrix::zeros(6, 12);
    for (j, &i) in sel.indices().iter().enumerate() {
        full.set_column(i, &small.column(j));
    }
    let t_out = teacher_forward(&full, &[t]).unwrap();
    let w_out = wrapped_forward(&small, &[w]).unwrap();
    let restricted = DMatrix::from_fn(6, 4, |r, j| t_out[0].after_attention[(r, sel.indices()[j])]);
    assert!(relative_error(&w_out[0].after_attention, &restricted) < 1e-12);
}

#[test]
fn adapters_select_and_scatter() {
    let sel = ChannelSelection::new(vec![2, 0], 5).unwrap();
    let ad = EmbeddingAdapters::from_selection(&sel);
    let x = DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let down = ad.embed(&x).unwrap();
    assert_eq!(down, DMatrix::from_row_slice(1, 2, &[1.0, 3.0]));
    assert_eq!(ad.unembed(&down).unwrap(), DMatrix::from_row_slice(1, 5, &[1.0, 0.0, 3.0, 0.0, 0.0]));
    assert!(ad.embed(&down).is_err());
}

#[test]
fn rep_align_is_mean_row_error() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 3.0]);
    assert_eq!(rep_align_loss(&a, &b).unwrap(), 2.5);
    assert!(rep_align_loss(&a, &DMatrix::zeros(1, 2)).is_err());
}

#[test]
fn lm_loss_edges() {
    let mut z = DMatrix::zeros(3, 7);
    let targets = [1, 4, 6];
    assert!((lm_loss(&z, &targets).unwrap() - 7f64.ln()).abs() < 1e-12);
    for (r, &t) in targets.iter().enumerate() {
        z[(r, t)] = 50.0;
    }
    assert!(lm_loss(&z, &targets).unwrap() < 1e-10);
    assert!(lm_loss(&z, &[0, 7, 1]).is_err());
}

#[test]
fn kl_two_class_closed_form() {
    let t = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let s = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
    let p = 1.0 / (1.0 + 1f64.exp());
    let q = 1.0 / (1.0 + (-1f64).exp());
    let expected = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    assert!((kl_loss(&t, &s, 1.0).unwrap() - expected).abs() < 1e-12);
    assert_eq!(kl_loss(&t, &t, 2.0).unwrap(), 0.0);
    assert!(kl_loss(&t, &s, 0.0).is_err());
}

#[test]
fn kl_shrinks_with_temperature() {
    let mut rng = rng_from_seed(20);
    let t = gaussian_matrix(4, 9, 2.0, &mut rng);
    let s = gaussian_matrix(4, 9, 2.0, &mut rng);
    let vals: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|&tau| kl_loss(&t, &s, tau).unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
}

#[test]
fn weights_round_trip() {
    let mut rng = rng_from_seed(30);
    let stacks = [
        LayerStack::Teacher(vec![teacher(31, 6, 2, 2, 8), teacher(32, 6, 2, 2, 8)]),
        LayerStack::Wrapped(vec![WrappedLayer::random(teacher(33, 6, 2, 2, 8), 4, &mut rng)]),
    ];
    for stack in &stacks {
        let mut bytes = Vec::new();
        write_weights(stack, &mut bytes).unwrap();
        let back = read_weights(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_weights(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(std::mem::discriminant(&back) == std::mem::discriminant(stack));
        for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_weights(&bytes[..cut]).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_matches_wrapped(seed in any::<u64>(), d in 4usize..12, heads in 1usize..3, hd in 1usize..4, ff in 2usize..12, l in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let dp = 1 + (seed as usize) % (d - 1);
        let layers: Vec<WrappedLayer> = (0..2)
            .map(|_| WrappedLayer::random(TeacherLayer::random(d, heads, hd, ff, &mut rng), dp, &mut rng))
            .collect();
        let x = gaussian_matrix(l, dp, 1.0, &mut rng);
        let merged: Vec<_> = layers.iter().map(merge).collect();
        let a = wrapped_forward(&x, &layers).unwrap();
        let b = merged_forward(&x, &merged).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!(relative_error(&u.output, &v.output) < 1e-5);
            prop_assert!(relative_error(&u.after_attention, &v.after_attention) < 1e-5);
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), tau in 0.1f64..5.0) {
        let mut rng = rng_from_seed(seed);
        let t = gaussian_matrix(3, 6, 3.0, &mut rng);
        let s = gaussian_matrix(3, 6, 3.0, &mut rng);
        prop_assert!(kl_loss(&t, &s, tau).unwrap() >= 0.0);
    }
}
