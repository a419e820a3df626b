//! Reverse-mode gradients for the transformer and any attached stamps.

use super::forward::Activations;
use super::{Model, Params};
use crate::stamp::{FairnessStamp, StampGrad};
use crate::tensor::{
    col_sum_acc, dot, layer_norm_backward, matmul, matmul_at_acc, matmul_bt, Scalar,
};

fn relu_mask<F: Scalar>(grad: &mut [F], pre: &[F]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= F::zero() {
            *g = F::zero();
        }
    }
}

impl<F: Scalar> Model<F> {
    /// Backpropagates `dlogits` (`T × vocab`) through a patch-free run.
    ///
    /// Parameter gradients are accumulated into `param_grads` when given, which
    /// requires the run to have started from the embeddings. Stamp gradients
    /// are accumulated into `stamp_grads`, indexed like `stamps`. Without
    /// parameter gradients the pass stops at the lowest stamped block.
    pub(crate) fn backward(
        &self,
        tokens: &[u32],
        acts: &Activations<F>,
        stamps: &[FairnessStamp<F>],
        dlogits: &[F],
        mut param_grads: Option<&mut Params<F>>,
        mut stamp_grads: Option<&mut [StampGrad<F>]>,
    ) {
        let cfg = &self.config;
        let t_len = acts.len;
        let d = cfg.model_dim;
        let f = cfg.ffn_hidden_dim;
        let v = cfg.vocab_size;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = F::one() / F::lit(hd as f64).sqrt();
        debug_assert_eq!(dlogits.len(), t_len * v);

        let stop_block = if param_grads.is_some() {
            debug_assert_eq!(acts.first_block, 0);
            0
        } else {
            match stamps.iter().map(|s| s.layer - 1).min() {
                Some(b) => b.max(acts.first_block),
                None => return,
            }
        };

        let p = &self.params;
        let dhf = matmul_bt(dlogits, &p.w_out.data, t_len, v, d);
        let mut dx = match param_grads.as_deref_mut() {
            Some(g) => {
                matmul_at_acc(&acts.hf, dlogits, t_len, d, v, &mut g.w_out.data);
                col_sum_acc(dlogits, v, &mut g.b_out.data);
                layer_norm_backward(
                    &dhf,
                    d,
                    &p.lnf_gain.data,
                    &acts.lnf,
                    Some((&mut g.lnf_gain.data, &mut g.lnf_bias.data)),
                )
            }
            None => layer_norm_backward(&dhf, d, &p.lnf_gain.data, &acts.lnf, None),
        };

        for (idx, cache) in acts.blocks.iter().enumerate().rev() {
            let bi = acts.first_block + idx;
            if bi < stop_block {
                break;
            }
            let bp = &p.blocks[bi];
            let dm = &dx;
            let mut dh = vec![F::zero(); t_len * d];

            if let Some(sc) = &cache.stamp {
                let stamp = &stamps[sc.index];
                let dc = stamp.d_c();
                let sr: Vec<F> = sc.z.iter().map(|&z| z.max(F::zero())).collect();
                let mut dsz = matmul_bt(dm, &stamp.values.data, t_len, d, dc);
                relu_mask(&mut dsz, &sc.z);
                if let Some(grads) = stamp_grads.as_deref_mut() {
                    let g = &mut grads[sc.index];
                    matmul_at_acc(&sr, dm, t_len, dc, d, &mut g.values.data);
                    matmul_at_acc(&dsz, &cache.h, t_len, dc, d, &mut g.keys.data);
                }
                if bi == stop_block && param_grads.is_none() {
                    break;
                }
                dh = matmul(&dsz, &stamp.keys.data, t_len, dc, d);
            }

            let r: Vec<F> = cache.z.iter().map(|&z| z.max(F::zero())).collect();
            let mut dz = matmul_bt(dm, &bp.w_2.data, t_len, d, f);
            relu_mask(&mut dz, &cache.z);
            let dh_ffn = matmul_bt(&dz, &bp.w_1.data, t_len, f, d);
            for (a, b) in dh.iter_mut().zip(dh_ffn) {
                *a += b;
            }

            let mut dy = dx.clone();
            let dy_ln = match param_grads.as_deref_mut() {
                Some(g) => {
                    let gb = &mut g.blocks[bi];
                    col_sum_acc(dm, d, &mut gb.b_2.data);
                    matmul_at_acc(&r, dm, t_len, f, d, &mut gb.w_2.data);
                    col_sum_acc(&dz, f, &mut gb.b_1.data);
                    matmul_at_acc(&cache.h, &dz, t_len, d, f, &mut gb.w_1.data);
                    layer_norm_backward(
                        &dh,
                        d,
                        &bp.ln2_gain.data,
                        &cache.ln2,
                        Some((&mut gb.ln2_gain.data, &mut gb.ln2_bias.data)),
                    )
                }
                None => layer_norm_backward(&dh, d, &bp.ln2_gain.data, &cache.ln2, None),
            };
            for (a, b) in dy.iter_mut().zip(dy_ln) {
                *a += b;
            }

            let dctx = matmul_bt(&dy, &bp.w_o.data, t_len, d, d);
            let mut dq = vec![F::zero(); t_len * d];
            let mut dk = vec![F::zero(); t_len * d];
            let mut dv = vec![F::zero(); t_len * d];
            let mut da = vec![F::zero(); t_len];
            for head in 0..heads {
                let off = head * hd;
                for i in 0..t_len {
                    let arow = &cache.attn[(head * t_len + i) * t_len..(head * t_len + i + 1) * t_len];
                    let dci = &dctx[i * d + off..i * d + off + hd];
                    let mut weighted = F::zero();
                    for j in 0..=i {
                        da[j] = dot(dci, &cache.v[j * d + off..j * d + off + hd]);
                        weighted += arow[j] * da[j];
                        let a = arow[j];
                        for (g, &c) in dv[j * d + off..j * d + off + hd].iter_mut().zip(dci) {
                            *g += a * c;
                        }
                    }
                    for j in 0..=i {
                        let ds = arow[j] * (da[j] - weighted) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        for c in 0..hd {
                            dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                            dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                        }
                    }
                }
            }

            let mut du = matmul_bt(&dq, &bp.w_q.data, t_len, d, d);
            for (w, g) in [(&bp.w_k, &dk), (&bp.w_v, &dv)] {
                for (a, b) in du.iter_mut().zip(matmul_bt(g, &w.data, t_len, d, d)) {
                    *a += b;
                }
            }
            let dx_ln = match param_grads.as_deref_mut() {
                Some(g) => {
                    let gb = &mut g.blocks[bi];
                    matmul_at_acc(&cache.ctx, &dy, t_len, d, d, &mut gb.w_o.data);
                    matmul_at_acc(&cache.u, &dq, t_len, d, d, &mut gb.w_q.data);
                    matmul_at_acc(&cache.u, &dk, t_len, d, d, &mut gb.w_k.data);
                    matmul_at_acc(&cache.u, &dv, t_len, d, d, &mut gb.w_v.data);
                    layer_norm_backward(
                        &du,
                        d,
                        &bp.ln1_gain.data,
                        &cache.ln1,
                        Some((&mut gb.ln1_gain.data, &mut gb.ln1_bias.data)),
                    )
                }
                None => layer_norm_backward(&du, d, &bp.ln1_gain.data, &cache.ln1, None),
            };
            for (a, b) in dy.iter_mut().zip(dx_ln) {
                *a += b;
            }
            dx = dy;
        }

        if let Some(g) = param_grads {
            for (i, &tok) in tokens.iter().enumerate() {
                let row = &dx[i * d..(i + 1) * d];
                for (a, &b) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
                    *a += b;
                }
                for (a, &b) in g.pos_emb.row_mut(i).iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
    }
}
