//! Multi-head scaled dot-product self-attention with a residual connection.
//!
//! The whole block (QKV projections, per-head attention, output projection,
//! residual add) is one tape op. Backward recomputes the forward
//! intermediates from the saved inputs rather than caching them.
//!
//! Q/K/V projections are bias-free: a key bias is a strict no-op under the
//! softmax and a value bias is absorbed by the output bias, so neither is
//! identifiable. The output projection keeps its bias.

use super::matmul::{matmul_nn, matmul_nn_acc, transpose};
use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AttnGeometry {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttnWeights<'a, T> {
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wv: &'a [T],
    pub wo: &'a [T],
    pub bo: &'a [T],
}

pub struct AttnGrads<T> {
    pub d_tokens: Vec<T>,
    pub d_wq: Vec<T>,
    pub d_wk: Vec<T>,
    pub d_wv: Vec<T>,
    pub d_wo: Vec<T>,
    pub d_bo: Vec<T>,
}

/// `x · wᵀ` for `x: [rows, d]`, `w: [d_out, d]`.
fn project<T: Scalar>(x: &[T], w: &[T], rows: usize, d: usize, d_out: usize) -> Vec<T> {
    let wt = transpose(w, d_out, d);
    matmul_nn(x, &wt, rows, d, d_out)
}

fn head_slice<T: Scalar>(mat: &[T], len: usize, dim: usize, head: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * dh];
    for l in 0..len {
        let src = &mat[l * dim + head * dh..l * dim + (head + 1) * dh];
        out[l * dh..(l + 1) * dh].copy_from_slice(src);
    }
    out
}

fn head_scatter<T: Scalar>(dst: &mut [T], part: &[T], len: usize, dim: usize, head: usize, dh: usize) {
    for l in 0..len {
        dst[l * dim + head * dh..l * dim + (head + 1) * dh]
            .copy_from_slice(&part[l * dh..(l + 1) * dh]);
    }
}

fn softmax_rows<T: Scalar>(scores: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

struct SampleState<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax weights per head, each `[len, len]`.
    attn: Vec<Vec<T>>,
    /// Concatenated head outputs `[len, dim]`.
    mixed: Vec<T>,
}

fn run_sample<T: Scalar>(x: &[T], w: &AttnWeights<'_, T>, g: &AttnGeometry) -> SampleState<T> {
    let (l, d) = (g.len, g.dim);
    let dh = d / g.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = project(x, w.wq, l, d, d);
    let k = project(x, w.wk, l, d, d);
    let v = project(x, w.wv, l, d, d);
    let mut attn = Vec::with_capacity(g.heads);
    let mut mixed = vec![T::zero(); l * d];
    for m in 0..g.heads {
        let qm = head_slice(&q, l, d, m, dh);
        let km = head_slice(&k, l, d, m, dh);
        let vm = head_slice(&v, l, d, m, dh);
        let km_t = transpose(&km, l, dh);
        let mut scores = matmul_nn(&qm, &km_t, l, dh, l);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        softmax_rows(&mut scores, l, l);
        let om = matmul_nn(&scores, &vm, l, l, dh);
        head_scatter(&mut mixed, &om, l, d, m, dh);
        attn.push(scores);
    }
    SampleState { q, k, v, attn, mixed }
}

/// Forward: `tokens [N, L, D] -> [N, L, D]`, output `tokens + Wo(attn) + bo`.
pub fn attention_forward<T: Scalar>(
    tokens: &[T],
    w: &AttnWeights<'_, T>,
    g: &AttnGeometry,
) -> Vec<T> {
    let (l, d) = (g.len, g.dim);
    let stride = l * d;
    let mut out = vec![T::zero(); tokens.len()];
    for n in 0..g.batch {
        let x = &tokens[n * stride..(n + 1) * stride];
        let state = run_sample(x, w, g);
        let projected = project(&state.mixed, w.wo, l, d, d);
        for (r, (o_row, p_row)) in out[n * stride..(n + 1) * stride]
            .chunks_mut(d)
            .zip(projected.chunks(d))
            .enumerate()
        {
            for ((o, &pv), (&xv, &bv)) in o_row
                .iter_mut()
                .zip(p_row.iter())
                .zip(x[r * d..(r + 1) * d].iter().zip(w.bo.iter()))
            {
                *o = xv + pv + bv;
            }
        }
    }
    out
}

pub fn attention_backward<T: Scalar>(
    tokens: &[T],
    w: &AttnWeights<'_, T>,
    dout: &[T],
    g: &AttnGeometry,
) -> AttnGrads<T> {
    let (l, d) = (g.len, g.dim);
    let dh = d / g.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let stride = l * d;

    let mut gr = AttnGrads {
        d_tokens: vec![T::zero(); tokens.len()],
        d_wq: vec![T::zero(); d * d],
        d_wk: vec![T::zero(); d * d],
        d_wv: vec![T::zero(); d * d],
        d_wo: vec![T::zero(); d * d],
        d_bo: vec![T::zero(); d],
    };

    for n in 0..g.batch {
        let x = &tokens[n * stride..(n + 1) * stride];
        let dy = &dout[n * stride..(n + 1) * stride];
        let state = run_sample(x, w, g);

        // Residual branch.
        let dx = &mut gr.d_tokens[n * stride..(n + 1) * stride];
        for (o, &gv) in dx.iter_mut().zip(dy.iter()) {
            *o = *o + gv;
        }

        // Output projection: y = mixed · woᵀ + bo.
        let d_mixed = matmul_nn(dy, w.wo, l, d, d);
        let dy_t = transpose(dy, l, d);
        matmul_nn_acc(&dy_t, &state.mixed, &mut gr.d_wo, d, l, d);
        for r in 0..l {
            for (b, &gv) in gr.d_bo.iter_mut().zip(dy[r * d..(r + 1) * d].iter()) {
                *b = *b + gv;
            }
        }

        let mut dq = vec![T::zero(); l * d];
        let mut dk = vec![T::zero(); l * d];
        let mut dv = vec![T::zero(); l * d];
        for m in 0..g.heads {
            let qm = head_slice(&state.q, l, d, m, dh);
            let km = head_slice(&state.k, l, d, m, dh);
            let vm = head_slice(&state.v, l, d, m, dh);
            let attn = &state.attn[m];
            let d_om = head_slice(&d_mixed, l, d, m, dh);

            // d_attn = d_om · vmᵀ ; d_vm = attnᵀ · d_om
            let vm_t = transpose(&vm, l, dh);
            let d_attn = matmul_nn(&d_om, &vm_t, l, dh, l);
            let attn_t = transpose(attn, l, l);
            let d_vm = matmul_nn(&attn_t, &d_om, l, l, dh);

            // Softmax rows, then undo the 1/sqrt(dh) scaling.
            let mut d_scores = vec![T::zero(); l * l];
            for r in 0..l {
                let a_row = &attn[r * l..(r + 1) * l];
                let g_row = &d_attn[r * l..(r + 1) * l];
                let mut dot = T::zero();
                for (&av, &gv) in a_row.iter().zip(g_row.iter()) {
                    dot = dot + av * gv;
                }
                for (ds, (&av, &gv)) in d_scores[r * l..(r + 1) * l]
                    .iter_mut()
                    .zip(a_row.iter().zip(g_row.iter()))
                {
                    *ds = av * (gv - dot) * scale;
                }
            }

            let d_qm = matmul_nn(&d_scores, &km, l, l, dh);
            let d_scores_t = transpose(&d_scores, l, l);
            let d_km = matmul_nn(&d_scores_t, &qm, l, l, dh);
            head_scatter(&mut dq, &d_qm, l, d, m, dh);
            head_scatter(&mut dk, &d_km, l, d, m, dh);
            head_scatter(&mut dv, &d_vm, l, d, m, dh);
        }

        // Projections q = x · wqᵀ (likewise k and v).
        for (dp, (dw, wmat)) in [
            (&dq, (&mut gr.d_wq, w.wq)),
            (&dk, (&mut gr.d_wk, w.wk)),
            (&dv, (&mut gr.d_wv, w.wv)),
        ] {
            let dp_t = transpose(dp, l, d);
            matmul_nn_acc(&dp_t, x, dw, d, l, d);
            matmul_nn_acc(dp, wmat, dx, l, d, d);
        }
    }
    gr
}
