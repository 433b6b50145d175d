//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when gradients are
//! enabled and an input is tracked, records a closure that routes the
//! output gradient back to its inputs. Shape violations are contract
//! errors and panic with both shapes in the message.
//!
//! Broadcasting is deliberately limited to bias addition over the last
//! axis; everything else requires exact shapes.

use rand::Rng;

use super::tensor::{is_grad_enabled, Tensor};

// ---------------------------------------------------------------------------
// Raw kernels (accumulate into `out`)
// ---------------------------------------------------------------------------

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Four-accumulator dot product; fixed summation order, deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn should_record(inputs: &[&Tensor]) -> bool {
    is_grad_enabled() && inputs.iter().any(|t| t.tracked())
}

fn tracked_parents(inputs: &[&Tensor]) -> Vec<Tensor> {
    inputs
        .iter()
        .filter(|t| t.tracked())
        .map(|t| (*t).clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Standard 2-D matrix product a[m×k] · b[k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ashape, bshape) = (a.shape(), b.shape());
    assert!(
        ashape.len() == 2 && bshape.len() == 2 && ashape[1] == bshape[0],
        "matmul: incompatible shapes {ashape:?} x {bshape:?}"
    );
    let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
    let mut values = vec![0.0; m * n];
    a.with_values(|av| b.with_values(|bv| matmul_acc(av, bv, m, k, n, &mut values)));

    if !should_record(&[a, b]) {
        return Tensor::new(&[m, n], values);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::interior(
        vec![m, n],
        values,
        tracked_parents(&[a, b]),
        Box::new(move |grad, store| {
            if pa.tracked() {
                let bd = pb.inner.borrow();
                if let Some(slot) = store.slot_mut(&pa, m * k) {
                    matmul_nt_acc(grad, &bd.values, m, n, k, slot);
                }
            }
            if pb.tracked() {
                let ad = pa.inner.borrow();
                if let Some(slot) = store.slot_mut(&pb, k * n) {
                    matmul_tn_acc(&ad.values, grad, m, k, n, slot);
                }
            }
        }),
    )
}

/// a[m×k] · b[n×k]ᵀ, the attention-score form.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (ashape, bshape) = (a.shape(), b.shape());
    assert!(
        ashape.len() == 2 && bshape.len() == 2 && ashape[1] == bshape[1],
        "matmul_nt: incompatible shapes {ashape:?} x {bshape:?}ᵀ"
    );
    let (m, k, n) = (ashape[0], ashape[1], bshape[0]);
    let mut values = vec![0.0; m * n];
    a.with_values(|av| b.with_values(|bv| matmul_nt_acc(av, bv, m, k, n, &mut values)));

    if !should_record(&[a, b]) {
        return Tensor::new(&[m, n], values);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::interior(
        vec![m, n],
        values,
        tracked_parents(&[a, b]),
        Box::new(move |grad, store| {
            if pa.tracked() {
                let bd = pb.inner.borrow();
                if let Some(slot) = store.slot_mut(&pa, m * k) {
                    matmul_acc(grad, &bd.values, m, n, k, slot);
                }
            }
            if pb.tracked() {
                let ad = pa.inner.borrow();
                if let Some(slot) = store.slot_mut(&pb, n * k) {
                    matmul_tn_acc(grad, &ad.values, m, n, k, slot);
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

/// Same values, new shape. `numel` must be preserved.
pub fn reshaped(x: &Tensor, new_shape: &[usize]) -> Tensor {
    let numel: usize = new_shape.iter().product();
    assert_eq!(
        numel,
        x.numel(),
        "reshape: {:?} -> {:?} changes element count",
        x.shape(),
        new_shape
    );
    let values = x.values();
    if !should_record(&[x]) {
        return Tensor::new(new_shape, values);
    }
    let px = x.clone();
    Tensor::interior(
        new_shape.to_vec(),
        values,
        vec![x.clone()],
        Box::new(move |grad, store| store.accumulate(&px, grad)),
    )
}

/// Concatenation along the last axis; all leading extents must agree.
pub fn concat_last(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_last: no parts");
    let lead = {
        let s = parts[0].shape();
        s[..s.len() - 1].to_vec()
    };
    let mut lasts = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        assert_eq!(
            &s[..s.len() - 1],
            lead.as_slice(),
            "concat_last: leading extents differ: {:?} vs {:?}",
            parts[0].shape(),
            s
        );
        lasts.push(s[s.len() - 1]);
    }
    let rows: usize = lead.iter().product();
    let total: usize = lasts.iter().sum();
    let mut out_shape = lead;
    out_shape.push(total);

    let mut values = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&lasts) {
        p.with_values(|pv| {
            for r in 0..rows {
                values[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
        });
        offset += w;
    }

    let refs: Vec<&Tensor> = parts.iter().collect();
    if !should_record(&refs) {
        return Tensor::new(&out_shape, values);
    }
    let handles: Vec<Tensor> = parts.to_vec();
    let widths = lasts;
    Tensor::interior(
        out_shape,
        values,
        tracked_parents(&refs),
        Box::new(move |grad, store| {
            let mut offset = 0;
            for (p, &w) in handles.iter().zip(&widths) {
                if let Some(slot) = store.slot_mut(p, rows * w) {
                    for r in 0..rows {
                        let g = &grad[r * total + offset..r * total + offset + w];
                        for (s, gv) in slot[r * w..(r + 1) * w].iter_mut().zip(g) {
                            *s += gv;
                        }
                    }
                }
                offset += w;
            }
        }),
    )
}

/// Concatenation along the first axis; trailing extents must agree.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let trail = {
        let s = parts[0].shape();
        s[1..].to_vec()
    };
    let mut firsts = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        assert_eq!(
            &s[1..],
            trail.as_slice(),
            "concat_rows: trailing extents differ: {:?} vs {:?}",
            parts[0].shape(),
            s
        );
        firsts.push(s[0]);
    }
    let total: usize = firsts.iter().sum();
    let mut out_shape = vec![total];
    out_shape.extend_from_slice(&trail);

    let mut values = Vec::with_capacity(out_shape.iter().product());
    for p in parts {
        p.with_values(|pv| values.extend_from_slice(pv));
    }

    let refs: Vec<&Tensor> = parts.iter().collect();
    if !should_record(&refs) {
        return Tensor::new(&out_shape, values);
    }
    let handles: Vec<Tensor> = parts.to_vec();
    Tensor::interior(
        out_shape,
        values,
        tracked_parents(&refs),
        Box::new(move |grad, store| {
            let mut offset = 0;
            for p in &handles {
                let chunk = p.numel();
                if let Some(slot) = store.slot_mut(p, chunk) {
                    for (s, gv) in slot.iter_mut().zip(&grad[offset..offset + chunk]) {
                        *s += gv;
                    }
                }
                offset += chunk;
            }
        }),
    )
}

/// Contiguous slice along the first axis.
pub fn slice_rows(x: &Tensor, start: usize, count: usize) -> Tensor {
    let shape = x.shape();
    assert!(
        !shape.is_empty() && start + count <= shape[0],
        "slice_rows: [{start}, {}) out of range for shape {shape:?}",
        start + count
    );
    let chunk = x.numel() / shape[0];
    let values = x.with_values(|v| v[start * chunk..(start + count) * chunk].to_vec());
    let mut out_shape = shape;
    out_shape[0] = count;

    if !should_record(&[x]) {
        return Tensor::new(&out_shape, values);
    }
    let px = x.clone();
    let numel = x.numel();
    Tensor::interior(
        out_shape,
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, numel) {
                for (s, gv) in slot[start * chunk..(start + count) * chunk]
                    .iter_mut()
                    .zip(grad)
                {
                    *s += gv;
                }
            }
        }),
    )
}

/// Slice along the last axis (used to split attention heads).
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let n = *shape.last().expect("slice_last: scalar input");
    assert!(
        start + len <= n,
        "slice_last: [{start}, {}) out of range for shape {shape:?}",
        start + len
    );
    let rows = x.numel() / n;
    let mut values = vec![0.0; rows * len];
    x.with_values(|v| {
        for r in 0..rows {
            values[r * len..(r + 1) * len].copy_from_slice(&v[r * n + start..r * n + start + len]);
        }
    });
    let mut out_shape = shape;
    let last = out_shape.len() - 1;
    out_shape[last] = len;

    if !should_record(&[x]) {
        return Tensor::new(&out_shape, values);
    }
    let px = x.clone();
    let numel = x.numel();
    Tensor::interior(
        out_shape,
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, numel) {
                for r in 0..rows {
                    for (s, gv) in slot[r * n + start..r * n + start + len]
                        .iter_mut()
                        .zip(&grad[r * len..(r + 1) * len])
                    {
                        *s += gv;
                    }
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "add: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let values = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| x + y).collect()));
    if !should_record(&[a, b]) {
        return Tensor::new(&a.shape(), values);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::interior(
        a.shape(),
        values,
        tracked_parents(&[a, b]),
        Box::new(move |grad, store| {
            store.accumulate(&pa, grad);
            store.accumulate(&pb, grad);
        }),
    )
}

/// Adds a 1-D bias over the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let shape = x.shape();
    let n = *shape.last().expect("add_bias: scalar input");
    assert_eq!(
        bias.shape(),
        vec![n],
        "add_bias: bias {:?} does not match last axis of {:?}",
        bias.shape(),
        shape
    );
    let rows = x.numel() / n;
    let values = x.with_values(|xv| {
        bias.with_values(|bv| {
            let mut out = xv.to_vec();
            for r in 0..rows {
                for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                    *o += b;
                }
            }
            out
        })
    });
    if !should_record(&[x, bias]) {
        return Tensor::new(&shape, values);
    }
    let (px, pb) = (x.clone(), bias.clone());
    Tensor::interior(
        shape,
        values,
        tracked_parents(&[x, bias]),
        Box::new(move |grad, store| {
            store.accumulate(&px, grad);
            if let Some(slot) = store.slot_mut(&pb, n) {
                for r in 0..rows {
                    for (s, gv) in slot.iter_mut().zip(&grad[r * n..(r + 1) * n]) {
                        *s += gv;
                    }
                }
            }
        }),
    )
}

pub fn mul_scalar(x: &Tensor, c: f64) -> Tensor {
    let values: Vec<f64> = x.with_values(|v| v.iter().map(|e| e * c).collect());
    if !should_record(&[x]) {
        return Tensor::new(&x.shape(), values);
    }
    let px = x.clone();
    Tensor::interior(
        x.shape(),
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, grad.len()) {
                for (s, gv) in slot.iter_mut().zip(grad) {
                    *s += c * gv;
                }
            }
        }),
    )
}

/// Rectified linear unit; the subgradient at 0 is taken as 0.
pub fn relu(x: &Tensor) -> Tensor {
    let values: Vec<f64> = x.with_values(|v| v.iter().map(|e| e.max(0.0)).collect());
    if !should_record(&[x]) {
        return Tensor::new(&x.shape(), values);
    }
    let px = x.clone();
    Tensor::interior(
        x.shape(),
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            let xd = px.inner.borrow();
            let mask: Vec<f64> = xd
                .values
                .iter()
                .zip(grad)
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect();
            drop(xd);
            store.accumulate(&px, &mask);
        }),
    )
}

/// Inverted dropout: keeps each element with probability `1 - p` and
/// rescales by `1/(1-p)`. `p = 0` is the identity.
pub fn dropout<R: Rng>(x: &Tensor, p: f64, rng: &mut R) -> Tensor {
    assert!((0.0..1.0).contains(&p), "dropout: p must be in [0, 1), got {p}");
    if p == 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let values: Vec<f64> =
        x.with_values(|v| v.iter().zip(&mask).map(|(e, m)| e * m).collect());
    if !should_record(&[x]) {
        return Tensor::new(&x.shape(), values);
    }
    let px = x.clone();
    Tensor::interior(
        x.shape(),
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, grad.len()) {
                for ((s, gv), m) in slot.iter_mut().zip(grad).zip(&mask) {
                    *s += gv * m;
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Normalization and attention weights
// ---------------------------------------------------------------------------

/// Row softmax over the last axis, stabilized by max subtraction.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let n = *shape.last().expect("softmax_last: scalar input");
    let rows = x.numel() / n;
    let mut values = vec![0.0; rows * n];
    x.with_values(|v| {
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let out = &mut values[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &e) in out.iter_mut().zip(row) {
                *o = (e - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
    });
    if !should_record(&[x]) {
        return Tensor::new(&shape, values);
    }
    let px = x.clone();
    let saved = values.clone();
    Tensor::interior(
        shape,
        values,
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, saved.len()) {
                for r in 0..rows {
                    let s = &saved[r * n..(r + 1) * n];
                    let g = &grad[r * n..(r + 1) * n];
                    let dotgs: f64 = g.iter().zip(s).map(|(gv, sv)| gv * sv).sum();
                    for ((o, &sv), &gv) in slot[r * n..(r + 1) * n].iter_mut().zip(s).zip(g) {
                        *o += sv * (gv - dotgs);
                    }
                }
            }
        }),
    )
}

/// Per-row normalization over the last axis followed by an affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "layer_norm: eps must be positive, got {eps}");
    let shape = x.shape();
    let n = *shape.last().expect("layer_norm: scalar input");
    assert_eq!(
        gamma.shape(),
        vec![n],
        "layer_norm: gamma {:?} does not match last axis of {:?}",
        gamma.shape(),
        shape
    );
    assert_eq!(
        beta.shape(),
        vec![n],
        "layer_norm: beta {:?} does not match last axis of {:?}",
        beta.shape(),
        shape
    );
    let rows = x.numel() / n;
    let mut xhat = vec![0.0; rows * n];
    let mut inv_std = vec![0.0; rows];
    let mut values = vec![0.0; rows * n];
    x.with_values(|xv| {
        gamma.with_values(|gv| {
            beta.with_values(|bv| {
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[r] = istd;
                    for j in 0..n {
                        let h = (row[j] - mean) * istd;
                        xhat[r * n + j] = h;
                        values[r * n + j] = h * gv[j] + bv[j];
                    }
                }
            })
        })
    });

    if !should_record(&[x, gamma, beta]) {
        return Tensor::new(&shape, values);
    }
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::interior(
        shape,
        values,
        tracked_parents(&[x, gamma, beta]),
        Box::new(move |grad, store| {
            if pg.tracked() {
                if let Some(slot) = store.slot_mut(&pg, n) {
                    for r in 0..rows {
                        for j in 0..n {
                            slot[j] += grad[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
            }
            if pb.tracked() {
                if let Some(slot) = store.slot_mut(&pb, n) {
                    for r in 0..rows {
                        for (s, gv) in slot.iter_mut().zip(&grad[r * n..(r + 1) * n]) {
                            *s += gv;
                        }
                    }
                }
            }
            if px.tracked() {
                let gamma_vals = pg.inner.borrow();
                if let Some(slot) = store.slot_mut(&px, rows * n) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let h = &xhat[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = g[j] * gamma_vals.values[j];
                            dxhat[j] = d;
                            sum_d += d;
                            sum_dh += d * h[j];
                        }
                        let istd = inv_std[r];
                        for j in 0..n {
                            slot[r * n + j] +=
                                istd / nf * (nf * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Lookups, losses, reductions
// ---------------------------------------------------------------------------

/// Gathers rows of `table` by id; the gradient scatter-adds back, so
/// repeated ids accumulate.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Tensor {
    let shape = table.shape();
    assert_eq!(shape.len(), 2, "embedding_lookup: table must be 2-D, got {shape:?}");
    let (v, e) = (shape[0], shape[1]);
    for &id in ids {
        assert!(id < v, "embedding_lookup: id {id} out of range for table with {v} rows");
    }
    let mut values = vec![0.0; ids.len() * e];
    table.with_values(|tv| {
        for (r, &id) in ids.iter().enumerate() {
            values[r * e..(r + 1) * e].copy_from_slice(&tv[id * e..(id + 1) * e]);
        }
    });
    if !should_record(&[table]) {
        return Tensor::new(&[ids.len(), e], values);
    }
    let pt = table.clone();
    let ids: Vec<usize> = ids.to_vec();
    Tensor::interior(
        vec![ids.len(), e],
        values,
        vec![table.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&pt, v * e) {
                for (r, &id) in ids.iter().enumerate() {
                    for (s, gv) in slot[id * e..(id + 1) * e].iter_mut().zip(&grad[r * e..(r + 1) * e]) {
                        *s += gv;
                    }
                }
            }
        }),
    )
}

/// Mean over all elements of the squared difference.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Tensor {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "mse_loss: shape mismatch {:?} vs {:?}",
        pred.shape(),
        target.shape()
    );
    let n = pred.numel() as f64;
    let value = pred.with_values(|pv| {
        target.with_values(|tv| {
            pv.iter()
                .zip(tv)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / n
        })
    });
    if !should_record(&[pred, target]) {
        return Tensor::scalar(value);
    }
    let (pp, pt) = (pred.clone(), target.clone());
    Tensor::interior(
        vec![1],
        vec![value],
        tracked_parents(&[pred, target]),
        Box::new(move |grad, store| {
            let coeff = 2.0 * grad[0] / n;
            let diffs: Vec<f64> = {
                let pd = pp.inner.borrow();
                let td = pt.inner.borrow();
                pd.values
                    .iter()
                    .zip(&td.values)
                    .map(|(p, t)| coeff * (p - t))
                    .collect()
            };
            if pp.tracked() {
                store.accumulate(&pp, &diffs);
            }
            if pt.tracked() {
                let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
                store.accumulate(&pt, &neg);
            }
        }),
    )
}

/// Mean negative log-likelihood of softmax(logits) at the target classes.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Tensor {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "cross_entropy_loss: logits must be 2-D, got {shape:?}");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(
        targets.len(),
        n,
        "cross_entropy_loss: {} targets for {} rows",
        targets.len(),
        n
    );
    for &t in targets {
        assert!(t < c, "cross_entropy_loss: target {t} out of range for {c} classes");
    }
    let value = logits.with_values(|lv| {
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        total / n as f64
    });
    if !should_record(&[logits]) {
        return Tensor::scalar(value);
    }
    let pl = logits.clone();
    let targets: Vec<usize> = targets.to_vec();
    Tensor::interior(
        vec![1],
        vec![value],
        vec![logits.clone()],
        Box::new(move |grad, store| {
            let probs: Vec<f64> = {
                let ld = pl.inner.borrow();
                let mut p = vec![0.0; n * c];
                for r in 0..n {
                    let row = &ld.values[r * c..(r + 1) * c];
                    let out = &mut p[r * c..(r + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (o, &e) in out.iter_mut().zip(row) {
                        *o = (e - max).exp();
                        sum += *o;
                    }
                    for o in out.iter_mut() {
                        *o /= sum;
                    }
                }
                p
            };
            if let Some(slot) = store.slot_mut(&pl, n * c) {
                let coeff = grad[0] / n as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        slot[r * c + j] += coeff * (probs[r * c + j] - indicator);
                    }
                }
            }
        }),
    )
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let value = x.with_values(|v| v.iter().sum::<f64>());
    if !should_record(&[x]) {
        return Tensor::scalar(value);
    }
    let px = x.clone();
    let numel = x.numel();
    Tensor::interior(
        vec![1],
        vec![value],
        vec![x.clone()],
        Box::new(move |grad, store| {
            if let Some(slot) = store.slot_mut(&px, numel) {
                for s in slot.iter_mut() {
                    *s += grad[0];
                }
            }
        }),
    )
}

// Method forms for the common call sites.
impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        matmul(self, rhs)
    }
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        matmul_nt(self, rhs)
    }
    pub fn reshaped(&self, new_shape: &[usize]) -> Tensor {
        reshaped(self, new_shape)
    }
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        add(self, rhs)
    }
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        add_bias(self, bias)
    }
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        mul_scalar(self, c)
    }
    pub fn relu(&self) -> Tensor {
        relu(self)
    }
    pub fn softmax_last(&self) -> Tensor {
        softmax_last(self)
    }
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        slice_rows(self, start, count)
    }
    pub fn slice_last(&self, start: usize, len: usize) -> Tensor {
        slice_last(self, start, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(&[3, 3], vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 7.0, 1.0]);
        let c = matmul(&eye, &b);
        assert_eq!(c.values(), b.values());
    }

    #[test]
    fn matmul_zero_column() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::new(&[2, 1], vec![0.0, 0.0]);
        let c = matmul(&a, &z);
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.values(), vec![0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "incompatible shapes")]
    fn matmul_shape_mismatch_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let _ = matmul(&a, &b);
    }

    #[test]
    fn concat_widths_sum() {
        let a = Tensor::zeros(&[1, 12, 768]);
        let b = Tensor::zeros(&[1, 12, 256]);
        let c = Tensor::zeros(&[1, 12, 128]);
        let cat = concat_last(&[a, b, c]);
        assert_eq!(cat.shape(), vec![1, 12, 1152]);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let cat = concat_last(std::slice::from_ref(&a));
        assert_eq!(cat.values(), a.values());
        assert_eq!(cat.shape(), a.shape());
    }

    #[test]
    #[should_panic(expected = "leading extents differ")]
    fn concat_leading_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        let _ = concat_last(&[a, b]);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::new(&[1, 4], vec![7.0; 4]);
        let s = softmax_last(&x);
        assert_close(&s.values(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn softmax_does_not_overflow() {
        let x = Tensor::new(&[1, 2], vec![1000.0, 0.0]);
        let s = softmax_last(&x);
        let v = s.values();
        assert!(v.iter().all(|e| e.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 4.0, 4.0, -4.0]);
        let shifted = Tensor::new(&[2, 3], vec![100.3, 98.8, 102.0, 104.0, 104.0, 96.0]);
        let a = softmax_last(&x).values();
        let b = softmax_last(&shifted).values();
        assert_close(&a, &b, 1e-12);
        for r in 0..2 {
            let sum: f64 = a[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(&[2, 4], vec![3.0; 8]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5);
        assert_close(&y.values(), &[0.0; 8], 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_gives_beta() {
        let x = Tensor::new(&[1, 3], vec![1.0, 5.0, -2.0]);
        let gamma = Tensor::zeros(&[3]);
        let beta = Tensor::full(&[3], 0.7);
        let y = layer_norm(&x, &gamma, &beta, 1e-5);
        assert_close(&y.values(), &[0.7; 3], 1e-15);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mse_loss(&x, &x).item(), 0.0);
    }

    #[test]
    fn mse_simple_arithmetic() {
        let p = Tensor::new(&[2], vec![0.0, 0.0]);
        let t = Tensor::new(&[2], vec![2.0, 0.0]);
        assert_eq!(mse_loss(&p, &t).item(), 2.0);
    }

    #[test]
    fn embedding_repeated_id_accumulates() {
        let table = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad(true);
        let looked = embedding_lookup(&table, &[1, 1, 2]);
        let loss = sum_all(&looked);
        loss.backward();
        let g = table.grad().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn embedding_id_out_of_range() {
        let table = Tensor::zeros(&[3, 2]);
        let _ = embedding_lookup(&table, &[3]);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let logits = Tensor::new(&[1, 2], vec![2.0, 0.0]);
        let loss = cross_entropy_loss(&logits, &[0]).item();
        let expected = -(2.0f64 - (2.0f64.exp() + 1.0).ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = slice_last(&x, 0, 2);
        let right = slice_last(&x, 2, 2);
        let back = concat_last(&[left, right]);
        assert_eq!(back.values(), x.values());
        let top = slice_rows(&x, 0, 1);
        let bottom = slice_rows(&x, 1, 1);
        let back = concat_rows(&[top, bottom]);
        assert_eq!(back.values(), x.values());
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = dropout(&x, 0.0, &mut rng);
        assert_eq!(y.values(), x.values());
    }
}
