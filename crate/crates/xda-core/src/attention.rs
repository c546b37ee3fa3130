//! Multi-head scaled dot-product attention, cross-domain (query-swapped)
//! attention, and the perturbation baselines (smoothed random attention,
//! uniform context broadcasting). Every module exposes its attention maps.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::interp::bilinear_resize_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Projection weights of one attention module. The output projection `w_o`
/// mixes the concatenated head outputs back to the embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F: Scalar> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub heads: usize,
}

impl<F: Scalar> AttentionWeights<F> {
    pub fn validate(&self) -> Result<()> {
        let [d, c_attn] = self.w_q.shape() else {
            return Err(CoreError::dim("attention", "w_q must be 2-d"));
        };
        let (d, c_attn) = (*d, *c_attn);
        if self.w_k.shape() != [d, c_attn] || self.w_v.shape() != [d, c_attn] {
            return Err(CoreError::shape("attention", self.w_q.shape(), self.w_k.shape()));
        }
        if self.w_o.shape() != [c_attn, d] {
            return Err(CoreError::shape("attention", &[c_attn, d], self.w_o.shape()));
        }
        if self.heads == 0 || c_attn % self.heads != 0 {
            return Err(CoreError::dim(
                "attention",
                format!("attention width {} not divisible by {} heads", c_attn, self.heads),
            ));
        }
        for t in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if !t.is_finite() {
                return Err(CoreError::numeric("attention", "non-finite weights"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.shape()[1] / self.heads
    }

    pub fn bind(&self, g: &mut Graph<F>, requires_grad: bool) -> BoundAttention {
        BoundAttention {
            w_q: g.leaf(&self.w_q, requires_grad),
            w_k: g.leaf(&self.w_k, requires_grad),
            w_v: g.leaf(&self.w_v, requires_grad),
            w_o: g.leaf(&self.w_o, requires_grad),
            heads: self.heads,
            head_dim: self.head_dim(),
        }
    }
}

/// Projection weights entered into a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub heads: usize,
    pub head_dim: usize,
}

/// Detached per-layer attention scores: `[heads, queries, keys]`, each
/// (head, query) row a probability distribution over keys.
#[derive(Debug, Clone)]
pub struct AttentionMap<F: Scalar> {
    pub scores: Tensor<F>,
    pub layer: usize,
}

impl<F: Scalar> AttentionMap<F> {
    pub fn heads(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.scores.shape()[2]
    }

    /// Max deviation from row-stochasticity: row sums vs 1 and entries vs [0, 1].
    pub fn row_stochastic_error(&self) -> f64 {
        let nk = self.keys();
        let mut worst = 0.0f64;
        for row in self.scores.data().chunks_exact(nk) {
            let sum: f64 = row.iter().map(|v| Scalar::to_f64(*v)).sum();
            worst = worst.max((sum - 1.0).abs());
            for v in row {
                let v = Scalar::to_f64(*v);
                if v < 0.0 {
                    worst = worst.max(-v);
                } else if v > 1.0 {
                    worst = worst.max(v - 1.0);
                }
            }
        }
        worst
    }
}

/// Attention perturbation applied inside the student branches during
/// training (the regularization baselines).
pub enum Perturbation<'r> {
    None,
    /// Average each head map with a softmaxed, bilinearly upsampled Gaussian
    /// noise field sampled at `res`.
    Random { res: (usize, usize), rng: &'r mut ChaCha8Rng },
    /// Context broadcasting after the output projection:
    /// y_j <- (y_j + mean_k y_k) / 2.
    Uniform,
}

fn attention_inner<F: Scalar>(
    g: &mut Graph<F>,
    x_query: NodeId,
    x_kv: NodeId,
    w: &BoundAttention,
    stop_query_grad: bool,
    pert: &mut Perturbation<'_>,
) -> Result<(NodeId, NodeId)> {
    let q_in = if stop_query_grad { g.stop_gradient(x_query) } else { x_query };
    let q_full = g.matmul(q_in, w.w_q)?;
    let k_full = g.matmul(x_kv, w.w_k)?;
    let v_full = g.matmul(x_kv, w.w_v)?;
    let nq = g.shape(q_full)[0];
    let nk = g.shape(k_full)[0];
    let scale = F::one() / F::from_f64((w.head_dim as f64).sqrt());

    let mut head_maps = Vec::with_capacity(w.heads);
    let mut head_outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let q_h = g.slice_cols(q_full, h * w.head_dim, w.head_dim)?;
        let k_h = g.slice_cols(k_full, h * w.head_dim, w.head_dim)?;
        let v_h = g.slice_cols(v_full, h * w.head_dim, w.head_dim)?;
        let k_t = g.transpose(k_h)?;
        let logits = g.matmul(q_h, k_t)?;
        let mut map = g.softmax_rows(logits, scale)?;
        if let Perturbation::Random { res, rng } = pert {
            let noise = perturbation_noise_map::<F>(nq, nk, *res, rng)?;
            let half = F::from_f64(0.5);
            let m_half = g.scale(map, half);
            let n_node = g.constant(noise);
            let n_half = g.scale(n_node, half);
            map = g.add(m_half, n_half)?;
        }
        head_maps.push(map);
        head_outs.push(g.matmul(map, v_h)?);
    }
    let maps_2d = g.concat_rows(&head_maps)?;
    let maps = g.reshape(maps_2d, vec![w.heads, nq, nk])?;
    let concat = g.concat_cols(&head_outs)?;
    let mut y = g.matmul(concat, w.w_o)?;
    if matches!(pert, Perturbation::Uniform) {
        y = uniform_broadcast(g, y)?;
    }
    Ok((y, maps))
}

/// Self-attention: queries, keys and values all from `x`. Returns the output
/// tokens and the `[heads, n, n]` attention map node.
pub fn self_attention<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w: &BoundAttention,
    pert: &mut Perturbation<'_>,
) -> Result<(NodeId, NodeId)> {
    attention_inner(g, x, x, w, false, pert)
}

/// Cross-domain attention: queries from one domain's feature stream, keys
/// and values from the other's. With `stop_query_grad`, the query path is
/// severed so no gradient reaches `x_query`'s ancestors.
pub fn cross_domain_attention<F: Scalar>(
    g: &mut Graph<F>,
    x_query: NodeId,
    x_kv: NodeId,
    w: &BoundAttention,
    stop_query_grad: bool,
) -> Result<(NodeId, NodeId)> {
    if g.shape(x_query) != g.shape(x_kv) {
        // Token-count mismatch would silently corrupt downstream map mixing,
        // so the operation rejects rather than pads.
        return Err(CoreError::shape(
            "cross_domain_attention",
            g.shape(x_query),
            g.shape(x_kv),
        ));
    }
    attention_inner(g, x_query, x_kv, w, stop_query_grad, &mut Perturbation::None)
}

/// Smoothed random attention field: standard-normal noise at `res`,
/// bilinearly upsampled to `[nq, nk]`, then row-softmaxed.
pub fn perturbation_noise_map<F: Scalar>(
    nq: usize,
    nk: usize,
    res: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let (rh, rw) = res;
    if rh == 0 || rw == 0 || nq % rh != 0 || nk % rw != 0 {
        return Err(CoreError::dim(
            "random_perturbed_attention",
            format!("noise resolution {:?} does not divide map size {}x{}", res, nq, nk),
        ));
    }
    let mut field = Vec::with_capacity(rh * rw);
    for _ in 0..rh * rw {
        let v: f64 = StandardNormal.sample(rng);
        field.push(F::from_f64(v));
    }
    let field = Tensor::new(vec![rh, rw], field)?;
    let up = bilinear_resize_tensor(&field, nq, nk)?;
    Ok(softmax_rows_tensor(&up, nk))
}

fn softmax_rows_tensor<F: Scalar>(t: &Tensor<F>, row_len: usize) -> Tensor<F> {
    let mut out = vec![F::zero(); t.numel()];
    for (row_in, row_out) in t.data().chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let mut mx = F::neg_infinity();
        for &v in row_in {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

/// Average a detached attention map with a fresh smoothed noise map per head:
/// `(map + noise)/2`, which stays row-stochastic.
pub fn random_perturbed_attention<F: Scalar>(
    map: &AttentionMap<F>,
    res: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<AttentionMap<F>> {
    let (h, nq, nk) = (map.heads(), map.queries(), map.keys());
    let half = F::from_f64(0.5);
    let mut out = Vec::with_capacity(h * nq * nk);
    for head in 0..h {
        let noise = perturbation_noise_map::<F>(nq, nk, res, rng)?;
        let base = &map.scores.data()[head * nq * nk..(head + 1) * nq * nk];
        out.extend(base.iter().zip(noise.data()).map(|(&m, &n)| (m + n) * half));
    }
    Ok(AttentionMap {
        scores: Tensor::new(vec![h, nq, nk], out)?,
        layer: map.layer,
    })
}

/// Context broadcasting: every token averaged with the global token mean,
/// `y_j <- (y_j + mean_k y_k) / 2`. Token means are preserved.
pub fn uniform_broadcast<F: Scalar>(g: &mut Graph<F>, y: NodeId) -> Result<NodeId> {
    let mean = g.mean_rows(y)?;
    let summed = g.add_row(y, mean)?;
    Ok(g.scale(summed, F::from_f64(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_weights(d: usize, c_attn: usize, heads: usize, seed: u64) -> AttentionWeights<f64> {
        let mut r = rng(seed);
        let mut mk = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-0.8..0.8)).collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let w = AttentionWeights {
            w_q: mk(d, c_attn),
            w_k: mk(d, c_attn),
            w_v: mk(d, c_attn),
            w_o: mk(c_attn, d),
            heads,
        };
        w.validate().unwrap();
        w
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent scalar-loop attention: explicit per-element projections,
    /// logits, softmax and value mix. No graph machinery.
    fn scalar_attention_oracle(
        x_query: &Tensor<f64>,
        x_kv: &Tensor<f64>,
        w: &AttentionWeights<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = x_query.shape()[0];
        let d = x_query.shape()[1];
        let c = w.w_q.shape()[1];
        let dh = c / w.heads;
        let proj = |x: &Tensor<f64>, m: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += x.data()[i * d + k] * m.data()[k * c + j];
                    }
                    out[i * c + j] = acc;
                }
            }
            out
        };
        let q = proj(x_query, &w.w_q);
        let k = proj(x_kv, &w.w_k);
        let v = proj(x_kv, &w.w_v);
        let mut maps = vec![0.0; w.heads * n * n];
        let mut mixed = vec![0.0; n * c];
        for h in 0..w.heads {
            for i in 0..n {
                let mut row = vec![0.0; n];
                for (j, rj) in row.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[i * c + h * dh + e] * k[j * c + h * dh + e];
                    }
                    *rj = dot / (dh as f64).sqrt();
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..n {
                    let a = exps[j] / denom;
                    maps[h * n * n + i * n + j] = a;
                    for e in 0..dh {
                        mixed[i * c + h * dh + e] += a * v[j * c + h * dh + e];
                    }
                }
            }
        }
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for e in 0..c {
                    acc += mixed[i * c + e] * w.w_o.data()[e * d + j];
                }
                y[i * d + j] = acc;
            }
        }
        (y, maps)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = random_weights(3, 4, 2, 7);
        let x = random_tokens(1, 3, 8);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let (y, maps) = self_attention(&mut g, xid, &b, &mut Perturbation::None).unwrap();
        assert_eq!(g.value(maps), &[1.0, 1.0]); // one row of [[1.0]] per head

        // y == W_O applied to the value row
        let (y_ref, _) = scalar_attention_oracle(&x, &x, &w);
        for (a, b) in g.value(y).iter().zip(&y_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let w = random_weights(3, 4, 1, 9);
        let x = Tensor::zeros(&[5, 3]); // Q = K = 0 -> QK^T = 0
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let (_, maps) = self_attention(&mut g, xid, &b, &mut Perturbation::None).unwrap();
        for &v in g.value(maps) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_oracle_three_tokens_one_head() {
        let w = random_weights(2, 2, 1, 11);
        let x = random_tokens(3, 2, 12);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let (y, maps) = self_attention(&mut g, xid, &b, &mut Perturbation::None).unwrap();
        let (y_ref, maps_ref) = scalar_attention_oracle(&x, &x, &w);
        for (a, r) in g.value(y).iter().zip(&y_ref) {
            assert!((a - r).abs() < 1e-10);
        }
        for (a, r) in g.value(maps).iter().zip(&maps_ref) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_attention_degenerate_swap_equals_self() {
        let w = random_weights(4, 8, 2, 21);
        let x = random_tokens(6, 4, 22);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let (ys, ms) = self_attention(&mut g, xid, &b, &mut Perturbation::None).unwrap();
        let (yc, mc) = cross_domain_attention(&mut g, xid, xid, &b, true).unwrap();
        for (a, r) in g.value(yc).iter().zip(g.value(ys)) {
            assert!((a - r).abs() < 1e-10);
        }
        for (a, r) in g.value(mc).iter().zip(g.value(ms)) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_attention_matches_oracle_on_two_token_pair() {
        let w = random_weights(3, 3, 1, 31);
        let xt = random_tokens(2, 3, 32); // query side
        let xs = random_tokens(2, 3, 33); // key/value side
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let qid = g.leaf(&xt, false);
        let kvid = g.leaf(&xs, false);
        let (y, maps) = cross_domain_attention(&mut g, qid, kvid, &b, false).unwrap();
        let (y_ref, maps_ref) = scalar_attention_oracle(&xt, &xs, &w);
        for (a, r) in g.value(y).iter().zip(&y_ref) {
            assert!((a - r).abs() < 1e-10);
        }
        for (a, r) in g.value(maps).iter().zip(&maps_ref) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_attention_rejects_token_count_mismatch() {
        let w = random_weights(3, 3, 1, 41);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let q = g.leaf(&random_tokens(2, 3, 42), false);
        let kv = g.leaf(&random_tokens(4, 3, 43), false);
        assert!(matches!(
            cross_domain_attention(&mut g, q, kv, &b, false),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stop_query_grad_zeroes_query_jacobian() {
        let w = random_weights(3, 6, 2, 51);
        let xq = random_tokens(4, 3, 52);
        let xkv = random_tokens(4, 3, 53);

        for (stop, expect_zero) in [(true, true), (false, false)] {
            let mut g = Graph::new();
            let b = w.bind(&mut g, false);
            let qid = g.leaf(&xq, true);
            let kvid = g.leaf(&xkv, true);
            let (y, _) = cross_domain_attention(&mut g, qid, kvid, &b, stop).unwrap();
            let probe = g.mul(y, y).unwrap();
            let loss = g.sum_all(probe);
            g.backward(loss).unwrap();
            let gq = g.grad(qid).unwrap();
            let all_zero = gq.iter().all(|&v| v == 0.0);
            assert_eq!(all_zero, expect_zero, "stop={stop}");
            // key/value side always receives gradient
            assert!(g.grad(kvid).unwrap().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn kv_permutation_permutes_map_columns_and_preserves_output() {
        let w = random_weights(3, 4, 2, 61);
        let xq = random_tokens(5, 3, 62);
        let xkv = random_tokens(5, 3, 63);
        let perm = [3usize, 0, 4, 1, 2];

        let mut permuted = Tensor::zeros(&[5, 3]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                permuted.data_mut()[dst * 3 + c] = xkv.data()[src * 3 + c];
            }
        }

        let run = |kv: &Tensor<f64>| {
            let mut g = Graph::new();
            let b = w.bind(&mut g, false);
            let q = g.leaf(&xq, false);
            let k = g.leaf(kv, false);
            let (y, m) = cross_domain_attention(&mut g, q, k, &b, false).unwrap();
            (g.value(y).to_vec(), g.value(m).to_vec())
        };
        let (y0, m0) = run(&xkv);
        let (y1, m1) = run(&permuted);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
        // column j of the original map appears at the permuted position
        for h in 0..2 {
            for q in 0..5 {
                for (dst, &src) in perm.iter().enumerate() {
                    let orig = m0[h * 25 + q * 5 + src];
                    let new = m1[h * 25 + q * 5 + dst];
                    assert!((orig - new).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn perturbed_maps_stay_row_stochastic_and_replay() {
        let w = random_weights(3, 4, 2, 71);
        let x = random_tokens(8, 3, 72);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let (_, maps) = self_attention(&mut g, xid, &b, &mut Perturbation::None).unwrap();
        let map = AttentionMap { scores: g.detach(maps), layer: 0 };

        let mut r1 = rng(99);
        let p1 = random_perturbed_attention(&map, (2, 2), &mut r1).unwrap();
        assert!(p1.row_stochastic_error() < 1e-12);

        // fixed seed replays bitwise
        let mut r2 = rng(99);
        let p2 = random_perturbed_attention(&map, (2, 2), &mut r2).unwrap();
        assert_eq!(p1.scores.data(), p2.scores.data());

        // different seed differs
        let mut r3 = rng(100);
        let p3 = random_perturbed_attention(&map, (2, 2), &mut r3).unwrap();
        assert_ne!(p1.scores.data(), p3.scores.data());
    }

    #[test]
    fn zero_variance_noise_becomes_uniform_mix() {
        // A constant noise field softmaxes to the uniform map, so the output
        // is (map + uniform)/2; emulate by resizing a constant field.
        let field = Tensor::full(&[2, 2], 3.5f64);
        let up = bilinear_resize_tensor(&field, 4, 4).unwrap();
        let sm = softmax_rows_tensor(&up, 4);
        for &v in sm.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_broadcast_examples() {
        // constant input is a fixed point
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::full(&[3, 2], 1.25f64), false);
        let y = uniform_broadcast(&mut g, c).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 1.25f64).abs() < 1e-15));

        // tokens [2, 0] (d=1) -> [1.5, 0.5]
        let x = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let xid = g.leaf(&x, false);
        let y2 = uniform_broadcast(&mut g, xid).unwrap();
        assert_eq!(g.value(y2), &[1.5, 0.5]);

        // token mean preserved
        let x3 = random_tokens(6, 3, 81);
        let x3id = g.leaf(&x3, false);
        let y3 = uniform_broadcast(&mut g, x3id).unwrap();
        let m_in = g.mean_rows(x3id).unwrap();
        let m_out = g.mean_rows(y3).unwrap();
        for (a, b) in g.value(m_in).iter().zip(g.value(m_out)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
