//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    /// Index into the checked parameter list.
    pub tensor: usize,
    /// Flat coordinate inside that tensor.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the analytic gradient of the scalar `f` against
/// `(f(x+h) − f(x−h)) / 2h` on up to `coords_per_tensor` random coordinates of
/// every tensor in `params` (all coordinates when the tensor is smaller).
///
/// `f` receives the parameters bound as leaves, in order, and must be
/// deterministic.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::new();
    for (ti, var) in vars.iter().enumerate() {
        let n = params[ti].len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let analytic = grads.get(*var).map_or(0.0, |gr| gr[coord]);
            let orig = work[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[coord] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            entries.push(GradCheckEntry {
                tensor: ti,
                coord,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        tol,
        entries,
    })
}

/// Random-input finite-difference check of a single op kind.
///
/// Inputs get random shapes (up to 8 per dimension, rank 3 for the
/// elementwise and last-dim ops, layer-norm rows at least 3 wide); the checked scalar is `Σ W ∘ op(inputs)` with
/// a random constant readout `W`, except for ops that already reduce to a
/// scalar.
pub fn check_op(kind: OpKind, seed: u64, h: f64, tol: f64, coords_per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=8usize);
    let shape3 = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
    let (r, c) = (dim(&mut rng), dim(&mut rng));
    let rand = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    let readout = |g: &mut Graph, y: Var, rng_seed: u64| -> Result<Var> {
        let mut wr = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = Tensor::randn(g.shape(y), 1.0, &mut wr);
        let w = g.constant(w);
        let prod = g.mul(y, w)?;
        g.sum(prod)
    };
    let wseed = seed.wrapping_add(17);

    match kind {
        OpKind::MatMul => {
            let k = dim(&mut rng);
            let params = vec![rand(&[r, k], &mut rng), rand(&[k, c], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Add => {
            let params = vec![
                rand(&shape3, &mut rng),
                rand(&shape3, &mut rng),
                rand(&[r, c], &mut rng),
                rand(&[c], &mut rng),
            ];
            grad_check(
                |g, v| {
                    let y = g.add(v[0], v[1])?;
                    let a = readout(g, y, wseed)?;
                    let z = g.add(v[2], v[3])?;
                    let b = readout(g, z, wseed + 1)?;
                    g.add(a, b)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Mul => {
            let params = vec![rand(&shape3, &mut rng), rand(&shape3, &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Scale => {
            let factor = rng.random_range(-2.0..2.0);
            let params = vec![rand(&shape3, &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.scale(v[0], factor)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Sum => {
            let params = vec![rand(&shape3, &mut rng)];
            grad_check(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    g.sum(sq)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::SoftmaxLastDim => {
            let params = vec![rand(&shape3, &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.softmax(v[0])?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::LayerNorm => {
            let d = shape3[2].max(3);
            let shape = [shape3[0], shape3[1], d];
            let params = vec![rand(&shape, &mut rng), rand(&[d], &mut rng), rand(&[d], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Gelu => {
            let params = vec![rand(&shape3, &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.gelu(v[0])?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::EmbeddingLookup => {
            let n = dim(&mut rng);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
            let params = vec![rand(&[r, c], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.embedding(v[0], &ids)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::ConcatRows => {
            let params = vec![
                rand(&[dim(&mut rng), c], &mut rng),
                rand(&[dim(&mut rng), c], &mut rng),
                rand(&[dim(&mut rng), c], &mut rng),
            ];
            grad_check(
                |g, v| {
                    let y = g.concat_rows(v)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::SliceRows => {
            let start = rng.random_range(0..r);
            let end = rng.random_range(start + 1..=r);
            let params = vec![rand(&[r, c], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.slice_rows(v[0], start, end)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::CrossEntropyMasked => {
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let mut mask: Vec<bool> = (0..r).map(|_| rng.random_bool(0.6)).collect();
            mask[rng.random_range(0..r)] = true;
            let params = vec![rand(&[r, c], &mut rng)];
            grad_check(
                |g, v| g.cross_entropy(v[0], &labels, &mask),
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Transpose2d => {
            let params = vec![rand(&[r, c], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.transpose(v[0])?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::Reshape => {
            let params = vec![rand(&shape3, &mut rng)];
            let target = [shape3[0] * shape3[1], shape3[2]];
            grad_check(
                |g, v| {
                    let y = g.reshape(v[0], &target)?;
                    readout(g, y, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
        OpKind::CausalMaskedFill => {
            let params = vec![rand(&[r, r], &mut rng)];
            grad_check(
                |g, v| {
                    let y = g.causal_mask(v[0])?;
                    let p = g.softmax(y)?;
                    readout(g, p, wseed)
                },
                &params,
                h,
                tol,
                coords_per_tensor,
                seed,
            )
        }
    }
}
