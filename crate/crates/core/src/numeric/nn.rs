//! Attention, Gumbel-softmax and the two-layer MLP, built on [`Tape`].

use super::array::DenseArray;
use super::params::{Group, ParameterSet};
use super::rng::RngStream;
use super::tape::{softmax, Tape, Var};
use crate::error::{Error, Result};

/// Logit added to masked-out keys; `exp` of it underflows to exactly zero
/// while staying finite.
const MASKED_LOGIT: f64 = -1e30;

/// Gumbel perturbation of attention logits.
#[derive(Clone, Copy, Debug)]
pub struct GumbelNoise {
    pub temp: f64,
    pub stream: RngStream,
}

/// Row-wise attention weights `softmax((QKᵀ/√d + g) / temp)`.
///
/// `key_mask[j] == false` excludes key `j`. `noise == None` is the plain
/// softmax with unit temperature.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    key_mask: Option<&[bool]>,
    noise: Option<GumbelNoise>,
) -> Result<Var> {
    let (nq, d) = tape.shape(q);
    let (nk, dk) = tape.shape(k);
    if d != dk {
        return Err(Error::dim(format!("attention query width {d} vs key width {dk}")));
    }
    if d == 0 || nk == 0 {
        return Err(Error::dim("attention needs d >= 1 and at least one key"));
    }
    let qk = tape.matmul_t(q, k)?;
    let mut logits = tape.scale(qk, 1.0 / (d as f64).sqrt());
    if let Some(mask) = key_mask {
        if mask.len() != nk {
            return Err(Error::dim(format!("mask of {} for {nk} keys", mask.len())));
        }
        let bias: Vec<f64> = (0..nq)
            .flat_map(|_| mask.iter().map(|&keep| if keep { 0.0 } else { MASKED_LOGIT }))
            .collect();
        logits = tape.add_const(logits, &DenseArray::matrix(nq, nk, bias)?)?;
    }
    let temp = match noise {
        Some(GumbelNoise { temp, stream }) => {
            if !(temp > 0.0) {
                return Err(Error::config(format!("gumbel temperature must be > 0, got {temp}")));
            }
            let g = DenseArray::matrix(nq, nk, stream.gumbel(nq * nk))?;
            logits = tape.add_const(logits, &g)?;
            temp
        }
        None => 1.0,
    };
    tape.softmax_rows(logits, temp)
}

/// Scaled dot-product attention on the tape; output is `q_rows × d_v`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
    noise: Option<GumbelNoise>,
) -> Result<Var> {
    if tape.shape(k).0 != tape.shape(v).0 {
        return Err(Error::dim(format!(
            "attention has {} keys but {} values",
            tape.shape(k).0,
            tape.shape(v).0
        )));
    }
    let w = attention_weights(tape, q, k, key_mask, noise)?;
    tape.matmul(w, v)
}

/// Eager attention over plain arrays: `softmax(QKᵀ/√d [+ g] / temp) · V`.
pub fn scaled_dot_attention(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    use_gumbel: bool,
    gumbel_temp: f64,
    rng: RngStream,
) -> Result<DenseArray> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let noise = use_gumbel.then_some(GumbelNoise {
        temp: gumbel_temp,
        stream: rng,
    });
    let out = attention(&mut tape, qv, kv, vv, None, noise)?;
    Ok(tape.value(out).clone())
}

/// `softmax((logits + g) / temp)` with `g ~ Gumbel(0, 1)`, or `g = 0` when
/// `deterministic`.
pub fn gumbel_softmax(logits: &[f64], temp: f64, rng: RngStream, deterministic: bool) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(Error::config(format!("gumbel temperature must be > 0, got {temp}")));
    }
    if deterministic {
        return Ok(softmax(logits, temp));
    }
    let g = rng.gumbel(logits.len());
    let z: Vec<f64> = logits.iter().zip(&g).map(|(l, n)| l + n).collect();
    Ok(softmax(&z, temp))
}

/// Smooth elementwise nonlinearity between the MLP's affine layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x · σ(x)`.
    Silu,
    /// Identity; only useful for tests and linear probes.
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Linear => x,
        }
    }
}

/// `x · W + b` with `W` stored as `{prefix}.weight` (`d_in × d_out`) and
/// `b` as `{prefix}.bias` (`1 × d_out`).
pub fn affine(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Bias-free projection `x · W` with `W` at `name`.
pub fn project(tape: &mut Tape, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, name)?;
    tape.matmul(x, w)
}

/// Two affine layers with `act` between them: `{prefix}.fc1`, `{prefix}.fc2`.
pub fn mlp(tape: &mut Tape, params: &ParameterSet, prefix: &str, act: Activation, x: Var) -> Result<Var> {
    let h = affine(tape, params, &format!("{prefix}.fc1"), x)?;
    let h = act.apply(tape, h);
    affine(tape, params, &format!("{prefix}.fc2"), h)
}

/// Eager MLP on a single input vector.
pub fn mlp_forward(x: &[f64], params: &ParameterSet, prefix: &str, act: Activation) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(DenseArray::vector(x.to_vec()));
    let y = mlp(&mut tape, params, prefix, act, xv)?;
    Ok(tape.value(y).data().to_vec())
}

/// Kaiming-normal matrix: `N(0, 2 / fan_in)`.
pub fn kaiming(rows: usize, cols: usize, fan_in: usize, stream: RngStream) -> DenseArray {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = stream.normals(rows * cols).into_iter().map(|z| z * std).collect();
    DenseArray::matrix(rows, cols, data).expect("shape")
}

/// Register an MLP's parameters: Kaiming-initialised weights, zero biases.
/// With `zero_out`, the second layer starts at zero.
pub fn init_mlp(
    params: &mut ParameterSet,
    prefix: &str,
    dims: (usize, usize, usize),
    group: Group,
    zero_out: bool,
    stream: RngStream,
) -> Result<()> {
    let (d_in, hidden, d_out) = dims;
    params.insert(
        format!("{prefix}.fc1.weight"),
        kaiming(d_in, hidden, d_in, stream.fork(1)),
        group,
    )?;
    params.insert(format!("{prefix}.fc1.bias"), DenseArray::zeros(&[1, hidden]), group)?;
    let w2 = if zero_out {
        DenseArray::zeros(&[hidden, d_out])
    } else {
        kaiming(hidden, d_out, hidden, stream.fork(2))
    };
    params.insert(format!("{prefix}.fc2.weight"), w2, group)?;
    params.insert(format!("{prefix}.fc2.bias"), DenseArray::zeros(&[1, d_out]), group)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, seed: u64) -> DenseArray {
        DenseArray::matrix(r, c, RngStream::new(seed).normals(r * c)).unwrap()
    }

    /// Element-by-element evaluation of softmax(QKᵀ/√d)·V.
    fn attention_oracle(q: &DenseArray, k: &DenseArray, v: &DenseArray) -> Vec<Vec<f64>> {
        let d = q.cols() as f64;
        (0..q.rows())
            .map(|i| {
                let logits: Vec<f64> = (0..k.rows())
                    .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v.cols())
                    .map(|c| (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = mat(3, 4, 1);
        let k = mat(1, 4, 2);
        let v = mat(1, 4, 3);
        let out = scaled_dot_attention(&q, &k, &v, false, 1.0, RngStream::new(0)).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let q = DenseArray::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let k = DenseArray::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0]).unwrap();
        let v = mat(3, 2, 9);
        let out = scaled_dot_attention(&q, &k, &v, false, 1.0, RngStream::new(0)).unwrap();
        for c in 0..2 {
            let mean = (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0;
            assert!((out.get(0, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_elementwise_oracle() {
        let (q, k, v) = (mat(3, 4, 10), mat(3, 4, 11), mat(3, 4, 12));
        let out = scaled_dot_attention(&q, &k, &v, false, 1.0, RngStream::new(0)).unwrap();
        let want = attention_oracle(&q, &k, &v);
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.get(i, c) - want[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let r = RngStream::new(0);
        assert!(matches!(
            scaled_dot_attention(&mat(2, 3, 1), &mat(2, 4, 2), &mat(2, 4, 3), false, 1.0, r),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            scaled_dot_attention(&mat(2, 4, 1), &mat(2, 4, 2), &mat(3, 4, 3), false, 1.0, r),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            scaled_dot_attention(&mat(2, 4, 1), &mat(2, 4, 2), &mat(2, 4, 3), true, 0.0, r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut t = Tape::new();
        let q = t.constant(mat(2, 4, 1));
        let k = t.constant(mat(3, 4, 2));
        let w = attention_weights(&mut t, q, k, Some(&[true, false, true]), None).unwrap();
        let wv = t.value(w);
        assert_eq!(wv.get(0, 1), 0.0);
        assert_eq!(wv.get(1, 1), 0.0);
        assert!((wv.get(0, 0) + wv.get(0, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gumbel_softmax_deterministic_cases() {
        let r = RngStream::new(0);
        assert_eq!(gumbel_softmax(&[3.0; 4], 1.0, r, true).unwrap(), vec![0.25; 4]);
        assert_eq!(gumbel_softmax(&[0.0, 0.0], 1.0, r, true).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(gumbel_softmax(&[0.0], 0.0, r, true), Err(Error::Config(_))));
        assert!(matches!(gumbel_softmax(&[0.0], -1.0, r, false), Err(Error::Config(_))));
    }

    #[test]
    fn gumbel_softmax_stochastic_sums_to_one() {
        let p = gumbel_softmax(&[1.0, 0.0, -1.0], 0.5, RngStream::new(4), false).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    fn mlp_params(d_in: usize, h: usize, d_out: usize, seed: u64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("m.fc1.weight", mat(d_in, h, seed), Group::Fusion).unwrap();
        p.insert("m.fc1.bias", mat(1, h, seed + 1), Group::Fusion).unwrap();
        p.insert("m.fc2.weight", mat(h, d_out, seed + 2), Group::Fusion).unwrap();
        p.insert("m.fc2.bias", mat(1, d_out, seed + 3), Group::Fusion).unwrap();
        p
    }

    #[test]
    fn mlp_zero_second_layer_outputs_bias() {
        let mut p = mlp_params(3, 5, 2, 1);
        *p.get_mut("m.fc2.weight").unwrap() = DenseArray::zeros(&[5, 2]);
        let bias = p.get("m.fc2.bias").unwrap().data().to_vec();
        for seed in 0..3 {
            let x = RngStream::new(seed).normals(3);
            assert_eq!(mlp_forward(&x, &p, "m", Activation::Silu).unwrap(), bias);
        }
    }

    #[test]
    fn mlp_identity_layers_pass_input_through() {
        let mut p = ParameterSet::new();
        let eye = |n: usize, m: usize| {
            let mut a = DenseArray::zeros(&[n, m]);
            for i in 0..n.min(m) {
                a.data_mut()[i * m + i] = 1.0;
            }
            a
        };
        p.insert("m.fc1.weight", eye(4, 4), Group::Base).unwrap();
        p.insert("m.fc1.bias", DenseArray::zeros(&[1, 4]), Group::Base).unwrap();
        p.insert("m.fc2.weight", eye(4, 2), Group::Base).unwrap();
        p.insert("m.fc2.bias", DenseArray::zeros(&[1, 2]), Group::Base).unwrap();
        let x = [0.3, -1.2, 5.0, 2.0];
        assert_eq!(mlp_forward(&x, &p, "m", Activation::Linear).unwrap(), vec![0.3, -1.2]);
    }

    #[test]
    fn mlp_matches_matrix_oracle() {
        let p = mlp_params(8, 16, 4, 20);
        let x = RngStream::new(99).normals(8);
        let got = mlp_forward(&x, &p, "m", Activation::Silu).unwrap();
        let (w1, b1) = (p.get("m.fc1.weight").unwrap(), p.get("m.fc1.bias").unwrap());
        let (w2, b2) = (p.get("m.fc2.weight").unwrap(), p.get("m.fc2.bias").unwrap());
        let h: Vec<f64> = (0..16)
            .map(|j| {
                let z = b1.data()[j] + (0..8).map(|i| x[i] * w1.get(i, j)).sum::<f64>();
                z / (1.0 + (-z).exp())
            })
            .collect();
        for o in 0..4 {
            let want = b2.data()[o] + (0..16).map(|j| h[j] * w2.get(j, o)).sum::<f64>();
            assert!((got[o] - want).abs() < 1e-12, "{} vs {want}", got[o]);
        }
    }

    #[test]
    fn mlp_missing_parameter_is_config_error() {
        let p = ParameterSet::new();
        assert!(matches!(
            mlp_forward(&[1.0], &p, "m", Activation::Silu),
            Err(Error::Config(_))
        ));
    }
}
