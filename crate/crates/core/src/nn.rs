//! Parameter storage and the layers shared by the language model and the
//! discriminators.

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Order is the construction order and is
/// what optimizers and checkpoints iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor from `(name, tensor)` pairs that must match this
    /// set's names and shapes one-to-one, in order.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for ((name, t), (want, slot)) in entries.iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if name != want || t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Put every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (n, t) in self.iter() {
            out.extend_from_slice(n.as_bytes());
            out.extend(t.to_le_bytes());
        }
        out
    }
}

/// A [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap tape variables laid out in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients in parameter order; zeros where backward never reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    XavierUniform,
}

fn init_weight(d_in: usize, d_out: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Normal(std) => Tensor::randn(&[d_in, d_out], std, rng),
        Init::XavierUniform => {
            Tensor::rand_uniform(&[d_in, d_out], (6.0 / (d_in + d_out) as f64).sqrt(), rng)
        }
    }
}

/// `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = ps.push(format!("{name}.weight"), init_weight(d_in, d_out, init, rng));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// Row-wise layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.push(format!("{name}.weight"), Tensor::ones(&[dim])),
            bias: ps.push(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let n = tape.mul(n, p.var(self.gain))?;
        tape.add(n, p.var(self.bias))
    }
}

/// Additive attention mask `[B, heads, T, T]`: 0 where query `i` may attend
/// key `j`, a large negative number otherwise. Keys are hidden when
/// `key_mask` is 0 and, if `causal`, when `j > i`.
pub fn attention_mask(key_mask: &Tensor, heads: usize, causal: bool) -> Result<Tensor> {
    let &[b, t] = key_mask.shape() else {
        return Err(Error::Shape(format!("attention mask must be [B, T], got {:?}", key_mask.shape())));
    };
    const BLOCKED: f64 = -1e9;
    let km = key_mask.data();
    let mut out = Vec::with_capacity(b * heads * t * t);
    for bi in 0..b {
        let mut plane = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                let open = km[bi * t + j] != 0.0 && (!causal || j <= i);
                plane.push(if open { 0.0 } else { BLOCKED });
            }
        }
        for _ in 0..heads {
            out.extend_from_slice(&plane);
        }
    }
    Tensor::new(&[b, heads, t, t], out)
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, init: Init, rng: &mut impl Rng) -> Self {
        SelfAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, init, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, init, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, init, rng),
            heads,
        }
    }

    /// `x: [B, T, d]`, `mask: [B, heads, T, T]` additive.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Var) -> Result<Var> {
        let &[b, t, d] = tape.shape(x) else {
            return Err(Error::Shape("attention input must be [B, T, d]".into()));
        };
        let dh = d / self.heads;
        let split = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, p, x)?;
            let y = tape.reshape(y, &[b, t, self.heads, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        self.o.forward(tape, p, ctx)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, init: Init, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, init, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-layer-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, init: Init, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads, init, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, 4 * dim, init, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, mask)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Linear layer whose weight is divided by a power-iteration estimate of its
/// top singular value, `sigma = uᵀ W v`. The vectors `u`, `v` are state, not
/// parameters: they only change in [`SpectralLinear::power_iterate`], and
/// enter the forward pass as constants.
#[derive(Clone, Debug)]
pub struct SpectralLinear {
    pub lin: Linear,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Power iterations run when a spectrally normalized layer is created.
pub const SN_INIT_ITERS: usize = 15;

impl SpectralLinear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let lin = Linear::new(ps, name, d_in, d_out, Init::XavierUniform, rng);
        let mut u = Tensor::randn(&[d_in], 1.0, rng).into_data();
        normalize(&mut u);
        let mut sl = SpectralLinear {
            lin,
            u,
            v: vec![0.0; d_out],
        };
        sl.power_iterate(ps, SN_INIT_ITERS);
        sl
    }

    pub fn power_iterate(&mut self, ps: &ParamSet, iters: usize) {
        let w = ps.get(self.lin.w).data();
        let (m, n) = (self.lin.d_in, self.lin.d_out);
        for _ in 0..iters {
            // v = normalize(Wᵀ u)
            self.v.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..m {
                let ui = self.u[i];
                for (vj, wij) in self.v.iter_mut().zip(&w[i * n..][..n]) {
                    *vj += wij * ui;
                }
            }
            normalize(&mut self.v);
            // u = normalize(W v)
            for i in 0..m {
                self.u[i] = w[i * n..][..n].iter().zip(&self.v).map(|(a, b)| a * b).sum();
            }
            normalize(&mut self.u);
        }
    }

    /// Current estimate `uᵀ W v` of the top singular value.
    pub fn sigma(&self, ps: &ParamSet) -> f64 {
        let w = ps.get(self.lin.w).data();
        let n = self.lin.d_out;
        (0..self.lin.d_in)
            .map(|i| self.u[i] * w[i * n..][..n].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// `W / sigma` as a plain tensor.
    pub fn normalized_weight(&self, ps: &ParamSet) -> Tensor {
        let s = self.sigma(ps);
        ps.get(self.lin.w).map(|x| x / s)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(self.lin.w);
        let u = tape.constant(Tensor::new(&[1, self.lin.d_in], self.u.clone())?);
        let v = tape.constant(Tensor::new(&[self.lin.d_out, 1], self.v.clone())?);
        let uw = tape.matmul(u, w)?;
        let sigma = tape.matmul(uw, v)?;
        let sigma = tape.reshape(sigma, &[])?;
        let w_sn = tape.div(w, sigma)?;
        let y = tape.matmul(x, w_sn)?;
        tape.add(y, p.var(self.lin.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_blocks_future_and_padding() {
        let km = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let m = attention_mask(&km, 1, true).unwrap();
        let open: Vec<bool> = m.data().iter().map(|&x| x == 0.0).collect();
        assert_eq!(open, vec![true, false, false, true, true, false, true, true, false]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let block = Block::new(&mut ps, "b", 4, 2, Init::Normal(0.3), &mut rng);
        let sl = SpectralLinear::new(&mut ps, "sn", 4, 3, &mut rng);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let key_mask = Tensor::new(&[2, 3], vec![1., 1., 1., 1., 1., 0.]).unwrap();
        let mask = attention_mask(&key_mask, 2, false).unwrap();
        let mut points = ps.tensors().to_vec();
        points.push(x);
        let r = grad_check_many(
            |tape, vars| {
                let n = vars.len() - 1;
                let p = Bound(vars[..n].to_vec());
                let m = tape.constant(mask.clone());
                let y = block.forward(tape, &p, vars[n], m)?;
                let y = sl.forward(tape, &p, y)?;
                let y = tape.square(y);
                Ok(tape.mean(y))
            },
            &points,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
