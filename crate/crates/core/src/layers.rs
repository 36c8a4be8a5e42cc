//! Network building blocks on top of the tape: affine maps, LSTM, stacked
//! bidirectional LSTM, multi-head self-attention, residual layer norm and
//! a one-hidden-layer MLP.
//!
//! Each block registers its parameters in a [`ParamStore`] under a dotted
//! name prefix and keeps only their ids; `forward` methods borrow the
//! store for the lifetime of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `x W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// One LSTM direction. Gates are packed as `[input, forget, candidate, output]`
/// along the last axis of every weight.
#[derive(Debug, Clone)]
pub struct LstmCell {
    /// `in_dim x 4H`
    pub w_input: ParamId,
    /// `H x 4H`
    pub w_recurrent: ParamId,
    /// `1 x 4H`, forget slice initialized to 1.
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// The same cell with its parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_input = store.add_uniform(format!("{name}.w_input"), vec![in_dim, 4 * hidden], in_dim, rng)?;
        let w_recurrent =
            store.add_uniform(format!("{name}.w_recurrent"), vec![hidden, 4 * hidden], hidden, rng)?;
        let mut b = Tensor::zeros(vec![1, 4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(LstmCell {
            w_input,
            w_recurrent,
            bias,
            in_dim,
            hidden,
        })
    }

    pub fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore) -> BoundLstm {
        BoundLstm {
            w_input: tape.param(store, self.w_input),
            w_recurrent: tape.param(store, self.w_recurrent),
            bias: tape.param(store, self.bias),
            hidden: self.hidden,
        }
    }

    /// Runs the cell over the rows of `x` (`N x in_dim`), last row first
    /// when `reverse`. Row `n` of the result is the hidden state after
    /// consuming row `n` of the input.
    pub fn run<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let n = tape.shape(x)[0];
        if n == 0 {
            return Err(Error::EmptyList);
        }
        let cell = self.bind(tape, store);
        // The input half of every gate preactivation in one product.
        let xw = tape.matmul(x, cell.w_input)?;
        let projected = tape.add_row(xw, cell.bias)?;

        let mut h = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut outputs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let row = tape.slice_rows(projected, t, 1)?;
            (h, c) = lstm_step(tape, &cell, row, h, c)?;
            outputs[t] = h;
        }
        tape.concat_rows(&outputs)
    }
}

fn lstm_step(tape: &mut Tape<'_>, cell: &BoundLstm, projected_x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hw = cell.hidden;
    let recurrent = tape.matmul(h_prev, cell.w_recurrent)?;
    let z = tape.add(projected_x, recurrent)?;
    let zi = tape.slice_cols(z, 0, hw)?;
    let zf = tape.slice_cols(z, hw, hw)?;
    let zg = tape.slice_cols(z, 2 * hw, hw)?;
    let zo = tape.slice_cols(z, 3 * hw, hw)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM step from a raw input row: `i,f,o = σ(·)`, `g = tanh(·)`,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell(tape: &mut Tape<'_>, cell: &BoundLstm, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, cell.w_input)?;
    let projected = tape.add_row(xw, cell.bias)?;
    let hp = tape.shape(h_prev);
    if hp != [1, cell.hidden] || tape.shape(c_prev) != hp {
        return Err(Error::Shape {
            op: "lstm_cell",
            left: tape.shape(h_prev).to_vec(),
            right: tape.shape(c_prev).to_vec(),
        });
    }
    lstm_step(tape, cell, projected, h_prev, c_prev)
}

/// Stacked bidirectional LSTM. Each layer after the first reads the
/// concatenated forward and backward states of the layer below.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng)?;
            let bwd = LstmCell::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng)?;
            layers.push((fwd, bwd));
        }
        Ok(BiLstm { layers, hidden })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `N x in_dim` features to `N x 2H` states `[forward ‖ backward]` of the top layer.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let mut cur = x;
        for (fwd, bwd) in &self.layers {
            let f = fwd.run(tape, store, cur, false)?;
            let b = bwd.run(tape, store, cur, true)?;
            cur = tape.concat_cols(&[f, b])?;
        }
        Ok(cur)
    }
}

/// Divisor applied to attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(t)`, the full model width.
    #[default]
    ModelDim,
    /// `sqrt(t / h)`, the per-head width.
    HeadDim,
}

/// Multi-head self-attention without positional encoding or biases.
///
/// The per-head `t x t/h` projections are stored side by side as one
/// `t x t` matrix per role; head `i` owns columns `i*t/h .. (i+1)*t/h`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub scale: AttentionScale,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        scale: AttentionScale,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mut square = |role: &str, rng: &mut R| {
            store.add_uniform(format!("{name}.{role}"), vec![dim, dim], dim, rng)
        };
        Ok(MultiHeadAttention {
            w_query: square("w_query", rng)?,
            w_key: square("w_key", rng)?,
            w_value: square("w_value", rng)?,
            w_out: square("w_out", rng)?,
            dim,
            heads,
            scale,
        })
    }

    pub fn divisor(&self) -> f64 {
        match self.scale {
            AttentionScale::ModelDim => (self.dim as f64).sqrt(),
            AttentionScale::HeadDim => ((self.dim / self.heads) as f64).sqrt(),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let width = tape.shape(x)[1];
        if width != self.dim {
            return Err(Error::Shape {
                op: "attention",
                left: tape.shape(x).to_vec(),
                right: vec![self.dim, self.dim],
            });
        }
        let wq = tape.param(store, self.w_query);
        let wk = tape.param(store, self.w_key);
        let wv = tape.param(store, self.w_value);
        let wo = tape.param(store, self.w_out);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dh = self.dim / self.heads;
        let inv = 1.0 / self.divisor();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = tape.slice_cols(q, i * dh, dh)?;
            let ki = tape.slice_cols(k, i * dh, dh)?;
            let vi = tape.slice_cols(v, i * dh, dh)?;
            let kt = tape.transpose(ki);
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale(scores, inv);
            let weights = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(weights, vi)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, wo)
    }
}

/// `LayerNorm(m + h)` with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct ResidualLayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl ResidualLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(ResidualLayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![1, dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![1, dim]))?,
            dim,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, m: Var, h: Var) -> Result<Var> {
        let sum = tape.add(m, h)?;
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        tape.layer_norm(sum, gain, bias)
    }
}

/// Affine, relu, affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let a = self.hidden.forward(tape, store, x)?;
        let a = tape.relu(a);
        self.out.forward(tape, store, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Weighted sum with fixed random weights so every output element
    // gets a distinct gradient.
    fn project(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(y).to_vec(), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    fn zero_store(store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn lstm_cell_with_zero_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng).unwrap();
        zero_store(&mut store);
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape, &store);
        let x = tape.constant(random(vec![1, 3], &mut rng));
        let h0 = tape.constant(Tensor::zeros(vec![1, 2]));
        let c0 = tape.constant(Tensor::zeros(vec![1, 2]));
        let (h, c) = lstm_cell(&mut tape, &b, x, h0, c0).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(c).data(), &[0.0, 0.0]);

        let c1 = tape.constant(Tensor::row(vec![0.8, -2.0]));
        let (_, c) = lstm_cell(&mut tape, &b, x, h0, c1).unwrap();
        assert_eq!(tape.value(c).data(), &[0.4, -1.0]);

        let bad = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(lstm_cell(&mut tape, &b, x, bad, c0), Err(Error::Shape { .. })));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng).unwrap();
        assert_eq!(store.get(cell.bias).value.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_cell_gradcheck() {
        let check = GradCheck::default();
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let (d, hd) = (rng.random_range(1..4), rng.random_range(1..4));
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "c", d, hd, &mut rng).unwrap();
            let x = random(vec![1, d], &mut rng);
            let h0 = random(vec![1, hd], &mut rng);
            let c0 = random(vec![1, hd], &mut rng);
            let report = check
                .params(&store, |tape, store| {
                    let b = cell.bind(tape, store);
                    let (x, h0, c0) = (tape.constant(x.clone()), tape.constant(h0.clone()), tape.constant(c0.clone()));
                    let (h, c) = lstm_cell(tape, &b, x, h0, c0)?;
                    let hc = tape.concat_cols(&[h, c])?;
                    project(tape, hc, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);

            let mut store2 = ParamStore::new();
            let cell2 = LstmCell::new(&mut store2, "c", d, hd, &mut rng).unwrap();
            let report = check
                .inputs(&[x.clone(), h0.clone(), c0.clone()], |tape, v| {
                    let b = cell2.bind(tape, &store2);
                    let (h, c) = lstm_cell(tape, &b, v[0], v[1], v[2])?;
                    let hc = tape.concat_cols(&[h, c])?;
                    project(tape, hc, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
        }
    }

    #[test]
    fn bilstm_width_and_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, "enc", 5, 128, 2, &mut rng).unwrap();
        assert_eq!(enc.output_dim(), 256);
        for n in [1, 7] {
            let mut tape = Tape::new();
            let x = tape.constant(random(vec![n, 5], &mut rng));
            let y = enc.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), &[n, 256]);
            assert!(tape.value(y).is_finite());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![0, 5]));
        assert!(enc.forward(&mut tape, &store, x).is_err());
    }

    fn copy_param(store: &mut ParamStore, from: ParamId, to: ParamId) {
        let v = store.get(from).value.clone();
        store.get_mut(to).value = v;
    }

    #[test]
    fn reversing_input_swaps_directions_with_mirrored_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, hd, n) = (3, 4, 6);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, "enc", d, hd, 2, &mut rng).unwrap();
        for (l, (fwd, bwd)) in enc.layers.iter().enumerate() {
            copy_param(&mut store, fwd.w_recurrent, bwd.w_recurrent);
            copy_param(&mut store, fwd.bias, bwd.bias);
            copy_param(&mut store, fwd.w_input, bwd.w_input);
            if l > 0 {
                // The upper layer sees [fwd ‖ bwd] from below; on the reversed
                // sequence those halves trade places, so swap the row blocks.
                let w = store.get(fwd.w_input).value.clone();
                let cols = w.cols();
                let mut swapped = w.data()[hd * cols..].to_vec();
                swapped.extend_from_slice(&w.data()[..hd * cols]);
                store.get_mut(bwd.w_input).value = Tensor::from_vec(vec![2 * hd, cols], swapped).unwrap();
            }
        }
        let x = random(vec![n, d], &mut rng);
        let rev_rows: Vec<Vec<f64>> = (0..n).rev().map(|r| x.row_slice(r).to_vec()).collect();
        let xr = Tensor::from_rows(&rev_rows).unwrap();

        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let y = enc.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let y = run(x);
        let yr = run(xr);
        for r in 0..n {
            let a = y.row_slice(r);
            let b = yr.row_slice(n - 1 - r);
            for j in 0..hd {
                assert!((a[j] - b[hd + j]).abs() < 1e-12);
                assert!((a[hd + j] - b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_gradcheck() {
        let check = GradCheck::default();
        for trial in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
            let mut store = ParamStore::new();
            let enc = BiLstm::new(&mut store, "enc", 2, 2, 2, &mut rng).unwrap();
            let x = random(vec![3, 2], &mut rng);
            let report = check
                .params(&store, |tape, store| {
                    let v = tape.constant(x.clone());
                    let y = enc.forward(tape, store, v)?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
        }
    }

    fn attention(dim: usize, heads: usize, scale: AttentionScale, rng: &mut ChaCha8Rng) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, "att", dim, heads, scale, rng).unwrap();
        (store, att)
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, AttentionScale::ModelDim, &mut rng).is_err());
    }

    #[test]
    fn attention_single_row_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, att) = attention(4, 2, AttentionScale::ModelDim, &mut rng);
        let x = random(vec![1, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = att.forward(&mut tape, &store, xv).unwrap();
        let wv = &store.get(att.w_value).value;
        let wo = &store.get(att.w_out).value;
        let v: Vec<f64> = (0..4).map(|j| (0..4).map(|i| x.get(0, i) * wv.get(i, j)).sum()).collect();
        for j in 0..4 {
            let expect: f64 = (0..4).map(|i| v[i] * wo.get(i, j)).sum();
            assert!((tape.value(y).get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, att) = attention(8, 4, AttentionScale::ModelDim, &mut rng);
        let n = 7;
        let x = random(vec![n, 8], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let px = Tensor::from_rows(&perm.iter().map(|&r| x.row_slice(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let y = att.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let y = run(x);
        let py = run(px);
        for (i, &r) in perm.iter().enumerate() {
            for (a, b) in py.row_slice(i).iter().zip(y.row_slice(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_scales_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, att) = attention(8, 4, AttentionScale::ModelDim, &mut rng);
        assert_eq!(att.divisor(), 8f64.sqrt());
        let head = MultiHeadAttention { scale: AttentionScale::HeadDim, ..att.clone() };
        assert_eq!(head.divisor(), 2f64.sqrt());
        let x = random(vec![5, 8], &mut rng);
        let run = |m: &MultiHeadAttention| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = m.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        assert_ne!(run(&att), run(&head));
    }

    #[test]
    fn attention_gradcheck() {
        let check = GradCheck::default();
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
            let scale = if trial % 2 == 0 { AttentionScale::ModelDim } else { AttentionScale::HeadDim };
            let (store, att) = attention(4, 2, scale, &mut rng);
            let x = random(vec![3, 4], &mut rng);
            let report = check
                .params(&store, |tape, store| {
                    let v = tape.constant(x.clone());
                    let y = att.forward(tape, store, v)?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
            let report = check
                .inputs(&[x.clone()], |tape, v| {
                    let y = att.forward(tape, &store, v[0])?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
        }
    }

    #[test]
    fn residual_layernorm_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let ln = ResidualLayerNorm::new(&mut store, "ln", 6).unwrap();
        store.get_mut(ln.bias).value = random(vec![1, 6], &mut rng);
        let h = random(vec![4, 6], &mut rng);
        let mut neg = h.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);

        let mut tape = Tape::new();
        let (mv, hv) = (tape.constant(neg), tape.constant(h.clone()));
        let y = ln.forward(&mut tape, &store, mv, hv).unwrap();
        let bias = store.get(ln.bias).value.data().to_vec();
        for r in 0..4 {
            assert_eq!(tape.value(y).row_slice(r), bias.as_slice());
        }

        // Unit gain and zero bias expose the bare normalization.
        let mut store = ParamStore::new();
        let ln = ResidualLayerNorm::new(&mut store, "ln", 6).unwrap();
        let m = random(vec![4, 6], &mut rng);
        let mut tape = Tape::new();
        let (mv, hv) = (tape.constant(m), tape.constant(h));
        let y = ln.forward(&mut tape, &store, mv, hv).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row_slice(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 6]));
        let b = tape.constant(Tensor::zeros(vec![2, 5]));
        assert!(matches!(ln.forward(&mut tape, &store, a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn residual_layernorm_gradcheck() {
        let check = GradCheck::default();
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
            let mut store = ParamStore::new();
            let ln = ResidualLayerNorm::new(&mut store, "ln", 4).unwrap();
            store.get_mut(ln.gain).value = random(vec![1, 4], &mut rng);
            store.get_mut(ln.bias).value = random(vec![1, 4], &mut rng);
            let m = random(vec![3, 4], &mut rng);
            let h = random(vec![3, 4], &mut rng);
            let report = check
                .inputs(&[m.clone(), h.clone()], |tape, v| {
                    let y = ln.forward(tape, &store, v[0], v[1])?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
            let report = check
                .params(&store, |tape, store| {
                    let (mv, hv) = (tape.constant(m.clone()), tape.constant(h.clone()));
                    let y = ln.forward(tape, store, mv, hv)?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
        }
    }

    #[test]
    fn mlp_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", 8, 8, 5, &mut rng).unwrap();
        let x = random(vec![10, 8], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &store, v).unwrap();
        assert_eq!(tape.shape(y), &[10, 5]);

        zero_store(&mut store);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = mlp.forward(&mut tape, &store, v).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        let p = tape.softmax(y, 1).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn mlp_gradcheck() {
        let check = GradCheck::default();
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "mlp", 3, 4, 2, &mut rng).unwrap();
            // Nonzero biases keep relu inputs away from the kink.
            for p in store.iter_mut() {
                if p.name.ends_with("bias") {
                    p.value = random(p.value.shape().to_vec(), &mut rng);
                }
            }
            let x = random(vec![3, 3], &mut rng);
            let report = check
                .params(&store, |tape, store| {
                    let v = tape.constant(x.clone());
                    let y = mlp.forward(tape, store, v)?;
                    project(tape, y, trial)
                })
                .unwrap();
            assert!(report.passed(check.rtol), "trial {trial}: {:?}", report.worst);
        }
    }
}
