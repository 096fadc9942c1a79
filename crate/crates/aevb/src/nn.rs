//! Named parameter collections and the small set of network building
//! blocks the models share: linear layers, ReLU MLP trunks with optional
//! dropout, and an LSTM cell.
//!
//! Parameters live as plain tensors in a [`ParamSet`] between steps. Each
//! training step binds them onto a fresh tape (as trainable leaves or as
//! constants, depending on which set the schedule updates), producing a
//! [`Bound`] that layers look their weights up in by name. This keeps the
//! optimizer and checkpoint code uniform over models: both only ever see
//! ordered (name, tensor) pairs.

use crate::error::Result;
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order used by the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every tensor onto `tape` — as gradient-tracked leaves when
    /// `trainable`, as constants otherwise — and returns the name → Var
    /// lookup the forward pass uses.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut vars = Vec::with_capacity(self.entries.len());
        for (name, value) in &self.entries {
            names.push(name.clone());
            vars.push(if trainable {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            });
        }
        Bound { names, vars }
    }

    /// A bitwise-sensitive digest of all parameter values, used by tests
    /// that assert a parameter set was untouched across a phase.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                acc = (acc ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.data() {
                acc = (acc ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc
    }
}

/// Tape-bound view of a [`ParamSet`]: the same names, now resolving to
/// variables on one tape.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .unwrap_or_else(|| panic!("no bound parameter named {name:?}"))
    }

    /// Variables in parameter-set order, aligned with [`ParamSet::iter`].
    pub fn vars_in_order(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Draws a (shape) tensor of N(0, 2/(fan_in+fan_out)) entries.
pub fn glorot_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::randn(shape, rng);
    for v in t.data_mut() {
        *v *= std;
    }
    t
}

/// An affine map x @ w + b with parameters registered under
/// `{name}.w` / `{name}.b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Linear {
        Linear { name: name.into(), fan_in, fan_out }
    }

    /// Registers weight (Glorot-Normal) and bias (zeros).
    pub fn init(&self, params: &mut ParamSet, rng: &mut SeededRng) {
        let w = glorot_normal(&[self.fan_in, self.fan_out], self.fan_in, self.fan_out, rng);
        params.insert(&format!("{}.w", self.name), w);
        params.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.fan_out]));
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = bound.var(&format!("{}.w", self.name));
        let b = bound.var(&format!("{}.b", self.name));
        let t = x.tape();
        t.add(x.matmul(w)?, b)
    }
}

/// Stack of ReLU hidden layers (dims = input width followed by each
/// hidden width), with inverted dropout after each activation during
/// training. Output heads hang off the last hidden activation.
#[derive(Clone, Debug)]
pub struct MlpTrunk {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl MlpTrunk {
    pub fn new(name: &str, dims: &[usize], dropout: f64) -> MlpTrunk {
        assert!(dims.len() >= 2, "trunk needs an input and at least one hidden width");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        MlpTrunk { layers, dropout }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut SeededRng) {
        for layer in &self.layers {
            layer.init(params, rng);
        }
    }

    pub fn apply<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.apply(bound, h)?.relu();
            if train && self.dropout > 0.0 {
                h = h.dropout(self.dropout, rng)?;
            }
        }
        Ok(h)
    }
}

/// One LSTM cell: gates = x @ wx + h @ wh + b, split into input, forget,
/// candidate, output; c' = f*c + i*g, h' = o*tanh(c').
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize) -> LstmCell {
        LstmCell { name: name.into(), in_dim, hidden }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut SeededRng) {
        let (i, h) = (self.in_dim, self.hidden);
        params.insert(
            &format!("{}.wx", self.name),
            glorot_normal(&[i, 4 * h], i, 4 * h, rng),
        );
        params.insert(
            &format!("{}.wh", self.name),
            glorot_normal(&[h, 4 * h], h, 4 * h, rng),
        );
        params.insert(&format!("{}.b", self.name), Tensor::zeros(&[4 * h]));
    }

    /// Advances the state one step. `x` is (B, in_dim); `h`/`c` are (B, H).
    pub fn step<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let t = x.tape();
        let wx = bound.var(&format!("{}.wx", self.name));
        let wh = bound.var(&format!("{}.wh", self.name));
        let b = bound.var(&format!("{}.b", self.name));
        let gates = t.add(t.add(x.matmul(wx)?, h.matmul(wh)?)?, b)?;
        let hsz = self.hidden;
        let i_g = gates.slice(1, 0, hsz)?.sigmoid();
        let f_g = gates.slice(1, hsz, hsz)?.sigmoid();
        let g_g = gates.slice(1, 2 * hsz, hsz)?.tanh();
        let o_g = gates.slice(1, 3 * hsz, hsz)?.sigmoid();
        let c_next = t.add(t.mul(f_g, c)?, t.mul(i_g, g_g)?)?;
        let h_next = t.mul(o_g, c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;

    #[test]
    fn param_set_preserves_order_and_rejects_duplicates() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::ones(&[3]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(p.total_elements(), 5);
        let result = std::panic::catch_unwind(move || {
            let mut p2 = p;
            p2.insert("a", Tensor::zeros(&[1]));
        });
        assert!(result.is_err());
    }

    #[test]
    fn bind_trainable_exposes_gradients_constants_do_not() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap());

        let tape = Tape::new();
        let bound = p.bind(&tape, true);
        let w = bound.var("w");
        let loss = (w * w).sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0, -2.0]);

        let tape2 = Tape::new();
        let bound2 = p.bind(&tape2, false);
        let w2 = bound2.var("w");
        // A graph of constants only has nothing to differentiate.
        assert!(tape2.backward((w2 * w2).sum_all()).is_err());
    }

    #[test]
    fn checksum_changes_with_any_value() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[4]));
        let before = p.checksum();
        p.get_mut("w").data_mut()[2] = 1e-300;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn glorot_normal_has_expected_spread() {
        let mut rng = SeededRng::new(11);
        let t = glorot_normal(&[200, 300], 200, 300, &mut rng);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / 500.0;
        assert!(mean.abs() < 0.001, "mean {mean}");
        assert!((var - expect).abs() < 0.0005, "var {var} vs {expect}");
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut p = ParamSet::new();
        let lin = Linear::new("l", 2, 2);
        let mut rng = SeededRng::new(1);
        lin.init(&mut p, &mut rng);
        *p.get_mut("l.w") = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        *p.get_mut("l.b") = Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = lin.apply(&bound, x).unwrap();
        assert_eq!(y.value().data(), &[4.5, 5.5]);
    }

    #[test]
    fn trunk_dropout_only_fires_in_training_mode() {
        let trunk = MlpTrunk::new("t", &[3, 16], 0.5);
        let mut p = ParamSet::new();
        let mut rng = SeededRng::new(7);
        trunk.init(&mut p, &mut rng);

        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let mut r1 = SeededRng::new(99);
        let eval1 = trunk.apply(&bound, x, false, &mut r1).unwrap().value();
        let mut r2 = SeededRng::new(100);
        let eval2 = trunk.apply(&bound, x, false, &mut r2).unwrap().value();
        // Eval mode ignores the rng entirely.
        assert_eq!(eval1.data(), eval2.data());

        let mut r3 = SeededRng::new(99);
        let train_out = trunk.apply(&bound, x, true, &mut r3).unwrap().value();
        let zeroed = train_out.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeroed > 0, "a 0.5-rate dropout left no zeros");
    }

    #[test]
    fn lstm_zero_weights_give_zero_hidden_state()
    {
        let cell = LstmCell::new("c", 3, 4);
        let mut p = ParamSet::new();
        let mut rng = SeededRng::new(2);
        cell.init(&mut p, &mut rng);
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let c = tape.constant(Tensor::zeros(&[2, 4]));
        let (h1, c1) = cell.step(&bound, x, h, c).unwrap();
        assert!(h1.value().data().iter().all(|&v| v == 0.0));
        assert!(c1.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_is_deterministic() {
        let cell = LstmCell::new("c", 2, 3);
        let mut p = ParamSet::new();
        let mut rng = SeededRng::new(5);
        cell.init(&mut p, &mut rng);
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![0.3, -0.8]).unwrap());
        let h = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.1, 0.0, -0.2]).unwrap());
        let c = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.5, -0.5, 0.0]).unwrap());
        let (h1, c1) = cell.step(&bound, x, h, c).unwrap();
        let (h2, c2) = cell.step(&bound, x, h, c).unwrap();
        assert_eq!(h1.value().data(), h2.value().data());
        assert_eq!(c1.value().data(), c2.value().data());
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let cell = LstmCell::new("c", 2, 3);
        let mut p = ParamSet::new();
        let mut rng = SeededRng::new(12);
        cell.init(&mut p, &mut rng);
        let x_val = Tensor::from_vec(vec![2, 2], vec![0.4, -0.6, 0.9, 0.1]).unwrap();
        let h_val = Tensor::from_vec(vec![2, 3], vec![0.2, -0.1, 0.3, 0.0, 0.5, -0.4]).unwrap();
        let c_val = Tensor::from_vec(vec![2, 3], vec![-0.3, 0.2, 0.1, 0.6, -0.2, 0.0]).unwrap();

        for target in ["c.wx", "c.wh", "c.b"] {
            let run = |params: &ParamSet| -> crate::Result<f64> {
                let tape = Tape::new();
                let bound = params.bind(&tape, true);
                let x = tape.constant(x_val.clone());
                let h = tape.constant(h_val.clone());
                let c = tape.constant(c_val.clone());
                let (h1, _) = cell.step(&bound, x, h, c)?;
                Ok((h1 * h1).sum_all().value().scalar_value())
            };
            let fd = {
                let base = p.clone();
                finite_difference_gradient(
                    |t: &Tensor| {
                        let mut probe = base.clone();
                        *probe.get_mut(target) = t.clone();
                        run(&probe)
                    },
                    p.get(target),
                    1e-6,
                )
                .unwrap()
            };
            let tape = Tape::new();
            let bound = p.bind(&tape, true);
            let x = tape.constant(x_val.clone());
            let h = tape.constant(h_val.clone());
            let c = tape.constant(c_val.clone());
            let (h1, _) = cell.step(&bound, x, h, c).unwrap();
            let grads = tape.backward((h1 * h1).sum_all()).unwrap();
            let g = grads.get_or_zeros(bound.var(target));
            let denom = fd
                .data()
                .iter()
                .map(|v| v.abs())
                .fold(1.0f64, f64::max);
            assert!(
                g.max_abs_diff(&fd) / denom < 1e-5,
                "{target}: autodiff vs finite differences"
            );
        }
    }
}
