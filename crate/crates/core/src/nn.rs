//! Small layers expressed on the autograd tape.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};

/// Scale of the uniform initializer.
pub const INIT_SCALE: f64 = 0.1;

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), (inp, out), INIT_SCALE, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), (1, out), INIT_SCALE, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Gated recurrent unit cell over row vectors.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_ir: ParamId,
    w_iz: ParamId,
    w_in: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_ir: ParamId,
    b_iz: ParamId,
    b_in: ParamId,
    b_hr: ParamId,
    b_hz: ParamId,
    b_hn: ParamId,
}

impl GruCell {
    /// Update-gate biases start at zero; everything else is uniform.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = |suffix: &str, rows: usize| {
            store.add_uniform(format!("{name}.{suffix}"), (rows, hidden), INIT_SCALE, rng)
        };
        let (w_ir, w_iz, w_in) = (w("w_ir", inp), w("w_iz", inp), w("w_in", inp));
        let (w_hr, w_hz, w_hn) = (w("w_hr", hidden), w("w_hz", hidden), w("w_hn", hidden));
        let b_ir = w("b_ir", 1);
        let b_in = w("b_in", 1);
        let b_hr = w("b_hr", 1);
        let b_hn = w("b_hn", 1);
        let b_iz = store.add_zeros(format!("{name}.b_iz"), (1, hidden));
        let b_hz = store.add_zeros(format!("{name}.b_hz"), (1, hidden));
        GruCell {
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_ir,
            b_iz,
            b_in,
            b_hr,
            b_hz,
            b_hn,
        }
    }

    fn affine(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(w);
        let b = g.param(b);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }

    /// One step: `r = σ(x W_ir + b_ir + h W_hr + b_hr)`,
    /// `z = σ(x W_iz + b_iz + h W_hz + b_hz)`,
    /// `n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let xr = Self::affine(g, x, self.w_ir, self.b_ir);
        let hr = Self::affine(g, h, self.w_hr, self.b_hr);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let xz = Self::affine(g, x, self.w_iz, self.b_iz);
        let hz = Self::affine(g, h, self.w_hz, self.b_hz);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let xn = Self::affine(g, x, self.w_in, self.b_in);
        let hn = Self::affine(g, h, self.w_hn, self.b_hn);
        let rhn = g.mul(r, hn);
        let n_pre = g.add(xn, rhn);
        let n = g.tanh(n_pre);
        let one_minus_z = g.one_minus(z);
        let a = g.mul(one_minus_z, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }
}

/// Learned gain and bias applied after row standardization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), (1, dim)),
            bias: store.add_zeros(format!("{name}.bias"), (1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul(n, gain);
        g.add(scaled, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, Mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_matches_longhand_scalar_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 1, 1, &mut rng);
        let get = |s: &ParamStore, n: &str| s.get(s.id(&format!("gru.{n}")).unwrap())[[0, 0]];
        let (x, h) = (0.7, -0.4);
        let sig = crate::autograd::sigmoid;
        let r = sig(x * get(&store, "w_ir") + get(&store, "b_ir") + h * get(&store, "w_hr") + get(&store, "b_hr"));
        let z = sig(x * get(&store, "w_iz") + h * get(&store, "w_hz"));
        let n = (x * get(&store, "w_in") + get(&store, "b_in") + r * (h * get(&store, "w_hn") + get(&store, "b_hn"))).tanh();
        let expected = (1.0 - z) * n + z * h;
        let mut g = Graph::new(&store);
        let xv = g.constant(Mat::from_elem((1, 1), x));
        let hv = g.constant(Mat::from_elem((1, 1), h));
        let out = cell.forward(&mut g, xv, hv);
        assert!((g.scalar(out) - expected).abs() < 1e-15);
    }

    #[test]
    fn gru_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        let x = store.add_uniform("x", (1, 3), 1.0, &mut rng);
        let h = store.add_uniform("h", (1, 4), 1.0, &mut rng);
        let report = check_gradients(&mut store, 1e-5, 50, |g| {
            let x = g.param(x);
            let h = g.param(h);
            let y = cell.forward(g, x, h);
            let y2 = g.mul(y, y);
            g.sum(y2)
        });
        assert!(report.passes(1e-6), "{report:?}");
    }
}
