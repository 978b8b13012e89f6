//! Fully connected softmax networks with hand-derived backprop and R-operator.

use super::{Activation, LabeledExample};
use crate::numkit::{dot, Vector};

/// Offsets of one affine layer inside the flat parameter vector. Weights are
/// stored row-major as `d_out × d_in`, followed by the `d_out` biases.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerShape {
    pub d_in: usize,
    pub d_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    layers: Vec<LayerShape>,
    activation: Activation,
    num_params: usize,
}

struct Forward {
    /// `acts[l]` is the input of layer `l`; `acts[0]` is the example.
    acts: Vec<Vector>,
    /// Pre-activations of every layer; the last one holds the logits.
    zs: Vec<Vector>,
}

fn softmax(z: &[f64]) -> Vector {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vector = z.iter().map(|v| (v - m).exp()).collect();
    let mut s = 0.0;
    for v in &p {
        s += v;
    }
    for v in &mut p {
        *v /= s;
    }
    p
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z {
        s += (v - m).exp();
    }
    m + s.ln()
}

impl Network {
    pub fn new(dims: &[usize], activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            layers.push(LayerShape { d_in, d_out, w_off: off, b_off: off + d_in * d_out });
            off += d_in * d_out + d_out;
        }
        Self { layers, activation, num_params: off }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// σ'(z) given z and a = σ(z).
    fn act_d1(&self, z: f64, a: f64) -> f64 {
        match self.activation {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// σ''(z) given a = σ(z).
    fn act_d2(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu => 0.0,
        }
    }

    /// `W·x` for one layer, without the bias.
    fn weights_times(&self, params: &[f64], layer: &LayerShape, x: &[f64]) -> Vector {
        (0..layer.d_out)
            .map(|o| dot(&params[layer.w_off + o * layer.d_in..layer.w_off + (o + 1) * layer.d_in], x))
            .collect()
    }

    /// `W·x + b` for one layer.
    fn affine(&self, params: &[f64], layer: &LayerShape, x: &[f64]) -> Vector {
        let mut z = self.weights_times(params, layer, x);
        for (zo, b) in z.iter_mut().zip(&params[layer.b_off..layer.b_off + layer.d_out]) {
            *zo += b;
        }
        z
    }

    /// `Wᵀ·δ` for one layer.
    fn affine_transpose(&self, theta: &[f64], layer: &LayerShape, delta: &[f64]) -> Vector {
        let mut out = vec![0.0; layer.d_in];
        for (o, &d) in delta.iter().enumerate() {
            let row = &theta[layer.w_off + o * layer.d_in..layer.w_off + (o + 1) * layer.d_in];
            for (oi, &w) in out.iter_mut().zip(row) {
                *oi += w * d;
            }
        }
        out
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Forward {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut zs = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = self.affine(theta, layer, &acts[l]);
            if l + 1 < self.layers.len() {
                acts.push(z.iter().map(|&v| self.act(v)).collect());
            }
            zs.push(z);
        }
        Forward { acts, zs }
    }

    pub fn logits(&self, theta: &[f64], x: &[f64]) -> Vector {
        let mut f = self.forward(theta, x);
        f.zs.pop().expect("at least one layer")
    }

    pub fn example_loss(&self, theta: &[f64], ex: &LabeledExample) -> f64 {
        let z = self.logits(theta, &ex.features);
        log_sum_exp(&z) - z[ex.label]
    }

    /// `g += weight · ∇_θ l(θ; ex)`
    pub fn accumulate_grad(&self, theta: &[f64], ex: &LabeledExample, weight: f64, g: &mut [f64]) {
        let f = self.forward(theta, &ex.features);
        let last = self.layers.len() - 1;
        let mut delta = softmax(&f.zs[last]);
        delta[ex.label] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &f.acts[l];
            for (o, &d) in delta.iter().enumerate() {
                let wd = weight * d;
                let row = &mut g[layer.w_off + o * layer.d_in..layer.w_off + (o + 1) * layer.d_in];
                for (gi, &a) in row.iter_mut().zip(input) {
                    *gi += wd * a;
                }
                g[layer.b_off + o] += wd;
            }
            if l > 0 {
                let da = self.affine_transpose(theta, layer, &delta);
                let z_prev = &f.zs[l - 1];
                delta = da
                    .iter()
                    .zip(z_prev.iter().zip(input))
                    .map(|(&d, (&z, &a))| self.act_d1(z, a) * d)
                    .collect();
            }
        }
    }

    /// `out += weight · ∇²_θ l(θ; ex) · v` via the R-operator.
    pub fn accumulate_hvp(&self, theta: &[f64], ex: &LabeledExample, v: &[f64], weight: f64, out: &mut [f64]) {
        let f = self.forward(theta, &ex.features);
        let n_layers = self.layers.len();

        // R-forward: Rz_l = V_l a_l + vb_l + W_l Ra_l, Ra_{l+1} = σ'(z_l) ⊙ Rz_l.
        let mut r_acts: Vec<Vector> = Vec::with_capacity(n_layers);
        let mut r_zs: Vec<Vector> = Vec::with_capacity(n_layers);
        r_acts.push(vec![0.0; self.input_dim()]);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut rz = self.affine(v, layer, &f.acts[l]);
            if l > 0 {
                let wra = self.weights_times(theta, layer, &r_acts[l]);
                for (r, w) in rz.iter_mut().zip(&wra) {
                    *r += w;
                }
            }
            if l + 1 < n_layers {
                let a_next = &f.acts[l + 1];
                r_acts.push(
                    rz.iter()
                        .zip(f.zs[l].iter().zip(a_next))
                        .map(|(&r, (&z, &a))| self.act_d1(z, a) * r)
                        .collect(),
                );
            }
            r_zs.push(rz);
        }

        // Output layer: δ = p − e_y, Rδ = (diag p − p pᵀ) Rz.
        let last = n_layers - 1;
        let p = softmax(&f.zs[last]);
        let p_rz = dot(&p, &r_zs[last]);
        let mut r_delta: Vector = p.iter().zip(&r_zs[last]).map(|(&pk, &rk)| pk * (rk - p_rz)).collect();
        let mut delta = p;
        delta[ex.label] -= 1.0;

        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let input = &f.acts[l];
            let r_input = &r_acts[l];
            for o in 0..layer.d_out {
                let (d, rd) = (weight * delta[o], weight * r_delta[o]);
                let row = &mut out[layer.w_off + o * layer.d_in..layer.w_off + (o + 1) * layer.d_in];
                for (i, oi) in row.iter_mut().enumerate() {
                    *oi += rd * input[i] + d * r_input[i];
                }
                out[layer.b_off + o] += rd;
            }
            if l > 0 {
                let da = self.affine_transpose(theta, layer, &delta);
                let mut r_da = self.affine_transpose(v, layer, &delta);
                let w_rd = self.affine_transpose(theta, layer, &r_delta);
                for (x, y) in r_da.iter_mut().zip(&w_rd) {
                    *x += y;
                }
                let z_prev = &f.zs[l - 1];
                let rz_prev = &r_zs[l - 1];
                let mut next_delta = vec![0.0; layer.d_in];
                let mut next_r_delta = vec![0.0; layer.d_in];
                for i in 0..layer.d_in {
                    let a = input[i];
                    let d1 = self.act_d1(z_prev[i], a);
                    next_delta[i] = d1 * da[i];
                    next_r_delta[i] = self.act_d2(a) * rz_prev[i] * da[i] + d1 * r_da[i];
                }
                delta = next_delta;
                r_delta = next_r_delta;
            }
        }
    }
}
