//! Named parameters, their binding onto a graph, and the layer building
//! blocks shared by the encoders and decoders.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::BatchStats;
use crate::{Error, Graph, Result, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn { fan_in: usize },
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter and running-buffer declarations for a model.
#[derive(Clone, Debug, Default)]
pub struct SpecList {
    pub params: Vec<ParamSpec>,
    /// Batch-norm layers, whose running mean/variance live outside the
    /// trainable set.
    pub batch_norms: Vec<(String, usize)>,
}

impl SpecList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.params.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let fan_in = cin * k * k;
        self.push(format!("{name}.weight"), &[cout, cin, k, k], Init::FanIn { fan_in });
        if bias {
            self.push(format!("{name}.bias"), &[cout], Init::Zeros);
        }
    }

    pub fn bn(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), &[c], Init::Ones);
        self.push(format!("{name}.beta"), &[c], Init::Zeros);
        self.batch_norms.push((name.to_string(), c));
    }

    pub fn conv_bn(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.conv(&format!("{name}.conv"), cout, cin, k, false);
        self.bn(&format!("{name}.bn"), cout);
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) {
        self.push(format!("{name}.weight"), &[input, output], Init::FanIn { fan_in: input });
        self.push(format!("{name}.bias"), &[output], Init::Zeros);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gamma"), &[d], Init::Ones);
        self.push(format!("{name}.beta"), &[d], Init::Zeros);
    }

    pub fn extend(&mut self, other: SpecList) {
        self.params.extend(other.params);
        self.batch_norms.extend(other.batch_norms);
    }

    /// Total trainable scalars under names starting with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }
}

/// Parameter tensors by name, batch-norm running statistics, and
/// per-parameter access counters.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    access: BTreeMap<String, Cell<u64>>,
}

impl ParamStore {
    /// Draws every parameter from one seeded stream in declaration order.
    pub fn init(specs: &SpecList, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in &specs.params {
            let t = match spec.init {
                Init::FanIn { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                }
                Init::Uniform(bound) => Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound)),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
            };
            store.insert(spec.name.clone(), t);
        }
        for (name, c) in &specs.batch_norms {
            store.running.insert(name.clone(), (vec![0.0; *c], vec![1.0; *c]));
        }
        store
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.access.insert(name.clone(), Cell::new(0));
        self.params.insert(name, t);
    }

    pub fn insert_running(&mut self, name: String, mean: Vec<f64>, var: Vec<f64>) {
        self.running.insert(name, (mean, var));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn running(&self) -> impl Iterator<Item = (&String, &(Vec<f64>, Vec<f64>))> {
        self.running.iter()
    }

    pub fn running_stats(&self, name: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.running.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sum of access counts over parameters whose names start with `prefix`.
    pub fn accesses(&self, prefix: &str) -> u64 {
        self.access.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, c)| c.get()).sum()
    }

    pub fn reset_accesses(&self) {
        self.access.values().for_each(|c| c.set(0));
    }

    fn touch(&self, name: &str) {
        if let Some(c) = self.access.get(name) {
            c.set(c.get() + 1);
        }
    }

    /// Exponential moving update of running statistics.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        for (name, s) in stats {
            if let Some((mean, var)) = self.running.get_mut(name) {
                for c in 0..mean.len() {
                    mean[c] = (1.0 - BN_MOMENTUM) * mean[c] + BN_MOMENTUM * s.mean[c];
                    var[c] = (1.0 - BN_MOMENTUM) * var[c] + BN_MOMENTUM * s.var[c];
                }
            }
        }
    }

    /// Checks that names and shapes agree exactly with `specs`. Shape
    /// disagreements are reported before missing or surplus tensors.
    pub fn validate(&self, specs: &SpecList) -> Result<()> {
        for spec in &specs.params {
            if let Some(t) = self.params.get(&spec.name) {
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
            }
        }
        if let Some(spec) = specs.params.iter().find(|s| !self.params.contains_key(&s.name)) {
            return Err(Error::Checkpoint(format!("missing parameter {} of shape {:?}", spec.name, spec.shape)));
        }
        if self.params.len() != specs.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.params.len(),
                self.params.len()
            )));
        }
        for (name, c) in &specs.batch_norms {
            match self.running.get(name) {
                Some((m, v)) if m.len() == *c && v.len() == *c => {}
                _ => return Err(Error::Checkpoint(format!("running statistics for {name} missing or mis-sized"))),
            }
        }
        Ok(())
    }
}

/// Lazily records store parameters onto one graph.
pub struct Bound<'s> {
    store: &'s ParamStore,
    train: bool,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'s> Bound<'s> {
    /// `train` selects trainable leaves and batch statistics; otherwise
    /// parameters are constants and batch norm uses running estimates.
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Self {
            store,
            train,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn p(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
        self.store.touch(name);
        let v = if self.train { g.param(t.clone()) } else { g.input(t.clone()) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }
}

pub fn conv(g: &mut Graph, b: &mut Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.p(g, &format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let bias = if b.has(&bias_name) { Some(b.p(g, &bias_name)?) } else { None };
    Ok(g.conv2d(x, w, bias, stride, pad)?)
}

pub fn batch_norm(g: &mut Graph, b: &mut Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = b.p(g, &format!("{name}.gamma"))?;
    let beta = b.p(g, &format!("{name}.beta"))?;
    if b.train {
        let (y, s) = g.batch_norm(x, gamma, beta, BN_EPS)?;
        b.stats.push((name.to_string(), s));
        Ok(y)
    } else {
        let (mean, var) = b
            .store
            .running_stats(name)
            .ok_or_else(|| Error::Invalid(format!("missing running statistics {name}")))?;
        Ok(g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?)
    }
}

/// Bias-free convolution followed by batch norm (no activation).
pub fn conv_bn(g: &mut Graph, b: &mut Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = conv(g, b, &format!("{name}.conv"), x, stride, pad)?;
    batch_norm(g, b, &format!("{name}.bn"), y)
}

pub fn conv_bn_relu(g: &mut Graph, b: &mut Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = conv_bn(g, b, name, x, stride, pad)?;
    Ok(g.relu(y))
}

pub fn linear(g: &mut Graph, b: &mut Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.p(g, &format!("{name}.weight"))?;
    let bias = b.p(g, &format!("{name}.bias"))?;
    Ok(g.linear(x, w, Some(bias))?)
}

pub fn layer_norm(g: &mut Graph, b: &mut Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = b.p(g, &format!("{name}.gamma"))?;
    let beta = b.p(g, &format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

/// Projection weights for multi-head self-attention; each is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct MhsaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bias: Option<[Var; 4]>,
}

/// Multi-head self-attention over `x[B, N, C]`.
///
/// Returns the attended tokens `[B, N, C]` and the head-averaged attention
/// map `[B, N, N]`.
pub fn mhsa(g: &mut Graph, x: Var, w: &MhsaWeights, heads: usize) -> Result<(Var, Var)> {
    let b = w.bias.map(|b| b.map(Some)).unwrap_or([None; 4]);
    let q = g.linear(x, w.wq, b[0])?;
    let k = g.linear(x, w.wk, b[1])?;
    let v = g.linear(x, w.wv, b[2])?;
    let p = g.attn_probs(q, k, heads)?;
    let o = g.attn_apply(p, v, heads)?;
    let out = g.linear(o, w.wo, b[3])?;
    let map = g.mean_axis(p, 1)?;
    Ok((out, map))
}

pub fn mhsa_specs(s: &mut SpecList, name: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        s.linear(&format!("{name}.{part}"), dim, dim);
    }
}

fn bound_mhsa(g: &mut Graph, b: &mut Bound, name: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let mut get = |part: &str, what: &str| b.p(g, &format!("{name}.{part}.{what}"));
    let w = MhsaWeights {
        wq: get("q", "weight")?,
        wk: get("k", "weight")?,
        wv: get("v", "weight")?,
        wo: get("o", "weight")?,
        bias: Some([get("q", "bias")?, get("k", "bias")?, get("v", "bias")?, get("o", "bias")?]),
    };
    mhsa(g, x, &w, heads)
}

pub fn block_specs(s: &mut SpecList, name: &str, dim: usize, mlp_ratio: usize) {
    s.layer_norm(&format!("{name}.ln1"), dim);
    mhsa_specs(s, &format!("{name}.attn"), dim);
    s.layer_norm(&format!("{name}.ln2"), dim);
    s.linear(&format!("{name}.fc1"), dim, dim * mlp_ratio);
    s.linear(&format!("{name}.fc2"), dim * mlp_ratio, dim);
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
/// Returns the new tokens and this block's attention map.
pub fn transformer_block(g: &mut Graph, b: &mut Bound, name: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let h = layer_norm(g, b, &format!("{name}.ln1"), x)?;
    let (a, map) = bound_mhsa(g, b, &format!("{name}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{name}.ln2"), x)?;
    let h = linear(g, b, &format!("{name}.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{name}.fc2"), h)?;
    Ok((g.add(x, h)?, map))
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.permute(r, &[0, 2, 1])?)
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn tokens_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Invalid(format!("token count {:?} does not match a {h}x{w} map", s)));
    }
    let p = g.permute(x, &[0, 2, 1])?;
    Ok(g.reshape(p, &[s[0], s[2], h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check_args;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[1, 1, 4], 1));
        let w = [0, 1, 2, 3].map(|i| g.input(rand_tensor(&[4, 4], 10 + i)));
        let ws = MhsaWeights { wq: w[0], wk: w[1], wv: w[2], wo: w[3], bias: None };
        let (_, a) = mhsa(&mut g, x, &ws, 2).unwrap();
        assert_eq!(g.data(a), &[1.0]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[2, 5, 4], 2));
        let z = g.input(Tensor::zeros(&[4, 4]));
        let w = [2, 3].map(|i| g.input(rand_tensor(&[4, 4], i)));
        let ws = MhsaWeights { wq: z, wk: z, wv: w[0], wo: w[1], bias: None };
        let (_, a) = mhsa(&mut g, x, &ws, 2).unwrap();
        assert!(g.data(a).iter().all(|v| (v - 0.2).abs() < 1e-15));
        let bad = MhsaWeights { wq: z, wk: z, wv: z, wo: z, bias: None };
        assert!(mhsa(&mut g, x, &bad, 3).is_err());
    }

    #[test]
    fn mhsa_matches_per_head_loop() {
        let (n, c, heads) = (4, 6, 2);
        let d = c / heads;
        let x = rand_tensor(&[1, n, c], 3);
        let ws: Vec<Tensor> = (0..4).map(|i| rand_tensor(&[c, c], 20 + i)).collect();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv: Vec<Var> = ws.iter().map(|t| g.input(t.clone())).collect();
        let mw = MhsaWeights { wq: wv[0], wk: wv[1], wv: wv[2], wo: wv[3], bias: None };
        let (out, map) = mhsa(&mut g, xv, &mw, heads).unwrap();

        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..c).map(|j| (0..c).map(|t| x.at(&[0, i, t]) * w.at(&[t, j])).sum()).collect()).collect()
        };
        let (q, k, v) = (proj(&ws[0]), proj(&ws[1]), proj(&ws[2]));
        let mut concat = vec![vec![0.0; c]; n];
        let mut avg = vec![vec![0.0; n]; n];
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..n {
                    let p = (logits[j] - m).exp() / z;
                    avg[i][j] += p / heads as f64;
                    for t in 0..d {
                        concat[i][h * d + t] += p * v[j][h * d + t];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!((g.value(map).at(&[0, i, j]) - avg[i][j]).abs() < 1e-12);
            }
            for j in 0..c {
                let want: f64 = (0..c).map(|t| concat[i][t] * ws[3].at(&[t, j])).sum();
                assert!((g.value(out).at(&[0, i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[2, 7, 8], 4));
        let w = [0, 1, 2, 3].map(|i| g.input(rand_tensor(&[8, 8], 30 + i)));
        let ws = MhsaWeights { wq: w[0], wk: w[1], wv: w[2], wo: w[3], bias: None };
        let (_, a) = mhsa(&mut g, x, &ws, 4).unwrap();
        for row in g.data(a).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mhsa_gradients() {
        let args: Vec<Tensor> = (0..5).map(|i| rand_tensor(if i == 0 { &[1, 3, 4] } else { &[4, 4] }, 40 + i)).collect();
        let r = rand_tensor(&[1, 3, 4], 50);
        let err = grad_check_args::<_, Error>(
            |g, v| {
                let w = MhsaWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4], bias: None };
                let (o, _) = mhsa(g, v[0], &w, 2)?;
                let rv = g.input(r.clone());
                let m = g.mul(o, rv)?;
                Ok(g.sum(m))
            },
            &args,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn store_counts_accesses_and_validates() {
        let mut specs = SpecList::new();
        specs.conv("a.conv", 2, 1, 3, true);
        specs.bn("a.bn", 2);
        let store = ParamStore::init(&specs, 0);
        store.validate(&specs).unwrap();
        let mut g = Graph::new();
        let mut b = Bound::new(&store, true);
        let x = g.input(Tensor::ones(&[1, 1, 4, 4]));
        let y = conv(&mut g, &mut b, "a.conv", x, 1, 1).unwrap();
        let _ = conv(&mut g, &mut b, "a.conv", y, 1, 1);
        assert_eq!(store.accesses("a.conv"), 2);
        assert_eq!(store.accesses("a.bn"), 0);
        let mut other = SpecList::new();
        other.conv("a.conv", 3, 1, 3, true);
        other.bn("a.bn", 2);
        assert!(store.validate(&other).unwrap_err().to_string().contains("shape"));
    }
}
