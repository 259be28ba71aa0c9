//! Central-difference gradient verification in double precision.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{FusionMode, ModelConfig, TsfModel};
use crate::nn::{Graph, ParamStore, Var};
use crate::temporal::retention::rotary_theta;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is numerically zero compare in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel: f64,
    /// Offending coordinate, as `(input or parameter name, flat index)`.
    pub coord: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            max_rel: 0.0,
            coord: (String::new(), 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel || rel.is_nan() {
            self.max_rel = rel;
            self.coord = (what.to_string(), index);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} max rel {:.3e} over {} coords (worst {}[{}]: analytic {:.6e}, numeric {:.6e})",
            self.name, self.max_rel, self.checked, self.coord.0, self.coord.1, self.analytic, self.numeric
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` at the listed
/// coordinates of `x`.
pub fn grad_check(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::empty(name);
    let mut xp = x.to_vec();
    for i in coords {
        xp[i] = x[i] + eps;
        let hi = f(&xp)?;
        xp[i] = x[i] - eps;
        let lo = f(&xp)?;
        xp[i] = x[i];
        report.record(name, i, analytic[i], (hi - lo) / (2.0 * eps));
    }
    Ok(report)
}

type Build<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'a;

/// Checks every coordinate of every input of one graph operation. The
/// output is reduced with fixed random weights so all of it is exercised.
pub fn check_op(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<GradCheckReport> {
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new(store, true);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = build(&mut g, &vars)?;
        let s = if g.value(y).len() == 1 {
            y
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(0x5eed);
            let w = Tensor::randn(g.shape(y), 1.0, &mut r);
            g.weighted_sum(y, w)?
        };
        let value = g.value(s).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(s)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport::empty(name);
    for (k, x) in inputs.iter().enumerate() {
        let label = format!("input{k}");
        let sub = grad_check(&label, x.data(), analytic[k].data(), 0..x.len(), DEFAULT_EPS, |p| {
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::from_vec(x.shape(), p.to_vec())?;
            Ok(eval(&xs, false)?.0)
        })?;
        report.checked += sub.checked;
        if sub.max_rel > report.max_rel || sub.max_rel.is_nan() {
            report.max_rel = sub.max_rel;
            report.coord = sub.coord;
            report.analytic = sub.analytic;
            report.numeric = sub.numeric;
        }
    }
    Ok(report)
}

/// Gradient checks for each differentiable operation on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let empty = ParamStore::new();
    let mut bn_store = ParamStore::new();
    let rm = bn_store.register("rm", Tensor::zeros(&[3]), false);
    let rv = bn_store.register("rv", Tensor::ones(&[3]), false);
    let theta = rotary_theta(4, 10000.0);
    let mut out = Vec::new();
    let mut run = |name: &str, store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, build: &Build<'_>| -> Result<()> {
        out.push(check_op(name, store, &inputs, build)?);
        Ok(())
    };

    run("add", &empty, vec![r(&[2, 3]), r(&[2, 3])], &|g, v| g.add(v[0], v[1]))?;
    run("sub", &empty, vec![r(&[2, 3]), r(&[2, 3])], &|g, v| g.sub(v[0], v[1]))?;
    run("mul", &empty, vec![r(&[2, 3]), r(&[2, 3])], &|g, v| g.mul(v[0], v[1]))?;
    run("scale", &empty, vec![r(&[2, 3])], &|g, v| Ok(g.scale(v[0], -1.7)))?;
    run("add_broadcast", &empty, vec![r(&[2, 3, 4]), r(&[3, 4])], &|g, v| g.add_broadcast(v[0], v[1]))?;
    run("linear", &empty, vec![r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], &|g, v| g.linear(v[0], v[1], Some(v[2])))?;
    run("bmm", &empty, vec![r(&[2, 3, 4]), r(&[2, 4, 5])], &|g, v| g.bmm(v[0], v[1], false))?;
    run("bmm_transposed", &empty, vec![r(&[2, 3, 4]), r(&[2, 5, 4])], &|g, v| g.bmm(v[0], v[1], true))?;
    run("permute", &empty, vec![r(&[2, 3, 4])], &|g, v| g.permute(v[0], &[1, 2, 0]))?;
    run("reshape", &empty, vec![r(&[2, 3, 4])], &|g, v| g.reshape(v[0], &[6, 4]))?;
    run("gelu", &empty, vec![r(&[3, 5])], &|g, v| Ok(g.gelu(v[0])))?;
    run("swish", &empty, vec![r(&[3, 5])], &|g, v| Ok(g.swish(v[0])))?;
    run("softmax", &empty, vec![r(&[3, 5])], &|g, v| Ok(g.softmax(v[0])))?;
    run("layer_norm", &empty, vec![r(&[2, 3, 6]), r(&[6]), r(&[6])], &|g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    })?;
    run("batch_norm", &bn_store, vec![r(&[4, 3, 2, 2]), r(&[3]), r(&[3])], &|g, v| {
        g.batch_norm(v[0], v[1], v[2], rm, rv, 1e-5, 0.1)
    })?;
    run("conv2d", &empty, vec![r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3]), r(&[4])], &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })?;
    run("rotary", &empty, vec![r(&[2, 5, 4])], &|g, v| g.rotary(v[0], &theta))?;
    run("retention", &empty, vec![r(&[2, 6, 4]), r(&[2, 6, 4]), r(&[2, 6, 4])], &|g, v| {
        g.retention(v[0], v[1], v[2], &[0.96875, 0.984375])
    })?;
    run("mean_tokens", &empty, vec![r(&[2, 5, 3])], &|g, v| g.mean_tokens(v[0]))?;
    run("cross_entropy", &empty, vec![r(&[4, 3])], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    Ok(out)
}

/// Checks the training loss of the tiny model in `mode` against central
/// differences on the inputs and on up to `per_param` sampled coordinates
/// of every trainable array. Batch norm runs on batch statistics.
pub fn model_check(mode: FusionMode, n_classes: usize, seed: u64, per_param: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TsfModel::<f64>::new(ModelConfig::tiny(n_classes), mode, &mut rng)?;
    let s = model.config.image_size();
    let batch = 3;
    let diff = Tensor::<f64>::randn(&[batch, 3, s, s], 0.5, &mut rng);
    let onset = Tensor::<f64>::randn(&[batch, 3, s, s], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % n_classes).collect();

    let loss = |m: &TsfModel<f64>, d: &Tensor<f64>, o: &Tensor<f64>| -> Result<f64> {
        let mut g = m.graph(true);
        let (dv, ov) = (g.input(d.clone()), g.input(o.clone()));
        let out = m.forward(&mut g, dv, ov, mode)?;
        let l = g.cross_entropy(out.logits, &labels)?;
        Ok(g.value(l).data()[0])
    };

    let (param_grads, d_grad, o_grad) = {
        let mut g = model.graph(true);
        let (dv, ov) = (g.input(diff.clone()), g.input(onset.clone()));
        let out = model.forward(&mut g, dv, ov, mode)?;
        let l = g.cross_entropy(out.logits, &labels)?;
        let grads = g.backward(l)?;
        let zeros = |t: &Tensor<f64>| Tensor::zeros(t.shape());
        (
            grads.params(&g),
            grads.get(dv).cloned().unwrap_or_else(|| zeros(&diff)),
            grads.get(ov).cloned().unwrap_or_else(|| zeros(&onset)),
        )
    };

    let mut report = GradCheckReport::empty(&format!("model[{mode}]"));
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= per_param {
            (0..len).collect()
        } else {
            sample(rng, len, per_param).into_vec()
        }
    };

    for (name, x, a) in [("diff", &diff, &d_grad), ("onset", &onset, &o_grad)] {
        for i in pick(x.len(), &mut rng) {
            let mut xp = x.clone();
            xp.data_mut()[i] += DEFAULT_EPS;
            let mut xm = x.clone();
            xm.data_mut()[i] -= DEFAULT_EPS;
            let (hi, lo) = if name == "diff" {
                (loss(&model, &xp, &onset)?, loss(&model, &xm, &onset)?)
            } else {
                (loss(&model, &diff, &xp)?, loss(&model, &diff, &xm)?)
            };
            report.record(name, i, a.data()[i], (hi - lo) / (2.0 * DEFAULT_EPS));
        }
    }

    let ids: Vec<_> = model.store.trainable_ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let analytic = param_grads[id.index()].clone();
        let len = model.store.get(id).len();
        for i in pick(len, &mut rng) {
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + DEFAULT_EPS;
            let hi = loss(&model, &diff, &onset)?;
            model.store.get_mut(id).data_mut()[i] = orig - DEFAULT_EPS;
            let lo = loss(&model, &diff, &onset)?;
            model.store.get_mut(id).data_mut()[i] = orig;
            report.record(&name, i, a, (hi - lo) / (2.0 * DEFAULT_EPS));
        }
    }
    Ok(report)
}

/// The full verification suite: every operation, then the tiny model in
/// every fusion mode.
pub fn full_suite(seed: u64, per_param: usize) -> Result<Vec<GradCheckReport>> {
    let mut reports = op_suite(seed)?;
    for mode in FusionMode::ALL {
        reports.push(model_check(mode, 3, seed, per_param)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact_to_round_off() {
        let a = [1.5, -2.0, 0.25];
        let r = grad_check("linear", &[0.3, 0.1, -0.7], &a, 0..3, 1e-3, |x| {
            Ok(x.iter().zip(&a).map(|(x, a)| x * a).sum())
        })
        .unwrap();
        assert!(r.max_rel < 1e-10, "{r}");
    }

    #[test]
    fn swish_slope_at_zero_is_one_half() {
        let r = grad_check("swish", &[0.0], &[0.5], [0], 1e-5, |x| Ok(crate::nn::graph::swish(x[0]))).unwrap();
        assert!(r.max_rel <= 1e-8, "{r}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let r = grad_check("square", &[2.0], &[3.0], [0], 1e-5, |x| Ok(x[0] * x[0])).unwrap();
        assert!(r.max_rel > 0.2);
    }

    #[test]
    fn every_op_passes() {
        for r in op_suite(1).unwrap() {
            assert!(r.passes(1e-6), "{r}");
        }
    }
}
