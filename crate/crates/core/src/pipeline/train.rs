use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::fusion::{AmoModel, HeadKind, ModalitySpec, ModelConfig, BN_MOMENTUM};
use crate::rng::{derive_seed, rng_for};
use crate::survival::{class_weights, mtlr_nll_graph, BinGrid, MtlrTarget};
use crate::tensor::{AdamConfig, AdamState, Mode, Reduction, Tensor};

use super::config::RunConfig;
use super::cv::stratified_holdout;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Binary(Vec<u8>),
    Mtlr { targets: Vec<MtlrTarget>, grid: BinGrid },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Binary(y) => y.len(),
            Targets::Mtlr { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strata(&self) -> Vec<usize> {
        match self {
            Targets::Binary(y) => y.iter().map(|&l| usize::from(l)).collect(),
            Targets::Mtlr { targets, .. } => targets.iter().map(|t| usize::from(!t.censored)).collect(),
        }
    }

    fn head(&self) -> HeadKind {
        match self {
            Targets::Binary(_) => HeadKind::Binary,
            Targets::Mtlr { grid, .. } => HeadKind::Mtlr { bins: grid.num_bins() },
        }
    }
}

/// Preprocessed training rows: one matrix per modality plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldData {
    pub names: Vec<String>,
    pub inputs: Vec<Array2<f64>>,
    pub targets: Targets,
}

impl FoldData {
    fn tensors(&self, rows: &[usize]) -> Result<Vec<Tensor>> {
        self.inputs
            .iter()
            .map(|x| {
                let sub = x.select(Axis(0), rows);
                Tensor::matrix(sub.nrows(), sub.ncols(), sub.into_iter().collect())
            })
            .collect()
    }
}

pub fn to_tensors(inputs: &[Array2<f64>]) -> Result<Vec<Tensor>> {
    inputs.iter().map(|x| Tensor::matrix(x.nrows(), x.ncols(), x.iter().copied().collect())).collect()
}

pub struct TrainOutcome {
    pub model: AmoModel,
    /// Loss of the whole training split after each epoch, in train mode
    /// with dropout disabled.
    pub loss_trace: Vec<f64>,
    /// Eval-mode loss on the holdout after each epoch; empty without one.
    pub val_trace: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub class_weights: Option<(f64, f64)>,
}

struct LossSpec<'a> {
    targets: &'a Targets,
    weights: (f64, f64),
}

impl LossSpec<'_> {
    /// Forward pass plus loss over `rows`; returns the pass and the loss var.
    fn eval(
        &self,
        model: &AmoModel,
        data: &FoldData,
        rows: &[usize],
        mode: Mode,
        seed: u64,
    ) -> Result<(crate::fusion::ForwardPass, crate::tensor::Var)> {
        let mut pass = model.forward_batch(&data.tensors(rows)?, mode, seed)?;
        let loss = match self.targets {
            Targets::Binary(y) => {
                let labels: Vec<f64> = rows.iter().map(|&i| f64::from(y[i])).collect();
                let p = pass.graph.sigmoid(pass.output)?;
                pass.graph.weighted_bce(p, &labels, self.weights, Reduction::Mean)?
            }
            Targets::Mtlr { targets, .. } => {
                let t: Vec<MtlrTarget> = rows.iter().map(|&i| targets[i].clone()).collect();
                mtlr_nll_graph(&mut pass.graph, pass.output, &t, Reduction::Mean)?
            }
        };
        Ok((pass, loss))
    }
}

fn scalar(pass: &crate::fusion::ForwardPass, v: crate::tensor::Var) -> Result<f64> {
    let x = pass.graph.data(v)[0];
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::non_finite("training loss"))
    }
}

/// Split `rows` into shuffled batches; a trailing batch of one joins the
/// previous batch so batchnorm always sees at least two rows.
fn batches(rows: &[usize], size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(&mut rng_for(seed, &[]));
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("len > 1");
        out.last_mut().expect("len > 0").extend(last);
    }
    out
}

/// Mini-batch Adam for `config.epochs` epochs. A stratified
/// `config.val_fraction` holdout picks the epoch whose weights are returned;
/// without a holdout the final weights are kept.
pub fn train(config: &RunConfig, data: &FoldData, seed: u64) -> Result<TrainOutcome> {
    let n = data.targets.len();
    if data.inputs.len() != data.names.len() || data.inputs.iter().any(|x| x.nrows() != n) {
        return Err(Error::shape("fold inputs misaligned with targets"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two training rows"));
    }
    let model_config = ModelConfig {
        modalities: data.names.iter().zip(&data.inputs).map(|(name, x)| ModalitySpec { name: name.clone(), dim: x.ncols() }).collect(),
        latent_dim: config.latent_dim,
        heads: config.heads,
        dropout: config.dropout,
        head: data.targets.head(),
        fusion: config.fusion,
    };
    let mut model = AmoModel::new(model_config, derive_seed(seed, &[0x1417]))?;
    let all: Vec<usize> = (0..n).collect();
    let (fit_rows, val_rows) = if config.val_fraction > 0.0 {
        let (a, b) = stratified_holdout(&data.targets.strata(), config.val_fraction, derive_seed(seed, &[0x4A1]));
        if a.len() >= 2 && !b.is_empty() { (a, b) } else { (all.clone(), Vec::new()) }
    } else {
        (all.clone(), Vec::new())
    };
    let fit_weights = match &data.targets {
        Targets::Binary(y) => Some(class_weights(&fit_rows.iter().map(|&i| y[i]).collect::<Vec<_>>())?),
        Targets::Mtlr { .. } => None,
    };
    let spec = LossSpec { targets: &data.targets, weights: fit_weights.unwrap_or((1.0, 1.0)) };
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, model.params().tensors());

    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut val_trace = Vec::new();
    let mut best: Option<(f64, usize, AmoModel)> = None;
    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(seed, &[0xE90C, epoch as u64]);
        for (b, rows) in batches(&fit_rows, config.batch_size, epoch_seed).iter().enumerate() {
            let (mut pass, loss) = spec.eval(&model, data, rows, Mode::Train, derive_seed(epoch_seed, &[b as u64]))?;
            scalar(&pass, loss)?;
            let grads = pass.graph.backward(loss)?;
            let g = pass.param_grads(&grads);
            adam.step(model.params_mut().tensors_mut(), &g)?;
            model.update_running_stats(&pass.batch_stats, BN_MOMENTUM)?;
        }
        model.set_dropout(0.0)?;
        let (pass, loss) = spec.eval(&model, data, &fit_rows, Mode::Train, 0)?;
        model.set_dropout(config.dropout)?;
        loss_trace.push(scalar(&pass, loss)?);
        if !val_rows.is_empty() {
            let (pass, loss) = spec.eval(&model, data, &val_rows, Mode::Eval, 0)?;
            let v = scalar(&pass, loss)?;
            val_trace.push(v);
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, epoch, model.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs - 1),
    };
    Ok(TrainOutcome { model, loss_trace, val_trace, best_epoch, class_weights: fit_weights })
}

/// Eval-mode head outputs, row-major `[n, out]`.
pub fn predict(model: &AmoModel, inputs: &[Array2<f64>]) -> Result<Vec<f64>> {
    Ok(model.predict(&to_tensors(inputs)?)?.0)
}
