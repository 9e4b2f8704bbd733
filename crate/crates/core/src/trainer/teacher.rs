use crate::config::TeacherConfig;
use crate::data::{Dataset, Split};
use crate::diag::{evaluate, Evaluation};
use crate::diffcore::{BnMode, Graph, RngState, Stream};
use crate::error::{Error, Result};
use crate::losses::nll_loss;
use crate::models::{build_classifier, ClassifierNet, Parameterized};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training cross-entropy over the epoch's batches.
    pub loss: f64,
    pub test_acc: f64,
    /// Fraction of training-set logits with `|logit| > δ`.
    pub frac_over_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReport {
    pub epochs: Vec<TeacherEpoch>,
    pub test: Evaluation,
}

impl TeacherReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,test_acc,frac_logit_over_delta\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                e.epoch, e.lr, e.loss, e.test_acc, e.frac_over_bound
            ));
        }
        out
    }
}

/// Trains a classifier with momentum SGD on cross-entropy.
///
/// Batches are reshuffled every epoch; a trailing batch with fewer than two
/// samples is dropped because BatchNorm needs two.
pub fn pretrain_teacher(
    train: &Dataset,
    test: &Dataset,
    cfg: &TeacherConfig,
    logit_bound: f64,
    seed: u64,
) -> Result<(ClassifierNet, TeacherReport)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("teacher training set is empty".into()));
    }
    if train.split == Split::Test {
        return Err(Error::InvalidArgument("teacher must not be trained on the test split".into()));
    }
    cfg.schedule().validate()?;
    let mut init = RngState::new(seed, Stream::Init);
    let mut net = build_classifier(train.d_in(), &cfg.hidden, train.classes, &mut init)?;
    let mut opt = crate::optim::OptimState::sgd(cfg.lr, cfg.wd, cfg.mo);
    let schedule = cfg.schedule();
    let mut batches = RngState::new(seed, Stream::Batches);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.ep);

    for epoch in 0..cfg.ep {
        opt.lr = schedule.lr_at(epoch);
        batches.shuffle(&mut order);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.bs).filter(|c| c.len() >= 2) {
            let x = train.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let xv = g.constant(x);
            let out = net.forward(&mut g, &params, xv, BnMode::Train, false)?;
            let loss = nll_loss(&mut g, out.logits, &y)?;
            let grads = g.backward(loss).map_err(|e| Error::Aborted {
                context: format!("teacher epoch {}", epoch + 1),
                source: Box::new(e),
            })?;
            loss_sum += g.scalar(loss);
            n_batches += 1;
            let grads: Vec<_> = params.iter().map(|&p| grads.get(p)).collect();
            opt.step(net.parameters_mut(), &grads)?;
            net.update_running(&g, &out);
        }
        let logits = net.logits(&train.inputs, BnMode::Eval)?;
        let over = logits.data().iter().filter(|v| v.abs() > logit_bound).count();
        let test_acc = evaluate(&net, test)?.accuracy;
        let rec = TeacherEpoch {
            epoch: epoch + 1,
            lr: opt.lr,
            loss: loss_sum / n_batches.max(1) as f64,
            test_acc,
            frac_over_bound: over as f64 / logits.len() as f64,
        };
        log::info!(
            "teacher epoch {}: loss {:.4} test acc {:.4} |logit|>delta {:.4}",
            rec.epoch,
            rec.loss,
            rec.test_acc,
            rec.frac_over_bound
        );
        epochs.push(rec);
    }
    let test_eval = evaluate(&net, test)?;
    Ok((net, TeacherReport { epochs, test: test_eval }))
}
