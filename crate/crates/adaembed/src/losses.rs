//! The four training signals and their adversarial composition.
//!
//! * supervised cross-entropy on pooled labeled batches,
//! * masked pseudo-label cross-entropy on the unlabeled batch,
//! * instance-contrastive InfoNCE against the memory queue with
//!   same-pseudo-label negatives filtered out,
//! * prediction entropy on unlabeled samples, driven adversarially through a
//!   gradient reversal layer so one backward pass descends entropy for the
//!   encoder while ascending it for the prototype matrix.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelState, ModelVars};
use crate::pseudo::PseudoDecision;
use crate::queue::QueueSnapshot;
use crate::tensor::Tensor;

/// Loss weights and the contrastive/entropy knobs.
#[derive(Clone, Debug)]
pub struct LossWeights {
    /// Entropy weight (lambda).
    pub lambda: f64,
    /// Pseudo-label loss weight (lambda_t).
    pub lambda_t: f64,
    /// Contrastive loss weight (lambda_c).
    pub lambda_c: f64,
    pub contrastive_temperature: f64,
    /// Denominator = negatives only (requires a nonempty negative set) instead
    /// of the standard form that includes the positive pair.
    pub paper_literal_infonce: bool,
    /// Normalize the pseudo-label loss over selected samples instead of the
    /// full batch.
    pub mean_over_selected: bool,
}

/// Which loss terms participate in the objective. Turning a term off removes
/// it from the tape entirely (a structural ablation, not a zero weight).
#[derive(Clone, Copy, Debug)]
pub struct LossToggles {
    pub pseudo: bool,
    pub contrastive: bool,
    pub entropy: bool,
}

impl LossToggles {
    pub fn all_on() -> Self {
        LossToggles { pseudo: true, contrastive: true, entropy: true }
    }

    pub fn all_off() -> Self {
        LossToggles { pseudo: false, contrastive: false, entropy: false }
    }
}

/// How the entropy term enters the total loss.
///
/// `GrlFold` is the training configuration: features pass through a gradient
/// reversal layer before the classifier and the term enters with weight
/// `-lambda`, so the prototype matrix ascends entropy while the encoder
/// descends it. The two `Plain` modes build the per-parameter-group scalar
/// objectives directly (no reversal) and exist for finite-difference oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyMode {
    GrlFold,
    /// `+lambda * H`, no reversal: the encoder-group objective.
    PlainPlus,
    /// `-lambda * H`, no reversal: the classifier-group objective.
    PlainMinus,
}

/// Constant inputs the contrastive term needs besides the live features.
#[derive(Clone, Debug)]
pub struct ContrastiveInputs {
    /// Unit-norm momentum features of the same samples (the positives).
    pub momentum_features: Tensor,
    pub snapshot: QueueSnapshot,
    /// Queue entry ids of this batch (each sample's own entry is excluded
    /// from its negative set).
    pub own_entry_ids: Vec<u64>,
    /// Argmax of each sample's stored momentum prediction; queue entries with
    /// the same label are filtered from that sample's negatives.
    pub anchor_labels: Vec<usize>,
}

/// Unlabeled-batch inputs for one step.
#[derive(Clone, Debug)]
pub struct UnlabeledStep {
    pub inputs_aug: Tensor,
    pub decision: PseudoDecision,
    pub contrastive: Option<ContrastiveInputs>,
}

/// All constant inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// Augmented source and labeled-target inputs pooled row-wise.
    pub labeled_inputs: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled: Option<UnlabeledStep>,
}

/// Scalar component values of one step, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_c: f64,
    pub entropy_h: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        self.loss_s.is_finite()
            && self.loss_t.is_finite()
            && self.loss_c.is_finite()
            && self.entropy_h.is_finite()
    }
}

/// Mean cross-entropy of the pooled labeled predictions against their labels.
pub fn supervised_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels, None)
}

/// Masked pseudo-label cross-entropy, averaged over the full unlabeled batch
/// so the loss scales with the selection rate. With `mean_over_selected` the
/// average runs over selected samples instead.
pub fn target_pseudo_loss(
    g: &mut Graph,
    logits_u: Var,
    decision: &PseudoDecision,
    mean_over_selected: bool,
) -> Result<Var> {
    let n = decision.mask.len();
    let mut weights = decision.weights();
    let selected = decision.selected_count();
    if mean_over_selected && selected > 0 {
        let boost = n as f64 / selected as f64;
        weights.iter_mut().for_each(|w| *w *= boost);
    }
    g.cross_entropy(logits_u, &decision.labels_or_zero(), Some(&weights))
}

/// Instance-contrastive InfoNCE over the unlabeled batch.
///
/// Per sample: positive similarity is `cos(f_aug, f_momentum)`; negatives are
/// queue entries whose stored argmax differs from the sample's own and which
/// are not the sample's own entry. Computed via log-sum-exp; gradients flow
/// only through the augmented features.
pub fn contrastive_loss(
    g: &mut Graph,
    features_aug: Var,
    inputs: &ContrastiveInputs,
    temperature: f64,
    paper_literal: bool,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "contrastive temperature must be positive, got {temperature}"
        )));
    }
    let b = g.shape(features_aug)[0];
    if inputs.momentum_features.rows() != b
        || inputs.own_entry_ids.len() != b
        || inputs.anchor_labels.len() != b
    {
        return Err(Error::Dimension(format!(
            "contrastive_loss: batch size {b} does not match momentum inputs"
        )));
    }
    let snap = &inputs.snapshot;
    let m = snap.len();

    if m == 0 {
        if paper_literal {
            return Err(Error::Contract(
                "paper-literal InfoNCE needs a nonempty negative set; the queue is empty".into(),
            ));
        }
        // No negatives anywhere: -log(1) = 0 for every sample, with zero
        // gradient, which the standard form also yields in the limit.
        return g.constant(vec![0.0], vec![]);
    }

    let fhat = g.l2_normalize_rows(features_aug)?;
    let positives = g.leaf(&inputs.momentum_features);
    let s_pos = g.rowwise_dot(fhat, positives)?;
    let s_pos = g.scale(s_pos, 1.0 / temperature);

    // similarity against the whole queue in one matmul with a constant
    let d = snap.feature_dim;
    let mut qt = vec![0.0; d * m];
    for i in 0..m {
        for (k, &v) in snap.features.row(i).iter().enumerate() {
            qt[k * m + i] = v;
        }
    }
    let qt = g.constant(qt, vec![d, m])?;
    let sims = g.linear(fhat, qt, None)?;
    let sims = g.scale(sims, 1.0 / temperature);

    let queue_labels = snap.argmax_labels();
    let all = g.prepend_col(s_pos, sims)?;
    let mut mask = vec![false; b * (m + 1)];
    for j in 0..b {
        mask[j * (m + 1)] = !paper_literal; // the positive term
        let mut any_negative = false;
        for i in 0..m {
            let keep = queue_labels[i] != inputs.anchor_labels[j]
                && snap.entry_ids[i] != inputs.own_entry_ids[j];
            mask[j * (m + 1) + 1 + i] = keep;
            any_negative |= keep;
        }
        if paper_literal && !any_negative {
            return Err(Error::Contract(format!(
                "paper-literal InfoNCE: sample {j} has an empty negative set"
            )));
        }
    }
    let lse = g.masked_row_lse(all, &mask)?;
    let per_sample = g.sub(lse, s_pos)?;
    let total = g.sum_all(per_sample);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Mean Shannon entropy of the given probability rows.
pub fn entropy_loss(g: &mut Graph, probs: Var) -> Result<Var> {
    g.entropy_rows_mean(probs)
}

/// Builds the full per-step objective on `g` and returns the total plus the
/// unweighted component values.
///
/// The encoder group minimizes `L_s + lt*L_t + lc*L_c + lambda*H` while the
/// classifier maximizes the entropy term; in `GrlFold` mode both are realized
/// in a single backward pass by reversing gradients between the encoder
/// output and the classifier and folding the sign into the term weight.
pub fn build_objective(
    g: &mut Graph,
    state: &ModelState,
    vars: &ModelVars,
    batch: &StepBatch,
    weights: &LossWeights,
    toggles: LossToggles,
    entropy_mode: EntropyMode,
) -> Result<(Var, LossBundle)> {
    let mut bundle = LossBundle::default();

    let xl = g.leaf(&batch.labeled_inputs);
    let f_lab = state.encode_graph(g, vars, xl)?;
    let (z_lab, _) = state.classify_graph(g, vars, f_lab)?;
    let loss_s = supervised_loss(g, z_lab, &batch.labels)?;
    bundle.loss_s = g.scalar_value(loss_s);
    let mut total = loss_s;

    if let Some(u) = &batch.unlabeled {
        let xu = g.leaf(&u.inputs_aug);
        let f_u = state.encode_graph(g, vars, xu)?;

        if toggles.pseudo {
            let (z_u, _) = state.classify_graph(g, vars, f_u)?;
            let lt = target_pseudo_loss(g, z_u, &u.decision, weights.mean_over_selected)?;
            bundle.loss_t = g.scalar_value(lt);
            let weighted = g.scale(lt, weights.lambda_t);
            total = g.add(total, weighted)?;
        }

        if toggles.contrastive {
            let ci = u.contrastive.as_ref().ok_or_else(|| {
                Error::Contract("contrastive toggle on but no contrastive inputs".into())
            })?;
            let lc = contrastive_loss(
                g,
                f_u,
                ci,
                weights.contrastive_temperature,
                weights.paper_literal_infonce,
            )?;
            bundle.loss_c = g.scalar_value(lc);
            let weighted = g.scale(lc, weights.lambda_c);
            total = g.add(total, weighted)?;
        }

        if toggles.entropy {
            let f_for_h = match entropy_mode {
                EntropyMode::GrlFold => g.grad_reverse(f_u, 1.0)?,
                EntropyMode::PlainPlus | EntropyMode::PlainMinus => f_u,
            };
            let (_, p_u) = state.classify_graph(g, vars, f_for_h)?;
            let h = entropy_loss(g, p_u)?;
            bundle.entropy_h = g.scalar_value(h);
            let coeff = match entropy_mode {
                EntropyMode::GrlFold | EntropyMode::PlainMinus => -weights.lambda,
                EntropyMode::PlainPlus => weights.lambda,
            };
            let weighted = g.scale(h, coeff);
            total = g.add(total, weighted)?;
        }
    }

    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::PseudoDecision;
    use crate::queue::MemoryQueue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_leaf(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.leaf(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn supervised_uniform_and_perfect() {
        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &[vec![0.0; 4], vec![0.0; 4]]);
        let l = supervised_loss(&mut g, z, &[1, 3]).unwrap();
        assert!((g.scalar_value(l) - 4.0_f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &[vec![60.0, 0.0], vec![0.0, 60.0]]);
        let l = supervised_loss(&mut g, z, &[0, 1]).unwrap();
        assert!(g.scalar_value(l) < 1e-12);
    }

    #[test]
    fn supervised_pooling_weights_each_sample_equally() {
        // pooled batch of 16: the mean equals the hand-computed per-sample mean
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..16 {
            rows.push(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            labels.push(i % 2);
        }
        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &rows);
        let l = supervised_loss(&mut g, z, &labels).unwrap();
        let mut manual = 0.0;
        for (row, &y) in rows.iter().zip(&labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            manual += lse - row[y];
        }
        manual /= 16.0;
        assert!((g.scalar_value(l) - manual).abs() < 1e-12);
    }

    #[test]
    fn target_loss_examples() {
        // all mask false -> 0 with zero gradient
        let dec = PseudoDecision::disabled(2, 2);
        let mut g = Graph::new();
        let z = g.leaf(
            &Tensor::from_rows(&[vec![1.0, -1.0], vec![0.2, 0.8]]).unwrap().with_requires_grad(),
        );
        let l = target_pseudo_loss(&mut g, z, &dec, false).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(z).iter().all(|&v| v == 0.0));

        // one masked sample with a perfect prediction
        let dec = PseudoDecision {
            mask: vec![true, false],
            pseudo_labels: vec![Some(0), None],
            per_class_candidate_count: vec![1, 0],
        };
        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &[vec![60.0, 0.0], vec![0.0, 0.0]]);
        let l = target_pseudo_loss(&mut g, z, &dec, false).unwrap();
        assert!(g.scalar_value(l) < 1e-12);

        // one masked sample with a uniform prediction over 2 classes: ln(2)/2
        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &[vec![0.0, 0.0], vec![5.0, -5.0]]);
        let l = target_pseudo_loss(&mut g, z, &dec, false).unwrap();
        assert!((g.scalar_value(l) - 2.0_f64.ln() / 2.0).abs() < 1e-12);

        // mean over selected instead of the full batch
        let mut g = Graph::new();
        let z = logits_leaf(&mut g, &[vec![0.0, 0.0], vec![5.0, -5.0]]);
        let l = target_pseudo_loss(&mut g, z, &dec, true).unwrap();
        assert!((g.scalar_value(l) - 2.0_f64.ln()).abs() < 1e-12);
    }

    fn contrastive_setup(
        queue_feats: &[Vec<f64>],
        queue_probs: &[Vec<f64>],
        momentum: &[Vec<f64>],
        own_ids: Vec<u64>,
        anchor_labels: Vec<usize>,
    ) -> ContrastiveInputs {
        let c = queue_probs.first().map_or(2, Vec::len);
        let d = momentum[0].len();
        let mut q = MemoryQueue::new(1024, d, c).unwrap();
        if !queue_feats.is_empty() {
            q.enqueue(
                &Tensor::from_rows(queue_feats).unwrap(),
                &Tensor::from_rows(queue_probs).unwrap(),
            )
            .unwrap();
        }
        ContrastiveInputs {
            momentum_features: Tensor::from_rows(momentum).unwrap(),
            snapshot: q.snapshot(),
            own_entry_ids: own_ids,
            anchor_labels,
        }
    }

    #[test]
    fn contrastive_perfect_positive_single_negative() {
        // anchor == positive (sim 1), one negative with sim 0, T = 0.05:
        // loss = ln(1 + e^{-20})
        let inputs = contrastive_setup(
            &[vec![0.0, 1.0]],
            &[vec![0.1, 0.9]],
            &[vec![1.0, 0.0]],
            vec![999],
            vec![0],
        );
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap().with_requires_grad());
        let l = contrastive_loss(&mut g, f, &inputs, 0.05, false).unwrap();
        let expect = (-20.0_f64).exp().ln_1p();
        assert!((g.scalar_value(l) - expect).abs() < 1e-12, "{}", g.scalar_value(l));
    }

    #[test]
    fn contrastive_no_negatives_is_zero() {
        // every queue entry shares the anchor's pseudo-label -> empty negative set
        let inputs = contrastive_setup(
            &[vec![0.0, 1.0], vec![1.0, 1.0]],
            &[vec![0.9, 0.1], vec![0.8, 0.2]],
            &[vec![1.0, 0.0]],
            vec![999],
            vec![0],
        );
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap().with_requires_grad());
        let l = contrastive_loss(&mut g, f, &inputs, 0.05, false).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // the paper-literal form rejects the same situation
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap().with_requires_grad());
        assert!(contrastive_loss(&mut g, f, &inputs, 0.05, true).is_err());
    }

    #[test]
    fn contrastive_own_entry_is_excluded() {
        // one queue entry is the anchor itself with a DIFFERENT stored label;
        // dropping it by id leaves no negatives -> loss 0
        let inputs = contrastive_setup(
            &[vec![1.0, 0.0]],
            &[vec![0.2, 0.8]], // stored argmax = 1
            &[vec![1.0, 0.0]],
            vec![0],  // own id matches the queue entry
            vec![0],  // anchor label differs from stored argmax
        );
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap().with_requires_grad());
        let l = contrastive_loss(&mut g, f, &inputs, 0.05, false).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn contrastive_decreases_when_temperature_doubles() {
        // positive similarity above every negative: doubling T lowers the loss
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let d = 4;
            let mk = |rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let anchor = mk(&mut rng);
            // positive = anchor (sim 1); negatives random unit vectors (sim < 1)
            let negs: Vec<Vec<f64>> = (0..6).map(|_| mk(&mut rng)).collect();
            let probs: Vec<Vec<f64>> = (0..6).map(|_| vec![0.1, 0.9]).collect();
            let inputs =
                contrastive_setup(&negs, &probs, &[anchor.clone()], vec![999], vec![0]);
            let eval = |t: f64| {
                let mut g = Graph::new();
                let f = g.leaf(&Tensor::from_rows(&[anchor.clone()]).unwrap());
                let l = contrastive_loss(&mut g, f, &inputs, t, false).unwrap();
                g.scalar_value(l)
            };
            let (l1, l2) = (eval(0.1), eval(0.2));
            assert!(l2 < l1, "T doubling should decrease loss: {l1} -> {l2}");
        }
    }

    #[test]
    fn contrastive_gradients_flow_only_through_live_features() {
        let inputs = contrastive_setup(
            &[vec![0.0, 1.0], vec![0.7, -0.7]],
            &[vec![0.1, 0.9], vec![0.9, 0.1]],
            &[vec![1.0, 0.0]],
            vec![999],
            vec![0],
        );
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::from_rows(&[vec![0.8, 0.6]]).unwrap().with_requires_grad());
        let l = contrastive_loss(&mut g, f, &inputs, 0.1, false).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(f).iter().any(|&v| v != 0.0));
    }

    fn small_model(seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelState::init(2, &[6], 4, 3, 0.05, &mut rng).unwrap()
    }

    fn toy_batch(seed: u64, state: &ModelState) -> StepBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
        };
        let labeled = rows(4);
        let unl = rows(3);
        let unl_t = Tensor::from_rows(&unl).unwrap();
        let fprime = state.encode(&unl_t, true).unwrap();
        // normalize momentum features
        let mut fm = Vec::new();
        for i in 0..fprime.rows() {
            let r = fprime.row(i);
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            fm.push(r.iter().map(|v| v / n).collect::<Vec<f64>>());
        }
        let (_, probs) = state.classify(&fprime).unwrap();
        let mut q = MemoryQueue::new(64, 4, 3).unwrap();
        let ids = q.enqueue(&Tensor::from_rows(&fm).unwrap(), &probs).unwrap();
        let anchor_labels: Vec<usize> =
            (0..probs.rows()).map(|i| crate::queue::argmax(probs.row(i))).collect();
        let decision = PseudoDecision {
            mask: vec![true, false, true],
            pseudo_labels: vec![Some(anchor_labels[0]), None, Some(anchor_labels[2])],
            per_class_candidate_count: vec![1, 1, 1],
        };
        StepBatch {
            labeled_inputs: Tensor::from_rows(&labeled).unwrap(),
            labels: vec![0, 1, 2, 0],
            unlabeled: Some(UnlabeledStep {
                inputs_aug: unl_t,
                decision,
                contrastive: Some(ContrastiveInputs {
                    momentum_features: Tensor::from_rows(&fm).unwrap(),
                    snapshot: q.snapshot(),
                    own_entry_ids: ids,
                    anchor_labels,
                }),
            }),
        }
    }

    fn default_weights() -> LossWeights {
        LossWeights {
            lambda: 0.2,
            lambda_t: 2.0,
            lambda_c: 0.1,
            contrastive_temperature: 0.05,
            paper_literal_infonce: false,
            mean_over_selected: false,
        }
    }

    /// Entropy-term gradients through the reversal path against the plain
    /// `+lambda*H` build: the classifier gradient flips exactly, the encoder
    /// gradient is identical.
    #[test]
    fn grl_sign_pattern_on_entropy_term() {
        let state = small_model(3);
        let batch = toy_batch(4, &state);
        let weights = default_weights();
        let only_entropy = LossToggles { pseudo: false, contrastive: false, entropy: true };

        let run = |mode: EntropyMode| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let vars = state.register_graph(&mut g);
            let (total, _) =
                build_objective(&mut g, &state, &vars, &batch, &weights, only_entropy, mode)
                    .unwrap();
            g.backward(total).unwrap();
            (g.grad(vars.classifier_w).to_vec(), g.grad(vars.encoder[0].0).to_vec())
        };

        let (w_grl, enc_grl) = run(EntropyMode::GrlFold);
        let (w_plus, enc_plus) = run(EntropyMode::PlainPlus);

        // To isolate the entropy term, subtract the shared supervised part.
        let (w_sup, enc_sup) = {
            let mut g = Graph::new();
            let vars = state.register_graph(&mut g);
            let (total, _) = build_objective(
                &mut g,
                &state,
                &vars,
                &batch,
                &weights,
                LossToggles::all_off(),
                EntropyMode::GrlFold,
            )
            .unwrap();
            g.backward(total).unwrap();
            (g.grad(vars.classifier_w).to_vec(), g.grad(vars.encoder[0].0).to_vec())
        };

        for i in 0..w_grl.len() {
            let ent_grl = w_grl[i] - w_sup[i];
            let ent_plus = w_plus[i] - w_sup[i];
            assert!(
                (ent_grl + ent_plus).abs() < 1e-15,
                "classifier entropy gradient must flip: {ent_grl} vs {ent_plus}"
            );
        }
        for i in 0..enc_grl.len() {
            let ent_grl = enc_grl[i] - enc_sup[i];
            let ent_plus = enc_plus[i] - enc_sup[i];
            assert!(
                (ent_grl - ent_plus).abs() < 1e-15,
                "encoder entropy gradient must match: {ent_grl} vs {ent_plus}"
            );
        }
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        // logits all equal -> uniform distribution -> dH/dz = 0
        let mut g = Graph::new();
        let z = g.leaf(&Tensor::from_rows(&[vec![0.7, 0.7, 0.7]]).unwrap().with_requires_grad());
        let p = g.softmax_rows(z).unwrap();
        let h = entropy_loss(&mut g, p).unwrap();
        assert!((g.scalar_value(h) - 3.0_f64.ln()).abs() < 1e-12);
        g.backward(h).unwrap();
        assert!(g.grad(z).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let state = small_model(5);
        let batch = toy_batch(6, &state);
        let weights = default_weights();

        let eval = |b: &StepBatch| -> LossBundle {
            let mut g = Graph::new();
            let vars = state.register_graph(&mut g);
            let (_, bundle) = build_objective(
                &mut g,
                &state,
                &vars,
                b,
                &weights,
                LossToggles::all_on(),
                EntropyMode::GrlFold,
            )
            .unwrap();
            bundle
        };
        let base = eval(&batch);

        // reverse the labeled batch
        let mut shuffled = batch.clone();
        let rows: Vec<Vec<f64>> = (0..batch.labeled_inputs.rows())
            .rev()
            .map(|i| batch.labeled_inputs.row(i).to_vec())
            .collect();
        shuffled.labeled_inputs = Tensor::from_rows(&rows).unwrap();
        shuffled.labels = batch.labels.iter().rev().copied().collect();

        // reverse the unlabeled batch and all aligned companions
        {
            let u = shuffled.unlabeled.as_mut().unwrap();
            let orig = batch.unlabeled.as_ref().unwrap();
            let n = orig.inputs_aug.rows();
            let rev =
                |t: &Tensor| -> Tensor {
                    Tensor::from_rows(
                        &(0..t.rows()).rev().map(|i| t.row(i).to_vec()).collect::<Vec<_>>(),
                    )
                    .unwrap()
                };
            u.inputs_aug = rev(&orig.inputs_aug);
            u.decision.mask = orig.decision.mask.iter().rev().copied().collect();
            u.decision.pseudo_labels = orig.decision.pseudo_labels.iter().rev().copied().collect();
            let ci = u.contrastive.as_mut().unwrap();
            let oci = orig.contrastive.as_ref().unwrap();
            ci.momentum_features = rev(&oci.momentum_features);
            ci.own_entry_ids = oci.own_entry_ids.iter().rev().copied().collect();
            ci.anchor_labels = oci.anchor_labels.iter().rev().copied().collect();
            assert_eq!(n, u.inputs_aug.rows());
        }
        let perm = eval(&shuffled);

        assert!((base.loss_s - perm.loss_s).abs() < 1e-12);
        assert!((base.loss_t - perm.loss_t).abs() < 1e-12);
        assert!((base.loss_c - perm.loss_c).abs() < 1e-12);
        assert!((base.entropy_h - perm.entropy_h).abs() < 1e-12);
    }

    #[test]
    fn bundle_invariants_on_toy_step() {
        let state = small_model(8);
        let batch = toy_batch(9, &state);
        let mut g = Graph::new();
        let vars = state.register_graph(&mut g);
        let (_, bundle) = build_objective(
            &mut g,
            &state,
            &vars,
            &batch,
            &default_weights(),
            LossToggles::all_on(),
            EntropyMode::GrlFold,
        )
        .unwrap();
        assert!(bundle.loss_s >= 0.0);
        assert!(bundle.loss_t >= 0.0);
        assert!(bundle.loss_c >= 0.0);
        assert!(bundle.entropy_h >= 0.0 && bundle.entropy_h <= 3.0_f64.ln() + 1e-12);
    }
}
