//! Minibatch training loops for the transducer and the weighter.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::SupervisionTarget;
use crate::nn::graph::Graph;
use crate::nn::{Adam, Grads, Matrix, TransducerModel, WeighterInput, WeighterModel};
use crate::rnnt::weighted_multi_teacher_loss;
use crate::weighting::{bce_loss, WeightVector};

/// One utterance with its weighted teacher transcripts.
#[derive(Debug, Clone)]
pub struct TransducerExample<'a> {
    pub features: &'a Matrix,
    pub teachers: Vec<Vec<usize>>,
    pub weights: WeightVector,
}

#[derive(Debug, Clone)]
pub struct WeighterExample<'a> {
    pub features: &'a Matrix,
    pub transcripts: Vec<Vec<usize>>,
    pub entropies: Vec<f64>,
    pub target: SupervisionTarget,
}

impl WeighterExample<'_> {
    pub fn input(&self) -> WeighterInput<'_> {
        WeighterInput {
            features: self.features,
            transcripts: &self.transcripts,
            entropies: Some(&self.entropies),
        }
    }
}

/// Epoch-wise shuffled minibatches drawn from a seeded stream.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `f` over `items`, on up to `threads` workers, returning results in input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn apply_step(adam: &mut Adam, store: &mut crate::nn::ParamStore, mut grads: Grads, n: usize, clip: f64) -> Result<()> {
    grads.scale(1.0 / n as f64);
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    grads.clip_global_norm(clip);
    adam.update(store, &grads);
    Ok(())
}

/// Minimizes the weighted multi-teacher transducer loss. Returns the mean batch loss per step.
pub fn train_transducer(
    model: &mut TransducerModel,
    examples: &[TransducerExample<'_>],
    cfg: &TrainConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::config("training", "no training utterances"));
    }
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut batches = Batches::new(examples.len(), seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&TransducerExample<'_>> =
            batches.next(cfg.batch_size).into_iter().map(|i| &examples[i]).collect();
        let snapshot = &*model;
        let results = par_map(&batch, threads, |ex| {
            weighted_multi_teacher_loss(snapshot, ex.features, &ex.teachers, &ex.weights)
        });
        let mut total = snapshot.params().zero_grads();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        let loss = loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
        }
        losses.push(loss);
        apply_step(&mut adam, model.params_mut(), total, batch.len(), cfg.clip_norm)?;
    }
    Ok(losses)
}

/// BCE loss and parameter gradients for one example, with transcripts presented in `order`.
pub fn weighter_loss_and_grads(
    model: &WeighterModel,
    ex: &WeighterExample<'_>,
    order: &[usize],
) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let input = ex.input();
    let out = model.build(&mut g, &input, order)?;
    let (loss, dw) = bce_loss(g.value(out).data(), &ex.target)?;
    let gradients = g.backward(vec![(out, Matrix::row_vector(dw))])?;
    let mut grads = model.params().zero_grads();
    g.accumulate_param_grads(&gradients, &mut grads, 1.0);
    Ok((loss, grads))
}

/// Minimizes BCE against the best-expert targets, shuffling the transcript presentation order
/// of every example. `on_step` sees the model after each update.
pub fn train_weighter_model(
    model: &mut WeighterModel,
    examples: &[WeighterExample<'_>],
    cfg: &TrainConfig,
    seed: u64,
    threads: usize,
    mut on_step: impl FnMut(usize, &WeighterModel),
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::config("weighter", "no labeled utterances"));
    }
    let k = model.config().num_experts;
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut batches = Batches::new(examples.len(), seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, Vec<usize>)> = batches
            .next(cfg.batch_size)
            .into_iter()
            .map(|i| {
                let mut order: Vec<usize> = (0..k).collect();
                order.shuffle(&mut order_rng);
                (i, order)
            })
            .collect();
        let snapshot = &*model;
        let results = par_map(&batch, threads, |(i, order)| {
            weighter_loss_and_grads(snapshot, &examples[*i], order)
        });
        let mut total = snapshot.params().zero_grads();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        losses.push(loss / batch.len() as f64);
        apply_step(&mut adam, model.params_mut(), total, batch.len(), cfg.clip_norm)?;
        on_step(step, model);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{TransducerConfig, WeighterConfig};
    use rand::Rng;

    #[test]
    fn batches_cover_every_item_each_epoch() {
        let mut b = Batches::new(5, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next(9).len(), 5);
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<u32> = (0..17).collect();
        assert_eq!(
            par_map(&items, 4, |x| x * 2),
            items.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
    }

    #[test]
    fn transducer_memorizes_a_tiny_set_and_is_deterministic() {
        let cfg = TransducerConfig {
            feature_dim: 3,
            vocab_size: 3,
            encoder_layers: 1,
            encoder_hidden: 8,
            embed_dim: 4,
            predictor_layers: 1,
            predictor_hidden: 8,
            joiner_hidden: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Matrix> = (0..3).map(|_| Matrix::random_uniform(4, 3, 1.0, &mut rng)).collect();
        let examples: Vec<TransducerExample<'_>> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| TransducerExample {
                features: f,
                teachers: vec![vec![i + 1, 1 + (i + 1) % 3]],
                weights: WeightVector::one_hot(1, 0),
            })
            .collect();
        let train = TrainConfig {
            steps: 150,
            batch_size: 2,
            learning_rate: 1e-2,
            clip_norm: 5.0,
        };
        let run = |threads| {
            let mut m = TransducerModel::new(cfg.clone(), 3).unwrap();
            let losses = train_transducer(&mut m, &examples, &train, 9, threads).unwrap();
            (m, losses)
        };
        let (m1, l1) = run(1);
        let (m2, l2) = run(3);
        assert_eq!(l1, l2);
        assert_eq!(m1.params(), m2.params());
        let early: f64 = l1[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = l1[l1.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(late < 0.5 * early, "{early} -> {late}");
    }

    #[test]
    fn weighter_learns_to_follow_the_entropy_signal() {
        let cfg = WeighterConfig {
            feature_dim: 2,
            vocab_size: 3,
            num_experts: 3,
            audio_hidden: 4,
            model_dim: 4,
            heads: 2,
            head_hidden: 8,
            max_positions: 4,
            entropy_features: true,
            entropy_mean: 0.0,
            entropy_std: 1.0,
            expert_identity: false,
            pooling: Default::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<Matrix> = (0..24).map(|_| Matrix::random_uniform(3, 2, 1.0, &mut rng)).collect();
        let examples: Vec<WeighterExample<'_>> = feats
            .iter()
            .map(|f| {
                let best = rng.random_range(0..3);
                let entropies = (0..3).map(|i| if i == best { 0.1 } else { 2.3 }).collect();
                let mut z = vec![0; 3];
                z[best] = 1;
                WeighterExample {
                    features: f,
                    transcripts: vec![vec![1], vec![2], vec![3]],
                    entropies,
                    target: SupervisionTarget::new(z).unwrap(),
                }
            })
            .collect();
        let mut m = WeighterModel::new(cfg, 4).unwrap();
        let train = TrainConfig {
            steps: 300,
            batch_size: 4,
            learning_rate: 1e-2,
            clip_norm: 5.0,
        };
        train_weighter_model(&mut m, &examples, &train, 5, 1, |_, _| {}).unwrap();
        let hits = examples
            .iter()
            .filter(|ex| ex.target.is_best(m.forward(&ex.input()).unwrap().argmax()))
            .count();
        assert!(hits >= 22, "{hits}/24");
        let w = m
            .forward(&WeighterInput {
                features: &feats[0],
                transcripts: &[vec![1], vec![2], vec![3]],
                entropies: Some(&[0.1, 2.3, 2.3]),
            })
            .unwrap();
        assert!(w[0] > 1.0 / 3.0);
    }
}
