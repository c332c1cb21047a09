//! Synthetic sequence-classification tasks.
//!
//! A random teacher labels token sequences for pretraining the backbone; a
//! perturbed copy of the same teacher labels the downstream splits. Each
//! split draws its inputs from its own seeded stream, so splits never share
//! examples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PearError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub input_dim: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub teacher_hidden: usize,
    /// Relative size of the downstream teacher perturbation.
    pub shift: f64,
    pub pretrain_examples: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            seed: 0,
            input_dim: 8,
            seq_len: 16,
            classes: 4,
            teacher_hidden: 16,
            shift: 0.8,
            pretrain_examples: 2000,
            train_examples: 1000,
            val_examples: 300,
            test_examples: 1000,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PearError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.seq_len == 0 || self.teacher_hidden == 0 {
            return bad("task dimensions must be positive");
        }
        if self.classes < 2 {
            return bad("task needs at least 2 classes");
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return bad("shift must be finite and non-negative");
        }
        if self.train_examples == 0 || self.val_examples == 0 || self.test_examples == 0 {
            return bad("downstream splits must be non-empty");
        }
        Ok(())
    }
}

/// Labelled sequences; `inputs` is `[len·seq_len, input_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the listed examples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width = self.seq_len * self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
        }
        let inputs = Tensor::new(&[indices.len() * self.seq_len, self.inputs.cols()], data)
            .expect("batch shape");
        (inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Attention-pooled two-layer teacher:
/// `logits = Σ_t α_t · tanh(x_t W) · V + c`, `α = softmax_t(x_t · u)`.
#[derive(Debug, Clone, PartialEq)]
struct Teacher {
    hidden: Vec<f64>,
    attend: Vec<f64>,
    readout: Vec<f64>,
    bias: Vec<f64>,
}

const CALIBRATION_EXAMPLES: usize = 2000;

impl Teacher {
    fn random(task: &SyntheticTask, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, c) = (task.input_dim, task.teacher_hidden, task.classes);
        Teacher {
            hidden: gaussian(rng, d * h, 1.0 / (d as f64).sqrt()),
            attend: gaussian(rng, d, 1.0 / (d as f64).sqrt()),
            readout: gaussian(rng, h * c, 1.0 / (h as f64).sqrt()),
            bias: vec![0.0; c],
        }
    }

    fn perturbed(&self, shift: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mix = |base: &[f64]| -> Vec<f64> {
            let scale = (base.iter().map(|v| v * v).sum::<f64>() / base.len() as f64).sqrt();
            base.iter()
                .map(|v| {
                    let n: f64 = StandardNormal.sample(rng);
                    v + shift * scale * n
                })
                .collect()
        };
        Teacher {
            hidden: mix(&self.hidden),
            attend: mix(&self.attend),
            readout: mix(&self.readout),
            bias: self.bias.clone(),
        }
    }

    fn logits(&self, seq: &[f64], task: &SyntheticTask) -> Vec<f64> {
        let (d, h, c) = (task.input_dim, task.teacher_hidden, task.classes);
        let mut scores: Vec<f64> = seq
            .chunks(d)
            .map(|x| x.iter().zip(&self.attend).map(|(a, b)| a * b).sum())
            .collect();
        crate::tape::softmax_in_place(&mut scores);
        let mut pooled = vec![0.0; h];
        for (x, alpha) in seq.chunks(d).zip(&scores) {
            for (j, p) in pooled.iter_mut().enumerate() {
                let pre: f64 = (0..d).map(|i| x[i] * self.hidden[i * h + j]).sum();
                *p += alpha * pre.tanh();
            }
        }
        (0..c)
            .map(|k| self.bias[k] + (0..h).map(|j| pooled[j] * self.readout[j * c + k]).sum::<f64>())
            .collect()
    }

    fn label(&self, seq: &[f64], task: &SyntheticTask) -> usize {
        argmax(&self.logits(seq, task))
    }

    /// Adjusts the class biases on a fixed calibration sample until every
    /// class receives a fair share of labels.
    fn calibrate(&mut self, task: &SyntheticTask, rng: &mut ChaCha8Rng) {
        self.bias = vec![0.0; task.classes];
        let width = task.seq_len * task.input_dim;
        let sample = gaussian(rng, CALIBRATION_EXAMPLES * width, 1.0);
        let raw: Vec<Vec<f64>> = sample.chunks(width).map(|s| self.logits(s, task)).collect();
        let target = 1.0 / task.classes as f64;
        for _ in 0..200 {
            let mut freq = vec![0.0; task.classes];
            for l in &raw {
                let biased: Vec<f64> = l.iter().zip(&self.bias).map(|(a, b)| a + b).collect();
                freq[argmax(&biased)] += 1.0 / raw.len() as f64;
            }
            if freq.iter().all(|f| (f - target).abs() < 0.02) {
                break;
            }
            for (b, f) in self.bias.iter_mut().zip(&freq) {
                *b -= 0.1 * (f.max(1e-3) / target).ln();
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn sample_split(task: &SyntheticTask, teacher: &Teacher, count: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(stream);
    let width = task.seq_len * task.input_dim;
    let data = gaussian(&mut rng, count.max(1) * width, 1.0);
    let labels = data
        .chunks(width)
        .take(count.max(1))
        .map(|s| teacher.label(s, task))
        .collect();
    Dataset {
        inputs: Tensor::new(&[count.max(1) * task.seq_len, task.input_dim], data).expect("split shape"),
        labels,
        seq_len: task.seq_len,
    }
}

/// Deterministic pretrain / train / val / test splits for `task`.
pub fn generate_task(task: &SyntheticTask) -> Result<TaskData> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut teacher = Teacher::random(task, &mut rng);
    teacher.calibrate(task, &mut rng);
    let downstream = if task.shift == 0.0 {
        teacher.clone()
    } else {
        let mut shifted = teacher.perturbed(task.shift, &mut rng);
        shifted.calibrate(task, &mut rng);
        shifted
    };
    Ok(TaskData {
        pretrain: sample_split(task, &teacher, task.pretrain_examples, 1),
        train: sample_split(task, &downstream, task.train_examples, 2),
        val: sample_split(task, &downstream, task.val_examples, 3),
        test: sample_split(task, &downstream, task.test_examples, 4),
    })
}
