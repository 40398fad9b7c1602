#![allow(dead_code)]

use fairnews_core::autodiff::{finite_difference_check, AutodiffError, Graph, OpKind, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub const CHECKED_OPS: [OpKind; 18] = [
    OpKind::MatMul,
    OpKind::BatchMatMul,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::EmbeddingLookup,
    OpKind::Softmax,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::Tanh,
    OpKind::Abs,
    OpKind::Concat,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::ReduceSum,
    OpKind::ReduceMean,
    OpKind::CosineSimilarity,
    OpKind::CrossEntropy,
];

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so kinks of relu and abs are never
/// within a finite-difference step.
pub fn off_zero_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, AutodiffError> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.reduce_sum(p))
}

/// Max relative finite-difference error of one operator on random
/// shapes, over every differentiable input.
pub fn op_gradcheck<R: Rng>(op: OpKind, rng: &mut R) -> f64 {
    let d = |rng: &mut R| rng.gen_range(1..=4usize);
    let (a, b, c) = (d(rng), d(rng), d(rng));
    let batch = d(rng);
    let inputs: Vec<Tensor>;
    let out_shape: Vec<usize>;
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>>;
    let build: Build = match op {
        OpKind::MatMul => {
            inputs = vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[b, c])];
            out_shape = vec![a, c];
            Box::new(|g, v| g.matmul(v[0], v[1]))
        }
        OpKind::BatchMatMul => {
            inputs = vec![random_tensor(rng, &[batch, a, b]), random_tensor(rng, &[batch, b, c])];
            out_shape = vec![batch, a, c];
            Box::new(|g, v| g.batch_matmul(v[0], v[1]))
        }
        OpKind::Add => {
            if rng.gen_bool(0.5) {
                inputs = vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[a, b])];
            } else {
                inputs = vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[b])];
            }
            out_shape = vec![a, b];
            Box::new(|g, v| g.add(v[0], v[1]))
        }
        OpKind::Mul => {
            inputs = vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(|g, v| g.mul(v[0], v[1]))
        }
        OpKind::Scale => {
            let s = rng.gen_range(-2.0..2.0);
            inputs = vec![random_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(move |g, v| Ok(g.scale(v[0], s)))
        }
        OpKind::EmbeddingLookup => {
            let rows: Vec<Option<usize>> = (0..c + 1)
                .map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..a)) })
                .collect();
            out_shape = vec![rows.len(), b];
            inputs = vec![random_tensor(rng, &[a, b])];
            Box::new(move |g, v| g.gather_rows(v[0], &rows))
        }
        OpKind::Softmax => {
            inputs = vec![random_tensor(rng, &[a, b + 1])];
            out_shape = vec![a, b + 1];
            Box::new(|g, v| Ok(g.softmax(v[0])))
        }
        OpKind::Sigmoid => {
            inputs = vec![random_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(|g, v| Ok(g.sigmoid(v[0])))
        }
        OpKind::Relu => {
            inputs = vec![off_zero_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(|g, v| Ok(g.relu(v[0])))
        }
        OpKind::Tanh => {
            inputs = vec![random_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(|g, v| Ok(g.tanh(v[0])))
        }
        OpKind::Abs => {
            inputs = vec![off_zero_tensor(rng, &[a, b])];
            out_shape = vec![a, b];
            Box::new(|g, v| Ok(g.abs(v[0])))
        }
        OpKind::Concat => {
            let axis = rng.gen_range(0..2usize);
            let other = if axis == 0 { [c, b] } else { [a, c] };
            inputs = vec![random_tensor(rng, &[a, b]), random_tensor(rng, &other)];
            out_shape = if axis == 0 { vec![a + c, b] } else { vec![a, b + c] };
            Box::new(move |g, v| g.concat(&[v[0], v[1]], axis))
        }
        OpKind::Transpose => {
            let (x, y) = (rng.gen_range(0..3usize), rng.gen_range(0..3usize));
            let mut s = vec![a, b, c];
            inputs = vec![random_tensor(rng, &s)];
            s.swap(x, y);
            out_shape = s;
            Box::new(move |g, v| g.transpose(v[0], x, y))
        }
        OpKind::Reshape => {
            inputs = vec![random_tensor(rng, &[a, b, c])];
            out_shape = vec![a * b, c];
            Box::new(move |g, v| g.reshape(v[0], &[a * b, c]))
        }
        OpKind::ReduceSum => {
            inputs = vec![random_tensor(rng, &[a, b])];
            out_shape = vec![];
            Box::new(|g, v| Ok(g.reduce_sum(v[0])))
        }
        OpKind::ReduceMean => {
            inputs = vec![random_tensor(rng, &[a, b])];
            out_shape = vec![];
            Box::new(|g, v| Ok(g.reduce_mean(v[0])))
        }
        OpKind::CosineSimilarity => {
            inputs = vec![off_zero_tensor(rng, &[a, b + 1]), off_zero_tensor(rng, &[a, b + 1])];
            out_shape = vec![a];
            Box::new(|g, v| g.cosine_similarity(v[0], v[1]))
        }
        OpKind::CrossEntropy => {
            let labels: Vec<usize> = (0..a).map(|_| rng.gen_range(0..b + 1)).collect();
            inputs = vec![random_tensor(rng, &[a, b + 1])];
            out_shape = vec![];
            Box::new(move |g, v| g.cross_entropy(v[0], &labels))
        }
        OpKind::Leaf => panic!("leaf has no gradient rule"),
    };
    let w = if out_shape.is_empty() {
        None
    } else {
        Some(random_tensor(rng, &out_shape))
    };
    let root = |g: &mut Graph, v: &[Var]| -> Result<Var, AutodiffError> {
        let out = build(g, v)?;
        match &w {
            Some(w) => weighted_sum(g, out, w),
            None => Ok(out),
        }
    };
    (0..inputs.len())
        .map(|i| finite_difference_check(&inputs, i, FD_STEP, root).unwrap())
        .fold(0.0, f64::max)
}

/// Random three-layer composition of the operator set; worst error over
/// all inputs.
pub fn composition_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    let (n, a, h, c) = (rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let inputs = vec![
        random_tensor(rng, &[n, a]),
        random_tensor(rng, &[a, h]),
        off_zero_tensor(rng, &[h]),
        random_tensor(rng, &[h, c]),
    ];
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let build = move |g: &mut Graph, v: &[Var]| -> Result<Var, AutodiffError> {
        let z = g.matmul(v[0], v[1])?;
        let z = g.add(z, v[2])?;
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        let m = g.mul(t, s)?;
        let o = g.matmul(m, v[3])?;
        let sm = g.softmax(o);
        let ce = g.cross_entropy(o, &labels)?;
        let r = g.reduce_mean(sm);
        g.add(ce, r)
    };
    (0..inputs.len())
        .map(|i| finite_difference_check(&inputs, i, FD_STEP, &build).unwrap())
        .fold(0.0, f64::max)
}

/// Literal exposure ratio: the double sum over users and news
/// of the top-K indicator, divided per group size.
pub fn literal_er(lists: &[Vec<usize>], protected: &[bool], k: usize) -> Option<f64> {
    let n_plus = protected.iter().filter(|&&p| p).count() as f64;
    let n_minus = protected.len() as f64 - n_plus;
    let users = lists.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for list in lists {
        for (d, &is_p) in protected.iter().enumerate() {
            let recommended = list.iter().take(k).any(|&x| x == d);
            if recommended {
                if is_p {
                    num += 1.0 / n_plus;
                } else {
                    den += 1.0 / n_minus;
                }
            }
        }
    }
    let (num, den) = (num / users, den / users);
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

fn literal_rnd_sum(list: &[usize], protected: &[bool], k: usize) -> f64 {
    let share = protected.iter().filter(|&&p| p).count() as f64 / protected.len() as f64;
    let mut s = 0.0;
    let mut n = 10;
    while n <= k {
        let hits = list[..n].iter().filter(|&&d| protected[d]).count() as f64;
        s += (hits / n as f64 - share).abs() / (n as f64).log2();
        n += 10;
    }
    s
}

/// Z from explicitly built extremal rankings.
pub fn brute_force_z(protected: &[bool], k: usize) -> f64 {
    let prot: Vec<usize> = (0..protected.len()).filter(|&d| protected[d]).collect();
    let unprot: Vec<usize> = (0..protected.len()).filter(|&d| !protected[d]).collect();
    let first: Vec<usize> = prot.iter().chain(&unprot).copied().collect();
    let last: Vec<usize> = unprot.iter().chain(&prot).copied().collect();
    literal_rnd_sum(&first, protected, k).max(literal_rnd_sum(&last, protected, k))
}

pub fn literal_rnd(lists: &[Vec<usize>], protected: &[bool], k: usize) -> f64 {
    let z = brute_force_z(protected, k);
    let mean = lists.iter().map(|l| literal_rnd_sum(l, protected, k)).sum::<f64>() / lists.len() as f64;
    mean / z
}

/// Fraction of correctly ordered positive/negative pairs, ties half.
pub fn brute_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}

/// Random permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

pub fn groups_from_mask(protected: &[bool]) -> fairnews_core::ProviderGroups {
    fairnews_core::ProviderGroups {
        ratio: 0.5,
        protected: vec![],
        unprotected: vec![],
        protected_news: protected.to_vec(),
    }
}

pub fn tiny_simulator(seed: u64) -> fairnews_core::SimulatorConfig {
    fairnews_core::SimulatorConfig {
        users: 40,
        news: 60,
        providers: 6,
        topics: 3,
        impressions_per_user: 3,
        candidates_per_impression: 6,
        history_impressions: 3,
        words_per_topic: 6,
        filler_words: 8,
        style_words_per_provider: 1,
        seed,
        ..Default::default()
    }
}

pub fn tiny_encoder(corpus: &fairnews_core::Corpus) -> fairnews_core::EncoderConfig {
    fairnews_core::EncoderConfig {
        vocab_size: corpus.vocab.len(),
        provider_count: corpus.providers.len(),
        title_len: 5,
        history_len: 3,
        word_dim: 4,
        heads: 2,
        head_dim: 2,
        repr_dim: 4,
        provider_dim: 4,
        discriminator_classes: 51,
        attention_hidden: 3,
        discriminator_hidden: 5,
        ..fairnews_core::EncoderConfig::desk()
    }
}

/// Corpus, freshly initialised model and the first `n` sampled instances.
pub fn micro_setup(
    n: usize,
    seed: u64,
) -> (fairnews_core::Corpus, fairnews_core::Model, Vec<fairnews_core::data::TrainingInstance>) {
    use rand::SeedableRng;
    let corpus = fairnews_core::data::simulate_corpus(&tiny_simulator(seed)).unwrap().corpus;
    let model = fairnews_core::Model::new(tiny_encoder(&corpus), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut inst = fairnews_core::data::sample_instances(&corpus.train, 4, &mut rng).instances;
    inst.truncate(n);
    (corpus, model, inst)
}

/// Total objective value with the current parameters (nothing frozen).
pub fn objective_value(
    model: &fairnews_core::Model,
    corpus: &fairnews_core::Corpus,
    layout: &fairnews_core::training::BatchLayout,
    labels: &[usize],
    w: &fairnews_core::LossWeights,
) -> f64 {
    let mut g = Graph::new();
    let (vars, _) = fairnews_core::training::build_objective(&mut g, model, corpus, layout, labels, w, true).unwrap();
    g.value(vars.total).item()
}

/// Finite-difference check of the whole objective against every entry
/// of every parameter. Returns the worst relative error overall and the
/// worst over entries whose gradient magnitude is at least 1e-6.
pub fn objective_gradcheck(instances: usize, seed: u64) -> (f64, f64) {
    objective_gradcheck_steps(instances, seed, &[FD_STEP])
}

/// As [`objective_gradcheck`], taking per entry the smallest error over
/// the given difference steps.
pub fn objective_gradcheck_steps(instances: usize, seed: u64, steps: &[f64]) -> (f64, f64) {
    let (corpus, mut model, batch) = micro_setup(instances, seed);
    let w = fairnews_core::LossWeights {
        lambda_a: 0.3,
        ..Default::default()
    };
    let layout = fairnews_core::training::BatchLayout::new(&batch, model.config().history_len).unwrap();
    let all = corpus.discrimination_labels(51);
    let labels: Vec<usize> = layout.news.iter().map(|&n| all[n]).collect();
    let mut g = Graph::new();
    let (vars, _) = fairnews_core::training::build_objective(&mut g, &model, &corpus, &layout, &labels, &w, true).unwrap();
    let grads = g.backward(vars.total).unwrap().params();
    let (mut worst, mut worst_large) = (0.0f64, 0.0f64);
    for (id, grad) in grads {
        for i in 0..grad.len() {
            let orig = model.params().get(id).data()[i];
            let a = grad.data()[i];
            let mut err = f64::INFINITY;
            for &h in steps {
                model.params_mut().get_mut(id).data_mut()[i] = orig + h;
                let plus = objective_value(&model, &corpus, &layout, &labels, &w);
                model.params_mut().get_mut(id).data_mut()[i] = orig - h;
                let minus = objective_value(&model, &corpus, &layout, &labels, &w);
                model.params_mut().get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                err = err.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            }
            worst = worst.max(err);
            if a.abs() >= 1e-6 {
                worst_large = worst_large.max(err);
            }
        }
    }
    (worst, worst_large)
}
