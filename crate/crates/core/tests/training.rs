use satdiff::formula::{Assignment, CnfFormula};
use satdiff::gnn::ModelConfig;
use satdiff::train::{loss_and_gradients, AdaBeliefConfig, TrainConfig, TrainExample, Trainer};

fn single_instance() -> TrainExample {
    let f = CnfFormula::from_dimacs_clauses(5, &[vec![1, -2, 3], vec![-1, 4, 5], vec![2, -3, -5], vec![-4, 3, 1]]).unwrap();
    let s = Assignment::new(vec![true, false, true, true, false]);
    TrainExample::new(f, s).unwrap()
}

fn config(steps: u64, schedule_steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        max_vars: 100,
        schedule_steps,
        model: ModelConfig {
            hidden_dim: 32,
            iterations: 4,
            seed: 0,
        },
        optimizer: AdaBeliefConfig {
            lr: 1e-3,
            ..Default::default()
        },
        log_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    }
}

#[test]
fn single_instance_overfits() {
    let mut trainer = Trainer::new(config(2000, 128), vec![single_instance()]).unwrap();
    // Fixed held-aside batches, far from the training step indices.
    let probe = |t: &Trainer| -> f64 {
        (0..256u64)
            .map(|k| loss_and_gradients(t.model(), &t.batch_for_step(1_000_000 + k).unwrap()).unwrap().0)
            .sum::<f64>()
            / 256.0
    };
    let before = probe(&trainer);
    let losses: Vec<f64> = (0..2000).map(|_| trainer.train_step().unwrap()).collect();
    let tail = losses[1800..].iter().sum::<f64>() / 200.0;
    let after = probe(&trainer);
    assert!(tail < 0.01, "final mean loss {tail}");
    assert!(after < 0.01 && after < 0.5 * before, "probe loss {before} → {after}");
}

#[test]
fn training_steps_are_uniform_over_the_schedule() {
    let big_t = 16;
    let trainer = Trainer::new(config(1, big_t), vec![single_instance()]).unwrap();
    let draws = 8000;
    let mut counts = vec![0usize; big_t];
    for step in 0..draws {
        let b = trainer.batch_for_step(step).unwrap();
        counts[b.steps[0] - 1] += 1;
    }
    let expected = draws as f64 / big_t as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 15 degrees of freedom.
    assert!(chi2 < 37.7, "χ² = {chi2}, counts {counts:?}");
}

#[test]
fn batches_respect_the_variable_budget() {
    let mut examples = Vec::new();
    for k in 0..10 {
        let f = CnfFormula::from_dimacs_clauses(5 + k, &[vec![1, 2]]).unwrap();
        let mut s = vec![false; 5 + k];
        s[0] = true;
        examples.push(TrainExample::new(f, Assignment::new(s)).unwrap());
    }
    let mut cfg = config(1, 32);
    cfg.max_vars = 40;
    let trainer = Trainer::new(cfg, examples).unwrap();
    for step in 0..50 {
        let b = trainer.batch_for_step(step).unwrap();
        assert!(b.num_vars() <= 40 && b.num_instances() >= 1);
        assert_eq!(*b.boundaries.last().unwrap(), b.num_vars());
    }
}
