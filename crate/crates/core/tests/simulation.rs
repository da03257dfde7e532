use rlpf::rng::substream;
use rlpf::ssm::{generate_dataset, sample_dynamic, MarkovDynamic, Regime, RegimeBank, TrueDynamic};

#[test]
fn markov_occupancy_matches_the_uniform_stationary_law() {
    // 500 independent trajectories of 20 steps: 10,000 steps. Trajectories
    // are independent, so per-trajectory occupancy gives honest errors.
    let data = generate_dataset(&TrueDynamic::Markov(MarkovDynamic::default()), &RegimeBank::default(), 1000, 19, 3)
        .unwrap();
    let trajectories: Vec<_> = data.train.iter().collect();
    assert_eq!(trajectories.len() * 20, 10_000);
    for k in 0..8 {
        let freq: Vec<f64> = trajectories
            .iter()
            .map(|t| t.k.iter().filter(|&&j| j == k).count() as f64 / t.k.len() as f64)
            .collect();
        let n = freq.len() as f64;
        let mean = freq.iter().sum::<f64>() / n;
        let se = (freq.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - 0.125).abs() < 3.0 * se, "regime {k}: {mean} (se {se})");
    }
}

#[test]
fn regimes_one_and_five_mirror_the_state() {
    // Same previous state: the two regimes move x to mirrored means, so |x|
    // and hence the observation scale sqrt|x| share one distribution while
    // the state posteriors sit on opposite signs.
    let bank = RegimeBank::default();
    let one = Regime::from_label(1, 8).unwrap();
    let five = Regime::from_label(5, 8).unwrap();
    let n = 20_000;
    let mut rng = substream(11, &[]);
    let x_prev = 3.0;
    let draw = |k, rng: &mut _| -> Vec<f64> { (0..n).map(|_| sample_dynamic(x_prev, k, &bank, rng).unwrap()).collect() };
    let a = draw(one, &mut rng);
    let b = draw(five, &mut rng);
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, s)
    };
    let (ma, sa) = moments(&a);
    let (mb, sb) = moments(&b);
    assert!(ma < 0.0 && mb > 0.0);
    let abs_a: Vec<f64> = a.iter().map(|x| x.abs().sqrt()).collect();
    let abs_b: Vec<f64> = b.iter().map(|x| x.abs().sqrt()).collect();
    let (qa, va) = moments(&abs_a);
    let (qb, vb) = moments(&abs_b);
    let se = ((va + vb) / n as f64).sqrt();
    assert!((qa - qb).abs() < 3.0 * se, "{qa} vs {qb}");
    assert!((sa - sb).abs() < 0.1 * sa);
    assert!((va - vb).abs() < 0.1 * va);
}
