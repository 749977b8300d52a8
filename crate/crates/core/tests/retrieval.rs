use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmm_core::retrieval::{
    cmc_csv, cosine_similarity, evaluate_rank_k, oracle_rank, DescriptorSet, Gallery, QuerySet, Summary,
};
use xmm_core::Error;

/// Descriptors drawn from a small lattice so exact similarity ties and
/// duplicate rows are frequent.
fn lattice_set(n: usize, dim: usize, ids: u32, rng: &mut ChaCha8Rng) -> DescriptorSet {
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        loop {
            let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1i32..=1) as f32).collect();
            if row.iter().any(|&v| v != 0.0) {
                data.extend(row);
                break;
            }
        }
    }
    let labels = (0..n).map(|_| rng.gen_range(0..ids)).collect();
    DescriptorSet::new(dim, labels, data).unwrap()
}

/// Independent counting oracle: the first correct position is the number
/// of gallery items ranked ahead of the best-ranked correct item.
fn counting_ranks(q: &QuerySet, g: &Gallery) -> Vec<Option<usize>> {
    (0..q.len())
        .map(|qi| {
            let sims: Vec<f32> = (0..g.len()).map(|gi| cosine_similarity(q.row(qi), g.row(gi)).unwrap()).collect();
            let ahead_of = |b: usize| (0..g.len()).filter(|&x| sims[x] > sims[b] || (sims[x] == sims[b] && x < b)).count();
            (0..g.len()).filter(|&gi| g.ids()[gi] == q.ids()[qi]).map(ahead_of).min()
        })
        .collect()
}

#[test]
fn fast_ranking_agrees_with_oracles_on_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let queries = lattice_set(20, 3, 8, &mut rng);
        let gallery = lattice_set(50, 3, 8, &mut rng);
        let fast = evaluate_rank_k(&queries, &gallery).unwrap();
        let oracle = oracle_rank(&queries, &gallery).unwrap();
        assert_eq!(fast.cmc, oracle);
        let counted = counting_ranks(&queries, &gallery);
        let expected: Vec<usize> = counted.iter().flatten().copied().collect();
        assert_eq!(fast.first_match, expected);
        let excluded: Vec<usize> = (0..20).filter(|&i| counted[i].is_none()).collect();
        assert_eq!(fast.excluded, excluded);
    }
}

#[test]
fn ties_resolve_to_lower_gallery_index() {
    // Both gallery items are identical; the wrong one comes first.
    let g = DescriptorSet::new(2, vec![1, 0], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let q = DescriptorSet::new(2, vec![0], vec![2.0, 0.0]).unwrap();
    let e = evaluate_rank_k(&q, &g).unwrap();
    assert_eq!(e.first_match, [1]);
    assert_eq!(e.rank(1), 0.0);
    assert_eq!(e.rank(2), 1.0);
}

#[test]
fn queries_without_gallery_identity_are_excluded() {
    let g = DescriptorSet::new(2, vec![0, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = DescriptorSet::new(2, vec![0, 9, 1], vec![1.0, 0.1, 1.0, 1.0, 0.0, 1.0]).unwrap();
    let e = evaluate_rank_k(&q, &g).unwrap();
    assert_eq!(e.excluded, [1]);
    assert_eq!(e.evaluated(), 2);
    assert_eq!(e.rank(1), 1.0);
    let s = Summary::new(&e, 3, 2);
    assert_eq!((s.queries, s.evaluated, s.excluded, s.gallery), (3, 2, 1, 2));
    assert!(s.to_json().contains("\"rank1\": 1.0"));
}

#[test]
fn bad_sets_are_rejected() {
    assert!(matches!(DescriptorSet::new(2, vec![0], vec![0.0, 0.0]), Err(Error::Normalization(_))));
    assert!(matches!(DescriptorSet::new(2, vec![0], vec![1.0, f32::NAN]), Err(Error::Numerical(_))));
    assert!(matches!(DescriptorSet::new(2, vec![0, 1], vec![1.0, 0.0]), Err(Error::Dimension(_))));
    let g = DescriptorSet::new(2, vec![0], vec![1.0, 0.0]).unwrap();
    let q = DescriptorSet::new(3, vec![0], vec![1.0, 0.0, 0.0]).unwrap();
    assert!(matches!(evaluate_rank_k(&q, &g), Err(Error::Dimension(_))));
    let empty = DescriptorSet::new(2, vec![], vec![]).unwrap();
    assert!(evaluate_rank_k(&g, &empty).is_err());
}

#[test]
fn descriptor_file_round_trip_and_damage() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = lattice_set(12, 4, 5, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.xmdv");
    set.save(&path).unwrap();
    assert_eq!(DescriptorSet::load(&path).unwrap(), set);

    let bytes = std::fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    flipped[20] ^= 1;
    assert!(matches!(DescriptorSet::from_bytes(&flipped), Err(Error::Corrupt(_))));
    assert!(matches!(DescriptorSet::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(DescriptorSet::from_bytes(&version), Err(Error::Format(_))));
    assert!(matches!(DescriptorSet::from_bytes(b"nope"), Err(Error::Format(_))));
}

#[test]
fn cmc_csv_lists_every_rank() {
    let g = DescriptorSet::new(1, vec![0, 1, 2], vec![1.0, 1.0, 1.0]).unwrap();
    let q = DescriptorSet::new(1, vec![2], vec![1.0]).unwrap();
    let e = evaluate_rank_k(&q, &g).unwrap();
    assert_eq!(cmc_csv(&e.cmc), "k,accuracy\n1,0\n2,0\n3,1\n");
}

proptest! {
    /// CMC values are non-decreasing, bounded by one, and saturate at the
    /// gallery size once every evaluated query has matched.
    #[test]
    fn cmc_is_monotone(seed in any::<u64>(), q in 1usize..15, g in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = lattice_set(q, 3, 4, &mut rng);
        let gallery = lattice_set(g, 3, 4, &mut rng);
        let e = evaluate_rank_k(&queries, &gallery).unwrap();
        let v = e.cmc.values();
        prop_assert_eq!(v.len(), g);
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if e.evaluated() > 0 {
            prop_assert_eq!(v[g - 1], 1.0);
        }
        prop_assert_eq!(e.rank(g + 10), v[g - 1]);
    }

    /// Cosine similarity ignores positive rescaling of either argument.
    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-5.0f32..5.0, 6),
        b in prop::collection::vec(-5.0f32..5.0, 6),
        s in 0.01f32..100.0,
        t in 0.01f32..100.0,
    ) {
        prop_assume!(a.iter().any(|&x| x.abs() > 1e-3) && b.iter().any(|&x| x.abs() > 1e-3));
        let base = cosine_similarity(&a, &b).unwrap();
        let sa: Vec<f32> = a.iter().map(|x| x * s).collect();
        let tb: Vec<f32> = b.iter().map(|x| x * t).collect();
        prop_assert!((cosine_similarity(&sa, &tb).unwrap() - base).abs() <= 1e-5);
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((cosine_similarity(&b, &a).unwrap() - base).abs() <= 1e-7);
    }

    /// Scaling every gallery row by its own positive factor leaves the
    /// ranking unchanged.
    #[test]
    fn ranking_ignores_row_scale(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = lattice_set(10, 4, 5, &mut rng);
        let gallery = lattice_set(25, 4, 5, &mut rng);
        let scaled: Vec<f32> = gallery
            .data()
            .chunks(4)
            .flat_map(|r| {
                let s = [0.5f32, 2.0, 4.0][rng.gen_range(0..3)];
                r.iter().map(move |x| x * s).collect::<Vec<_>>()
            })
            .collect();
        let scaled = DescriptorSet::new(4, gallery.ids().to_vec(), scaled).unwrap();
        let a = evaluate_rank_k(&queries, &gallery).unwrap();
        let b = evaluate_rank_k(&queries, &scaled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn descriptor_bytes_round_trip(seed in any::<u64>(), n in 0usize..20, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = lattice_set(n, dim, 6, &mut rng);
        prop_assert_eq!(DescriptorSet::from_bytes(&set.to_bytes()).unwrap(), set);
    }
}
