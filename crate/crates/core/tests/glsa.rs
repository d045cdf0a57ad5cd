use ean_core::glsa::{
    glsa_forward, glsa_forward_dual, init_glsa, AttentionTrace, AttnSite, GlsaConfig, GlsaHooks,
};
use ean_core::tensor::{ParamStore, Tape, Tensor};
use ean_core::EanRng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

struct Block {
    cfg: GlsaConfig,
    store: ParamStore,
}

impl Block {
    fn new(dim: usize, heads: usize, groups: usize, improved: bool, seed: u64) -> Self {
        let mut cfg = GlsaConfig::new(dim, heads, groups);
        cfg.improved_local_queries = improved;
        let mut store = ParamStore::new();
        let mut rng = EanRng::seed_from_u64(seed);
        init_glsa(&mut store, "b", &cfg, &mut rng).unwrap();
        // non-trivial local queries and biases
        for (_, t) in store.iter_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
        Self { cfg, store }
    }

    fn run(&self, c: &Tensor, p: &Tensor, hooks: GlsaHooks, trace: Option<&mut AttentionTrace>) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let c = tape.constant(c.clone());
        let p = tape.constant(p.clone());
        let out = glsa_forward(&mut tape, &bound, "b", &self.cfg, c, p, hooks, trace).unwrap();
        tape.value(out.out).clone()
    }
}

fn inputs(rng: &mut EanRng, m: usize, n: usize, d: usize) -> (Tensor, Tensor) {
    let c = Tensor::new(&[m, n, d], (0..m * n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let p = Tensor::new(&[m, n, 2], (0..m * n * 2).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (c, p)
}

/// Reorders the `[M, N, w]` tensor so that output `(g, j)` is input
/// `(gperm[g], pperm[g][j])`.
fn permute(t: &Tensor, gperm: &[usize], pperm: &[Vec<usize>]) -> Tensor {
    let s = t.shape();
    let (m, n, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(t.numel());
    for g in 0..m {
        for j in 0..n {
            let (sg, sj) = (gperm[g], pperm[g][j]);
            out.extend_from_slice(&t.data()[(sg * n + sj) * w..(sg * n + sj + 1) * w]);
        }
    }
    Tensor::new(&[m, n, w], out).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn identity_points(m: usize, n: usize) -> Vec<Vec<usize>> {
    vec![(0..n).collect(); m]
}

#[test]
fn attention_rows_are_stochastic() {
    for (improved, seed) in [(true, 1), (false, 2)] {
        let block = Block::new(16, 4, 5, improved, seed);
        let (c, p) = inputs(&mut EanRng::seed_from_u64(seed), 5, 7, 16);
        let mut trace = AttentionTrace::capturing();
        block.run(&c, &p, GlsaHooks::default(), Some(&mut trace));
        let names: &[&str] = if improved { &["A_q", "A_p", "A_2", "A_3"] } else { &["A_q", "A_2", "A_3"] };
        for name in names {
            let a = &trace.captured[*name];
            let cols = *a.shape().last().unwrap();
            for row in a.data().chunks_exact(cols) {
                assert!(row.iter().all(|&x| x >= 0.0));
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "{name}: row sum {s}");
            }
        }
        let a3 = &trace.captured["A_3"];
        assert_eq!(a3.shape(), &[5, 4, 7, 8]);
    }
}

#[test]
fn group_permutation_equivariance() {
    let mut rng = EanRng::seed_from_u64(9);
    for improved in [true, false] {
        let block = Block::new(16, 2, 6, improved, 4);
        let (c, p) = inputs(&mut rng, 6, 5, 16);
        let base = block.run(&c, &p, GlsaHooks::default(), None);
        let mut gperm: Vec<usize> = (0..6).collect();
        gperm.shuffle(&mut rng);
        let id = identity_points(6, 5);
        let mut permuted = Block { cfg: block.cfg, store: block.store.clone() };
        let local = permuted.store.get("b.local").unwrap().clone();
        permuted.store.insert("b.local", permute_rows(&local, &gperm));
        let out = permuted.run(&permute(&c, &gperm, &id), &permute(&p, &gperm, &id), GlsaHooks::default(), None);
        let want = permute(&base, &gperm, &id);
        assert!(out.max_abs_diff(&want) <= 1e-12, "diff {}", out.max_abs_diff(&want));
    }
}

#[test]
fn within_group_permutation_equivariance() {
    let mut rng = EanRng::seed_from_u64(10);
    let block = Block::new(8, 2, 4, true, 5);
    let (c, p) = inputs(&mut rng, 4, 6, 8);
    let base = block.run(&c, &p, GlsaHooks::default(), None);
    let gid: Vec<usize> = (0..4).collect();
    let pperm: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let mut v: Vec<usize> = (0..6).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let out = block.run(&permute(&c, &gid, &pperm), &permute(&p, &gid, &pperm), GlsaHooks::default(), None);
    let want = permute(&base, &gid, &pperm);
    assert!(out.max_abs_diff(&want) <= 1e-12, "diff {}", out.max_abs_diff(&want));
}

fn group_slice(t: &Tensor, g: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.data()[g * per..(g + 1) * per]
}

#[test]
fn zeroed_step_two_makes_groups_independent() {
    let mut rng = EanRng::seed_from_u64(12);
    let block = Block::new(8, 2, 4, true, 6);
    let (c, p) = inputs(&mut rng, 4, 5, 8);
    let (mut c2, mut p2) = (c.clone(), p.clone());
    let per_c = 5 * 8;
    for x in &mut c2.data_mut()[2 * per_c..3 * per_c] {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in &mut p2.data_mut()[2 * 10..3 * 10] {
        *x = rng.random_range(0.0..1.0);
    }
    let hooks = GlsaHooks { zero_step2: true };
    let a = block.run(&c, &p, hooks, None);
    let b = block.run(&c2, &p2, hooks, None);
    for g in [0, 1, 3] {
        assert_eq!(group_slice(&a, g), group_slice(&b, g), "group {g} saw group 2");
    }
    assert_ne!(group_slice(&a, 2), group_slice(&b, 2));
    // with step 2 active the change reaches the other groups
    let a = block.run(&c, &p, GlsaHooks::default(), None);
    let b = block.run(&c2, &p2, GlsaHooks::default(), None);
    assert_ne!(group_slice(&a, 0), group_slice(&b, 0));
}

#[test]
fn branches_share_weights_but_not_attention() {
    let mut rng = EanRng::seed_from_u64(13);
    let block = Block::new(8, 2, 3, true, 7);
    let (c, p) = inputs(&mut rng, 3, 4, 8);
    let (_, p2) = inputs(&mut rng, 3, 4, 8);
    let single = block.run(&c, &p, GlsaHooks::default(), None);
    let mut tape = Tape::new();
    let bound = block.store.bind(&mut tape, false);
    let cv = tape.constant(c.clone());
    let pv = tape.constant(p.clone());
    let pv2 = tape.constant(p2);
    let (a, _) = glsa_forward_dual(&mut tape, &bound, "b", &block.cfg, (cv, pv), (cv, pv2), GlsaHooks::default(), None)
        .unwrap();
    assert_eq!(tape.value(a.out), &single);
}

#[test]
fn trace_records_each_site_once() {
    let block = Block::new(8, 2, 3, true, 8);
    let (c, p) = inputs(&mut EanRng::seed_from_u64(0), 3, 4, 8);
    let mut trace = AttentionTrace::default();
    block.run(&c, &p, GlsaHooks::default(), Some(&mut trace));
    for site in [AttnSite::LocalQ, AttnSite::LocalP, AttnSite::Groups, AttnSite::WithinGroup] {
        assert_eq!(trace.calls_at(site).count(), 1, "{site:?}");
    }
    let w = trace.calls_at(AttnSite::WithinGroup).next().unwrap();
    assert_eq!((w.batch, w.rows, w.cols), (3, 4, 5));
}

#[test]
fn shape_errors_are_reported() {
    let block = Block::new(8, 2, 3, true, 8);
    let mut tape = Tape::new();
    let bound = block.store.bind(&mut tape, false);
    let c = tape.constant(Tensor::zeros(&[2, 4, 8]));
    let p = tape.constant(Tensor::zeros(&[2, 4, 2]));
    assert!(glsa_forward(&mut tape, &bound, "b", &block.cfg, c, p, GlsaHooks::default(), None).is_err());
    let p = tape.constant(Tensor::zeros(&[2, 3, 2]));
    assert!(glsa_forward(&mut tape, &bound, "b", &block.cfg, c, p, GlsaHooks::default(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rows_stochastic_for_random_shapes(
        m in 1usize..6, n in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>(),
    ) {
        let block = Block::new(8, heads, m, seed % 2 == 0, seed);
        let (c, p) = inputs(&mut EanRng::seed_from_u64(seed), m, n, 8);
        let mut trace = AttentionTrace::capturing();
        let out = block.run(&c, &p, GlsaHooks::default(), Some(&mut trace));
        prop_assert!(out.is_finite());
        for (name, a) in &trace.captured {
            if !name.starts_with("A_") {
                continue;
            }
            let cols = *a.shape().last().unwrap();
            for row in a.data().chunks_exact(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
