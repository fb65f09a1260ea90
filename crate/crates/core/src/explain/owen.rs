use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AttributionMode, AttributionResult, Coalition, ExplainError, PartitionTree, ValueFunction};

pub const MAX_BLOCKS: usize = 12;
pub const MAX_BLOCK_SIZE: usize = 12;
pub const MAX_PLAYERS: usize = 64;
const MAX_BRUTEFORCE: usize = 12;

/// `s!(n−s−1)!/n!` for `s = 0..n`.
fn shapley_weights(n: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect()
}

fn block_mask(members: &[usize]) -> Coalition {
    members.iter().fold(0, |m, &i| m | (1 << i))
}

/// Coalition of the members of `members` selected by the bits of `t`.
fn select(members: &[usize], t: usize) -> Coalition {
    members
        .iter()
        .enumerate()
        .filter(|(j, _)| t & (1 << j) != 0)
        .fold(0, |m, (_, &i)| m | (1 << i))
}

fn check_players(v: &ValueFunction, tree: &PartitionTree) -> Result<(), ExplainError> {
    if v.n_players() != tree.n_leaves() {
        return Err(ExplainError::InvalidTree(format!(
            "tree has {} leaves but the game has {} players",
            tree.n_leaves(),
            v.n_players()
        )));
    }
    Ok(())
}

/// Exact two-level Owen values.
///
/// For each block `k` and each union `Q` of other blocks, all `2^|B_k|`
/// coalitions `Q ∪ T` are evaluated once; the memo makes repeated queries free.
pub fn owen_exact(v: &ValueFunction, tree: &PartitionTree) -> Result<AttributionResult, ExplainError> {
    check_players(v, tree)?;
    let blocks = tree.blocks();
    let m = blocks.len();
    let b_max = blocks.iter().map(|b| b.members.len()).max().unwrap_or(0);
    if m > MAX_BLOCKS || b_max > MAX_BLOCK_SIZE {
        return Err(ExplainError::BudgetExceeded(format!(
            "{m} blocks of up to {b_max} members; exact mode allows {MAX_BLOCKS} × {MAX_BLOCK_SIZE}"
        )));
    }
    let before = v.evaluations();
    let masks: Vec<Coalition> = blocks.iter().map(|b| block_mask(&b.members)).collect();
    let outer = shapley_weights(m);
    let mut phi = vec![0.0; tree.n_leaves()];
    for (k, block) in blocks.iter().enumerate() {
        let others: Vec<Coalition> = (0..m).filter(|&j| j != k).map(|j| masks[j]).collect();
        let b = block.members.len();
        let inner = shapley_weights(b);
        let partials: Vec<Vec<f64>> = (0..1usize << (m - 1))
            .into_par_iter()
            .map(|r| {
                let q = others
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| r & (1 << j) != 0)
                    .fold(0, |acc, (_, &mk)| acc | mk);
                let w_r = outer[r.count_ones() as usize];
                let vals = (0..1usize << b)
                    .map(|t| v.value(q | select(&block.members, t)))
                    .collect::<Result<Vec<f64>, _>>()?;
                let mut out = vec![0.0; b];
                for (j, o) in out.iter_mut().enumerate() {
                    let bit = 1 << j;
                    for t in (0..1usize << b).filter(|t| t & bit == 0) {
                        *o += inner[t.count_ones() as usize] * (vals[t | bit] - vals[t]);
                    }
                    *o *= w_r;
                }
                Ok(out)
            })
            .collect::<Result<_, ExplainError>>()?;
        for part in partials {
            for (&i, p) in block.members.iter().zip(part) {
                phi[i] += p;
            }
        }
    }
    Ok(AttributionResult {
        phi,
        std_err: None,
        base_value: v.value(0)?,
        full_value: v.value(v.all())?,
        mode: AttributionMode::Exact,
        evaluations: v.evaluations() - before,
    })
}

/// Owen sampling: random block order, random member order inside each block,
/// marginal contributions accumulated along the resulting player order.
pub fn owen_sampled(
    v: &ValueFunction,
    tree: &PartitionTree,
    n_perm: usize,
    seed: u64,
) -> Result<AttributionResult, ExplainError> {
    check_players(v, tree)?;
    let n_perm = n_perm.max(1);
    let before = v.evaluations();
    let n = tree.n_leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut order: Vec<usize> = (0..tree.blocks().len()).collect();
    let mut members: Vec<Vec<usize>> = tree.blocks().iter().map(|b| b.members.clone()).collect();
    let base = v.value(0)?;
    for p in 0..n_perm {
        order.shuffle(&mut rng);
        for mb in members.iter_mut() {
            mb.shuffle(&mut rng);
        }
        let mut s: Coalition = 0;
        let mut prev = base;
        for &k in &order {
            for &i in &members[k] {
                s |= 1 << i;
                let cur = v.value(s)?;
                let x = cur - prev;
                prev = cur;
                let delta = x - mean[i];
                mean[i] += delta / (p + 1) as f64;
                m2[i] += delta * (x - mean[i]);
            }
        }
    }
    let std_err = m2
        .iter()
        .map(|&q| {
            if n_perm > 1 {
                (q / (n_perm - 1) as f64 / n_perm as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(AttributionResult {
        phi: mean,
        std_err: Some(std_err),
        base_value: base,
        full_value: v.value(v.all())?,
        mode: AttributionMode::Sampled { n_permutations: n_perm, seed },
        evaluations: v.evaluations() - before,
    })
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_bruteforce(v: &ValueFunction, n: usize) -> Result<Vec<f64>, ExplainError> {
    if n > MAX_BRUTEFORCE || n > v.n_players() {
        return Err(ExplainError::BudgetExceeded(format!(
            "brute-force Shapley over {n} players (limit {MAX_BRUTEFORCE}, game has {})",
            v.n_players()
        )));
    }
    let w = shapley_weights(n);
    let vals = (0..1u64 << n).map(|s| v.value(s)).collect::<Result<Vec<f64>, _>>()?;
    Ok((0..n)
        .map(|i| {
            let bit = 1u64 << i;
            (0..1u64 << n)
                .filter(|s| s & bit == 0)
                .map(|s| w[s.count_ones() as usize] * (vals[(s | bit) as usize] - vals[s as usize]))
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::Block;
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tree(blocks: &[&[usize]]) -> PartitionTree {
        let n = blocks.iter().map(|b| b.len()).sum();
        PartitionTree::new(
            blocks
                .iter()
                .enumerate()
                .map(|(k, b)| Block {
                    label: k.to_string(),
                    members: b.to_vec(),
                })
                .collect(),
            n,
        )
        .unwrap()
    }

    // A non-additive game with pairwise and triple interactions.
    fn random_game(n: usize, seed: u64) -> impl Fn(Coalition) -> Result<f64, ExplainError> + Send + Sync {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pair: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let triple: f64 = rng.gen_range(-3.0..3.0);
        move |s| {
            let on: Vec<usize> = (0..n).filter(|&i| s & (1 << i) != 0).collect();
            let mut v: f64 = on.iter().map(|&i| c[i]).sum();
            for &i in &on {
                for &j in &on {
                    if i < j {
                        v += pair[i * n + j];
                    }
                }
            }
            if on.len() >= 3 {
                v += triple * (on.len() as f64).sqrt();
            }
            Ok(v.sin() + 0.3 * v)
        }
    }

    #[test]
    fn additive_game_returns_coefficients() {
        let c = [0.5, -1.25, 3.0, 0.0, 2.5];
        let v = ValueFunction::new(5, |s| Ok((0..5).filter(|i| s & (1 << i) != 0).map(|i| c[i]).sum()));
        let r = owen_exact(&v, &tree(&[&[0, 3], &[1], &[2, 4]])).unwrap();
        for (p, c) in r.phi.iter().zip(c) {
            assert!((p - c).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_enumerated_two_player_game() {
        let table = [0.0, 1.0, 2.0, 4.0];
        let v = ValueFunction::new(2, |s| Ok(table[s as usize]));
        let r = owen_exact(&v, &PartitionTree::one_block(2)).unwrap();
        assert!((r.phi[0] - 1.5).abs() < 1e-12);
        assert!((r.phi[1] - 2.5).abs() < 1e-12);
        assert_eq!((r.base_value, r.full_value), (0.0, 4.0));
    }

    #[test]
    fn shapley_single_player_and_majority() {
        let v = ValueFunction::new(1, |s| Ok(if s == 1 { 3.5 } else { 1.0 }));
        assert_eq!(shapley_bruteforce(&v, 1).unwrap(), vec![2.5]);
        let maj = ValueFunction::new(3, |s| Ok(if s.count_ones() >= 2 { 1.0 } else { 0.0 }));
        for p in shapley_bruteforce(&maj, 3).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_players_share_equally() {
        let v = ValueFunction::new(5, |s| Ok((s.count_ones() as f64).powi(2)));
        let phi = shapley_bruteforce(&v, 5).unwrap();
        assert!(phi.iter().all(|p| (p - phi[0]).abs() < 1e-12));
        let r = owen_exact(&v, &tree(&[&[0, 1], &[2, 3, 4]])).unwrap();
        assert!((r.phi[0] - r.phi[1]).abs() < 1e-9);
        assert!((r.phi[2] - r.phi[4]).abs() < 1e-9);
    }

    #[test]
    fn bruteforce_budget() {
        let v = ValueFunction::new(13, |_| Ok(0.0));
        assert!(matches!(shapley_bruteforce(&v, 13), Err(ExplainError::BudgetExceeded(_))));
    }

    #[test]
    fn exact_budget() {
        let v = ValueFunction::new(13, |_| Ok(0.0));
        assert!(matches!(owen_exact(&v, &PartitionTree::one_block(13)), Err(ExplainError::BudgetExceeded(_))));
        assert!(matches!(owen_exact(&v, &PartitionTree::singletons(13)), Err(ExplainError::BudgetExceeded(_))));
    }

    #[test]
    fn dummy_player_gets_exactly_zero() {
        let g = random_game(5, 4);
        // Player 5 is ignored by the game.
        let v = ValueFunction::new(6, move |s| g(s & 0b11111));
        let r = owen_exact(&v, &tree(&[&[0, 5, 2], &[1, 3], &[4]])).unwrap();
        assert_eq!(r.phi[5], 0.0);
    }

    #[test]
    fn sampled_matches_exact_within_three_standard_errors() {
        let v = ValueFunction::new(6, random_game(6, 9));
        let t = tree(&[&[0, 1], &[2, 3, 4], &[5]]);
        let exact = owen_exact(&v, &t).unwrap();
        let sampled = owen_sampled(&v, &t, 10_000, 3).unwrap();
        let se = sampled.std_err.as_ref().unwrap();
        for i in 0..6 {
            let diff = (sampled.phi[i] - exact.phi[i]).abs();
            assert!(diff <= 3.0 * se[i] + 1e-12, "player {i}: diff {diff} se {}", se[i]);
        }
    }

    #[test]
    fn sampled_additive_is_exact_after_one_permutation() {
        let c = [1.0, -2.0, 0.5, 4.0];
        let v = ValueFunction::new(4, |s| Ok((0..4).filter(|i| s & (1 << i) != 0).map(|i| c[i]).sum()));
        let r = owen_sampled(&v, &tree(&[&[0, 2], &[1, 3]]), 1, 0).unwrap();
        assert_eq!(r.phi, c.to_vec());
    }

    #[test]
    fn sampled_is_deterministic() {
        let v = ValueFunction::new(6, random_game(6, 2));
        let t = tree(&[&[0, 1, 2], &[3, 4, 5]]);
        assert_eq!(owen_sampled(&v, &t, 50, 7).unwrap().phi, owen_sampled(&v, &t, 50, 7).unwrap().phi);
    }

    #[test]
    fn evaluation_count_bound() {
        let v = ValueFunction::new(8, random_game(8, 1));
        let t = tree(&[&[0, 1, 2], &[3], &[4, 5], &[6, 7]]);
        let r = owen_exact(&v, &t).unwrap();
        let (m, b) = (4u32, 3u32);
        assert!(r.evaluations <= (1 << m) + (m as usize) * (1 << (m - 1)) * (1 << b));
        assert!(r.evaluations <= 1 << 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn efficiency_and_shapley_limits(seed in 0u64..10_000, n in 1usize..=8) {
            let v = ValueFunction::new(n, random_game(n, seed));
            let all = v.all();
            let brute = shapley_bruteforce(&v, n).unwrap();
            for t in [PartitionTree::singletons(n), PartitionTree::one_block(n)] {
                let r = owen_exact(&v, &t).unwrap();
                let total: f64 = r.phi.iter().sum();
                let gap = v.value(all).unwrap() - v.value(0).unwrap();
                prop_assert!((total - gap).abs() <= 1e-6 * r.full_value.abs().max(1.0));
                for (a, b) in r.phi.iter().zip(&brute) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn efficiency_for_arbitrary_partitions(seed in 0u64..10_000, cuts in proptest::collection::vec(any::<bool>(), 7)) {
            let n = 8;
            let mut blocks: Vec<Vec<usize>> = vec![vec![0]];
            for i in 1..n {
                if cuts[i - 1] {
                    blocks.push(vec![]);
                }
                blocks.last_mut().unwrap().push(i);
            }
            let refs: Vec<&[usize]> = blocks.iter().map(|b| b.as_slice()).collect();
            let v = ValueFunction::new(n, random_game(n, seed));
            let r = owen_exact(&v, &tree(&refs)).unwrap();
            let total: f64 = r.phi.iter().sum();
            prop_assert!((total - (r.full_value - r.base_value)).abs() <= 1e-6 * r.full_value.abs().max(1.0));
        }
    }
}
