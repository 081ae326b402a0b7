//! Synthetic interactions with planted aspect structure, and a
//! permutation-invariant score for how well learned aspects recover it.

use rand_distr::Gamma;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Membership {
    /// Every entity belongs to exactly one aspect.
    OneHot,
    /// Dirichlet(alpha) mixtures over aspects.
    Mixed { alpha: f64 },
}

/// Ground truth behind a generated matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedWorld {
    pub aspects: usize,
    /// `m × A*` rows on the simplex.
    pub user_mix: Tensor,
    /// `n × A*` rows on the simplex.
    pub item_mix: Tensor,
    /// Argmax of each user mixture (lowest index on ties).
    pub user_aspect: Vec<usize>,
    pub item_aspect: Vec<usize>,
    pub seed: u64,
}

/// One-hot planted world: `p(u,i) = density · A* · [aspect(u) = aspect(i)]`.
pub fn generate(m: usize, n: usize, aspects: usize, density: f64, seed: u64) -> Result<(InteractionMatrix, PlantedWorld)> {
    generate_with(m, n, aspects, density, Membership::OneHot, seed)
}

/// Bernoulli draws with `p(u,i) = density · A* · ⟨mix_u, mix_i⟩` clipped to `[0, 1]`.
pub fn generate_with(
    m: usize,
    n: usize,
    aspects: usize,
    density: f64,
    membership: Membership,
    seed: u64,
) -> Result<(InteractionMatrix, PlantedWorld)> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::Config(format!("density must be in (0, 1), got {density}")));
    }
    if aspects == 0 || m == 0 || n == 0 {
        return Err(Error::Config("users, items and aspects must all be >= 1".into()));
    }
    let mut rng = RngState::derived(seed, 0);
    let user_mix = mixtures(m, aspects, membership, &mut rng)?;
    let item_mix = mixtures(n, aspects, membership, &mut rng)?;
    let mut pairs = Vec::new();
    let scale = density * aspects as f64;
    for u in 0..m {
        let mu = user_mix.row_slice(u);
        for i in 0..n {
            let dot: f64 = mu.iter().zip(item_mix.row_slice(i)).map(|(a, b)| a * b).sum();
            let p = (scale * dot).clamp(0.0, 1.0);
            if rng.uniform() < p {
                pairs.push((u as u32, i as u32));
            }
        }
    }
    let matrix = InteractionMatrix::from_pairs(m, n, &pairs)?;
    let world = PlantedWorld {
        aspects,
        user_aspect: argmax_rows(&user_mix),
        item_aspect: argmax_rows(&item_mix),
        user_mix,
        item_mix,
        seed,
    };
    Ok((matrix, world))
}

fn mixtures(count: usize, aspects: usize, membership: Membership, rng: &mut RngState) -> Result<Tensor> {
    let mut t = Tensor::zeros(count, aspects);
    match membership {
        Membership::OneHot => {
            // Balanced blocks in random order.
            let mut labels: Vec<usize> = (0..count).map(|k| k % aspects).collect();
            rng.shuffle(&mut labels);
            for (r, a) in labels.into_iter().enumerate() {
                t.set(r, a, 1.0);
            }
        }
        Membership::Mixed { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("mixture alpha {alpha}: {e}")))?;
            for r in 0..count {
                let row = t.row_slice_mut(r);
                for v in row.iter_mut() {
                    *v = rng.sample(&gamma).max(f64::MIN_POSITIVE);
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(t)
}

/// Row argmax with ties to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Empirical interaction density inside planted blocks and across them.
pub fn block_densities(matrix: &InteractionMatrix, world: &PlantedWorld) -> (f64, f64) {
    let (mut within, mut cross) = (0usize, 0usize);
    for (u, i) in matrix.pairs() {
        if world.user_aspect[u as usize] == world.item_aspect[i as usize] {
            within += 1;
        } else {
            cross += 1;
        }
    }
    let mut users_per = vec![0usize; world.aspects];
    let mut items_per = vec![0usize; world.aspects];
    world.user_aspect.iter().for_each(|&a| users_per[a] += 1);
    world.item_aspect.iter().for_each(|&a| items_per[a] += 1);
    let within_cells: usize = users_per.iter().zip(&items_per).map(|(u, i)| u * i).sum();
    let cross_cells = matrix.num_users() * matrix.num_items() - within_cells;
    let ratio = |hits: usize, cells: usize| if cells == 0 { 0.0 } else { hits as f64 / cells as f64 };
    (ratio(within, within_cells), ratio(cross, cross_cells))
}

/// Confusion counts `[learned][planted]`, padded to a square of side
/// `max(learned_aspects, planted_aspects)`.
pub fn confusion(learned: &[usize], planted: &[usize], learned_aspects: usize, planted_aspects: usize) -> Result<Vec<Vec<usize>>> {
    if learned.len() != planted.len() {
        return Err(Error::Contract(format!(
            "recovery score: {} learned labels vs {} planted",
            learned.len(),
            planted.len()
        )));
    }
    let k = learned_aspects.max(planted_aspects).max(1);
    let mut c = vec![vec![0usize; k]; k];
    for (&l, &p) in learned.iter().zip(planted) {
        if l >= learned_aspects || p >= planted_aspects {
            return Err(Error::Contract(format!("label out of range: learned {l}, planted {p}")));
        }
        c[l][p] += 1;
    }
    Ok(c)
}

/// Largest total weight of a one-to-one assignment of rows to columns
/// (Hungarian method on negated weights).
pub fn max_matching(weights: &[Vec<usize>]) -> usize {
    let n = weights.len();
    if n == 0 {
        return 0;
    }
    let cost = |i: usize, j: usize| -(weights[i - 1][j - 1] as i64);
    // Potentials u (rows), v (columns); p[j] = row matched to column j; 1-based.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| weights[p[j] - 1][j - 1]).sum()
}

/// Same optimum as [`max_matching`] by trying every permutation.
pub fn max_matching_exhaustive(weights: &[Vec<usize>]) -> usize {
    fn go(weights: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == weights.len() {
            return 0;
        }
        let mut best = 0;
        for j in 0..weights.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(weights[row][j] + go(weights, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(weights, 0, &mut vec![false; weights.len()])
}

/// Chance-adjusted agreement between learned and planted labels under the
/// best relabeling: `(acc − 1/A*) / (1 − 1/A*)`, where `acc` is the
/// matched fraction. Equals 1 for a perfect relabeling and is near 0 for
/// random labels. With a single planted aspect every labeling scores 1.
pub fn aspect_recovery_score(learned: &[usize], planted: &[usize], learned_aspects: usize, planted_aspects: usize) -> Result<f64> {
    if learned.is_empty() {
        return Err(Error::Contract("recovery score of zero entities".into()));
    }
    if planted_aspects <= 1 {
        return Ok(1.0);
    }
    let c = confusion(learned, planted, learned_aspects, planted_aspects)?;
    let acc = max_matching(&c) as f64 / learned.len() as f64;
    let chance = 1.0 / planted_aspects as f64;
    Ok((acc - chance) / (1.0 - chance))
}
