use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, Graph};
use crate::error::{Error, Result};

/// Seeded partition of the nodes into two non-empty subsets, each sorted.
pub fn random_split_substructures(g: &Graph, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let m = g.num_nodes();
    if m < 2 {
        return Err(Error::Graph(format!("{}: random split needs at least 2 nodes, got {m}", g.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<usize> = (0..m).collect();
    nodes.shuffle(&mut rng);
    let cut = rng.random_range(1..m);
    let mut a = nodes[..cut].to_vec();
    let mut b = nodes[cut..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Gives every graph lacking substructures a random two-way split, seeded by
/// `seed` and the graph's position in the dataset.
pub fn ensure_substructures(ds: &mut DatasetSplit, seed: u64) -> Result<()> {
    let graphs = ds.train.iter_mut().chain(ds.validation.iter_mut()).chain(ds.test.iter_mut());
    for (i, g) in graphs.enumerate() {
        if g.substructures().is_some() {
            continue;
        }
        let (a, b) = random_split_substructures(g, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        *g = g.clone().with_substructures(vec![a, b])?;
    }
    Ok(())
}
