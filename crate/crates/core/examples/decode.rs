//! Constrained beam search over the item-code trie, compared with scoring
//! every item by teacher forcing, and the ranking metrics on the result.

use peso_cl::adapters::{Policy, StackOptions};
use peso_cl::data::assign_codes;
use peso_cl::decode::{constrained_beam_with, exhaustive_scores, hit_at_k, ndcg_at_k};
use peso_cl::model::{ItemCode, ToyRecModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> peso_cl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let item_cluster: Vec<usize> = (0..120).map(|i| i % 6).collect();
    let (book, trie) = assign_codes(&item_cluster, 3, 8, 11)?;
    let model = ToyRecModel::new(16, vec![8; 3], &mut rng)?;
    let stacks = model.fresh_stacks(Policy::SingleEvolving, 4, StackOptions::default(), &mut rng)?;
    let eff = model.effective(&stacks)?;

    let history: Vec<&ItemCode> = (0..10).map(|_| book.code(rng.random_range(0..120))).collect();
    let beam = constrained_beam_with(&eff, &history, &trie, 20, 10)?;
    let full = exhaustive_scores(&eff, &history, &book)?;
    println!("{:>4} {:>6} {:>9} {:>6} {:>9}", "rank", "beam", "score", "exact", "score");
    for (i, (b, f)) in beam.entries.iter().zip(&full.entries).enumerate() {
        println!("{:>4} {:>6} {:>9.4} {:>6} {:>9.4}", i + 1, b.0, b.1, f.0, f.1);
    }

    let truth = full.entries[3].0;
    println!(
        "\nitem {truth} as ground truth: Hit@5 {} NDCG@5 {:.4} NDCG@10 {:.4}",
        hit_at_k(&beam, truth, 5),
        ndcg_at_k(&beam, truth, 5),
        ndcg_at_k(&beam, truth, 10)
    );
    Ok(())
}
