use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Utterance;
use crate::codeclm::TokenSequence;
use crate::error::{invalid, Result};

/// Index of utterances by (speaker, emotion), in corpus order.
pub fn group_by_identity(utts: &[Utterance]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        map.entry((u.speaker, u.emotion)).or_default().push(i);
    }
    map
}

/// One epoch of shuffled training sequences. With probability
/// `prompt_prob` an utterance is prefixed by another utterance of the same
/// speaker and emotion, matching the prompted generation layout.
pub fn prompted_batches(
    utts: &[Utterance],
    batch_size: usize,
    prompt_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<TokenSequence>>> {
    if utts.is_empty() {
        return Err(invalid!("empty training corpus"));
    }
    if batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if !(0.0..=1.0).contains(&prompt_prob) {
        return Err(invalid!("prompt probability {prompt_prob} outside [0, 1]"));
    }
    let groups = group_by_identity(utts);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(rng);
    let seqs: Vec<TokenSequence> = order
        .iter()
        .map(|&i| {
            let u = &utts[i];
            let pool = &groups[&(u.speaker, u.emotion)];
            let roll: f64 = rng.gen();
            if pool.len() > 1 && roll < prompt_prob {
                // any other member of the pool
                let k = rng.gen_range(0..pool.len() - 1);
                let j = pool.iter().copied().filter(|&j| j != i).nth(k).expect("pool has another member");
                u.tokens().prefixed(&utts[j].tokens())
            } else {
                u.tokens()
            }
        })
        .collect();
    Ok(seqs.chunks(batch_size).map(<[TokenSequence]>::to_vec).collect())
}
