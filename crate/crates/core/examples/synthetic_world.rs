//! Samples utterances from a synthetic speech domain and scores the oracle
//! transcriber and the Bayes speaker/emotion classifier on them.

use csplab::evalkit::token_error_rate;
use csplab::synthworld::{bayes_classify, make_domain, oracle_transcribe, sample_utterance, Candidates, DomainSizes};

fn main() -> csplab::Result<()> {
    let spec = make_domain(17, DomainSizes::default())?;
    println!("{} speakers, {} emotions", spec.n_speakers(), spec.n_emotions());
    let cands = Candidates { speakers: (0..8).collect(), emotions: (0..4).collect() };
    let (mut ter, mut hits) = (0.0, 0);
    let n = 40;
    for i in 0..n {
        let text: Vec<usize> = (0..6).map(|j| (i * 7 + j * 5) % 32).collect();
        let u = sample_utterance(&spec, i % 8, i % 4, &text, i as u64)?;
        if i == 0 {
            println!("text {:?}\nspeech {:?}", u.text, u.speech);
        }
        ter += token_error_rate(&oracle_transcribe(&spec, &u.speech, u.speaker, u.emotion)?, &u.text)?;
        let post = bayes_classify(&spec, &u.text, &u.speech, &cands)?;
        hits += usize::from(post.best_speaker() == u.speaker && post.best_emotion() == u.emotion);
    }
    println!("oracle TER {:.3}, Bayes identity accuracy {}/{n}", ter / n as f64, hits);
    Ok(())
}
