//! Similarity and error metrics: cosine rescaling, token error rate,
//! min-max curve normalization and the learned reference evaluator.

use csplab::charprobe::Task;
use csplab::evalkit::{cosine_similarity, min_max_normalize, rescale_cosine, token_error_rate, train_reference_evaluator, EvaluatorConfig};
use csplab::synthworld::{make_domain, sample_utterance, DomainSizes};

fn main() -> csplab::Result<()> {
    let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0])?;
    println!("cosine {:.4} -> rescaled {:.4}", c.value, rescale_cosine(c.value));
    println!("TER {:.3}", token_error_rate(&[1, 2, 4, 5], &[1, 2, 3, 4])?);
    println!("normalized {:?}", min_max_normalize(&[2.0, 4.0, 6.0])?.values);

    let spec = make_domain(17, DomainSizes::default())?;
    let cfg = EvaluatorConfig::default();
    let (speakers, emotions) = ([32, 33, 34, 35], [4, 5]);
    let ev = train_reference_evaluator(&spec, &speakers, &emotions, &cfg, 1)?;
    let text: Vec<usize> = (0..8).collect();
    let a = sample_utterance(&spec, 32, 4, &text, 100)?;
    let b = sample_utterance(&spec, 32, 5, &text, 101)?;
    let d = sample_utterance(&spec, 35, 4, &text, 102)?;
    println!("speaker sim: same {:.3}, different {:.3}", ev.similarity(Task::Speaker, &a.speech, &b.speech)?, ev.similarity(Task::Speaker, &a.speech, &d.speech)?);
    println!("emotion sim: same {:.3}, different {:.3}", ev.similarity(Task::Emotion, &a.speech, &d.speech)?, ev.similarity(Task::Emotion, &a.speech, &b.speech)?);
    Ok(())
}
